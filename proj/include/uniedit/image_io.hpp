#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "uniedit/tensor.hpp"

namespace uniedit {

/// 8-bit interleaved image, row-major. channels is 1 (gray) or 3 (RGB).
struct PngImage {
    int64_t height = 0;
    int64_t width = 0;
    int64_t channels = 0;
    std::vector<uint8_t> pixels;

    uint8_t at(int64_t y, int64_t x, int64_t c) const {
        return pixels[static_cast<size_t>((y * width + x) * channels + c)];
    }
};

/// Decodes a PNG. Palette/16-bit/alpha inputs are folded to 8-bit gray or
/// RGB.
PngImage read_png(const std::string& path);

/// Encodes 8-bit gray or RGB; writes atomically (temp file + rename).
void write_png(const std::string& path, const PngImage& img);

// --- video frame directories -----------------------------------------------
// Frames are PNGs named frame_%04d.png, contiguous from 0. Pixel videos are
// (F, 3, H, W) float tensors in [-1, 1]; the mapping is
//   float = byte / 255 * 2 - 1      on read
//   byte  = round((float+1)/2*255)  clipped to [0,255] on write.

/// Reads all frames, resizes (bilinear) to target_h x target_w when they
/// differ, and subsamples N source frames to frames_out via
/// f_i = floor(i * N / frames_out). frames_out <= 0 keeps all frames.
Tensor read_video_frames(const std::string& dir, int64_t target_h = 0, int64_t target_w = 0,
                         int64_t frames_out = 0);

void write_video_frames(const std::string& dir, const Tensor& video);

/// Reads mask_%04d.png grayscale frames with pixels strictly in {0, 255};
/// returns a binary (F, H, W) tensor with foreground = 1.
Tensor read_mask_frames(const std::string& dir, int64_t expected_frames = 0);

void write_mask_frames(const std::string& dir, const Tensor& mask_stack);

/// Bilinear resize of one (C, H, W) or (F, C, H, W) float tensor.
Tensor resize_bilinear(const Tensor& t, int64_t out_h, int64_t out_w);

// --- pixel <-> latent adapters ---------------------------------------------
// The denoiser works on C-channel latents; RGB maps to the first three
// channels, any extra channels are zero on encode and dropped on decode.

Tensor pixels_to_latent(const Tensor& video, int64_t latent_channels);
Tensor latent_to_pixels(const Tensor& latent);

}  // namespace uniedit
