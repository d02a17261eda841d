#include "uniedit/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <memory>

namespace uniedit {

namespace {

std::string frame_name(const char* stem, int64_t index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%s_%04lld.png", stem, static_cast<long long>(index));
    return buf;
}

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

PngImage read_png(const std::string& path) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw IoError("cannot open " + path);

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("png_create_read_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw IoError("png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("failed to decode " + path);
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);

    const png_uint_32 w = png_get_image_width(png, info);
    const png_uint_32 h = png_get_image_height(png, info);
    const png_byte color = png_get_color_type(png, info);
    const png_byte depth = png_get_bit_depth(png, info);

    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);

    const int64_t channels = png_get_channels(png, info);
    if (channels != 1 && channels != 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError(path + ": unsupported channel count after decode");
    }

    PngImage img;
    img.height = h;
    img.width = w;
    img.channels = channels;
    img.pixels.resize(static_cast<size_t>(h) * w * static_cast<size_t>(channels));
    std::vector<png_bytep> rows(h);
    for (png_uint_32 y = 0; y < h; ++y) {
        rows[y] = img.pixels.data() + static_cast<size_t>(y) * w * static_cast<size_t>(channels);
    }
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

void write_png(const std::string& path, const PngImage& img) {
    if (img.channels != 1 && img.channels != 3) {
        throw IoError("write_png supports 1 or 3 channels, got " + std::to_string(img.channels));
    }
    if (img.pixels.size() !=
        static_cast<size_t>(img.height) * static_cast<size_t>(img.width) *
            static_cast<size_t>(img.channels)) {
        throw IoError("write_png: pixel buffer does not match dimensions");
    }
    const std::string tmp = path + ".tmp";
    {
        FilePtr fp(std::fopen(tmp.c_str(), "wb"));
        if (!fp) throw IoError("cannot open " + tmp + " for writing");

        png_structp png =
            png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
        if (!png) throw IoError("png_create_write_struct failed");
        png_infop info = png_create_info_struct(png);
        if (!info) {
            png_destroy_write_struct(&png, nullptr);
            throw IoError("png_create_info_struct failed");
        }
        if (setjmp(png_jmpbuf(png))) {
            png_destroy_write_struct(&png, &info);
            throw IoError("failed to encode " + path);
        }
        png_init_io(png, fp.get());
        png_set_IHDR(png, info, static_cast<png_uint_32>(img.width),
                     static_cast<png_uint_32>(img.height), 8,
                     img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
                     PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
        png_write_info(png, info);
        for (int64_t y = 0; y < img.height; ++y) {
            png_write_row(png, const_cast<png_bytep>(img.pixels.data() +
                                                     static_cast<size_t>(y) * img.width *
                                                         static_cast<size_t>(img.channels)));
        }
        png_write_end(png, nullptr);
        png_destroy_write_struct(&png, &info);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("rename " + tmp + " -> " + path + " failed: " + ec.message());
}

Tensor resize_bilinear(const Tensor& t, int64_t out_h, int64_t out_w) {
    if (t.rank() != 3 && t.rank() != 4) {
        throw ShapeError("resize_bilinear wants (C,H,W) or (F,C,H,W), got " + shape_string(t));
    }
    if (out_h < 1 || out_w < 1) throw ShapeError("resize target must be positive");
    const bool batched = t.rank() == 4;
    const int64_t f = batched ? t.dim(0) : 1;
    const int64_t c = t.dim(batched ? 1 : 0);
    const int64_t h = t.dim(batched ? 2 : 1);
    const int64_t w = t.dim(batched ? 3 : 2);
    Tensor out(batched ? std::vector<int64_t>{f, c, out_h, out_w}
                       : std::vector<int64_t>{c, out_h, out_w});
    const double sy = static_cast<double>(h) / out_h;
    const double sx = static_cast<double>(w) / out_w;
    for (int64_t fi = 0; fi < f; ++fi) {
        for (int64_t ci = 0; ci < c; ++ci) {
            const float* src = t.data() + ((batched ? fi * c : 0) + ci) * h * w;
            float* dst = out.data() + ((batched ? fi * c : 0) + ci) * out_h * out_w;
            for (int64_t y = 0; y < out_h; ++y) {
                // align sample centers: src_y = (y + .5) * scale - .5
                const double fy = (y + 0.5) * sy - 0.5;
                const int64_t y0 = std::clamp<int64_t>(static_cast<int64_t>(std::floor(fy)), 0,
                                                       h - 1);
                const int64_t y1 = std::min<int64_t>(y0 + 1, h - 1);
                const double wy = std::clamp(fy - static_cast<double>(y0), 0.0, 1.0);
                for (int64_t x = 0; x < out_w; ++x) {
                    const double fx = (x + 0.5) * sx - 0.5;
                    const int64_t x0 = std::clamp<int64_t>(static_cast<int64_t>(std::floor(fx)),
                                                           0, w - 1);
                    const int64_t x1 = std::min<int64_t>(x0 + 1, w - 1);
                    const double wx = std::clamp(fx - static_cast<double>(x0), 0.0, 1.0);
                    const double v00 = src[y0 * w + x0], v01 = src[y0 * w + x1];
                    const double v10 = src[y1 * w + x0], v11 = src[y1 * w + x1];
                    dst[y * out_w + x] = static_cast<float>(
                        (1 - wy) * ((1 - wx) * v00 + wx * v01) +
                        wy * ((1 - wx) * v10 + wx * v11));
                }
            }
        }
    }
    return out;
}

namespace {

int64_t count_frames(const std::string& dir, const char* stem) {
    int64_t n = 0;
    while (std::filesystem::exists(std::filesystem::path(dir) / frame_name(stem, n))) ++n;
    return n;
}

}  // namespace

Tensor read_video_frames(const std::string& dir, int64_t target_h, int64_t target_w,
                         int64_t frames_out) {
    const int64_t n_src = count_frames(dir, "frame");
    if (n_src == 0) throw IoError("no frame_0000.png found in " + dir);
    const int64_t f_out = frames_out > 0 ? frames_out : n_src;
    if (f_out > n_src) {
        throw IoError("requested " + std::to_string(f_out) + " frames but " + dir +
                      " holds only " + std::to_string(n_src));
    }

    Tensor video;
    int64_t vh = 0, vw = 0;
    for (int64_t i = 0; i < f_out; ++i) {
        const int64_t src_index = i * n_src / f_out;  // uniform temporal subsample
        const std::string path =
            (std::filesystem::path(dir) / frame_name("frame", src_index)).string();
        PngImage img = read_png(path);
        Tensor frame({3, img.height, img.width});
        for (int64_t y = 0; y < img.height; ++y) {
            for (int64_t x = 0; x < img.width; ++x) {
                for (int64_t c = 0; c < 3; ++c) {
                    const uint8_t px = img.channels == 1 ? img.at(y, x, 0) : img.at(y, x, c);
                    frame.at(c, y, x) = static_cast<float>(px) / 255.0f * 2.0f - 1.0f;
                }
            }
        }
        const int64_t th = target_h > 0 ? target_h : img.height;
        const int64_t tw = target_w > 0 ? target_w : img.width;
        if (th != img.height || tw != img.width) frame = resize_bilinear(frame, th, tw);
        if (i == 0) {
            vh = frame.dim(1);
            vw = frame.dim(2);
            video = Tensor({f_out, 3, vh, vw});
        } else if (frame.dim(1) != vh || frame.dim(2) != vw) {
            throw IoError(path + ": frame size differs from frame 0");
        }
        std::memcpy(video.data() + i * 3 * vh * vw, frame.data(),
                    sizeof(float) * static_cast<size_t>(frame.numel()));
    }
    return video;
}

void write_video_frames(const std::string& dir, const Tensor& video) {
    require_rank(video, 4, "video");
    if (video.dim(1) != 3) {
        throw ShapeError("write_video_frames expects 3 channels, got " +
                         std::to_string(video.dim(1)));
    }
    std::filesystem::create_directories(dir);
    const int64_t f = video.dim(0), h = video.dim(2), w = video.dim(3);
    for (int64_t i = 0; i < f; ++i) {
        PngImage img;
        img.height = h;
        img.width = w;
        img.channels = 3;
        img.pixels.resize(static_cast<size_t>(h * w * 3));
        for (int64_t y = 0; y < h; ++y) {
            for (int64_t x = 0; x < w; ++x) {
                for (int64_t c = 0; c < 3; ++c) {
                    const float v = (video.at(i, c, y, x) + 1.0f) / 2.0f * 255.0f;
                    const long q = std::lround(std::clamp(v, 0.0f, 255.0f));
                    img.pixels[static_cast<size_t>((y * w + x) * 3 + c)] =
                        static_cast<uint8_t>(q);
                }
            }
        }
        write_png((std::filesystem::path(dir) / frame_name("frame", i)).string(), img);
    }
}

Tensor read_mask_frames(const std::string& dir, int64_t expected_frames) {
    const int64_t n = count_frames(dir, "mask");
    if (n == 0) throw IoError("no mask_0000.png found in " + dir);
    if (expected_frames > 0 && n != expected_frames) {
        throw IoError("mask frame count " + std::to_string(n) + " does not match video frames " +
                      std::to_string(expected_frames));
    }
    Tensor stack;
    for (int64_t i = 0; i < n; ++i) {
        const std::string path = (std::filesystem::path(dir) / frame_name("mask", i)).string();
        PngImage img = read_png(path);
        if (i == 0) stack = Tensor({n, img.height, img.width});
        if (img.height != stack.dim(1) || img.width != stack.dim(2)) {
            throw IoError(path + ": mask size differs from mask 0");
        }
        for (int64_t y = 0; y < img.height; ++y) {
            for (int64_t x = 0; x < img.width; ++x) {
                const uint8_t px = img.at(y, x, 0);
                if (px != 0 && px != 255) {
                    throw IoError(path + ": mask pixel " + std::to_string(px) +
                                  " is not binary (expected 0 or 255)");
                }
                stack.at(i, y, x) = px == 255 ? 1.0f : 0.0f;
            }
        }
    }
    return stack;
}

void write_mask_frames(const std::string& dir, const Tensor& mask_stack) {
    require_rank(mask_stack, 3, "mask stack");
    std::filesystem::create_directories(dir);
    const int64_t f = mask_stack.dim(0), h = mask_stack.dim(1), w = mask_stack.dim(2);
    for (int64_t i = 0; i < f; ++i) {
        PngImage img;
        img.height = h;
        img.width = w;
        img.channels = 1;
        img.pixels.resize(static_cast<size_t>(h * w));
        for (int64_t y = 0; y < h; ++y) {
            for (int64_t x = 0; x < w; ++x) {
                const float v = mask_stack.at(i, y, x);
                if (v != 0.0f && v != 1.0f) {
                    throw ShapeError("mask stack entry " + std::to_string(v) + " is not binary");
                }
                img.pixels[static_cast<size_t>(y * w + x)] = v == 1.0f ? 255 : 0;
            }
        }
        write_png((std::filesystem::path(dir) / frame_name("mask", i)).string(), img);
    }
}

Tensor pixels_to_latent(const Tensor& video, int64_t latent_channels) {
    require_rank(video, 4, "video");
    if (video.dim(1) != 3) throw ShapeError("pixel video must have 3 channels");
    if (latent_channels < 3) throw ConfigError("latent_channels must be >= 3 to hold RGB");
    Tensor out({video.dim(0), latent_channels, video.dim(2), video.dim(3)});
    const int64_t plane = video.dim(2) * video.dim(3);
    for (int64_t f = 0; f < video.dim(0); ++f) {
        for (int64_t c = 0; c < 3; ++c) {
            std::memcpy(out.data() + (f * latent_channels + c) * plane,
                        video.data() + (f * 3 + c) * plane,
                        sizeof(float) * static_cast<size_t>(plane));
        }
    }
    return out;
}

Tensor latent_to_pixels(const Tensor& latent) {
    require_rank(latent, 4, "latent");
    if (latent.dim(1) < 3) throw ShapeError("latent must have >= 3 channels to decode RGB");
    Tensor out({latent.dim(0), 3, latent.dim(2), latent.dim(3)});
    const int64_t plane = latent.dim(2) * latent.dim(3);
    for (int64_t f = 0; f < latent.dim(0); ++f) {
        for (int64_t c = 0; c < 3; ++c) {
            std::memcpy(out.data() + (f * 3 + c) * plane,
                        latent.data() + (f * latent.dim(1) + c) * plane,
                        sizeof(float) * static_cast<size_t>(plane));
        }
    }
    return out;
}

}  // namespace uniedit
