#pragma once

#include <optional>
#include <vector>

#include "uniedit/orchestrator.hpp"
#include "uniedit/tensor.hpp"

namespace uniedit {

/// One frame's camera transform, applied about the image center: the
/// content is scaled by `zoom`, rotated by `rotate_deg` degrees
/// (counter-clockwise), then shifted by (dx, dy) pixels (positive dx moves
/// content right, positive dy moves it down).
struct CameraFrame {
    float dx = 0.0f;
    float dy = 0.0f;
    float zoom = 1.0f;
    float rotate_deg = 0.0f;

    bool is_identity() const;
};

/// Per-frame camera transforms; entry f holds frame f's total transform
/// relative to the input image, so entry 0 must be the identity.
struct CameraPath {
    std::vector<CameraFrame> frames;

    void validate() const;  // identity first frame, zoom > 0, finite values
};

/// Linear pan: frame f shifted by f * (dx, dy) pixels. The 1 px/frame
/// default gives a still image gentle global motion.
CameraPath pan_path(int64_t frames, float dx_per_frame = 1.0f, float dy_per_frame = 0.0f);

enum class BoundaryFill {
    Reflect,  // mirror across the border without repeating the edge pixel
    Edge      // clamp to the nearest edge pixel
};

/// Bilinearly warps a (C, H, W) image by one camera transform. Identity
/// transforms return the input bit-exactly.
Tensor warp_affine(const Tensor& image, const CameraFrame& t, BoundaryFill fill);

/// (C, H, W) still image -> (F, C, H, W) clip, frame f = warp by path[f].
/// Frame 0 is bit-identical to the input.
Tensor pseudo_video(const Tensor& image, const CameraPath& path,
                    BoundaryFill fill = BoundaryFill::Reflect);

struct Ti2vRequest {
    Tensor image;      // (3, H, W) in [-1, 1]; ignored when vanilla_video is set
    CameraPath path;   // empty -> pan_path(model frames)
    BoundaryFill fill = BoundaryFill::Reflect;
    /// A ready-made (F, 3, H, W) clip (e.g. from an external animation
    /// model) used instead of the simulated camera movement.
    std::optional<Tensor> vanilla_video;
    /// Underlying edit settings. mode / source latent / source prompt are
    /// overwritten: the run is always a motion edit of the pseudo-video
    /// under the null source prompt.
    EditRequest edit;
};

struct Ti2vResult {
    Tensor source_video;  // the clip that was actually edited (F, 3, H, W)
    EditResult result;
};

/// Animates a still image from text: builds the pseudo-video (or takes the
/// supplied one), lifts it to latent space, and runs the motion-mode edit
/// pipeline against the target prompt.
Ti2vResult ti2v_generate(const Denoiser& model, const NoiseSchedule& schedule,
                         const Ti2vRequest& req);

}  // namespace uniedit
