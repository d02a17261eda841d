#pragma once

#include <cstdint>
#include <string>

#include "uniedit/denoiser.hpp"
#include "uniedit/orchestrator.hpp"
#include "uniedit/ti2v.hpp"

namespace uniedit {

/// Where edit-time masks come from.
struct MaskSourceConfig {
    std::string source = "none";  // none | files | cross-attention
    std::string dir;              // mask_%04d.png stack (files source)
    std::string motion_dir;       // optional separate motion-mask stack
    float tau = 0.3f;             // cross-attention threshold
    int token = 0;                // prompt token the mask tracks
};

/// Camera movement for the pseudo-video of the still-image pipeline.
struct CameraConfig {
    float dx_per_frame = 1.0f;
    float dy_per_frame = 0.0f;
    std::string fill = "reflect";  // reflect | edge
};

/// One run's full description. Serialized as JSON with nested sections; the
/// injection thresholds keep their short symbol names (t0/l0, t1/l1, t2/l2).
struct RunConfig {
    std::string mode = "appearance";  // appearance | motion
    std::string source_prompt;
    std::string target_prompt;
    std::string uncond_prompt;
    float guidance_scale = 7.5f;
    int steps = 50;  // T
    uint64_t seed = 7;
    uint64_t text_seed = 11;
    int invert_refine_iters = kDefaultInvertRefine;

    DenoiserConfig model;  // model.seed mirrors `seed` when built
    int64_t height = 16;
    int64_t width = 16;

    InjectionSchedule schedule;
    MaskSourceConfig masks;
    DumpRequest dumps;
    CameraConfig camera;
    bool verify_injection_maps = false;
    std::string output_dir = "out";

    EditMode edit_mode() const;
    BoundaryFill boundary_fill() const;

    /// Cross-checks everything that does not need input data; throws
    /// ConfigError.
    void validate() const;
};

/// Fully-populated defaults for a mode: the toy 16x16 / 8-frame model,
/// T = 50, guidance 7.5, and the mode's injection schedule.
RunConfig default_run_config(const std::string& mode = "appearance");

/// Strict JSON parse: unknown keys are rejected, missing keys keep the
/// defaults of the config's mode.
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::string& path);

/// Full echo; parse_run_config(run_config_json(rc)) reproduces rc.
std::string run_config_json(const RunConfig& rc);

/// Builds the model description (rc.model with rc.seed applied).
DenoiserConfig to_denoiser_config(const RunConfig& rc);

/// Request carrying everything except the source latent and masks, which
/// depend on input data.
EditRequest to_edit_request(const RunConfig& rc);

/// Replays the reconstruction branch (null-prompt inversion, then sampling
/// under the source prompt) with recording hooks. This is exactly the
/// trajectory run_edit's reconstruction branch takes, since that branch never
/// reads the others; records include post-softmax maps and query norms.
AttentionDump record_reconstruction(const Denoiser& model, const NoiseSchedule& schedule,
                                    const RunConfig& rc, const Tensor& source_latent,
                                    const DumpRequest& want);

/// Resolves the config's mask source into the request: "none" leaves it
/// empty, "files" loads the mask stacks from disk, and "cross-attention"
/// harvests the reconstruction branch's text-attention maps in a preliminary
/// pass (req.source_latent must already be set) and thresholds them.
void attach_masks(const RunConfig& rc, const Denoiser& model, const NoiseSchedule& schedule,
                  EditRequest& req);

}  // namespace uniedit
