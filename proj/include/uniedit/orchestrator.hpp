#pragma once

#include <optional>
#include <string>

#include "uniedit/attention_dump.hpp"
#include "uniedit/denoiser.hpp"
#include "uniedit/diffusion.hpp"
#include "uniedit/hooks.hpp"
#include "uniedit/masks.hpp"

namespace uniedit {

/// MotionEdit changes how things move (runs the motion-reference branch);
/// AppearanceEdit changes how things look (drops it).
enum class EditMode { MotionEdit, AppearanceEdit };
std::string mode_name(EditMode m);

/// Carries the source clip's appearance into the editing path by replacing
/// the values of its spatial self-attention with the reconstruction
/// branch's. Fires at iterations strictly after t0 and layers strictly
/// after l0 (the late, low-noise iterations and the last blocks, where
/// appearance lives). The default l0 keeps the last of the five-block
/// model's SA-S layers.
struct ContentInjection {
    int t0 = 4;
    int l0 = 3;
    bool enabled = true;
    // Also replace K so the attention pattern itself comes from the
    // reconstruction branch. Off by default: value-only replacement keeps
    // the target prompt's attention pattern.
    bool also_replace_k = false;
};

/// Transplants the motion-reference branch's temporal attention maps into
/// the editing path by replacing the query/key of its temporal
/// self-attention. Bounds are inclusive, so the (0, 0) default reaches
/// every SA-T site.
struct MotionInjection {
    int t1 = 0;
    int l1 = 0;
    bool enabled = false;
};

/// Preserves the source layout by replacing the query/key of spatial
/// self-attention with the reconstruction branch's during the early, noisy
/// iterations: fires at iterations strictly before t2 and layers strictly
/// after l2.
struct StructureInjection {
    int t2 = 25;
    int l2 = 0;
    bool enabled = true;
};

struct InjectionSchedule {
    ContentInjection content;
    MotionInjection motion;
    StructureInjection structure;

    /// Route structure control into the motion-reference branch as well
    /// (it keeps that branch's layout anchored to the source the same way
    /// the edit path's is).
    bool structure_to_motion_ref = true;
    /// Separate thresholds for the motion-reference target; absent means
    /// share `structure`.
    std::optional<StructureInjection> motion_ref_structure;

    /// Thresholds must lie in [0, num_steps] / [0, num_layers].
    void validate(int num_steps, int num_layers) const;
};

/// AppearanceEdit: content + structure (t2 = 25). MotionEdit: additionally
/// enables motion injection and tightens structure control to the first 10
/// iterations.
InjectionSchedule default_schedule(EditMode mode);

// Firing predicates, exposed for tests and analysis tools. `step` is the
// generation iteration (0 = pure noise end), `layer` the per-kind attention
// layer index.
bool content_fires(const ContentInjection& c, int step, int layer);
bool motion_fires(const MotionInjection& m, int step, int layer);
bool structure_fires(const StructureInjection& s, int step, int layer);

/// Q/K/V of one attention site captured from a source branch.
struct StoredSite {
    Tensor q, k, v;
};

/// Replacement for one edit-path (or motion-ref) SA-S site: structure
/// control swaps Q/K, content injection swaps V (plus K when configured).
/// Returns nullopt when neither mechanism fires. Throws HookContractError
/// for non-SA-S contexts.
std::optional<QkvReplacement> plan_spatial_injection(const HookContext& ctx,
                                                     const ContentInjection& content,
                                                     const StructureInjection& structure,
                                                     const StoredSite& recon_site);

/// Replacement for one edit-path SA-T site: motion injection swaps Q/K for
/// the motion-reference branch's. When `motion_blend` (a binary temporal
/// blend mask) is given, the swap is restricted to its foreground:
/// Q <- blend ? Q_motion : Q_edit, and likewise for K, so an all-zero blend
/// suppresses the injection exactly. Throws HookContractError for non-SA-T
/// contexts.
std::optional<QkvReplacement> plan_temporal_injection(const HookContext& ctx,
                                                      const MotionInjection& motion,
                                                      const StoredSite& motion_site,
                                                      const Tensor* motion_blend);

struct EditRequest {
    EditMode mode = EditMode::AppearanceEdit;
    LatentVideo source_latent;    // (F, C, H, W), matching the model config
    std::string source_prompt;    // describes the source clip
    std::string target_prompt;    // describes the desired result
    InjectionSchedule schedule;   // start from default_schedule(mode)
    float guidance_scale = 7.5f;
    std::string uncond_prompt;    // "" = null prompt
    std::optional<MaskSet> masks;
    DumpRequest dumps;
    // Record per-site agreement between edit-path attention maps and the
    // source branches' (reconstruction for SA-S, motion-reference for SA-T)
    // into RunStats. Observation only; never changes results.
    bool verify_injection_maps = false;
    int invert_refine_iters = kDefaultInvertRefine;
    uint64_t text_seed = 11;      // embedding seed shared by all prompts
};

struct RunStats {
    int content_fired = 0;              // V replacements at edit SA-S sites
    int structure_fired_edit = 0;       // Q/K replacements at edit SA-S sites
    int structure_fired_motion_ref = 0;
    int motion_fired = 0;               // Q/K replacements at edit SA-T sites
    int masked_sites = 0;               // fused masked attention activations
    bool mask_fallback_fired = false;   // some mask leg was degenerate
    // Filled only when verify_injection_maps is set. A site "matches" when
    // the post-softmax maps agree within 1e-6; max_fired_map_deviation is
    // the worst deviation across sites where the injection actually fired.
    int spatial_sites_compared = 0;
    int spatial_sites_matched = 0;
    int temporal_sites_compared = 0;
    int temporal_sites_matched = 0;
    double max_fired_map_deviation = 0.0;
};

struct EditResult {
    LatentVideo edited;
    LatentVideo reconstruction;
    std::optional<LatentVideo> motion_ref;
    LatentVideo inverted;               // the shared starting noise z_T
    AttentionDump dumps;
    RunStats stats;
};

/// The full editing pipeline:
///   1. DDIM-invert the source latent under the null prompt; the resulting
///      noise is the shared starting point of every branch.
///   2. Per iteration, run the reconstruction branch (conditioned on the
///      source prompt), then in motion mode the motion-reference branch,
///      then the edit path (both conditioned on the target prompt). The
///      reconstruction branch publishes its SA-S features, the
///      motion-reference branch its SA-T features; the edit path consumes
///      them through the injection schedule, plus foreground/background
///      masked attention when masks are provided.
///
/// The reconstruction branch never reads the other branches, so its output
/// only depends on the source latent/prompt; the motion-reference branch
/// reads only structure control. The whole run is deterministic.
EditResult run_edit(const Denoiser& model, const NoiseSchedule& schedule,
                    const EditRequest& req);

}  // namespace uniedit
