#pragma once

#include <optional>

#include "uniedit/attention_dump.hpp"
#include "uniedit/tensor.hpp"

namespace uniedit {

/// Per-frame binary foreground masks driving masked attention.
/// `edit_fg` feeds the foreground/background additive masks of the editing
/// path; `motion_fg` is the blend mask taken from the motion-reference side.
/// Both are (F, H, W) stacks at latent resolution; loaders that only have a
/// single mask source use it for both roles.
struct MaskSet {
    enum class Provenance { CrossAttention, ExternalFile };

    Tensor edit_fg;
    Tensor motion_fg;
    Provenance provenance = Provenance::ExternalFile;

    void validate() const;
};

/// Nearest-neighbor resample of an (F, h, w) binary stack; binarity is
/// preserved exactly. Same-size input is returned unchanged.
Tensor resample_mask(const Tensor& stack, int64_t out_h, int64_t out_w);

/// Additive key masks for one attention site, plus the fallback flag.
struct AdditiveMaskPair {
    Tensor fg;  // (B, 1, N_k): 0 on foreground keys, -inf elsewhere
    Tensor bg;  // complement
    bool fallback_fired = false;
};

/// Key-column masks for a spatial self-attention site (keys = h*w tokens per
/// frame, batch = F*heads). A frame whose leg has no visible key falls back
/// to an all-zeros mask for that leg and sets fallback_fired.
AdditiveMaskPair spatial_additive_masks(const Tensor& fg_at_res, int heads);

/// Key-column masks for a temporal site (keys = F frames, batch =
/// h*w*heads): key frame f' is foreground at location p iff fg[f', p] = 1.
AdditiveMaskPair temporal_additive_masks(const Tensor& fg_at_res, int heads);

/// Blend masks over the site output, 1 selecting the foreground leg.
Tensor spatial_blend(const Tensor& mm_at_res, int heads);   // (F*heads, h*w, 1)
Tensor temporal_blend(const Tensor& mm_at_res, int heads);  // (h*w*heads, F, 1)

/// Which recorded CA-S sites feed mask extraction.
struct CrossAttnSelection {
    std::set<int> layers;
    std::set<int> steps;
    Branch branch = Branch::Reconstruction;
    GuidancePass pass = GuidancePass::Cond;
};

/// Default selection: the deepest down-block layer over the last 10
/// iterations.
CrossAttnSelection default_cross_attn_selection(int T, int num_levels);

/// Builds a mask from recorded CA-S attention toward one prompt token:
/// per-frame average over the selected sites (each upsampled to out_h x
/// out_w), min-max normalized per frame (constant maps normalize to 0), then
/// thresholded at tau (>= tau is foreground, so tau = 0 gives all-ones).
MaskSet mask_from_cross_attention(const AttentionDump& dump, int token_index, float tau,
                                  const CrossAttnSelection& sel, int64_t out_h, int64_t out_w);

/// Loads mask_%04d.png stacks; with one directory the stack serves both
/// mask roles.
MaskSet mask_from_file(const std::string& dir, int64_t expected_frames = 0,
                       const std::optional<std::string>& motion_dir = std::nullopt);

}  // namespace uniedit
