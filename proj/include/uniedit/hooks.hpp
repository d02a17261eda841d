#pragma once

#include <functional>
#include <optional>
#include <string>

#include "uniedit/tensor.hpp"

namespace uniedit {

enum class Branch { Edit, Reconstruction, MotionRef };
enum class AttnKind { SpatialSelf, SpatialCross, TemporalSelf };
enum class GuidancePass { Cond, Uncond };

std::string branch_name(Branch b);
std::string kind_name(AttnKind k);   // "SA-S", "CA-S", "SA-T"
std::string pass_name(GuidancePass p);

/// Identifies the enclosing denoising pass for every hook invocation.
/// `step` is the iteration index of the surrounding loop, 0 at the first
/// denoising iteration (pure noise end) and increasing toward clean data.
struct HookFrame {
    Branch branch = Branch::Edit;
    int step = 0;
    GuidancePass pass = GuidancePass::Cond;
};

/// Snapshot of one attention site, emitted just before the attention product.
/// Q, K, V are the batched per-head tensors (B, N, d):
///   SA-S: B = F*heads, N = h*w tokens per frame
///   CA-S: B = F*heads, N = h*w query tokens, keys are text tokens
///   SA-T: B = h*w*heads, N = F frames per spatial location
/// Batch packing is outer-major: b = outer_index * heads + head.
struct HookContext {
    Branch branch;
    int step;             // iteration index from HookFrame
    int layer;            // per-kind execution-order index, 0-based
    AttnKind kind;
    GuidancePass pass;
    const Tensor* q;
    const Tensor* k;
    const Tensor* v;
    int heads;
    int64_t attn_h;       // spatial resolution at this site
    int64_t attn_w;

    std::string site_string() const;   // "branch=... step=... layer=... kind=..."
};

/// Replacement tensors returned by a hook; absent fields keep the originals.
/// Shapes must match the originals exactly.
struct QkvReplacement {
    std::optional<Tensor> q, k, v;
};

/// Switches one site from plain attention to foreground/background fused
/// masked attention. `fg`/`bg` are additive {0,-inf} masks broadcastable to
/// the site's (B, N_q, N_k) logits; `blend` is binary, broadcastable to the
/// site's (B, N_q, d_v) output.
struct MaskedAttnPlan {
    Tensor fg, bg, blend;
};

/// Callbacks into a denoiser forward pass. All optional. `on_qkv` may swap
/// Q/K/V before the product; `on_attention_plan` may switch the site to fused
/// masked attention; `on_weights` observes the attention weights actually
/// produced on the plain path (it is not invoked when a masked plan is
/// active at the same site).
struct HookSet {
    std::function<std::optional<QkvReplacement>(const HookContext&)> on_qkv;
    std::function<std::optional<MaskedAttnPlan>(const HookContext&)> on_attention_plan;
    std::function<void(const HookContext&, const Tensor& weights)> on_weights;

    bool empty() const { return !on_qkv && !on_attention_plan && !on_weights; }
};

}  // namespace uniedit
