#pragma once

#include <optional>

#include "uniedit/tensor.hpp"

namespace uniedit {

/// Query/key/value triple for one attention call.
/// Q (N_q, d), K (N_k, d), V (N_k, d_v). `scale` defaults to 1/sqrt(d).
struct AttnTensors {
    Tensor q, k, v;
    std::optional<float> scale;

    float effective_scale() const;
    void validate() const;
};

/// Additive logit mask, entries in {0, -inf}. Shape (N_q, N_k).
struct AdditiveMask {
    Tensor values;

    void validate() const;
    static AdditiveMask zeros(int64_t rows, int64_t cols);
};

/// Binary blend mask, broadcastable (numpy-style, right-aligned) to the
/// tensor it selects over.
struct BlendMask {
    Tensor values;

    void validate() const;
};

/// softmax(Q K^T * scale [+ mask]) as an (N_q, N_k) weight matrix.
/// Rows with every key masked raise DegenerateMaskError.
Tensor attention_weights(const AttnTensors& t, const AdditiveMask* mask = nullptr);

/// softmax(Q K^T * scale) V
Tensor attn(const AttnTensors& t);

/// softmax(Q K^T * scale + m) V. Keys masked with -inf get exactly zero weight.
Tensor masked_attn(const AttnTensors& t, const AdditiveMask& m);

/// Foreground/background masked attention blended per element:
/// masked_attn(t, mf) where mm = 1, masked_attn(t, mb) where mm = 0.
Tensor mask_fused_attn(const AttnTensors& t, const AdditiveMask& mf, const AdditiveMask& mb,
                       const BlendMask& mm);

/// mm ⊙ a + (1 - mm) ⊙ b for binary mm, computed as an exact per-element
/// select so that mm ∈ {all-0, all-1} returns the operand bit-exactly.
Tensor blend_features(const Tensor& a, const Tensor& b, const BlendMask& mm);

// ---------------------------------------------------------------------------
// Batched forms. A leading batch axis realizes attention heads and any outer
// loop (frames for SA-S, spatial locations for SA-T); each batch element runs
// the single-head kernel above.
//
// Q (B, N_q, d), K (B, N_k, d), V (B, N_k, d_v).
// Additive masks broadcast over missing leading axes: accepted shapes are
// (B, N_q, N_k), (N_q, N_k), (B, 1, N_k) and (1, N_k).

Tensor batched_attention_weights(const Tensor& q, const Tensor& k,
                                 std::optional<float> scale = std::nullopt,
                                 const Tensor* additive_mask = nullptr);

Tensor batched_attn(const Tensor& q, const Tensor& k, const Tensor& v,
                    std::optional<float> scale = std::nullopt,
                    const Tensor* additive_mask = nullptr);

/// Batched foreground/background fused mask attention. `fg`/`bg` follow the
/// additive mask broadcast rules; `blend` is binary and broadcastable to
/// (B, N_q, d_v).
Tensor batched_mask_fused_attn(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& fg,
                               const Tensor& bg, const Tensor& blend,
                               std::optional<float> scale = std::nullopt);

/// weights (B, N_q, N_k) x V (B, N_k, d_v) -> (B, N_q, d_v)
Tensor apply_attention_weights(const Tensor& weights, const Tensor& v);

}  // namespace uniedit
