#include "uniedit/attention.hpp"

#include <cmath>
#include <cstring>
#include <limits>

namespace uniedit {

namespace {

// -inf mask entries become the most negative finite float during logit
// addition; exp() then maps them to exactly zero without producing NaNs.
constexpr float kMaskedLogit = std::numeric_limits<float>::lowest();

struct MaskView {
    const float* base = nullptr;
    int64_t batch_stride = 0;  // elements per batch, 0 when broadcast
    int64_t row_stride = 0;    // elements per query row, 0 when broadcast

    const float* row(int64_t b, int64_t i) const {
        return base ? base + b * batch_stride + i * row_stride : nullptr;
    }
};

MaskView make_mask_view(const Tensor* mask, int64_t batch, int64_t rows, int64_t cols) {
    MaskView view;
    if (mask == nullptr) return view;
    const Tensor& m = *mask;
    if (m.rank() == 2) {
        if (m.dim(1) != cols || (m.dim(0) != rows && m.dim(0) != 1)) {
            throw ShapeError("additive mask " + shape_string(m) + " incompatible with (" +
                             std::to_string(rows) + ", " + std::to_string(cols) + ") logits");
        }
        view.base = m.data();
        view.row_stride = (m.dim(0) == 1) ? 0 : cols;
    } else if (m.rank() == 3) {
        if (m.dim(2) != cols || (m.dim(1) != rows && m.dim(1) != 1) ||
            (m.dim(0) != batch && m.dim(0) != 1)) {
            throw ShapeError("additive mask " + shape_string(m) + " incompatible with (" +
                             std::to_string(batch) + ", " + std::to_string(rows) + ", " +
                             std::to_string(cols) + ") logits");
        }
        view.base = m.data();
        view.row_stride = (m.dim(1) == 1) ? 0 : cols;
        view.batch_stride = (m.dim(0) == 1) ? 0 : m.dim(1) * cols;
    } else {
        throw ShapeError("additive mask must have rank 2 or 3, got " + shape_string(m));
    }
    return view;
}

// One batch element: weights[i, j] = softmax_j(q_i . k_j * scale + mask).
void weights_kernel(const float* q, const float* k, int64_t n_q, int64_t n_k, int64_t d,
                    float scale, const MaskView& mask, int64_t b, float* out) {
    std::vector<float> logits(static_cast<size_t>(n_k));
    std::vector<char> masked(static_cast<size_t>(n_k));
    for (int64_t i = 0; i < n_q; ++i) {
        const float* qi = q + i * d;
        const float* mrow = mask.row(b, i);
        float row_max = kMaskedLogit;
        int64_t visible = 0;
        for (int64_t j = 0; j < n_k; ++j) {
            const float* kj = k + j * d;
            float dot = 0.0f;
            for (int64_t c = 0; c < d; ++c) dot += qi[c] * kj[c];
            float logit = dot * scale;
            bool is_masked = false;
            if (mrow) {
                float m = mrow[j];
                if (std::isinf(m) && m < 0.0f) {
                    logit = kMaskedLogit;
                    is_masked = true;
                } else {
                    logit += m;
                }
            }
            masked[static_cast<size_t>(j)] = is_masked ? 1 : 0;
            if (!is_masked) {
                ++visible;
                if (logit > row_max) row_max = logit;
            }
            logits[static_cast<size_t>(j)] = logit;
        }
        if (mrow && visible == 0) {
            throw DegenerateMaskError("fully masked attention row " + std::to_string(i) +
                                      " (batch " + std::to_string(b) +
                                      "): every key carries -inf");
        }
        float sum = 0.0f;
        float* wrow = out + i * n_k;
        for (int64_t j = 0; j < n_k; ++j) {
            float w = std::exp(logits[static_cast<size_t>(j)] - row_max);
            wrow[j] = w;
            sum += w;
        }
        const float inv = 1.0f / sum;
        for (int64_t j = 0; j < n_k; ++j) wrow[j] *= inv;
        if (mrow) {
            for (int64_t j = 0; j < n_k; ++j) {
                if (masked[static_cast<size_t>(j)] && wrow[j] != 0.0f) {
                    throw Error("masked key received nonzero attention weight");
                }
            }
        }
    }
}

std::vector<int64_t> broadcast_strides(const std::vector<int64_t>& out_shape, const Tensor& m,
                                       const std::string& what) {
    const int out_rank = static_cast<int>(out_shape.size());
    if (m.rank() > out_rank) {
        throw ShapeError(what + ": mask rank " + std::to_string(m.rank()) +
                         " exceeds operand rank " + std::to_string(out_rank));
    }
    std::vector<int64_t> strides(static_cast<size_t>(out_rank), 0);
    const int offset = out_rank - m.rank();
    for (int a = 0; a < m.rank(); ++a) {
        const int64_t md = m.dim(a);
        const int64_t od = out_shape[static_cast<size_t>(a + offset)];
        if (md == od) {
            strides[static_cast<size_t>(a + offset)] = m.stride(a);
        } else if (md == 1) {
            strides[static_cast<size_t>(a + offset)] = 0;
        } else {
            throw ShapeError(what + ": mask " + shape_string(m) + " not broadcastable to " +
                             shape_string(out_shape));
        }
    }
    return strides;
}

}  // namespace

float AttnTensors::effective_scale() const {
    if (scale.has_value()) return *scale;
    return 1.0f / std::sqrt(static_cast<float>(q.dim(q.rank() - 1)));
}

void AttnTensors::validate() const {
    require_rank(q, 2, "Q");
    require_rank(k, 2, "K");
    require_rank(v, 2, "V");
    if (q.dim(1) != k.dim(1)) {
        throw ShapeError("Q/K feature axis mismatch: d=" + std::to_string(q.dim(1)) + " vs d=" +
                         std::to_string(k.dim(1)));
    }
    if (k.dim(0) != v.dim(0)) {
        throw ShapeError("K/V row count mismatch: N_k=" + std::to_string(k.dim(0)) + " vs N_k=" +
                         std::to_string(v.dim(0)));
    }
    if (q.dim(1) <= 0) throw ShapeError("attention dimension d must be positive");
    if (scale.has_value() && !(*scale > 0.0f)) {
        throw ShapeError("attention scale must be positive");
    }
}

void AdditiveMask::validate() const {
    require_rank(values, 2, "additive mask");
    for (float v : values.values()) {
        if (v == 0.0f) continue;
        if (std::isinf(v) && v < 0.0f) continue;
        throw ShapeError("additive mask entries must be 0 or -inf, found " + std::to_string(v));
    }
}

AdditiveMask AdditiveMask::zeros(int64_t rows, int64_t cols) {
    return AdditiveMask{Tensor({rows, cols})};
}

void BlendMask::validate() const {
    for (float v : values.values()) {
        if (v != 0.0f && v != 1.0f) {
            throw ShapeError("blend mask entries must be 0 or 1, found " + std::to_string(v));
        }
    }
}

Tensor attention_weights(const AttnTensors& t, const AdditiveMask* mask) {
    t.validate();
    const Tensor* mvals = nullptr;
    if (mask) {
        mask->validate();
        if (mask->values.dim(0) != t.q.dim(0) || mask->values.dim(1) != t.k.dim(0)) {
            throw ShapeError("additive mask " + shape_string(mask->values) +
                             " does not match logits (" + std::to_string(t.q.dim(0)) + ", " +
                             std::to_string(t.k.dim(0)) + ")");
        }
        mvals = &mask->values;
    }
    const int64_t n_q = t.q.dim(0), n_k = t.k.dim(0), d = t.q.dim(1);
    Tensor w({n_q, n_k});
    MaskView view = make_mask_view(mvals, 1, n_q, n_k);
    weights_kernel(t.q.data(), t.k.data(), n_q, n_k, d, t.effective_scale(), view, 0, w.data());
    return w;
}

namespace {

Tensor weights_times_v(const Tensor& w, const Tensor& v) {
    const int64_t n_q = w.dim(0), n_k = w.dim(1), d_v = v.dim(1);
    Tensor out({n_q, d_v});
    for (int64_t i = 0; i < n_q; ++i) {
        const float* wrow = w.data() + i * n_k;
        float* orow = out.data() + i * d_v;
        for (int64_t j = 0; j < n_k; ++j) {
            const float wij = wrow[j];
            const float* vrow = v.data() + j * d_v;
            for (int64_t c = 0; c < d_v; ++c) orow[c] += wij * vrow[c];
        }
    }
    return out;
}

}  // namespace

Tensor attn(const AttnTensors& t) {
    Tensor w = attention_weights(t, nullptr);
    return weights_times_v(w, t.v);
}

Tensor masked_attn(const AttnTensors& t, const AdditiveMask& m) {
    Tensor w = attention_weights(t, &m);
    return weights_times_v(w, t.v);
}

Tensor mask_fused_attn(const AttnTensors& t, const AdditiveMask& mf, const AdditiveMask& mb,
                       const BlendMask& mm) {
    Tensor fg, bg;
    try {
        fg = masked_attn(t, mf);
    } catch (const DegenerateMaskError& e) {
        throw DegenerateMaskError(std::string("foreground leg: ") + e.what());
    }
    try {
        bg = masked_attn(t, mb);
    } catch (const DegenerateMaskError& e) {
        throw DegenerateMaskError(std::string("background leg: ") + e.what());
    }
    return blend_features(fg, bg, mm);
}

Tensor blend_features(const Tensor& a, const Tensor& b, const BlendMask& mm) {
    require_same_shape(a, b, "blend_features operands");
    mm.validate();
    const auto strides = broadcast_strides(a.shape(), mm.values, "blend_features");
    Tensor out(a.shape());
    const int rank = a.rank();
    std::vector<int64_t> idx(static_cast<size_t>(rank), 0);
    const int64_t n = a.numel();
    const float* ap = a.data();
    const float* bp = b.data();
    const float* mp = mm.values.data();
    float* op = out.data();
    int64_t moff = 0;
    for (int64_t flat = 0; flat < n; ++flat) {
        op[flat] = (mp[moff] != 0.0f) ? ap[flat] : bp[flat];
        // advance multi-index and the mask offset with it
        for (int axis = rank - 1; axis >= 0; --axis) {
            auto ua = static_cast<size_t>(axis);
            idx[ua] += 1;
            moff += strides[ua];
            if (idx[ua] < a.dim(axis)) break;
            moff -= strides[ua] * idx[ua];
            idx[ua] = 0;
        }
    }
    return out;
}

Tensor batched_attention_weights(const Tensor& q, const Tensor& k, std::optional<float> scale,
                                 const Tensor* additive_mask) {
    require_rank(q, 3, "Q");
    require_rank(k, 3, "K");
    if (q.dim(0) != k.dim(0)) {
        throw ShapeError("Q/K batch mismatch: " + std::to_string(q.dim(0)) + " vs " +
                         std::to_string(k.dim(0)));
    }
    if (q.dim(2) != k.dim(2)) {
        throw ShapeError("Q/K feature axis mismatch: d=" + std::to_string(q.dim(2)) + " vs d=" +
                         std::to_string(k.dim(2)));
    }
    const int64_t batch = q.dim(0), n_q = q.dim(1), n_k = k.dim(1), d = q.dim(2);
    const float s = scale.value_or(1.0f / std::sqrt(static_cast<float>(d)));
    MaskView view = make_mask_view(additive_mask, batch, n_q, n_k);
    Tensor w({batch, n_q, n_k});
    for (int64_t b = 0; b < batch; ++b) {
        weights_kernel(q.data() + b * n_q * d, k.data() + b * n_k * d, n_q, n_k, d, s, view, b,
                       w.data() + b * n_q * n_k);
    }
    return w;
}

Tensor apply_attention_weights(const Tensor& weights, const Tensor& v) {
    require_rank(weights, 3, "attention weights");
    require_rank(v, 3, "V");
    if (weights.dim(0) != v.dim(0) || weights.dim(2) != v.dim(1)) {
        throw ShapeError("weights " + shape_string(weights) + " incompatible with V " +
                         shape_string(v));
    }
    const int64_t batch = weights.dim(0), n_q = weights.dim(1), n_k = weights.dim(2),
                  d_v = v.dim(2);
    Tensor out({batch, n_q, d_v});
    for (int64_t b = 0; b < batch; ++b) {
        for (int64_t i = 0; i < n_q; ++i) {
            const float* wrow = weights.data() + (b * n_q + i) * n_k;
            float* orow = out.data() + (b * n_q + i) * d_v;
            for (int64_t j = 0; j < n_k; ++j) {
                const float wij = wrow[j];
                const float* vrow = v.data() + (b * n_k + j) * d_v;
                for (int64_t c = 0; c < d_v; ++c) orow[c] += wij * vrow[c];
            }
        }
    }
    return out;
}

Tensor batched_attn(const Tensor& q, const Tensor& k, const Tensor& v, std::optional<float> scale,
                    const Tensor* additive_mask) {
    require_rank(v, 3, "V");
    if (v.dim(0) != k.dim(0) || v.dim(1) != k.dim(1)) {
        throw ShapeError("K " + shape_string(k) + " and V " + shape_string(v) +
                         " must share batch and row count");
    }
    Tensor w = batched_attention_weights(q, k, scale, additive_mask);
    return apply_attention_weights(w, v);
}

Tensor batched_mask_fused_attn(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& fg,
                               const Tensor& bg, const Tensor& blend, std::optional<float> scale) {
    Tensor a, b;
    try {
        a = batched_attn(q, k, v, scale, &fg);
    } catch (const DegenerateMaskError& e) {
        throw DegenerateMaskError(std::string("foreground leg: ") + e.what());
    }
    try {
        b = batched_attn(q, k, v, scale, &bg);
    } catch (const DegenerateMaskError& e) {
        throw DegenerateMaskError(std::string("background leg: ") + e.what());
    }
    return blend_features(a, b, BlendMask{blend});
}

}  // namespace uniedit
