#include "uniedit/attention_dump.hpp"

#include <cmath>

namespace uniedit {

std::string DumpKey::to_string() const {
    return branch_name(branch) + "/step" + std::to_string(step) + "/layer" +
           std::to_string(layer) + "/" + kind_name(kind) + "/" + pass_name(pass);
}

Tensor average_heads(const Tensor& weights, int heads) {
    require_rank(weights, 3, "attention weights");
    if (heads < 1 || weights.dim(0) % heads != 0) {
        throw ShapeError("batch " + std::to_string(weights.dim(0)) + " not divisible by " +
                         std::to_string(heads) + " heads");
    }
    const int64_t b0 = weights.dim(0) / heads;
    const int64_t nq = weights.dim(1), nk = weights.dim(2);
    Tensor out({b0, nq, nk});
    const float inv = 1.0f / static_cast<float>(heads);
    for (int64_t b = 0; b < b0; ++b) {
        for (int h = 0; h < heads; ++h) {
            const float* src = weights.data() + (b * heads + h) * nq * nk;
            float* dst = out.data() + b * nq * nk;
            for (int64_t i = 0; i < nq * nk; ++i) dst[i] += src[i] * inv;
        }
    }
    return out;
}

Tensor head_averaged_query_norms(const Tensor& q, int heads) {
    require_rank(q, 3, "query tensor");
    if (heads < 1 || q.dim(0) % heads != 0) {
        throw ShapeError("batch " + std::to_string(q.dim(0)) + " not divisible by " +
                         std::to_string(heads) + " heads");
    }
    const int64_t b0 = q.dim(0) / heads;
    const int64_t n = q.dim(1), d = q.dim(2);
    Tensor out({b0, n});
    for (int64_t b = 0; b < b0; ++b) {
        for (int h = 0; h < heads; ++h) {
            const float* src = q.data() + (b * heads + h) * n * d;
            for (int64_t i = 0; i < n; ++i) {
                double sq = 0.0;
                for (int64_t j = 0; j < d; ++j) {
                    sq += static_cast<double>(src[i * d + j]) * src[i * d + j];
                }
                out.at(b, i) += static_cast<float>(std::sqrt(sq) / heads);
            }
        }
    }
    return out;
}

}  // namespace uniedit
