#pragma once

#include <map>
#include <set>
#include <string>

#include "uniedit/hooks.hpp"
#include "uniedit/tensor.hpp"

namespace uniedit {

/// Identifies one recorded attention site.
struct DumpKey {
    Branch branch;
    int step;
    int layer;
    AttnKind kind;
    GuidancePass pass;

    auto operator<=>(const DumpKey&) const = default;
    std::string to_string() const;
};

/// Head-averaged post-softmax weights at one site: (B/heads, N_q, N_k),
/// where the leading axis is frames for SA-S/CA-S and spatial locations for
/// SA-T. query_magnitude holds the head-averaged L2 norms of the query rows
/// that produced the weights, shaped (B/heads, N_q); it may be empty for
/// records built outside the sampling loop.
struct DumpRecord {
    Tensor weights;
    Tensor query_magnitude;
    int heads = 0;
    int64_t attn_h = 0;
    int64_t attn_w = 0;
};

struct AttentionDump {
    std::map<DumpKey, DumpRecord> records;

    bool empty() const { return records.empty(); }
};

/// Selects which sites to record. Empty sets mean "all".
struct DumpRequest {
    bool enabled = false;
    std::set<AttnKind> kinds;
    std::set<int> layers;
    std::set<int> steps;
    std::set<Branch> branches;

    bool wants(Branch b, int step, int layer, AttnKind kind) const {
        if (!enabled) return false;
        if (!kinds.empty() && !kinds.count(kind)) return false;
        if (!layers.empty() && !layers.count(layer)) return false;
        if (!steps.empty() && !steps.count(step)) return false;
        if (!branches.empty() && !branches.count(b)) return false;
        return true;
    }
};

/// Mean over the head axis: (B0*heads, N_q, N_k) -> (B0, N_q, N_k) with the
/// packing b = b0*heads + head used by the denoiser.
Tensor average_heads(const Tensor& weights, int heads);

/// Per-row L2 norms of a packed query tensor (B0*heads, N, d), averaged over
/// the head axis: -> (B0, N).
Tensor head_averaged_query_norms(const Tensor& q, int heads);

}  // namespace uniedit
