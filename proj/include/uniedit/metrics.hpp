#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "uniedit/attention_dump.hpp"
#include "uniedit/container.hpp"
#include "uniedit/tensor.hpp"

namespace uniedit {

/// Maps frames and prompts into a shared embedding space. Implementations
/// must be deterministic; scores computed from them normalize explicitly, so
/// any overall scale cancels.
class EmbeddingProvider {
public:
    virtual ~EmbeddingProvider() = default;

    /// (C, H, W) frame -> (D) embedding.
    virtual Tensor image_embed(const Tensor& frame) const = 0;
    virtual Tensor text_embed(const std::string& prompt) const = 0;
    virtual std::string name() const = 0;
};

/// Deterministic stand-in for a learned embedder. Frames are resized to a
/// small patch grid and pushed through a seeded random projection with a
/// constant bias feature (so no frame maps to the zero vector); prompts sum
/// seeded per-token directions plus a constant start direction. Outputs are
/// unit-norm.
class RandomProjectionEmbedder final : public EmbeddingProvider {
public:
    explicit RandomProjectionEmbedder(int64_t dim = 32, uint64_t seed = 5);

    Tensor image_embed(const Tensor& frame) const override;
    Tensor text_embed(const std::string& prompt) const override;
    std::string name() const override { return "random-projection"; }

private:
    int64_t dim_;
    uint64_t seed_;
    Tensor projection_;  // (dim, patch features + 1)
};

/// Serves precomputed embeddings from a tensor container, for callers who
/// bring their own embedding model. Entries are keyed by content:
///   image_<16-hex checksum of the frame tensor>   (D) vector
///   text_<16-hex checksum of the prompt bytes>    (D) vector
/// Vectors are normalized on serve.
class FileEmbeddingProvider final : public EmbeddingProvider {
public:
    explicit FileEmbeddingProvider(const std::string& path);

    Tensor image_embed(const Tensor& frame) const override;
    Tensor text_embed(const std::string& prompt) const override;
    std::string name() const override { return "file:" + path_; }

    static std::string image_key(const Tensor& frame);
    static std::string text_key(const std::string& prompt);

private:
    const Tensor& lookup(const std::string& key) const;

    std::string path_;
    std::vector<NamedTensor> entries_;
};

/// 100 x mean cosine similarity over adjacent frame-embedding pairs.
/// Requires at least two frames; throws on zero-norm embeddings.
double frame_consistency(const Tensor& video, const EmbeddingProvider& provider);

/// 100 x mean cosine similarity between each frame embedding and the prompt
/// embedding.
double textual_alignment(const Tensor& video, const std::string& prompt,
                         const EmbeddingProvider& provider);

// --- optical flow -----------------------------------------------------------

/// Dense displacement between adjacent frames: pairs[f] has shape (H, W, 2)
/// and maps pixel (y, x) of frame f to (y + v, x + u) in frame f+1, with
/// u = pairs[f](y, x, 0) and v = pairs[f](y, x, 1), in pixels.
struct FlowField {
    std::vector<Tensor> pairs;
    /// Set when a frame pair had (near-)constant intensity; those pairs get
    /// zero flow.
    bool degenerate = false;

    /// (H, W) flow speed averaged over all pairs.
    Tensor mean_magnitude() const;
};

/// Worker-thread cap read from the UNIEDIT_THREADS environment variable.
/// Unset, unparsable, or < 1 all mean 1 (serial); values above 64 clamp.
int worker_thread_cap();

/// Coarse-to-fine brightness-constancy estimator (see README for the full
/// specification): 3 pyramid levels of 2x2 average downsampling, and per
/// level a few damped least-squares refinements over a 5x5 window with a 3x3
/// flow smoothing pass after each. Frames are converted to gray by channel
/// averaging. Frame pairs are independent, so with UNIEDIT_THREADS > 1 they
/// are estimated on that many workers; results are identical either way.
FlowField optical_flow(const Tensor& video);

// --- attention / flow overlap ----------------------------------------------

/// Pearson correlation computed in double precision. A constant series makes
/// the correlation undefined; it is reported as 0 and, when constant_flag is
/// non-null, flagged.
double pearson(const std::vector<double>& a, const std::vector<double>& b,
               bool* constant_flag = nullptr);

/// (attn_h, attn_w) map of cross-frame attention deviation: one minus the
/// diagonal mass of the per-location F x F temporal attention matrix. Zero
/// means every frame attends only to itself.
Tensor temporal_deviation_map(const DumpRecord& rec);

/// (attn_h, attn_w) map of query magnitudes averaged over frames. Requires
/// the record to carry stored query norms.
Tensor spatial_query_map(const DumpRecord& rec);

struct OverlapLayerReport {
    int layer = 0;
    /// Correlation of flow magnitude with the temporal deviation map.
    double temporal_correlation = 0.0;
    /// Correlation of flow magnitude with the spatial query-magnitude map.
    double spatial_correlation = 0.0;
    bool temporal_constant = false;
    bool spatial_constant = false;
};

struct OverlapReport {
    std::vector<OverlapLayerReport> layers;
};

/// Correlates the mean flow magnitude (downsampled to each attention
/// resolution) against temporal-deviation and spatial query-magnitude maps,
/// per layer. Records of the same layer and kind are averaged across steps,
/// passes, and branches; use the dump request to narrow the selection. The
/// dump must contain at least one temporal and one spatial self-attention
/// record sharing a layer.
OverlapReport flow_attention_overlap(const FlowField& flow, const AttentionDump& dump);

}  // namespace uniedit
