#pragma once

#include <string>
#include <utility>
#include <vector>

#include "uniedit/hooks.hpp"
#include "uniedit/tensor.hpp"

namespace uniedit {

/// A latent video is a rank-4 tensor (F frames, C channels, H, W).
using LatentVideo = Tensor;

/// Token embeddings for one prompt: (L tokens, D_text).
struct PromptEmbedding {
    Tensor tokens;
    std::string source_text;

    int64_t num_tokens() const { return tokens.dim(0); }
    int64_t dim() const { return tokens.dim(1); }
};

/// Deterministic per-token embedding keyed by (token text, position, seed).
/// The empty string maps to a single all-zero token (the null prompt).
PromptEmbedding embed_text(const std::string& text, int64_t d_text, uint64_t seed);

struct DenoiserConfig {
    int num_levels = 2;
    std::vector<int64_t> channels = {8, 16};  // one entry per level
    int heads = 2;
    int64_t head_dim = 4;
    int64_t frames = 8;
    int64_t latent_channels = 4;
    int64_t text_dim = 16;
    uint64_t seed = 7;
    // Scales the final epsilon output. Small values keep the DDIM
    // inversion/sampling recurrence well-conditioned for round trips.
    float output_scale = 0.05f;

    void validate() const;
    int num_blocks() const { return 2 * num_levels + 1; }
};

/// Small deterministic spatio-temporal denoising network.
///
/// Layout: conv_in, then num_blocks() blocks (down per level, one mid, up per
/// level), then conv_out. Every block runs conv -> step-embedding bias ->
/// SA-S -> CA-S -> SA-T, each attention module with a residual connection.
/// Attention layer indices count modules of one kind across the whole forward
/// pass in execution order, 0-based, so block b hosts SA-S/CA-S/SA-T layer b.
///
/// A built model is immutable; forward passes keep their scratch on the
/// caller's stack, so concurrent predict_noise calls on one model are safe.
class Denoiser {
public:
    /// Epsilon prediction for latent z at schedule step `step` (used for the
    /// sinusoidal step embedding). Hooks fire at every attention site; `frame`
    /// tags the emitted HookContexts with branch/iteration/pass.
    LatentVideo predict_noise(const LatentVideo& z, int step, const PromptEmbedding& text,
                              const HookSet& hooks = {}, const HookFrame& frame = {}) const;

    const DenoiserConfig& config() const { return cfg_; }

    /// Parameters in creation order (name, tensor). Names are stable and
    /// serve as checkpoint entry keys.
    const std::vector<std::pair<std::string, Tensor>>& parameters() const { return params_; }

    /// Replaces the named parameter; shape must match. Used by the
    /// checkpoint loader.
    void set_parameter(const std::string& name, Tensor value);

    friend Denoiser build_denoiser(const DenoiserConfig& cfg);

private:
    Denoiser() = default;

    const Tensor& param(const std::string& name) const;

    DenoiserConfig cfg_;
    std::vector<std::pair<std::string, Tensor>> params_;
};

/// Builds the network with weights drawn deterministically from cfg.seed.
Denoiser build_denoiser(const DenoiserConfig& cfg);

/// Validates that z is a finite (F, C, H, W) latent matching cfg (frame
/// count, channel count, spatial dims divisible by 2^(num_levels-1)).
void require_latent_video(const Tensor& z, const DenoiserConfig& cfg);

}  // namespace uniedit
