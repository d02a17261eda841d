#pragma once

#include <vector>

#include "uniedit/denoiser.hpp"

namespace uniedit {

/// Cumulative noise schedule over T steps. alpha_bar is indexed by schedule
/// position k in [0, T]: k = 0 is clean data (alpha_bar[0] = 1), k = T is the
/// noise end; strictly decreasing in between.
struct NoiseSchedule {
    int T = 0;
    std::vector<double> alpha_bar;  // length T + 1

    void validate() const;
    double abar(int k) const;
};

/// Linear beta schedule 1e-4 .. 2e-2 over 1000 virtual steps; cumulative
/// alpha products subsampled to T positions: alpha_bar[k] takes the virtual
/// product at index (k-1)*1000/T, so position 1 sits right next to clean
/// data. Supports 1 <= T <= 1000.
NoiseSchedule make_schedule(int T);

struct GuidanceConfig {
    float scale = 7.5f;
    PromptEmbedding uncond;  // typically the null-prompt embedding
};

/// Classifier-free guidance: eps_uncond + scale * (eps_cond - eps_uncond).
/// scale == 1 evaluates only the conditional pass and returns it bit-exactly;
/// scale == 0 likewise for the unconditional pass. Hooks fire inside each
/// pass that actually runs, tagged Cond/Uncond via the frame.
Tensor guided_epsilon(const Denoiser& model, const Tensor& z, int step,
                      const PromptEmbedding& cond, const GuidanceConfig& g,
                      const HookSet& hooks = {}, HookFrame frame = {});

/// One deterministic update between schedule positions (internally double
/// precision):
///   out = sqrt(abar_to) * (z - sqrt(1-abar_from) * eps) / sqrt(abar_from)
///         + sqrt(1-abar_to) * eps
/// from_step/to_step must be valid positions at most one apart; to > from
/// walks toward noise (inversion), to < from toward data (sampling).
Tensor ddim_step(const Tensor& z, const Tensor& eps, const NoiseSchedule& s, int from_step,
                 int to_step);

/// Latents visited by one full pass, start point first (T + 1 entries).
struct Trajectory {
    std::vector<Tensor> latents;
};

struct DiffusionResult {
    Tensor latent;          // final point (z_T for invert, z_0 for sample)
    Trajectory trajectory;  // start .. final
};

/// Extra epsilon evaluations per inversion step (see ddim_invert).
inline constexpr int kDefaultInvertRefine = 2;

/// Reversed DDIM recurrence from clean data to noise. Each step targets the
/// sampling recurrence's fixed point: the first epsilon comes from the step's
/// start latent, then `refine_iters` re-evaluations at the provisional end
/// latent pull the update toward the epsilon ddim_sample will see at the same
/// position, which is what makes invert-then-sample round trips tight.
/// HookFrame.step counts iterations of this loop from 0; hooks fire once per
/// epsilon evaluation, including refinements.
DiffusionResult ddim_invert(const Denoiser& model, const Tensor& z0, const PromptEmbedding& prompt,
                            const NoiseSchedule& s, const GuidanceConfig& g,
                            const HookSet& hooks = {}, Branch branch = Branch::Edit,
                            int refine_iters = kDefaultInvertRefine);

/// Deterministic DDIM sampling from noise to data. Iteration i covers the
/// interval (T-i, T-i-1) with the model evaluated at position T-i;
/// HookFrame.step = i (0 at pure noise).
DiffusionResult ddim_sample(const Denoiser& model, const Tensor& zT, const PromptEmbedding& prompt,
                            const NoiseSchedule& s, const GuidanceConfig& g,
                            const HookSet& hooks = {}, Branch branch = Branch::Edit);

}  // namespace uniedit
