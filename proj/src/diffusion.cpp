#include "uniedit/diffusion.hpp"

#include <cmath>

namespace uniedit {

namespace {
constexpr int kVirtualSteps = 1000;
constexpr double kBetaStart = 1e-4;
constexpr double kBetaEnd = 2e-2;
}  // namespace

void NoiseSchedule::validate() const {
    if (T < 1) throw ConfigError("schedule needs at least one step");
    if (static_cast<int>(alpha_bar.size()) != T + 1) {
        throw ConfigError("alpha_bar must have T+1 entries, got " +
                          std::to_string(alpha_bar.size()));
    }
    if (alpha_bar[0] != 1.0) throw ConfigError("alpha_bar[0] must be 1 (clean data)");
    for (int k = 0; k <= T; ++k) {
        if (!(alpha_bar[static_cast<size_t>(k)] > 0.0) ||
            alpha_bar[static_cast<size_t>(k)] > 1.0) {
            throw ConfigError("alpha_bar[" + std::to_string(k) + "] outside (0, 1]");
        }
        if (k > 0 &&
            alpha_bar[static_cast<size_t>(k)] >= alpha_bar[static_cast<size_t>(k - 1)]) {
            throw ConfigError("alpha_bar must be strictly decreasing at position " +
                              std::to_string(k));
        }
    }
}

double NoiseSchedule::abar(int k) const {
    if (k < 0 || k > T) {
        throw ConfigError("schedule position " + std::to_string(k) + " out of range [0, " +
                          std::to_string(T) + "]");
    }
    return alpha_bar[static_cast<size_t>(k)];
}

NoiseSchedule make_schedule(int T) {
    if (T < 1 || T > kVirtualSteps) {
        throw ConfigError("step count must be in [1, " + std::to_string(kVirtualSteps) +
                          "], got " + std::to_string(T));
    }
    std::vector<double> abar_virtual(kVirtualSteps);
    double prod = 1.0;
    for (int i = 0; i < kVirtualSteps; ++i) {
        const double beta =
            kBetaStart + (kBetaEnd - kBetaStart) * static_cast<double>(i) / (kVirtualSteps - 1);
        prod *= 1.0 - beta;
        abar_virtual[static_cast<size_t>(i)] = prod;
    }
    NoiseSchedule s;
    s.T = T;
    s.alpha_bar.resize(static_cast<size_t>(T) + 1);
    s.alpha_bar[0] = 1.0;
    for (int k = 1; k <= T; ++k) {
        const int64_t v = static_cast<int64_t>(k - 1) * kVirtualSteps / T;
        s.alpha_bar[static_cast<size_t>(k)] = abar_virtual[static_cast<size_t>(v)];
    }
    s.validate();
    return s;
}

Tensor guided_epsilon(const Denoiser& model, const Tensor& z, int step,
                      const PromptEmbedding& cond, const GuidanceConfig& g, const HookSet& hooks,
                      HookFrame frame) {
    if (!std::isfinite(g.scale) || g.scale < 0.0f) {
        throw ConfigError("guidance scale must be finite and >= 0");
    }
    if (g.scale == 1.0f) {
        frame.pass = GuidancePass::Cond;
        return model.predict_noise(z, step, cond, hooks, frame);
    }
    if (g.scale == 0.0f) {
        frame.pass = GuidancePass::Uncond;
        return model.predict_noise(z, step, g.uncond, hooks, frame);
    }
    frame.pass = GuidancePass::Uncond;
    Tensor eu = model.predict_noise(z, step, g.uncond, hooks, frame);
    frame.pass = GuidancePass::Cond;
    Tensor ec = model.predict_noise(z, step, cond, hooks, frame);
    Tensor out(z.shape());
    for (int64_t i = 0; i < out.numel(); ++i) {
        out.at(i) = eu.at(i) + g.scale * (ec.at(i) - eu.at(i));
    }
    return out;
}

Tensor ddim_step(const Tensor& z, const Tensor& eps, const NoiseSchedule& s, int from_step,
                 int to_step) {
    s.validate();
    require_same_shape(z, eps, "latent and epsilon");
    if (std::abs(from_step - to_step) > 1) {
        throw ConfigError("ddim_step positions must be adjacent, got " +
                          std::to_string(from_step) + " -> " + std::to_string(to_step));
    }
    const double a_from = s.abar(from_step);
    const double a_to = s.abar(to_step);
    const double sq_from = std::sqrt(a_from);
    const double sq_to = std::sqrt(a_to);
    const double sig_from = std::sqrt(1.0 - a_from);
    const double sig_to = std::sqrt(1.0 - a_to);
    Tensor out(z.shape());
    for (int64_t i = 0; i < z.numel(); ++i) {
        const double x = z.at(i);
        const double e = eps.at(i);
        out.at(i) = static_cast<float>(sq_to * (x - sig_from * e) / sq_from + sig_to * e);
    }
    return out;
}

namespace {

void require_finite_at(const Tensor& z, int iteration, const char* direction) {
    if (!z.all_finite()) {
        throw Error(std::string(direction) + " produced non-finite latents at iteration " +
                    std::to_string(iteration));
    }
}

}  // namespace

DiffusionResult ddim_invert(const Denoiser& model, const Tensor& z0, const PromptEmbedding& prompt,
                            const NoiseSchedule& s, const GuidanceConfig& g, const HookSet& hooks,
                            Branch branch, int refine_iters) {
    s.validate();
    require_latent_video(z0, model.config());
    if (refine_iters < 0) throw ConfigError("refine_iters must be >= 0");
    DiffusionResult r;
    r.trajectory.latents.reserve(static_cast<size_t>(s.T) + 1);
    Tensor z = z0;
    r.trajectory.latents.push_back(z);
    for (int i = 0; i < s.T; ++i) {
        const int k = i + 1;  // target position
        HookFrame frame{branch, i, GuidancePass::Cond};
        Tensor eps = guided_epsilon(model, z, k, prompt, g, hooks, frame);
        Tensor next = ddim_step(z, eps, s, k - 1, k);
        for (int rf = 0; rf < refine_iters; ++rf) {
            eps = guided_epsilon(model, next, k, prompt, g, hooks, frame);
            next = ddim_step(z, eps, s, k - 1, k);
        }
        z = std::move(next);
        require_finite_at(z, i, "inversion");
        r.trajectory.latents.push_back(z);
    }
    r.latent = std::move(z);
    return r;
}

DiffusionResult ddim_sample(const Denoiser& model, const Tensor& zT, const PromptEmbedding& prompt,
                            const NoiseSchedule& s, const GuidanceConfig& g, const HookSet& hooks,
                            Branch branch) {
    s.validate();
    require_latent_video(zT, model.config());
    DiffusionResult r;
    r.trajectory.latents.reserve(static_cast<size_t>(s.T) + 1);
    Tensor z = zT;
    r.trajectory.latents.push_back(z);
    for (int i = 0; i < s.T; ++i) {
        const int k = s.T - i;  // model evaluated at the upper end of (k, k-1)
        HookFrame frame{branch, i, GuidancePass::Cond};
        Tensor eps = guided_epsilon(model, z, k, prompt, g, hooks, frame);
        z = ddim_step(z, eps, s, k, k - 1);
        require_finite_at(z, i, "sampling");
        r.trajectory.latents.push_back(z);
    }
    r.latent = std::move(z);
    return r;
}

}  // namespace uniedit
