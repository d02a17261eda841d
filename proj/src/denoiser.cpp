#include "uniedit/denoiser.hpp"

#include <cmath>
#include <random>
#include <sstream>

#include "uniedit/attention.hpp"

namespace uniedit {

namespace {

// Every residual module contribution is damped by this factor so activations
// stay O(1) across the whole stack without normalization layers.
constexpr float kResidualGain = 0.1f;
constexpr int64_t kTimeEmbedDim = 16;

uint64_t mix64(uint64_t a, uint64_t b) {
    a ^= b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2);
    return a;
}

Tensor matmul_lastdim(const Tensor& a, const Tensor& w) {
    const int64_t k = a.dim(a.rank() - 1);
    if (w.rank() != 2 || w.dim(0) != k) {
        throw ShapeError("matmul: " + shape_string(a) + " x " + shape_string(w));
    }
    const int64_t rows = a.numel() / k;
    const int64_t n = w.dim(1);
    std::vector<int64_t> out_shape = a.shape();
    out_shape.back() = n;
    Tensor out(out_shape);
    for (int64_t r = 0; r < rows; ++r) {
        const float* arow = a.data() + r * k;
        float* orow = out.data() + r * n;
        for (int64_t i = 0; i < k; ++i) {
            const float av = arow[i];
            const float* wrow = w.data() + i * n;
            for (int64_t j = 0; j < n; ++j) orow[j] += av * wrow[j];
        }
    }
    return out;
}

// (B0, N, heads*dh) -> (B0*heads, N, dh), batch packing b = b0*heads + head
Tensor split_heads(const Tensor& t, int heads, int64_t dh) {
    const int64_t b0 = t.dim(0), n = t.dim(1);
    Tensor out({b0 * heads, n, dh});
    for (int64_t b = 0; b < b0; ++b)
        for (int64_t i = 0; i < n; ++i)
            for (int h = 0; h < heads; ++h)
                for (int64_t d = 0; d < dh; ++d)
                    out.at(b * heads + h, i, d) = t.at(b, i, h * dh + d);
    return out;
}

Tensor merge_heads(const Tensor& t, int heads, int64_t dh) {
    const int64_t b = t.dim(0) / heads, n = t.dim(1);
    Tensor out({b, n, static_cast<int64_t>(heads) * dh});
    for (int64_t b0 = 0; b0 < b; ++b0)
        for (int64_t i = 0; i < n; ++i)
            for (int h = 0; h < heads; ++h)
                for (int64_t d = 0; d < dh; ++d)
                    out.at(b0, i, h * dh + d) = t.at(b0 * heads + h, i, d);
    return out;
}

// zero-padded 2D convolution over (F, Cin, H, W), square kernel, given stride
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad) {
    const int64_t f = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const int64_t cout = w.dim(0), ksz = w.dim(2);
    const int64_t oh = (h + 2 * pad - ksz) / stride + 1;
    const int64_t ow = (wd + 2 * pad - ksz) / stride + 1;
    Tensor out({f, cout, oh, ow});
    const float* xd = x.data();
    const float* wdata = w.data();
    float* od = out.data();
    for (int64_t fi = 0; fi < f; ++fi) {
        for (int64_t co = 0; co < cout; ++co) {
            const float b = bias.at(co);
            float* oplane = od + (fi * cout + co) * oh * ow;
            for (int64_t oy = 0; oy < oh; ++oy) {
                const float* xframe = xd + fi * cin * h * wd;
                const float* wker = wdata + co * cin * ksz * ksz;
                for (int64_t ox = 0; ox < ow; ++ox) {
                    float acc = b;
                    for (int64_t ci = 0; ci < cin; ++ci) {
                        const float* xplane = xframe + ci * h * wd;
                        const float* wrow = wker + ci * ksz * ksz;
                        for (int64_t ky = 0; ky < ksz; ++ky) {
                            const int64_t iy = oy * stride + ky - pad;
                            if (iy < 0 || iy >= h) continue;
                            const float* xrow = xplane + iy * wd;
                            for (int64_t kx = 0; kx < ksz; ++kx) {
                                const int64_t ix = ox * stride + kx - pad;
                                if (ix < 0 || ix >= wd) continue;
                                acc += xrow[ix] * wrow[ky * ksz + kx];
                            }
                        }
                    }
                    oplane[oy * ow + ox] = acc;
                }
            }
        }
    }
    return out;
}

Tensor nearest_upsample2(const Tensor& x) {
    const int64_t f = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    Tensor out({f, c, h * 2, w * 2});
    for (int64_t fi = 0; fi < f; ++fi)
        for (int64_t ci = 0; ci < c; ++ci)
            for (int64_t y = 0; y < 2 * h; ++y)
                for (int64_t xx = 0; xx < 2 * w; ++xx)
                    out.at(fi, ci, y, xx) = x.at(fi, ci, y / 2, xx / 2);
    return out;
}

// (F, C, H, W) -> (F, H*W, C) token view, row-major spatial order
Tensor to_tokens(const Tensor& x) {
    const int64_t f = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    Tensor out({f, h * w, c});
    for (int64_t fi = 0; fi < f; ++fi)
        for (int64_t ci = 0; ci < c; ++ci)
            for (int64_t y = 0; y < h; ++y)
                for (int64_t xx = 0; xx < w; ++xx)
                    out.at(fi, y * w + xx, ci) = x.at(fi, ci, y, xx);
    return out;
}

// (F, C, H, W) -> (H*W, F, C): one token sequence over frames per location
Tensor to_temporal_tokens(const Tensor& x) {
    const int64_t f = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    Tensor out({h * w, f, c});
    for (int64_t fi = 0; fi < f; ++fi)
        for (int64_t ci = 0; ci < c; ++ci)
            for (int64_t y = 0; y < h; ++y)
                for (int64_t xx = 0; xx < w; ++xx)
                    out.at(y * w + xx, fi, ci) = x.at(fi, ci, y, xx);
    return out;
}

// residual += gain * tokens, with tokens laid out as to_tokens produced them
void add_spatial_tokens(Tensor& x, const Tensor& tok, float gain) {
    const int64_t f = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    for (int64_t fi = 0; fi < f; ++fi)
        for (int64_t ci = 0; ci < c; ++ci)
            for (int64_t y = 0; y < h; ++y)
                for (int64_t xx = 0; xx < w; ++xx)
                    x.at(fi, ci, y, xx) += gain * tok.at(fi, y * w + xx, ci);
}

void add_temporal_tokens(Tensor& x, const Tensor& tok, float gain) {
    const int64_t f = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    for (int64_t fi = 0; fi < f; ++fi)
        for (int64_t ci = 0; ci < c; ++ci)
            for (int64_t y = 0; y < h; ++y)
                for (int64_t xx = 0; xx < w; ++xx)
                    x.at(fi, ci, y, xx) += gain * tok.at(y * w + xx, fi, ci);
}

std::vector<float> sinusoidal_embedding(int step) {
    std::vector<float> emb(static_cast<size_t>(kTimeEmbedDim));
    const int64_t half = kTimeEmbedDim / 2;
    for (int64_t j = 0; j < half; ++j) {
        const double freq =
            std::exp(-std::log(10000.0) * static_cast<double>(j) / static_cast<double>(half));
        emb[static_cast<size_t>(2 * j)] = static_cast<float>(std::sin(step * freq));
        emb[static_cast<size_t>(2 * j + 1)] = static_cast<float>(std::cos(step * freq));
    }
    return emb;
}

// One attention site: hook dispatch, then the product. The plain path always
// runs weights-then-apply so that observing weights never changes numerics.
Tensor run_attention_site(const Tensor& q, const Tensor& k, const Tensor& v, AttnKind kind,
                          int layer, int heads, int64_t res_h, int64_t res_w,
                          const HookSet& hooks, const HookFrame& frame) {
    const Tensor* qp = &q;
    const Tensor* kp = &k;
    const Tensor* vp = &v;
    QkvReplacement rep;

    HookContext ctx{frame.branch, frame.step, layer,  kind, frame.pass,
                    qp,           kp,         vp,     heads, res_h, res_w};

    if (hooks.on_qkv) {
        auto r = hooks.on_qkv(ctx);
        if (r.has_value()) {
            auto take = [&](std::optional<Tensor>& slot, const Tensor* cur,
                            const char* which) -> const Tensor* {
                if (!slot.has_value()) return cur;
                if (!slot->same_shape(*cur)) {
                    throw HookContractError("hook returned " + std::string(which) + " with shape " +
                                            shape_string(*slot) + ", expected " +
                                            shape_string(*cur) + " at " + ctx.site_string());
                }
                return &*slot;
            };
            rep = std::move(*r);
            qp = take(rep.q, qp, "Q");
            kp = take(rep.k, kp, "K");
            vp = take(rep.v, vp, "V");
            ctx.q = qp;
            ctx.k = kp;
            ctx.v = vp;
        }
    }

    if (hooks.on_attention_plan) {
        auto plan = hooks.on_attention_plan(ctx);
        if (plan.has_value()) {
            try {
                return batched_mask_fused_attn(*qp, *kp, *vp, plan->fg, plan->bg, plan->blend);
            } catch (const ShapeError& e) {
                throw HookContractError("masked attention plan rejected at " + ctx.site_string() +
                                        ": " + e.what());
            }
        }
    }

    Tensor weights = batched_attention_weights(*qp, *kp);
    if (hooks.on_weights) hooks.on_weights(ctx, weights);
    return apply_attention_weights(weights, *vp);
}

}  // namespace

std::string branch_name(Branch b) {
    switch (b) {
        case Branch::Edit: return "edit";
        case Branch::Reconstruction: return "reconstruction";
        case Branch::MotionRef: return "motion-ref";
    }
    return "?";
}

std::string kind_name(AttnKind k) {
    switch (k) {
        case AttnKind::SpatialSelf: return "SA-S";
        case AttnKind::SpatialCross: return "CA-S";
        case AttnKind::TemporalSelf: return "SA-T";
    }
    return "?";
}

std::string pass_name(GuidancePass p) {
    return p == GuidancePass::Cond ? "cond" : "uncond";
}

std::string HookContext::site_string() const {
    return "branch=" + branch_name(branch) + " step=" + std::to_string(step) +
           " layer=" + std::to_string(layer) + " kind=" + kind_name(kind);
}

PromptEmbedding embed_text(const std::string& text, int64_t d_text, uint64_t seed) {
    if (d_text <= 0) throw ConfigError("text embedding dimension must be positive");
    std::vector<std::string> words;
    std::istringstream in(text);
    std::string w;
    while (in >> w) words.push_back(w);

    PromptEmbedding out;
    out.source_text = text;
    if (words.empty()) {
        out.tokens = Tensor({1, d_text});  // null prompt: single zero token
        return out;
    }
    out.tokens = Tensor({static_cast<int64_t>(words.size()), d_text});
    for (size_t pos = 0; pos < words.size(); ++pos) {
        const uint64_t token_hash = checksum_bytes(words[pos].data(), words[pos].size());
        std::mt19937_64 rng(mix64(mix64(seed, pos + 1), token_hash));
        std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
        double norm2 = 0.0;
        std::vector<float> raw(static_cast<size_t>(d_text));
        for (float& v : raw) {
            v = dist(rng);
            norm2 += static_cast<double>(v) * v;
        }
        const float inv = norm2 > 0.0 ? static_cast<float>(1.0 / std::sqrt(norm2)) : 0.0f;
        for (int64_t d = 0; d < d_text; ++d)
            out.tokens.at(static_cast<int64_t>(pos), d) = raw[static_cast<size_t>(d)] * inv;
    }
    return out;
}

void DenoiserConfig::validate() const {
    if (num_levels < 1) throw ConfigError("num_levels must be >= 1");
    if (static_cast<int>(channels.size()) != num_levels) {
        throw ConfigError("channels list must have one entry per level (" +
                          std::to_string(num_levels) + "), got " +
                          std::to_string(channels.size()));
    }
    for (int64_t c : channels)
        if (c <= 0) throw ConfigError("channel counts must be positive");
    if (heads <= 0 || head_dim <= 0) throw ConfigError("heads and head_dim must be positive");
    if (frames < 2) throw ConfigError("frame count must be >= 2");
    if (latent_channels <= 0) throw ConfigError("latent_channels must be positive");
    if (text_dim <= 0) throw ConfigError("text_dim must be positive");
    if (!(output_scale > 0.0f) || !std::isfinite(output_scale)) {
        throw ConfigError("output_scale must be positive and finite");
    }
}

void require_latent_video(const Tensor& z, const DenoiserConfig& cfg) {
    require_rank(z, 4, "latent video");
    if (z.dim(0) != cfg.frames) {
        throw ShapeError("latent frame count " + std::to_string(z.dim(0)) +
                         " does not match config frames " + std::to_string(cfg.frames));
    }
    if (z.dim(1) != cfg.latent_channels) {
        throw ShapeError("latent channel count " + std::to_string(z.dim(1)) +
                         " does not match config latent_channels " +
                         std::to_string(cfg.latent_channels));
    }
    const int64_t div = int64_t{1} << (cfg.num_levels - 1);
    if (z.dim(2) < 4 || z.dim(3) < 4 || z.dim(2) % div != 0 || z.dim(3) % div != 0) {
        throw ShapeError("latent spatial dims " + std::to_string(z.dim(2)) + "x" +
                         std::to_string(z.dim(3)) + " must be >= 4 and divisible by " +
                         std::to_string(div));
    }
    if (!z.all_finite()) throw ShapeError("latent video contains non-finite values");
}

const Tensor& Denoiser::param(const std::string& name) const {
    for (const auto& [n, t] : params_)
        if (n == name) return t;
    throw ConfigError("unknown parameter: " + name);
}

void Denoiser::set_parameter(const std::string& name, Tensor value) {
    for (auto& [n, t] : params_) {
        if (n == name) {
            if (!t.same_shape(value)) {
                throw ShapeError("parameter " + name + " has shape " + shape_string(t) +
                                 ", checkpoint provides " + shape_string(value));
            }
            t = std::move(value);
            return;
        }
    }
    throw ConfigError("unknown parameter: " + name);
}

Denoiser build_denoiser(const DenoiserConfig& cfg) {
    cfg.validate();
    Denoiser model;
    model.cfg_ = cfg;

    std::mt19937_64 rng(cfg.seed);
    auto add = [&](const std::string& name, std::vector<int64_t> shape, int64_t fan_in) {
        // uniform(-b, b) with b = sqrt(3/fan_in) keeps output variance near
        // input variance for dense/conv layers
        const float bound = std::sqrt(3.0f / static_cast<float>(fan_in));
        std::uniform_real_distribution<float> dist(-bound, bound);
        Tensor t(std::move(shape));
        for (float& v : t.values()) v = dist(rng);
        model.params_.emplace_back(name, std::move(t));
    };
    auto add_zeros = [&](const std::string& name, std::vector<int64_t> shape) {
        model.params_.emplace_back(name, Tensor(std::move(shape)));
    };

    const int64_t hd = static_cast<int64_t>(cfg.heads) * cfg.head_dim;
    const int64_t c0 = cfg.channels[0];

    add("conv_in.w", {c0, cfg.latent_channels, 3, 3}, cfg.latent_channels * 9);
    add_zeros("conv_in.b", {c0});

    auto add_block = [&](int idx, int64_t ch) {
        const std::string p = "block" + std::to_string(idx) + ".";
        add(p + "conv.w", {ch, ch, 3, 3}, ch * 9);
        add_zeros(p + "conv.b", {ch});
        add(p + "time.w", {kTimeEmbedDim, ch}, kTimeEmbedDim);
        add(p + "sa_s.wq", {ch, hd}, ch);
        add(p + "sa_s.wk", {ch, hd}, ch);
        add(p + "sa_s.wv", {ch, hd}, ch);
        add(p + "sa_s.wo", {hd, ch}, hd);
        add(p + "ca_s.wq", {ch, hd}, ch);
        add(p + "ca_s.wk", {cfg.text_dim, hd}, cfg.text_dim);
        add(p + "ca_s.wv", {cfg.text_dim, hd}, cfg.text_dim);
        add(p + "ca_s.wo", {hd, ch}, hd);
        add(p + "sa_t.wq", {ch, hd}, ch);
        add(p + "sa_t.wk", {ch, hd}, ch);
        add(p + "sa_t.wv", {ch, hd}, ch);
        add(p + "sa_t.wo", {hd, ch}, hd);
    };

    // block plan: down per level, mid at the deepest level, up per level
    int block = 0;
    for (int lvl = 0; lvl < cfg.num_levels; ++lvl) {
        add_block(block++, cfg.channels[static_cast<size_t>(lvl)]);
        if (lvl + 1 < cfg.num_levels) {
            const std::string p = "down" + std::to_string(lvl) + ".";
            add(p + "w",
                {cfg.channels[static_cast<size_t>(lvl + 1)], cfg.channels[static_cast<size_t>(lvl)],
                 2, 2},
                cfg.channels[static_cast<size_t>(lvl)] * 4);
            add_zeros(p + "b", {cfg.channels[static_cast<size_t>(lvl + 1)]});
        }
    }
    add_block(block++, cfg.channels[static_cast<size_t>(cfg.num_levels - 1)]);
    for (int lvl = cfg.num_levels - 1; lvl >= 0; --lvl) {
        add_block(block++, cfg.channels[static_cast<size_t>(lvl)]);
        if (lvl > 0) {
            const std::string p = "up" + std::to_string(lvl) + ".";
            add(p + "w",
                {cfg.channels[static_cast<size_t>(lvl - 1)], cfg.channels[static_cast<size_t>(lvl)],
                 1, 1},
                cfg.channels[static_cast<size_t>(lvl)]);
            add_zeros(p + "b", {cfg.channels[static_cast<size_t>(lvl - 1)]});
        }
    }

    add("conv_out.w", {cfg.latent_channels, c0, 3, 3}, c0 * 9);
    add_zeros("conv_out.b", {cfg.latent_channels});
    return model;
}

LatentVideo Denoiser::predict_noise(const LatentVideo& z, int step, const PromptEmbedding& text,
                                    const HookSet& hooks, const HookFrame& frame) const {
    require_latent_video(z, cfg_);
    require_rank(text.tokens, 2, "prompt tokens");
    if (text.tokens.dim(1) != cfg_.text_dim) {
        throw ShapeError("prompt token dim " + std::to_string(text.tokens.dim(1)) +
                         " does not match config text_dim " + std::to_string(cfg_.text_dim));
    }
    if (text.num_tokens() < 1) throw ShapeError("prompt must have at least one token");

    const std::vector<float> temb = sinusoidal_embedding(step);

    auto run_block = [&](Tensor x, int block_idx) -> Tensor {
        const std::string p = "block" + std::to_string(block_idx) + ".";
        const int64_t res_h = x.dim(2), res_w = x.dim(3);

        Tensor conv = conv2d(x, param(p + "conv.w"), param(p + "conv.b"), 1, 1);
        for (int64_t i = 0; i < x.numel(); ++i) x.at(i) += kResidualGain * conv.at(i);

        // per-channel bias from the sinusoidal step embedding
        const Tensor& tw = param(p + "time.w");
        const int64_t ch = x.dim(1);
        std::vector<float> bias(static_cast<size_t>(ch), 0.0f);
        for (int64_t j = 0; j < kTimeEmbedDim; ++j)
            for (int64_t c = 0; c < ch; ++c)
                bias[static_cast<size_t>(c)] += temb[static_cast<size_t>(j)] * tw.at(j, c);
        for (int64_t f = 0; f < x.dim(0); ++f)
            for (int64_t c = 0; c < ch; ++c)
                for (int64_t y = 0; y < res_h; ++y)
                    for (int64_t xx = 0; xx < res_w; ++xx)
                        x.at(f, c, y, xx) += kResidualGain * bias[static_cast<size_t>(c)];

        // SA-S: tokens are spatial positions, batched over frames (and heads)
        {
            Tensor tok = to_tokens(x);
            Tensor q = split_heads(matmul_lastdim(tok, param(p + "sa_s.wq")), cfg_.heads,
                                   cfg_.head_dim);
            Tensor k = split_heads(matmul_lastdim(tok, param(p + "sa_s.wk")), cfg_.heads,
                                   cfg_.head_dim);
            Tensor v = split_heads(matmul_lastdim(tok, param(p + "sa_s.wv")), cfg_.heads,
                                   cfg_.head_dim);
            Tensor out = run_attention_site(q, k, v, AttnKind::SpatialSelf, block_idx, cfg_.heads,
                                            res_h, res_w, hooks, frame);
            Tensor o = matmul_lastdim(merge_heads(out, cfg_.heads, cfg_.head_dim),
                                      param(p + "sa_s.wo"));
            add_spatial_tokens(x, o, kResidualGain);
        }

        // CA-S: queries from frame tokens, keys/values from the prompt tokens
        {
            Tensor tok = to_tokens(x);
            Tensor q = split_heads(matmul_lastdim(tok, param(p + "ca_s.wq")), cfg_.heads,
                                   cfg_.head_dim);
            Tensor tk = matmul_lastdim(text.tokens, param(p + "ca_s.wk"));  // (L, hd)
            Tensor tv = matmul_lastdim(text.tokens, param(p + "ca_s.wv"));
            const int64_t L = tk.dim(0);
            // tile text keys/values across frames so batches line up with Q
            Tensor k({x.dim(0) * cfg_.heads, L, cfg_.head_dim});
            Tensor v({x.dim(0) * cfg_.heads, L, cfg_.head_dim});
            for (int64_t f = 0; f < x.dim(0); ++f)
                for (int h = 0; h < cfg_.heads; ++h)
                    for (int64_t l = 0; l < L; ++l)
                        for (int64_t d = 0; d < cfg_.head_dim; ++d) {
                            k.at(f * cfg_.heads + h, l, d) = tk.at(l, h * cfg_.head_dim + d);
                            v.at(f * cfg_.heads + h, l, d) = tv.at(l, h * cfg_.head_dim + d);
                        }
            Tensor out = run_attention_site(q, k, v, AttnKind::SpatialCross, block_idx, cfg_.heads,
                                            res_h, res_w, hooks, frame);
            Tensor o = matmul_lastdim(merge_heads(out, cfg_.heads, cfg_.head_dim),
                                      param(p + "ca_s.wo"));
            add_spatial_tokens(x, o, kResidualGain);
        }

        // SA-T: tokens are frames, batched over spatial locations (and heads)
        {
            Tensor tok = to_temporal_tokens(x);
            Tensor q = split_heads(matmul_lastdim(tok, param(p + "sa_t.wq")), cfg_.heads,
                                   cfg_.head_dim);
            Tensor k = split_heads(matmul_lastdim(tok, param(p + "sa_t.wk")), cfg_.heads,
                                   cfg_.head_dim);
            Tensor v = split_heads(matmul_lastdim(tok, param(p + "sa_t.wv")), cfg_.heads,
                                   cfg_.head_dim);
            Tensor out = run_attention_site(q, k, v, AttnKind::TemporalSelf, block_idx, cfg_.heads,
                                            res_h, res_w, hooks, frame);
            Tensor o = matmul_lastdim(merge_heads(out, cfg_.heads, cfg_.head_dim),
                                      param(p + "sa_t.wo"));
            add_temporal_tokens(x, o, kResidualGain);
        }
        return x;
    };

    Tensor x = conv2d(z, param("conv_in.w"), param("conv_in.b"), 1, 1);
    int block = 0;
    for (int lvl = 0; lvl < cfg_.num_levels; ++lvl) {
        x = run_block(std::move(x), block++);
        if (lvl + 1 < cfg_.num_levels) {
            const std::string p = "down" + std::to_string(lvl) + ".";
            x = conv2d(x, param(p + "w"), param(p + "b"), 2, 0);
        }
    }
    x = run_block(std::move(x), block++);
    for (int lvl = cfg_.num_levels - 1; lvl >= 0; --lvl) {
        x = run_block(std::move(x), block++);
        if (lvl > 0) {
            const std::string p = "up" + std::to_string(lvl) + ".";
            x = conv2d(nearest_upsample2(x), param(p + "w"), param(p + "b"), 1, 0);
        }
    }

    Tensor eps = conv2d(x, param("conv_out.w"), param("conv_out.b"), 1, 1);
    for (float& v : eps.values()) v *= cfg_.output_scale;
    return eps;
}

}  // namespace uniedit
