#include "uniedit/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <iomanip>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include "uniedit/image_io.hpp"

namespace uniedit {

namespace {

constexpr int64_t kPatch = 8;           // embedder input grid
constexpr int kPyramidLevels = 3;       // flow pyramid depth at full size
constexpr int64_t kMinLevelSize = 8;    // stop coarsening below this
constexpr int kFlowIters = 6;           // refinements per level
constexpr int kWindowRadius = 2;        // 5x5 least-squares window
constexpr double kDamping = 1e-3;       // ridge term on the normal equations
constexpr float kMaxStep = 3.0f;        // per-iteration update clamp, pixels
constexpr float kConstantEps = 1e-6f;   // intensity range below which a frame
                                        // counts as constant

uint64_t mix64(uint64_t a, uint64_t b) {
    a ^= b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2);
    return a;
}

std::string hex64(uint64_t v) {
    std::ostringstream out;
    out << std::hex << std::setw(16) << std::setfill('0') << v;
    return out.str();
}

Tensor normalized_or_throw(const Tensor& vec, const std::string& what) {
    double norm2 = 0.0;
    for (float v : vec.values()) norm2 += static_cast<double>(v) * v;
    if (!(norm2 > 0.0)) throw ConfigError(what + " is a zero-norm embedding");
    Tensor out = vec;
    const float inv = static_cast<float>(1.0 / std::sqrt(norm2));
    for (float& v : out.values()) v *= inv;
    return out;
}

Tensor frame_slice(const Tensor& video, int64_t f) {
    const int64_t c = video.dim(1), h = video.dim(2), w = video.dim(3);
    Tensor out({c, h, w});
    const float* src = video.data() + f * c * h * w;
    std::copy(src, src + c * h * w, out.data());
    return out;
}

double cosine(const Tensor& a, const Tensor& b, const std::string& what) {
    require_same_shape(a, b, "embeddings");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        const double x = a.at(i), y = b.at(i);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if (!(na > 0.0) || !(nb > 0.0)) throw ConfigError(what + " is a zero-norm embedding");
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace

// --- embedders --------------------------------------------------------------

RandomProjectionEmbedder::RandomProjectionEmbedder(int64_t dim, uint64_t seed)
    : dim_(dim), seed_(seed) {
    if (dim < 2) throw ConfigError("embedding dimension must be >= 2");
    const int64_t features = 3 * kPatch * kPatch + 1;  // +1: constant bias
    projection_ = Tensor({dim, features});
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
    const float scale = 1.0f / std::sqrt(static_cast<float>(features));
    for (float& v : projection_.values()) v = dist(rng) * scale;
}

Tensor RandomProjectionEmbedder::image_embed(const Tensor& frame) const {
    require_rank(frame, 3, "frame");
    const int64_t c = frame.dim(0);
    if (c != 1 && c != 3) {
        throw ShapeError("embedder expects 1- or 3-channel frames, got " + shape_string(frame));
    }
    const Tensor patch = resize_bilinear(frame, kPatch, kPatch);
    const int64_t features = projection_.dim(1);
    std::vector<float> f(static_cast<size_t>(features), 0.0f);
    for (int64_t ch = 0; ch < 3; ++ch) {
        const int64_t src_ch = c == 1 ? 0 : ch;  // gray replicates
        for (int64_t i = 0; i < kPatch * kPatch; ++i) {
            f[static_cast<size_t>(ch * kPatch * kPatch + i)] =
                patch.at(src_ch * kPatch * kPatch + i);
        }
    }
    f.back() = 1.0f;

    Tensor out({dim_});
    for (int64_t d = 0; d < dim_; ++d) {
        double acc = 0.0;
        const float* row = projection_.data() + d * features;
        for (int64_t i = 0; i < features; ++i) acc += static_cast<double>(row[i]) * f[i];
        out.at(d) = static_cast<float>(acc);
    }
    return normalized_or_throw(out, "projected frame");
}

Tensor RandomProjectionEmbedder::text_embed(const std::string& prompt) const {
    std::vector<std::string> words;
    std::istringstream in(prompt);
    std::string w;
    while (in >> w) words.push_back(w);

    Tensor out({dim_});
    auto add_direction = [&](uint64_t seed) {
        std::mt19937_64 rng(seed);
        std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
        for (int64_t d = 0; d < dim_; ++d) out.at(d) += dist(rng);
    };
    add_direction(mix64(seed_, 0x73746172u));  // start-of-prompt direction
    for (size_t pos = 0; pos < words.size(); ++pos) {
        const uint64_t token_hash = checksum_bytes(words[pos].data(), words[pos].size());
        add_direction(mix64(mix64(seed_, pos + 1), token_hash));
    }
    return normalized_or_throw(out, "prompt '" + prompt + "'");
}

FileEmbeddingProvider::FileEmbeddingProvider(const std::string& path)
    : path_(path), entries_(read_tensor_container(path)) {}

std::string FileEmbeddingProvider::image_key(const Tensor& frame) {
    return "image_" + hex64(checksum(frame));
}

std::string FileEmbeddingProvider::text_key(const std::string& prompt) {
    return "text_" + hex64(checksum_bytes(prompt.data(), prompt.size()));
}

const Tensor& FileEmbeddingProvider::lookup(const std::string& key) const {
    try {
        return find_entry(entries_, key);
    } catch (const IoError&) {
        throw IoError(path_ + ": no stored embedding for key '" + key + "'");
    }
}

Tensor FileEmbeddingProvider::image_embed(const Tensor& frame) const {
    require_rank(frame, 3, "frame");
    const std::string key = image_key(frame);
    return normalized_or_throw(lookup(key), "entry '" + key + "'");
}

Tensor FileEmbeddingProvider::text_embed(const std::string& prompt) const {
    const std::string key = text_key(prompt);
    return normalized_or_throw(lookup(key), "entry '" + key + "'");
}

// --- scores -----------------------------------------------------------------

double frame_consistency(const Tensor& video, const EmbeddingProvider& provider) {
    require_rank(video, 4, "video");
    const int64_t frames = video.dim(0);
    if (frames < 2) {
        throw ConfigError("frame consistency needs at least two frames, got " +
                          std::to_string(frames));
    }
    std::vector<Tensor> embeds;
    embeds.reserve(static_cast<size_t>(frames));
    for (int64_t f = 0; f < frames; ++f) embeds.push_back(provider.image_embed(frame_slice(video, f)));

    double acc = 0.0;
    for (int64_t f = 0; f + 1 < frames; ++f) {
        acc += cosine(embeds[static_cast<size_t>(f)], embeds[static_cast<size_t>(f + 1)],
                      "frame " + std::to_string(f));
    }
    return 100.0 * acc / static_cast<double>(frames - 1);
}

double textual_alignment(const Tensor& video, const std::string& prompt,
                         const EmbeddingProvider& provider) {
    require_rank(video, 4, "video");
    const int64_t frames = video.dim(0);
    if (frames < 1) throw ConfigError("textual alignment needs at least one frame");
    const Tensor text = provider.text_embed(prompt);

    double acc = 0.0;
    for (int64_t f = 0; f < frames; ++f) {
        acc += cosine(provider.image_embed(frame_slice(video, f)), text,
                      "frame " + std::to_string(f));
    }
    return 100.0 * acc / static_cast<double>(frames);
}

// --- optical flow -----------------------------------------------------------

namespace {

Tensor to_gray(const Tensor& video, int64_t f) {
    const int64_t c = video.dim(1), h = video.dim(2), w = video.dim(3);
    Tensor out({h, w});
    const float inv = 1.0f / static_cast<float>(c);
    for (int64_t ch = 0; ch < c; ++ch) {
        const float* src = video.data() + (f * c + ch) * h * w;
        for (int64_t i = 0; i < h * w; ++i) out.at(i) += src[i] * inv;
    }
    return out;
}

bool nearly_constant(const Tensor& img) {
    const auto [lo, hi] = std::minmax_element(img.values().begin(), img.values().end());
    return *hi - *lo < kConstantEps;
}

Tensor downsample2(const Tensor& img) {
    const int64_t h = img.dim(0), w = img.dim(1);
    const int64_t oh = std::max<int64_t>(1, h / 2), ow = std::max<int64_t>(1, w / 2);
    Tensor out({oh, ow});
    for (int64_t y = 0; y < oh; ++y) {
        for (int64_t x = 0; x < ow; ++x) {
            double acc = 0.0;
            int n = 0;
            for (int64_t dy = 0; dy < 2; ++dy) {
                for (int64_t dx = 0; dx < 2; ++dx) {
                    const int64_t sy = std::min(2 * y + dy, h - 1);
                    const int64_t sx = std::min(2 * x + dx, w - 1);
                    acc += img.at(sy, sx);
                    ++n;
                }
            }
            out.at(y, x) = static_cast<float>(acc / n);
        }
    }
    return out;
}

std::vector<Tensor> build_pyramid(const Tensor& img, int levels) {
    std::vector<Tensor> pyr{img};
    for (int l = 1; l < levels; ++l) pyr.push_back(downsample2(pyr.back()));
    return pyr;
}

float sample_clamped(const Tensor& img, double x, double y) {
    const int64_t h = img.dim(0), w = img.dim(1);
    x = std::clamp(x, 0.0, static_cast<double>(w - 1));
    y = std::clamp(y, 0.0, static_cast<double>(h - 1));
    const int64_t x0 = static_cast<int64_t>(std::floor(x));
    const int64_t y0 = static_cast<int64_t>(std::floor(y));
    const int64_t x1 = std::min(x0 + 1, w - 1);
    const int64_t y1 = std::min(y0 + 1, h - 1);
    const double wx = x - static_cast<double>(x0);
    const double wy = y - static_cast<double>(y0);
    const double top = (1.0 - wx) * img.at(y0, x0) + wx * img.at(y0, x1);
    const double bot = (1.0 - wx) * img.at(y1, x0) + wx * img.at(y1, x1);
    return static_cast<float>((1.0 - wy) * top + wy * bot);
}

/// One damped least-squares update of (u, v) against I0 and I1.
void refine_flow(const Tensor& i0, const Tensor& i1, Tensor& u, Tensor& v) {
    const int64_t h = i0.dim(0), w = i0.dim(1);

    Tensor it({h, w}), ix({h, w}), iy({h, w});
    for (int64_t y = 0; y < h; ++y) {
        for (int64_t x = 0; x < w; ++x) {
            it.at(y, x) = sample_clamped(i1, x + u.at(y, x), y + v.at(y, x)) - i0.at(y, x);
            const int64_t xm = std::max<int64_t>(x - 1, 0), xp = std::min(x + 1, w - 1);
            const int64_t ym = std::max<int64_t>(y - 1, 0), yp = std::min(y + 1, h - 1);
            ix.at(y, x) = (i0.at(y, xp) - i0.at(y, xm)) / static_cast<float>(xp - xm == 0 ? 1 : xp - xm);
            iy.at(y, x) = (i0.at(yp, x) - i0.at(ym, x)) / static_cast<float>(yp - ym == 0 ? 1 : yp - ym);
        }
    }

    for (int64_t y = 0; y < h; ++y) {
        for (int64_t x = 0; x < w; ++x) {
            double a11 = 0.0, a12 = 0.0, a22 = 0.0, b1 = 0.0, b2 = 0.0;
            for (int64_t dy = -kWindowRadius; dy <= kWindowRadius; ++dy) {
                for (int64_t dx = -kWindowRadius; dx <= kWindowRadius; ++dx) {
                    const int64_t sy = std::clamp<int64_t>(y + dy, 0, h - 1);
                    const int64_t sx = std::clamp<int64_t>(x + dx, 0, w - 1);
                    const double gx = ix.at(sy, sx), gy = iy.at(sy, sx), gt = it.at(sy, sx);
                    a11 += gx * gx;
                    a12 += gx * gy;
                    a22 += gy * gy;
                    b1 += gx * gt;
                    b2 += gy * gt;
                }
            }
            // (A + damping*I) d = -b; A is PSD so the damped system is SPD
            const double det = (a11 + kDamping) * (a22 + kDamping) - a12 * a12;
            const double du = (-(a22 + kDamping) * b1 + a12 * b2) / det;
            const double dv = (a12 * b1 - (a11 + kDamping) * b2) / det;
            u.at(y, x) += std::clamp(static_cast<float>(du), -kMaxStep, kMaxStep);
            v.at(y, x) += std::clamp(static_cast<float>(dv), -kMaxStep, kMaxStep);
        }
    }
}

Tensor box3(const Tensor& img) {
    const int64_t h = img.dim(0), w = img.dim(1);
    Tensor out({h, w});
    for (int64_t y = 0; y < h; ++y) {
        for (int64_t x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int64_t dy = -1; dy <= 1; ++dy) {
                for (int64_t dx = -1; dx <= 1; ++dx) {
                    acc += img.at(std::clamp<int64_t>(y + dy, 0, h - 1),
                                  std::clamp<int64_t>(x + dx, 0, w - 1));
                }
            }
            out.at(y, x) = static_cast<float>(acc / 9.0);
        }
    }
    return out;
}

/// Upsamples one flow component and rescales its magnitude by the resolution
/// ratio along its axis.
Tensor resize_field(const Tensor& field, int64_t oh, int64_t ow, double scale) {
    Tensor wrapped({1, field.dim(0), field.dim(1)});
    std::copy(field.values().begin(), field.values().end(), wrapped.data());
    Tensor resized = resize_bilinear(wrapped, oh, ow);
    Tensor out({oh, ow});
    for (int64_t i = 0; i < oh * ow; ++i) out.at(i) = static_cast<float>(resized.at(i) * scale);
    return out;
}

Tensor estimate_pair(const Tensor& g0, const Tensor& g1) {
    const int64_t h = g0.dim(0), w = g0.dim(1);
    // shrink the pyramid until the coarsest level keeps enough pixels
    int levels = kPyramidLevels;
    while (levels > 1 &&
           ((h >> (levels - 1)) < kMinLevelSize || (w >> (levels - 1)) < kMinLevelSize)) {
        --levels;
    }

    const auto pyr0 = build_pyramid(g0, levels);
    const auto pyr1 = build_pyramid(g1, levels);

    Tensor u({pyr0.back().dim(0), pyr0.back().dim(1)});
    Tensor v(u.shape());
    for (int level = levels - 1; level >= 0; --level) {
        const Tensor& i0 = pyr0[static_cast<size_t>(level)];
        const Tensor& i1 = pyr1[static_cast<size_t>(level)];
        if (level < levels - 1) {
            const double sx = static_cast<double>(i0.dim(1)) / u.dim(1);
            const double sy = static_cast<double>(i0.dim(0)) / u.dim(0);
            u = resize_field(u, i0.dim(0), i0.dim(1), sx);
            v = resize_field(v, i0.dim(0), i0.dim(1), sy);
        }
        for (int iter = 0; iter < kFlowIters; ++iter) {
            refine_flow(i0, i1, u, v);
            u = box3(u);
            v = box3(v);
        }
    }

    Tensor flow({h, w, 2});
    for (int64_t y = 0; y < h; ++y) {
        for (int64_t x = 0; x < w; ++x) {
            flow.at(y, x, 0) = u.at(y, x);
            flow.at(y, x, 1) = v.at(y, x);
        }
    }
    return flow;
}

}  // namespace

Tensor FlowField::mean_magnitude() const {
    if (pairs.empty()) throw ConfigError("flow field has no frame pairs");
    const int64_t h = pairs.front().dim(0), w = pairs.front().dim(1);
    Tensor out({h, w});
    for (const Tensor& p : pairs) {
        for (int64_t i = 0; i < h * w; ++i) {
            const double u = p.at(2 * i), v = p.at(2 * i + 1);
            out.at(i) += static_cast<float>(std::sqrt(u * u + v * v) / pairs.size());
        }
    }
    return out;
}

int worker_thread_cap() {
    const char* raw = std::getenv("UNIEDIT_THREADS");
    if (raw == nullptr || *raw == '\0') return 1;
    char* end = nullptr;
    const long parsed = std::strtol(raw, &end, 10);
    if (end == raw || *end != '\0') return 1;
    if (parsed < 1) return 1;
    return static_cast<int>(std::min(parsed, 64L));
}

FlowField optical_flow(const Tensor& video) {
    require_rank(video, 4, "video");
    const int64_t frames = video.dim(0);
    if (frames < 2) {
        throw ConfigError("optical flow needs at least two frames, got " +
                          std::to_string(frames));
    }

    std::vector<Tensor> grays;
    grays.reserve(static_cast<size_t>(frames));
    for (int64_t f = 0; f < frames; ++f) grays.push_back(to_gray(video, f));

    const int64_t num_pairs = frames - 1;
    std::vector<Tensor> pairs(static_cast<size_t>(num_pairs));
    std::vector<char> degenerate(static_cast<size_t>(num_pairs), 0);
    auto work = [&](int64_t p) {
        if (nearly_constant(grays[p]) || nearly_constant(grays[p + 1])) {
            pairs[static_cast<size_t>(p)] = Tensor({video.dim(2), video.dim(3), 2});
            degenerate[static_cast<size_t>(p)] = 1;
        } else {
            pairs[static_cast<size_t>(p)] = estimate_pair(grays[p], grays[p + 1]);
        }
    };

    const int workers = static_cast<int>(
        std::min<int64_t>(worker_thread_cap(), num_pairs));
    if (workers <= 1) {
        for (int64_t p = 0; p < num_pairs; ++p) work(p);
    } else {
        // each pair is independent; workers take every workers-th pair
        std::vector<std::thread> pool;
        pool.reserve(static_cast<size_t>(workers));
        for (int w = 0; w < workers; ++w) {
            pool.emplace_back([&, w] {
                for (int64_t p = w; p < num_pairs; p += workers) work(p);
            });
        }
        for (std::thread& t : pool) t.join();
    }

    FlowField out;
    out.pairs = std::move(pairs);
    for (char d : degenerate) {
        if (d) out.degenerate = true;
    }
    return out;
}

// --- attention / flow overlap ----------------------------------------------

double pearson(const std::vector<double>& a, const std::vector<double>& b, bool* constant_flag) {
    if (a.size() != b.size() || a.size() < 2) {
        throw ConfigError("correlation needs two equally sized series of length >= 2");
    }
    const double n = static_cast<double>(a.size());
    double ma = 0.0, mb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        ma += a[i] / n;
        mb += b[i] / n;
    }
    double cov = 0.0, va = 0.0, vb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        cov += (a[i] - ma) * (b[i] - mb);
        va += (a[i] - ma) * (a[i] - ma);
        vb += (b[i] - mb) * (b[i] - mb);
    }
    if (va <= 0.0 || vb <= 0.0) {
        if (constant_flag) *constant_flag = true;
        return 0.0;
    }
    return cov / std::sqrt(va * vb);
}

Tensor temporal_deviation_map(const DumpRecord& rec) {
    require_rank(rec.weights, 3, "temporal attention weights");
    const int64_t n = rec.weights.dim(0), f = rec.weights.dim(1);
    if (rec.weights.dim(2) != f) {
        throw ShapeError("temporal attention weights must be square per location, got " +
                         shape_string(rec.weights));
    }
    if (rec.attn_h * rec.attn_w != n) {
        throw ShapeError("attention grid " + std::to_string(rec.attn_h) + "x" +
                         std::to_string(rec.attn_w) + " does not cover " + std::to_string(n) +
                         " locations");
    }
    Tensor out({rec.attn_h, rec.attn_w});
    for (int64_t p = 0; p < n; ++p) {
        double trace = 0.0;
        for (int64_t i = 0; i < f; ++i) trace += rec.weights.at(p, i, i);
        out.at(p) = static_cast<float>(1.0 - trace / static_cast<double>(f));
    }
    return out;
}

Tensor spatial_query_map(const DumpRecord& rec) {
    if (rec.query_magnitude.empty()) {
        throw ConfigError("attention record has no stored query magnitudes");
    }
    require_rank(rec.query_magnitude, 2, "query magnitudes");
    const int64_t frames = rec.query_magnitude.dim(0);
    const int64_t n = rec.query_magnitude.dim(1);
    if (rec.attn_h * rec.attn_w != n) {
        throw ShapeError("attention grid " + std::to_string(rec.attn_h) + "x" +
                         std::to_string(rec.attn_w) + " does not cover " + std::to_string(n) +
                         " query locations");
    }
    Tensor out({rec.attn_h, rec.attn_w});
    for (int64_t f = 0; f < frames; ++f) {
        for (int64_t p = 0; p < n; ++p) {
            out.at(p) += rec.query_magnitude.at(f, p) / static_cast<float>(frames);
        }
    }
    return out;
}

OverlapReport flow_attention_overlap(const FlowField& flow, const AttentionDump& dump) {
    const Tensor mag = flow.mean_magnitude();

    std::map<int, std::vector<const DumpRecord*>> temporal, spatial;
    for (const auto& [key, rec] : dump.records) {
        if (key.kind == AttnKind::TemporalSelf) temporal[key.layer].push_back(&rec);
        if (key.kind == AttnKind::SpatialSelf) spatial[key.layer].push_back(&rec);
    }
    if (temporal.empty() || spatial.empty()) {
        throw ConfigError(
            "overlap analysis needs at least one temporal and one spatial self-attention record");
    }

    auto averaged = [](const std::vector<const DumpRecord*>& recs, auto&& to_map) {
        Tensor acc;
        for (const DumpRecord* r : recs) {
            Tensor m = to_map(*r);
            if (acc.empty()) {
                acc = std::move(m);
            } else {
                require_same_shape(acc, m, "layer maps");
                for (int64_t i = 0; i < acc.numel(); ++i) acc.at(i) += m.at(i);
            }
        }
        const float inv = 1.0f / static_cast<float>(recs.size());
        for (float& v : acc.values()) v *= inv;
        return acc;
    };

    OverlapReport report;
    for (const auto& [layer, trecs] : temporal) {
        auto sit = spatial.find(layer);
        if (sit == spatial.end()) continue;

        const Tensor dev = averaged(trecs, temporal_deviation_map);
        const Tensor query = averaged(sit->second, spatial_query_map);
        require_same_shape(dev, query, "layer maps");

        Tensor wrapped({1, mag.dim(0), mag.dim(1)});
        std::copy(mag.values().begin(), mag.values().end(), wrapped.data());
        const Tensor flow_ds = resize_bilinear(wrapped, dev.dim(0), dev.dim(1));

        std::vector<double> fs, ds, qs;
        for (int64_t i = 0; i < dev.numel(); ++i) {
            fs.push_back(flow_ds.at(i));
            ds.push_back(dev.at(i));
            qs.push_back(query.at(i));
        }

        OverlapLayerReport row;
        row.layer = layer;
        row.temporal_correlation = pearson(fs, ds, &row.temporal_constant);
        row.spatial_correlation = pearson(fs, qs, &row.spatial_constant);
        report.layers.push_back(row);
    }
    if (report.layers.empty()) {
        throw ConfigError("no attention layer has both temporal and spatial records");
    }
    return report;
}

}  // namespace uniedit
