#include "uniedit/masks.hpp"

#include <cmath>
#include <limits>

#include "uniedit/image_io.hpp"

namespace uniedit {

namespace {

constexpr float kNegInf = -std::numeric_limits<float>::infinity();

void require_binary_stack(const Tensor& stack, const char* name) {
    require_rank(stack, 3, name);
    for (float v : stack.values()) {
        if (v != 0.0f && v != 1.0f) {
            throw ShapeError(std::string(name) + " must be binary, found " + std::to_string(v));
        }
    }
}

}  // namespace

void MaskSet::validate() const {
    require_binary_stack(edit_fg, "edit foreground mask");
    require_binary_stack(motion_fg, "motion foreground mask");
    require_same_shape(edit_fg, motion_fg, "mask stacks");
}

Tensor resample_mask(const Tensor& stack, int64_t out_h, int64_t out_w) {
    require_binary_stack(stack, "mask stack");
    const int64_t f = stack.dim(0), h = stack.dim(1), w = stack.dim(2);
    if (out_h < 1 || out_w < 1) throw ShapeError("mask resample target must be positive");
    if (h == out_h && w == out_w) return stack;
    Tensor out({f, out_h, out_w});
    for (int64_t fi = 0; fi < f; ++fi) {
        for (int64_t y = 0; y < out_h; ++y) {
            const int64_t sy = std::min(y * h / out_h, h - 1);
            for (int64_t x = 0; x < out_w; ++x) {
                const int64_t sx = std::min(x * w / out_w, w - 1);
                out.at(fi, y, x) = stack.at(fi, sy, sx);
            }
        }
    }
    return out;
}

AdditiveMaskPair spatial_additive_masks(const Tensor& fg_at_res, int heads) {
    require_binary_stack(fg_at_res, "foreground mask");
    if (heads < 1) throw ShapeError("heads must be positive");
    const int64_t f = fg_at_res.dim(0);
    const int64_t n = fg_at_res.dim(1) * fg_at_res.dim(2);
    AdditiveMaskPair pair;
    pair.fg = Tensor({f * heads, 1, n});
    pair.bg = Tensor({f * heads, 1, n});
    for (int64_t fi = 0; fi < f; ++fi) {
        int64_t fg_count = 0;
        for (int64_t p = 0; p < n; ++p) {
            if (fg_at_res.at(fi * n + p) == 1.0f) ++fg_count;
        }
        const bool fg_dead = fg_count == 0;
        const bool bg_dead = fg_count == n;
        if (fg_dead || bg_dead) pair.fallback_fired = true;
        for (int h = 0; h < heads; ++h) {
            float* fg_row = pair.fg.data() + (fi * heads + h) * n;
            float* bg_row = pair.bg.data() + (fi * heads + h) * n;
            for (int64_t p = 0; p < n; ++p) {
                const bool is_fg = fg_at_res.at(fi * n + p) == 1.0f;
                fg_row[p] = (fg_dead || is_fg) ? 0.0f : kNegInf;
                bg_row[p] = (bg_dead || !is_fg) ? 0.0f : kNegInf;
            }
        }
    }
    return pair;
}

AdditiveMaskPair temporal_additive_masks(const Tensor& fg_at_res, int heads) {
    require_binary_stack(fg_at_res, "foreground mask");
    if (heads < 1) throw ShapeError("heads must be positive");
    const int64_t f = fg_at_res.dim(0);
    const int64_t n = fg_at_res.dim(1) * fg_at_res.dim(2);
    AdditiveMaskPair pair;
    pair.fg = Tensor({n * heads, 1, f});
    pair.bg = Tensor({n * heads, 1, f});
    for (int64_t p = 0; p < n; ++p) {
        int64_t fg_count = 0;
        for (int64_t fi = 0; fi < f; ++fi) {
            if (fg_at_res.at(fi * n + p) == 1.0f) ++fg_count;
        }
        const bool fg_dead = fg_count == 0;
        const bool bg_dead = fg_count == f;
        if (fg_dead || bg_dead) pair.fallback_fired = true;
        for (int h = 0; h < heads; ++h) {
            float* fg_row = pair.fg.data() + (p * heads + h) * f;
            float* bg_row = pair.bg.data() + (p * heads + h) * f;
            for (int64_t fi = 0; fi < f; ++fi) {
                const bool is_fg = fg_at_res.at(fi * n + p) == 1.0f;
                fg_row[fi] = (fg_dead || is_fg) ? 0.0f : kNegInf;
                bg_row[fi] = (bg_dead || !is_fg) ? 0.0f : kNegInf;
            }
        }
    }
    return pair;
}

Tensor spatial_blend(const Tensor& mm_at_res, int heads) {
    require_binary_stack(mm_at_res, "blend mask");
    const int64_t f = mm_at_res.dim(0);
    const int64_t n = mm_at_res.dim(1) * mm_at_res.dim(2);
    Tensor out({f * heads, n, 1});
    for (int64_t fi = 0; fi < f; ++fi) {
        for (int h = 0; h < heads; ++h) {
            for (int64_t p = 0; p < n; ++p) {
                out.at(fi * heads + h, p, 0) = mm_at_res.at(fi * n + p);
            }
        }
    }
    return out;
}

Tensor temporal_blend(const Tensor& mm_at_res, int heads) {
    require_binary_stack(mm_at_res, "blend mask");
    const int64_t f = mm_at_res.dim(0);
    const int64_t n = mm_at_res.dim(1) * mm_at_res.dim(2);
    Tensor out({n * heads, f, 1});
    for (int64_t p = 0; p < n; ++p) {
        for (int h = 0; h < heads; ++h) {
            for (int64_t fi = 0; fi < f; ++fi) {
                out.at(p * heads + h, fi, 0) = mm_at_res.at(fi * n + p);
            }
        }
    }
    return out;
}

CrossAttnSelection default_cross_attn_selection(int T, int num_levels) {
    CrossAttnSelection sel;
    sel.layers.insert(num_levels - 1);  // deepest down block
    for (int i = std::max(0, T - 10); i < T; ++i) sel.steps.insert(i);
    return sel;
}

MaskSet mask_from_cross_attention(const AttentionDump& dump, int token_index, float tau,
                                  const CrossAttnSelection& sel, int64_t out_h, int64_t out_w) {
    if (tau < 0.0f || tau >= 1.0f) throw ConfigError("threshold must be in [0, 1)");
    Tensor sum;
    int64_t used = 0;
    for (const auto& [key, rec] : dump.records) {
        if (key.kind != AttnKind::SpatialCross) continue;
        if (key.branch != sel.branch || key.pass != sel.pass) continue;
        if (!sel.layers.empty() && !sel.layers.count(key.layer)) continue;
        if (!sel.steps.empty() && !sel.steps.count(key.step)) continue;
        if (token_index < 0 || token_index >= rec.weights.dim(2)) {
            throw ConfigError("token index " + std::to_string(token_index) +
                              " out of range for " + std::to_string(rec.weights.dim(2)) +
                              " prompt tokens");
        }
        const int64_t f = rec.weights.dim(0);
        // slice one key column -> (F, h, w) map, then upsample (nearest) so
        // maps from different levels can be averaged
        Tensor map({f, rec.attn_h, rec.attn_w});
        for (int64_t fi = 0; fi < f; ++fi) {
            for (int64_t p = 0; p < rec.attn_h * rec.attn_w; ++p) {
                map.at(fi * rec.attn_h * rec.attn_w + p) = rec.weights.at(fi, p, token_index);
            }
        }
        if (rec.attn_h != out_h || rec.attn_w != out_w) {
            Tensor up({f, out_h, out_w});
            for (int64_t fi = 0; fi < f; ++fi) {
                for (int64_t y = 0; y < out_h; ++y) {
                    const int64_t sy = std::min(y * rec.attn_h / out_h, rec.attn_h - 1);
                    for (int64_t x = 0; x < out_w; ++x) {
                        const int64_t sx = std::min(x * rec.attn_w / out_w, rec.attn_w - 1);
                        up.at(fi, y, x) = map.at(fi, sy, sx);
                    }
                }
            }
            map = std::move(up);
        }
        if (used == 0) {
            sum = std::move(map);
        } else {
            require_same_shape(sum, map, "cross-attention maps");
            for (int64_t i = 0; i < sum.numel(); ++i) sum.at(i) += map.at(i);
        }
        ++used;
    }
    if (used == 0) throw ConfigError("no recorded CA-S sites match the mask selection");

    // per-frame min-max normalize, then threshold; constant frames map to 0
    const int64_t f = sum.dim(0), plane = out_h * out_w;
    Tensor fg({f, out_h, out_w});
    for (int64_t fi = 0; fi < f; ++fi) {
        float lo = sum.at(fi * plane), hi = lo;
        for (int64_t p = 1; p < plane; ++p) {
            lo = std::min(lo, sum.at(fi * plane + p));
            hi = std::max(hi, sum.at(fi * plane + p));
        }
        const float range = hi - lo;
        for (int64_t p = 0; p < plane; ++p) {
            const float norm = range > 0.0f ? (sum.at(fi * plane + p) - lo) / range : 0.0f;
            fg.at(fi * plane + p) = norm >= tau ? 1.0f : 0.0f;
        }
    }
    MaskSet set;
    set.edit_fg = fg;
    set.motion_fg = std::move(fg);
    set.provenance = MaskSet::Provenance::CrossAttention;
    set.validate();
    return set;
}

MaskSet mask_from_file(const std::string& dir, int64_t expected_frames,
                       const std::optional<std::string>& motion_dir) {
    MaskSet set;
    set.edit_fg = read_mask_frames(dir, expected_frames);
    set.motion_fg =
        motion_dir.has_value() ? read_mask_frames(*motion_dir, expected_frames) : set.edit_fg;
    set.provenance = MaskSet::Provenance::ExternalFile;
    set.validate();
    return set;
}

}  // namespace uniedit
