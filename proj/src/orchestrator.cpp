#include "uniedit/orchestrator.hpp"

#include <cmath>
#include <map>
#include <utility>

#include "uniedit/attention.hpp"

namespace uniedit {

std::string mode_name(EditMode m) {
    return m == EditMode::MotionEdit ? "motion" : "appearance";
}

void InjectionSchedule::validate(int num_steps, int num_layers) const {
    auto check = [](int value, int hi, const std::string& name) {
        if (value < 0 || value > hi) {
            throw ConfigError(name + " threshold " + std::to_string(value) + " outside [0, " +
                              std::to_string(hi) + "]");
        }
    };
    check(content.t0, num_steps, "content step");
    check(content.l0, num_layers, "content layer");
    check(motion.t1, num_steps, "motion step");
    check(motion.l1, num_layers, "motion layer");
    check(structure.t2, num_steps, "structure step");
    check(structure.l2, num_layers, "structure layer");
    if (motion_ref_structure) {
        check(motion_ref_structure->t2, num_steps, "motion-ref structure step");
        check(motion_ref_structure->l2, num_layers, "motion-ref structure layer");
    }
}

InjectionSchedule default_schedule(EditMode mode) {
    InjectionSchedule s;
    if (mode == EditMode::MotionEdit) {
        s.motion.enabled = true;
        s.structure.t2 = 10;
    }
    return s;
}

bool content_fires(const ContentInjection& c, int step, int layer) {
    return c.enabled && step > c.t0 && layer > c.l0;
}

bool motion_fires(const MotionInjection& m, int step, int layer) {
    return m.enabled && step >= m.t1 && layer >= m.l1;
}

bool structure_fires(const StructureInjection& s, int step, int layer) {
    return s.enabled && step < s.t2 && layer > s.l2;
}

std::optional<QkvReplacement> plan_spatial_injection(const HookContext& ctx,
                                                     const ContentInjection& content,
                                                     const StructureInjection& structure,
                                                     const StoredSite& recon_site) {
    if (ctx.kind != AttnKind::SpatialSelf) {
        throw HookContractError("spatial injection planned at non-SA-S site: " +
                                ctx.site_string());
    }
    const bool ct = content_fires(content, ctx.step, ctx.layer);
    const bool st = structure_fires(structure, ctx.step, ctx.layer);
    if (!ct && !st) return std::nullopt;
    QkvReplacement rep;
    if (st) {
        rep.q = recon_site.q;
        rep.k = recon_site.k;
    }
    if (ct) {
        rep.v = recon_site.v;
        if (content.also_replace_k) rep.k = recon_site.k;
    }
    return rep;
}

std::optional<QkvReplacement> plan_temporal_injection(const HookContext& ctx,
                                                      const MotionInjection& motion,
                                                      const StoredSite& motion_site,
                                                      const Tensor* motion_blend) {
    if (ctx.kind != AttnKind::TemporalSelf) {
        throw HookContractError("temporal injection planned at non-SA-T site: " +
                                ctx.site_string());
    }
    if (!motion_fires(motion, ctx.step, ctx.layer)) return std::nullopt;
    QkvReplacement rep;
    if (motion_blend) {
        const BlendMask blend{*motion_blend};
        rep.q = blend_features(motion_site.q, *ctx.q, blend);
        rep.k = blend_features(motion_site.k, *ctx.k, blend);
    } else {
        rep.q = motion_site.q;
        rep.k = motion_site.k;
    }
    return rep;
}

namespace {

struct SiteKey {
    AttnKind kind;
    int layer;
    GuidancePass pass;

    auto operator<=>(const SiteKey&) const = default;
};

// masks pre-resampled and expanded for one attention resolution
struct SiteMasks {
    AdditiveMaskPair spatial;
    Tensor spatial_blend_mask;
    AdditiveMaskPair temporal;
    Tensor temporal_blend_mask;
    Tensor motion_blend;  // temporal blend built from the motion mask
};

double max_map_deviation(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        m = std::max(m, std::abs(static_cast<double>(a.at(i)) - static_cast<double>(b.at(i))));
    }
    return m;
}

void require_finite(const Tensor& z, Branch branch, int iteration) {
    if (!z.all_finite()) {
        throw Error(branch_name(branch) + " branch produced non-finite latents at iteration " +
                    std::to_string(iteration));
    }
}

}  // namespace

EditResult run_edit(const Denoiser& model, const NoiseSchedule& schedule,
                    const EditRequest& req) {
    schedule.validate();
    const DenoiserConfig& cfg = model.config();
    require_latent_video(req.source_latent, cfg);

    InjectionSchedule sched = req.schedule;
    if (req.mode == EditMode::AppearanceEdit) {
        sched.motion.enabled = false;  // appearance editing drops the motion-reference branch
    } else if (!sched.motion.enabled) {
        throw ConfigError("motion editing requires the motion injection to be enabled");
    }
    sched.validate(schedule.T, cfg.num_blocks());

    if (req.masks) {
        req.masks->validate();
        if (req.masks->edit_fg.dim(0) != req.source_latent.dim(0)) {
            throw ConfigError("mask stack has " + std::to_string(req.masks->edit_fg.dim(0)) +
                              " frames, the video has " +
                              std::to_string(req.source_latent.dim(0)));
        }
    }

    const PromptEmbedding source = embed_text(req.source_prompt, cfg.text_dim, req.text_seed);
    const PromptEmbedding target = embed_text(req.target_prompt, cfg.text_dim, req.text_seed);
    const PromptEmbedding null_prompt = embed_text("", cfg.text_dim, req.text_seed);
    GuidanceConfig g;
    g.scale = req.guidance_scale;
    g.uncond = embed_text(req.uncond_prompt, cfg.text_dim, req.text_seed);

    const bool run_motion_branch = req.mode == EditMode::MotionEdit;
    const StructureInjection motref_structure =
        sched.motion_ref_structure.value_or(sched.structure);
    const bool motref_structure_on = sched.structure_to_motion_ref && motref_structure.enabled;

    EditResult result;

    // shared starting point: null-prompt inversion of the source
    const GuidanceConfig invert_g{1.0f, null_prompt};
    result.inverted = ddim_invert(model, req.source_latent, null_prompt, schedule, invert_g, {},
                                  Branch::Reconstruction, req.invert_refine_iters)
                          .latent;

    Tensor z_recon = result.inverted;
    Tensor z_motion = result.inverted;
    Tensor z_edit = result.inverted;

    RunStats& stats = result.stats;
    AttentionDump& dumps = result.dumps;

    auto dump_if_wanted = [&](const HookContext& ctx, const Tensor& weights) {
        if (!req.dumps.wants(ctx.branch, ctx.step, ctx.layer, ctx.kind)) return;
        DumpRecord rec;
        rec.weights = average_heads(weights, ctx.heads);
        rec.query_magnitude = head_averaged_query_norms(*ctx.q, ctx.heads);
        rec.heads = ctx.heads;
        rec.attn_h = ctx.attn_h;
        rec.attn_w = ctx.attn_w;
        dumps.records[{ctx.branch, ctx.step, ctx.layer, ctx.kind, ctx.pass}] = std::move(rec);
    };

    // per-resolution mask expansions, built once on first use
    std::map<std::pair<int64_t, int64_t>, SiteMasks> mask_cache;
    auto masks_at = [&](int64_t h, int64_t w) -> const SiteMasks& {
        const auto key = std::make_pair(h, w);
        auto it = mask_cache.find(key);
        if (it == mask_cache.end()) {
            const Tensor edit_fg = resample_mask(req.masks->edit_fg, h, w);
            const Tensor motion_fg = resample_mask(req.masks->motion_fg, h, w);
            SiteMasks sm;
            sm.spatial = spatial_additive_masks(edit_fg, cfg.heads);
            sm.spatial_blend_mask = spatial_blend(edit_fg, cfg.heads);
            sm.temporal = temporal_additive_masks(edit_fg, cfg.heads);
            sm.temporal_blend_mask = temporal_blend(edit_fg, cfg.heads);
            sm.motion_blend = temporal_blend(motion_fg, cfg.heads);
            if (sm.spatial.fallback_fired || sm.temporal.fallback_fired) {
                stats.mask_fallback_fired = true;
            }
            it = mask_cache.emplace(key, std::move(sm)).first;
        }
        return it->second;
    };

    for (int i = 0; i < schedule.T; ++i) {
        const int position = schedule.T - i;  // model conditioning position

        std::map<SiteKey, StoredSite> recon_sites;
        std::map<SiteKey, StoredSite> motion_sites;
        std::map<SiteKey, Tensor> recon_weights;
        std::map<SiteKey, Tensor> motion_weights;

        // --- reconstruction branch: observe only, publish SA-S features
        HookSet recon_hooks;
        recon_hooks.on_qkv = [&](const HookContext& ctx) -> std::optional<QkvReplacement> {
            if (ctx.kind == AttnKind::SpatialSelf) {
                recon_sites[{ctx.kind, ctx.layer, ctx.pass}] =
                    StoredSite{*ctx.q, *ctx.k, *ctx.v};
            }
            return std::nullopt;
        };
        recon_hooks.on_weights = [&](const HookContext& ctx, const Tensor& weights) {
            dump_if_wanted(ctx, weights);
            if (req.verify_injection_maps && ctx.kind == AttnKind::SpatialSelf) {
                recon_weights[{ctx.kind, ctx.layer, ctx.pass}] = weights;
            }
        };
        const Tensor eps_recon =
            guided_epsilon(model, z_recon, position, source, g, recon_hooks,
                           HookFrame{Branch::Reconstruction, i, GuidancePass::Cond});

        // --- motion-reference branch: receive structure, publish SA-T
        Tensor eps_motion;
        if (run_motion_branch) {
            HookSet motion_hooks;
            motion_hooks.on_qkv = [&](const HookContext& ctx) -> std::optional<QkvReplacement> {
                std::optional<QkvReplacement> rep;
                if (ctx.kind == AttnKind::SpatialSelf && motref_structure_on) {
                    const auto it = recon_sites.find({ctx.kind, ctx.layer, ctx.pass});
                    if (it == recon_sites.end()) {
                        throw HookContractError("reconstruction features missing for " +
                                                ctx.site_string());
                    }
                    ContentInjection no_content;
                    no_content.enabled = false;
                    rep = plan_spatial_injection(ctx, no_content, motref_structure, it->second);
                    if (rep) ++stats.structure_fired_motion_ref;
                } else if (ctx.kind == AttnKind::TemporalSelf) {
                    motion_sites[{ctx.kind, ctx.layer, ctx.pass}] =
                        StoredSite{*ctx.q, *ctx.k, Tensor{}};
                }
                return rep;
            };
            motion_hooks.on_weights = [&](const HookContext& ctx, const Tensor& weights) {
                dump_if_wanted(ctx, weights);
                if (req.verify_injection_maps && ctx.kind == AttnKind::TemporalSelf) {
                    motion_weights[{ctx.kind, ctx.layer, ctx.pass}] = weights;
                }
            };
            eps_motion = guided_epsilon(model, z_motion, position, target, g, motion_hooks,
                                        HookFrame{Branch::MotionRef, i, GuidancePass::Cond});
        }

        // --- edit path: consume both branches
        HookSet edit_hooks;
        edit_hooks.on_qkv = [&](const HookContext& ctx) -> std::optional<QkvReplacement> {
            if (ctx.kind == AttnKind::SpatialSelf) {
                const auto it = recon_sites.find({ctx.kind, ctx.layer, ctx.pass});
                if (it == recon_sites.end()) {
                    throw HookContractError("reconstruction features missing for " +
                                            ctx.site_string());
                }
                auto rep = plan_spatial_injection(ctx, sched.content, sched.structure,
                                                  it->second);
                if (rep) {
                    if (rep->q) ++stats.structure_fired_edit;
                    if (rep->v) ++stats.content_fired;
                }
                return rep;
            }
            if (ctx.kind == AttnKind::TemporalSelf && run_motion_branch) {
                const auto it = motion_sites.find({ctx.kind, ctx.layer, ctx.pass});
                if (it == motion_sites.end()) {
                    throw HookContractError("motion-reference features missing for " +
                                            ctx.site_string());
                }
                const Tensor* blend =
                    req.masks ? &masks_at(ctx.attn_h, ctx.attn_w).motion_blend : nullptr;
                auto rep = plan_temporal_injection(ctx, sched.motion, it->second, blend);
                if (rep) ++stats.motion_fired;
                return rep;
            }
            return std::nullopt;
        };
        edit_hooks.on_attention_plan =
            [&](const HookContext& ctx) -> std::optional<MaskedAttnPlan> {
            if (!req.masks || ctx.kind == AttnKind::SpatialCross) return std::nullopt;
            const SiteMasks& sm = masks_at(ctx.attn_h, ctx.attn_w);
            ++stats.masked_sites;
            if (ctx.kind == AttnKind::SpatialSelf) {
                return MaskedAttnPlan{sm.spatial.fg, sm.spatial.bg, sm.spatial_blend_mask};
            }
            return MaskedAttnPlan{sm.temporal.fg, sm.temporal.bg, sm.temporal_blend_mask};
        };
        edit_hooks.on_weights = [&](const HookContext& ctx, const Tensor& weights) {
            dump_if_wanted(ctx, weights);
            if (!req.verify_injection_maps) return;
            if (ctx.kind == AttnKind::SpatialSelf) {
                const auto it = recon_weights.find({ctx.kind, ctx.layer, ctx.pass});
                if (it == recon_weights.end()) return;
                const double dev = max_map_deviation(weights, it->second);
                ++stats.spatial_sites_compared;
                if (dev < 1e-6) ++stats.spatial_sites_matched;
                if (structure_fires(sched.structure, ctx.step, ctx.layer)) {
                    stats.max_fired_map_deviation =
                        std::max(stats.max_fired_map_deviation, dev);
                }
            } else if (ctx.kind == AttnKind::TemporalSelf && run_motion_branch) {
                const auto it = motion_weights.find({ctx.kind, ctx.layer, ctx.pass});
                if (it == motion_weights.end()) return;
                const double dev = max_map_deviation(weights, it->second);
                ++stats.temporal_sites_compared;
                if (dev < 1e-6) ++stats.temporal_sites_matched;
                if (motion_fires(sched.motion, ctx.step, ctx.layer)) {
                    stats.max_fired_map_deviation =
                        std::max(stats.max_fired_map_deviation, dev);
                }
            }
        };
        const Tensor eps_edit = guided_epsilon(model, z_edit, position, target, g, edit_hooks,
                                               HookFrame{Branch::Edit, i, GuidancePass::Cond});

        z_recon = ddim_step(z_recon, eps_recon, schedule, position, position - 1);
        require_finite(z_recon, Branch::Reconstruction, i);
        if (run_motion_branch) {
            z_motion = ddim_step(z_motion, eps_motion, schedule, position, position - 1);
            require_finite(z_motion, Branch::MotionRef, i);
        }
        z_edit = ddim_step(z_edit, eps_edit, schedule, position, position - 1);
        require_finite(z_edit, Branch::Edit, i);
    }

    result.edited = std::move(z_edit);
    result.reconstruction = std::move(z_recon);
    if (run_motion_branch) result.motion_ref = std::move(z_motion);
    return result;
}

}  // namespace uniedit
