#include "uniedit/run_config.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace uniedit {

namespace {

using ordered_json = nlohmann::ordered_json;

void check_keys(const ordered_json& j, const std::set<std::string>& allowed,
                const std::string& where) {
    if (!j.is_object()) throw ConfigError("config section '" + where + "' must be an object");
    for (const auto& item : j.items()) {
        if (!allowed.count(item.key())) {
            throw ConfigError("unknown config key '" + where + "." + item.key() + "'");
        }
    }
}

template <typename T>
void read_into(const ordered_json& j, const char* key, T& slot, const std::string& where) {
    if (!j.contains(key)) return;
    try {
        slot = j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError("config key '" + where + "." + key + "' has the wrong type");
    }
}

AttnKind parse_kind(const std::string& s) {
    if (s == "SA-S") return AttnKind::SpatialSelf;
    if (s == "CA-S") return AttnKind::SpatialCross;
    if (s == "SA-T") return AttnKind::TemporalSelf;
    throw ConfigError("unknown attention kind '" + s + "' (expected SA-S, CA-S or SA-T)");
}

Branch parse_branch(const std::string& s) {
    if (s == "edit") return Branch::Edit;
    if (s == "reconstruction") return Branch::Reconstruction;
    if (s == "motion-ref") return Branch::MotionRef;
    throw ConfigError("unknown branch '" + s +
                      "' (expected edit, reconstruction or motion-ref)");
}

void parse_injection(const ordered_json& j, InjectionSchedule& schedule) {
    check_keys(j, {"content", "motion", "structure", "structure_to_motion_ref",
                   "motion_ref_structure"},
               "injection");
    if (j.contains("content")) {
        const auto& c = j.at("content");
        check_keys(c, {"t0", "l0", "enabled", "also_replace_k"}, "injection.content");
        read_into(c, "t0", schedule.content.t0, "injection.content");
        read_into(c, "l0", schedule.content.l0, "injection.content");
        read_into(c, "enabled", schedule.content.enabled, "injection.content");
        read_into(c, "also_replace_k", schedule.content.also_replace_k, "injection.content");
    }
    if (j.contains("motion")) {
        const auto& m = j.at("motion");
        check_keys(m, {"t1", "l1", "enabled"}, "injection.motion");
        read_into(m, "t1", schedule.motion.t1, "injection.motion");
        read_into(m, "l1", schedule.motion.l1, "injection.motion");
        read_into(m, "enabled", schedule.motion.enabled, "injection.motion");
    }
    if (j.contains("structure")) {
        const auto& s = j.at("structure");
        check_keys(s, {"t2", "l2", "enabled"}, "injection.structure");
        read_into(s, "t2", schedule.structure.t2, "injection.structure");
        read_into(s, "l2", schedule.structure.l2, "injection.structure");
        read_into(s, "enabled", schedule.structure.enabled, "injection.structure");
    }
    read_into(j, "structure_to_motion_ref", schedule.structure_to_motion_ref, "injection");
    if (j.contains("motion_ref_structure") && !j.at("motion_ref_structure").is_null()) {
        const auto& s = j.at("motion_ref_structure");
        check_keys(s, {"t2", "l2", "enabled"}, "injection.motion_ref_structure");
        StructureInjection override_s = schedule.structure;
        read_into(s, "t2", override_s.t2, "injection.motion_ref_structure");
        read_into(s, "l2", override_s.l2, "injection.motion_ref_structure");
        read_into(s, "enabled", override_s.enabled, "injection.motion_ref_structure");
        schedule.motion_ref_structure = override_s;
    }
}

void parse_dumps(const ordered_json& j, DumpRequest& dumps) {
    check_keys(j, {"enabled", "kinds", "layers", "steps", "branches"}, "dumps");
    read_into(j, "enabled", dumps.enabled, "dumps");
    if (j.contains("kinds")) {
        dumps.kinds.clear();
        for (const auto& k : j.at("kinds")) dumps.kinds.insert(parse_kind(k.get<std::string>()));
    }
    if (j.contains("layers")) {
        dumps.layers.clear();
        for (const auto& l : j.at("layers")) dumps.layers.insert(l.get<int>());
    }
    if (j.contains("steps")) {
        dumps.steps.clear();
        for (const auto& s : j.at("steps")) dumps.steps.insert(s.get<int>());
    }
    if (j.contains("branches")) {
        dumps.branches.clear();
        for (const auto& b : j.at("branches"))
            dumps.branches.insert(parse_branch(b.get<std::string>()));
    }
}

}  // namespace

EditMode RunConfig::edit_mode() const {
    if (mode == "appearance") return EditMode::AppearanceEdit;
    if (mode == "motion") return EditMode::MotionEdit;
    throw ConfigError("unknown mode '" + mode + "' (expected appearance or motion)");
}

BoundaryFill RunConfig::boundary_fill() const {
    if (camera.fill == "reflect") return BoundaryFill::Reflect;
    if (camera.fill == "edge") return BoundaryFill::Edge;
    throw ConfigError("unknown boundary fill '" + camera.fill + "' (expected reflect or edge)");
}

void RunConfig::validate() const {
    edit_mode();
    boundary_fill();
    if (steps < 1 || steps > 1000) {
        throw ConfigError("steps must be in [1, 1000], got " + std::to_string(steps));
    }
    if (!(guidance_scale >= 0.0f) || !std::isfinite(guidance_scale)) {
        throw ConfigError("guidance_scale must be finite and >= 0");
    }
    if (invert_refine_iters < 0) throw ConfigError("invert_refine_iters must be >= 0");
    model.validate();
    if (height < 1 || width < 1) throw ConfigError("resolution must be positive");
    const int64_t div = int64_t{1} << (model.num_levels - 1);
    if (height % div != 0 || width % div != 0) {
        throw ConfigError("resolution " + std::to_string(height) + "x" + std::to_string(width) +
                          " must be divisible by " + std::to_string(div) +
                          " for this model depth");
    }
    schedule.validate(steps, model.num_blocks());
    if (masks.source != "none" && masks.source != "files" && masks.source != "cross-attention") {
        throw ConfigError("unknown mask source '" + masks.source +
                          "' (expected none, files or cross-attention)");
    }
    if (masks.source == "files" && masks.dir.empty()) {
        throw ConfigError("mask source 'files' needs masks.dir");
    }
    if (masks.source == "cross-attention") {
        if (!(masks.tau >= 0.0f && masks.tau < 1.0f)) {
            throw ConfigError("masks.tau must lie in [0, 1)");
        }
        if (masks.token < 0) throw ConfigError("masks.token must be >= 0");
    }
    if (!std::isfinite(camera.dx_per_frame) || !std::isfinite(camera.dy_per_frame)) {
        throw ConfigError("camera offsets must be finite");
    }
    if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
}

RunConfig default_run_config(const std::string& mode) {
    RunConfig rc;
    rc.mode = mode;
    rc.schedule = default_schedule(rc.edit_mode());
    return rc;
}

RunConfig parse_run_config(const std::string& json_text) {
    ordered_json j;
    try {
        j = ordered_json::parse(json_text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    check_keys(j,
               {"mode", "prompts", "guidance_scale", "steps", "seed", "text_seed",
                "invert_refine_iters", "model", "injection", "masks", "dumps", "camera",
                "verify_injection_maps", "output_dir"},
               "config");

    std::string mode = "appearance";
    read_into(j, "mode", mode, "config");
    RunConfig rc = default_run_config(mode);  // throws for unknown modes

    if (j.contains("prompts")) {
        const auto& p = j.at("prompts");
        check_keys(p, {"source", "target", "uncond"}, "prompts");
        read_into(p, "source", rc.source_prompt, "prompts");
        read_into(p, "target", rc.target_prompt, "prompts");
        read_into(p, "uncond", rc.uncond_prompt, "prompts");
    }
    read_into(j, "guidance_scale", rc.guidance_scale, "config");
    read_into(j, "steps", rc.steps, "config");
    read_into(j, "seed", rc.seed, "config");
    read_into(j, "text_seed", rc.text_seed, "config");
    read_into(j, "invert_refine_iters", rc.invert_refine_iters, "config");

    if (j.contains("model")) {
        const auto& m = j.at("model");
        check_keys(m,
                   {"levels", "channels", "heads", "head_dim", "frames", "latent_channels",
                    "text_dim", "height", "width"},
                   "model");
        read_into(m, "levels", rc.model.num_levels, "model");
        read_into(m, "channels", rc.model.channels, "model");
        read_into(m, "heads", rc.model.heads, "model");
        read_into(m, "head_dim", rc.model.head_dim, "model");
        read_into(m, "frames", rc.model.frames, "model");
        read_into(m, "latent_channels", rc.model.latent_channels, "model");
        read_into(m, "text_dim", rc.model.text_dim, "model");
        read_into(m, "height", rc.height, "model");
        read_into(m, "width", rc.width, "model");
    }
    if (j.contains("injection")) parse_injection(j.at("injection"), rc.schedule);
    if (j.contains("masks")) {
        const auto& m = j.at("masks");
        check_keys(m, {"source", "dir", "motion_dir", "tau", "token"}, "masks");
        read_into(m, "source", rc.masks.source, "masks");
        read_into(m, "dir", rc.masks.dir, "masks");
        read_into(m, "motion_dir", rc.masks.motion_dir, "masks");
        read_into(m, "tau", rc.masks.tau, "masks");
        read_into(m, "token", rc.masks.token, "masks");
    }
    if (j.contains("dumps")) parse_dumps(j.at("dumps"), rc.dumps);
    if (j.contains("camera")) {
        const auto& c = j.at("camera");
        check_keys(c, {"dx_per_frame", "dy_per_frame", "fill"}, "camera");
        read_into(c, "dx_per_frame", rc.camera.dx_per_frame, "camera");
        read_into(c, "dy_per_frame", rc.camera.dy_per_frame, "camera");
        read_into(c, "fill", rc.camera.fill, "camera");
    }
    read_into(j, "verify_injection_maps", rc.verify_injection_maps, "config");
    read_into(j, "output_dir", rc.output_dir, "config");
    return rc;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open config file " + path);
    std::ostringstream text;
    text << in.rdbuf();
    return parse_run_config(text.str());
}

std::string run_config_json(const RunConfig& rc) {
    ordered_json j;
    j["mode"] = rc.mode;
    j["prompts"] = {{"source", rc.source_prompt},
                    {"target", rc.target_prompt},
                    {"uncond", rc.uncond_prompt}};
    j["guidance_scale"] = rc.guidance_scale;
    j["steps"] = rc.steps;
    j["seed"] = rc.seed;
    j["text_seed"] = rc.text_seed;
    j["invert_refine_iters"] = rc.invert_refine_iters;
    j["model"] = {{"levels", rc.model.num_levels},   {"channels", rc.model.channels},
                  {"heads", rc.model.heads},         {"head_dim", rc.model.head_dim},
                  {"frames", rc.model.frames},       {"latent_channels", rc.model.latent_channels},
                  {"text_dim", rc.model.text_dim},   {"height", rc.height},
                  {"width", rc.width}};
    ordered_json inj;
    inj["content"] = {{"t0", rc.schedule.content.t0},
                      {"l0", rc.schedule.content.l0},
                      {"enabled", rc.schedule.content.enabled},
                      {"also_replace_k", rc.schedule.content.also_replace_k}};
    inj["motion"] = {{"t1", rc.schedule.motion.t1},
                     {"l1", rc.schedule.motion.l1},
                     {"enabled", rc.schedule.motion.enabled}};
    inj["structure"] = {{"t2", rc.schedule.structure.t2},
                        {"l2", rc.schedule.structure.l2},
                        {"enabled", rc.schedule.structure.enabled}};
    inj["structure_to_motion_ref"] = rc.schedule.structure_to_motion_ref;
    if (rc.schedule.motion_ref_structure) {
        inj["motion_ref_structure"] = {{"t2", rc.schedule.motion_ref_structure->t2},
                                       {"l2", rc.schedule.motion_ref_structure->l2},
                                       {"enabled", rc.schedule.motion_ref_structure->enabled}};
    }
    j["injection"] = inj;
    j["masks"] = {{"source", rc.masks.source},
                  {"dir", rc.masks.dir},
                  {"motion_dir", rc.masks.motion_dir},
                  {"tau", rc.masks.tau},
                  {"token", rc.masks.token}};
    ordered_json dumps;
    dumps["enabled"] = rc.dumps.enabled;
    dumps["kinds"] = ordered_json::array();
    for (AttnKind k : rc.dumps.kinds) dumps["kinds"].push_back(kind_name(k));
    dumps["layers"] = rc.dumps.layers;
    dumps["steps"] = rc.dumps.steps;
    dumps["branches"] = ordered_json::array();
    for (Branch b : rc.dumps.branches) dumps["branches"].push_back(branch_name(b));
    j["dumps"] = dumps;
    j["camera"] = {{"dx_per_frame", rc.camera.dx_per_frame},
                   {"dy_per_frame", rc.camera.dy_per_frame},
                   {"fill", rc.camera.fill}};
    j["verify_injection_maps"] = rc.verify_injection_maps;
    j["output_dir"] = rc.output_dir;
    return j.dump(2) + "\n";
}

DenoiserConfig to_denoiser_config(const RunConfig& rc) {
    DenoiserConfig cfg = rc.model;
    cfg.seed = rc.seed;
    return cfg;
}

EditRequest to_edit_request(const RunConfig& rc) {
    EditRequest req;
    req.mode = rc.edit_mode();
    req.source_prompt = rc.source_prompt;
    req.target_prompt = rc.target_prompt;
    req.uncond_prompt = rc.uncond_prompt;
    req.schedule = rc.schedule;
    req.guidance_scale = rc.guidance_scale;
    req.dumps = rc.dumps;
    req.verify_injection_maps = rc.verify_injection_maps;
    req.invert_refine_iters = rc.invert_refine_iters;
    req.text_seed = rc.text_seed;
    return req;
}

namespace {

/// on_weights hook filling an attention dump, including query norms.
HookSet dump_recorder(AttentionDump& dump, DumpRequest want) {
    HookSet hooks;
    hooks.on_weights = [&dump, want](const HookContext& ctx, const Tensor& weights) {
        if (!want.wants(ctx.branch, ctx.step, ctx.layer, ctx.kind)) return;
        DumpRecord rec;
        rec.weights = average_heads(weights, ctx.heads);
        rec.query_magnitude = head_averaged_query_norms(*ctx.q, ctx.heads);
        rec.heads = ctx.heads;
        rec.attn_h = ctx.attn_h;
        rec.attn_w = ctx.attn_w;
        dump.records[{ctx.branch, ctx.step, ctx.layer, ctx.kind, ctx.pass}] = std::move(rec);
    };
    return hooks;
}

}  // namespace

AttentionDump record_reconstruction(const Denoiser& model, const NoiseSchedule& schedule,
                                    const RunConfig& rc, const Tensor& source_latent,
                                    const DumpRequest& want) {
    const int64_t d = rc.model.text_dim;
    const PromptEmbedding null_p = embed_text("", d, rc.text_seed);
    const PromptEmbedding source = embed_text(rc.source_prompt, d, rc.text_seed);
    const PromptEmbedding uncond = embed_text(rc.uncond_prompt, d, rc.text_seed);

    AttentionDump dump;
    const Tensor z_t = ddim_invert(model, source_latent, null_p, schedule, {1.0f, null_p}, {},
                                   Branch::Reconstruction, rc.invert_refine_iters)
                           .latent;
    ddim_sample(model, z_t, source, schedule, {rc.guidance_scale, uncond},
                dump_recorder(dump, want), Branch::Reconstruction);
    return dump;
}

void attach_masks(const RunConfig& rc, const Denoiser& model, const NoiseSchedule& schedule,
                  EditRequest& req) {
    if (rc.masks.source == "none") return;
    if (rc.masks.source == "files") {
        req.masks = mask_from_file(rc.masks.dir, rc.model.frames,
                                   rc.masks.motion_dir.empty()
                                       ? std::nullopt
                                       : std::optional<std::string>(rc.masks.motion_dir));
        return;
    }
    // cross-attention: harvest the reconstruction branch's text-attention
    // maps in a preliminary pass, then threshold them into masks
    const CrossAttnSelection sel = default_cross_attn_selection(rc.steps, rc.model.num_levels);
    DumpRequest want;
    want.enabled = true;
    want.kinds = {AttnKind::SpatialCross};
    want.layers = sel.layers;
    want.steps = sel.steps;
    want.branches = {sel.branch};
    const AttentionDump dump = record_reconstruction(model, schedule, rc, req.source_latent, want);
    req.masks = mask_from_cross_attention(dump, rc.masks.token, rc.masks.tau, sel, rc.height,
                                          rc.width);
}

}  // namespace uniedit
