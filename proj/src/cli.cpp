#include "uniedit/cli.hpp"

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <memory>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "uniedit/container.hpp"
#include "uniedit/image_io.hpp"
#include "uniedit/metrics.hpp"
#include "uniedit/run_config.hpp"

namespace uniedit {

namespace {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

std::string hex64(uint64_t v) {
    std::ostringstream out;
    out << std::hex << std::setw(16) << std::setfill('0') << v;
    return out.str();
}

std::string frame_name(int64_t i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "frame_%04d.png", static_cast<int>(i));
    return buf;
}

uint64_t file_checksum(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read back " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    const std::string bytes = buf.str();
    return checksum_bytes(bytes.data(), bytes.size());
}

void write_text_atomic(const std::string& path, const std::string& text) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp);
        out << text;
        if (!out) throw IoError("failed writing " + tmp);
    }
    fs::rename(tmp, path);
}

/// Collects outputs of one run; checksums cover the written files' bytes, so
/// two identical runs must agree on them byte for byte.
struct Manifest {
    std::string command;
    RunConfig config;
    ordered_json extra = ordered_json::object();
    ordered_json checksums = ordered_json::object();

    void record_file(const std::string& root, const std::string& rel) {
        checksums[rel] = hex64(file_checksum(root + "/" + rel));
    }

    void write(const std::string& dir, double wall_seconds) const {
        ordered_json j;
        j["command"] = command;
        j["config"] = ordered_json::parse(run_config_json(config));
        j["seed"] = config.seed;
        j["text_seed"] = config.text_seed;
        j["normalization"] =
            "frame byte b maps to float b/255*2-1; writes use round((v+1)/2*255), clipped";
        for (const auto& item : extra.items()) j[item.key()] = item.value();
        j["checksums"] = checksums;
        j["wall_time_seconds"] = wall_seconds;
        write_text_atomic(dir + "/manifest.json", j.dump(2) + "\n");
    }
};

void write_frames(Manifest& m, const std::string& root, const std::string& sub,
                  const Tensor& pixels) {
    fs::create_directories(root + "/" + sub);
    write_video_frames(root + "/" + sub, pixels);
    for (int64_t f = 0; f < pixels.dim(0); ++f) m.record_file(root, sub + "/" + frame_name(f));
}

void write_container(Manifest& m, const std::string& root, const std::string& rel,
                     const std::vector<NamedTensor>& entries) {
    write_tensor_container(root + "/" + rel, entries);
    m.record_file(root, rel);
}

void write_dumps(Manifest& m, const std::string& root, const std::string& rel,
                 const AttentionDump& dump) {
    std::vector<NamedTensor> entries;
    for (const auto& [key, rec] : dump.records) {
        const std::string base = key.to_string();
        entries.push_back({base + "/weights", rec.weights});
        if (!rec.query_magnitude.empty()) {
            entries.push_back({base + "/query_magnitude", rec.query_magnitude});
        }
        entries.push_back(
            {base + "/meta",
             Tensor::from_data({3}, {static_cast<float>(rec.heads), static_cast<float>(rec.attn_h),
                                     static_cast<float>(rec.attn_w)})});
    }
    write_container(m, root, rel, entries);
}

ordered_json stats_json(const RunStats& s) {
    ordered_json j;
    j["content_fired"] = s.content_fired;
    j["structure_fired_edit"] = s.structure_fired_edit;
    j["structure_fired_motion_ref"] = s.structure_fired_motion_ref;
    j["motion_fired"] = s.motion_fired;
    j["masked_sites"] = s.masked_sites;
    j["mask_fallback_fired"] = s.mask_fallback_fired;
    if (s.spatial_sites_compared || s.temporal_sites_compared) {
        j["spatial_sites_compared"] = s.spatial_sites_compared;
        j["spatial_sites_matched"] = s.spatial_sites_matched;
        j["temporal_sites_compared"] = s.temporal_sites_compared;
        j["temporal_sites_matched"] = s.temporal_sites_matched;
        j["max_fired_map_deviation"] = s.max_fired_map_deviation;
    }
    return j;
}

Tensor png_to_float3(const PngImage& img) {
    Tensor out({3, img.height, img.width});
    for (int64_t c = 0; c < 3; ++c) {
        const int64_t src_c = img.channels == 1 ? 0 : c;
        for (int64_t y = 0; y < img.height; ++y) {
            for (int64_t x = 0; x < img.width; ++x) {
                out.at(c, y, x) = static_cast<float>(img.at(y, x, src_c)) / 255.0f * 2.0f - 1.0f;
            }
        }
    }
    return out;
}

/// Grayscale PNG of a 2-D map, min-max normalized (constant maps render
/// black).
void write_heatmap(Manifest& m, const std::string& root, const std::string& rel,
                   const Tensor& map) {
    require_rank(map, 2, "heatmap");
    float lo = map.at(0), hi = map.at(0);
    for (float v : map.values()) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    PngImage img;
    img.height = map.dim(0);
    img.width = map.dim(1);
    img.channels = 1;
    img.pixels.resize(static_cast<size_t>(map.numel()));
    const float range = hi - lo;
    for (int64_t i = 0; i < map.numel(); ++i) {
        const float norm = range > 0.0f ? (map.at(i) - lo) / range : 0.0f;
        img.pixels[static_cast<size_t>(i)] = static_cast<uint8_t>(std::lround(norm * 255.0f));
    }
    write_png(root + "/" + rel, img);
    m.record_file(root, rel);
}

double seconds_since(const std::chrono::steady_clock::time_point& start) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

RunConfig load_effective_config(const std::string& config_path, const std::string& output_override,
                                const std::string& mode = "appearance") {
    RunConfig rc = config_path.empty() ? default_run_config(mode) : load_run_config(config_path);
    if (!output_override.empty()) rc.output_dir = output_override;
    rc.validate();
    return rc;
}

int cmd_edit(const std::string& config_path, const std::string& input_dir,
             const std::string& output_override, std::ostream& out) {
    const auto start = std::chrono::steady_clock::now();
    const RunConfig rc = load_effective_config(config_path, output_override);
    const Denoiser model = build_denoiser(to_denoiser_config(rc));
    const NoiseSchedule schedule = make_schedule(rc.steps);

    const Tensor video = read_video_frames(input_dir, rc.height, rc.width, rc.model.frames);
    EditRequest req = to_edit_request(rc);
    req.source_latent = pixels_to_latent(video, rc.model.latent_channels);
    attach_masks(rc, model, schedule, req);

    const EditResult res = run_edit(model, schedule, req);

    fs::create_directories(rc.output_dir);
    Manifest m{"edit", rc};
    write_frames(m, rc.output_dir, "edited", latent_to_pixels(res.edited));
    write_frames(m, rc.output_dir, "reconstruction", latent_to_pixels(res.reconstruction));
    if (res.motion_ref) {
        write_frames(m, rc.output_dir, "motion_ref", latent_to_pixels(*res.motion_ref));
    }
    std::vector<NamedTensor> latents{{"z_T", res.inverted},
                                     {"edited", res.edited},
                                     {"reconstruction", res.reconstruction}};
    if (res.motion_ref) latents.push_back({"motion_ref", *res.motion_ref});
    write_container(m, rc.output_dir, "latents.bin", latents);
    if (!res.dumps.empty()) write_dumps(m, rc.output_dir, "attention.bin", res.dumps);

    m.extra["stats"] = stats_json(res.stats);
    if (req.masks) {
        m.extra["mask_provenance"] = req.masks->provenance == MaskSet::Provenance::CrossAttention
                                         ? "cross-attention"
                                         : "files";
    }
    m.write(rc.output_dir, seconds_since(start));
    out << "edited " << video.dim(0) << " frames -> " << rc.output_dir << "\n";
    return 0;
}

int cmd_invert(const std::string& config_path, const std::string& input_dir,
               const std::string& output_override, std::ostream& out) {
    const auto start = std::chrono::steady_clock::now();
    const RunConfig rc = load_effective_config(config_path, output_override);
    const Denoiser model = build_denoiser(to_denoiser_config(rc));
    const NoiseSchedule schedule = make_schedule(rc.steps);

    const Tensor video = read_video_frames(input_dir, rc.height, rc.width, rc.model.frames);
    const Tensor latent = pixels_to_latent(video, rc.model.latent_channels);
    const PromptEmbedding null_p = embed_text("", rc.model.text_dim, rc.text_seed);
    const DiffusionResult inv = ddim_invert(model, latent, null_p, schedule, {1.0f, null_p}, {},
                                            Branch::Reconstruction, rc.invert_refine_iters);

    fs::create_directories(rc.output_dir);
    Manifest m{"invert", rc};
    write_container(m, rc.output_dir, "inverted.bin",
                    {{"z_T", inv.latent}, {"source", latent}});
    m.write(rc.output_dir, seconds_since(start));
    out << "inverted " << video.dim(0) << " frames -> " << rc.output_dir << "/inverted.bin\n";
    return 0;
}

int cmd_generate(const std::string& config_path, const std::string& latent_path,
                 const std::string& output_override, std::ostream& out) {
    const auto start = std::chrono::steady_clock::now();
    const RunConfig rc = load_effective_config(config_path, output_override);
    const Denoiser model = build_denoiser(to_denoiser_config(rc));
    const NoiseSchedule schedule = make_schedule(rc.steps);

    const auto entries = read_tensor_container(latent_path);
    const Tensor& z_t = find_entry(entries, "z_T");
    const PromptEmbedding target = embed_text(rc.target_prompt, rc.model.text_dim, rc.text_seed);
    const PromptEmbedding uncond = embed_text(rc.uncond_prompt, rc.model.text_dim, rc.text_seed);
    const DiffusionResult gen = ddim_sample(model, z_t, target, schedule,
                                            {rc.guidance_scale, uncond}, {}, Branch::Edit);

    fs::create_directories(rc.output_dir);
    Manifest m{"generate", rc};
    write_frames(m, rc.output_dir, "generated", latent_to_pixels(gen.latent));
    write_container(m, rc.output_dir, "generated.bin", {{"z_0", gen.latent}});
    m.write(rc.output_dir, seconds_since(start));
    out << "generated " << gen.latent.dim(0) << " frames -> " << rc.output_dir << "\n";
    return 0;
}

int cmd_ti2v(const std::string& config_path, const std::string& image_path,
             const std::string& vanilla_dir, const std::string& output_override,
             std::ostream& out) {
    const auto start = std::chrono::steady_clock::now();
    const RunConfig rc = load_effective_config(config_path, output_override);
    if (!rc.schedule.motion.enabled) {
        throw ConfigError(
            "ti2v runs in motion mode; enable injection.motion (start from dump-config --mode "
            "motion)");
    }
    const Denoiser model = build_denoiser(to_denoiser_config(rc));
    const NoiseSchedule schedule = make_schedule(rc.steps);

    Ti2vRequest treq;
    if (!vanilla_dir.empty()) {
        treq.vanilla_video = read_video_frames(vanilla_dir, rc.height, rc.width, rc.model.frames);
    } else if (image_path.empty()) {
        throw ConfigError("ti2v needs --image (a still PNG) or --vanilla (a frame directory)");
    } else {
        treq.image = resize_bilinear(png_to_float3(read_png(image_path)), rc.height, rc.width);
    }
    treq.path = pan_path(rc.model.frames, rc.camera.dx_per_frame, rc.camera.dy_per_frame);
    treq.fill = rc.boundary_fill();
    treq.edit = to_edit_request(rc);

    const Ti2vResult res = ti2v_generate(model, schedule, treq);

    fs::create_directories(rc.output_dir);
    Manifest m{"ti2v", rc};
    write_frames(m, rc.output_dir, "source", res.source_video);
    write_frames(m, rc.output_dir, "edited", latent_to_pixels(res.result.edited));
    m.extra["stats"] = stats_json(res.result.stats);
    m.write(rc.output_dir, seconds_since(start));
    out << "animated " << res.source_video.dim(0) << " frames -> " << rc.output_dir << "\n";
    return 0;
}

int cmd_analyze(const std::string& config_path, const std::string& input_dir,
                const std::string& output_override, std::ostream& out) {
    const auto start = std::chrono::steady_clock::now();
    const RunConfig rc = load_effective_config(config_path, output_override);
    const Denoiser model = build_denoiser(to_denoiser_config(rc));
    const NoiseSchedule schedule = make_schedule(rc.steps);

    const Tensor video = read_video_frames(input_dir, rc.height, rc.width, rc.model.frames);
    const Tensor latent = pixels_to_latent(video, rc.model.latent_channels);

    DumpRequest want = rc.dumps;
    if (!want.enabled) {
        // default: both self-attention kinds over the last ten iterations of
        // the reconstruction branch
        want.enabled = true;
        want.kinds = {AttnKind::SpatialSelf, AttnKind::TemporalSelf};
        want.branches = {Branch::Reconstruction};
        for (int s = std::max(0, rc.steps - 10); s < rc.steps; ++s) want.steps.insert(s);
    }
    const AttentionDump dump = record_reconstruction(model, schedule, rc, latent, want);

    const FlowField flow = optical_flow(video);
    const OverlapReport report = flow_attention_overlap(flow, dump);

    fs::create_directories(rc.output_dir);
    Manifest m{"analyze", rc};
    write_heatmap(m, rc.output_dir, "flow_magnitude.png", flow.mean_magnitude());

    // per-layer maps averaged over the recorded sites, like the report
    std::map<int, std::pair<Tensor, int>> dev_maps, query_maps;
    for (const auto& [key, rec] : dump.records) {
        auto add = [&](std::map<int, std::pair<Tensor, int>>& maps, Tensor value) {
            auto it = maps.find(key.layer);
            if (it == maps.end()) {
                maps.emplace(key.layer, std::make_pair(std::move(value), 1));
            } else {
                for (int64_t i = 0; i < value.numel(); ++i) it->second.first.at(i) += value.at(i);
                it->second.second += 1;
            }
        };
        if (key.kind == AttnKind::TemporalSelf) add(dev_maps, temporal_deviation_map(rec));
        if (key.kind == AttnKind::SpatialSelf) add(query_maps, spatial_query_map(rec));
    }
    for (const OverlapLayerReport& row : report.layers) {
        auto scale = [](std::pair<Tensor, int>& acc) {
            for (float& v : acc.first.values()) v /= static_cast<float>(acc.second);
            return acc.first;
        };
        write_heatmap(m, rc.output_dir, "layer" + std::to_string(row.layer) + "_temporal.png",
                      scale(dev_maps.at(row.layer)));
        write_heatmap(m, rc.output_dir, "layer" + std::to_string(row.layer) + "_spatial.png",
                      scale(query_maps.at(row.layer)));
    }

    ordered_json rep;
    rep["flow_degenerate"] = flow.degenerate;
    rep["layers"] = ordered_json::array();
    for (const OverlapLayerReport& row : report.layers) {
        rep["layers"].push_back({{"layer", row.layer},
                                 {"temporal_correlation", row.temporal_correlation},
                                 {"spatial_correlation", row.spatial_correlation},
                                 {"temporal_constant", row.temporal_constant},
                                 {"spatial_constant", row.spatial_constant}});
    }
    write_text_atomic(rc.output_dir + "/analysis.json", rep.dump(2) + "\n");
    m.record_file(rc.output_dir, "analysis.json");
    m.write(rc.output_dir, seconds_since(start));
    out << rep.dump(2) << "\n";
    return 0;
}

int cmd_metrics(const std::string& config_path, const std::string& input_dir,
                const std::string& output_override, const std::string& embeddings_path,
                bool have_prompt, const std::string& prompt, std::ostream& out) {
    const auto start = std::chrono::steady_clock::now();
    const RunConfig rc = load_effective_config(config_path, output_override);

    // with an explicit config the clip is normalized to its working shape;
    // otherwise frames are scored as they are on disk
    const bool shape_from_config = !config_path.empty();
    const Tensor video = read_video_frames(input_dir, shape_from_config ? rc.height : 0,
                                           shape_from_config ? rc.width : 0,
                                           shape_from_config ? rc.model.frames : 0);

    std::unique_ptr<EmbeddingProvider> provider;
    if (embeddings_path.empty()) {
        provider = std::make_unique<RandomProjectionEmbedder>();
    } else {
        provider = std::make_unique<FileEmbeddingProvider>(embeddings_path);
    }

    ordered_json rep;
    rep["provider"] = provider->name();
    rep["frames"] = video.dim(0);
    rep["frame_consistency"] = frame_consistency(video, *provider);
    if (have_prompt) {
        rep["textual_alignment"] = textual_alignment(video, prompt, *provider);
        rep["prompt"] = prompt;
    }

    fs::create_directories(rc.output_dir);
    Manifest m{"metrics", rc};
    write_text_atomic(rc.output_dir + "/metrics.json", rep.dump(2) + "\n");
    m.record_file(rc.output_dir, "metrics.json");
    m.write(rc.output_dir, seconds_since(start));
    out << rep.dump(2) << "\n";
    return 0;
}

int cmd_dump_config(const std::string& config_path, const std::string& mode, std::ostream& out) {
    RunConfig rc = config_path.empty() ? default_run_config(mode) : load_run_config(config_path);
    rc.validate();
    out << run_config_json(rc);
    return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"three-branch video motion/appearance editing engine"};
    app.name("uniedit");

    std::string config_path, input_dir, output_override, image_path, vanilla_dir, latent_path,
        embeddings_path, prompt, mode = "appearance";

    CLI::App* edit = app.add_subcommand("edit", "edit a clip (three-branch pipeline)");
    edit->add_option("--config", config_path, "run configuration JSON")->required();
    edit->add_option("--input", input_dir, "directory of frame_%04d.png sources")->required();
    edit->add_option("--output", output_override, "overrides the config's output_dir");

    CLI::App* invert = app.add_subcommand("invert", "invert a clip to its starting noise");
    invert->add_option("--config", config_path, "run configuration JSON")->required();
    invert->add_option("--input", input_dir, "directory of frame_%04d.png sources")->required();
    invert->add_option("--output", output_override, "overrides the config's output_dir");

    CLI::App* generate = app.add_subcommand("generate", "sample from stored starting noise");
    generate->add_option("--config", config_path, "run configuration JSON")->required();
    generate->add_option("--latent", latent_path, "tensor container with a z_T entry")->required();
    generate->add_option("--output", output_override, "overrides the config's output_dir");

    CLI::App* ti2v = app.add_subcommand("ti2v", "animate a still image from text");
    ti2v->add_option("--config", config_path, "run configuration JSON")->required();
    ti2v->add_option("--image", image_path, "still PNG to animate");
    ti2v->add_option("--vanilla", vanilla_dir, "use this clip instead of the simulated camera");
    ti2v->add_option("--output", output_override, "overrides the config's output_dir");

    CLI::App* analyze = app.add_subcommand("analyze", "correlate attention maps with optical flow");
    analyze->add_option("--config", config_path, "run configuration JSON")->required();
    analyze->add_option("--input", input_dir, "directory of frame_%04d.png sources")->required();
    analyze->add_option("--output", output_override, "overrides the config's output_dir");

    CLI::App* metrics = app.add_subcommand("metrics", "frame-consistency / textual-alignment scores");
    metrics->add_option("--input", input_dir, "directory of frame_%04d.png sources")->required();
    metrics->add_option("--config", config_path, "optional run configuration JSON");
    metrics->add_option("--prompt", prompt, "prompt for the textual-alignment score");
    metrics->add_option("--embeddings", embeddings_path,
                        "tensor container of precomputed embeddings");
    metrics->add_option("--output", output_override, "report directory (default out)");

    CLI::App* dump_config = app.add_subcommand("dump-config", "print a full configuration");
    dump_config->add_option("--config", config_path, "echo this file instead of the defaults");
    dump_config->add_option("--mode", mode, "appearance or motion")
        ->check(CLI::IsMember({"appearance", "motion"}));

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        app.exit(e, out, err);
        return 2;
    }

    try {
        if (app.got_subcommand(edit)) return cmd_edit(config_path, input_dir, output_override, out);
        if (app.got_subcommand(invert)) {
            return cmd_invert(config_path, input_dir, output_override, out);
        }
        if (app.got_subcommand(generate)) {
            return cmd_generate(config_path, latent_path, output_override, out);
        }
        if (app.got_subcommand(ti2v)) {
            return cmd_ti2v(config_path, image_path, vanilla_dir, output_override, out);
        }
        if (app.got_subcommand(analyze)) {
            return cmd_analyze(config_path, input_dir, output_override, out);
        }
        if (app.got_subcommand(metrics)) {
            return cmd_metrics(config_path, input_dir, output_override, embeddings_path,
                               metrics->count("--prompt") > 0, prompt, out);
        }
        if (app.got_subcommand(dump_config)) return cmd_dump_config(config_path, mode, out);
        err << app.help();
        return 2;
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 3;
    }
}

}  // namespace uniedit
