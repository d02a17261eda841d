#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "test_support.hpp"
#include "uniedit/cli.hpp"
#include "uniedit/container.hpp"
#include "uniedit/image_io.hpp"
#include "uniedit/metrics.hpp"
#include "uniedit/run_config.hpp"

using namespace uniedit;
using test_support::TempDir;
using test_support::bytes_equal;
using test_support::max_abs_diff;
using test_support::random_tensor;
using nlohmann::json;

namespace {

struct CliResult {
    int code = -1;
    std::string out;
    std::string err;
};

CliResult cli(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    CliResult r;
    r.code = run_cli(args, out, err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

// small-but-complete model: two levels, four frames of 8x8 RGB latents
json tiny_config(const std::string& mode) {
    json j;
    j["mode"] = mode;
    j["prompts"] = {{"source", "a red square"}, {"target", "a blue square"}, {"uncond", ""}};
    j["guidance_scale"] = 1.0;
    j["steps"] = 4;
    j["seed"] = 3;
    j["model"] = {{"levels", 2},        {"channels", {4, 8}},     {"heads", 2}, {"head_dim", 2},
                  {"frames", 4},        {"latent_channels", 3},   {"text_dim", 8},
                  {"height", 8},        {"width", 8}};
    // thresholds sized for the short 4-step schedule (the library defaults
    // assume 50 steps and would fail validation here)
    j["injection"] = {{"content", {{"t0", 1}, {"l0", 1}}}, {"structure", {{"t2", 2}}}};
    return j;
}

std::string write_config(const TempDir& dir, const std::string& name, const json& j) {
    const std::string path = dir.sub(name);
    std::ofstream(path) << j.dump(2);
    return path;
}

std::string write_input_clip(const TempDir& dir, const std::string& name, uint32_t seed,
                             int64_t frames = 4, int64_t h = 8, int64_t w = 8) {
    const std::string path = dir.sub(name);
    std::filesystem::create_directories(path);
    write_video_frames(path, random_tensor({frames, 3, h, w}, seed));
    return path;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(bool(in));
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

json manifest_of(const std::string& out_dir) {
    return json::parse(slurp(out_dir + "/manifest.json"));
}

}  // namespace

TEST_CASE("cli: dump-config emits a parseable, idempotent configuration") {
    const CliResult first = cli({"dump-config"});
    REQUIRE(first.code == 0);
    const RunConfig rc = parse_run_config(first.out);
    CHECK(rc.mode == "appearance");
    CHECK(rc.steps == 50);
    CHECK(rc.model.frames == 8);
    CHECK(rc.height == 16);
    CHECK(rc.schedule.content.t0 == 4);
    CHECK_FALSE(rc.schedule.motion.enabled);
    CHECK(rc.schedule.structure.t2 == 25);

    // feeding the echo back reproduces it byte for byte
    TempDir dir("cli_dumpcfg");
    const std::string path = dir.sub("echo.json");
    std::ofstream(path) << first.out;
    const CliResult second = cli({"dump-config", "--config", path});
    REQUIRE(second.code == 0);
    CHECK(second.out == first.out);
}

TEST_CASE("cli: dump-config --mode motion flips the motion-mode defaults") {
    const CliResult r = cli({"dump-config", "--mode", "motion"});
    REQUIRE(r.code == 0);
    const RunConfig rc = parse_run_config(r.out);
    CHECK(rc.mode == "motion");
    CHECK(rc.schedule.motion.enabled);
    CHECK(rc.schedule.motion.t1 == 0);
    CHECK(rc.schedule.motion.l1 == 0);
    CHECK(rc.schedule.structure.t2 == 10);
}

TEST_CASE("cli: usage errors exit with 2 and report the problem") {
    SUBCASE("unknown flag") {
        const CliResult r = cli({"dump-config", "--bogus"});
        CHECK(r.code == 2);
        CHECK(r.err.find("--bogus") != std::string::npos);
    }
    SUBCASE("unknown subcommand") {
        const CliResult r = cli({"frobnicate"});
        CHECK(r.code == 2);
        CHECK_FALSE(r.err.empty());
    }
    SUBCASE("missing required option") {
        const CliResult r = cli({"edit"});
        CHECK(r.code == 2);
        CHECK(r.err.find("--config") != std::string::npos);
    }
    SUBCASE("no subcommand prints usage") {
        const CliResult r = cli({});
        CHECK(r.code == 2);
        CHECK(r.err.find("edit") != std::string::npos);
    }
    SUBCASE("--help succeeds") {
        const CliResult r = cli({"--help"});
        CHECK(r.code == 0);
        CHECK(r.out.find("edit") != std::string::npos);
        CHECK(r.out.find("metrics") != std::string::npos);
    }
    SUBCASE("bad mode value on dump-config") {
        const CliResult r = cli({"dump-config", "--mode", "sideways"});
        CHECK(r.code == 2);
    }
}

TEST_CASE("cli: config errors exit with 2, runtime errors with 3") {
    TempDir dir("cli_errs");
    SUBCASE("missing config file") {
        const CliResult r = cli({"edit", "--config", dir.sub("nope.json"), "--input", dir.str()});
        CHECK(r.code == 2);
        CHECK(r.err.find("config error:") != std::string::npos);
        CHECK(r.err.find("cannot open config file") != std::string::npos);
    }
    SUBCASE("unknown config key") {
        json j = tiny_config("appearance");
        j["typo_key"] = 1;
        const std::string cfg = write_config(dir, "bad.json", j);
        const CliResult r = cli({"edit", "--config", cfg, "--input", dir.str()});
        CHECK(r.code == 2);
        CHECK(r.err.find("unknown config key 'config.typo_key'") != std::string::npos);
    }
    SUBCASE("bad mode in config") {
        json j = tiny_config("appearance");
        j["mode"] = "sideways";
        const std::string cfg = write_config(dir, "mode.json", j);
        const CliResult r = cli({"edit", "--config", cfg, "--input", dir.str()});
        CHECK(r.code == 2);
        CHECK(r.err.find("unknown mode") != std::string::npos);
    }
    SUBCASE("config that is not JSON") {
        const std::string cfg = dir.sub("garbage.json");
        std::ofstream(cfg) << "not json {";
        const CliResult r = cli({"edit", "--config", cfg, "--input", dir.str()});
        CHECK(r.code == 2);
        CHECK(r.err.find("config is not valid JSON") != std::string::npos);
    }
    SUBCASE("missing input directory is a runtime error") {
        const std::string cfg = write_config(dir, "ok.json", tiny_config("appearance"));
        const CliResult r =
            cli({"edit", "--config", cfg, "--input", dir.sub("no_frames"), "--output",
                 dir.sub("out")});
        CHECK(r.code == 3);
        CHECK(r.err.find("error:") != std::string::npos);
    }
}

TEST_CASE("cli: edit writes frames, latents and a manifest") {
    TempDir dir("cli_edit");
    const std::string cfg = write_config(dir, "cfg.json", tiny_config("appearance"));
    const std::string input = write_input_clip(dir, "input", 11);
    const std::string out_dir = dir.sub("out");

    const CliResult r = cli({"edit", "--config", cfg, "--input", input, "--output", out_dir});
    CAPTURE(r.err);
    REQUIRE(r.code == 0);

    for (int f = 0; f < 4; ++f) {
        char name[32];
        std::snprintf(name, sizeof(name), "frame_%04d.png", f);
        CHECK(std::filesystem::exists(out_dir + "/edited/" + name));
        CHECK(std::filesystem::exists(out_dir + "/reconstruction/" + name));
    }

    const auto entries = read_tensor_container(out_dir + "/latents.bin");
    CHECK(find_entry(entries, "z_T").dim(0) == 4);
    CHECK(find_entry(entries, "edited").same_shape(find_entry(entries, "z_T")));
    CHECK_NOTHROW(find_entry(entries, "reconstruction"));

    const json m = manifest_of(out_dir);
    CHECK(m.at("command") == "edit");
    CHECK(m.at("config").at("mode") == "appearance");
    CHECK(m.at("seed") == 3);
    CHECK(m.at("stats").contains("content_fired"));
    CHECK(m.at("stats").at("content_fired").get<int>() > 0);
    CHECK(m.at("checksums").size() > 4);
    CHECK(m.at("wall_time_seconds").get<double>() >= 0.0);
}

TEST_CASE("cli: repeated runs with the same config and seed are byte-identical") {
    TempDir dir("cli_repeat");
    const std::string cfg = write_config(dir, "cfg.json", tiny_config("motion"));
    const std::string input = write_input_clip(dir, "input", 29);

    const CliResult a = cli({"edit", "--config", cfg, "--input", input, "--output", dir.sub("a")});
    const CliResult b = cli({"edit", "--config", cfg, "--input", input, "--output", dir.sub("b")});
    REQUIRE(a.code == 0);
    REQUIRE(b.code == 0);

    for (const char* sub : {"edited", "reconstruction", "motion_ref"}) {
        for (int f = 0; f < 4; ++f) {
            char name[64];
            std::snprintf(name, sizeof(name), "%s/frame_%04d.png", sub, f);
            CHECK(slurp(dir.sub("a/") + name) == slurp(dir.sub("b/") + name));
        }
    }
    const json ma = manifest_of(dir.sub("a"));
    const json mb = manifest_of(dir.sub("b"));
    CHECK(ma.at("checksums") == mb.at("checksums"));
    CHECK(ma.at("stats") == mb.at("stats"));
}

TEST_CASE("cli: identical prompts degenerate the edit into the reconstruction") {
    TempDir dir("cli_degenerate");
    json j = tiny_config("motion");
    j["prompts"]["target"] = j["prompts"]["source"];
    const std::string cfg = write_config(dir, "cfg.json", j);
    const std::string input = write_input_clip(dir, "input", 5);
    const std::string out_dir = dir.sub("out");

    const CliResult r = cli({"edit", "--config", cfg, "--input", input, "--output", out_dir});
    REQUIRE(r.code == 0);
    for (int f = 0; f < 4; ++f) {
        char name[32];
        std::snprintf(name, sizeof(name), "frame_%04d.png", f);
        CHECK(slurp(out_dir + "/edited/" + name) == slurp(out_dir + "/reconstruction/" + name));
    }
    const auto entries = read_tensor_container(out_dir + "/latents.bin");
    CHECK(bytes_equal(find_entry(entries, "edited"), find_entry(entries, "reconstruction")));
}

TEST_CASE("cli: invert then generate round-trips the input clip") {
    TempDir dir("cli_roundtrip");
    json j = tiny_config("appearance");
    j["prompts"] = {{"source", ""}, {"target", ""}, {"uncond", ""}};
    j["guidance_scale"] = 1.0;
    const std::string cfg = write_config(dir, "cfg.json", j);
    const std::string input = write_input_clip(dir, "input", 41);

    const CliResult inv =
        cli({"invert", "--config", cfg, "--input", input, "--output", dir.sub("inv")});
    CAPTURE(inv.err);
    REQUIRE(inv.code == 0);
    REQUIRE(std::filesystem::exists(dir.sub("inv/inverted.bin")));

    const CliResult gen = cli({"generate", "--config", cfg, "--latent",
                               dir.sub("inv/inverted.bin"), "--output", dir.sub("gen")});
    CAPTURE(gen.err);
    REQUIRE(gen.code == 0);

    // latent-space agreement
    const auto inv_entries = read_tensor_container(dir.sub("inv/inverted.bin"));
    const auto gen_entries = read_tensor_container(dir.sub("gen/generated.bin"));
    CHECK(max_abs_diff(find_entry(gen_entries, "z_0"), find_entry(inv_entries, "source")) < 1e-3f);

    // pixel-space agreement: regenerated bytes differ from the input frames
    // by at most one quantization level
    for (int f = 0; f < 4; ++f) {
        char name[32];
        std::snprintf(name, sizeof(name), "frame_%04d.png", f);
        const PngImage a = read_png(input + "/" + name);
        const PngImage b = read_png(dir.sub("gen/generated/") + name);
        REQUIRE(a.pixels.size() == b.pixels.size());
        int worst = 0;
        for (size_t i = 0; i < a.pixels.size(); ++i) {
            worst = std::max(worst, std::abs(int(a.pixels[i]) - int(b.pixels[i])));
        }
        CHECK(worst <= 1);
    }
}

TEST_CASE("cli: generate fails cleanly when the container has no z_T") {
    TempDir dir("cli_badlatent");
    const std::string cfg = write_config(dir, "cfg.json", tiny_config("appearance"));
    const std::string box = dir.sub("box.bin");
    write_tensor_container(box, {{"something_else", random_tensor({2, 2}, 1)}});
    const CliResult r =
        cli({"generate", "--config", cfg, "--latent", box, "--output", dir.sub("out")});
    CHECK(r.code == 3);
    CHECK(r.err.find("z_T") != std::string::npos);
}

TEST_CASE("cli: file-backed masks flow through the edit and into the stats") {
    TempDir dir("cli_maskfiles");
    json j = tiny_config("appearance");
    j["masks"] = {{"source", "files"}, {"dir", dir.sub("masks")}};
    const std::string cfg = write_config(dir, "cfg.json", j);
    const std::string input = write_input_clip(dir, "input", 17);

    Tensor masks({4, 8, 8});
    for (int64_t f = 0; f < 4; ++f) {
        for (int64_t y = 0; y < 8; ++y) {
            for (int64_t x = 0; x < 4; ++x) masks.at(f, y, x) = 1.0f;
        }
    }
    std::filesystem::create_directories(dir.sub("masks"));
    write_mask_frames(dir.sub("masks"), masks);

    const std::string out_dir = dir.sub("out");
    const CliResult r = cli({"edit", "--config", cfg, "--input", input, "--output", out_dir});
    CAPTURE(r.err);
    REQUIRE(r.code == 0);
    const json m = manifest_of(out_dir);
    CHECK(m.at("mask_provenance") == "files");
    CHECK(m.at("stats").at("masked_sites").get<int>() > 0);
}

TEST_CASE("cli: cross-attention mask source runs its preliminary pass") {
    TempDir dir("cli_maskxattn");
    json j = tiny_config("appearance");
    j["masks"] = {{"source", "cross-attention"}, {"tau", 0.0}, {"token", 0}};
    const std::string cfg = write_config(dir, "cfg.json", j);
    const std::string input = write_input_clip(dir, "input", 19);

    const std::string out_dir = dir.sub("out");
    const CliResult r = cli({"edit", "--config", cfg, "--input", input, "--output", out_dir});
    CAPTURE(r.err);
    REQUIRE(r.code == 0);
    const json m = manifest_of(out_dir);
    CHECK(m.at("mask_provenance") == "cross-attention");
    // tau = 0 keeps every location foreground, so masking fires everywhere
    CHECK(m.at("stats").at("masked_sites").get<int>() > 0);
}

TEST_CASE("cli: ti2v animates a still image") {
    TempDir dir("cli_ti2v");
    json j = tiny_config("motion");
    j["camera"] = {{"dx_per_frame", 1.0}, {"dy_per_frame", 0.0}, {"fill", "reflect"}};
    const std::string cfg = write_config(dir, "cfg.json", j);

    PngImage still;
    still.height = 8;
    still.width = 8;
    still.channels = 3;
    still.pixels.resize(8 * 8 * 3);
    for (size_t i = 0; i < still.pixels.size(); ++i) {
        still.pixels[i] = static_cast<uint8_t>((i * 37) % 251);
    }
    const std::string image = dir.sub("still.png");
    write_png(image, still);

    const std::string out_dir = dir.sub("out");
    const CliResult r = cli({"ti2v", "--config", cfg, "--image", image, "--output", out_dir});
    CAPTURE(r.err);
    REQUIRE(r.code == 0);
    for (int f = 0; f < 4; ++f) {
        char name[32];
        std::snprintf(name, sizeof(name), "frame_%04d.png", f);
        CHECK(std::filesystem::exists(out_dir + "/source/" + name));
        CHECK(std::filesystem::exists(out_dir + "/edited/" + name));
    }
    CHECK(manifest_of(out_dir).at("command") == "ti2v");

    SUBCASE("appearance-mode config is rejected") {
        const std::string bad = write_config(dir, "bad.json", tiny_config("appearance"));
        const CliResult rr = cli({"ti2v", "--config", bad, "--image", image, "--output", out_dir});
        CHECK(rr.code == 2);
        CHECK(rr.err.find("motion") != std::string::npos);
    }
    SUBCASE("needs an image or a vanilla clip") {
        const CliResult rr = cli({"ti2v", "--config", cfg, "--output", out_dir});
        CHECK(rr.code == 2);
        CHECK(rr.err.find("--image") != std::string::npos);
    }
}

TEST_CASE("cli: metrics scores a clip from disk") {
    TempDir dir("cli_metrics");
    // static clip: every frame the same
    const Tensor frame = random_tensor({1, 3, 8, 8}, 23);
    Tensor clip({4, 3, 8, 8});
    for (int64_t f = 0; f < 4; ++f) {
        for (int64_t i = 0; i < frame.numel(); ++i) {
            clip.at(f * frame.numel() + i) = frame.at(i);
        }
    }
    const std::string input = dir.sub("input");
    std::filesystem::create_directories(input);
    write_video_frames(input, clip);

    SUBCASE("frame consistency only") {
        const CliResult r = cli({"metrics", "--input", input, "--output", dir.sub("m1")});
        CAPTURE(r.err);
        REQUIRE(r.code == 0);
        const json rep = json::parse(r.out);
        CHECK(rep.at("provider") == "random-projection");
        CHECK(rep.at("frames") == 4);
        CHECK(rep.at("frame_consistency").get<double>() == doctest::Approx(100.0).epsilon(1e-9));
        CHECK_FALSE(rep.contains("textual_alignment"));
        CHECK(json::parse(slurp(dir.sub("m1/metrics.json"))) == rep);
    }
    SUBCASE("with a prompt") {
        const CliResult r = cli({"metrics", "--input", input, "--prompt", "a calm scene",
                                 "--output", dir.sub("m2")});
        REQUIRE(r.code == 0);
        const json rep = json::parse(r.out);
        CHECK(rep.contains("textual_alignment"));
        CHECK(rep.at("prompt") == "a calm scene");
    }
}

TEST_CASE("cli: analyze correlates attention with flow and writes heatmaps") {
    TempDir dir("cli_analyze");
    const std::string cfg = write_config(dir, "cfg.json", tiny_config("appearance"));

    // a moving bright square on a dark background
    Tensor clip({4, 3, 16, 16});
    for (float& v : clip.values()) v = -0.5f;
    for (int64_t f = 0; f < 4; ++f) {
        for (int64_t c = 0; c < 3; ++c) {
            for (int64_t y = 4; y < 10; ++y) {
                for (int64_t x = 2 + f; x < 8 + f; ++x) clip.at(f, c, y, x) = 0.8f;
            }
        }
    }
    const std::string input = dir.sub("input");
    std::filesystem::create_directories(input);
    write_video_frames(input, clip);

    const std::string out_dir = dir.sub("out");
    const CliResult r = cli({"analyze", "--config", cfg, "--input", input, "--output", out_dir});
    CAPTURE(r.err);
    REQUIRE(r.code == 0);

    const json rep = json::parse(r.out);
    REQUIRE(rep.at("layers").is_array());
    REQUIRE(rep.at("layers").size() > 0);
    for (const auto& row : rep.at("layers")) {
        CHECK(std::isfinite(row.at("temporal_correlation").get<double>()));
        const int layer = row.at("layer").get<int>();
        CHECK(std::filesystem::exists(out_dir + "/layer" + std::to_string(layer) +
                                      "_temporal.png"));
        CHECK(std::filesystem::exists(out_dir + "/layer" + std::to_string(layer) +
                                      "_spatial.png"));
    }
    CHECK(std::filesystem::exists(out_dir + "/flow_magnitude.png"));
    CHECK(json::parse(slurp(out_dir + "/analysis.json")) == rep);
}
