#include "doctest.h"

#include <map>
#include <set>
#include <vector>

#include "test_support.hpp"
#include "uniedit/denoiser.hpp"

using namespace uniedit;
using test_support::bytes_equal;
using test_support::random_tensor;

namespace {

DenoiserConfig toy_config() { return DenoiserConfig{}; }

Tensor toy_latent(uint32_t seed = 5) { return random_tensor({8, 4, 16, 16}, seed); }

}  // namespace

TEST_CASE("two levels give five blocks with per-kind layers 0..4") {
    Denoiser model = build_denoiser(toy_config());
    PromptEmbedding text = embed_text("a cat", 16, 1);

    // record (kind, layer, rows, resolution) at every site via the observer
    std::map<AttnKind, std::vector<int>> layers;
    std::map<AttnKind, std::vector<int64_t>> rows;
    std::vector<int64_t> sa_s_res;
    HookSet hooks;
    hooks.on_weights = [&](const HookContext& ctx, const Tensor& w) {
        layers[ctx.kind].push_back(ctx.layer);
        rows[ctx.kind].push_back(w.dim(1));
        if (ctx.kind == AttnKind::SpatialSelf) sa_s_res.push_back(ctx.attn_h);
    };
    model.predict_noise(toy_latent(), 3, text, hooks);

    const std::vector<int> want{0, 1, 2, 3, 4};
    CHECK(layers[AttnKind::SpatialSelf] == want);
    CHECK(layers[AttnKind::SpatialCross] == want);
    CHECK(layers[AttnKind::TemporalSelf] == want);

    // resolution plan: full, half, half, half, full
    CHECK(sa_s_res == std::vector<int64_t>({16, 8, 8, 8, 16}));
    // SA-S rows are spatial tokens at the site's resolution
    CHECK(rows[AttnKind::SpatialSelf] ==
          std::vector<int64_t>({256, 64, 64, 64, 256}));
    // SA-T rows are frames at every site
    CHECK(rows[AttnKind::TemporalSelf] == std::vector<int64_t>({8, 8, 8, 8, 8}));
    // CA-S queries are spatial tokens
    CHECK(rows[AttnKind::SpatialCross] ==
          std::vector<int64_t>({256, 64, 64, 64, 256}));
}

TEST_CASE("same seed builds bit-identical weights, different seed does not") {
    Denoiser a = build_denoiser(toy_config());
    Denoiser b = build_denoiser(toy_config());
    REQUIRE(a.parameters().size() == b.parameters().size());
    for (size_t i = 0; i < a.parameters().size(); ++i) {
        CHECK(a.parameters()[i].first == b.parameters()[i].first);
        CHECK(bytes_equal(a.parameters()[i].second, b.parameters()[i].second));
    }

    DenoiserConfig other = toy_config();
    other.seed = 8;
    Denoiser c = build_denoiser(other);
    bool any_diff = false;
    for (size_t i = 0; i < a.parameters().size(); ++i) {
        if (checksum(a.parameters()[i].second) != checksum(c.parameters()[i].second)) {
            any_diff = true;
        }
    }
    CHECK(any_diff);
}

TEST_CASE("predict_noise is deterministic and shape-preserving") {
    Denoiser model = build_denoiser(toy_config());
    PromptEmbedding text = embed_text("a dog runs", 16, 1);
    Tensor z = toy_latent();
    Tensor e1 = model.predict_noise(z, 10, text);
    Tensor e2 = model.predict_noise(z, 10, text);
    CHECK(e1.shape() == z.shape());
    CHECK(bytes_equal(e1, e2));

    // step conditioning must matter
    Tensor e3 = model.predict_noise(z, 11, text);
    CHECK_FALSE(bytes_equal(e1, e3));
    // prompt conditioning must matter
    Tensor e4 = model.predict_noise(z, 10, embed_text("a cat sits", 16, 1));
    CHECK_FALSE(bytes_equal(e1, e4));
    CHECK(e1.all_finite());
}

TEST_CASE("identity hooks change nothing bit-exactly") {
    Denoiser model = build_denoiser(toy_config());
    PromptEmbedding text = embed_text("a cat", 16, 1);
    Tensor z = toy_latent();
    Tensor base = model.predict_noise(z, 5, text);

    HookSet hooks;
    hooks.on_qkv = [](const HookContext& ctx) {
        QkvReplacement rep;
        rep.q = *ctx.q;  // hand back copies of the originals
        rep.k = *ctx.k;
        rep.v = *ctx.v;
        return std::optional<QkvReplacement>(rep);
    };
    Tensor hooked = model.predict_noise(z, 5, text, hooks);
    CHECK(bytes_equal(base, hooked));

    // declining to replace anything is also identity
    HookSet decline;
    decline.on_qkv = [](const HookContext&) { return std::optional<QkvReplacement>(); };
    decline.on_attention_plan = [](const HookContext&) {
        return std::optional<MaskedAttnPlan>();
    };
    CHECK(bytes_equal(base, model.predict_noise(z, 5, text, decline)));
}

TEST_CASE("replacing V at one SA-S site changes the output") {
    Denoiser model = build_denoiser(toy_config());
    PromptEmbedding text = embed_text("a cat", 16, 1);
    Tensor z = toy_latent();
    Tensor base = model.predict_noise(z, 5, text);

    HookSet hooks;
    hooks.on_qkv = [](const HookContext& ctx) -> std::optional<QkvReplacement> {
        if (ctx.kind != AttnKind::SpatialSelf || ctx.layer != 0) return std::nullopt;
        QkvReplacement rep;
        rep.v = Tensor(ctx.v->shape());  // zeros
        return rep;
    };
    Tensor hooked = model.predict_noise(z, 5, text, hooks);
    CHECK(checksum(base) != checksum(hooked));
}

TEST_CASE("hook shape violations name the site") {
    Denoiser model = build_denoiser(toy_config());
    PromptEmbedding text = embed_text("a cat", 16, 1);

    HookSet hooks;
    hooks.on_qkv = [](const HookContext& ctx) -> std::optional<QkvReplacement> {
        if (ctx.kind != AttnKind::TemporalSelf || ctx.layer != 2) return std::nullopt;
        QkvReplacement rep;
        rep.q = Tensor({1, 1, 1});
        return rep;
    };
    HookFrame frame{Branch::MotionRef, 7, GuidancePass::Cond};
    CHECK_THROWS_WITH_AS(model.predict_noise(toy_latent(), 5, text, hooks, frame),
                         doctest::Contains("branch=motion-ref step=7 layer=2 kind=SA-T"),
                         HookContractError);
}

TEST_CASE("per-head batching: SA-S sees F*heads batches, SA-T h*w*heads") {
    Denoiser model = build_denoiser(toy_config());
    PromptEmbedding text = embed_text("a cat", 16, 1);
    HookSet hooks;
    bool checked_sas = false, checked_sat = false, checked_cas = false;
    hooks.on_qkv = [&](const HookContext& ctx) -> std::optional<QkvReplacement> {
        if (ctx.layer == 0 && ctx.kind == AttnKind::SpatialSelf) {
            CHECK(ctx.q->dim(0) == 8 * 2);
            CHECK(ctx.q->dim(2) == 4);
            checked_sas = true;
        }
        if (ctx.layer == 0 && ctx.kind == AttnKind::TemporalSelf) {
            CHECK(ctx.q->dim(0) == 16 * 16 * 2);
            CHECK(ctx.q->dim(1) == 8);
            checked_sat = true;
        }
        if (ctx.layer == 0 && ctx.kind == AttnKind::SpatialCross) {
            CHECK(ctx.k->dim(1) == 2);  // two prompt tokens
            checked_cas = true;
        }
        return std::nullopt;
    };
    model.predict_noise(toy_latent(), 5, text, hooks);
    CHECK(checked_sas);
    CHECK(checked_sat);
    CHECK(checked_cas);
}

TEST_CASE("text embedding is deterministic and position-sensitive") {
    PromptEmbedding null = embed_text("", 16, 3);
    CHECK(null.num_tokens() == 1);
    for (float v : null.tokens.values()) CHECK(v == 0.0f);
    // whitespace-only is the null prompt too
    CHECK(embed_text("   ", 16, 3).num_tokens() == 1);

    PromptEmbedding a = embed_text("a b", 16, 3);
    PromptEmbedding b = embed_text("a b", 16, 3);
    CHECK(bytes_equal(a.tokens, b.tokens));
    PromptEmbedding swapped = embed_text("b a", 16, 3);
    CHECK_FALSE(bytes_equal(a.tokens, swapped.tokens));

    // nonempty tokens are unit vectors
    for (int64_t l = 0; l < a.num_tokens(); ++l) {
        double n2 = 0.0;
        for (int64_t d = 0; d < 16; ++d) n2 += double(a.tokens.at(l, d)) * a.tokens.at(l, d);
        CHECK(n2 == doctest::Approx(1.0).epsilon(1e-5));
    }

    // seed changes the embedding
    CHECK_FALSE(bytes_equal(a.tokens, embed_text("a b", 16, 4).tokens));
}

TEST_CASE("checkpoint-style parameter replacement validates name and shape") {
    Denoiser model = build_denoiser(toy_config());
    Tensor e_before =
        model.predict_noise(toy_latent(), 5, embed_text("a cat", 16, 1));

    CHECK_THROWS_AS(model.set_parameter("does.not.exist", Tensor({1})), ConfigError);
    CHECK_THROWS_AS(model.set_parameter("conv_in.w", Tensor({1, 2})), ShapeError);

    model.set_parameter("conv_in.b", Tensor::full({8}, 0.5f));
    Tensor e_after = model.predict_noise(toy_latent(), 5, embed_text("a cat", 16, 1));
    CHECK_FALSE(bytes_equal(e_before, e_after));
}

TEST_CASE("config validation rejects bad dimensions") {
    DenoiserConfig cfg = toy_config();
    cfg.channels = {8};
    CHECK_THROWS_AS(build_denoiser(cfg), ConfigError);

    cfg = toy_config();
    cfg.frames = 1;
    CHECK_THROWS_AS(build_denoiser(cfg), ConfigError);

    Denoiser model = build_denoiser(toy_config());
    // wrong frame count
    CHECK_THROWS_AS(
        model.predict_noise(Tensor({4, 4, 16, 16}), 0, embed_text("x", 16, 1)),
        ShapeError);
    // spatial dims not divisible by 2
    CHECK_THROWS_AS(
        model.predict_noise(Tensor({8, 4, 15, 16}), 0, embed_text("x", 16, 1)),
        ShapeError);
    // wrong text dim
    CHECK_THROWS_AS(model.predict_noise(toy_latent(), 0, embed_text("x", 8, 1)),
                    ShapeError);
}
