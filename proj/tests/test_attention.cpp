#include "doctest.h"

#include <cmath>
#include <cstring>
#include <limits>
#include <random>

#include "test_support.hpp"
#include "uniedit/attention.hpp"

using namespace uniedit;
using test_support::bytes_equal;
using test_support::random_tensor;

namespace {
constexpr float kNegInf = -std::numeric_limits<float>::infinity();
}  // namespace

TEST_CASE("single key gets full weight") {
    AttnTensors t{Tensor::from_data({1, 2}, {1, 0}), Tensor::from_data({1, 2}, {1, 0}),
                  Tensor::from_data({1, 2}, {5, 5}), std::nullopt};
    Tensor out = attn(t);
    CHECK(out.at(0, 0) == doctest::Approx(5.0).epsilon(1e-6));
    CHECK(out.at(0, 1) == doctest::Approx(5.0).epsilon(1e-6));
}

TEST_CASE("zero query averages values uniformly") {
    AttnTensors t{Tensor::from_data({1, 2}, {0, 0}), Tensor::from_data({2, 2}, {1, 0, 0, 1}),
                  Tensor::from_data({2, 2}, {2, 0, 0, 2}), std::nullopt};
    Tensor out = attn(t);
    CHECK(out.at(0, 0) == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(out.at(0, 1) == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("two-key weights match a scalar softmax computed in double") {
    // Q=[[2,0]], K=[[1,0],[0,1]], V=I, d=2 -> logits [2/sqrt(2), 0]
    AttnTensors t{Tensor::from_data({1, 2}, {2, 0}), Tensor::from_data({2, 2}, {1, 0, 0, 1}),
                  Tensor::from_data({2, 2}, {1, 0, 0, 1}), std::nullopt};
    const double l0 = 2.0 / std::sqrt(2.0);
    const double w0 = std::exp(l0) / (std::exp(l0) + 1.0);
    Tensor out = attn(t);
    CHECK(out.at(0, 0) == doctest::Approx(w0).epsilon(1e-6));
    CHECK(out.at(0, 1) == doctest::Approx(1.0 - w0).epsilon(1e-6));
    // sanity anchor on the magnitude itself
    CHECK(out.at(0, 0) == doctest::Approx(0.8044).epsilon(1e-3));
}

TEST_CASE("attention weight rows sum to one") {
    for (uint32_t seed : {1u, 2u, 3u}) {
        AttnTensors t{random_tensor({5, 4}, seed), random_tensor({7, 4}, seed + 100),
                      random_tensor({7, 3}, seed + 200), std::nullopt};
        Tensor w = attention_weights(t);
        for (int64_t i = 0; i < w.dim(0); ++i) {
            double sum = 0.0;
            for (int64_t j = 0; j < w.dim(1); ++j) sum += w.at(i, j);
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
        }
    }
}

TEST_CASE("permuting key/value rows jointly does not change the output") {
    AttnTensors t{random_tensor({4, 6}, 11), random_tensor({5, 6}, 12), random_tensor({5, 3}, 13),
                  std::nullopt};
    Tensor base = attn(t);

    const int64_t perm[5] = {3, 0, 4, 1, 2};
    AttnTensors p = t;
    for (int64_t j = 0; j < 5; ++j) {
        for (int64_t c = 0; c < 6; ++c) p.k.at(j, c) = t.k.at(perm[j], c);
        for (int64_t c = 0; c < 3; ++c) p.v.at(j, c) = t.v.at(perm[j], c);
    }
    Tensor permuted = attn(p);
    for (int64_t i = 0; i < base.numel(); ++i) {
        CHECK(permuted.at(i) == doctest::Approx(base.at(i)).epsilon(1e-6));
    }
}

TEST_CASE("scale override changes the logits as specified") {
    AttnTensors t{Tensor::from_data({1, 2}, {2, 0}), Tensor::from_data({2, 2}, {1, 0, 0, 1}),
                  Tensor::from_data({2, 2}, {1, 0, 0, 1}), 1.0f};
    const double w0 = std::exp(2.0) / (std::exp(2.0) + 1.0);
    Tensor out = attn(t);
    CHECK(out.at(0, 0) == doctest::Approx(w0).epsilon(1e-6));
}

TEST_CASE("shape errors name the offending axes") {
    AttnTensors bad_d{Tensor({2, 3}), Tensor({2, 4}), Tensor({2, 4}), std::nullopt};
    CHECK_THROWS_WITH_AS(attn(bad_d), doctest::Contains("d=3"), ShapeError);

    AttnTensors bad_rows{Tensor({2, 3}), Tensor({4, 3}), Tensor({5, 3}), std::nullopt};
    CHECK_THROWS_WITH_AS(attn(bad_rows), doctest::Contains("N_k=4"), ShapeError);
}

TEST_CASE("all-zero mask reproduces unmasked attention bit-exactly") {
    AttnTensors t{random_tensor({6, 4}, 21), random_tensor({8, 4}, 22), random_tensor({8, 5}, 23),
                  std::nullopt};
    Tensor plain = attn(t);
    Tensor masked = masked_attn(t, AdditiveMask::zeros(6, 8));
    CHECK(bytes_equal(plain, masked));
}

TEST_CASE("a -inf key is excluded exactly") {
    AttnTensors t{Tensor::from_data({1, 2}, {1, 1}), Tensor::from_data({2, 2}, {1, 0, 0, 1}),
                  Tensor::from_data({2, 2}, {3, 3, 9, 9}), std::nullopt};
    AdditiveMask m{Tensor::from_data({1, 2}, {0.0f, kNegInf})};
    Tensor out = masked_attn(t, m);
    CHECK(out.at(0, 0) == 3.0f);
    CHECK(out.at(0, 1) == 3.0f);

    Tensor w = attention_weights(t, &m);
    CHECK(w.at(0, 0) == 1.0f);
    CHECK(w.at(0, 1) == 0.0f);
}

TEST_CASE("masking a key equals attention over the visible keys") {
    AttnTensors full{random_tensor({3, 4}, 31), random_tensor({3, 4}, 32),
                     random_tensor({3, 5}, 33), std::nullopt};
    AdditiveMask m{Tensor({3, 3})};
    for (int64_t i = 0; i < 3; ++i) m.values.at(i, 2) = kNegInf;
    Tensor masked = masked_attn(full, m);

    // oracle: re-run attention over keys {0, 1} only
    AttnTensors visible{full.q, Tensor({2, 4}), Tensor({2, 5}), std::nullopt};
    for (int64_t j = 0; j < 2; ++j) {
        for (int64_t c = 0; c < 4; ++c) visible.k.at(j, c) = full.k.at(j, c);
        for (int64_t c = 0; c < 5; ++c) visible.v.at(j, c) = full.v.at(j, c);
    }
    Tensor oracle = attn(visible);
    for (int64_t i = 0; i < masked.numel(); ++i) {
        CHECK(masked.at(i) == doctest::Approx(oracle.at(i)).epsilon(1e-6));
    }
}

TEST_CASE("fully masked rows raise a degenerate-mask error") {
    AttnTensors t{Tensor({2, 2}), Tensor({2, 2}), Tensor({2, 2}), std::nullopt};
    AdditiveMask m{Tensor::from_data({2, 2}, {0.0f, 0.0f, kNegInf, kNegInf})};
    CHECK_THROWS_WITH_AS(masked_attn(t, m), doctest::Contains("row 1"), DegenerateMaskError);
}

TEST_CASE("mask entries outside {0, -inf} are rejected") {
    AttnTensors t{Tensor({1, 2}), Tensor({2, 2}), Tensor({2, 2}), std::nullopt};
    AdditiveMask m{Tensor::from_data({1, 2}, {0.0f, 0.5f})};
    CHECK_THROWS_AS(masked_attn(t, m), ShapeError);
}

TEST_CASE("fused mask attention collapses to a single leg for constant blends") {
    AttnTensors t{random_tensor({4, 4}, 41), random_tensor({6, 4}, 42), random_tensor({6, 4}, 43),
                  std::nullopt};
    AdditiveMask mf{Tensor({4, 6})};
    AdditiveMask mb{Tensor({4, 6})};
    for (int64_t i = 0; i < 4; ++i) {
        mf.values.at(i, 0) = kNegInf;
        mb.values.at(i, 5) = kNegInf;
    }
    Tensor fg = masked_attn(t, mf);
    Tensor bg = masked_attn(t, mb);

    Tensor ones = Tensor::full({4, 4}, 1.0f);
    Tensor zeros({4, 4});
    CHECK(bytes_equal(mask_fused_attn(t, mf, mb, BlendMask{ones}), fg));
    CHECK(bytes_equal(mask_fused_attn(t, mf, mb, BlendMask{zeros}), bg));
}

TEST_CASE("half/half blend splices rows from the two legs") {
    AttnTensors t{random_tensor({4, 4}, 51), random_tensor({6, 4}, 52), random_tensor({6, 4}, 53),
                  std::nullopt};
    AdditiveMask mf{Tensor({4, 6})};
    AdditiveMask mb{Tensor({4, 6})};
    for (int64_t i = 0; i < 4; ++i) mf.values.at(i, 1) = kNegInf;
    Tensor fg = masked_attn(t, mf);
    Tensor bg = masked_attn(t, mb);

    // rows 0-1 from the foreground leg, rows 2-3 from the background leg
    Tensor blend({4, 1});
    blend.at(0, 0) = 1.0f;
    blend.at(1, 0) = 1.0f;
    Tensor out = mask_fused_attn(t, mf, mb, BlendMask{blend});
    for (int64_t i = 0; i < 2; ++i)
        for (int64_t c = 0; c < 4; ++c) CHECK(out.at(i, c) == fg.at(i, c));
    for (int64_t i = 2; i < 4; ++i)
        for (int64_t c = 0; c < 4; ++c) CHECK(out.at(i, c) == bg.at(i, c));
}

TEST_CASE("fused legs report which mask was degenerate") {
    AttnTensors t{Tensor({1, 2}), Tensor({2, 2}), Tensor({2, 2}), std::nullopt};
    AdditiveMask good{Tensor({1, 2})};
    AdditiveMask dead{Tensor::from_data({1, 2}, {kNegInf, kNegInf})};
    BlendMask mm{Tensor::full({1, 2}, 1.0f)};
    CHECK_THROWS_WITH_AS(mask_fused_attn(t, dead, good, mm), doctest::Contains("foreground"),
                         DegenerateMaskError);
    CHECK_THROWS_WITH_AS(mask_fused_attn(t, good, dead, mm), doctest::Contains("background"),
                         DegenerateMaskError);
}

TEST_CASE("blend_features selects per element") {
    Tensor a = Tensor::from_data({1, 2}, {1, 1});
    Tensor b = Tensor::from_data({1, 2}, {3, 3});
    Tensor out = blend_features(a, b, BlendMask{Tensor::from_data({1, 2}, {1, 0})});
    CHECK(out.at(0, 0) == 1.0f);
    CHECK(out.at(0, 1) == 3.0f);
}

TEST_CASE("blend_features constant-mask collapses are bit-exact") {
    Tensor a = random_tensor({3, 5}, 61);
    Tensor b = random_tensor({3, 5}, 62);
    CHECK(bytes_equal(blend_features(a, b, BlendMask{Tensor::full({3, 5}, 1.0f)}), a));
    CHECK(bytes_equal(blend_features(a, b, BlendMask{Tensor({3, 5})}), b));
    // identical operands: any binary mask returns the operand
    Tensor m({3, 5});
    for (int64_t i = 0; i < m.numel(); ++i) m.at(i) = static_cast<float>(i % 2);
    CHECK(bytes_equal(blend_features(a, a, BlendMask{m}), a));
}

TEST_CASE("blend_features broadcasts trailing-aligned masks") {
    Tensor a = random_tensor({2, 3, 4}, 71);
    Tensor b = random_tensor({2, 3, 4}, 72);

    // per-row mask (3, 1): row selects whole feature vectors in every batch
    Tensor rows({3, 1});
    rows.at(1, 0) = 1.0f;
    Tensor out = blend_features(a, b, BlendMask{rows});
    for (int64_t bi = 0; bi < 2; ++bi)
        for (int64_t i = 0; i < 3; ++i)
            for (int64_t c = 0; c < 4; ++c)
                CHECK(out.at(bi, i, c) == (i == 1 ? a.at(bi, i, c) : b.at(bi, i, c)));

    CHECK_THROWS_AS(blend_features(a, b, BlendMask{Tensor({5, 1})}), ShapeError);
}

TEST_CASE("blend mask entries must be binary") {
    Tensor a({2, 2}), b({2, 2});
    CHECK_THROWS_AS(blend_features(a, b, BlendMask{Tensor::full({2, 2}, 0.5f)}), ShapeError);
}

TEST_CASE("batched attention equals the single-head kernel per batch element") {
    Tensor q = random_tensor({3, 4, 5}, 81);
    Tensor k = random_tensor({3, 6, 5}, 82);
    Tensor v = random_tensor({3, 6, 2}, 83);
    Tensor out = batched_attn(q, k, v);
    CHECK(out.shape() == std::vector<int64_t>({3, 4, 2}));

    for (int64_t b = 0; b < 3; ++b) {
        AttnTensors t{Tensor({4, 5}), Tensor({6, 5}), Tensor({6, 2}), std::nullopt};
        for (int64_t i = 0; i < 4; ++i)
            for (int64_t c = 0; c < 5; ++c) t.q.at(i, c) = q.at(b, i, c);
        for (int64_t j = 0; j < 6; ++j) {
            for (int64_t c = 0; c < 5; ++c) t.k.at(j, c) = k.at(b, j, c);
            for (int64_t c = 0; c < 2; ++c) t.v.at(j, c) = v.at(b, j, c);
        }
        Tensor single = attn(t);
        for (int64_t i = 0; i < 4; ++i)
            for (int64_t c = 0; c < 2; ++c) CHECK(out.at(b, i, c) == single.at(i, c));
    }
}

TEST_CASE("batched masks broadcast over batch and query axes") {
    Tensor q = random_tensor({2, 3, 4}, 91);
    Tensor k = random_tensor({2, 5, 4}, 92);
    Tensor v = random_tensor({2, 5, 4}, 93);

    // key-column mask shared by every batch element and query row
    Tensor shared({1, 5});
    shared.at(0, 4) = kNegInf;
    Tensor a = batched_attn(q, k, v, std::nullopt, &shared);

    // the same mask written out in full
    Tensor full_mask({2, 3, 5});
    for (int64_t b = 0; b < 2; ++b)
        for (int64_t i = 0; i < 3; ++i) full_mask.at(b, i, 4) = kNegInf;
    Tensor b_out = batched_attn(q, k, v, std::nullopt, &full_mask);
    CHECK(bytes_equal(a, b_out));

    // per-batch key mask (B, 1, N_k)
    Tensor per_batch({2, 1, 5});
    per_batch.at(1, 0, 0) = kNegInf;
    Tensor c = batched_attn(q, k, v, std::nullopt, &per_batch);
    Tensor full2({2, 3, 5});
    for (int64_t i = 0; i < 3; ++i) full2.at(1, i, 0) = kNegInf;
    Tensor d = batched_attn(q, k, v, std::nullopt, &full2);
    CHECK(bytes_equal(c, d));
}

TEST_CASE("batched fused mask attention collapses like the single-head form") {
    Tensor q = random_tensor({2, 3, 4}, 101);
    Tensor k = random_tensor({2, 5, 4}, 102);
    Tensor v = random_tensor({2, 5, 4}, 103);
    Tensor mf({1, 5}), mb({1, 5});
    mf.at(0, 0) = kNegInf;
    mb.at(0, 4) = kNegInf;

    Tensor fg = batched_attn(q, k, v, std::nullopt, &mf);
    Tensor bg = batched_attn(q, k, v, std::nullopt, &mb);
    Tensor ones = Tensor::full({2, 3, 4}, 1.0f);
    Tensor zeros({2, 3, 4});
    CHECK(bytes_equal(batched_mask_fused_attn(q, k, v, mf, mb, ones), fg));
    CHECK(bytes_equal(batched_mask_fused_attn(q, k, v, mf, mb, zeros), bg));
}
