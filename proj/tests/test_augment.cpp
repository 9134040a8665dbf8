#include <catch_amalgamated.hpp>

#include "macl/augment.hpp"

using namespace macl;
using Catch::Approx;

namespace {

Tensor<float> random_image(std::size_t h, std::size_t w, Rng& rng) {
    Tensor<float> t({h, w});
    for (auto& v : t.vec()) v = static_cast<float>(rng.uniform());
    return t;
}

} // namespace

TEST_CASE("t_fix identity returns the source untouched", "[augment]") {
    Rng rng(1);
    const auto x = random_image(16, 16, rng);
    auto [a, b] = t_fix(x, rng);
    CHECK(a == x);
    CHECK(b == x);
}

TEST_CASE("t_fix jitter keeps pixel positions", "[augment]") {
    Rng rng(2);
    Tensor<float> x({8, 8});
    for (std::size_t i = 0; i < x.numel(); ++i) x[i] = static_cast<float>(i) / 64.0f;
    const auto shifted = brightness_shift(x, 0.1);
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(shifted[i] == std::clamp(x[i] + 0.1f, 0.0f, 1.0f));
    TFixConfig cfg{0.2, 0.2};
    auto [a, b] = t_fix(x, rng, cfg);
    CHECK(a.shape() == x.shape());
    // monotone per-pixel maps preserve the ordering of pixels
    for (std::size_t i = 1; i < x.numel(); ++i) CHECK(a[i] >= a[i - 1]);
}

TEST_CASE("t_var with zero ranges is identity", "[augment]") {
    Rng rng(3);
    const auto x = random_image(16, 16, rng);
    auto [v1, v2] = t_var(x, rng, AffineRanges::none());
    CHECK(max_abs_diff(v1, x) == 0.0f);
    CHECK(max_abs_diff(v2, x) == 0.0f);
}

TEST_CASE("180 degree rotation flips both axes", "[augment]") {
    Rng rng(4);
    const auto x = random_image(12, 12, rng);
    AffineParams p;
    p.angle_deg = 180.0;
    const auto r = affine_transform(x, p);
    for (std::size_t y = 0; y < 12; ++y)
        for (std::size_t xx = 0; xx < 12; ++xx) CHECK(r.at(y, xx) == x.at(11 - y, 11 - xx));
}

TEST_CASE("t_var is deterministic under a seed", "[augment]") {
    Rng src(5);
    const auto x = random_image(16, 16, src);
    Rng a(77), b(77);
    auto [a1, a2] = t_var(x, a);
    auto [b1, b2] = t_var(x, b);
    CHECK(a1 == b1);
    CHECK(a2 == b2);
    CHECK_FALSE(a1 == a2);
    for (auto v : a1.vec()) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
    }
}

TEST_CASE("degenerate affine ranges are rejected", "[augment]") {
    Rng rng(6);
    const auto x = random_image(8, 8, rng);
    AffineRanges r;
    r.scale_min = 0.0;
    CHECK_THROWS_AS(t_var(x, rng, r), ConfigError);
}

TEST_CASE("down hand cases", "[augment]") {
    Tensor<float> ones({2, 2}, 1.0f);
    CHECK(down(ones, 1.0) == ones);
    CHECK(down(ones, 0.5).numel() == 1);
    CHECK(down(ones, 0.5)[0] == 1.0f);
    Tensor<float> x({2, 2}, std::vector<float>{0, 2, 4, 6});
    CHECK(down(x, 0.5)[0] == 3.0f);
    CHECK_THROWS_AS(down(Tensor<float>({6, 6}), 0.25), ShapeError);
    CHECK_THROWS_AS(down(ones, 0.3), ConfigError);
}

TEST_CASE("down is linear and mean preserving", "[augment][property]") {
    Rng rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        const double lambda = 1.0 / double(1 << rng.below(3));
        const auto a = random_image(16, 16, rng), b = random_image(16, 16, rng);
        const double ca = rng.uniform(-2, 2), cb = rng.uniform(-2, 2);
        Tensor<float> mix({16, 16});
        for (std::size_t i = 0; i < mix.numel(); ++i) mix[i] = static_cast<float>(ca * a[i] + cb * b[i]);
        const auto lhs = down(mix, lambda);
        const auto da = down(a, lambda), db = down(b, lambda);
        for (std::size_t i = 0; i < lhs.numel(); ++i) CHECK(lhs[i] == Approx(ca * da[i] + cb * db[i]).margin(1e-6));
        double m0 = 0, m1 = 0;
        for (auto v : a.vec()) m0 += v;
        for (auto v : da.vec()) m1 += v;
        CHECK(m0 / a.numel() == Approx(m1 / da.numel()).margin(1e-6));
    }
}

TEST_CASE("augment_quad shapes", "[augment]") {
    Rng rng(8);
    const auto x = random_image(16, 16, rng);
    const auto q = augment_quad(x, rng, AugmentConfig{});
    CHECK(q.I1 == x);
    CHECK(q.I2 == x);
    CHECK(q.V1.shape() == x.shape());
    CHECK(q.V2.shape() == x.shape());
}
