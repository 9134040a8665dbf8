#include <catch_amalgamated.hpp>

#include "macl/metrics.hpp"
#include "macl/rng.hpp"

using namespace macl;

namespace {

struct Mask {
    std::vector<std::uint8_t> px;
    std::size_t h, w;
    Mask(std::size_t h_, std::size_t w_) : px(h_ * w_, 0), h(h_), w(w_) {}
    void set(std::size_t y, std::size_t x) { px[y * w + x] = 1; }
    void rect(std::size_t y0, std::size_t x0, std::size_t y1, std::size_t x1) {
        for (std::size_t y = y0; y < y1; ++y)
            for (std::size_t x = x0; x < x1; ++x) set(y, x);
    }
    MaskView view() const { return {px, h, w}; }
};

Mask random_mask(std::size_t h, std::size_t w, Rng& rng, double p) {
    Mask m(h, w);
    for (auto& v : m.px) v = rng.uniform() < p;
    return m;
}

// Enumeration oracle: scans every pixel pair and rebuilds the boundary from a padded copy.
struct Oracle {
    static bool fg(const Mask& m, long y, long x) {
        if (y < 0 || x < 0 || y >= long(m.h) || x >= long(m.w)) return false;
        return m.px[std::size_t(y) * m.w + std::size_t(x)] != 0;
    }
    static std::vector<std::pair<long, long>> edge(const Mask& m) {
        std::vector<std::pair<long, long>> out;
        for (long y = 0; y < long(m.h); ++y)
            for (long x = 0; x < long(m.w); ++x)
                if (fg(m, y, x) && (!fg(m, y - 1, x) || !fg(m, y + 1, x) || !fg(m, y, x - 1) || !fg(m, y, x + 1)))
                    out.emplace_back(y, x);
        return out;
    }
    static std::vector<double> directed(const Mask& a, const Mask& b, double sp) {
        std::vector<double> d;
        for (auto [ya, xa] : edge(a)) {
            double best = 1e300;
            for (auto [yb, xb] : edge(b)) best = std::min(best, std::sqrt(double((ya - yb) * (ya - yb) + (xa - xb) * (xa - xb))));
            d.push_back(best * sp);
        }
        return d;
    }
    static double asd(const Mask& a, const Mask& b, double sp) {
        const auto ab = directed(a, b, sp), ba = directed(b, a, sp);
        double sa = 0, sb = 0;
        for (double v : ab) sa += v;
        for (double v : ba) sb += v;
        return 0.5 * (sa / double(ab.size()) + sb / double(ba.size()));
    }
    static double hd95(const Mask& a, const Mask& b, double sp) {
        auto d = directed(a, b, sp);
        const auto ba = directed(b, a, sp);
        d.insert(d.end(), ba.begin(), ba.end());
        std::sort(d.begin(), d.end());
        const double pos = 0.95 * double(d.size() - 1);
        const auto lo = std::size_t(pos);
        const auto hi = std::min(lo + 1, d.size() - 1);
        return d[lo] * (1.0 - (pos - double(lo))) + d[hi] * (pos - double(lo));
    }
};

} // namespace

TEST_CASE("dsc and jc hand cases", "[metrics]") {
    Mask g(4, 4), p(4, 4), q(4, 4);
    g.rect(0, 0, 2, 2);
    p.set(0, 0);
    p.set(0, 1);
    q.rect(2, 2, 4, 4);
    CHECK(dsc(g.view(), g.view()) == 1.0);
    CHECK(dsc(q.view(), g.view()) == 0.0);
    CHECK(dsc(p.view(), g.view()) == Catch::Approx(0.6667).margin(1e-4));
    CHECK(jc(p.view(), g.view()) == Catch::Approx(0.5).margin(1e-12));
    CHECK(jc(g.view(), g.view()) == 1.0);
    CHECK(jc(q.view(), g.view()) == 0.0);
    const Mask e(4, 4);
    CHECK(dsc(e.view(), e.view()) == 1.0);
    CHECK(jc(e.view(), e.view()) == 1.0);
    CHECK_THROWS_AS(dsc(Mask(3, 4).view(), g.view()), ShapeError);
}

TEST_CASE("jc = dsc / (2 - dsc) and overlap symmetry on random masks", "[metrics]") {
    Rng rng(11);
    for (int i = 0; i < 100; ++i) {
        const auto a = random_mask(12, 9, rng, rng.uniform(0.05, 0.6));
        const auto b = random_mask(12, 9, rng, rng.uniform(0.05, 0.6));
        const double d = dsc(a.view(), b.view());
        CHECK(std::abs(jc(a.view(), b.view()) - d / (2.0 - d)) <= 1e-9);
        CHECK(d == dsc(b.view(), a.view()));
        CHECK(jc(a.view(), b.view()) == jc(b.view(), a.view()));
    }
}

TEST_CASE("distance hand cases", "[metrics]") {
    Mask a(8, 8), b(8, 8);
    a.set(3, 3);
    b.set(4, 4);
    CHECK(hd95(a.view(), a.view()).value == 0.0);
    CHECK(hd95(a.view(), b.view()).value == Catch::Approx(std::sqrt(2.0)).epsilon(1e-12));
    CHECK(asd(a.view(), a.view()).value == 0.0);
    Mask c(8, 8);
    c.set(3, 6);
    CHECK(asd(a.view(), c.view()).value == Catch::Approx(3.0).epsilon(1e-12));

    Mask g(40, 40), p(40, 40);
    g.rect(8, 8, 30, 30);
    p.rect(8, 9, 30, 31);
    CHECK(hd95(p.view(), g.view()).value == Catch::Approx(1.0).margin(1e-12));
    CHECK(std::abs(asd(p.view(), g.view()).value - Oracle::asd(p, g, 1.0)) <= 1e-6);
}

TEST_CASE("empty mask conventions are flagged", "[metrics]") {
    Mask e(6, 8), g(6, 8);
    g.rect(1, 1, 3, 3);
    const auto h = hd95(e.view(), g.view(), 2.0);
    CHECK(h.sentinel);
    CHECK(h.value == Catch::Approx(std::hypot(6.0, 8.0) * 2.0));
    CHECK(asd(g.view(), e.view()).sentinel);
    const auto both = hd95(e.view(), e.view());
    CHECK_FALSE(both.sentinel);
    CHECK(both.value == 0.0);
    CHECK_THROWS_AS(hd95(g.view(), g.view(), 0.0), ConfigError);
}

TEST_CASE("distance metrics match the enumeration oracle and their invariants", "[metrics]") {
    Rng rng(5);
    for (int i = 0; i < 60; ++i) {
        const auto a = random_mask(10, 11, rng, rng.uniform(0.1, 0.7));
        const auto b = random_mask(10, 11, rng, rng.uniform(0.1, 0.7));
        if (a.view().empty() || b.view().empty()) continue;
        const double sp = rng.uniform(0.5, 3.0);
        const double h = hd95(a.view(), b.view()).value, s = asd(a.view(), b.view()).value;
        CHECK(std::abs(h - Oracle::hd95(a, b, 1.0)) <= 1e-9);
        CHECK(std::abs(s - Oracle::asd(a, b, 1.0)) <= 1e-9);
        CHECK(h == Catch::Approx(hd95(b.view(), a.view()).value).epsilon(1e-12));
        CHECK(s == Catch::Approx(asd(b.view(), a.view()).value).epsilon(1e-12));
        CHECK(h <= hausdorff(a.view(), b.view()).value + 1e-12);
        CHECK(hd95(a.view(), b.view(), sp).value == Catch::Approx(sp * h).epsilon(1e-12));
        CHECK(asd(a.view(), b.view(), sp).value == Catch::Approx(sp * s).epsilon(1e-12));
        CHECK(hausdorff(a.view(), b.view(), sp).value == Catch::Approx(sp * hausdorff(a.view(), b.view()).value).epsilon(1e-12));
    }
}

TEST_CASE("report aggregation over foreground classes", "[metrics]") {
    const std::size_t H = 6, W = 6;
    std::vector<std::uint8_t> gt(H * W, 0), bg(H * W, 0);
    for (std::size_t i = 0; i < 9; ++i) gt[(1 + i / 3) * W + 1 + i % 3] = 1;
    gt[5 * W + 5] = 2;
    MetricsAccumulator perfect(4);
    perfect.add(gt, gt, H, W);
    const auto r = perfect.report();
    CHECK(r.per_class.size() == 3);
    CHECK(r.per_class.at(1).dsc == 1.0);
    CHECK(r.per_class.at(1).hd95 == 0.0);
    CHECK(r.per_class.at(3).both_empty_count == 1);
    CHECK(r.mean.dsc == 1.0);
    CHECK(r.mean.asd == 0.0);

    MetricsAccumulator degenerate(3);
    degenerate.add(bg, gt, H, W);
    const auto d = degenerate.report();
    CHECK(d.mean.dsc == 0.0);
    CHECK(d.mean.sentinel_count == 2);

    nlohmann::json j = r;
    const auto back = j.get<MetricsReport>();
    CHECK(back.per_class.at(2).dsc == r.per_class.at(2).dsc);
    CHECK(back.aggregation == "per-slice mean");
    const auto csv = report_csv(r);
    CHECK(csv.rfind("class,metric,value\n", 0) == 0);
    CHECK(csv.find("mean,dsc,1\n") != std::string::npos);
}
