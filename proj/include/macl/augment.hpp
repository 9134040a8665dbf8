// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <utility>

#include "json.hpp"
#include "macl/error.hpp"
#include "macl/rng.hpp"
#include "macl/tensor.hpp"

namespace macl {

// Pixel-preserving (spatial invariance) augmentations. Zero ranges mean identity.
struct TFixConfig {
    double brightness = 0.0; // max |shift|
    double contrast = 0.0;   // max |factor - 1|
    bool identity() const { return brightness == 0.0 && contrast == 0.0; }
};

struct AffineRanges {
    double translate = 0.125; // fraction of H
    double rotate_deg = 30.0;
    double scale_min = 0.8;
    double scale_max = 1.2;

    void validate() const {
        if (!(scale_min > 0.0) || !(scale_max > 0.0)) throw ConfigError("affine scale range must be positive");
        if (scale_max < scale_min) throw ConfigError("affine scale_max < scale_min");
        if (translate < 0.0 || rotate_deg < 0.0) throw ConfigError("affine ranges must be non-negative");
    }
    static AffineRanges none() { return {0.0, 0.0, 1.0, 1.0}; }
};

struct AugmentConfig {
    TFixConfig fix;
    AffineRanges var;
};

inline void to_json(nlohmann::json& j, const AugmentConfig& c) {
    j = {{"brightness", c.fix.brightness}, {"contrast", c.fix.contrast},
         {"translate", c.var.translate},   {"rotate_deg", c.var.rotate_deg},
         {"scale_min", c.var.scale_min},   {"scale_max", c.var.scale_max}};
}
inline void from_json(const nlohmann::json& j, AugmentConfig& c) {
    c.fix.brightness = j.value("brightness", c.fix.brightness);
    c.fix.contrast = j.value("contrast", c.fix.contrast);
    c.var.translate = j.value("translate", c.var.translate);
    c.var.rotate_deg = j.value("rotate_deg", c.var.rotate_deg);
    c.var.scale_min = j.value("scale_min", c.var.scale_min);
    c.var.scale_max = j.value("scale_max", c.var.scale_max);
}

inline Tensor<float> brightness_shift(const Tensor<float>& x, double delta) {
    Tensor<float> out = x;
    for (auto& v : out.vec()) v = std::clamp(static_cast<float>(v + delta), 0.0f, 1.0f);
    return out;
}

inline Tensor<float> contrast_scale(const Tensor<float>& x, double factor) {
    double mean = 0.0;
    for (float v : x.vec()) mean += v;
    mean /= static_cast<double>(std::max<std::size_t>(1, x.numel()));
    Tensor<float> out = x;
    for (auto& v : out.vec()) v = std::clamp(static_cast<float>(mean + factor * (v - mean)), 0.0f, 1.0f);
    return out;
}

inline std::pair<Tensor<float>, Tensor<float>> t_fix(const Tensor<float>& x, Rng& rng, const TFixConfig& cfg = {}) {
    if (cfg.identity()) return {x, x};
    auto one = [&] {
        Tensor<float> y = x;
        if (cfg.contrast > 0.0) y = contrast_scale(y, 1.0 + rng.uniform(-cfg.contrast, cfg.contrast));
        if (cfg.brightness > 0.0) y = brightness_shift(y, rng.uniform(-cfg.brightness, cfg.brightness));
        return y;
    };
    auto a = one();
    auto b = one();
    return {std::move(a), std::move(b)};
}

struct AffineParams {
    double angle_deg = 0.0;
    double scale = 1.0;
    double ty = 0.0, tx = 0.0; // pixels
};

namespace detail {

// Mirror reflection about the first and last sample centers.
inline double reflect_coord(double u, std::size_t n) {
    if (n == 1) return 0.0;
    const double last = static_cast<double>(n - 1);
    const double period = 2.0 * last;
    u = std::fmod(std::abs(u), period);
    return u > last ? period - u : u;
}

inline std::pair<double, double> exact_cos_sin(double deg) {
    const double q = deg / 90.0;
    if (q == std::round(q)) {
        switch (((static_cast<long long>(q) % 4) + 4) % 4) {
        case 0: return {1.0, 0.0};
        case 1: return {0.0, 1.0};
        case 2: return {-1.0, 0.0};
        default: return {0.0, -1.0};
        }
    }
    const double r = deg * std::numbers::pi / 180.0;
    return {std::cos(r), std::sin(r)};
}

} // namespace detail

// Rotation/scale about the image center followed by translation; inverse-mapped,
// bilinear, reflection padded, clamped to [0, 1].
inline Tensor<float> affine_transform(const Tensor<float>& x, const AffineParams& p) {
    if (x.rank() != 2) throw ShapeError("affine_transform expects a 2D image, got " + shape_str(x.shape()));
    if (!(p.scale > 0.0)) throw ConfigError("affine scale must be positive");
    const std::size_t H = x.dim(0), W = x.dim(1);
    const double cy = (static_cast<double>(H) - 1.0) / 2.0, cx = (static_cast<double>(W) - 1.0) / 2.0;
    const auto [c, s] = detail::exact_cos_sin(p.angle_deg);
    Tensor<float> out({H, W});
    for (std::size_t yy = 0; yy < H; ++yy) {
        for (std::size_t xx = 0; xx < W; ++xx) {
            const double oy = (static_cast<double>(yy) - cy - p.ty) / p.scale;
            const double ox = (static_cast<double>(xx) - cx - p.tx) / p.scale;
            // inverse rotation
            const double sy = detail::reflect_coord(c * oy - s * ox + cy, H);
            const double sx = detail::reflect_coord(s * oy + c * ox + cx, W);
            const std::size_t y0 = static_cast<std::size_t>(std::floor(sy));
            const std::size_t x0 = static_cast<std::size_t>(std::floor(sx));
            const std::size_t y1 = std::min(y0 + 1, H - 1), x1 = std::min(x0 + 1, W - 1);
            const double wy = sy - static_cast<double>(y0), wx = sx - static_cast<double>(x0);
            const double v = (1 - wy) * ((1 - wx) * x.at(y0, x0) + wx * x.at(y0, x1)) +
                             wy * ((1 - wx) * x.at(y1, x0) + wx * x.at(y1, x1));
            out.at(yy, xx) = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
    }
    return out;
}

inline AffineParams sample_affine(Rng& rng, const AffineRanges& r, std::size_t size) {
    AffineParams p;
    const double t = r.translate * static_cast<double>(size);
    p.ty = t > 0 ? rng.uniform(-t, t) : 0.0;
    p.tx = t > 0 ? rng.uniform(-t, t) : 0.0;
    p.angle_deg = r.rotate_deg > 0 ? rng.uniform(-r.rotate_deg, r.rotate_deg) : 0.0;
    p.scale = r.scale_max > r.scale_min ? rng.uniform(r.scale_min, r.scale_max) : r.scale_min;
    return p;
}

inline std::pair<Tensor<float>, Tensor<float>> t_var(const Tensor<float>& x, Rng& rng, const AffineRanges& ranges = {}) {
    ranges.validate();
    const auto p1 = sample_affine(rng, ranges, x.dim(0));
    const auto p2 = sample_affine(rng, ranges, x.dim(0));
    return {affine_transform(x, p1), affine_transform(x, p2)};
}

// Factor f = 1 / lambda; lambda must be the reciprocal of a positive integer.
inline std::size_t down_factor(double lambda) {
    if (!(lambda > 0.0) || lambda > 1.0) throw ConfigError("downsampling factor lambda must be in (0, 1]");
    const double inv = 1.0 / lambda;
    const double f = std::round(inv);
    if (std::abs(inv - f) > 1e-9) throw ConfigError("1/lambda must be an integer");
    return static_cast<std::size_t>(f);
}

// Non-overlapping f x f average pooling over the last two axes of any tensor of rank >= 2.
template <typename T>
Tensor<T> down(const Tensor<T>& x, double lambda) {
    const std::size_t f = down_factor(lambda);
    if (x.rank() < 2) throw ShapeError("down expects rank >= 2");
    const std::size_t H = x.dim(x.rank() - 2), W = x.dim(x.rank() - 1);
    if (H % f != 0 || W % f != 0)
        throw ShapeError("spatial size " + std::to_string(H) + "x" + std::to_string(W) +
                         " not divisible by downsampling factor " + std::to_string(f));
    if (f == 1) return x;
    Shape os = x.shape();
    os[os.size() - 2] = H / f;
    os[os.size() - 1] = W / f;
    Tensor<T> out(os);
    const std::size_t planes = x.numel() / (H * W);
    const std::size_t oh = H / f, ow = W / f;
    const T inv = T(1) / static_cast<T>(f * f);
    for (std::size_t p = 0; p < planes; ++p) {
        const T* src = x.data() + p * H * W;
        T* dst = out.data() + p * oh * ow;
        for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t xx = 0; xx < ow; ++xx) {
                T acc{0};
                for (std::size_t dy = 0; dy < f; ++dy)
                    for (std::size_t dx = 0; dx < f; ++dx) acc += src[(y * f + dy) * W + xx * f + dx];
                dst[y * ow + xx] = acc * inv;
            }
    }
    return out;
}

// I1, I2: pixel positions preserved. V1, V2: spatially transformed.
struct AugmentedQuad {
    Tensor<float> I1, I2, V1, V2;
};

inline AugmentedQuad augment_quad(const Tensor<float>& x, Rng& rng, const AugmentConfig& cfg) {
    auto [i1, i2] = t_fix(x, rng, cfg.fix);
    auto [v1, v2] = t_var(x, rng, cfg.var);
    return {std::move(i1), std::move(i2), std::move(v1), std::move(v2)};
}

} // namespace macl
