#include <catch_amalgamated.hpp>

#include <functional>

#include "macl/nn.hpp"
#include "support.hpp"

using namespace macl;
using namespace macl::testing;
using Catch::Approx;

namespace {

using Fn = std::function<Var<double>(const std::vector<Var<double>>&)>;

// <out, probe> as a differentiable scalar.
Var<double> probe_dot(const Var<double>& out, const Tensor<double>& probe) {
    double s = 0;
    for (std::size_t i = 0; i < probe.numel(); ++i) s += out.value()[i] * probe[i];
    return make_result<double>(Tensor<double>::scalar(s), {out}, [out, probe](Node<double>& n) {
        auto& g = out.grad_buffer();
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] += n.grad[0] * probe[i];
    });
}

// Max relative error between backward() and central differences over every input.
double gradcheck(const Fn& fn, const std::vector<Tensor<double>>& inputs, Rng& rng) {
    std::vector<Var<double>> vars;
    for (const auto& t : inputs) vars.emplace_back(t, true);
    const auto out = fn(vars);
    const auto probe = random_tensor<double>(out.shape(), rng);
    backward(probe_dot(out, probe));
    double worst = 0;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        const auto numeric = oracle::finite_diff_gradient(
            [&](const Tensor<double>& t) {
                std::vector<Var<double>> v;
                for (std::size_t m = 0; m < inputs.size(); ++m) v.emplace_back(m == k ? t : inputs[m], false);
                return probe_dot(fn(v), probe).value()[0];
            },
            inputs[k]);
        const Tensor<double> analytic = vars[k].has_grad() ? vars[k].grad() : Tensor<double>(inputs[k].shape());
        worst = std::max(worst, oracle::max_relative_error(analytic, numeric, kGradFloor));
    }
    return worst;
}

} // namespace

TEST_CASE("conv2d gradients", "[nn][gradient]") {
    Rng rng(1);
    for (std::size_t k : {1, 3}) {
        const auto x = random_tensor<double>({2, 3, 5, 4}, rng);
        const auto w = random_tensor<double>({4, 3, k, k}, rng);
        const auto b = random_tensor<double>({4}, rng);
        CHECK(gradcheck([](auto& v) { return nn::conv2d(v[0], v[1], v[2]); }, {x, w, b}, rng) < 1e-6);
    }
}

TEST_CASE("conv2d matches direct convolution", "[nn]") {
    Rng rng(2);
    const auto x = random_tensor<double>({1, 2, 4, 5}, rng);
    const auto w = random_tensor<double>({3, 2, 3, 3}, rng);
    const auto b = random_tensor<double>({3}, rng);
    const auto out = nn::conv2d(Var<double>(x), Var<double>(w), Var<double>(b)).value();
    for (std::size_t o = 0; o < 3; ++o)
        for (std::size_t y = 0; y < 4; ++y)
            for (std::size_t xx = 0; xx < 5; ++xx) {
                double s = b[o];
                for (std::size_t c = 0; c < 2; ++c)
                    for (int dy = -1; dy <= 1; ++dy)
                        for (int dx = -1; dx <= 1; ++dx) {
                            const int yy = int(y) + dy, xq = int(xx) + dx;
                            if (yy < 0 || yy >= 4 || xq < 0 || xq >= 5) continue;
                            s += w.at(o, c, dy + 1, dx + 1) * x.at(0, c, yy, xq);
                        }
                CHECK(out.at(0, o, y, xx) == Approx(s).margin(1e-12));
            }
    CHECK_THROWS_AS(nn::conv2d(Var<double>(x), Var<double>(random_tensor<double>({3, 2, 2, 2}, rng)), Var<double>(b)), ShapeError);
}

TEST_CASE("transposed conv, pooling and resampling gradients", "[nn][gradient]") {
    Rng rng(3);
    const auto x = random_tensor<double>({2, 3, 4, 4}, rng);
    CHECK(gradcheck([](auto& v) { return nn::conv_transpose2x2(v[0], v[1], v[2]); },
                    {x, random_tensor<double>({3, 2, 2, 2}, rng), random_tensor<double>({2}, rng)}, rng) < 1e-6);
    CHECK(gradcheck([](auto& v) { return nn::max_pool2(v[0]); }, {x}, rng) < 1e-6);
    CHECK(gradcheck([](auto& v) { return nn::avg_down(v[0], 0.5); }, {x}, rng) < 1e-6);
    CHECK(gradcheck([](auto& v) { return nn::global_avg_pool(v[0]); }, {x}, rng) < 1e-6);
    CHECK(gradcheck([](auto& v) { return nn::concat_channels(v[0], v[1]); }, {x, random_tensor<double>({2, 1, 4, 4}, rng)}, rng) < 1e-6);
}

TEST_CASE("pointwise, normalization and dense gradients", "[nn][gradient]") {
    Rng rng(4);
    const auto x = random_tensor<double>({2, 3, 4, 4}, rng);
    CHECK(gradcheck([](auto& v) { return nn::leaky_relu(v[0]); }, {x}, rng) < 1e-6);
    CHECK(gradcheck([](auto& v) { return nn::instance_norm(v[0], v[1], v[2]); },
                    {x, random_tensor<double>({3}, rng), random_tensor<double>({3}, rng)}, rng) < 1e-4);
    CHECK(gradcheck([](auto& v) { return nn::linear(v[0], v[1], v[2]); },
                    {random_tensor<double>({4, 5}, rng), random_tensor<double>({3, 5}, rng), random_tensor<double>({3}, rng)}, rng) < 1e-6);
    CHECK(gradcheck([](auto& v) { return nn::add(v[0], v[1]); }, {x, random_tensor<double>(x.shape(), rng)}, rng) < 1e-6);
}

TEST_CASE("cross entropy", "[nn]") {
    Rng rng(5);
    const auto logits = random_tensor<double>({2, 3, 2, 2}, rng);
    std::vector<std::uint8_t> labels(8);
    for (auto& l : labels) l = static_cast<std::uint8_t>(rng.below(3));
    double ref = 0;
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t p = 0; p < 4; ++p) {
            double z = 0;
            for (std::size_t c = 0; c < 3; ++c) z += std::exp(logits[(b * 3 + c) * 4 + p]);
            ref += std::log(z) - logits[(b * 3 + labels[b * 4 + p]) * 4 + p];
        }
    CHECK(nn::cross_entropy(Var<double>(logits), labels).value()[0] == Approx(ref / 8).epsilon(1e-12));
    CHECK(gradcheck([&](auto& v) { return nn::cross_entropy(v[0], labels); }, {logits}, rng) < 1e-6);
}

TEST_CASE("instance norm output statistics", "[nn]") {
    Rng rng(6);
    const auto x = random_tensor<double>({2, 3, 6, 6}, rng, -5, 5);
    const auto y = nn::instance_norm(Var<double>(x), Var<double>(Tensor<double>({3}, 1.0)), Var<double>(Tensor<double>({3}))).value();
    for (std::size_t p = 0; p < 6; ++p) {
        double m = 0, v = 0;
        for (std::size_t i = 0; i < 36; ++i) m += y[p * 36 + i];
        m /= 36;
        for (std::size_t i = 0; i < 36; ++i) v += (y[p * 36 + i] - m) * (y[p * 36 + i] - m);
        CHECK(m == Approx(0.0).margin(1e-12));
        CHECK(v / 36 == Approx(1.0).epsilon(1e-3));
    }
}

TEST_CASE("backward accumulates through shared nodes", "[autograd]") {
    Var<double> x(Tensor<double>({2}, std::vector<double>{1, 2}), true);
    const auto y = nn::add(x, x);
    backward(probe_dot(y, Tensor<double>({2}, std::vector<double>{1, 1})));
    CHECK(x.grad()[0] == 2.0);
    CHECK(x.grad()[1] == 2.0);
    const auto d = detach(x);
    CHECK_FALSE(d.requires_grad());
}
