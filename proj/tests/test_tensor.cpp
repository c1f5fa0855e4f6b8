#include <doctest.h>

#include <cmath>
#include <cstring>
#include <set>

#include "ssada/ops.hpp"
#include "test_util.hpp"

using namespace ssada;
using testutil::random_tensor;
using testutil::require_gradcheck;
using testutil::to_vector;

TEST_CASE("construct fills deterministically and rejects bad extents") {
    CHECK(to_vector(Tensor::construct({2, 2})) == std::vector<double>{0, 0, 0, 0});
    CHECK(to_vector(Tensor::construct({3}, init::Constant{1.5})) == std::vector<double>{1.5, 1.5, 1.5});

    const auto a = Tensor::construct({4}, init::Uniform{7, -1, 1});
    const auto b = Tensor::construct({4}, init::Uniform{7, -1, 1});
    CHECK(std::memcmp(a.values().data(), b.values().data(), 4 * sizeof(double)) == 0);
    for (double v : a.values()) CHECK((v >= -1 && v < 1));
    CHECK(to_vector(Tensor::construct({4}, init::Uniform{8, -1, 1})) != to_vector(a));

    CHECK_THROWS_AS(Tensor::construct({0, 2}), ShapeError);
    CHECK_THROWS_AS(Tensor::construct({2, -1}), ShapeError);
    CHECK_THROWS_AS(Tensor::from_values({2, 2}, {1, 2, 3}), ShapeError);
}

TEST_CASE("unary examples and domain errors") {
    CHECK(to_vector(relu(Tensor::from_values({3}, {-1, 0, 2}))) == std::vector<double>{0, 0, 2});
    CHECK(sigmoid(Tensor::from_values({1}, {0})).item() == 0.5);
    CHECK(std::abs(log(Tensor::from_values({1}, {std::exp(1.0)})).item() - 1.0) <= 1e-12);
    CHECK(to_vector(neg(Tensor::from_values({2}, {1, -2}))) == std::vector<double>{-1, 2});
    CHECK(to_vector(square(Tensor::from_values({2}, {3, -2}))) == std::vector<double>{9, 4});
    CHECK_THROWS_AS(log(Tensor::from_values({2}, {1, 0})), DomainError);
    CHECK_THROWS_AS(log(Tensor::from_values({1}, {-3})), DomainError);
}

TEST_CASE("binary ops, broadcasting and shape errors") {
    CHECK(to_vector(add(Tensor::from_values({2}, {1, 2}), Tensor::from_values({2}, {3, 4}))) ==
          std::vector<double>{4, 6});
    const auto x = random_tensor({2, 3}, 1);
    CHECK(to_vector(mul(x, Tensor::construct({2, 3}, init::Constant{1.0}))) == to_vector(x));
    CHECK(to_vector(sub(x, x)) == std::vector<double>(6, 0.0));
    CHECK_THROWS_AS(add(Tensor::construct({2, 3}), Tensor::construct({3, 2})), ShapeError);
    CHECK_THROWS_AS(mul(Tensor::construct({2, 3, 3}), Tensor::construct({2, 3, 3, 1})), ShapeError);
    CHECK_THROWS_AS(mul(Tensor::construct({1, 3, 3}), Tensor::construct({2, 3, 3})), ShapeError);
}

TEST_CASE("broadcast multiply gradient is the channel sum of upstream times the other operand") {
    const auto z = random_tensor({4, 3, 5}, 2);
    const auto phi = random_tensor({1, 3, 5}, 3, 0.1, 0.9, true);
    const auto weights = random_tensor({4, 3, 5}, 4);
    backward(sum(mul(mul(z, phi), weights)));
    // upstream of the product is `weights`
    for (int h = 0; h < 3; ++h) {
        for (int w = 0; w < 5; ++w) {
            double expected = 0.0;
            for (int c = 0; c < 4; ++c) expected += weights.at((c * 3 + h) * 5 + w) * z.at((c * 3 + h) * 5 + w);
            CHECK(phi.grad()[static_cast<std::size_t>(h * 5 + w)] == doctest::Approx(expected).epsilon(1e-12));
        }
    }
    require_gradcheck([&](const Tensor& p) { return sum(mul(mul(z, p), weights)); }, random_tensor({1, 3, 5}, 5));
    require_gradcheck([&](const Tensor& zz) { return sum(mul(mul(zz, phi.detach()), weights)); },
                      random_tensor({4, 3, 5}, 6));
}

TEST_CASE("elementwise gradients match finite differences") {
    const auto x = random_tensor({3, 4}, 11);
    const auto pos = random_tensor({3, 4}, 12, 0.2, 2.0);
    const auto other = random_tensor({3, 4}, 13);
    require_gradcheck([](const Tensor& t) { return sum(square(relu(t))); }, x);
    require_gradcheck([](const Tensor& t) { return sum(square(sigmoid(t))); }, x);
    require_gradcheck([](const Tensor& t) { return sum(square(neg(t))); }, x);
    require_gradcheck([](const Tensor& t) { return sum(log(t)); }, pos);
    require_gradcheck([&](const Tensor& t) { return sum(mul(add(t, other), sub(t, other))); }, x);
    require_gradcheck([](const Tensor& t) { return mean(add_scalar(scale(square(t), 3.0), 2.0)); }, x);
    require_gradcheck([](const Tensor& t) { return sum(pow_scalar(t, 2.5)); }, pos);
    require_gradcheck([](const Tensor& t) { return sum(square(clamp(t, -0.5, 0.5))); }, x);
}

TEST_CASE("pow_scalar edge cases") {
    const auto x = Tensor::from_values({2}, {0.5, 2.0}, true);
    backward(sum(pow_scalar(x, 0.0)));
    CHECK(to_vector(Tensor::from_values({2}, {x.grad()[0], x.grad()[1]})) == std::vector<double>{0, 0});
    CHECK_THROWS_AS(pow_scalar(Tensor::from_values({1}, {-1.0}), 2.0), DomainError);
}

TEST_CASE("matmul examples, oracle and gradients") {
    const auto eye = Tensor::from_values({2, 2}, {1, 0, 0, 1});
    const auto m = Tensor::from_values({2, 2}, {1, 2, 3, 4});
    CHECK(to_vector(matmul(eye, m)) == to_vector(m));
    CHECK(to_vector(matmul(m, Tensor::from_values({2, 2}, {1, 3, 2, 4}))) == std::vector<double>{5, 11, 11, 25});

    const auto a = random_tensor({5, 7}, 21);
    const auto b = random_tensor({7, 3}, 22);
    const auto c = matmul(a, b);
    for (int i = 0; i < 5; ++i) {
        for (int j = 0; j < 3; ++j) {
            double acc = 0.0;
            for (int k = 0; k < 7; ++k) acc += a.at(i * 7 + k) * b.at(k * 3 + j);
            CHECK(c.at(i * 3 + j) == doctest::Approx(acc).epsilon(1e-12));
        }
    }
    require_gradcheck([&](const Tensor& t) { return sum(matmul(t, b)); }, a);
    require_gradcheck([&](const Tensor& t) { return sum(square(matmul(a, t))); }, b);
    CHECK_THROWS_AS(matmul(a, a), ShapeError);
}

namespace {

// Direct six-loop cross-correlation.
std::vector<double> naive_conv(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
    const auto cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
    const auto cout = w.dim(0), k = w.dim(2);
    const auto oh = (h + 2 * pad - k) / stride + 1, ow = (wd + 2 * pad - k) / stride + 1;
    std::vector<double> out(static_cast<std::size_t>(cout * oh * ow));
    for (std::int64_t o = 0; o < cout; ++o)
        for (std::int64_t i = 0; i < oh; ++i)
            for (std::int64_t j = 0; j < ow; ++j) {
                double acc = b.defined() ? b.at(static_cast<std::size_t>(o)) : 0.0;
                for (std::int64_t c = 0; c < cin; ++c)
                    for (std::int64_t u = 0; u < k; ++u)
                        for (std::int64_t v = 0; v < k; ++v) {
                            const auto y = i * stride + u - pad, xx = j * stride + v - pad;
                            if (y < 0 || y >= h || xx < 0 || xx >= wd) continue;
                            acc += w.at(static_cast<std::size_t>(((o * cin + c) * k + u) * k + v)) *
                                   x.at(static_cast<std::size_t>((c * h + y) * wd + xx));
                        }
                out[static_cast<std::size_t>((o * oh + i) * ow + j)] = acc;
            }
    return out;
}

}  // namespace

TEST_CASE("conv2d examples") {
    const auto x = random_tensor({1, 4, 4}, 31);
    const auto one = Tensor::from_values({1, 1, 1, 1}, {1.0});
    CHECK(to_vector(conv2d(x, one, Tensor())) == to_vector(x));
    const auto ones3 = Tensor::construct({1, 3, 3}, init::Constant{1.0});
    const auto k3 = Tensor::construct({1, 1, 3, 3}, init::Constant{1.0});
    const auto y = conv2d(ones3, k3, Tensor());
    CHECK(y.shape() == Shape{1, 1, 1});
    CHECK(y.item() == 9.0);
    CHECK_THROWS_AS(conv2d(Tensor::construct({1, 2, 2}), k3, Tensor()), ShapeError);
    CHECK_THROWS_AS(conv2d(Tensor::construct({2, 5, 5}), k3, Tensor()), ShapeError);
}

TEST_CASE("conv2d matches a direct loop and finite differences") {
    for (int stride : {1, 2}) {
        for (int pad : {0, 1, 3}) {
            const auto x = random_tensor({3, 7, 6}, 40 + stride * 10 + pad);
            const auto w = random_tensor({4, 3, 3, 3}, 41);
            const auto b = random_tensor({4}, 42);
            CAPTURE(stride);
            CAPTURE(pad);
            const auto y = conv2d(x, w, b, stride, pad);
            const auto ref = naive_conv(x, w, b, stride, pad);
            REQUIRE(y.numel() == ref.size());
            for (std::size_t i = 0; i < ref.size(); ++i) CHECK(y.at(i) == doctest::Approx(ref[i]).epsilon(1e-12));
            const auto up = random_tensor(y.shape(), 43);
            require_gradcheck([&](const Tensor& t) { return sum(mul(conv2d(t, w, b, stride, pad), up)); }, x);
            require_gradcheck([&](const Tensor& t) { return sum(mul(conv2d(x, t, b, stride, pad), up)); }, w);
            require_gradcheck([&](const Tensor& t) { return sum(mul(conv2d(x, w, t, stride, pad), up)); }, b);
        }
    }
    // 7x7 kernel as used by the attention network
    const auto x = random_tensor({2, 8, 8}, 50);
    const auto w = random_tensor({1, 2, 7, 7}, 51);
    const auto b = random_tensor({1}, 52);
    require_gradcheck([&](const Tensor& t) { return sum(square(conv2d(t, w, b, 1, 3))); }, x);
    require_gradcheck([&](const Tensor& t) { return sum(square(conv2d(x, t, b, 1, 3))); }, w);
}

TEST_CASE("max_pool2d") {
    CHECK(max_pool2d(Tensor::from_values({1, 2, 2}, {1, 2, 3, 4})).item() == 4.0);
    const auto c = Tensor::construct({1, 4, 4}, init::Constant{2.0}, true);
    const auto y = max_pool2d(c);
    CHECK(to_vector(y) == std::vector<double>(4, 2.0));
    backward(sum(y));
    const std::vector<double> expected{1, 0, 1, 0, 0, 0, 0, 0, 1, 0, 1, 0, 0, 0, 0, 0};
    CHECK(std::vector<double>(c.grad().begin(), c.grad().end()) == expected);
    CHECK_THROWS_AS(max_pool2d(Tensor::construct({1, 5, 4})), ShapeError);
    require_gradcheck([](const Tensor& t) { return sum(square(max_pool2d(t))); }, random_tensor({3, 6, 4}, 60));
}

TEST_CASE("reductions") {
    CHECK(sum(Tensor::from_values({3}, {1, 2, 3})).item() == 6.0);
    CHECK(mean(Tensor::from_values({2}, {2, 4})).item() == 3.0);
    const auto x = Tensor::construct({4}, init::Constant{1.0}, true);
    backward(mean(x));
    CHECK(std::vector<double>(x.grad().begin(), x.grad().end()) == std::vector<double>(4, 0.25));
    require_gradcheck([](const Tensor& t) { return mean(square(t)); }, random_tensor({2, 5}, 70));
}

TEST_CASE("grad_reverse") {
    const auto x = Tensor::from_values({3}, {1, -2, 3}, true);
    CHECK(to_vector(grad_reverse(x)) == to_vector(x));
    backward(sum(grad_reverse(x)));
    CHECK(std::vector<double>(x.grad().begin(), x.grad().end()) == std::vector<double>{-1, -1, -1});

    const auto y = Tensor::from_values({2}, {0.3, 0.7}, true);
    backward(sum(scale(grad_reverse(y), 0.5)));
    CHECK(std::vector<double>(y.grad().begin(), y.grad().end()) == std::vector<double>{-0.5, -0.5});

    const auto z = random_tensor({5}, 80, -1, 1, true);
    const auto up = random_tensor({5}, 81);
    backward(sum(mul(grad_reverse(grad_reverse(z)), up)));
    CHECK(std::vector<double>(z.grad().begin(), z.grad().end()) == to_vector(up));
}

TEST_CASE("backward semantics") {
    const auto x = random_tensor({2, 3}, 90, -1, 1, true);
    backward(sum(x));
    CHECK(std::vector<double>(x.grad().begin(), x.grad().end()) == std::vector<double>(6, 1.0));

    const auto v = Tensor::from_values({2}, {1, 2}, true);
    const auto root = sum(square(v));
    backward(root);
    CHECK(std::vector<double>(v.grad().begin(), v.grad().end()) == std::vector<double>{2, 4});
    CHECK_THROWS_AS(backward(root), GraphError);
    CHECK_THROWS_AS(backward(square(v)), std::exception);

    // constants off the path to the root get no gradient
    const auto w = Tensor::from_values({2}, {1, 2}, true);
    const auto unused = Tensor::from_values({2}, {5, 5}, true);
    const auto constant = Tensor::from_values({2}, {3, 3});
    backward(sum(mul(w, constant)));
    CHECK_FALSE(unused.has_grad());
    CHECK_FALSE(constant.has_grad());
    CHECK(std::vector<double>(w.grad().begin(), w.grad().end()) == std::vector<double>{3, 3});
}

TEST_CASE("trace is topological and visits each node once") {
    const auto a = random_tensor({3}, 100, -1, 1, true);
    const auto b = random_tensor({3}, 101, -1, 1, true);
    const auto s = add(mul(a, b), square(a));
    const auto root = sum(mul(s, s));
    const auto g = trace(root);
    CHECK(g.root.same_node(root));
    CHECK(g.order.back().same_node(root));
    for (std::size_t i = 0; i < g.order.size(); ++i) {
        for (const auto& p : g.order[i].parents()) {
            bool earlier = false;
            for (std::size_t j = 0; j < i; ++j) earlier = earlier || g.order[j].same_node(p);
            CHECK(earlier);
        }
        for (std::size_t j = i + 1; j < g.order.size(); ++j) CHECK_FALSE(g.order[i].same_node(g.order[j]));
    }
}

TEST_CASE("no-grad guard produces constants") {
    const auto x = random_tensor({3}, 110, -1, 1, true);
    Tensor y;
    {
        NoGradGuard guard;
        CHECK_FALSE(grad_recording_enabled());
        y = sum(square(x));
    }
    CHECK(grad_recording_enabled());
    CHECK_FALSE(y.requires_grad());
    CHECK(y.parents().empty());
}

TEST_CASE("forward passes are bitwise pure") {
    const auto x = random_tensor({3, 8, 8}, 120);
    const auto w = random_tensor({5, 3, 3, 3}, 121);
    auto f = [&]() { return to_vector(max_pool2d(relu(conv2d(x, w, Tensor(), 1, 1)))); };
    const auto first = f();
    const auto second = f();
    CHECK(std::memcmp(first.data(), second.data(), first.size() * sizeof(double)) == 0);
}

TEST_CASE("structural ops") {
    const auto x = random_tensor({4, 3}, 130);
    CHECK(reshape(x, {3, 4}).shape() == Shape{3, 4});
    CHECK(to_vector(reshape(x, {12})) == to_vector(x));
    CHECK_THROWS_AS(reshape(x, {5, 2}), ShapeError);
    const auto top = slice(x, 1, 2);
    CHECK(top.shape() == Shape{2, 3});
    CHECK(top.at(0) == x.at(3));
    CHECK_THROWS_AS(slice(x, 3, 2), ShapeError);
    const auto both = concat(x, top);
    CHECK(both.shape() == Shape{6, 3});
    CHECK(both.at(12) == x.at(3));
    CHECK_THROWS_AS(concat(x, random_tensor({2, 2}, 131)), ShapeError);

    const auto up = random_tensor({6, 3}, 132);
    require_gradcheck([&](const Tensor& t) { return sum(mul(concat(t, slice(t, 1, 2)), up)); }, x);
    require_gradcheck([](const Tensor& t) { return sum(square(reshape(t, {2, 6}))); }, x);
}

TEST_CASE("channel reductions and pooling") {
    const auto x = Tensor::from_values({2, 1, 2}, {1, 5, 3, 2});
    CHECK(to_vector(channel_mean(x)) == std::vector<double>{2, 3.5});
    CHECK(to_vector(channel_max(x)) == std::vector<double>{3, 5});
    CHECK(to_vector(global_avg_pool(x)) == std::vector<double>{3, 2.5});
    CHECK(global_avg_pool(x).shape() == Shape{1, 2});

    const auto z = random_tensor({4, 3, 3}, 140);
    require_gradcheck([](const Tensor& t) { return sum(square(channel_mean(t))); }, z);
    require_gradcheck([](const Tensor& t) { return sum(square(channel_max(t))); }, z);
    require_gradcheck([](const Tensor& t) { return sum(square(global_avg_pool(t))); }, z);

    // ties route the gradient to the first channel
    const auto tied = Tensor::construct({3, 1, 1}, init::Constant{1.0}, true);
    backward(sum(channel_max(tied)));
    CHECK(std::vector<double>(tied.grad().begin(), tied.grad().end()) == std::vector<double>{1, 0, 0});
}

TEST_CASE("fused losses") {
    const std::vector<double> targets{1, 0, 1, 0};
    const auto logits = Tensor::from_values({4}, {2.0, -1.0, 0.5, 3.0});
    double expected = 0.0;
    for (std::size_t i = 0; i < 4; ++i) {
        const double p = 1.0 / (1.0 + std::exp(-logits.at(i)));
        expected -= targets[i] * std::log(p) + (1 - targets[i]) * std::log(1 - p);
    }
    CHECK(bce_with_logits(logits, targets).item() == doctest::Approx(expected / 4).epsilon(1e-12));
    require_gradcheck([&](const Tensor& t) { return bce_with_logits(t, targets); }, random_tensor({4}, 150, -3, 3));

    const std::vector<int> labels{2, -1, 0};
    const auto cls = random_tensor({3, 3}, 151, -2, 2);
    double ce = 0.0;
    for (int pos : {0, 2}) {
        double z = 0.0;
        for (int k = 0; k < 3; ++k) z += std::exp(cls.at(static_cast<std::size_t>(k * 3 + pos)));
        ce -= cls.at(static_cast<std::size_t>(labels[static_cast<std::size_t>(pos)] * 3 + pos)) - std::log(z);
    }
    CHECK(softmax_cross_entropy(cls, labels).item() == doctest::Approx(ce / 2).epsilon(1e-12));
    CHECK(softmax_cross_entropy(cls, std::vector<int>{-1, -1, -1}).item() == 0.0);
    require_gradcheck([&](const Tensor& t) { return softmax_cross_entropy(t, labels); }, cls);

    const std::vector<double> target{0.0, 0.5, -2.0};
    const std::vector<double> weights{1.0, 2.0, 0.5};
    const auto pred = Tensor::from_values({3}, {0.5, 0.5, 1.0});
    // 0.5*0.25 + 2*0 + 0.5*(3 - 0.5)
    CHECK(smooth_l1(pred, target, weights).item() == doctest::Approx(0.125 + 1.25).epsilon(1e-12));
    require_gradcheck([&](const Tensor& t) { return smooth_l1(t, target, weights); }, random_tensor({3}, 152, -2, 2));
}

TEST_CASE("finite_diff_check agrees exactly on sum") {
    const auto report = finite_diff_check([](const Tensor& t) { return sum(t); }, random_tensor({10}, 160));
    CHECK(report.passed);
    CHECK(report.checked == 10);
    CHECK(report.max_relative_error <= 1e-9);
}

TEST_CASE("finite_diff_check flags a wrong gradient") {
    // grad_reverse deliberately has the "wrong" sign for the function it computes.
    const auto report =
        finite_diff_check([](const Tensor& t) { return sum(square(grad_reverse(t))); }, random_tensor({5}, 170, 0.5, 1));
    CHECK_FALSE(report.passed);
}

TEST_CASE("finite_diff_check skips kink points") {
    // relu at exactly 0 sits on a kink for every coordinate
    GradCheckOptions options;
    const auto report =
        finite_diff_check([](const Tensor& t) { return sum(relu(t)); }, Tensor::construct({4}), options);
    CHECK(report.skipped_kinks == 4);
    CHECK_FALSE(report.passed);
}
