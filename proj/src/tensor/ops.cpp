#include "ssada/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace ssada {

namespace {

void require_rank(const Tensor& x, std::size_t rank, const char* what) {
    if (x.rank() != rank) {
        throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_string(x.shape()));
    }
}

template <typename Forward, typename Derivative>
Tensor map_unary(const char* tag, const Tensor& x, Forward f, Derivative df) {
    const auto in = x.values();
    std::vector<double> out(in.size());
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
    return make_op(tag, x.shape(), std::move(out), {x}, [x, df](std::span<const double> g, std::span<double* const> pg) {
        if (!pg[0]) return;
        const auto in = x.values();
        for (std::size_t i = 0; i < g.size(); ++i) pg[0][i] += g[i] * df(in[i]);
    });
}

bool is_broadcast(const Shape& a, const Shape& b) {
    if (a.size() != b.size() || b[0] != 1 || a[0] == 1) return false;
    return std::equal(a.begin() + 1, a.end(), b.begin() + 1);
}

double stable_sigmoid(double v) {
    if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
}

}  // namespace

Tensor elementwise_unary(UnaryOp op, const Tensor& x) {
    switch (op) {
        case UnaryOp::Relu: {
            if (KinkMonitor::active()) {
                const auto in = x.values();
                for (std::size_t i = 0; i < in.size(); ++i) {
                    if (in[i] > 0) KinkMonitor::record(i);
                }
            }
            return map_unary("relu", x, [](double v) { return v > 0 ? v : 0.0; },
                             [](double v) { return v > 0 ? 1.0 : 0.0; });
        }
        case UnaryOp::Sigmoid: {
            const auto in = x.values();
            std::vector<double> out(in.size());
            for (std::size_t i = 0; i < in.size(); ++i) out[i] = stable_sigmoid(in[i]);
            auto saved = out;
            return make_op("sigmoid", x.shape(), std::move(out), {x},
                           [saved = std::move(saved)](std::span<const double> g, std::span<double* const> pg) {
                               if (!pg[0]) return;
                               for (std::size_t i = 0; i < g.size(); ++i) pg[0][i] += g[i] * saved[i] * (1.0 - saved[i]);
                           });
        }
        case UnaryOp::Neg:
            return map_unary("neg", x, [](double v) { return -v; }, [](double) { return -1.0; });
        case UnaryOp::Log: {
            for (double v : x.values()) {
                if (!(v > 0)) throw DomainError("log of non-positive value " + std::to_string(v));
            }
            return map_unary("log", x, [](double v) { return std::log(v); }, [](double v) { return 1.0 / v; });
        }
        case UnaryOp::Square:
            return map_unary("square", x, [](double v) { return v * v; }, [](double v) { return 2.0 * v; });
    }
    throw std::invalid_argument("unknown unary op");
}

Tensor relu(const Tensor& x) { return elementwise_unary(UnaryOp::Relu, x); }
Tensor sigmoid(const Tensor& x) { return elementwise_unary(UnaryOp::Sigmoid, x); }
Tensor neg(const Tensor& x) { return elementwise_unary(UnaryOp::Neg, x); }
Tensor log(const Tensor& x) { return elementwise_unary(UnaryOp::Log, x); }
Tensor square(const Tensor& x) { return elementwise_unary(UnaryOp::Square, x); }

Tensor elementwise_binary(BinaryOp op, const Tensor& a, const Tensor& b) {
    const bool same = a.shape() == b.shape();
    if (!same && !is_broadcast(a.shape(), b.shape())) {
        throw ShapeError("elementwise op: incompatible shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));
    }
    const auto av = a.values();
    const auto bv = b.values();
    const std::size_t inner = bv.size();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) {
        const double y = bv[same ? i : i % inner];
        switch (op) {
            case BinaryOp::Add: out[i] = av[i] + y; break;
            case BinaryOp::Sub: out[i] = av[i] - y; break;
            case BinaryOp::Mul: out[i] = av[i] * y; break;
        }
    }
    const char* tag = op == BinaryOp::Add ? "add" : op == BinaryOp::Sub ? "sub" : "mul";
    return make_op(tag, a.shape(), std::move(out), {a, b},
                   [a, b, op, same, inner](std::span<const double> g, std::span<double* const> pg) {
                       const auto av = a.values();
                       const auto bv = b.values();
                       for (std::size_t i = 0; i < g.size(); ++i) {
                           const std::size_t j = same ? i : i % inner;
                           switch (op) {
                               case BinaryOp::Add:
                                   if (pg[0]) pg[0][i] += g[i];
                                   if (pg[1]) pg[1][j] += g[i];
                                   break;
                               case BinaryOp::Sub:
                                   if (pg[0]) pg[0][i] += g[i];
                                   if (pg[1]) pg[1][j] -= g[i];
                                   break;
                               case BinaryOp::Mul:
                                   if (pg[0]) pg[0][i] += g[i] * bv[j];
                                   if (pg[1]) pg[1][j] += g[i] * av[i];
                                   break;
                           }
                       }
                   });
}

Tensor add(const Tensor& a, const Tensor& b) { return elementwise_binary(BinaryOp::Add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise_binary(BinaryOp::Sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise_binary(BinaryOp::Mul, a, b); }

Tensor scale(const Tensor& x, double factor) {
    return map_unary("scale", x, [factor](double v) { return v * factor; }, [factor](double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double offset) {
    return map_unary("add_scalar", x, [offset](double v) { return v + offset; }, [](double) { return 1.0; });
}

Tensor pow_scalar(const Tensor& x, double exponent) {
    for (double v : x.values()) {
        if (v < 0) throw DomainError("pow of negative value " + std::to_string(v));
    }
    return map_unary(
        "pow", x, [exponent](double v) { return std::pow(v, exponent); },
        [exponent](double v) { return exponent == 0.0 ? 0.0 : exponent * std::pow(v, exponent - 1.0); });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
    if (!(lo <= hi)) throw std::invalid_argument("clamp requires lo <= hi");
    if (KinkMonitor::active()) {
        std::uint64_t index = 0;
        for (double v : x.values()) KinkMonitor::record(index++ * 3 + (v < lo ? 1 : v > hi ? 2 : 0));
    }
    return map_unary(
        "clamp", x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
        [lo, hi](double v) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

Tensor reduce(Reduction op, const Tensor& x) {
    const auto in = x.values();
    double total = 0.0;
    for (double v : in) total += v;
    const double n = static_cast<double>(in.size());
    const double factor = op == Reduction::Mean ? 1.0 / n : 1.0;
    return make_op(op == Reduction::Mean ? "mean" : "sum", {1}, {total * factor}, {x},
                   [factor, count = in.size()](std::span<const double> g, std::span<double* const> pg) {
                       if (!pg[0]) return;
                       for (std::size_t i = 0; i < count; ++i) pg[0][i] += g[0] * factor;
                   });
}

Tensor sum(const Tensor& x) { return reduce(Reduction::Sum, x); }
Tensor mean(const Tensor& x) { return reduce(Reduction::Mean, x); }

Tensor grad_reverse(const Tensor& x) {
    const auto in = x.values();
    return make_op("grad_reverse", x.shape(), std::vector<double>(in.begin(), in.end()), {x},
                   [](std::span<const double> g, std::span<double* const> pg) {
                       if (!pg[0]) return;
                       for (std::size_t i = 0; i < g.size(); ++i) pg[0][i] -= g[i];
                   });
}

Tensor reshape(const Tensor& x, const Shape& shape) {
    if (shape_numel(shape) != x.numel()) {
        throw ShapeError("reshape " + shape_string(x.shape()) + " -> " + shape_string(shape) +
                         " changes the element count");
    }
    const auto in = x.values();
    return make_op("reshape", shape, std::vector<double>(in.begin(), in.end()), {x},
                   [](std::span<const double> g, std::span<double* const> pg) {
                       if (!pg[0]) return;
                       for (std::size_t i = 0; i < g.size(); ++i) pg[0][i] += g[i];
                   });
}

Tensor concat(const Tensor& a, const Tensor& b) {
    if (a.rank() != b.rank() || !std::equal(a.shape().begin() + 1, a.shape().end(), b.shape().begin() + 1)) {
        throw ShapeError("concat: trailing extents differ for " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));
    }
    Shape shape = a.shape();
    shape[0] += b.dim(0);
    std::vector<double> out;
    out.reserve(a.numel() + b.numel());
    out.insert(out.end(), a.values().begin(), a.values().end());
    out.insert(out.end(), b.values().begin(), b.values().end());
    return make_op("concat", shape, std::move(out), {a, b},
                   [na = a.numel()](std::span<const double> g, std::span<double* const> pg) {
                       if (pg[0])
                           for (std::size_t i = 0; i < na; ++i) pg[0][i] += g[i];
                       if (pg[1])
                           for (std::size_t i = na; i < g.size(); ++i) pg[1][i - na] += g[i];
                   });
}

Tensor slice(const Tensor& x, std::int64_t start, std::int64_t count) {
    if (start < 0 || count < 1 || start + count > x.dim(0)) {
        throw ShapeError("slice [" + std::to_string(start) + ", " + std::to_string(start + count) +
                         ") out of range for " + shape_string(x.shape()));
    }
    Shape shape = x.shape();
    shape[0] = count;
    const std::size_t row = x.numel() / static_cast<std::size_t>(x.dim(0));
    const std::size_t offset = static_cast<std::size_t>(start) * row;
    const auto in = x.values();
    std::vector<double> out(in.begin() + offset, in.begin() + offset + static_cast<std::size_t>(count) * row);
    return make_op("slice", shape, std::move(out), {x}, [offset](std::span<const double> g, std::span<double* const> pg) {
        if (!pg[0]) return;
        for (std::size_t i = 0; i < g.size(); ++i) pg[0][offset + i] += g[i];
    });
}

Tensor channel_mean(const Tensor& x) {
    require_rank(x, 3, "channel_mean");
    const auto c = static_cast<std::size_t>(x.dim(0));
    const std::size_t plane = x.numel() / c;
    const auto in = x.values();
    std::vector<double> out(plane, 0.0);
    for (std::size_t k = 0; k < c; ++k)
        for (std::size_t p = 0; p < plane; ++p) out[p] += in[k * plane + p];
    for (auto& v : out) v /= static_cast<double>(c);
    return make_op("channel_mean", {1, x.dim(1), x.dim(2)}, std::move(out), {x},
                   [c, plane](std::span<const double> g, std::span<double* const> pg) {
                       if (!pg[0]) return;
                       const double inv = 1.0 / static_cast<double>(c);
                       for (std::size_t k = 0; k < c; ++k)
                           for (std::size_t p = 0; p < plane; ++p) pg[0][k * plane + p] += g[p] * inv;
                   });
}

Tensor channel_max(const Tensor& x) {
    require_rank(x, 3, "channel_max");
    const auto c = static_cast<std::size_t>(x.dim(0));
    const std::size_t plane = x.numel() / c;
    const auto in = x.values();
    std::vector<double> out(plane);
    std::vector<std::size_t> arg(plane, 0);
    for (std::size_t p = 0; p < plane; ++p) {
        double best = in[p];
        for (std::size_t k = 1; k < c; ++k) {
            if (in[k * plane + p] > best) {
                best = in[k * plane + p];
                arg[p] = k;
            }
        }
        out[p] = best;
    }
    if (KinkMonitor::active()) {
        for (std::size_t p = 0; p < plane; ++p) KinkMonitor::record(p * c + arg[p]);
    }
    return make_op("channel_max", {1, x.dim(1), x.dim(2)}, std::move(out), {x},
                   [arg = std::move(arg), plane](std::span<const double> g, std::span<double* const> pg) {
                       if (!pg[0]) return;
                       for (std::size_t p = 0; p < plane; ++p) pg[0][arg[p] * plane + p] += g[p];
                   });
}

Tensor global_avg_pool(const Tensor& x) {
    require_rank(x, 3, "global_avg_pool");
    const auto c = static_cast<std::size_t>(x.dim(0));
    const std::size_t plane = x.numel() / c;
    const auto in = x.values();
    std::vector<double> out(c, 0.0);
    for (std::size_t k = 0; k < c; ++k) {
        double s = 0.0;
        for (std::size_t p = 0; p < plane; ++p) s += in[k * plane + p];
        out[k] = s / static_cast<double>(plane);
    }
    return make_op("global_avg_pool", {1, x.dim(0)}, std::move(out), {x},
                   [c, plane](std::span<const double> g, std::span<double* const> pg) {
                       if (!pg[0]) return;
                       const double inv = 1.0 / static_cast<double>(plane);
                       for (std::size_t k = 0; k < c; ++k)
                           for (std::size_t p = 0; p < plane; ++p) pg[0][k * plane + p] += g[k] * inv;
                   });
}

Tensor bce_with_logits(const Tensor& logits, std::span<const double> targets) {
    const auto z = logits.values();
    if (targets.size() != z.size()) throw ShapeError("bce_with_logits: target count does not match logits");
    double total = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
        total += std::max(z[i], 0.0) - z[i] * targets[i] + std::log1p(std::exp(-std::abs(z[i])));
    }
    const double n = static_cast<double>(z.size());
    std::vector<double> t(targets.begin(), targets.end());
    return make_op("bce_with_logits", {1}, {total / n}, {logits},
                   [logits, t = std::move(t), n](std::span<const double> g, std::span<double* const> pg) {
                       if (!pg[0]) return;
                       const auto z = logits.values();
                       for (std::size_t i = 0; i < z.size(); ++i) pg[0][i] += g[0] * (stable_sigmoid(z[i]) - t[i]) / n;
                   });
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
    const auto k = static_cast<std::size_t>(logits.dim(0));
    const std::size_t positions = logits.numel() / k;
    if (labels.size() != positions) throw ShapeError("softmax_cross_entropy: one label per position required");
    const auto z = logits.values();
    std::vector<double> probs(z.size(), 0.0);
    double total = 0.0;
    std::size_t labelled = 0;
    for (std::size_t p = 0; p < positions; ++p) {
        if (labels[p] < 0) continue;
        if (static_cast<std::size_t>(labels[p]) >= k) throw std::out_of_range("class label out of range");
        double top = z[p];
        for (std::size_t c = 1; c < k; ++c) top = std::max(top, z[c * positions + p]);
        double denom = 0.0;
        for (std::size_t c = 0; c < k; ++c) denom += std::exp(z[c * positions + p] - top);
        for (std::size_t c = 0; c < k; ++c) probs[c * positions + p] = std::exp(z[c * positions + p] - top) / denom;
        total += top + std::log(denom) - z[static_cast<std::size_t>(labels[p]) * positions + p];
        ++labelled;
    }
    const double n = labelled ? static_cast<double>(labelled) : 1.0;
    std::vector<int> saved(labels.begin(), labels.end());
    return make_op("softmax_cross_entropy", {1}, {total / n}, {logits},
                   [probs = std::move(probs), saved = std::move(saved), k, positions, n](std::span<const double> g,
                                                                                         std::span<double* const> pg) {
                       if (!pg[0]) return;
                       for (std::size_t p = 0; p < positions; ++p) {
                           if (saved[p] < 0) continue;
                           for (std::size_t c = 0; c < k; ++c) {
                               const double onehot = static_cast<int>(c) == saved[p] ? 1.0 : 0.0;
                               pg[0][c * positions + p] += g[0] * (probs[c * positions + p] - onehot) / n;
                           }
                       }
                   });
}

Tensor smooth_l1(const Tensor& pred, std::span<const double> target, std::span<const double> weights) {
    const auto x = pred.values();
    if (target.size() != x.size() || weights.size() != x.size()) {
        throw ShapeError("smooth_l1: target and weight counts must match predictions");
    }
    double total = 0.0;
    std::vector<double> slope(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double d = x[i] - target[i];
        const double ad = std::abs(d);
        total += weights[i] * (ad < 1.0 ? 0.5 * d * d : ad - 0.5);
        slope[i] = weights[i] * (ad < 1.0 ? d : (d > 0 ? 1.0 : -1.0));
    }
    return make_op("smooth_l1", {1}, {total}, {pred}, [slope = std::move(slope)](std::span<const double> g, std::span<double* const> pg) {
        if (!pg[0]) return;
        for (std::size_t i = 0; i < slope.size(); ++i) pg[0][i] += g[0] * slope[i];
    });
}

}  // namespace ssada
