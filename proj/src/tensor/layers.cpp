#include "ssada/layers.hpp"

#include <cmath>

#include "ssada/ops.hpp"

namespace ssada {

Tensor he_uniform(const Shape& shape, std::int64_t fan_in, std::uint64_t seed) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    return Tensor::construct(shape, init::Uniform{seed, -bound, bound}, true);
}

Tensor zero_parameter(const Shape& shape) { return Tensor::construct(shape, init::Zeros{}, true); }

Linear::Linear(std::int64_t in, std::int64_t out, std::uint64_t seed)
    : weight(he_uniform({in, out}, in, seed)), bias(zero_parameter({1, out})) {}

Tensor Linear::operator()(const Tensor& x) const { return add(matmul(x, weight), bias); }

void Linear::collect(const std::string& prefix, ParameterList& out) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
}

Conv::Conv(std::int64_t in, std::int64_t out, int kernel, std::uint64_t seed)
    : weight(he_uniform({out, in, kernel, kernel}, in * kernel * kernel, seed)), bias(zero_parameter({out})) {}

Tensor Conv::operator()(const Tensor& x) const {
    return conv2d(x, weight, bias, 1, static_cast<int>(weight.dim(2) / 2));
}

void Conv::collect(const std::string& prefix, ParameterList& out) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
}

}  // namespace ssada
