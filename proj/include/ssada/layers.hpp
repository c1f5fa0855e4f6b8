#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ssada/tensor.hpp"

namespace ssada {

struct NamedParameter {
    std::string name;
    Tensor tensor;
};

using ParameterList = std::vector<NamedParameter>;

/// Trainable tensor drawn from U(-sqrt(6/fan_in), sqrt(6/fan_in)).
Tensor he_uniform(const Shape& shape, std::int64_t fan_in, std::uint64_t seed);
Tensor zero_parameter(const Shape& shape);

/// Fully connected layer on row vectors: [N,in] -> [N,out].
struct Linear {
    Tensor weight;  // [in, out]
    Tensor bias;    // [1, out]

    Linear() = default;
    Linear(std::int64_t in, std::int64_t out, std::uint64_t seed);
    Tensor operator()(const Tensor& x) const;
    void collect(const std::string& prefix, ParameterList& out) const;
};

/// Convolution with square odd kernel and "same" padding.
struct Conv {
    Tensor weight;  // [out, in, k, k]
    Tensor bias;    // [out]

    Conv() = default;
    Conv(std::int64_t in, std::int64_t out, int kernel, std::uint64_t seed);
    Tensor operator()(const Tensor& x) const;
    void collect(const std::string& prefix, ParameterList& out) const;
};

}  // namespace ssada
