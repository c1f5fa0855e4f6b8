#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>

#include "ssada/tensor.hpp"

namespace ssada {

struct GradCheckOptions {
    double step = 1e-5;
    double tolerance = 1e-4;
    /// Check a deterministic random subset of this many coordinates (all when unset).
    std::optional<std::size_t> max_coordinates;
    std::uint64_t coordinate_seed = 0;
};

struct GradCheckReport {
    bool passed = false;
    double max_relative_error = 0.0;
    std::size_t worst_index = 0;
    std::size_t checked = 0;
    /// Coordinates whose +-step evaluations fell on different linear pieces of a relu,
    /// max-pool or clamp; those are kink points and are not compared.
    std::size_t skipped_kinks = 0;
};

/// Central-difference check of autodiff gradients of a scalar function.
///
/// Relative error per coordinate is |a - n| / max(|a|, |n|, 1e-3 * max_j |n_j|, 1e-12):
/// components far below the gradient's own scale are judged against that scale.
GradCheckReport finite_diff_check(const std::function<Tensor(const Tensor&)>& fn, const Tensor& x,
                                  const GradCheckOptions& options = {});

}  // namespace ssada
