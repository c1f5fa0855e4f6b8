#include "ssada/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "ssada/random.hpp"

namespace ssada {

namespace {

std::vector<std::size_t> pick_coordinates(std::size_t n, const GradCheckOptions& options) {
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), std::size_t{0});
    if (!options.max_coordinates || *options.max_coordinates >= n) return all;
    SplitMix64 rng(options.coordinate_seed);
    const std::size_t k = *options.max_coordinates;
    for (std::size_t i = 0; i < k; ++i) {
        const auto j = i + static_cast<std::size_t>(rng.next() % (n - i));
        std::swap(all[i], all[j]);
    }
    all.resize(k);
    std::sort(all.begin(), all.end());
    return all;
}

struct Probe {
    double value;
    std::uint64_t signature;
};

Probe evaluate(const std::function<Tensor(const Tensor&)>& fn, const Tensor& x, std::vector<double> values) {
    NoGradGuard no_grad;
    KinkMonitor monitor;
    const Tensor probe = Tensor::from_values(x.shape(), std::move(values), false);
    const double v = fn(probe).item();
    return {v, monitor.signature()};
}

}  // namespace

GradCheckReport finite_diff_check(const std::function<Tensor(const Tensor&)>& fn, const Tensor& x,
                                  const GradCheckOptions& options) {
    const std::vector<double> base(x.values().begin(), x.values().end());
    Tensor leaf = Tensor::from_values(x.shape(), base, true);
    Tensor root = fn(leaf);
    backward(root);
    std::vector<double> analytic(base.size(), 0.0);
    if (leaf.has_grad()) std::copy(leaf.grad().begin(), leaf.grad().end(), analytic.begin());

    GradCheckReport report;
    const auto coords = pick_coordinates(base.size(), options);
    std::vector<std::pair<std::size_t, double>> numeric;
    numeric.reserve(coords.size());
    for (std::size_t i : coords) {
        auto plus = base;
        auto minus = base;
        plus[i] += options.step;
        minus[i] -= options.step;
        const Probe hi = evaluate(fn, x, std::move(plus));
        const Probe lo = evaluate(fn, x, std::move(minus));
        if (hi.signature != lo.signature) {
            ++report.skipped_kinks;
            continue;
        }
        numeric.emplace_back(i, (hi.value - lo.value) / (2.0 * options.step));
    }

    double scale = 0.0;
    for (const auto& [i, n] : numeric) scale = std::max(scale, std::abs(n));
    for (const auto& [i, n] : numeric) {
        const double a = analytic[i];
        const double denom = std::max({std::abs(a), std::abs(n), 1e-3 * scale, 1e-12});
        const double err = std::abs(a - n) / denom;
        if (err > report.max_relative_error || report.checked == 0) {
            report.max_relative_error = std::max(report.max_relative_error, err);
            if (err >= report.max_relative_error) report.worst_index = i;
        }
        ++report.checked;
    }
    report.passed = report.checked > 0 && report.max_relative_error <= options.tolerance;
    return report;
}

}  // namespace ssada
