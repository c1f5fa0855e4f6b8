#pragma once

// Reverse-mode automatic differentiation over dense float64 tensors.
//
// A Tensor is a cheap handle to a graph node. Leaves are created through
// Tensor::construct / Tensor::from_values; every differentiable operation in
// ops.hpp returns a new node that remembers its parents and a backward rule.
// backward(root) sweeps the recorded graph once in reverse topological order.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace ssada {

using Shape = std::vector<std::int64_t>;

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class DomainError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

class GraphError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Number of elements; throws ShapeError on an empty shape or an extent < 1.
std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace init {
struct Zeros {};
struct Constant {
    double value = 0.0;
};
/// Uniform on [lo, hi), reproducible from seed on every platform.
struct Uniform {
    std::uint64_t seed = 0;
    double lo = 0.0;
    double hi = 1.0;
};
}  // namespace init

using Init = std::variant<init::Zeros, init::Constant, init::Uniform>;

namespace detail {
struct Node;
}

class Tensor;
struct Graph;
using BackwardRule = std::function<void(std::span<const double> upstream, std::span<double* const> parent_grads)>;

class Tensor {
public:
    Tensor() = default;

    static Tensor construct(const Shape& shape, const Init& how = init::Zeros{}, bool trainable = false);
    static Tensor from_values(const Shape& shape, std::vector<double> values, bool trainable = false);
    static Tensor scalar(double value);

    bool defined() const noexcept { return node_ != nullptr; }

    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::int64_t dim(std::size_t axis) const;
    std::size_t numel() const;

    std::span<const double> values() const;
    /// Writable view of a leaf's values (optimizer updates, checkpoint loading).
    std::span<double> mutable_values();
    double item() const;
    double at(std::size_t flat_index) const { return values()[flat_index]; }

    bool trainable() const;
    bool requires_grad() const;

    bool has_grad() const;
    /// Empty span when no gradient has been accumulated.
    std::span<const double> grad() const;
    std::span<double> mutable_grad();
    void clear_grad();

    /// Operation tag ("leaf" for leaves).
    const std::string& op() const;
    std::vector<Tensor> parents() const;

    /// Value copy with no graph linkage and no gradient.
    Tensor detach() const;

    bool same_node(const Tensor& other) const noexcept { return node_ == other.node_; }

private:
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

    std::shared_ptr<detail::Node> node_;

    friend Tensor make_op(std::string, Shape, std::vector<double>, std::vector<Tensor>, BackwardRule);
    friend Graph trace(const Tensor& root);
    friend void backward(const Tensor& root);
};

// A BackwardRule receives the upstream gradient of the node and one pointer per
// parent to that parent's gradient accumulator (nullptr when the parent does not
// require a gradient). Rules must add into the accumulators, never overwrite.

/// Records a new graph node. If no parent requires a gradient, or gradient
/// recording is disabled by a NoGradGuard, the result is a constant.
Tensor make_op(std::string tag, Shape shape, std::vector<double> values, std::vector<Tensor> parents,
               BackwardRule rule);

/// Reachable nodes of a root in topological order (parents before children).
struct Graph {
    std::vector<Tensor> order;
    Tensor root;
};

Graph trace(const Tensor& root);

/// Accumulates d(root)/d(node) into every node on a path to the root. The graph
/// is consumed: a second call, or building new operations on consumed
/// intermediates, throws GraphError.
void backward(const Tensor& root);

/// Disables graph recording on this thread for its lifetime (evaluation, finite differences).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_recording_enabled() noexcept;

/// Piecewise-linear operations (relu, max-pool, channel max, clamp) fold their
/// active branch into this thread-local signature while a KinkMonitor is alive.
/// Two evaluations with equal signatures took the same linear piece.
class KinkMonitor {
public:
    KinkMonitor();
    ~KinkMonitor();
    KinkMonitor(const KinkMonitor&) = delete;
    KinkMonitor& operator=(const KinkMonitor&) = delete;

    std::uint64_t signature() const noexcept { return signature_; }
    void reset() noexcept { signature_ = 0xcbf29ce484222325ULL; }

    static bool active() noexcept;
    static void record(std::uint64_t token) noexcept;

private:
    std::uint64_t signature_ = 0xcbf29ce484222325ULL;
    KinkMonitor* previous_;
};

}  // namespace ssada
