#include "ssada/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

#include "ssada/random.hpp"

namespace ssada {

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // storage survives clear_grad() so hot buffers are not re-faulted
    bool grad_valid = false;
    bool trainable = false;
    bool requires_grad = false;
    bool consumed = false;
    std::string op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    BackwardRule rule;

    bool is_leaf() const { return op == "leaf"; }

    std::vector<double>& grad_buffer() {
        if (!grad_valid) {
            grad.assign(data.size(), 0.0);
            grad_valid = true;
        }
        return grad;
    }

    std::span<const double> grad_view() const {
        return grad_valid ? std::span<const double>(grad) : std::span<const double>();
    }
};

}  // namespace detail

namespace {

thread_local bool g_recording = true;
thread_local KinkMonitor* g_kink_monitor = nullptr;

const detail::Node& checked(const std::shared_ptr<detail::Node>& node) {
    if (!node) throw GraphError("operation on an undefined tensor");
    return *node;
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
    if (shape.empty()) throw ShapeError("shape must have at least one axis");
    std::size_t n = 1;
    for (auto extent : shape) {
        if (extent < 1) throw ShapeError("invalid shape " + shape_string(shape) + ": extents must be >= 1");
        n *= static_cast<std::size_t>(extent);
    }
    return n;
}

std::string shape_string(const Shape& shape) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out << ',';
        out << shape[i];
    }
    out << ']';
    return out.str();
}

Tensor Tensor::construct(const Shape& shape, const Init& how, bool trainable) {
    const std::size_t n = shape_numel(shape);
    std::vector<double> values(n, 0.0);
    if (const auto* c = std::get_if<init::Constant>(&how)) {
        std::fill(values.begin(), values.end(), c->value);
    } else if (const auto* u = std::get_if<init::Uniform>(&how)) {
        if (!(u->hi > u->lo)) throw std::invalid_argument("uniform init requires hi > lo");
        SplitMix64 rng(u->seed);
        for (auto& v : values) v = u->lo + (u->hi - u->lo) * rng.next_unit();
    }
    return from_values(shape, std::move(values), trainable);
}

Tensor Tensor::from_values(const Shape& shape, std::vector<double> values, bool trainable) {
    const std::size_t n = shape_numel(shape);
    if (values.size() != n) {
        throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                         shape_string(shape));
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = shape;
    node->data = std::move(values);
    node->trainable = trainable;
    node->requires_grad = trainable;
    return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value) { return from_values({1}, {value}); }

const Shape& Tensor::shape() const { return checked(node_).shape; }

std::int64_t Tensor::dim(std::size_t axis) const {
    const auto& s = shape();
    if (axis >= s.size()) throw ShapeError("axis out of range for shape " + shape_string(s));
    return s[axis];
}

std::size_t Tensor::numel() const { return checked(node_).data.size(); }

std::span<const double> Tensor::values() const { return checked(node_).data; }

std::span<double> Tensor::mutable_values() {
    checked(node_);
    if (!node_->is_leaf()) throw GraphError("only leaf tensors can be modified in place");
    return node_->data;
}

double Tensor::item() const {
    const auto& n = checked(node_);
    if (n.data.size() != 1) throw ShapeError("item() requires a single-element tensor, got " + shape_string(n.shape));
    return n.data[0];
}

bool Tensor::trainable() const { return checked(node_).trainable; }
bool Tensor::requires_grad() const { return checked(node_).requires_grad; }
bool Tensor::has_grad() const { return checked(node_).grad_valid; }
std::span<const double> Tensor::grad() const { return checked(node_).grad_view(); }

std::span<double> Tensor::mutable_grad() {
    checked(node_);
    return node_->grad_buffer();
}

void Tensor::clear_grad() {
    checked(node_);
    node_->grad_valid = false;
}

const std::string& Tensor::op() const { return checked(node_).op; }

std::vector<Tensor> Tensor::parents() const {
    std::vector<Tensor> out;
    for (const auto& p : checked(node_).parents) out.push_back(Tensor(p));
    return out;
}

Tensor Tensor::detach() const {
    const auto& n = checked(node_);
    return from_values(n.shape, n.data, false);
}

Tensor make_op(std::string tag, Shape shape, std::vector<double> values, std::vector<Tensor> parents,
               BackwardRule rule) {
    if (shape_numel(shape) != values.size()) {
        throw ShapeError(tag + ": produced " + std::to_string(values.size()) + " values for shape " +
                         shape_string(shape));
    }
    bool needs_grad = false;
    for (const auto& p : parents) {
        const auto& n = checked(p.node_);
        if (n.consumed && !n.is_leaf() && n.requires_grad) {
            throw GraphError(tag + ": input belongs to a graph that was already back-propagated");
        }
        needs_grad = needs_grad || n.requires_grad;
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->data = std::move(values);
    node->op = std::move(tag);
    if (needs_grad && g_recording) {
        node->requires_grad = true;
        node->rule = std::move(rule);
        node->parents.reserve(parents.size());
        for (auto& p : parents) node->parents.push_back(std::move(p.node_));
    }
    return Tensor(std::move(node));
}

Graph trace(const Tensor& root) {
    checked(root.node_);
    Graph graph;
    graph.root = root;
    std::unordered_set<const detail::Node*> visited;
    // Iterative post-order DFS; graphs are deep enough to make recursion risky.
    std::vector<std::pair<std::shared_ptr<detail::Node>, std::size_t>> stack;
    stack.emplace_back(root.node_, 0);
    visited.insert(root.node_.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            auto parent = node->parents[next++];
            if (visited.insert(parent.get()).second) stack.emplace_back(std::move(parent), 0);
        } else {
            graph.order.push_back(Tensor(node));
            stack.pop_back();
        }
    }
    return graph;
}

void backward(const Tensor& root) {
    auto& root_node = const_cast<detail::Node&>(checked(root.node_));
    if (root_node.data.size() != 1) {
        throw GraphError("backward requires a scalar root, got shape " + shape_string(root_node.shape));
    }
    if (root_node.consumed) throw GraphError("backward already ran on this graph; rebuild the forward pass");

    Graph graph = trace(root);
    root_node.grad_buffer()[0] += 1.0;

    std::vector<double*> parent_grads;
    for (auto it = graph.order.rbegin(); it != graph.order.rend(); ++it) {
        detail::Node& node = *it->node_;
        if (!node.rule || !node.grad_valid) continue;
        parent_grads.assign(node.parents.size(), nullptr);
        for (std::size_t i = 0; i < node.parents.size(); ++i) {
            auto& parent = *node.parents[i];
            if (parent.requires_grad) parent_grads[i] = parent.grad_buffer().data();
        }
        node.rule(node.grad, parent_grads);
    }

    for (auto& t : graph.order) {
        detail::Node& node = *t.node_;
        if (node.is_leaf()) continue;
        node.rule = nullptr;
        node.parents.clear();
        node.consumed = true;
    }
    root_node.consumed = true;
}

NoGradGuard::NoGradGuard() : previous_(g_recording) { g_recording = false; }
NoGradGuard::~NoGradGuard() { g_recording = previous_; }

bool grad_recording_enabled() noexcept { return g_recording; }

KinkMonitor::KinkMonitor() : previous_(g_kink_monitor) { g_kink_monitor = this; }
KinkMonitor::~KinkMonitor() { g_kink_monitor = previous_; }

bool KinkMonitor::active() noexcept { return g_kink_monitor != nullptr; }

void KinkMonitor::record(std::uint64_t token) noexcept {
    if (!g_kink_monitor) return;
    auto& sig = g_kink_monitor->signature_;
    sig = (sig ^ token) * 0x100000001b3ULL;
    sig ^= sig >> 29;
}

}  // namespace ssada
