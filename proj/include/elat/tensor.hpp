#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace elat {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Raised when operand shapes do not conform to an op's contraction or
/// broadcasting rule.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Raised when an op leaves its numeric domain (log of a non-positive value,
/// overflow in exp, non-finite inputs).
class DomainError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

/// Raised by backward() / grad() on misuse (non-scalar loss, no graph).
class AutodiffError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

struct TensorImpl;

// Backward closure: receives the upstream gradient of the node output and one
// gradient buffer per input. A null buffer means that input does not need a
// gradient and may be skipped.
using BackwardFn =
    std::function<void(std::span<const double> grad_out, std::span<std::vector<double>*> grad_in)>;

struct Node {
    const char* op = "";
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    BackwardFn backward;
};

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;
    std::shared_ptr<Node> node;  // null for leaves
};

/// Dense row-major float64 tensor. Copies share storage (handle semantics),
/// like a framework tensor; use clone() for a deep copy.
class Tensor {
public:
    Tensor();
    explicit Tensor(std::shared_ptr<TensorImpl> impl);

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor from(Shape shape, std::vector<double> values);
    static Tensor scalar(double value);

    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const { return impl_->data.size(); }

    std::span<const double> data() const { return impl_->data; }
    /// Writable view; only valid on leaves that are not part of a recorded graph.
    std::span<double> mutable_data();
    double item() const;
    double operator[](std::size_t i) const { return impl_->data[i]; }

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool on);
    bool is_leaf() const { return impl_->node == nullptr; }

    bool has_grad() const { return !impl_->grad.empty(); }
    std::span<const double> grad() const { return impl_->grad; }
    void zero_grad() { impl_->grad.clear(); }

    /// Same values, no graph history, requires_grad off.
    Tensor detach() const;
    Tensor clone() const;

    /// Populates .grad() of every requires_grad leaf reachable from this
    /// scalar. Gradients accumulate across calls.
    void backward() const;

    const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

private:
    std::shared_ptr<TensorImpl> impl_;
};

/// Reverse topological order of the graph rooted at `root`: every node appears
/// after all nodes that consume it, so a single sweep visits each op once.
class Tape {
public:
    explicit Tape(const Tensor& root);

    std::span<TensorImpl* const> order() const { return order_; }
    std::size_t size() const { return order_.size(); }

private:
    std::vector<TensorImpl*> order_;  // root first
};

/// Gradients of scalar `loss` with respect to each tensor in `wrt`. Does not
/// touch the .grad() buffers of any leaf.
std::vector<Tensor> grad(const Tensor& loss, std::span<const Tensor> wrt);
Tensor grad(const Tensor& loss, const Tensor& wrt);

/// While alive on a thread, ops on that thread do not record graph nodes.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_mode_enabled();

}  // namespace elat
