#include "elat/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace elat {

namespace {
thread_local bool g_grad_mode = true;
}

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor() : impl_(std::make_shared<TensorImpl>()) {}

Tensor::Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
    auto impl = std::make_shared<TensorImpl>();
    impl->data.assign(shape_numel(shape), value);
    impl->shape = std::move(shape);
    return Tensor(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::vector<double> values) {
    if (shape_numel(shape) != values.size()) {
        throw ShapeError("Tensor::from: shape " + shape_str(shape) + " needs " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(values.size()));
    }
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(values);
    return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value) { return from({}, {value}); }

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= impl_->shape.size()) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_str(impl_->shape));
    }
    return impl_->shape[axis];
}

std::span<double> Tensor::mutable_data() {
    if (impl_->node) throw AutodiffError("mutable_data() on a non-leaf tensor");
    return impl_->data;
}

double Tensor::item() const {
    if (impl_->data.size() != 1) {
        throw ShapeError("item() on tensor of shape " + shape_str(impl_->shape));
    }
    return impl_->data[0];
}

Tensor& Tensor::set_requires_grad(bool on) {
    if (impl_->node && !on) throw AutodiffError("cannot clear requires_grad on a non-leaf");
    impl_->requires_grad = on;
    return *this;
}

Tensor Tensor::detach() const { return from(impl_->shape, impl_->data); }

Tensor Tensor::clone() const {
    Tensor t = from(impl_->shape, impl_->data);
    t.impl_->requires_grad = impl_->requires_grad && is_leaf();
    return t;
}

Tape::Tape(const Tensor& root) {
    // Iterative post-order DFS; reversing the post-order gives consumers
    // before producers.
    std::unordered_set<const TensorImpl*> seen;
    std::vector<std::pair<TensorImpl*, std::size_t>> stack;
    TensorImpl* r = root.impl().get();
    if (!r->requires_grad) return;
    stack.emplace_back(r, 0);
    seen.insert(r);
    while (!stack.empty()) {
        auto& [cur, next] = stack.back();
        if (cur->node && next < cur->node->inputs.size()) {
            TensorImpl* in = cur->node->inputs[next++].get();
            if (in->requires_grad && seen.insert(in).second) stack.emplace_back(in, 0);
            continue;
        }
        order_.push_back(cur);
        stack.pop_back();
    }
    std::reverse(order_.begin(), order_.end());
}

namespace {

// Runs the reverse sweep. `want` restricts which nodes need gradients; leaves
// outside it get none and ops whose inputs are all outside it are skipped.
std::unordered_map<const TensorImpl*, std::vector<double>> run_backward(
    const Tensor& loss, const std::unordered_set<const TensorImpl*>* targets) {
    if (loss.numel() != 1) {
        throw AutodiffError("backward: loss must be a scalar, got shape " +
                            shape_str(loss.shape()));
    }
    if (!loss.requires_grad()) {
        throw AutodiffError("backward: loss is detached from any tensor that requires grad");
    }
    Tape tape(loss);
    auto order = tape.order();

    // needed[i]: node i lies on a path to a target (or every node when no targets).
    std::unordered_map<const TensorImpl*, bool> needed;
    needed.reserve(order.size());
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl* t = *it;
        bool need = targets == nullptr || targets->count(t) > 0;
        if (!need && t->node) {
            for (const auto& in : t->node->inputs) {
                auto f = needed.find(in.get());
                if (f != needed.end() && f->second) {
                    need = true;
                    break;
                }
            }
        }
        needed[t] = need;
    }

    std::unordered_map<const TensorImpl*, std::vector<double>> grads;
    grads[order.front()] = std::vector<double>(1, 1.0);
    std::vector<std::vector<double>*> slots;
    for (TensorImpl* t : order) {
        if (!t->node) continue;
        auto g = grads.find(t);
        if (g == grads.end()) continue;
        // References into the map survive rehashing; iterators do not.
        const std::vector<double>& grad_out = g->second;
        const auto& inputs = t->node->inputs;
        slots.assign(inputs.size(), nullptr);
        bool any = false;
        for (std::size_t i = 0; i < inputs.size(); ++i) {
            TensorImpl* in = inputs[i].get();
            if (!in->requires_grad || !needed[in]) continue;
            auto& buf = grads[in];
            if (buf.empty()) buf.assign(in->data.size(), 0.0);
            slots[i] = &buf;
            any = true;
        }
        if (any) t->node->backward(grad_out, slots);
        // Interior gradients are no longer needed once propagated.
        if (targets == nullptr || targets->count(t) == 0) grads.erase(t);
    }
    return grads;
}

}  // namespace

void Tensor::backward() const {
    auto grads = run_backward(*this, nullptr);
    Tape tape(*this);
    for (TensorImpl* t : tape.order()) {
        if (t->node) continue;
        auto g = grads.find(t);
        if (g == grads.end()) continue;
        if (t->grad.empty()) {
            t->grad = std::move(g->second);
        } else {
            for (std::size_t i = 0; i < t->grad.size(); ++i) t->grad[i] += g->second[i];
        }
    }
}

std::vector<Tensor> grad(const Tensor& loss, std::span<const Tensor> wrt) {
    std::unordered_set<const TensorImpl*> targets;
    for (const auto& w : wrt) {
        if (!w.requires_grad()) throw AutodiffError("grad: target does not require grad");
        targets.insert(w.impl().get());
    }
    auto grads = run_backward(loss, &targets);
    std::vector<Tensor> out;
    out.reserve(wrt.size());
    for (const auto& w : wrt) {
        auto g = grads.find(w.impl().get());
        if (g == grads.end()) {
            out.push_back(Tensor::zeros(w.shape()));
        } else {
            out.push_back(Tensor::from(w.shape(), g->second));
        }
    }
    return out;
}

Tensor grad(const Tensor& loss, const Tensor& wrt) {
    return grad(loss, std::span<const Tensor>(&wrt, 1)).front();
}

NoGradGuard::NoGradGuard() : previous_(g_grad_mode) { g_grad_mode = false; }
NoGradGuard::~NoGradGuard() { g_grad_mode = previous_; }

bool grad_mode_enabled() { return g_grad_mode; }

}  // namespace elat
