#include "solarfuse/tensor.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <unordered_set>

namespace solarfuse {

namespace {
thread_local bool g_grad_enabled = true;

std::shared_ptr<TensorImpl> new_impl(Shape shape, std::vector<double> data, bool requires_grad) {
    if (shape_numel(shape) != data.size())
        throw ShapeError("tensor data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
    for (std::size_t d : shape)
        if (d == 0) throw ShapeError("zero-sized dimension in shape " + shape_str(shape));
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    return impl;
}
}  // namespace

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
    os << ']';
    return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    std::vector<double> data(shape_numel(shape), value);
    return Tensor(new_impl(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
    check_finite(data, "Tensor::from");
    return Tensor(new_impl(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({1}, {value}, requires_grad); }

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, bool requires_grad) {
    std::vector<double> data(shape_numel(shape));
    for (double& v : data) v = rng.normal(0.0, stddev);
    return Tensor(new_impl(std::move(shape), std::move(data), requires_grad));
}

const Shape& Tensor::shape() const { return impl_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= impl_->shape.size())
        throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(impl_->shape));
    return impl_->shape[axis];
}

std::size_t Tensor::numel() const { return impl_->data.size(); }
std::span<const double> Tensor::data() const { return impl_->data; }
std::span<double> Tensor::mutable_data() { return impl_->data; }

double Tensor::item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
    impl_->requires_grad = on;
    return *this;
}

bool Tensor::has_grad() const { return !impl_->grad.empty(); }
std::span<const double> Tensor::grad() const { return impl_->grad; }

std::span<double> Tensor::mutable_grad() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
    return impl_->grad;
}

void Tensor::zero_grad() {
    impl_->grad.clear();
    impl_->grad.shrink_to_fit();
}

const std::string& Tensor::name() const { return impl_->name; }

Tensor& Tensor::set_name(std::string name) {
    impl_->name = std::move(name);
    return *this;
}

Tensor Tensor::detach() const {
    auto impl = new_impl(impl_->shape, impl_->data, false);
    impl->name = impl_->name;
    return Tensor(impl);
}

Tensor Tensor::clone() const {
    auto impl = new_impl(impl_->shape, impl_->data, impl_->requires_grad && !impl_->creator);
    impl->name = impl_->name;
    return Tensor(impl);
}

const std::shared_ptr<OpNode>& Tensor::creator() const { return impl_->creator; }

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void check_finite(std::span<const double> values, const std::string& where) {
    // non-finite doubles have every exponent bit set; integer test vectorises
    constexpr std::uint64_t exp_mask = 0x7ff0000000000000ULL;
    std::uint64_t acc = 0;
    for (double v : values) acc |= (std::bit_cast<std::uint64_t>(v) & exp_mask) + 0x0010000000000000ULL;
    if (!(acc >> 63)) return;
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (!std::isfinite(values[i])) {
            std::ostringstream os;
            os << "non-finite value " << values[i] << " at flat index " << i << " in " << where;
            throw NumericError(os.str());
        }
    }
}

Tensor make_result(std::string op, Shape shape, std::vector<double> data,
                   std::vector<Tensor> inputs, BackwardFn backward_fn) {
    check_finite(data, op);
    bool needs_grad = false;
    if (g_grad_enabled) {
        for (const Tensor& t : inputs) needs_grad = needs_grad || t.requires_grad();
    }
    auto impl = new_impl(std::move(shape), std::move(data), needs_grad);
    if (needs_grad) {
        auto node = std::make_shared<OpNode>();
        node->op = std::move(op);
        node->inputs = std::move(inputs);
        node->backward = std::move(backward_fn);
        node->output = impl;
        impl->creator = std::move(node);
    }
    return Tensor(impl);
}

Tape Tape::record(const Tensor& root) {
    Tape tape;
    if (!root.creator()) return tape;
    // Iterative post-order DFS: inputs are emitted before the op that uses them.
    std::unordered_set<const OpNode*> visited;
    std::vector<std::pair<OpNode*, std::size_t>> stack;
    stack.emplace_back(root.creator().get(), 0);
    visited.insert(root.creator().get());
    std::vector<OpNode*> order;
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            const Tensor& in = node->inputs[next++];
            const auto& c = in.creator();
            if (c && visited.insert(c.get()).second) stack.emplace_back(c.get(), 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    tape.ops_.reserve(order.size());
    for (OpNode* n : order) {
        auto out = n->output.lock();
        tape.ops_.push_back(out->creator);
    }
    return tape;
}

void backward(const Tensor& loss) {
    if (!loss.defined()) throw GraphError("backward on undefined tensor");
    if (loss.numel() != 1)
        throw GraphError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
    if (!loss.requires_grad() || !loss.creator())
        throw GraphError("backward on a detached graph: loss has no recorded history");
    if (loss.impl()->backward_done)
        throw GraphError("backward already ran on this graph; rebuild the forward pass");

    Tape tape = Tape::record(loss);
    for (const auto& node : tape.ops()) {
        for (const Tensor& in : node->inputs) {
            if (in.requires_grad() && !in.creator() && in.has_grad())
                throw GraphError("leaf tensor '" + in.name() +
                                 "' still holds a gradient; call zero_grad before another backward pass");
        }
    }

    Tensor root = loss;
    root.mutable_grad()[0] = 1.0;
    const auto& ops = tape.ops();
    for (auto it = ops.rbegin(); it != ops.rend(); ++it) {
        auto out = (*it)->output.lock();
        Tensor out_t(out);
        if (!out_t.has_grad()) continue;
        (*it)->backward(out_t);
        if (out.get() != loss.impl()) {
            out->grad.clear();
            out->grad.shrink_to_fit();
        }
    }
    loss.impl()->backward_done = true;
}

}  // namespace solarfuse
