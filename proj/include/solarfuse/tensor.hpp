#pragma once

// Dense float64 tensors with reverse-mode differentiation.
//
// A Tensor is a shared handle. Every operation that consumes a tensor with
// requires_grad (while gradients are enabled on the calling thread) records an
// OpNode holding its inputs and a backward rule. backward(loss) collects the
// reachable nodes into a Tape in topological order and replays the rules in
// reverse. Tensors and their graphs belong to one thread at a time.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "solarfuse/rng.hpp"

namespace solarfuse {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class GraphError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

struct TensorImpl;
struct OpNode;

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor randn(Shape shape, Rng& rng, double stddev, bool requires_grad = false);

    bool defined() const { return static_cast<bool>(impl_); }
    const Shape& shape() const;
    std::size_t dim(std::size_t axis) const;
    std::size_t rank() const { return shape().size(); }
    std::size_t numel() const;

    std::span<const double> data() const;
    // Mutable access bypasses the tape; use only on leaves (parameters, inputs).
    std::span<double> mutable_data();
    double item() const;

    bool requires_grad() const;
    Tensor& set_requires_grad(bool on);
    bool has_grad() const;
    std::span<const double> grad() const;
    // Lazily allocates a zero gradient buffer.
    std::span<double> mutable_grad();
    void zero_grad();

    const std::string& name() const;
    Tensor& set_name(std::string name);

    // Same storage values, no history.
    Tensor detach() const;
    Tensor clone() const;

    const std::shared_ptr<OpNode>& creator() const;
    TensorImpl* impl() const { return impl_.get(); }
    bool same_as(const Tensor& other) const { return impl_ == other.impl_; }

private:
    std::shared_ptr<TensorImpl> impl_;
};

using BackwardFn = std::function<void(const Tensor& output)>;

struct OpNode {
    std::string op;
    std::vector<Tensor> inputs;
    BackwardFn backward;
    std::weak_ptr<TensorImpl> output;
};

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
    bool backward_done = false;
    std::shared_ptr<OpNode> creator;
    std::string name;
};

// Gradient recording switch for the calling thread.
bool grad_enabled();
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

// Builds the op result and, when any input requires grad, records the node.
// Throws NumericError if `data` holds a non-finite value.
Tensor make_result(std::string op, Shape shape, std::vector<double> data,
                   std::vector<Tensor> inputs, BackwardFn backward);

void check_finite(std::span<const double> values, const std::string& where);

// Ordered record of the operations reachable from a root tensor.
class Tape {
public:
    static Tape record(const Tensor& root);
    const std::vector<std::shared_ptr<OpNode>>& ops() const { return ops_; }
    std::size_t size() const { return ops_.size(); }

private:
    std::vector<std::shared_ptr<OpNode>> ops_;
};

// Populates gradients of every requires_grad tensor reachable from `loss`.
// Errors: non-scalar loss, loss without history, a second call on the same
// graph, or a leaf that still carries a gradient from an earlier pass.
void backward(const Tensor& loss);

// ---- core operations -------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor square(const Tensor& a);
Tensor abs(const Tensor& a);

// [m,k] x [k,n]
Tensor matmul(const Tensor& a, const Tensor& b);
// [..., m, k] x [..., k, n]; with trans_b, b is [..., n, k]. Leading dims must match.
Tensor bmm(const Tensor& a, const Tensor& b, bool trans_b = false);
// x [..., in] * w [in, out] + bias [out]. bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);

Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length);
// x [G, N, ...], index [G, K] into N -> [G, K, ...]
Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& index, std::size_t k);

Tensor sum(const Tensor& a, std::size_t axis);
Tensor mean(const Tensor& a, std::size_t axis);
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);

Tensor softmax(const Tensor& x, std::size_t axis);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
// tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
Tensor gelu(const Tensor& x);
Tensor dropout(const Tensor& x, double p, bool training, Rng& rng);

Tensor mse_loss(const Tensor& pred, const Tensor& target);
Tensor mae_loss(const Tensor& pred, const Tensor& target);

}  // namespace solarfuse
