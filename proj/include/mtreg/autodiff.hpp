#pragma once

// Define-by-run reverse-mode differentiation over dense row-major tensors.
//
// A Tensor is an immutable value. Tensors created by the factory functions are
// detached; Tape::watch() attaches a copy as a leaf, and every op applied to at
// least one attached input records a node on that input's tape. Ops on purely
// detached inputs compute values only, so a model can be evaluated off-tape
// with the same code path.

#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace mtreg::ad {

using Shape = std::vector<std::size_t>;
using NodeId = std::size_t;

class Tape;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor {
public:
    Tensor();
    Tensor(Shape shape, std::vector<double> values);

    static Tensor zeros(Shape shape);
    static Tensor filled(Shape shape, double value);
    static Tensor scalar(double value);
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_->size(); }
    std::size_t rows() const;
    std::size_t cols() const;

    std::span<const double> values() const { return *data_; }
    double operator[](std::size_t i) const { return (*data_)[i]; }
    double at(std::size_t r, std::size_t c) const;
    double item() const;

    bool attached() const { return tape_ != nullptr; }
    Tape* tape() const { return tape_; }
    std::optional<NodeId> node() const;

    // Same values, no tape participation.
    Tensor detached() const;

private:
    friend class Tape;

    Shape shape_;
    std::shared_ptr<const std::vector<double>> data_;
    Tape* tape_ = nullptr;
    NodeId node_ = 0;
};

// Gradient accumulators for the parents of a node, in parent order. A null
// entry means that parent is detached and needs no gradient.
using GradSinks = std::span<std::vector<double>* const>;
using BackwardFn = std::function<void(std::span<const double> grad_out, GradSinks parents)>;

class Gradients {
public:
    // Gradient of the loss with respect to `t`; zeros when `t` is unreachable.
    Tensor of(const Tensor& t) const;
    bool reached(const Tensor& t) const;

private:
    friend class Tape;
    const Tape* tape_ = nullptr;
    std::vector<std::optional<std::vector<double>>> grads_;
};

class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Registers a copy of `value` as a leaf of this tape.
    Tensor watch(const Tensor& value);

    // Records an op result. Detached entries of `inputs` are treated as constants.
    // Returns `value` detached when no input is attached to this tape.
    Tensor record(std::string op, Tensor value, std::span<const Tensor* const> inputs, BackwardFn backward);

    Gradients backward(const Tensor& loss) const;

    std::size_t size() const { return records_.size(); }
    const std::string& op_name(NodeId id) const { return records_.at(id).op; }
    const std::vector<std::optional<NodeId>>& parents(NodeId id) const { return records_.at(id).parents; }

private:
    struct Record {
        std::string op;
        Shape shape;
        std::vector<std::optional<NodeId>> parents;
        BackwardFn backward;
    };
    std::vector<Record> records_;
};

// Convenience wrapper around Tape::record for ops with a fixed number of inputs.
Tensor record_op(std::string op, Tensor value, std::initializer_list<const Tensor*> inputs, BackwardFn backward);

// Elementwise arithmetic. Shapes must match exactly, or one side must hold a
// single element, which is broadcast.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);

Tensor matmul(const Tensor& a, const Tensor& b);

// y = x for x >= 0, slope * x otherwise.
Tensor leaky_relu(const Tensor& x, double slope);

// Per-segment, per-channel maximum of the rows of `values`. Gradient goes to
// the first row attaining the maximum.
Tensor segment_max(const Tensor& values, std::span<const std::size_t> segments, std::size_t n_segments);

Tensor softmax(const Tensor& x, std::size_t axis);
Tensor logsumexp(const Tensor& x, std::size_t axis);

// sum |a - b| / rows(a)
Tensor l1_loss(const Tensor& a, const Tensor& b);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// [R x C] -> [R]
Tensor row_sum(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);
// Row i of the result is row indices[i] of x.
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> indices);

}  // namespace mtreg::ad
