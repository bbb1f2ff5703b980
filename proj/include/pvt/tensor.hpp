// Copyright 2026 The pvt Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense tensors with a reverse-mode tape.
//
// Storage is always double precision. A tensor tagged f32 holds only values
// that are exactly representable as float: every primitive rounds its f32
// output before returning, so f32 results are deterministic and serialize
// losslessly. Gradients are accumulated in double regardless of tag.
//
// Broadcasting is limited to a suffix: in add/sub/mul the second operand may
// have a shape equal to the trailing dimensions of the first.

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "pvt/error.hpp"

namespace pvt {

using Shape = std::vector<int64_t>;

enum class DType : uint8_t { f32 = 0, f64 = 1 };

std::string shape_str(const Shape& shape);
int64_t numel_of(const Shape& shape);

class Tape;

namespace detail {

struct TensorImpl {
    Shape shape;
    DType dtype = DType::f32;
    std::vector<double> data;
    bool requires_grad = false;
    uint64_t id = 0;
    // Set when the tensor was produced by a recorded primitive.
    const Tape* tape = nullptr;
    int64_t node = -1;
};

}  // namespace detail

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, DType dtype = DType::f32);
    static Tensor full(Shape shape, double value, DType dtype = DType::f32);
    static Tensor from(Shape shape, std::vector<double> values, DType dtype = DType::f32);
    static Tensor scalar(double value, DType dtype = DType::f32);
    static Tensor eye(int64_t n, DType dtype = DType::f32);

    bool defined() const noexcept { return impl_ != nullptr; }
    const Shape& shape() const;
    int64_t rank() const { return static_cast<int64_t>(shape().size()); }
    int64_t dim(int64_t axis) const;
    int64_t numel() const;
    DType dtype() const;

    std::span<const double> data() const;
    double item() const;
    double operator[](int64_t flat_index) const { return data()[static_cast<size_t>(flat_index)]; }

    bool requires_grad() const;
    // Marks a leaf as a parameter. Only valid on tensors not produced by a
    // recorded primitive.
    Tensor& set_requires_grad(bool flag);
    uint64_t id() const;
    bool recorded() const;

    // Leaf mutation for optimizers and loaders. Values are rounded to the
    // tensor's dtype.
    void assign(std::span<const double> values);

    // Copy with no tape history and requires_grad=false.
    Tensor detach() const;
    // Same values converted to another dtype (rounding if narrowing).
    Tensor to(DType dtype) const;

    bool same_storage(const Tensor& other) const noexcept { return impl_ == other.impl_; }
    // Bit-level equality of shape, dtype and every value.
    bool bit_equal(const Tensor& other) const;

    std::shared_ptr<detail::TensorImpl> impl() const { return impl_; }
    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

private:
    std::shared_ptr<detail::TensorImpl> impl_;
};

double round_to(DType dtype, double value) noexcept;

// ---------------------------------------------------------------------------
// Tape

struct TapeNode {
    using Backward = std::function<void(const TapeNode& node, std::span<const double> grad_out,
                                        std::span<std::vector<double>*> grad_in)>;
    std::string op;
    std::vector<std::shared_ptr<detail::TensorImpl>> inputs;
    std::shared_ptr<detail::TensorImpl> output;
    Backward backward;
};

class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    size_t size() const noexcept { return nodes_.size(); }
    const TapeNode& node(size_t i) const { return nodes_.at(i); }

    void record(TapeNode node);

private:
    std::vector<TapeNode> nodes_;
};

// Makes a tape active on the current thread for the lifetime of the scope.
class TapeScope {
public:
    explicit TapeScope(Tape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* previous_;
};

Tape* active_tape() noexcept;

using GradMap = std::unordered_map<uint64_t, Tensor>;

// Reverse pass from a scalar loss. Every requires_grad leaf that appears on
// the loss's tape gets an entry; leaves the loss does not depend on get zeros.
GradMap backward(const Tensor& loss);

// Gradient for a parameter, zeros when absent from the map.
Tensor grad_of(const GradMap& grads, const Tensor& param);

// ---------------------------------------------------------------------------
// Primitives

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<int64_t>& order);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);

Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
// Tanh approximation with cubic coefficient 0.044715.
Tensor gelu(const Tensor& a);

// Over the last axis.
Tensor softmax(const Tensor& a);
Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

// Rows of `table` ([vocab, dim]) for each id; result shape leading + [dim].
Tensor embed_lookup(const Tensor& table, std::span<const int64_t> ids, Shape leading);

Tensor concat(const std::vector<Tensor>& parts, int64_t axis);
Tensor slice(const Tensor& a, int64_t axis, int64_t begin, int64_t end);

// Mean negative log-likelihood over rows of [n, classes] logits.
Tensor cross_entropy(const Tensor& logits, std::span<const int64_t> targets);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// Row gather/scatter on [n, d] matrices.
Tensor gather_rows(const Tensor& a, std::span<const int64_t> rows);
Tensor scatter_rows(const Tensor& a, std::span<const int64_t> rows, const Tensor& values);

// Column selection over the last axis.
Tensor gather_cols(const Tensor& a, std::span<const int64_t> cols);
// out[..., j] = mask[j] ? source[..., j] : base[..., j]
Tensor where_cols(const Tensor& base, const Tensor& source, const std::vector<bool>& mask);

// Square matrix inverse (partial-pivot Gauss-Jordan).
Tensor inverse(const Tensor& a);

}  // namespace pvt
