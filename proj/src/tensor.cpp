// Copyright 2026 The pvt Authors
// SPDX-License-Identifier: Apache-2.0

#include "pvt/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <numeric>
#include <sstream>

namespace pvt {

std::string_view to_string(ErrorCode code) noexcept {
    switch (code) {
        case ErrorCode::ShapeMismatch: return "ShapeMismatch";
        case ErrorCode::DTypeMismatch: return "DTypeMismatch";
        case ErrorCode::NotScalar: return "NotScalar";
        case ErrorCode::NoTape: return "NoTape";
        case ErrorCode::InvalidSchema: return "InvalidSchema";
        case ErrorCode::SequenceTooLong: return "SequenceTooLong";
        case ErrorCode::UnknownSite: return "UnknownSite";
        case ErrorCode::EmptyDataset: return "EmptyDataset";
        case ErrorCode::DimMismatch: return "DimMismatch";
        case ErrorCode::SubspaceOutOfRange: return "SubspaceOutOfRange";
        case ErrorCode::DuplicateName: return "DuplicateName";
        case ErrorCode::UnknownKind: return "UnknownKind";
        case ErrorCode::MalformedDocument: return "MalformedDocument";
        case ErrorCode::SerialOrderViolation: return "SerialOrderViolation";
        case ErrorCode::IndexShapeMismatch: return "IndexShapeMismatch";
        case ErrorCode::MissingSource: return "MissingSource";
        case ErrorCode::LocationOutOfRange: return "LocationOutOfRange";
        case ErrorCode::TimeStepOutOfRange: return "TimeStepOutOfRange";
        case ErrorCode::IoFailure: return "IoFailure";
        case ErrorCode::ChecksumMismatch: return "ChecksumMismatch";
        case ErrorCode::SchemaDigestMismatch: return "SchemaDigestMismatch";
        case ErrorCode::VersionUnsupported: return "VersionUnsupported";
        case ErrorCode::UnknownToken: return "UnknownToken";
    }
    return "Unknown";
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "," : "") << shape[i];
    }
    os << ']';
    return os.str();
}

int64_t numel_of(const Shape& shape) {
    int64_t n = 1;
    for (int64_t d : shape) {
        n *= d;
    }
    return n;
}

double round_to(DType dtype, double value) noexcept {
    return dtype == DType::f32 ? static_cast<double>(static_cast<float>(value)) : value;
}

namespace {

using detail::TensorImpl;
using ImplPtr = std::shared_ptr<TensorImpl>;

std::atomic<uint64_t> g_next_id{1};
thread_local Tape* t_active_tape = nullptr;

ImplPtr new_impl(Shape shape, DType dtype) {
    auto impl = std::make_shared<TensorImpl>();
    for (int64_t d : shape) {
        if (d < 0) {
            fail(ErrorCode::ShapeMismatch, "negative extent in " + shape_str(shape));
        }
    }
    impl->data.assign(static_cast<size_t>(numel_of(shape)), 0.0);
    impl->shape = std::move(shape);
    impl->dtype = dtype;
    impl->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
    return impl;
}

void check_dtypes(std::initializer_list<const Tensor*> ts) {
    const Tensor* first = nullptr;
    for (const Tensor* t : ts) {
        if (!t->defined()) {
            fail(ErrorCode::ShapeMismatch, "undefined tensor operand");
        }
        if (first == nullptr) {
            first = t;
        } else if (t->dtype() != first->dtype()) {
            fail(ErrorCode::DTypeMismatch, "operands have different dtypes");
        }
    }
}

// Rounds an output to its dtype and, when a tape is active and any input is
// tracked, records the node.
Tensor finish(const char* op, ImplPtr out, std::vector<ImplPtr> inputs, TapeNode::Backward bw) {
    if (out->dtype == DType::f32) {
        for (double& v : out->data) {
            v = static_cast<double>(static_cast<float>(v));
        }
    }
    Tape* tape = t_active_tape;
    const bool tracked =
        std::any_of(inputs.begin(), inputs.end(), [](const ImplPtr& p) { return p->requires_grad; });
    if (tape != nullptr && tracked) {
        out->requires_grad = true;
        out->tape = tape;
        out->node = static_cast<int64_t>(tape->size());
        tape->record(TapeNode{op, std::move(inputs), out, std::move(bw)});
    }
    return Tensor(std::move(out));
}

// Size of the suffix-broadcast operand, validated against `a`.
int64_t suffix_numel(const Shape& a, const Shape& b, const char* op) {
    if (b.size() > a.size() || !std::equal(b.rbegin(), b.rend(), a.rbegin())) {
        fail(ErrorCode::ShapeMismatch,
             std::string(op) + ": " + shape_str(b) + " is not a suffix of " + shape_str(a));
    }
    return numel_of(b);
}

template <typename Fwd, typename Deriv>
Tensor unary(const char* op, const Tensor& a, Fwd fwd, Deriv deriv) {
    check_dtypes({&a});
    auto out = new_impl(a.shape(), a.dtype());
    const auto x = a.data();
    for (size_t i = 0; i < x.size(); ++i) {
        out->data[i] = fwd(x[i]);
    }
    return finish(op, out, {a.impl()},
                  [deriv](const TapeNode& n, std::span<const double> g, std::span<std::vector<double>*> gin) {
                      if (gin[0] == nullptr) {
                          return;
                      }
                      const auto& x = n.inputs[0]->data;
                      const auto& y = n.output->data;
                      auto& gx = *gin[0];
                      for (size_t i = 0; i < g.size(); ++i) {
                          gx[i] += g[i] * deriv(x[i], y[i]);
                      }
                  });
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

void gemm_acc(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        double* crow = c + i * n;
        const double* arow = a + i * k;
        for (int64_t p = 0; p < k; ++p) {
            const double av = arow[p];
            const double* brow = b + p * n;
            for (int64_t j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, DType dtype) {
    return Tensor(new_impl(std::move(shape), dtype));
}

Tensor Tensor::full(Shape shape, double value, DType dtype) {
    auto impl = new_impl(std::move(shape), dtype);
    std::fill(impl->data.begin(), impl->data.end(), round_to(dtype, value));
    return Tensor(impl);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, DType dtype) {
    if (numel_of(shape) != static_cast<int64_t>(values.size())) {
        fail(ErrorCode::ShapeMismatch, "shape " + shape_str(shape) + " does not hold " +
                                           std::to_string(values.size()) + " values");
    }
    auto impl = new_impl(std::move(shape), dtype);
    for (size_t i = 0; i < values.size(); ++i) {
        impl->data[i] = round_to(dtype, values[i]);
    }
    return Tensor(impl);
}

Tensor Tensor::scalar(double value, DType dtype) {
    return from({}, {value}, dtype);
}

Tensor Tensor::eye(int64_t n, DType dtype) {
    auto impl = new_impl({n, n}, dtype);
    for (int64_t i = 0; i < n; ++i) {
        impl->data[static_cast<size_t>(i * n + i)] = 1.0;
    }
    return Tensor(impl);
}

const Shape& Tensor::shape() const {
    if (!impl_) {
        fail(ErrorCode::ShapeMismatch, "undefined tensor");
    }
    return impl_->shape;
}

int64_t Tensor::dim(int64_t axis) const {
    const auto& s = shape();
    const int64_t r = static_cast<int64_t>(s.size());
    if (axis < 0) {
        axis += r;
    }
    if (axis < 0 || axis >= r) {
        fail(ErrorCode::ShapeMismatch, "axis out of range for " + shape_str(s));
    }
    return s[static_cast<size_t>(axis)];
}

int64_t Tensor::numel() const { return numel_of(shape()); }
DType Tensor::dtype() const { return impl_ ? impl_->dtype : DType::f32; }

std::span<const double> Tensor::data() const {
    if (!impl_) {
        return {};
    }
    return impl_->data;
}

double Tensor::item() const {
    if (numel() != 1) {
        fail(ErrorCode::NotScalar, "item() on tensor of shape " + shape_str(shape()));
    }
    return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
    if (!impl_) {
        fail(ErrorCode::ShapeMismatch, "undefined tensor");
    }
    if (impl_->node >= 0) {
        fail(ErrorCode::ShapeMismatch, "requires_grad can only be set on leaves");
    }
    impl_->requires_grad = flag;
    return *this;
}

uint64_t Tensor::id() const { return impl_ ? impl_->id : 0; }
bool Tensor::recorded() const { return impl_ && impl_->node >= 0; }

void Tensor::assign(std::span<const double> values) {
    if (!impl_ || values.size() != impl_->data.size()) {
        fail(ErrorCode::ShapeMismatch, "assign: size mismatch");
    }
    for (size_t i = 0; i < values.size(); ++i) {
        impl_->data[i] = round_to(impl_->dtype, values[i]);
    }
}

Tensor Tensor::detach() const {
    auto impl = new_impl(shape(), dtype());
    impl->data = impl_->data;
    return Tensor(impl);
}

Tensor Tensor::to(DType target) const {
    auto impl = new_impl(shape(), target);
    for (size_t i = 0; i < impl->data.size(); ++i) {
        impl->data[i] = round_to(target, impl_->data[i]);
    }
    return Tensor(impl);
}

bool Tensor::bit_equal(const Tensor& other) const {
    if (!defined() || !other.defined()) {
        return defined() == other.defined();
    }
    if (shape() != other.shape() || dtype() != other.dtype()) {
        return false;
    }
    const auto a = data();
    const auto b = other.data();
    for (size_t i = 0; i < a.size(); ++i) {
        if (std::bit_cast<uint64_t>(a[i]) != std::bit_cast<uint64_t>(b[i])) {
            return false;
        }
    }
    return true;
}

// ---------------------------------------------------------------------------
// Tape

void Tape::record(TapeNode node) { nodes_.push_back(std::move(node)); }

TapeScope::TapeScope(Tape& tape) : previous_(t_active_tape) { t_active_tape = &tape; }
TapeScope::~TapeScope() { t_active_tape = previous_; }

Tape* active_tape() noexcept { return t_active_tape; }

GradMap backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        fail(ErrorCode::NotScalar, "loss must have exactly one element");
    }
    const auto root = loss.impl();
    if (root->tape == nullptr || root->node < 0) {
        fail(ErrorCode::NoTape, "loss was not produced on an active tape");
    }
    const Tape& tape = *root->tape;

    std::unordered_map<const TensorImpl*, std::vector<double>> grads;
    grads[root.get()] = {1.0};

    for (int64_t i = root->node; i >= 0; --i) {
        const TapeNode& n = tape.node(static_cast<size_t>(i));
        auto it = grads.find(n.output.get());
        if (it == grads.end()) {
            continue;
        }
        std::vector<double> gout = std::move(it->second);
        grads.erase(it);
        std::vector<std::vector<double>*> gin(n.inputs.size(), nullptr);
        for (size_t k = 0; k < n.inputs.size(); ++k) {
            const auto& in = n.inputs[k];
            if (!in->requires_grad) {
                continue;
            }
            auto& slot = grads[in.get()];
            if (slot.empty()) {
                slot.assign(in->data.size(), 0.0);
            }
            gin[k] = &slot;
        }
        n.backward(n, gout, gin);
    }

    GradMap result;
    for (size_t i = 0; i <= static_cast<size_t>(root->node); ++i) {
        for (const auto& in : tape.node(i).inputs) {
            const bool leaf = in->tape != &tape;
            if (!leaf || !in->requires_grad || result.contains(in->id)) {
                continue;
            }
            auto g = new_impl(in->shape, DType::f64);
            if (auto it = grads.find(in.get()); it != grads.end()) {
                g->data = std::move(it->second);
            }
            result.emplace(in->id, Tensor(g));
        }
    }
    return result;
}

Tensor grad_of(const GradMap& grads, const Tensor& param) {
    if (auto it = grads.find(param.id()); it != grads.end()) {
        return it->second;
    }
    return Tensor::zeros(param.shape(), DType::f64);
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
    check_dtypes({&a, &b});
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() < 2 || sb.size() < 2) {
        fail(ErrorCode::ShapeMismatch, "matmul needs rank >= 2 operands");
    }
    const int64_t m = sa[sa.size() - 2];
    const int64_t k = sa.back();
    const int64_t kb = sb[sb.size() - 2];
    const int64_t n = sb.back();
    if (k != kb) {
        fail(ErrorCode::ShapeMismatch, "matmul inner dims " + shape_str(sa) + " x " + shape_str(sb));
    }
    const bool shared = sb.size() == 2;
    if (!shared && (sb.size() != sa.size() || !std::equal(sa.begin(), sa.end() - 2, sb.begin()))) {
        fail(ErrorCode::ShapeMismatch, "matmul batch dims " + shape_str(sa) + " x " + shape_str(sb));
    }
    const int64_t batches = numel_of(Shape(sa.begin(), sa.end() - 2));
    Shape so(sa.begin(), sa.end() - 2);
    so.push_back(m);
    so.push_back(n);
    auto out = new_impl(so, a.dtype());
    const double* A = a.data().data();
    const double* B = b.data().data();
    if (shared) {
        gemm_acc(A, B, out->data.data(), batches * m, k, n);
    } else {
        for (int64_t t = 0; t < batches; ++t) {
            gemm_acc(A + t * m * k, B + t * k * n, out->data.data() + t * m * n, m, k, n);
        }
    }
    return finish("matmul", out, {a.impl(), b.impl()},
                  [m, k, n, batches, shared](const TapeNode& nd, std::span<const double> g,
                                             std::span<std::vector<double>*> gin) {
                      const double* A = nd.inputs[0]->data.data();
                      const double* B = nd.inputs[1]->data.data();
                      for (int64_t t = 0; t < batches; ++t) {
                          const double* G = g.data() + t * m * n;
                          const double* At = A + t * m * k;
                          const double* Bt = shared ? B : B + t * k * n;
                          if (gin[0] != nullptr) {
                              double* GA = gin[0]->data() + t * m * k;
                              for (int64_t i = 0; i < m; ++i) {
                                  for (int64_t p = 0; p < k; ++p) {
                                      double s = 0.0;
                                      const double* grow = G + i * n;
                                      const double* brow = Bt + p * n;
                                      for (int64_t j = 0; j < n; ++j) {
                                          s += grow[j] * brow[j];
                                      }
                                      GA[i * k + p] += s;
                                  }
                              }
                          }
                          if (gin[1] != nullptr) {
                              double* GB = gin[1]->data() + (shared ? 0 : t * k * n);
                              for (int64_t i = 0; i < m; ++i) {
                                  const double* grow = G + i * n;
                                  for (int64_t p = 0; p < k; ++p) {
                                      const double av = At[i * k + p];
                                      double* gbrow = GB + p * n;
                                      for (int64_t j = 0; j < n; ++j) {
                                          gbrow[j] += av * grow[j];
                                      }
                                  }
                              }
                          }
                      }
                  });
}

Tensor transpose(const Tensor& a) {
    check_dtypes({&a});
    const Shape& s = a.shape();
    if (s.size() < 2) {
        fail(ErrorCode::ShapeMismatch, "transpose needs rank >= 2");
    }
    std::vector<int64_t> order(s.size());
    std::iota(order.begin(), order.end(), 0);
    std::swap(order[order.size() - 1], order[order.size() - 2]);
    return permute(a, order);
}

Tensor reshape(const Tensor& a, Shape shape) {
    check_dtypes({&a});
    if (numel_of(shape) != a.numel()) {
        fail(ErrorCode::ShapeMismatch, "reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
    }
    auto out = new_impl(std::move(shape), a.dtype());
    out->data = a.impl()->data;
    return finish("reshape", out, {a.impl()},
                  [](const TapeNode&, std::span<const double> g, std::span<std::vector<double>*> gin) {
                      if (gin[0] == nullptr) {
                          return;
                      }
                      auto& gx = *gin[0];
                      for (size_t i = 0; i < g.size(); ++i) {
                          gx[i] += g[i];
                      }
                  });
}

namespace {

// For each output flat index, the input flat index under a permutation.
std::vector<int64_t> permute_map(const Shape& in, const std::vector<int64_t>& order) {
    const size_t r = in.size();
    std::vector<int64_t> in_stride(r, 1);
    for (size_t i = r; i-- > 1;) {
        in_stride[i - 1] = in_stride[i] * in[i];
    }
    Shape out(r);
    std::vector<int64_t> stride(r);
    for (size_t i = 0; i < r; ++i) {
        out[i] = in[static_cast<size_t>(order[i])];
        stride[i] = in_stride[static_cast<size_t>(order[i])];
    }
    const int64_t total = numel_of(in);
    std::vector<int64_t> map(static_cast<size_t>(total));
    std::vector<int64_t> idx(r, 0);
    int64_t src = 0;
    for (int64_t f = 0; f < total; ++f) {
        map[static_cast<size_t>(f)] = src;
        for (size_t d = r; d-- > 0;) {
            if (++idx[d] < out[d]) {
                src += stride[d];
                break;
            }
            src -= stride[d] * (out[d] - 1);
            idx[d] = 0;
        }
    }
    return map;
}

}  // namespace

Tensor permute(const Tensor& a, const std::vector<int64_t>& order) {
    check_dtypes({&a});
    const Shape& s = a.shape();
    if (order.size() != s.size()) {
        fail(ErrorCode::ShapeMismatch, "permute order has wrong length");
    }
    std::vector<bool> seen(s.size(), false);
    Shape so(s.size());
    for (size_t i = 0; i < order.size(); ++i) {
        const int64_t o = order[i];
        if (o < 0 || o >= static_cast<int64_t>(s.size()) || seen[static_cast<size_t>(o)]) {
            fail(ErrorCode::ShapeMismatch, "permute order is not a permutation");
        }
        seen[static_cast<size_t>(o)] = true;
        so[i] = s[static_cast<size_t>(o)];
    }
    auto map = std::make_shared<std::vector<int64_t>>(permute_map(s, order));
    auto out = new_impl(so, a.dtype());
    const auto x = a.data();
    for (size_t f = 0; f < map->size(); ++f) {
        out->data[f] = x[static_cast<size_t>((*map)[f])];
    }
    return finish("permute", out, {a.impl()},
                  [map](const TapeNode&, std::span<const double> g, std::span<std::vector<double>*> gin) {
                      if (gin[0] == nullptr) {
                          return;
                      }
                      auto& gx = *gin[0];
                      for (size_t f = 0; f < g.size(); ++f) {
                          gx[static_cast<size_t>((*map)[f])] += g[f];
                      }
                  });
}

// ---------------------------------------------------------------------------
// Elementwise

namespace {

enum class Arith { add, sub, mul };

Tensor binary(const char* op, Arith kind, const Tensor& a, const Tensor& b) {
    check_dtypes({&a, &b});
    const int64_t nb = suffix_numel(a.shape(), b.shape(), op);
    auto out = new_impl(a.shape(), a.dtype());
    const auto x = a.data();
    const auto y = b.data();
    const size_t total = x.size();
    const size_t nbs = static_cast<size_t>(nb);
    for (size_t base = 0; base < total; base += nbs) {
        for (size_t j = 0; j < nbs; ++j) {
            const double u = x[base + j];
            const double v = y[j];
            out->data[base + j] = kind == Arith::add ? u + v : kind == Arith::sub ? u - v : u * v;
        }
    }
    return finish(op, out, {a.impl(), b.impl()},
                  [kind, nbs](const TapeNode& n, std::span<const double> g, std::span<std::vector<double>*> gin) {
                      const auto& x = n.inputs[0]->data;
                      const auto& y = n.inputs[1]->data;
                      for (size_t base = 0; base < g.size(); base += nbs) {
                          for (size_t j = 0; j < nbs; ++j) {
                              const double gv = g[base + j];
                              if (gin[0] != nullptr) {
                                  (*gin[0])[base + j] += kind == Arith::mul ? gv * y[j] : gv;
                              }
                              if (gin[1] != nullptr) {
                                  (*gin[1])[j] += kind == Arith::mul ? gv * x[base + j]
                                                  : kind == Arith::sub ? -gv
                                                                       : gv;
                              }
                          }
                      }
                  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary("add", Arith::add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary("sub", Arith::sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary("mul", Arith::mul, a, b); }

Tensor scale(const Tensor& a, double factor) {
    return unary(
        "scale", a, [factor](double x) { return x * factor; },
        [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double value) {
    return unary(
        "add_scalar", a, [value](double x) { return x + value; }, [](double, double) { return 1.0; });
}

Tensor tanh(const Tensor& a) {
    return unary(
        "tanh", a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& a) {
    return unary(
        "sigmoid", a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor gelu(const Tensor& a) {
    return unary(
        "gelu", a,
        [](double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x))); },
        [](double x, double) {
            const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
            return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
        });
}

// ---------------------------------------------------------------------------
// Normalization

Tensor softmax(const Tensor& a) {
    check_dtypes({&a});
    if (a.rank() < 1) {
        fail(ErrorCode::ShapeMismatch, "softmax needs rank >= 1");
    }
    const int64_t d = a.shape().back();
    const int64_t rows = d == 0 ? 0 : a.numel() / d;
    auto out = new_impl(a.shape(), a.dtype());
    const double* x = a.data().data();
    for (int64_t r = 0; r < rows; ++r) {
        const double* xr = x + r * d;
        double* yr = out->data.data() + r * d;
        const double mx = *std::max_element(xr, xr + d);
        double s = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            yr[j] = std::exp(xr[j] - mx);
            s += yr[j];
        }
        for (int64_t j = 0; j < d; ++j) {
            yr[j] /= s;
        }
    }
    return finish("softmax", out, {a.impl()},
                  [rows, d](const TapeNode& n, std::span<const double> g, std::span<std::vector<double>*> gin) {
                      if (gin[0] == nullptr) {
                          return;
                      }
                      const double* y = n.output->data.data();
                      double* gx = gin[0]->data();
                      for (int64_t r = 0; r < rows; ++r) {
                          double dot = 0.0;
                          for (int64_t j = 0; j < d; ++j) {
                              dot += g[static_cast<size_t>(r * d + j)] * y[r * d + j];
                          }
                          for (int64_t j = 0; j < d; ++j) {
                              gx[r * d + j] += y[r * d + j] * (g[static_cast<size_t>(r * d + j)] - dot);
                          }
                      }
                  });
}

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    check_dtypes({&x, &gain, &bias});
    const int64_t d = x.shape().empty() ? 0 : x.shape().back();
    if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
        fail(ErrorCode::ShapeMismatch, "layernorm gain/bias must be [" + std::to_string(d) + "]");
    }
    const int64_t rows = d == 0 ? 0 : x.numel() / d;
    auto out = new_impl(x.shape(), x.dtype());
    auto xhat = std::make_shared<std::vector<double>>(x.data().size());
    auto rstd = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
    const double* xv = x.data().data();
    const double* gv = gain.data().data();
    const double* bv = bias.data().data();
    for (int64_t r = 0; r < rows; ++r) {
        const double* xr = xv + r * d;
        double mu = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            mu += xr[j];
        }
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            var += (xr[j] - mu) * (xr[j] - mu);
        }
        var /= static_cast<double>(d);
        const double rs = 1.0 / std::sqrt(var + eps);
        (*rstd)[static_cast<size_t>(r)] = rs;
        for (int64_t j = 0; j < d; ++j) {
            const double h = (xr[j] - mu) * rs;
            (*xhat)[static_cast<size_t>(r * d + j)] = h;
            out->data[static_cast<size_t>(r * d + j)] = h * gv[j] + bv[j];
        }
    }
    return finish("layernorm", out, {x.impl(), gain.impl(), bias.impl()},
                  [rows, d, xhat, rstd](const TapeNode& n, std::span<const double> g,
                                        std::span<std::vector<double>*> gin) {
                      const double* gv = n.inputs[1]->data.data();
                      const double dd = static_cast<double>(d);
                      for (int64_t r = 0; r < rows; ++r) {
                          const size_t o = static_cast<size_t>(r * d);
                          double m1 = 0.0;
                          double m2 = 0.0;
                          for (int64_t j = 0; j < d; ++j) {
                              const double gh = g[o + j] * gv[j];
                              m1 += gh;
                              m2 += gh * (*xhat)[o + j];
                          }
                          m1 /= dd;
                          m2 /= dd;
                          const double rs = (*rstd)[static_cast<size_t>(r)];
                          for (int64_t j = 0; j < d; ++j) {
                              const double h = (*xhat)[o + j];
                              if (gin[0] != nullptr) {
                                  (*gin[0])[o + j] += rs * (g[o + j] * gv[j] - m1 - h * m2);
                              }
                              if (gin[1] != nullptr) {
                                  (*gin[1])[static_cast<size_t>(j)] += g[o + j] * h;
                              }
                              if (gin[2] != nullptr) {
                                  (*gin[2])[static_cast<size_t>(j)] += g[o + j];
                              }
                          }
                      }
                  });
}

// ---------------------------------------------------------------------------
// Indexing

Tensor embed_lookup(const Tensor& table, std::span<const int64_t> ids, Shape leading) {
    check_dtypes({&table});
    if (table.rank() != 2) {
        fail(ErrorCode::ShapeMismatch, "embedding table must be rank 2");
    }
    if (numel_of(leading) != static_cast<int64_t>(ids.size())) {
        fail(ErrorCode::ShapeMismatch, "embed_lookup: ids do not fill " + shape_str(leading));
    }
    const int64_t v = table.dim(0);
    const int64_t d = table.dim(1);
    for (int64_t id : ids) {
        if (id < 0 || id >= v) {
            fail(ErrorCode::ShapeMismatch, "token id " + std::to_string(id) + " outside vocab");
        }
    }
    Shape so = std::move(leading);
    so.push_back(d);
    auto out = new_impl(so, table.dtype());
    const double* t = table.data().data();
    for (size_t i = 0; i < ids.size(); ++i) {
        std::copy_n(t + ids[i] * d, d, out->data.data() + static_cast<int64_t>(i) * d);
    }
    auto saved = std::make_shared<std::vector<int64_t>>(ids.begin(), ids.end());
    return finish("embed_lookup", out, {table.impl()},
                  [saved, d](const TapeNode&, std::span<const double> g, std::span<std::vector<double>*> gin) {
                      if (gin[0] == nullptr) {
                          return;
                      }
                      double* gt = gin[0]->data();
                      for (size_t i = 0; i < saved->size(); ++i) {
                          const double* gr = g.data() + static_cast<int64_t>(i) * d;
                          double* row = gt + (*saved)[i] * d;
                          for (int64_t j = 0; j < d; ++j) {
                              row[j] += gr[j];
                          }
                      }
                  });
}

Tensor concat(const std::vector<Tensor>& parts, int64_t axis) {
    if (parts.empty()) {
        fail(ErrorCode::ShapeMismatch, "concat of nothing");
    }
    const Shape& s0 = parts[0].shape();
    const int64_t r = static_cast<int64_t>(s0.size());
    if (axis < 0) {
        axis += r;
    }
    if (axis < 0 || axis >= r) {
        fail(ErrorCode::ShapeMismatch, "concat axis out of range");
    }
    const size_t ax = static_cast<size_t>(axis);
    int64_t total = 0;
    std::vector<int64_t> extents;
    std::vector<ImplPtr> inputs;
    for (const Tensor& p : parts) {
        check_dtypes({&parts[0], &p});
        const Shape& s = p.shape();
        if (s.size() != s0.size()) {
            fail(ErrorCode::ShapeMismatch, "concat rank mismatch");
        }
        for (size_t i = 0; i < s.size(); ++i) {
            if (i != ax && s[i] != s0[i]) {
                fail(ErrorCode::ShapeMismatch, "concat " + shape_str(s) + " vs " + shape_str(s0));
            }
        }
        extents.push_back(s[ax]);
        total += s[ax];
        inputs.push_back(p.impl());
    }
    const int64_t outer = numel_of(Shape(s0.begin(), s0.begin() + axis));
    const int64_t inner = numel_of(Shape(s0.begin() + axis + 1, s0.end()));
    Shape so = s0;
    so[ax] = total;
    auto out = new_impl(so, parts[0].dtype());
    int64_t offset = 0;
    for (size_t k = 0; k < parts.size(); ++k) {
        const int64_t chunk = extents[k] * inner;
        const double* src = parts[k].data().data();
        for (int64_t o = 0; o < outer; ++o) {
            std::copy_n(src + o * chunk, chunk, out->data.data() + o * total * inner + offset);
        }
        offset += chunk;
    }
    return finish("concat", out, std::move(inputs),
                  [extents, outer, inner, total](const TapeNode&, std::span<const double> g,
                                                 std::span<std::vector<double>*> gin) {
                      int64_t offset = 0;
                      for (size_t k = 0; k < extents.size(); ++k) {
                          const int64_t chunk = extents[k] * inner;
                          if (gin[k] != nullptr) {
                              for (int64_t o = 0; o < outer; ++o) {
                                  const double* gs = g.data() + o * total * inner + offset;
                                  double* gd = gin[k]->data() + o * chunk;
                                  for (int64_t j = 0; j < chunk; ++j) {
                                      gd[j] += gs[j];
                                  }
                              }
                          }
                          offset += chunk;
                      }
                  });
}

Tensor slice(const Tensor& a, int64_t axis, int64_t begin, int64_t end) {
    check_dtypes({&a});
    const Shape& s = a.shape();
    const int64_t r = static_cast<int64_t>(s.size());
    if (axis < 0) {
        axis += r;
    }
    if (axis < 0 || axis >= r) {
        fail(ErrorCode::ShapeMismatch, "slice axis out of range");
    }
    const size_t ax = static_cast<size_t>(axis);
    if (begin < 0 || end < begin || end > s[ax]) {
        fail(ErrorCode::ShapeMismatch, "slice [" + std::to_string(begin) + "," + std::to_string(end) +
                                           ") outside " + shape_str(s));
    }
    const int64_t outer = numel_of(Shape(s.begin(), s.begin() + axis));
    const int64_t inner = numel_of(Shape(s.begin() + axis + 1, s.end()));
    const int64_t full = s[ax] * inner;
    const int64_t chunk = (end - begin) * inner;
    const int64_t off = begin * inner;
    Shape so = s;
    so[ax] = end - begin;
    auto out = new_impl(so, a.dtype());
    const double* src = a.data().data();
    for (int64_t o = 0; o < outer; ++o) {
        std::copy_n(src + o * full + off, chunk, out->data.data() + o * chunk);
    }
    return finish("slice", out, {a.impl()},
                  [outer, full, chunk, off](const TapeNode&, std::span<const double> g,
                                            std::span<std::vector<double>*> gin) {
                      if (gin[0] == nullptr) {
                          return;
                      }
                      for (int64_t o = 0; o < outer; ++o) {
                          double* gd = gin[0]->data() + o * full + off;
                          const double* gs = g.data() + o * chunk;
                          for (int64_t j = 0; j < chunk; ++j) {
                              gd[j] += gs[j];
                          }
                      }
                  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int64_t> targets) {
    check_dtypes({&logits});
    if (logits.rank() != 2 || logits.dim(0) != static_cast<int64_t>(targets.size())) {
        fail(ErrorCode::ShapeMismatch, "cross_entropy wants [n, classes] logits and n targets");
    }
    const int64_t n = logits.dim(0);
    const int64_t c = logits.dim(1);
    if (n == 0) {
        fail(ErrorCode::ShapeMismatch, "cross_entropy over zero rows");
    }
    for (int64_t t : targets) {
        if (t < 0 || t >= c) {
            fail(ErrorCode::ShapeMismatch, "target class out of range");
        }
    }
    auto probs = std::make_shared<std::vector<double>>(static_cast<size_t>(n * c));
    const double* x = logits.data().data();
    double total = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const double* xr = x + i * c;
        const double mx = *std::max_element(xr, xr + c);
        double s = 0.0;
        for (int64_t j = 0; j < c; ++j) {
            s += std::exp(xr[j] - mx);
        }
        const double lse = mx + std::log(s);
        total += lse - xr[targets[static_cast<size_t>(i)]];
        for (int64_t j = 0; j < c; ++j) {
            (*probs)[static_cast<size_t>(i * c + j)] = std::exp(xr[j] - lse);
        }
    }
    auto out = new_impl({}, logits.dtype());
    out->data[0] = total / static_cast<double>(n);
    auto saved = std::make_shared<std::vector<int64_t>>(targets.begin(), targets.end());
    return finish("cross_entropy", out, {logits.impl()},
                  [probs, saved, n, c](const TapeNode&, std::span<const double> g,
                                       std::span<std::vector<double>*> gin) {
                      if (gin[0] == nullptr) {
                          return;
                      }
                      const double w = g[0] / static_cast<double>(n);
                      double* gx = gin[0]->data();
                      for (int64_t i = 0; i < n; ++i) {
                          for (int64_t j = 0; j < c; ++j) {
                              const double onehot = (*saved)[static_cast<size_t>(i)] == j ? 1.0 : 0.0;
                              gx[i * c + j] += w * ((*probs)[static_cast<size_t>(i * c + j)] - onehot);
                          }
                      }
                  });
}

Tensor sum(const Tensor& a) {
    check_dtypes({&a});
    auto out = new_impl({}, a.dtype());
    double s = 0.0;
    for (double v : a.data()) {
        s += v;
    }
    out->data[0] = s;
    return finish("sum", out, {a.impl()},
                  [](const TapeNode&, std::span<const double> g, std::span<std::vector<double>*> gin) {
                      if (gin[0] == nullptr) {
                          return;
                      }
                      for (double& v : *gin[0]) {
                          v += g[0];
                      }
                  });
}

Tensor mean(const Tensor& a) {
    const int64_t n = a.numel();
    if (n == 0) {
        fail(ErrorCode::ShapeMismatch, "mean of empty tensor");
    }
    return scale(sum(a), 1.0 / static_cast<double>(n));
}

namespace {

void require_matrix(const Tensor& a, const char* op) {
    if (a.rank() != 2) {
        fail(ErrorCode::ShapeMismatch, std::string(op) + " expects a rank-2 tensor, got " + shape_str(a.shape()));
    }
}

void check_rows(std::span<const int64_t> rows, int64_t n, const char* op) {
    for (int64_t r : rows) {
        if (r < 0 || r >= n) {
            fail(ErrorCode::ShapeMismatch, std::string(op) + ": row " + std::to_string(r) + " out of range");
        }
    }
}

}  // namespace

Tensor gather_rows(const Tensor& a, std::span<const int64_t> rows) {
    check_dtypes({&a});
    require_matrix(a, "gather_rows");
    const int64_t n = a.dim(0);
    const int64_t d = a.dim(1);
    check_rows(rows, n, "gather_rows");
    auto out = new_impl({static_cast<int64_t>(rows.size()), d}, a.dtype());
    const double* x = a.data().data();
    for (size_t i = 0; i < rows.size(); ++i) {
        std::copy_n(x + rows[i] * d, d, out->data.data() + static_cast<int64_t>(i) * d);
    }
    auto saved = std::make_shared<std::vector<int64_t>>(rows.begin(), rows.end());
    return finish("gather_rows", out, {a.impl()},
                  [saved, d](const TapeNode&, std::span<const double> g, std::span<std::vector<double>*> gin) {
                      if (gin[0] == nullptr) {
                          return;
                      }
                      for (size_t i = 0; i < saved->size(); ++i) {
                          double* dst = gin[0]->data() + (*saved)[i] * d;
                          const double* src = g.data() + static_cast<int64_t>(i) * d;
                          for (int64_t j = 0; j < d; ++j) {
                              dst[j] += src[j];
                          }
                      }
                  });
}

Tensor scatter_rows(const Tensor& a, std::span<const int64_t> rows, const Tensor& values) {
    check_dtypes({&a, &values});
    require_matrix(a, "scatter_rows");
    require_matrix(values, "scatter_rows");
    const int64_t n = a.dim(0);
    const int64_t d = a.dim(1);
    if (values.dim(0) != static_cast<int64_t>(rows.size()) || values.dim(1) != d) {
        fail(ErrorCode::ShapeMismatch, "scatter_rows: values " + shape_str(values.shape()) + " for " +
                                           std::to_string(rows.size()) + " rows of width " + std::to_string(d));
    }
    check_rows(rows, n, "scatter_rows");
    // Later writes win; winner[r] = index into `rows` or -1.
    auto winner = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(n), -1);
    for (size_t i = 0; i < rows.size(); ++i) {
        (*winner)[static_cast<size_t>(rows[i])] = static_cast<int64_t>(i);
    }
    auto out = new_impl(a.shape(), a.dtype());
    out->data = a.impl()->data;
    const double* v = values.data().data();
    for (int64_t r = 0; r < n; ++r) {
        if (const int64_t w = (*winner)[static_cast<size_t>(r)]; w >= 0) {
            std::copy_n(v + w * d, d, out->data.data() + r * d);
        }
    }
    return finish("scatter_rows", out, {a.impl(), values.impl()},
                  [winner, n, d](const TapeNode&, std::span<const double> g, std::span<std::vector<double>*> gin) {
                      for (int64_t r = 0; r < n; ++r) {
                          const int64_t w = (*winner)[static_cast<size_t>(r)];
                          const double* src = g.data() + r * d;
                          std::vector<double>* dst = w >= 0 ? gin[1] : gin[0];
                          if (dst == nullptr) {
                              continue;
                          }
                          double* row = dst->data() + (w >= 0 ? w : r) * d;
                          for (int64_t j = 0; j < d; ++j) {
                              row[j] += src[j];
                          }
                      }
                  });
}

Tensor gather_cols(const Tensor& a, std::span<const int64_t> cols) {
    check_dtypes({&a});
    if (a.rank() < 1) {
        fail(ErrorCode::ShapeMismatch, "gather_cols needs rank >= 1");
    }
    const int64_t d = a.shape().back();
    for (int64_t c : cols) {
        if (c < 0 || c >= d) {
            fail(ErrorCode::ShapeMismatch, "gather_cols: column " + std::to_string(c) + " out of range");
        }
    }
    const int64_t rows = d == 0 ? 0 : a.numel() / d;
    const int64_t k = static_cast<int64_t>(cols.size());
    Shape so = a.shape();
    so.back() = k;
    auto out = new_impl(so, a.dtype());
    const double* x = a.data().data();
    for (int64_t r = 0; r < rows; ++r) {
        for (int64_t j = 0; j < k; ++j) {
            out->data[static_cast<size_t>(r * k + j)] = x[r * d + cols[static_cast<size_t>(j)]];
        }
    }
    auto saved = std::make_shared<std::vector<int64_t>>(cols.begin(), cols.end());
    return finish("gather_cols", out, {a.impl()},
                  [saved, rows, d, k](const TapeNode&, std::span<const double> g, std::span<std::vector<double>*> gin) {
                      if (gin[0] == nullptr) {
                          return;
                      }
                      for (int64_t r = 0; r < rows; ++r) {
                          for (int64_t j = 0; j < k; ++j) {
                              (*gin[0])[static_cast<size_t>(r * d + (*saved)[static_cast<size_t>(j)])] +=
                                  g[static_cast<size_t>(r * k + j)];
                          }
                      }
                  });
}

Tensor where_cols(const Tensor& base, const Tensor& source, const std::vector<bool>& mask) {
    check_dtypes({&base, &source});
    if (base.shape() != source.shape()) {
        fail(ErrorCode::ShapeMismatch, "where_cols " + shape_str(base.shape()) + " vs " + shape_str(source.shape()));
    }
    const int64_t d = base.rank() == 0 ? 1 : base.shape().back();
    if (static_cast<int64_t>(mask.size()) != d) {
        fail(ErrorCode::ShapeMismatch, "where_cols mask length differs from last dim");
    }
    auto out = new_impl(base.shape(), base.dtype());
    const auto x = base.data();
    const auto y = source.data();
    const size_t dd = static_cast<size_t>(d);
    for (size_t i = 0; i < x.size(); ++i) {
        out->data[i] = mask[i % dd] ? y[i] : x[i];
    }
    return finish("where_cols", out, {base.impl(), source.impl()},
                  [mask, dd](const TapeNode&, std::span<const double> g, std::span<std::vector<double>*> gin) {
                      for (size_t i = 0; i < g.size(); ++i) {
                          std::vector<double>* dst = mask[i % dd] ? gin[1] : gin[0];
                          if (dst != nullptr) {
                              (*dst)[i] += g[i];
                          }
                      }
                  });
}

Tensor inverse(const Tensor& a) {
    check_dtypes({&a});
    require_matrix(a, "inverse");
    const int64_t n = a.dim(0);
    if (a.dim(1) != n) {
        fail(ErrorCode::ShapeMismatch, "inverse of non-square " + shape_str(a.shape()));
    }
    std::vector<double> m(a.data().begin(), a.data().end());
    std::vector<double> inv(static_cast<size_t>(n * n), 0.0);
    for (int64_t i = 0; i < n; ++i) {
        inv[static_cast<size_t>(i * n + i)] = 1.0;
    }
    for (int64_t col = 0; col < n; ++col) {
        int64_t piv = col;
        for (int64_t r = col + 1; r < n; ++r) {
            if (std::abs(m[static_cast<size_t>(r * n + col)]) > std::abs(m[static_cast<size_t>(piv * n + col)])) {
                piv = r;
            }
        }
        const double pv = m[static_cast<size_t>(piv * n + col)];
        if (pv == 0.0) {
            fail(ErrorCode::ShapeMismatch, "inverse of a singular matrix");
        }
        if (piv != col) {
            for (int64_t j = 0; j < n; ++j) {
                std::swap(m[static_cast<size_t>(piv * n + j)], m[static_cast<size_t>(col * n + j)]);
                std::swap(inv[static_cast<size_t>(piv * n + j)], inv[static_cast<size_t>(col * n + j)]);
            }
        }
        for (int64_t j = 0; j < n; ++j) {
            m[static_cast<size_t>(col * n + j)] /= pv;
            inv[static_cast<size_t>(col * n + j)] /= pv;
        }
        for (int64_t r = 0; r < n; ++r) {
            const double f = m[static_cast<size_t>(r * n + col)];
            if (r == col || f == 0.0) {
                continue;
            }
            for (int64_t j = 0; j < n; ++j) {
                m[static_cast<size_t>(r * n + j)] -= f * m[static_cast<size_t>(col * n + j)];
                inv[static_cast<size_t>(r * n + j)] -= f * inv[static_cast<size_t>(col * n + j)];
            }
        }
    }
    auto out = new_impl({n, n}, a.dtype());
    out->data = std::move(inv);
    return finish("inverse", out, {a.impl()},
                  [n](const TapeNode& nd, std::span<const double> g, std::span<std::vector<double>*> gin) {
                      if (gin[0] == nullptr) {
                          return;
                      }
                      // dA = -Y^T G Y^T
                      const double* y = nd.output->data.data();
                      std::vector<double> t(static_cast<size_t>(n * n), 0.0);
                      for (int64_t i = 0; i < n; ++i) {
                          for (int64_t k = 0; k < n; ++k) {
                              const double yki = y[k * n + i];
                              for (int64_t j = 0; j < n; ++j) {
                                  t[static_cast<size_t>(i * n + j)] += yki * g[static_cast<size_t>(k * n + j)];
                              }
                          }
                      }
                      double* ga = gin[0]->data();
                      for (int64_t i = 0; i < n; ++i) {
                          for (int64_t j = 0; j < n; ++j) {
                              double s = 0.0;
                              for (int64_t k = 0; k < n; ++k) {
                                  s += t[static_cast<size_t>(i * n + k)] * y[j * n + k];
                              }
                              ga[i * n + j] -= s;
                          }
                      }
                  });
}

}  // namespace pvt
