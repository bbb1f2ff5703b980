// Copyright 2026 The pvt Authors
// SPDX-License-Identifier: Apache-2.0

#include "pvt/interventions.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <random>

namespace pvt {
namespace {

using Tag = InterventionKind::Tag;

struct KindName {
    Tag tag;
    std::string_view snake;
    std::string_view camel;
};

constexpr KindName kKindNames[] = {
    {Tag::vanilla, "vanilla", "VanillaIntervention"},
    {Tag::addition, "addition", "AdditionIntervention"},
    {Tag::zero, "zero", "ZeroIntervention"},
    {Tag::noise, "noise", "NoiseIntervention"},
    {Tag::collect, "collect", "CollectIntervention"},
    {Tag::rotated, "rotated", "RotatedSpaceIntervention"},
    {Tag::low_rank_rotated, "low_rank_rotated", "LowRankRotatedSpaceIntervention"},
    {Tag::boundless_rotated, "boundless_rotated", "BoundlessRotatedSpaceIntervention"},
};

std::mutex& registry_mutex() {
    static std::mutex m;
    return m;
}

std::map<std::string, CustomEntry, std::less<>>& registry() {
    static std::map<std::string, CustomEntry, std::less<>> r;
    return r;
}

// Runs `fn` on [n, d] rows, accepting a bare [d] vector as one row.
template <typename Fn>
Tensor on_rows(const Tensor& base, Fn fn) {
    if (base.rank() == 1) {
        Tensor out = fn(reshape(base, {1, base.dim(0)}));
        return reshape(out, base.shape());
    }
    if (base.rank() != 2) {
        fail(ErrorCode::DimMismatch, "interventions act on [n, d] rows or [d] vectors, got " + shape_str(base.shape()));
    }
    return fn(base);
}

Tensor rows_of(const Tensor& t) { return t.rank() == 1 ? reshape(t, {1, t.dim(0)}) : t; }

void require_same_shape(const Tensor& base, const Tensor& source) {
    if (base.shape() != source.shape()) {
        fail(ErrorCode::DimMismatch, "base " + shape_str(base.shape()) + " vs source " + shape_str(source.shape()));
    }
}

int64_t last_dim(const Tensor& t) {
    if (t.rank() < 1) {
        fail(ErrorCode::DimMismatch, "scalar activation");
    }
    return t.shape().back();
}

bool is_empty(const Subspace& s) { return s.has_value() && s->empty(); }

void gram_schmidt_rows(std::vector<double>& m, int64_t rows, int64_t cols) {
    for (int64_t i = 0; i < rows; ++i) {
        double* ri = m.data() + i * cols;
        for (int64_t j = 0; j < i; ++j) {
            const double* rj = m.data() + j * cols;
            double dot = 0.0;
            for (int64_t c = 0; c < cols; ++c) {
                dot += ri[c] * rj[c];
            }
            for (int64_t c = 0; c < cols; ++c) {
                ri[c] -= dot * rj[c];
            }
        }
        double norm = 0.0;
        for (int64_t c = 0; c < cols; ++c) {
            norm += ri[c] * ri[c];
        }
        norm = std::sqrt(norm);
        if (norm < 1e-12) {
            fail(ErrorCode::ShapeMismatch, "low-rank rows became linearly dependent");
        }
        for (int64_t c = 0; c < cols; ++c) {
            ri[c] /= norm;
        }
    }
}

}  // namespace

void validate_subspace(const Subspace& subspace, int64_t dim) {
    if (!subspace) {
        return;
    }
    std::vector<bool> seen(static_cast<size_t>(std::max<int64_t>(dim, 0)), false);
    for (int64_t i : *subspace) {
        if (i < 0 || i >= dim) {
            fail(ErrorCode::SubspaceOutOfRange, "index " + std::to_string(i) + " outside [0," + std::to_string(dim) + ")");
        }
        if (seen[static_cast<size_t>(i)]) {
            fail(ErrorCode::SubspaceOutOfRange, "duplicate index " + std::to_string(i));
        }
        seen[static_cast<size_t>(i)] = true;
    }
}

std::vector<bool> subspace_mask(const Subspace& subspace, int64_t dim) {
    validate_subspace(subspace, dim);
    std::vector<bool> mask(static_cast<size_t>(dim), !subspace.has_value());
    if (subspace) {
        for (int64_t i : *subspace) {
            mask[static_cast<size_t>(i)] = true;
        }
    }
    return mask;
}

// ---------------------------------------------------------------------------
// Kinds

InterventionKind InterventionKind::parse(std::string_view name) {
    for (const auto& k : kKindNames) {
        if (name == k.snake || name == k.camel) {
            return {k.tag, {}};
        }
    }
    if (find_custom(name) != nullptr) {
        return {Tag::custom, std::string(name)};
    }
    fail(ErrorCode::UnknownKind, "'" + std::string(name) + "' is neither built in nor registered");
}

std::string InterventionKind::name() const {
    if (tag == Tag::custom) {
        return custom_name;
    }
    for (const auto& k : kKindNames) {
        if (k.tag == tag) {
            return std::string(k.snake);
        }
    }
    return "?";
}

bool InterventionKind::needs_source() const {
    switch (tag) {
        case Tag::vanilla:
        case Tag::addition:
        case Tag::rotated:
        case Tag::low_rank_rotated:
        case Tag::boundless_rotated:
            return true;
        case Tag::zero:
        case Tag::noise:
        case Tag::collect:
            return false;
        case Tag::custom: {
            const CustomEntry* e = find_custom(custom_name);
            return e != nullptr && e->needs_source;
        }
    }
    return false;
}

bool InterventionKind::trainable() const {
    return tag == Tag::rotated || tag == Tag::low_rank_rotated || tag == Tag::boundless_rotated;
}

// ---------------------------------------------------------------------------
// Static kinds

Tensor intervene_vanilla(const Tensor& base, const Tensor& source, const Subspace& subspace) {
    require_same_shape(base, source);
    const auto mask = subspace_mask(subspace, last_dim(base));
    if (is_empty(subspace)) {
        return base;
    }
    return where_cols(base, source, mask);
}

Tensor intervene_addition(const Tensor& base, const Tensor& source, const Subspace& subspace) {
    require_same_shape(base, source);
    const auto mask = subspace_mask(subspace, last_dim(base));
    if (is_empty(subspace)) {
        return base;
    }
    return where_cols(base, add(base, source), mask);
}

Tensor intervene_zero(const Tensor& base, const Subspace& subspace) {
    return intervene_vanilla(base, Tensor::zeros(base.shape(), base.dtype()), subspace);
}

Tensor intervene_noise(const Tensor& base, const NoiseSpec& spec, const Subspace& subspace) {
    if (spec.scale < 0.0) {
        fail(ErrorCode::DimMismatch, "noise scale must be >= 0");
    }
    const auto mask = subspace_mask(subspace, last_dim(base));
    if (is_empty(subspace) || spec.scale == 0.0) {
        return base;
    }
    std::mt19937_64 rng(spec.seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> noise(static_cast<size_t>(base.numel()));
    for (double& v : noise) {
        v = spec.scale * normal(rng);
    }
    return where_cols(base, add(base, Tensor::from(base.shape(), std::move(noise), base.dtype())), mask);
}

CollectResult intervene_collect(const Tensor& base, const Subspace& subspace) {
    const int64_t d = last_dim(base);
    validate_subspace(subspace, d);
    std::vector<int64_t> cols;
    if (subspace) {
        cols = *subspace;
    } else {
        cols.resize(static_cast<size_t>(d));
        for (int64_t i = 0; i < d; ++i) {
            cols[static_cast<size_t>(i)] = i;
        }
    }
    return {base, gather_cols(base, cols)};
}

// ---------------------------------------------------------------------------
// Rotations

RotationParams RotationParams::random(int64_t dim, uint64_t seed, DType dtype) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(dim)));
    std::vector<double> w(static_cast<size_t>(dim * dim));
    for (double& v : w) {
        v = normal(rng);
    }
    RotationParams p{Tensor::from({dim, dim}, std::move(w), dtype)};
    p.weight.set_requires_grad(true);
    return p;
}

RotationParams RotationParams::identity(int64_t dim, DType dtype) {
    RotationParams p{Tensor::zeros({dim, dim}, dtype)};
    p.weight.set_requires_grad(true);
    return p;
}

Tensor RotationParams::rotation() const {
    const int64_t d = weight.dim(0);
    if (weight.shape() != Shape{d, d}) {
        fail(ErrorCode::DimMismatch, "rotation weight must be square");
    }
    const Tensor eye = Tensor::eye(d, weight.dtype());
    const Tensor skew = sub(weight, transpose(weight));
    return matmul(sub(eye, skew), inverse(add(eye, skew)));
}

LowRankParams LowRankParams::random(int64_t rank, int64_t dim, uint64_t seed, DType dtype) {
    if (rank < 1 || rank > dim) {
        fail(ErrorCode::DimMismatch, "low_rank_dimension " + std::to_string(rank) + " outside [1," +
                                         std::to_string(dim) + "]");
    }
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> w(static_cast<size_t>(rank * dim));
    for (double& v : w) {
        v = normal(rng);
    }
    gram_schmidt_rows(w, rank, dim);
    LowRankParams p{Tensor::from({rank, dim}, std::move(w), dtype)};
    p.weight.set_requires_grad(true);
    return p;
}

void LowRankParams::orthonormalize() {
    std::vector<double> w(weight.data().begin(), weight.data().end());
    gram_schmidt_rows(w, rank(), dim());
    weight.assign(w);
}

BoundlessParams BoundlessParams::random(int64_t dim, uint64_t seed, DType dtype) {
    BoundlessParams p{RotationParams::random(dim, seed, dtype), Tensor::zeros({dim}, dtype), 0.5};
    p.boundary.set_requires_grad(true);
    return p;
}

Tensor BoundlessParams::mask() const { return sigmoid(scale(boundary, 1.0 / temperature)); }

double annealed_temperature(int64_t step, int64_t total, double start, double end) {
    if (total <= 0) {
        return end;
    }
    const double f = std::clamp(static_cast<double>(step) / static_cast<double>(total), 0.0, 1.0);
    return start + (end - start) * f;
}

Tensor intervene_rotated(const Tensor& base, const Tensor& source, const Subspace& subspace,
                         const RotationParams& params) {
    require_same_shape(base, source);
    const int64_t d = last_dim(base);
    if (params.dim() != d) {
        fail(ErrorCode::DimMismatch, "rotation is " + std::to_string(params.dim()) + "-dimensional, activation " +
                                         std::to_string(d));
    }
    const auto mask = subspace_mask(subspace, d);
    if (is_empty(subspace)) {
        return base;
    }
    const Tensor r = params.rotation();
    const Tensor rt = transpose(r);
    const Tensor src = rows_of(source);
    return on_rows(base, [&](const Tensor& b) {
        Tensor rb = matmul(b, rt);
        Tensor rs = matmul(src, rt);
        return matmul(where_cols(rb, rs, mask), r);
    });
}

Tensor intervene_low_rank(const Tensor& base, const Tensor& source, const Subspace& subspace,
                          const LowRankParams& params) {
    require_same_shape(base, source);
    const int64_t d = last_dim(base);
    if (params.dim() != d) {
        fail(ErrorCode::DimMismatch, "low-rank map is over " + std::to_string(params.dim()) + " dims, activation " +
                                         std::to_string(d));
    }
    validate_subspace(subspace, params.rank());
    if (is_empty(subspace)) {
        return base;
    }
    const Tensor rows = subspace ? gather_rows(params.weight, *subspace) : params.weight;
    const Tensor rows_t = transpose(rows);
    const Tensor src = rows_of(source);
    return on_rows(base, [&](const Tensor& b) {
        Tensor delta = sub(matmul(src, rows_t), matmul(b, rows_t));
        return add(b, matmul(delta, rows));
    });
}

Tensor intervene_boundless(const Tensor& base, const Tensor& source, const BoundlessParams& params) {
    require_same_shape(base, source);
    const int64_t d = last_dim(base);
    if (params.rotation.dim() != d || params.boundary.shape() != Shape{d}) {
        fail(ErrorCode::DimMismatch, "boundless parameters do not match activation width " + std::to_string(d));
    }
    const Tensor r = params.rotation.rotation();
    const Tensor rt = transpose(r);
    const Tensor m = params.mask();
    const Tensor keep = add_scalar(scale(m, -1.0), 1.0);
    const Tensor src = rows_of(source);
    return on_rows(base, [&](const Tensor& b) {
        Tensor mixed = add(mul(matmul(b, rt), keep), mul(matmul(src, rt), m));
        return matmul(mixed, r);
    });
}

// ---------------------------------------------------------------------------
// Registry

const CustomEntry& register_custom(const std::string& name, CustomFn fn, bool needs_source) {
    for (const auto& k : kKindNames) {
        if (name == k.snake || name == k.camel) {
            fail(ErrorCode::DuplicateName, "'" + name + "' is a built-in kind");
        }
    }
    std::lock_guard lock(registry_mutex());
    auto [it, inserted] = registry().try_emplace(name, CustomEntry{name, std::move(fn), needs_source});
    if (!inserted) {
        fail(ErrorCode::DuplicateName, "custom intervention '" + name + "' already registered");
    }
    return it->second;
}

const CustomEntry* find_custom(std::string_view name) {
    std::lock_guard lock(registry_mutex());
    auto it = registry().find(name);
    return it == registry().end() ? nullptr : &it->second;
}

// ---------------------------------------------------------------------------
// Intervention

Intervention::Intervention(InterventionKind kind, int64_t width, const InterventionOptions& options, uint64_t seed,
                           DType dtype)
    : kind_(std::move(kind)), width_(width) {
    noise_.scale = options.noise_scale.value_or(1.0);
    noise_.seed = options.noise_seed.value_or(seed);
    switch (kind_.tag) {
        case Tag::rotated:
            rotation_ = RotationParams::random(width, seed, dtype);
            break;
        case Tag::low_rank_rotated:
            low_rank_ = LowRankParams::random(options.low_rank_dimension.value_or(1), width, seed, dtype);
            break;
        case Tag::boundless_rotated:
            boundless_ = BoundlessParams::random(width, seed, dtype);
            if (options.temperature) {
                boundless_->temperature = *options.temperature;
            }
            break;
        case Tag::custom:
            if (find_custom(kind_.custom_name) == nullptr) {
                fail(ErrorCode::UnknownKind, kind_.custom_name);
            }
            break;
        default:
            break;
    }
}

Tensor Intervention::apply(const Tensor& base, const std::optional<Tensor>& source, const Subspace& subspace) const {
    if (needs_source() && !source) {
        fail(ErrorCode::MissingSource, kind_.name() + " needs a source activation");
    }
    switch (kind_.tag) {
        case Tag::vanilla: return intervene_vanilla(base, *source, subspace);
        case Tag::addition: return intervene_addition(base, *source, subspace);
        case Tag::zero: return intervene_zero(base, subspace);
        case Tag::noise: return intervene_noise(base, noise_, subspace);
        case Tag::collect: return intervene_collect(base, subspace).passthrough;
        case Tag::rotated: return intervene_rotated(base, *source, subspace, *rotation_);
        case Tag::low_rank_rotated: return intervene_low_rank(base, *source, subspace, *low_rank_);
        case Tag::boundless_rotated: return intervene_boundless(base, *source, *boundless_);
        case Tag::custom: {
            Tensor out = find_custom(kind_.custom_name)->fn(base, source, subspace);
            if (out.shape() != base.shape()) {
                fail(ErrorCode::DimMismatch, "custom intervention '" + kind_.custom_name + "' changed the shape");
            }
            return out;
        }
    }
    return base;
}

std::vector<std::pair<std::string, Tensor>> Intervention::named_parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    if (rotation_) {
        out.emplace_back("weight", rotation_->weight);
    }
    if (low_rank_) {
        out.emplace_back("weight", low_rank_->weight);
    }
    if (boundless_) {
        out.emplace_back("weight", boundless_->rotation.weight);
        out.emplace_back("boundary", boundless_->boundary);
    }
    return out;
}

std::vector<Tensor> Intervention::parameters() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : named_parameters()) {
        out.push_back(t);
    }
    return out;
}

void Intervention::set_parameter(const std::string& field, const Tensor& value) {
    for (auto& [name, t] : named_parameters()) {
        if (name == field) {
            if (t.shape() != value.shape()) {
                fail(ErrorCode::ShapeMismatch, "parameter '" + field + "' expects " + shape_str(t.shape()));
            }
            Tensor target = t;
            target.assign(value.data());
            return;
        }
    }
    fail(ErrorCode::MalformedDocument, kind_.name() + " has no parameter '" + field + "'");
}

void Intervention::after_step() {
    if (low_rank_) {
        low_rank_->orthonormalize();
    }
}

}  // namespace pvt
