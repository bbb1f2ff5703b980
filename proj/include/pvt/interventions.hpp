// Copyright 2026 The pvt Authors
// SPDX-License-Identifier: Apache-2.0
//
// Intervention algebra. Each function maps base activations (and, where the
// kind needs one, source activations) to replacement activations. Inputs are
// row matrices [n, d] or single vectors [d]; rows are independent.

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "pvt/tensor.hpp"

namespace pvt {

// nullopt targets every dimension; an empty list targets none.
using Subspace = std::optional<std::vector<int64_t>>;

// Throws SubspaceOutOfRange on duplicates or indices outside [0, dim).
void validate_subspace(const Subspace& subspace, int64_t dim);
std::vector<bool> subspace_mask(const Subspace& subspace, int64_t dim);

struct InterventionKind {
    enum class Tag { vanilla, addition, zero, noise, collect, rotated, low_rank_rotated, boundless_rotated, custom };

    Tag tag = Tag::vanilla;
    std::string custom_name;

    // Accepts snake_case names ("low_rank_rotated") and the class-style
    // spellings ("LowRankRotatedSpaceIntervention"). Unregistered custom
    // names throw UnknownKind.
    static InterventionKind parse(std::string_view name);
    std::string name() const;

    bool needs_source() const;
    bool trainable() const;
    bool is_collect() const { return tag == Tag::collect; }
    bool operator==(const InterventionKind&) const = default;
};

struct NoiseSpec {
    double scale = 1.0;
    uint64_t seed = 0;
};

Tensor intervene_vanilla(const Tensor& base, const Tensor& source, const Subspace& subspace);
Tensor intervene_addition(const Tensor& base, const Tensor& source, const Subspace& subspace);
Tensor intervene_zero(const Tensor& base, const Subspace& subspace);
// base + scale * g on the subspace, g ~ N(0, I) drawn in row-major order
// from a generator seeded with spec.seed.
Tensor intervene_noise(const Tensor& base, const NoiseSpec& spec, const Subspace& subspace);

struct CollectResult {
    Tensor passthrough;  // the base tensor itself
    Tensor collected;    // base restricted to the subspace
};
CollectResult intervene_collect(const Tensor& base, const Subspace& subspace);

// Full-rank orthogonal map R = (I - A)(I + A)^-1 with A = W - W^T.
struct RotationParams {
    Tensor weight;  // [d, d]

    static RotationParams random(int64_t dim, uint64_t seed, DType dtype = DType::f32);
    static RotationParams identity(int64_t dim, DType dtype = DType::f32);
    int64_t dim() const { return weight.dim(0); }
    Tensor rotation() const;
};

// k x d map with orthonormal rows.
struct LowRankParams {
    Tensor weight;  // [k, d]

    static LowRankParams random(int64_t rank, int64_t dim, uint64_t seed, DType dtype = DType::f32);
    int64_t rank() const { return weight.dim(0); }
    int64_t dim() const { return weight.dim(1); }
    // Gram-Schmidt on the rows, in place.
    void orthonormalize();
};

struct BoundlessParams {
    RotationParams rotation;
    Tensor boundary;  // [d] logits; mask = sigmoid(boundary / temperature)
    double temperature = 0.5;

    static BoundlessParams random(int64_t dim, uint64_t seed, DType dtype = DType::f32);
    Tensor mask() const;
};

// Linear schedule from `start` at step 0 to `end` at step `total`.
double annealed_temperature(int64_t step, int64_t total, double start = 1.0, double end = 0.01);

// r_b = R base, r_s = R source; subspace coordinates of r_b take r_s values;
// output = R^T r_b.
Tensor intervene_rotated(const Tensor& base, const Tensor& source, const Subspace& subspace,
                         const RotationParams& params);
// base + R_S^T (R_S source - R_S base), R_S = rows of R picked by the subspace.
Tensor intervene_low_rank(const Tensor& base, const Tensor& source, const Subspace& subspace,
                          const LowRankParams& params);
// R^T ((1 - m) * R base + m * R source)
Tensor intervene_boundless(const Tensor& base, const Tensor& source, const BoundlessParams& params);

// ---------------------------------------------------------------------------
// Custom kinds

using CustomFn =
    std::function<Tensor(const Tensor& base, const std::optional<Tensor>& source, const Subspace& subspace)>;

struct CustomEntry {
    std::string name;
    CustomFn fn;
    bool needs_source = false;
};

// Process-wide registry. Throws DuplicateName for a taken or built-in name.
const CustomEntry& register_custom(const std::string& name, CustomFn fn, bool needs_source = false);
const CustomEntry* find_custom(std::string_view name);

// ---------------------------------------------------------------------------
// Stateful wrapper used by the engine: one per configured intervention.

struct InterventionOptions {
    std::optional<int64_t> low_rank_dimension;
    std::optional<double> noise_scale;
    std::optional<uint64_t> noise_seed;
    std::optional<double> temperature;
};

class Intervention {
public:
    Intervention(InterventionKind kind, int64_t width, const InterventionOptions& options, uint64_t seed,
                 DType dtype);

    const InterventionKind& kind() const noexcept { return kind_; }
    int64_t width() const noexcept { return width_; }
    bool needs_source() const { return kind_.needs_source(); }

    // Rows [n, width]. `source` must be present when needs_source().
    Tensor apply(const Tensor& base, const std::optional<Tensor>& source, const Subspace& subspace) const;

    // Trainable tensors by field name ("weight", "boundary"), in a fixed order.
    std::vector<std::pair<std::string, Tensor>> named_parameters() const;
    std::vector<Tensor> parameters() const;
    void set_parameter(const std::string& field, const Tensor& value);
    // Restores invariants after an optimizer update (low-rank re-orthonormalization).
    void after_step();

    std::optional<RotationParams>& rotation() { return rotation_; }
    std::optional<LowRankParams>& low_rank() { return low_rank_; }
    std::optional<BoundlessParams>& boundless() { return boundless_; }
    const std::optional<BoundlessParams>& boundless() const { return boundless_; }
    NoiseSpec& noise() { return noise_; }
    const NoiseSpec& noise() const { return noise_; }

private:
    InterventionKind kind_;
    int64_t width_;
    NoiseSpec noise_;
    std::optional<RotationParams> rotation_;
    std::optional<LowRankParams> low_rank_;
    std::optional<BoundlessParams> boundless_;
};

}  // namespace pvt
