// Copyright 2026 The pvt Authors
// SPDX-License-Identifier: Apache-2.0
//
// Declarative intervention configuration and the unit-location shorthands.
//
// Config document (JSON): a single spec object, an array of spec objects, or
//   {"mode": "parallel" | "serial", "interventions": [ ... ]}
// Spec fields: layer, component, unit, intervention_type, low_rank_dimension,
// constant_source (blob path relative to the document, or an inline number
// array), noise_scale, noise_seed, temperature.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "pvt/interventions.hpp"
#include "pvt/model.hpp"

namespace pvt {

struct InterventionSpec {
    int64_t layer = 0;
    std::string component = "block_output";
    UnitKind unit = UnitKind::pos;
    InterventionKind kind;
    std::optional<int64_t> low_rank_dimension;
    std::optional<Tensor> constant_source;
    std::optional<double> noise_scale;
    std::optional<uint64_t> noise_seed;
    std::optional<double> temperature;

    InterventionOptions options() const { return {low_rank_dimension, noise_scale, noise_seed, temperature}; }
};

enum class Mode { parallel, serial };

struct IntervenableConfig {
    std::vector<InterventionSpec> interventions;
    Mode mode = Mode::parallel;

    IntervenableConfig& add_intervention(InterventionSpec spec) {
        interventions.push_back(std::move(spec));
        return *this;
    }
    size_t size() const noexcept { return interventions.size(); }
};

// Applies defaults (unit=pos, mode=parallel, component=block_output,
// intervention_type=vanilla). Site names are not checked here.
// Throws UnknownKind, MalformedDocument.
IntervenableConfig parse_config(const nlohmann::json& doc, const std::filesystem::path& base_dir = {});
IntervenableConfig parse_config_text(const std::string& text, const std::filesystem::path& base_dir = {});

// Serializes a config. Constant sources are written as references to
// `constant_refs[i]` when given, inline arrays otherwise.
nlohmann::json config_to_json(const IntervenableConfig& config,
                              const std::vector<std::optional<std::string>>& constant_refs = {});

// Checks every spec against a model schema: sites exist with the declared
// unit, serial configs have >= 2 links ordered upstream to downstream,
// constant sources match the site width.
// Throws UnknownSite, SerialOrderViolation, DimMismatch.
void check_config(const IntervenableConfig& config, const ModelSchema& schema);

// ---------------------------------------------------------------------------
// Unit locations

// A nested index value: none, a scalar, or a list of index values.
class IndexTree {
public:
    IndexTree() = default;
    IndexTree(int64_t scalar) : value_(scalar) {}  // NOLINT(google-explicit-constructor)
    IndexTree(int scalar) : value_(static_cast<int64_t>(scalar)) {}  // NOLINT(google-explicit-constructor)
    IndexTree(std::vector<IndexTree> list) : value_(std::move(list)) {}  // NOLINT(google-explicit-constructor)
    IndexTree(const std::vector<int64_t>& flat);  // NOLINT(google-explicit-constructor)
    IndexTree(const std::vector<std::vector<int64_t>>& nested);  // NOLINT(google-explicit-constructor)
    IndexTree(const std::vector<std::vector<std::vector<int64_t>>>& nested);  // NOLINT(google-explicit-constructor)

    static IndexTree none() { return {}; }
    static IndexTree from_json(const nlohmann::json& value);
    nlohmann::json to_json() const;

    bool is_none() const { return std::holds_alternative<std::monostate>(value_); }
    bool is_scalar() const { return std::holds_alternative<int64_t>(value_); }
    bool is_list() const { return std::holds_alternative<std::vector<IndexTree>>(value_); }
    int64_t scalar() const { return std::get<int64_t>(value_); }
    const std::vector<IndexTree>& list() const { return std::get<std::vector<IndexTree>>(value_); }

    // Nesting depth: scalar 0, flat list 1, ...; none entries are skipped.
    // Throws IndexShapeMismatch for ragged depths.
    int depth() const;

private:
    std::variant<std::monostate, int64_t, std::vector<IndexTree>> value_;
};

// (source-side, base-side) pair for one link key.
struct LocationLink {
    IndexTree source;
    IndexTree base;

    static LocationLink same(IndexTree both) { return {both, both}; }
    static LocationLink pair(IndexTree source, IndexTree base) { return {std::move(source), std::move(base)}; }
    static LocationLink base_only(IndexTree base) { return {IndexTree::none(), std::move(base)}; }
};

// Keys: "base", "sources->base", "source_i->source_j", "source_i->base".
using RawUnitLocations = std::map<std::string, LocationLink>;

// Wire form: {"key": value} with value either an index tree (used for both
// sides; for "base" only the base side) or {"source": tree, "base": tree}.
RawUnitLocations parse_unit_locations(const nlohmann::json& doc);

using UnitIndex = std::vector<std::vector<int64_t>>;  // [batch][unit]

struct ResolvedLink {
    std::vector<std::optional<UnitIndex>> source;  // one entry per intervention
    std::vector<std::optional<UnitIndex>> base;
};

using UnitLocations = std::map<std::string, ResolvedLink>;

// Broadcasts shorthands to [num_interventions][batch][num_unit]:
// scalar s -> [[[s]]]; flat list -> one unit list for every batch element;
// depth 2 -> [batch][unit]; depth 3 -> per intervention (entries may be none).
// Throws IndexShapeMismatch.
std::vector<std::optional<UnitIndex>> resolve_indices(const IndexTree& tree, int64_t num_interventions,
                                                      int64_t batch);
ResolvedLink resolve_link(const LocationLink& link, int64_t num_interventions, int64_t batch);
UnitLocations resolve_unit_locations(const RawUnitLocations& raw, int64_t num_interventions, int64_t batch);

// Subspaces share the index-tree shorthand: none -> whole component;
// flat list -> same dims everywhere; depth 2 -> [batch][dims];
// depth 3 -> [intervention][batch][dims] with none entries meaning whole.
std::vector<std::vector<Subspace>> resolve_subspaces(const IndexTree& tree, int64_t num_interventions,
                                                     int64_t batch);

}  // namespace pvt
