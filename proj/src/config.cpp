// Copyright 2026 The pvt Authors
// SPDX-License-Identifier: Apache-2.0

#include "pvt/config.hpp"

#include <algorithm>
#include <set>

#include "pvt/blob.hpp"

namespace pvt {

using nlohmann::json;

namespace {

const std::set<std::string, std::less<>> kSpecKeys = {
    "layer",      "component",   "unit",        "intervention_type", "low_rank_dimension",
    "constant_source", "noise_scale", "noise_seed", "temperature",
};

[[noreturn]] void malformed(const std::string& why) { fail(ErrorCode::MalformedDocument, why); }

template <typename T>
T field(const json& obj, const char* key, const char* what) {
    try {
        return obj.at(key).get<T>();
    } catch (const json::exception&) {
        malformed(std::string("field '") + key + "' must be " + what);
    }
}

InterventionSpec parse_spec(const json& obj, const std::filesystem::path& base_dir) {
    if (!obj.is_object()) {
        malformed("intervention spec must be an object");
    }
    for (const auto& [key, value] : obj.items()) {
        if (!kSpecKeys.contains(key)) {
            malformed("unknown spec field '" + key + "'");
        }
    }
    InterventionSpec spec;
    if (obj.contains("layer")) spec.layer = field<int64_t>(obj, "layer", "an integer");
    if (obj.contains("component")) spec.component = field<std::string>(obj, "component", "a string");
    if (obj.contains("unit")) {
        const auto unit = field<std::string>(obj, "unit", "a string");
        if (unit != "pos" && unit != "t") {
            malformed("unit must be \"pos\" or \"t\"");
        }
        spec.unit = parse_unit(unit);
    }
    if (obj.contains("intervention_type")) {
        spec.kind = InterventionKind::parse(field<std::string>(obj, "intervention_type", "a string"));
    }
    if (obj.contains("low_rank_dimension")) {
        spec.low_rank_dimension = field<int64_t>(obj, "low_rank_dimension", "an integer");
        if (*spec.low_rank_dimension < 1) {
            malformed("low_rank_dimension must be >= 1");
        }
    }
    if (obj.contains("noise_scale")) spec.noise_scale = field<double>(obj, "noise_scale", "a number");
    if (obj.contains("noise_seed")) spec.noise_seed = field<uint64_t>(obj, "noise_seed", "an unsigned integer");
    if (obj.contains("temperature")) {
        spec.temperature = field<double>(obj, "temperature", "a number");
        if (*spec.temperature <= 0.0) {
            malformed("temperature must be > 0");
        }
    }
    if (obj.contains("constant_source")) {
        const json& c = obj.at("constant_source");
        if (c.is_string()) {
            spec.constant_source = load_tensor(base_dir / c.get<std::string>());
        } else if (c.is_array()) {
            std::vector<double> v;
            for (const auto& x : c) {
                if (!x.is_number()) {
                    malformed("inline constant_source must be a flat number array");
                }
                v.push_back(x.get<double>());
            }
            const int64_t n = static_cast<int64_t>(v.size());
            spec.constant_source = Tensor::from({n}, std::move(v), DType::f32);
        } else {
            malformed("constant_source must be a blob path or a number array");
        }
    }
    return spec;
}

}  // namespace

IntervenableConfig parse_config(const json& doc, const std::filesystem::path& base_dir) {
    IntervenableConfig config;
    const json* specs = &doc;
    if (doc.is_object() && doc.contains("interventions")) {
        for (const auto& [key, value] : doc.items()) {
            if (key != "interventions" && key != "mode") {
                malformed("unknown config field '" + key + "'");
            }
        }
        specs = &doc.at("interventions");
        if (doc.contains("mode")) {
            const auto mode = field<std::string>(doc, "mode", "a string");
            if (mode == "parallel") {
                config.mode = Mode::parallel;
            } else if (mode == "serial") {
                config.mode = Mode::serial;
            } else {
                malformed("mode must be \"parallel\" or \"serial\"");
            }
        }
    }
    if (specs->is_array()) {
        for (const auto& s : *specs) {
            config.interventions.push_back(parse_spec(s, base_dir));
        }
    } else if (specs->is_object()) {
        config.interventions.push_back(parse_spec(*specs, base_dir));
    } else {
        malformed("config must be an object or an array of objects");
    }
    if (config.interventions.empty()) {
        malformed("config has no interventions");
    }
    return config;
}

IntervenableConfig parse_config_text(const std::string& text, const std::filesystem::path& base_dir) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::exception& e) {
        malformed(e.what());
    }
    return parse_config(doc, base_dir);
}

json config_to_json(const IntervenableConfig& config, const std::vector<std::optional<std::string>>& constant_refs) {
    json list = json::array();
    for (size_t i = 0; i < config.interventions.size(); ++i) {
        const auto& s = config.interventions[i];
        json obj{{"layer", s.layer},
                 {"component", s.component},
                 {"unit", std::string(to_string(s.unit))},
                 {"intervention_type", s.kind.name()}};
        if (s.low_rank_dimension) obj["low_rank_dimension"] = *s.low_rank_dimension;
        if (s.noise_scale) obj["noise_scale"] = *s.noise_scale;
        if (s.noise_seed) obj["noise_seed"] = *s.noise_seed;
        if (s.temperature) obj["temperature"] = *s.temperature;
        if (s.constant_source) {
            if (i < constant_refs.size() && constant_refs[i]) {
                obj["constant_source"] = *constant_refs[i];
            } else {
                obj["constant_source"] = std::vector<double>(s.constant_source->data().begin(),
                                                             s.constant_source->data().end());
            }
        }
        list.push_back(std::move(obj));
    }
    return json{{"mode", config.mode == Mode::serial ? "serial" : "parallel"}, {"interventions", list}};
}

void check_config(const IntervenableConfig& config, const ModelSchema& schema) {
    const auto sites = schema.sites();
    std::vector<size_t> order;
    for (size_t i = 0; i < config.interventions.size(); ++i) {
        const auto& s = config.interventions[i];
        const auto site = schema.find_site(s.component, s.layer);
        if (!site) {
            fail(ErrorCode::UnknownSite, "intervention " + std::to_string(i) + ": " + s.component + "@" +
                                             std::to_string(s.layer) + " is not a site of this " +
                                             std::string(to_string(schema.kind)) + " model");
        }
        if (site->unit != s.unit) {
            fail(ErrorCode::UnknownSite, "intervention " + std::to_string(i) + ": " + site->key.str() +
                                             " is indexed by unit \"" + std::string(to_string(site->unit)) +
                                             "\", not \"" + std::string(to_string(s.unit)) + "\"");
        }
        if (s.constant_source && s.constant_source->numel() % site->width != 0) {
            fail(ErrorCode::DimMismatch, "intervention " + std::to_string(i) + ": constant source does not match width " +
                                             std::to_string(site->width));
        }
        if (s.low_rank_dimension && *s.low_rank_dimension > site->width) {
            fail(ErrorCode::DimMismatch, "intervention " + std::to_string(i) + ": low_rank_dimension exceeds width");
        }
        const auto it = std::find_if(sites.begin(), sites.end(), [&](const SiteInfo& x) { return x.key == site->key; });
        order.push_back(static_cast<size_t>(it - sites.begin()));
    }
    if (config.mode == Mode::serial) {
        if (config.interventions.size() < 2) {
            fail(ErrorCode::SerialOrderViolation, "serial mode needs at least two interventions");
        }
        for (size_t i = 1; i < order.size(); ++i) {
            if (order[i] < order[i - 1]) {
                fail(ErrorCode::SerialOrderViolation, "serial link " + std::to_string(i) +
                                                          " reads a site upstream of the previous link's write");
            }
        }
    }
}

// ---------------------------------------------------------------------------
// IndexTree

IndexTree::IndexTree(const std::vector<int64_t>& flat) {
    std::vector<IndexTree> list(flat.begin(), flat.end());
    value_ = std::move(list);
}

IndexTree::IndexTree(const std::vector<std::vector<int64_t>>& nested) {
    std::vector<IndexTree> list;
    for (const auto& v : nested) list.emplace_back(v);
    value_ = std::move(list);
}

IndexTree::IndexTree(const std::vector<std::vector<std::vector<int64_t>>>& nested) {
    std::vector<IndexTree> list;
    for (const auto& v : nested) list.emplace_back(v);
    value_ = std::move(list);
}

IndexTree IndexTree::from_json(const json& value) {
    if (value.is_null()) {
        return {};
    }
    if (value.is_number_integer()) {
        return IndexTree(value.get<int64_t>());
    }
    if (value.is_array()) {
        std::vector<IndexTree> list;
        for (const auto& v : value) {
            list.push_back(from_json(v));
        }
        return IndexTree(std::move(list));
    }
    fail(ErrorCode::IndexShapeMismatch, "index values must be integers, null or nested arrays");
}

json IndexTree::to_json() const {
    if (is_none()) return nullptr;
    if (is_scalar()) return scalar();
    json arr = json::array();
    for (const auto& c : list()) arr.push_back(c.to_json());
    return arr;
}

int IndexTree::depth() const {
    if (is_none()) return -1;
    if (is_scalar()) return 0;
    int child = -1;
    for (const auto& c : list()) {
        const int d = c.depth();
        if (d < 0) continue;
        if (child >= 0 && d != child) {
            fail(ErrorCode::IndexShapeMismatch, "ragged nesting depth in index list");
        }
        child = d;
    }
    if (child < 0) {
        // [] is a flat (empty) list; [null, ...] can only be per-intervention.
        return list().empty() ? 1 : 3;
    }
    return child + 1;
}

// ---------------------------------------------------------------------------
// Resolution

namespace {

std::vector<int64_t> flat_ints(const IndexTree& t) {
    std::vector<int64_t> out;
    if (t.is_scalar()) {
        out.push_back(t.scalar());
        return out;
    }
    for (const auto& c : t.list()) {
        if (!c.is_scalar()) {
            fail(ErrorCode::IndexShapeMismatch, "expected a flat list of integers");
        }
        out.push_back(c.scalar());
    }
    return out;
}

// depth-2 tree -> [batch][unit]
UnitIndex per_batch(const IndexTree& t, int64_t batch) {
    if (t.depth() != 2) {
        fail(ErrorCode::IndexShapeMismatch, "expected [batch][unit] nesting");
    }
    const auto& rows = t.list();
    const int64_t n = static_cast<int64_t>(rows.size());
    if (n != batch && n != 1) {
        fail(ErrorCode::IndexShapeMismatch, "batch axis has " + std::to_string(n) + " entries, batch is " +
                                                std::to_string(batch));
    }
    UnitIndex out;
    for (int64_t b = 0; b < batch; ++b) {
        out.push_back(flat_ints(rows[static_cast<size_t>(n == 1 ? 0 : b)]));
    }
    return out;
}

}  // namespace

std::vector<std::optional<UnitIndex>> resolve_indices(const IndexTree& tree, int64_t num_interventions,
                                                      int64_t batch) {
    const size_t ni = static_cast<size_t>(num_interventions);
    std::vector<std::optional<UnitIndex>> out(ni);
    const int d = tree.depth();
    if (d < 0) {
        return out;
    }
    if (d == 0 || d == 1) {
        const auto units = flat_ints(tree);
        for (auto& o : out) o = UnitIndex(static_cast<size_t>(batch), units);
        return out;
    }
    if (d == 2) {
        const auto resolved = per_batch(tree, batch);
        for (auto& o : out) o = resolved;
        return out;
    }
    if (d == 3) {
        const auto& entries = tree.list();
        const size_t n = entries.size();
        if (n != ni && n != 1) {
            fail(ErrorCode::IndexShapeMismatch, "intervention axis has " + std::to_string(n) + " entries, config has " +
                                                    std::to_string(ni));
        }
        for (size_t i = 0; i < ni; ++i) {
            const IndexTree& e = entries[n == 1 ? 0 : i];
            if (!e.is_none()) {
                out[i] = per_batch(e, batch);
            }
        }
        return out;
    }
    fail(ErrorCode::IndexShapeMismatch, "unit locations nest deeper than [intervention][batch][unit]");
}

ResolvedLink resolve_link(const LocationLink& link, int64_t num_interventions, int64_t batch) {
    return {resolve_indices(link.source, num_interventions, batch), resolve_indices(link.base, num_interventions, batch)};
}

UnitLocations resolve_unit_locations(const RawUnitLocations& raw, int64_t num_interventions, int64_t batch) {
    UnitLocations out;
    for (const auto& [key, link] : raw) {
        out.emplace(key, resolve_link(link, num_interventions, batch));
    }
    return out;
}

RawUnitLocations parse_unit_locations(const json& doc) {
    if (!doc.is_object()) {
        fail(ErrorCode::IndexShapeMismatch, "unit_locations must be an object keyed by link");
    }
    RawUnitLocations out;
    for (const auto& [key, value] : doc.items()) {
        if (value.is_object()) {
            for (const auto& [k, v] : value.items()) {
                if (k != "source" && k != "base") {
                    fail(ErrorCode::IndexShapeMismatch, "link object keys are \"source\" and \"base\"");
                }
            }
            out[key] = LocationLink::pair(IndexTree::from_json(value.value("source", json())),
                                          IndexTree::from_json(value.value("base", json())));
        } else if (key == "base") {
            out[key] = LocationLink::base_only(IndexTree::from_json(value));
        } else {
            out[key] = LocationLink::same(IndexTree::from_json(value));
        }
    }
    return out;
}

std::vector<std::vector<Subspace>> resolve_subspaces(const IndexTree& tree, int64_t num_interventions, int64_t batch) {
    const size_t ni = static_cast<size_t>(num_interventions);
    const size_t nb = static_cast<size_t>(batch);
    std::vector<std::vector<Subspace>> out(ni, std::vector<Subspace>(nb));
    const int d = tree.depth();
    if (d < 0) {
        return out;
    }
    if (d <= 1) {
        const auto dims = flat_ints(tree);
        for (auto& row : out) {
            for (auto& s : row) s = dims;
        }
        return out;
    }
    auto batch_rows = [&](const IndexTree& t) {
        std::vector<Subspace> rows(nb);
        const auto ub = per_batch(t, batch);
        for (size_t b = 0; b < nb; ++b) rows[b] = ub[b];
        return rows;
    };
    if (d == 2) {
        const auto rows = batch_rows(tree);
        for (auto& row : out) row = rows;
        return out;
    }
    if (d == 3) {
        const auto& entries = tree.list();
        const size_t n = entries.size();
        if (n != ni && n != 1) {
            fail(ErrorCode::IndexShapeMismatch, "subspaces list " + std::to_string(n) + " interventions, config has " +
                                                    std::to_string(ni));
        }
        for (size_t i = 0; i < ni; ++i) {
            const IndexTree& e = entries[n == 1 ? 0 : i];
            if (!e.is_none()) out[i] = batch_rows(e);
        }
        return out;
    }
    fail(ErrorCode::IndexShapeMismatch, "subspaces nest deeper than [intervention][batch][dim]");
}

}  // namespace pvt
