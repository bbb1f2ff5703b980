// Copyright 2026 The pvt Authors
// SPDX-License-Identifier: Apache-2.0

#include "pvt/engine.hpp"

#include <algorithm>

namespace pvt {

namespace {

struct Entry {
    int64_t batch;
    int64_t unit;
    size_t pair;
};

// One getter or setter attached to a site for the duration of one forward.
struct Action {
    size_t spec = 0;
    bool getter = false;
    std::vector<Entry> entries;
    std::vector<Tensor>* out = nullptr;                // getter rows or collected rows, by pair
    const std::vector<Tensor>* source_rows = nullptr;  // setter source, by pair
};

// Per-pair source/base unit lists for one spec on one link.
struct PairPlan {
    std::vector<Entry> source;
    std::vector<Entry> base;
    size_t num_pairs = 0;
};

Tensor stack_rows(const std::vector<Tensor>& rows) { return rows.size() == 1 ? rows[0] : concat(rows, 0); }

class PassHook : public SiteHook {
public:
    PassHook(const std::vector<Intervention>& interventions, const std::vector<std::vector<Subspace>>& subspaces)
        : interventions_(interventions), subspaces_(subspaces) {}

    void add(const SiteKey& key, Action action) { actions_[key].push_back(std::move(action)); }
    bool empty() const { return actions_.empty(); }

    void on_site(const SiteInfo& site, Tensor& activation) override {
        const auto found = actions_.find(site.key);
        if (found == actions_.end()) {
            return;
        }
        int64_t offset = 0;
        if (site.unit == UnitKind::t) {
            offset = counters_[site.key]++;
        }
        const int64_t b = activation.dim(0);
        const int64_t span = activation.dim(1);
        const int64_t w = activation.dim(2);
        Tensor flat = reshape(activation, {b * span, w});
        bool changed = false;

        for (const Action& action : found->second) {
            std::vector<std::pair<const Entry*, int64_t>> hits;
            for (const Entry& e : action.entries) {
                if (e.unit >= offset && e.unit < offset + span) {
                    hits.emplace_back(&e, e.batch * span + (e.unit - offset));
                }
            }
            if (hits.empty()) {
                continue;
            }
            if (action.getter) {
                for (const auto& [e, row] : hits) {
                    const int64_t r[] = {row};
                    (*action.out)[e->pair] = gather_rows(flat, r);
                }
                continue;
            }
            const Intervention& iv = interventions_[action.spec];
            std::map<Subspace, std::vector<std::pair<const Entry*, int64_t>>> groups;
            for (const auto& hit : hits) {
                groups[subspaces_[action.spec][static_cast<size_t>(hit.first->batch)]].push_back(hit);
            }
            for (const auto& [subspace, members] : groups) {
                std::vector<int64_t> rows;
                for (const auto& m : members) rows.push_back(m.second);
                Tensor base = gather_rows(flat, rows);
                if (iv.kind().is_collect()) {
                    Tensor got = intervene_collect(base, subspace).collected;
                    for (size_t j = 0; j < members.size(); ++j) {
                        (*action.out)[members[j].first->pair] = slice(got, 0, static_cast<int64_t>(j),
                                                                      static_cast<int64_t>(j) + 1);
                    }
                    continue;
                }
                std::optional<Tensor> source;
                if (iv.needs_source()) {
                    std::vector<Tensor> src;
                    for (const auto& m : members) {
                        const Tensor& t = (*action.source_rows)[m.first->pair];
                        if (!t.defined()) {
                            fail(ErrorCode::MissingSource, "source activation for intervention " +
                                                               std::to_string(action.spec) + " was not produced");
                        }
                        src.push_back(t);
                    }
                    source = stack_rows(src);
                }
                flat = scatter_rows(flat, rows, iv.apply(base, source, subspace));
                changed = true;
            }
        }
        if (changed) {
            activation = reshape(flat, {b, span, w});
        }
    }

private:
    const std::vector<Intervention>& interventions_;
    const std::vector<std::vector<Subspace>>& subspaces_;
    std::map<SiteKey, std::vector<Action>> actions_;
    std::map<SiteKey, int64_t> counters_;
};

void check_range(const SiteInfo& site, int64_t unit, int64_t length, const char* side) {
    if (unit < 0 || unit >= length) {
        const auto code = site.unit == UnitKind::t ? ErrorCode::TimeStepOutOfRange : ErrorCode::LocationOutOfRange;
        fail(code, std::string(side) + " " + std::string(to_string(site.unit)) + " " + std::to_string(unit) +
                       " outside [0, " + std::to_string(length) + ") at " + site.key.str());
    }
}

UnitIndex all_units(int64_t batch, int64_t length) {
    std::vector<int64_t> units(static_cast<size_t>(length));
    for (int64_t i = 0; i < length; ++i) units[static_cast<size_t>(i)] = i;
    return UnitIndex(static_cast<size_t>(batch), units);
}

// Pairs source-side and base-side units element by element. `source_len`
// is nullopt when the spec reads no source activations.
PairPlan plan_pairs(const SiteInfo& site, std::optional<UnitIndex> src, std::optional<UnitIndex> base, int64_t batch,
                    int64_t base_len, std::optional<int64_t> source_len) {
    if (!base && !src) {
        base = all_units(batch, base_len);
        if (source_len) {
            if (*source_len != base_len) {
                fail(ErrorCode::IndexShapeMismatch, "source and base lengths differ; give unit locations for " +
                                                        site.key.str());
            }
            src = base;
        }
    } else if (!base) {
        base = src;
    } else if (!src) {
        src = base;
    }
    PairPlan plan;
    for (int64_t b = 0; b < batch; ++b) {
        const auto& bu = (*base)[static_cast<size_t>(b)];
        for (int64_t u : bu) check_range(site, u, base_len, "base");
        if (source_len) {
            const auto& su = (*src)[static_cast<size_t>(b)];
            if (su.size() != bu.size()) {
                fail(ErrorCode::IndexShapeMismatch, "batch element " + std::to_string(b) + " pairs " +
                                                        std::to_string(su.size()) + " source units with " +
                                                        std::to_string(bu.size()) + " base units");
            }
            for (int64_t u : su) check_range(site, u, *source_len, "source");
            for (size_t j = 0; j < su.size(); ++j) {
                plan.source.push_back({b, su[j], plan.num_pairs + j});
            }
        }
        for (size_t j = 0; j < bu.size(); ++j) {
            plan.base.push_back({b, bu[j], plan.num_pairs + j});
        }
        plan.num_pairs += bu.size();
    }
    return plan;
}

// Rows of a constant source, one per pair.
std::vector<Tensor> constant_rows(const Tensor& constant, size_t num_pairs, int64_t width, size_t spec) {
    std::vector<Tensor> rows(num_pairs);
    const int64_t n = static_cast<int64_t>(num_pairs);
    if (constant.numel() == width) {
        const Tensor one = reshape(constant, {1, width});
        for (auto& r : rows) r = one;
    } else if (constant.numel() == n * width) {
        const Tensor all = reshape(constant, {n, width});
        for (int64_t p = 0; p < n; ++p) rows[static_cast<size_t>(p)] = slice(all, 0, p, p + 1);
    } else {
        fail(ErrorCode::DimMismatch, "constant source for intervention " + std::to_string(spec) + " has " +
                                         std::to_string(constant.numel()) + " values; expected " +
                                         std::to_string(width) + " or " + std::to_string(n * width));
    }
    return rows;
}

const LocationLink* find_link(const RawUnitLocations& raw, const std::string& key) {
    const auto it = raw.find(key);
    return it == raw.end() ? nullptr : &it->second;
}

}  // namespace

IntervenableModel::IntervenableModel(Model model, IntervenableConfig config, uint64_t seed)
    : model_(std::make_shared<Model>(std::move(model))), config_(std::move(config)) {
    check_config(config_, model_->schema());
    for (size_t i = 0; i < config_.interventions.size(); ++i) {
        const auto& spec = config_.interventions[i];
        const SiteInfo site = *model_->schema().find_site(spec.component, spec.layer);
        sites_.push_back(site);
        interventions_.emplace_back(spec.kind, site.width, spec.options(), seed + i, model_->schema().dtype);
    }
}

ForwardResult IntervenableModel::forward(const ModelInput& input) const { return model_->forward(input); }

IntervenedOutput IntervenableModel::run(const RunRequest& req) const {
    const size_t n = config_.interventions.size();
    const int64_t batch = req.base.batch();
    const int64_t ni = static_cast<int64_t>(n);
    const bool serial = config_.mode == Mode::serial;
    for (const auto& s : req.sources) {
        if (s.batch() != batch) {
            fail(ErrorCode::ShapeMismatch, "sources and base must share the batch size");
        }
    }
    for (const auto& [key, link] : req.unit_locations) {
        bool known = false;
        if (serial) {
            for (size_t k = 0; k < n && !known; ++k) {
                known = key == (k + 1 < n ? "source_" + std::to_string(k) + "->source_" + std::to_string(k + 1)
                                          : "source_" + std::to_string(k) + "->base");
            }
        } else {
            known = key == "sources->base" || key == "base";
        }
        if (!known) {
            fail(ErrorCode::IndexShapeMismatch, "unit location key '" + key + "' does not apply in " +
                                                    (serial ? "serial" : "parallel") + " mode");
        }
    }

    const auto subspaces = resolve_subspaces(req.subspaces, ni, batch);

    // Constant sources: call-time representations win over the config.
    std::vector<std::optional<Tensor>> constants(n);
    for (size_t i = 0; i < n; ++i) {
        if (const auto it = req.source_representations.find(i); it != req.source_representations.end()) {
            constants[i] = it->second;
        } else if (config_.interventions[i].constant_source) {
            constants[i] = config_.interventions[i].constant_source;
        }
    }
    auto reads_source = [&](size_t i) { return interventions_[i].needs_source() && !constants[i]; };

    // Which input each spec reads its source from, and which input it writes.
    auto source_input = [&](size_t i) -> const ModelInput& {
        const size_t idx = serial || req.sources.size() > 1 ? i : 0;
        if (idx >= req.sources.size()) {
            fail(ErrorCode::MissingSource, "intervention " + std::to_string(i) + " (" +
                                               interventions_[i].kind().name() + ") needs source input " +
                                               std::to_string(idx) + "; got " + std::to_string(req.sources.size()));
        }
        return req.sources[idx];
    };
    if (!serial && req.sources.size() > 1 && req.sources.size() != n) {
        fail(ErrorCode::MissingSource, "parallel mode takes 1 or " + std::to_string(n) + " sources; got " +
                                           std::to_string(req.sources.size()));
    }

    // Pair plans per spec.
    std::vector<PairPlan> plans(n);
    for (size_t i = 0; i < n; ++i) {
        const LocationLink* link = nullptr;
        int64_t base_len = req.base.length();
        if (serial) {
            const std::string key = i + 1 < n ? "source_" + std::to_string(i) + "->source_" + std::to_string(i + 1)
                                              : "source_" + std::to_string(i) + "->base";
            link = find_link(req.unit_locations, key);
            if (i + 1 < n) {
                if (i + 1 >= req.sources.size()) {
                    fail(ErrorCode::MissingSource, "serial link " + std::to_string(i) + " writes into source " +
                                                       std::to_string(i + 1) + "; got " +
                                                       std::to_string(req.sources.size()) + " sources");
                }
                base_len = req.sources[i + 1].length();
            }
        } else {
            link = find_link(req.unit_locations, "sources->base");
            if (link == nullptr) link = find_link(req.unit_locations, "base");
        }
        std::optional<UnitIndex> src;
        std::optional<UnitIndex> base;
        if (link != nullptr) {
            const auto resolved = resolve_link(*link, ni, batch);
            src = resolved.source[i];
            base = resolved.base[i];
        }
        std::optional<int64_t> source_len;
        if (reads_source(i)) {
            source_len = source_input(i).length();
        }
        plans[i] = plan_pairs(sites_[i], src, base, batch, base_len, source_len);
    }

    std::vector<std::vector<Tensor>> source_rows(n);
    std::vector<std::vector<Tensor>> collected(n);
    for (size_t i = 0; i < n; ++i) {
        if (constants[i]) {
            source_rows[i] = constant_rows(*constants[i], plans[i].num_pairs, sites_[i].width, i);
        } else {
            source_rows[i].resize(plans[i].num_pairs);
        }
        if (interventions_[i].kind().is_collect()) {
            collected[i].resize(plans[i].num_pairs);
        }
    }
    auto setter = [&](size_t i) {
        Action a;
        a.spec = i;
        a.entries = plans[i].base;
        a.out = &collected[i];
        a.source_rows = &source_rows[i];
        return a;
    };
    auto getter = [&](size_t i) {
        Action a;
        a.spec = i;
        a.getter = true;
        a.entries = plans[i].source;
        a.out = &source_rows[i];
        return a;
    };

    IntervenedOutput out;
    if (req.output_original) {
        out.original = model_->forward(req.base);
    }

    if (!serial) {
        // One forward per distinct source input.
        std::vector<std::pair<const ModelInput*, std::vector<size_t>>> groups;
        for (size_t i = 0; i < n; ++i) {
            if (!reads_source(i)) continue;
            const ModelInput& in = source_input(i);
            auto it = std::find_if(groups.begin(), groups.end(), [&](const auto& g) { return g.first->same_as(in); });
            if (it == groups.end()) {
                groups.push_back({&in, {i}});
            } else {
                it->second.push_back(i);
            }
        }
        for (const auto& [input, specs] : groups) {
            PassHook hook(interventions_, subspaces);
            for (size_t i : specs) hook.add(sites_[i].key, getter(i));
            model_->forward(*input, &hook, false);
        }
        PassHook hook(interventions_, subspaces);
        for (size_t i = 0; i < n; ++i) hook.add(sites_[i].key, setter(i));
        out.intervened = model_->forward(req.base, &hook);
    } else {
        for (size_t k = 0; k < n; ++k) {
            if (!reads_source(k)) continue;
            PassHook hook(interventions_, subspaces);
            if (k > 0) hook.add(sites_[k - 1].key, setter(k - 1));
            hook.add(sites_[k].key, getter(k));
            model_->forward(source_input(k), &hook, false);
        }
        PassHook hook(interventions_, subspaces);
        hook.add(sites_[n - 1].key, setter(n - 1));
        out.intervened = model_->forward(req.base, &hook);
    }

    for (size_t i = 0; i < n; ++i) {
        if (!interventions_[i].kind().is_collect()) continue;
        std::vector<Tensor> rows;
        for (const auto& t : collected[i]) {
            if (t.defined()) rows.push_back(t);
        }
        out.collected.push_back(rows.empty() ? Tensor::zeros({0, sites_[i].width}, model_->schema().dtype)
                                             : stack_rows(rows));
    }
    return out;
}

IntervenedOutput IntervenableModel::run_time_gated(const RunRequest& request) const {
    for (size_t i = 0; i < sites_.size(); ++i) {
        if (sites_[i].unit != UnitKind::t) {
            fail(ErrorCode::UnknownSite, "intervention " + std::to_string(i) + " at " + sites_[i].key.str() +
                                             " is not indexed by time step");
        }
    }
    return run(request);
}

GenerateResult IntervenableModel::generate(const std::vector<int64_t>& prompt, const GenerateOptions& options) const {
    if (prompt.empty()) {
        fail(ErrorCode::ShapeMismatch, "generate needs a non-empty prompt");
    }
    IntervenableModel parallel_view = *this;
    parallel_view.config_.mode = Mode::parallel;
    GenerateResult result;
    std::vector<int64_t> ids = prompt;
    std::vector<int64_t> written;
    for (int64_t step = 0; step < options.steps; ++step) {
        if (!options.step_selector || options.step_selector->contains(step)) {
            written.push_back(static_cast<int64_t>(ids.size()) - 1);
        }
        const ModelInput input = ModelInput::from_ids({ids});
        ForwardResult fr;
        if (written.empty()) {
            fr = model_->forward(input);
        } else {
            RunRequest req;
            req.base = input;
            req.unit_locations["base"] = LocationLink::base_only(IndexTree(written));
            req.subspaces = options.subspaces;
            req.source_representations = options.source_representations;
            fr = parallel_view.run(req).intervened;
        }
        const int64_t t = fr.logits.dim(1);
        const int64_t c = fr.logits.dim(2);
        const auto d = fr.logits.data();
        result.step_logits.push_back(
            Tensor::from({c}, std::vector<double>(d.begin() + (t - 1) * c, d.begin() + t * c), fr.logits.dtype()));
        const int64_t next = argmax_last(fr.logits, 0);
        result.ids.push_back(next);
        ids.push_back(next);
    }
    return result;
}

std::vector<Tensor> IntervenableModel::intervention_parameters() const {
    std::vector<Tensor> out;
    for (const auto& iv : interventions_) {
        for (auto& t : iv.parameters()) out.push_back(t);
    }
    return out;
}

std::vector<Tensor> IntervenableModel::trainable_parameters() const {
    auto out = intervention_parameters();
    if (model_grads_) {
        for (auto& t : model_->parameter_list()) out.push_back(t);
    }
    return out;
}

void IntervenableModel::enable_model_gradients() {
    model_->set_requires_grad(true);
    model_grads_ = true;
}

int64_t IntervenableModel::num_trainable_scalars() const {
    int64_t total = 0;
    for (const auto& t : trainable_parameters()) total += t.numel();
    return total;
}

void IntervenableModel::after_step() {
    for (auto& iv : interventions_) iv.after_step();
}

}  // namespace pvt
