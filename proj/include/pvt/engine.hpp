// Copyright 2026 The pvt Authors
// SPDX-License-Identifier: Apache-2.0
//
// IntervenableModel: a Model paired with an IntervenableConfig.
//
// Parallel mode runs one forward per distinct source input, reading each
// spec's source-side locations, then one base forward in which every spec
// writes its base-side locations. Serial mode chains the specs: pass k runs
// sources[k] with spec k-1 writing and spec k reading, and the base pass
// applies the last spec.
//
// Link keys: parallel uses "sources->base" (or "base" for base-only
// locations); serial uses "source_k->source_{k+1}" and "source_{n-1}->base".
// A missing link means every unit of the input.

#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "pvt/config.hpp"
#include "pvt/interventions.hpp"
#include "pvt/model.hpp"

namespace pvt {

struct RunRequest {
    ModelInput base;
    std::vector<ModelInput> sources;
    RawUnitLocations unit_locations;
    IndexTree subspaces;
    // Per spec index; overrides the spec's constant_source.
    std::map<size_t, Tensor> source_representations;
    bool output_original = false;
};

struct IntervenedOutput {
    std::optional<ForwardResult> original;
    ForwardResult intervened;
    // One entry per collect spec, in config order: [rows, width] with rows
    // ordered by (batch element, unit).
    std::vector<Tensor> collected;
};

struct GenerateOptions {
    int64_t steps = 1;
    std::optional<std::set<int64_t>> step_selector;  // nullopt = every step
    std::map<size_t, Tensor> source_representations;
    IndexTree subspaces;
};

struct GenerateResult {
    std::vector<int64_t> ids;        // generated tokens only
    std::vector<Tensor> step_logits;  // [classes] at the last position, per step
};

class IntervenableModel {
public:
    // Throws UnknownSite, SerialOrderViolation, DimMismatch, UnknownKind.
    IntervenableModel(Model model, IntervenableConfig config, uint64_t seed = 0);

    const Model& model() const noexcept { return *model_; }
    Model& model() noexcept { return *model_; }
    const IntervenableConfig& config() const noexcept { return config_; }
    const std::vector<SiteInfo>& sites() const noexcept { return sites_; }
    std::vector<Intervention>& interventions() noexcept { return interventions_; }
    const std::vector<Intervention>& interventions() const noexcept { return interventions_; }

    // Plain forward of the wrapped model.
    ForwardResult forward(const ModelInput& input) const;

    // Throws MissingSource, LocationOutOfRange, TimeStepOutOfRange,
    // IndexShapeMismatch, SubspaceOutOfRange.
    IntervenedOutput run(const RunRequest& request) const;
    // run() restricted to configs whose specs all use unit "t".
    IntervenedOutput run_time_gated(const RunRequest& request) const;

    // Greedy decoding from a single prompt. At each selected step the specs
    // write the position being decoded; positions written at earlier steps
    // keep their interventions, as with a key/value cache.
    // Throws SequenceTooLong, MissingSource.
    GenerateResult generate(const std::vector<int64_t>& prompt, const GenerateOptions& options) const;

    // Intervention parameters, plus model parameters once enabled.
    std::vector<Tensor> trainable_parameters() const;
    std::vector<Tensor> intervention_parameters() const;
    void enable_model_gradients();
    bool model_gradients_enabled() const noexcept { return model_grads_; }
    int64_t num_trainable_scalars() const;
    void after_step();

    // The bare model; behaves exactly like the model passed in.
    const Model& unwrap() const noexcept { return *model_; }

private:
    std::shared_ptr<Model> model_;
    IntervenableConfig config_;
    std::vector<SiteInfo> sites_;  // resolved site per spec
    std::vector<Intervention> interventions_;
    bool model_grads_ = false;
};

}  // namespace pvt
