// Copyright 2026 The pvt Authors
// SPDX-License-Identifier: Apache-2.0
//
// Engine-independent references: activations are read with Model::trace and
// written back element by element through a bare SiteHook.

#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <utility>
#include <vector>

#include "pvt/model.hpp"

namespace pvt::testing {

enum class SpliceKind { vanilla, zero, addition };

struct SpliceWrite {
    int64_t batch = 0;
    int64_t unit = 0;
    std::vector<double> values;  // full width; used by vanilla and addition
    std::optional<std::vector<int64_t>> dims;  // nullopt = every dimension
};

// Rewrites one site during a plain forward. For "t" sites the unit is the
// time step, counted across the per-step calls.
class SpliceHook : public SiteHook {
public:
    SpliceHook(SiteKey key, SpliceKind kind, std::vector<SpliceWrite> writes)
        : key_(std::move(key)), kind_(kind), writes_(std::move(writes)) {}

    void on_site(const SiteInfo& site, Tensor& activation) override {
        if (site.key != key_) {
            return;
        }
        const int64_t offset = site.unit == UnitKind::t ? step_++ : 0;
        const int64_t span = activation.dim(1);
        const int64_t w = activation.dim(2);
        std::vector<double> data(activation.data().begin(), activation.data().end());
        bool touched = false;
        for (const SpliceWrite& write : writes_) {
            if (write.unit < offset || write.unit >= offset + span) {
                continue;
            }
            const int64_t row = write.batch * span + (write.unit - offset);
            for (int64_t j = 0; j < w; ++j) {
                if (write.dims && std::find(write.dims->begin(), write.dims->end(), j) == write.dims->end()) {
                    continue;
                }
                double& cell = data[static_cast<size_t>(row * w + j)];
                switch (kind_) {
                    case SpliceKind::vanilla: cell = write.values[static_cast<size_t>(j)]; break;
                    case SpliceKind::zero: cell = 0.0; break;
                    case SpliceKind::addition:
                        cell = round_to(activation.dtype(), cell + write.values[static_cast<size_t>(j)]);
                        break;
                }
            }
            touched = true;
        }
        if (touched) {
            activation = Tensor::from(activation.shape(), std::move(data), activation.dtype());
        }
    }

private:
    SiteKey key_;
    SpliceKind kind_;
    std::vector<SpliceWrite> writes_;
    int64_t step_ = 0;
};

// Applies several splices in order and records what each listed site holds
// after them; "t" sites record one [B, 1, W] entry per step.
class OracleHook : public SiteHook {
public:
    void splice(SpliceHook hook) { splices_.push_back(std::move(hook)); }
    void record(const SiteKey& key) { recorded[key]; }

    void on_site(const SiteInfo& site, Tensor& activation) override {
        for (auto& s : splices_) {
            s.on_site(site, activation);
        }
        if (auto it = recorded.find(site.key); it != recorded.end()) {
            it->second.push_back(activation.detach());
        }
    }

    std::map<SiteKey, std::vector<Tensor>> recorded;

private:
    std::vector<SpliceHook> splices_;
};

// Row (batch, unit) of a recorded [B, T, W] activation.
inline std::vector<double> row_of(const Tensor& act, int64_t batch, int64_t unit) {
    const int64_t span = act.dim(1);
    const int64_t w = act.dim(2);
    const auto begin = act.data().begin() + (batch * span + unit) * w;
    return {begin, begin + w};
}

inline Tensor record_site(const Model& model, const ModelInput& input, const SiteKey& key) {
    return model.trace(input, {key}).sites.at(key);
}

inline ModelInput random_ids(std::mt19937_64& rng, int64_t batch, int64_t length, int64_t vocab) {
    std::uniform_int_distribution<int64_t> tok(3, vocab - 1);
    std::vector<std::vector<int64_t>> ids(static_cast<size_t>(batch));
    for (auto& row : ids) {
        row.resize(static_cast<size_t>(length));
        for (auto& t : row) {
            t = tok(rng);
        }
    }
    return ModelInput::from_ids(std::move(ids));
}

inline ModelSchema toy_transformer(int64_t layers = 4, int64_t dim = 16) {
    ModelSchema s;
    s.kind = ArchKind::transformer;
    s.num_layers = layers;
    s.hidden_dim = dim;
    s.num_heads = 4;
    s.vocab_size = 40;
    s.max_positions = 12;
    return s;
}

}  // namespace pvt::testing
