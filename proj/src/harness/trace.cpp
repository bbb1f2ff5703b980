// Copyright 2026 The pvt Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include "pvt/harness.hpp"

namespace pvt::harness {

namespace {

int64_t floor_div(int64_t a, int64_t b) {
    int64_t q = a / b;
    if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
    return q;
}

InterventionSpec noise_spec(const TraceOptions& options, double scale) {
    InterventionSpec s;
    s.layer = 0;
    s.component = "block_input";
    s.kind = InterventionKind::parse("noise");
    s.noise_scale = scale;
    s.noise_seed = options.noise_seed;
    return s;
}

InterventionSpec restore_spec(const std::string& stream, int64_t layer) {
    InterventionSpec s;
    s.layer = layer;
    s.component = stream;
    return s;
}

// Runs noise + restores; restores[i] = (spec, positions).
double corrupted_prob(const Model& model, const ModelInput& clean, int64_t gold, const InterventionSpec& noise,
                      const std::vector<int64_t>& subject,
                      const std::vector<std::pair<InterventionSpec, std::vector<int64_t>>>& restores) {
    IntervenableConfig config;
    config.add_intervention(noise);
    std::vector<IndexTree> src{IndexTree::none()};
    std::vector<IndexTree> base{IndexTree(std::vector<std::vector<int64_t>>{subject})};
    for (const auto& [spec, positions] : restores) {
        config.add_intervention(spec);
        const IndexTree loc(std::vector<std::vector<int64_t>>{positions});
        src.push_back(loc);
        base.push_back(loc);
    }
    IntervenableModel pv(model, config);
    RunRequest req;
    req.base = clean;
    if (!restores.empty()) {
        req.sources = {clean};
    }
    req.unit_locations["sources->base"] = LocationLink::pair(IndexTree(src), IndexTree(base));
    return gold_probability(pv.run(req).intervened.logits, gold);
}

}  // namespace

TraceWindow trace_window(int64_t layer, int64_t width, int64_t total_layers) {
    TraceWindow w;
    w.begin = std::max<int64_t>(0, layer - floor_div(width, 2));
    w.end = std::min<int64_t>(total_layers, layer - floor_div(-width, 2));
    return w;
}

double embedding_noise_scale(const Model& model) {
    const auto v = model.token_embedding().data();
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    var /= static_cast<double>(v.size());
    return 3.0 * std::sqrt(var);
}

double gold_probability(const Tensor& logits, int64_t gold) {
    const int64_t t = logits.dim(1);
    const int64_t c = logits.dim(2);
    const auto d = logits.data();
    const double* row = d.data() + (t - 1) * c;
    double mx = row[0];
    for (int64_t i = 1; i < c; ++i) mx = std::max(mx, row[i]);
    double z = 0.0;
    for (int64_t i = 0; i < c; ++i) z += std::exp(row[i] - mx);
    return std::exp(row[gold] - mx) / z;
}

TraceResult trace_prompt(const Model& model, const std::vector<int64_t>& prompt, int64_t gold,
                         const TraceOptions& options) {
    if (gold < 0 || gold >= model.schema().vocab_size) {
        fail(ErrorCode::UnknownToken, "gold token id " + std::to_string(gold));
    }
    const ModelInput clean = ModelInput::from_ids({prompt});
    const int64_t len = clean.length();
    const int64_t layers = model.schema().num_layers;
    const double scale = options.noise_scale > 0.0 ? options.noise_scale : embedding_noise_scale(model);
    const InterventionSpec noise = noise_spec(options, scale);

    TraceResult result;
    result.clean_prob = gold_probability(model.forward(clean).logits, gold);
    result.noise_prob = corrupted_prob(model, clean, gold, noise, options.subject_positions, {});

    std::vector<int64_t> every(static_cast<size_t>(len));
    for (int64_t p = 0; p < len; ++p) every[static_cast<size_t>(p)] = p;
    std::vector<std::pair<InterventionSpec, std::vector<int64_t>>> all;
    for (int64_t l = 0; l < layers; ++l) all.emplace_back(restore_spec("block_output", l), every);
    result.full_restore_prob = corrupted_prob(model, clean, gold, noise, options.subject_positions, all);

    for (const auto& stream : options.streams) {
        const int64_t width = stream == "block_output" ? 1 : options.window;
        for (int64_t l = 0; l < layers; ++l) {
            const TraceWindow w = trace_window(l, width, layers);
            for (int64_t p = 0; p < len; ++p) {
                std::vector<std::pair<InterventionSpec, std::vector<int64_t>>> restores;
                for (int64_t j = w.begin; j < w.end; ++j) restores.emplace_back(restore_spec(stream, j), std::vector{p});
                result.rows.push_back(
                    {stream, l, p, corrupted_prob(model, clean, gold, noise, options.subject_positions, restores)});
            }
        }
    }
    return result;
}

}  // namespace pvt::harness
