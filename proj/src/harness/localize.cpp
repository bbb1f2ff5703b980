// Copyright 2026 The pvt Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <numeric>
#include <random>

#include "pvt/harness.hpp"
#include "pvt/optim.hpp"

namespace pvt::harness {

namespace {

void require_labels(const Dataset& data) {
    if (data.examples.empty()) {
        fail(ErrorCode::EmptyDataset, "dataset has no examples");
    }
    for (const auto& e : data.examples) {
        if (e.label < 0) {
            fail(ErrorCode::EmptyDataset, "dataset examples carry no labels; counterfactual pairs need the pronoun task");
        }
    }
}

std::pair<std::vector<size_t>, std::vector<size_t>> halves(size_t n) {
    std::vector<size_t> a(n / 2);
    std::vector<size_t> b(n - n / 2);
    std::iota(a.begin(), a.end(), 0);
    std::iota(b.begin(), b.end(), n / 2);
    return {a, b};
}

size_t pick_with_label(const Dataset& data, const std::vector<size_t>& pool, std::mt19937_64& rng, int label,
                       bool same) {
    std::uniform_int_distribution<size_t> pick(0, pool.size() - 1);
    for (int attempt = 0; attempt < 10000; ++attempt) {
        const size_t i = pool[pick(rng)];
        if ((data.examples[i].label == label) == same) return i;
    }
    fail(ErrorCode::EmptyDataset, "no example with the required label in the pool");
}

ModelInput batch_input(const Vocab& vocab, const Dataset& data, const std::vector<size_t>& idx, size_t begin,
                       size_t end) {
    std::vector<std::vector<int64_t>> ids;
    for (size_t i = begin; i < end; ++i) ids.push_back(encode_tokens(vocab, data.examples[idx[i]].prompt));
    return ModelInput::from_ids(std::move(ids));
}

Tensor last_logits(const Tensor& logits) {
    const int64_t b = logits.dim(0);
    const int64_t t = logits.dim(1);
    return reshape(slice(logits, 1, t - 1, t), {b, logits.dim(2)});
}

IntervenableConfig das_config(int64_t layer, int64_t k) {
    InterventionSpec s;
    s.layer = layer;
    s.component = "block_output";
    s.kind = InterventionKind::parse("low_rank_rotated");
    s.low_rank_dimension = k;
    IntervenableConfig c;
    c.add_intervention(s);
    return c;
}

RunRequest das_request(const Vocab& vocab, const Dataset& data, const PairSet& pairs, size_t begin, size_t end,
                       int64_t pos) {
    RunRequest req;
    req.base = batch_input(vocab, data, pairs.base, begin, end);
    req.sources = {batch_input(vocab, data, pairs.source, begin, end)};
    req.unit_locations["sources->base"] = LocationLink::same(IndexTree(pos));
    return req;
}

}  // namespace

PairSet counterfactual_pairs(const Dataset& data, const std::vector<size_t>& pool, size_t count, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<size_t> pick(0, pool.size() - 1);
    PairSet out;
    for (size_t n = 0; n < count; ++n) {
        const size_t b = pool[pick(rng)];
        out.base.push_back(b);
        out.source.push_back(pick_with_label(data, pool, rng, data.examples[b].label, false));
    }
    return out;
}

PairSet balanced_pairs(const Dataset& data, const std::vector<size_t>& pool, size_t count, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<size_t> pick(0, pool.size() - 1);
    PairSet out;
    for (size_t n = 0; n < count; ++n) {
        const size_t b = pool[pick(rng)];
        out.base.push_back(b);
        out.source.push_back(pick_with_label(data, pool, rng, data.examples[b].label, n % 2 == 0));
    }
    return out;
}

double interchange_accuracy(const IntervenableModel& pv_model, const Dataset& data, const PairSet& pairs,
                            int64_t pos) {
    if (pairs.base.empty()) {
        fail(ErrorCode::EmptyDataset, "no evaluation pairs");
    }
    const Vocab& vocab = pv_model.model().vocab();
    size_t correct = 0;
    for (size_t begin = 0; begin < pairs.base.size(); begin += 64) {
        const size_t end = std::min(pairs.base.size(), begin + 64);
        const Tensor logits = pv_model.run(das_request(vocab, data, pairs, begin, end, pos)).intervened.logits;
        for (size_t i = begin; i < end; ++i) {
            const int64_t want = vocab.id(data.examples[pairs.source[i]].answer);
            correct += argmax_last(logits, static_cast<int64_t>(i - begin)) == want ? 1 : 0;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(pairs.base.size());
}

DasResult train_das(const Model& model, const Dataset& data, const DasOptions& options) {
    require_labels(data);
    const Vocab& vocab = model.vocab();
    IntervenableModel pv(model, das_config(options.layer, options.k), options.seed);
    const auto [train_pool, eval_pool] = halves(data.examples.size());
    const PairSet train = counterfactual_pairs(data, train_pool, options.train_pairs, options.seed);
    const PairSet eval = balanced_pairs(data, eval_pool, options.eval_pairs, options.seed + 1);

    Adam adam({.lr = options.lr});
    std::vector<Tensor> params = pv.trainable_parameters();
    std::vector<double> curve;
    const size_t bs = static_cast<size_t>(std::max<int64_t>(1, options.batch_size));
    for (int64_t epoch = 0; epoch < options.epochs; ++epoch) {
        double total = 0.0;
        size_t batches = 0;
        for (size_t begin = 0; begin < train.base.size(); begin += bs) {
            const size_t end = std::min(train.base.size(), begin + bs);
            std::vector<int64_t> targets;
            for (size_t i = begin; i < end; ++i) targets.push_back(vocab.id(data.examples[train.source[i]].answer));
            Tape tape;
            TapeScope scope(tape);
            const auto out = pv.run(das_request(vocab, data, train, begin, end, options.pos));
            const Tensor loss = cross_entropy(last_logits(out.intervened.logits), targets);
            adam.step(params, backward(loss));
            pv.after_step();
            total += loss.item();
            ++batches;
        }
        curve.push_back(total / static_cast<double>(std::max<size_t>(1, batches)));
    }

    const double iia = interchange_accuracy(pv, data, eval, options.pos);
    return {iia, std::move(curve), std::move(pv)};
}

std::vector<Tensor> collect_block_outputs(const Model& model, const Dataset& data, int64_t layer) {
    if (data.examples.empty()) {
        fail(ErrorCode::EmptyDataset, "dataset has no examples");
    }
    InterventionSpec s;
    s.layer = layer;
    s.component = "block_output";
    s.kind = InterventionKind::parse("collect");
    IntervenableConfig config;
    config.add_intervention(s);
    IntervenableModel pv(model, config);
    std::vector<size_t> all(data.examples.size());
    std::iota(all.begin(), all.end(), 0);
    RunRequest req;
    req.base = batch_input(model.vocab(), data, all, 0, all.size());
    const Tensor rows = pv.run(req).collected.at(0);  // [(b, pos), hidden]
    const int64_t n = req.base.batch();
    const int64_t t = req.base.length();
    std::vector<Tensor> out;
    for (int64_t p = 0; p < t; ++p) {
        std::vector<int64_t> idx;
        for (int64_t b = 0; b < n; ++b) idx.push_back(b * t + p);
        out.push_back(gather_rows(rows, idx));
    }
    return out;
}

double train_probe(const Tensor& features, const std::vector<int>& labels, const ProbeOptions& options) {
    const int64_t n = features.dim(0);
    const int64_t w = features.dim(1);
    if (n < 2 || static_cast<int64_t>(labels.size()) != n) {
        fail(ErrorCode::EmptyDataset, "probe needs at least two labelled activations");
    }
    std::mt19937_64 rng(options.seed);
    std::vector<int64_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<int64_t> y(labels.begin(), labels.end());
    if (options.shuffle_labels) {
        std::shuffle(y.begin(), y.end(), rng);
    }
    const size_t half = static_cast<size_t>(n / 2);
    const std::vector<int64_t> train_idx(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(half));
    const std::vector<int64_t> test_idx(order.begin() + static_cast<std::ptrdiff_t>(half), order.end());

    // Standardize with training statistics.
    const Tensor x64 = features.to(DType::f64);
    const auto xd = x64.data();
    std::vector<double> mu(static_cast<size_t>(w), 0.0);
    std::vector<double> sd(static_cast<size_t>(w), 0.0);
    for (int64_t r : train_idx)
        for (int64_t c = 0; c < w; ++c) mu[static_cast<size_t>(c)] += xd[static_cast<size_t>(r * w + c)];
    for (auto& m : mu) m /= static_cast<double>(half);
    for (int64_t r : train_idx)
        for (int64_t c = 0; c < w; ++c) {
            const double dlt = xd[static_cast<size_t>(r * w + c)] - mu[static_cast<size_t>(c)];
            sd[static_cast<size_t>(c)] += dlt * dlt;
        }
    for (auto& s : sd) s = std::sqrt(s / static_cast<double>(half)) + 1e-6;
    auto standardized = [&](const std::vector<int64_t>& idx) {
        std::vector<double> v;
        for (int64_t r : idx)
            for (int64_t c = 0; c < w; ++c)
                v.push_back((xd[static_cast<size_t>(r * w + c)] - mu[static_cast<size_t>(c)]) / sd[static_cast<size_t>(c)]);
        return Tensor::from({static_cast<int64_t>(idx.size()), w}, std::move(v), DType::f64);
    };
    const Tensor xtr = standardized(train_idx);
    const Tensor xte = standardized(test_idx);
    std::vector<int64_t> ytr;
    for (int64_t r : train_idx) ytr.push_back(y[static_cast<size_t>(r)]);

    Tensor weight = Tensor::zeros({w, 2}, DType::f64);
    Tensor bias = Tensor::zeros({2}, DType::f64);
    weight.set_requires_grad(true);
    bias.set_requires_grad(true);
    std::vector<Tensor> params{weight, bias};
    Adam adam({.lr = options.lr});
    for (int64_t e = 0; e < options.epochs; ++e) {
        Tape tape;
        TapeScope scope(tape);
        const Tensor loss = cross_entropy(add(matmul(xtr, weight), bias), ytr);
        adam.step(params, backward(loss));
    }
    const Tensor logits = add(matmul(xte, weight), bias);
    const auto ld = logits.data();
    size_t correct = 0;
    for (size_t i = 0; i < test_idx.size(); ++i) {
        const int64_t pred = ld[2 * i + 1] > ld[2 * i] ? 1 : 0;
        correct += pred == y[static_cast<size_t>(test_idx[i])] ? 1 : 0;
    }
    return static_cast<double>(correct) / static_cast<double>(test_idx.size());
}

double train_probe(const Model& model, const Dataset& data, const ProbeOptions& options) {
    require_labels(data);
    const auto feats = collect_block_outputs(model, data, options.layer);
    if (options.pos < 0 || options.pos >= static_cast<int64_t>(feats.size())) {
        fail(ErrorCode::LocationOutOfRange, "probe position " + std::to_string(options.pos));
    }
    std::vector<int> labels;
    for (const auto& e : data.examples) labels.push_back(e.label);
    return train_probe(feats[static_cast<size_t>(options.pos)], labels, options);
}

std::vector<GridRow> das_grid(const Model& model, const Dataset& data, const DasOptions& base_options) {
    require_labels(data);
    const int64_t len = static_cast<int64_t>(data.examples.front().prompt.size());
    std::vector<GridRow> rows;
    for (int64_t l = 0; l < model.schema().num_layers; ++l) {
        for (int64_t p = 0; p < len; ++p) {
            DasOptions o = base_options;
            o.layer = l;
            o.pos = p;
            rows.push_back({l, p, "iia", train_das(model, data, o).iia});
        }
    }
    return rows;
}

std::vector<GridRow> probe_grid(const Model& model, const Dataset& data, const ProbeOptions& base_options) {
    require_labels(data);
    std::vector<int> labels;
    for (const auto& e : data.examples) labels.push_back(e.label);
    std::vector<GridRow> rows;
    for (int64_t l = 0; l < model.schema().num_layers; ++l) {
        const auto feats = collect_block_outputs(model, data, l);
        for (int64_t p = 0; p < static_cast<int64_t>(feats.size()); ++p) {
            ProbeOptions o = base_options;
            o.layer = l;
            o.pos = p;
            rows.push_back({l, p, "probe_acc", train_probe(feats[static_cast<size_t>(p)], labels, o)});
        }
    }
    return rows;
}

}  // namespace pvt::harness
