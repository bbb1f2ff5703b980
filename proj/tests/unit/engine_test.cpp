// Copyright 2026 The pvt Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include <doctest.h>

#include "../support/engine_cases.hpp"
#include "../support/oracles.hpp"
#include "pvt/engine.hpp"

using namespace pvt;
using pvt::testing::toy_model;

namespace {

ErrorCode code_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.code();
    }
    FAIL("no error thrown");
    return ErrorCode::IoFailure;
}

InterventionSpec spec(const std::string& component, int64_t layer, const std::string& kind) {
    InterventionSpec s;
    s.component = component;
    s.layer = layer;
    s.kind = InterventionKind::parse(kind);
    return s;
}

IntervenableConfig one(InterventionSpec s) {
    IntervenableConfig c;
    c.add_intervention(std::move(s));
    return c;
}

}  // namespace

TEST_CASE("splice oracle on random configs") {
    const Model model = toy_model(1);
    for (uint64_t seed = 0; seed < 12; ++seed) {
        const auto r = testing::splice_case(model, seed);
        INFO("seed " << seed << ": " << r.detail);
        CHECK(r.ok);
    }
}

TEST_CASE("serial chains match manual splices") {
    const Model model = toy_model(2);
    for (uint64_t seed = 0; seed < 6; ++seed) {
        const auto r = testing::serial_case(model, seed);
        INFO("seed " << seed << ": " << r.detail);
        CHECK(r.ok);
    }
}

TEST_CASE("gru writes respect time") {
    for (uint64_t seed = 0; seed < 6; ++seed) {
        const auto r = testing::gru_case(seed);
        INFO("seed " << seed << ": " << r.detail);
        CHECK(r.ok);
    }
}

TEST_CASE("algebraic laws") {
    const Model model = toy_model(3);
    for (uint64_t seed = 0; seed < 4; ++seed) {
        for (const auto& law : testing::algebra_laws(model, seed)) {
            INFO(law.law << ": " << law.result.detail);
            CHECK(law.result.ok);
        }
    }
}

TEST_CASE("interchange on chosen dimensions matches the oracle") {
    // Position 3 of a five-token input, dimensions 10-12 of mlp_output.
    const Model model = toy_model(4);
    ModelInput base = ModelInput::from_ids({{5, 6, 7, 8, 9}});
    ModelInput source = ModelInput::from_ids({{5, 6, 7, 20, 9}});
    IntervenableModel pv(model, one(spec("mlp_output", 0, "vanilla")));
    RunRequest req;
    req.base = base;
    req.sources = {source};
    req.unit_locations["sources->base"] = LocationLink::same(IndexTree(3));
    req.subspaces = IndexTree(std::vector<int64_t>{10, 11, 12});
    const Tensor got = pv.run(req).intervened.logits;

    const SiteKey key{"mlp_output", 0};
    const Tensor src = testing::record_site(model, source, key);
    testing::SpliceHook hook(key, testing::SpliceKind::vanilla,
                             {{0, 3, testing::row_of(src, 0, 3), std::vector<int64_t>{10, 11, 12}}});
    CHECK(got.bit_equal(model.forward(base, &hook).logits));
}

TEST_CASE("zeroing three dimensions changes the final logits") {
    const Model model = toy_model(5);
    ModelInput base = ModelInput::from_ids({{5, 6, 7, 8, 9}});
    IntervenableModel pv(model, one(spec("mlp_output", 0, "zero")));
    RunRequest req;
    req.base = base;
    req.unit_locations["base"] = LocationLink::base_only(IndexTree(3));
    req.subspaces = IndexTree(std::vector<int64_t>{10, 11, 12});
    CHECK_FALSE(pv.run(req).intervened.logits.bit_equal(model.forward(base).logits));
}

TEST_CASE("collect-only wrapping is neutral and unwrap is the same model") {
    const Model model = toy_model(6);
    IntervenableConfig c;
    for (const auto& s : model.schema().sites()) {
        c.add_intervention(spec(s.key.component, s.key.layer, "collect"));
    }
    IntervenableModel pv(model, c);
    ModelInput base = ModelInput::from_ids({{4, 8, 15, 16}, {23, 4, 2, 9}});
    RunRequest req;
    req.base = base;
    const IntervenedOutput out = pv.run(req);
    CHECK(out.intervened.logits.bit_equal(model.forward(base).logits));
    CHECK(out.collected.size() == c.size());
    CHECK(pv.unwrap().forward(base).logits.bit_equal(model.forward(base).logits));
    for (const auto& [name, t] : model.parameters()) {
        CHECK(pv.model().param(name).bit_equal(t));
    }
}

TEST_CASE("vanilla with identical base and source is the identity") {
    const Model model = toy_model(7);
    ModelInput base = ModelInput::from_ids({{4, 5, 6, 7}});
    IntervenableModel pv(model, one(spec("block_output", 2, "vanilla")));
    RunRequest req;
    req.base = base;
    req.sources = {base};
    CHECK(pv.run(req).intervened.logits.bit_equal(model.forward(base).logits));
}

TEST_CASE("two calls give the same answer") {
    const Model model = toy_model(8);
    IntervenableModel pv(model, one(spec("block_output", 1, "noise")));
    RunRequest req;
    req.base = ModelInput::from_ids({{4, 5, 6}});
    req.output_original = true;
    const auto a = pv.run(req);
    const auto b = pv.run(req);
    CHECK(a.intervened.logits.bit_equal(b.intervened.logits));
    CHECK(a.original->logits.bit_equal(model.forward(req.base).logits));
}

TEST_CASE("parallel sources with per-intervention positions") {
    const Model model = toy_model(9);
    IntervenableConfig c;
    c.add_intervention(spec("block_output", 0, "vanilla"));
    c.add_intervention(spec("block_output", 2, "vanilla"));
    IntervenableModel pv(model, c);
    ModelInput base = ModelInput::from_ids({{4, 5, 6, 7, 8}});
    ModelInput s0 = ModelInput::from_ids({{9, 10, 11, 12, 13}});
    ModelInput s1 = ModelInput::from_ids({{14, 15, 16, 17, 18}});
    RunRequest req;
    req.base = base;
    req.sources = {s0, s1};
    const IndexTree locs = IndexTree::from_json(nlohmann::json::parse("[[[1]], [[3]]]"));
    req.unit_locations["sources->base"] = LocationLink::pair(locs, locs);
    const Tensor got = pv.run(req).intervened.logits;

    const SiteKey k0{"block_output", 0};
    const SiteKey k2{"block_output", 2};
    testing::OracleHook hook;
    hook.splice(testing::SpliceHook(k0, testing::SpliceKind::vanilla,
                                    {{0, 1, testing::row_of(testing::record_site(model, s0, k0), 0, 1), {}}}));
    hook.splice(testing::SpliceHook(k2, testing::SpliceKind::vanilla,
                                    {{0, 3, testing::row_of(testing::record_site(model, s1, k2), 0, 3), {}}}));
    CHECK(got.bit_equal(model.forward(base, &hook).logits));
}

TEST_CASE("run errors") {
    const Model model = toy_model(10);
    IntervenableModel pv(model, one(spec("block_output", 0, "vanilla")));
    RunRequest req;
    req.base = ModelInput::from_ids({{4, 5, 6}});
    CHECK(code_of([&] { pv.run(req); }) == ErrorCode::MissingSource);
    req.sources = {req.base};
    req.unit_locations["sources->base"] = LocationLink::same(IndexTree(7));
    CHECK(code_of([&] { pv.run(req); }) == ErrorCode::LocationOutOfRange);
    req.unit_locations["sources->base"] = LocationLink::same(IndexTree(1));
    req.subspaces = IndexTree(std::vector<int64_t>{999});
    CHECK(code_of([&] { pv.run(req); }) == ErrorCode::SubspaceOutOfRange);
    req.subspaces = {};
    req.unit_locations.clear();
    req.unit_locations["source_0->base"] = LocationLink::same(IndexTree(1));
    CHECK(code_of([&] { pv.run(req); }) == ErrorCode::IndexShapeMismatch);
    CHECK(code_of([&] { pv.run_time_gated(req); }) == ErrorCode::UnknownSite);

    CHECK(code_of([&] { IntervenableModel(model, one(spec("cell_output", 0, "vanilla"))); }) ==
          ErrorCode::UnknownSite);
}

TEST_CASE("time steps out of range") {
    const Model gru = testing::toy_gru(1);
    InterventionSpec s = spec("cell_output", 0, "zero");
    s.unit = UnitKind::t;
    IntervenableModel pv(gru, one(s));
    RunRequest req;
    req.base = ModelInput::from_embeds(Tensor::full({1, 10, 32}, 0.1));
    req.unit_locations["base"] = LocationLink::base_only(IndexTree(10));
    CHECK(code_of([&] { pv.run_time_gated(req); }) == ErrorCode::TimeStepOutOfRange);
}

TEST_CASE("source step six into base step three") {
    const Model gru = testing::toy_gru(2);
    InterventionSpec s = spec("cell_output", 0, "vanilla");
    s.unit = UnitKind::t;
    IntervenableConfig c = one(s);
    c.add_intervention([] {
        InterventionSpec k = spec("cell_output", 0, "collect");
        k.unit = UnitKind::t;
        return k;
    }());
    IntervenableModel pv(gru, c);
    ModelInput base = ModelInput::from_embeds(Tensor::full({1, 10, 32}, 0.1));
    ModelInput source = ModelInput::from_embeds(Tensor::full({1, 10, 32}, -0.3));
    RunRequest req;
    req.base = base;
    req.sources = {source};
    const IndexTree src = IndexTree::from_json(nlohmann::json::parse("[[[6]], [[3]]]"));
    const IndexTree dst = IndexTree::from_json(nlohmann::json::parse("[[[3]], [[3]]]"));
    req.unit_locations["sources->base"] = LocationLink::pair(src, dst);
    const Tensor written = pv.run_time_gated(req).collected.at(0);
    const auto want = testing::row_of(testing::record_site(gru, source, {"cell_output", 0}), 0, 6);
    for (int64_t j = 0; j < 32; ++j) {
        CHECK(written[j] == want[static_cast<size_t>(j)]);
    }
}

TEST_CASE("constant sources and their precedence") {
    const Model model = toy_model(11);
    const int64_t d = model.schema().hidden_dim;
    InterventionSpec s = spec("mlp_output", 1, "addition");
    s.constant_source = Tensor::full({d}, 0.5);
    IntervenableModel pv(model, one(s));
    RunRequest req;
    req.base = ModelInput::from_ids({{4, 5, 6}});
    req.unit_locations["base"] = LocationLink::base_only(IndexTree(2));
    const Tensor from_spec = pv.run(req).intervened.logits;
    req.source_representations[0] = Tensor::full({d}, -1.0);
    const Tensor from_call = pv.run(req).intervened.logits;

    const SiteKey key{"mlp_output", 1};
    testing::SpliceHook spec_hook(key, testing::SpliceKind::addition,
                                  {{0, 2, std::vector<double>(static_cast<size_t>(d), 0.5), {}}});
    testing::SpliceHook call_hook(key, testing::SpliceKind::addition,
                                  {{0, 2, std::vector<double>(static_cast<size_t>(d), -1.0), {}}});
    CHECK(from_spec.bit_equal(model.forward(req.base, &spec_hook).logits));
    CHECK(from_call.bit_equal(model.forward(req.base, &call_hook).logits));

    req.source_representations[0] = Tensor::full({3}, 1.0);
    CHECK(code_of([&] { pv.run(req); }) == ErrorCode::DimMismatch);
}

TEST_CASE("generation with additions") {
    const Model model = toy_model(12);
    const int64_t d = model.schema().hidden_dim;
    const std::vector<int64_t> prompt = {4, 9, 11};
    IntervenableConfig c;
    for (int64_t l = 0; l < model.schema().num_layers; ++l) {
        InterventionSpec s = spec("mlp_output", l, "addition");
        s.constant_source = Tensor::zeros({d});
        c.add_intervention(s);
    }
    IntervenableModel zero_pv(model, c);
    GenerateOptions opts;
    opts.steps = 5;
    const GenerateResult g = zero_pv.generate(prompt, opts);
    CHECK(g.ids == greedy_decode(model, prompt, 5));

    for (auto& s : c.interventions) {
        s.constant_source = Tensor::full({d}, 0.8);
    }
    IntervenableModel pv(model, c);
    GenerateOptions first;
    first.steps = 3;
    first.step_selector = std::set<int64_t>{0};
    const GenerateResult r = pv.generate(prompt, first);
    GenerateOptions none = first;
    none.step_selector = std::set<int64_t>{};
    const GenerateResult plain = pv.generate(prompt, none);
    CHECK(plain.ids == greedy_decode(model, prompt, 3));
    CHECK_FALSE(r.step_logits[0].bit_equal(plain.step_logits[0]));

    // Later steps see the step-0 position as written, nothing else.
    std::vector<int64_t> seq = prompt;
    seq.insert(seq.end(), r.ids.begin(), r.ids.end() - 1);
    RunRequest req;
    req.base = ModelInput::from_ids({seq});
    req.unit_locations["base"] = LocationLink::base_only(IndexTree(static_cast<int64_t>(prompt.size()) - 1));
    const Tensor full = pv.run(req).intervened.logits;
    const int64_t vocab = full.dim(2);
    const int64_t last = full.dim(1) - 1;
    for (int64_t j = 0; j < vocab; ++j) {
        CHECK(r.step_logits[2][j] == full[last * vocab + j]);
    }

    GenerateOptions too_long;
    too_long.steps = 20;
    CHECK(code_of([&] { pv.generate(prompt, too_long); }) == ErrorCode::SequenceTooLong);
}

TEST_CASE("trainable parameter handles") {
    ModelSchema s = testing::toy_transformer(2, 64);
    const Model model = Model::build(s, 1);
    InterventionSpec lr = spec("block_output", 0, "low_rank_rotated");
    lr.low_rank_dimension = 1;
    IntervenableModel pv(model, one(lr));
    CHECK(pv.num_trainable_scalars() == 64);
    IntervenableModel vanilla(model, one(spec("block_output", 0, "vanilla")));
    CHECK(vanilla.num_trainable_scalars() == 0);

    pv.enable_model_gradients();
    CHECK(pv.num_trainable_scalars() > 64);
    RunRequest req;
    req.base = ModelInput::from_ids({{4, 5, 6}});
    req.sources = {ModelInput::from_ids({{7, 8, 9}})};
    Tape tape;
    TapeScope scope(tape);
    const Tensor logits = pv.run(req).intervened.logits;
    const int64_t target[] = {5, 6, 7};
    const GradMap g = backward(cross_entropy(reshape(logits, {3, logits.dim(2)}), target));
    const Tensor gw = grad_of(g, pv.model().param("h1.mlp.w_in"));
    double norm = 0.0;
    for (int64_t i = 0; i < gw.numel(); ++i) norm += std::abs(gw[i]);
    CHECK(norm > 0.0);
}
