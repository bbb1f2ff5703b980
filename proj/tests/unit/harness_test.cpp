// Copyright 2026 The pvt Authors
// SPDX-License-Identifier: Apache-2.0

#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>

#include <doctest.h>

#include "pvt/blob.hpp"
#include "pvt/harness.hpp"

using namespace pvt;
using namespace pvt::harness;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

fs::path fresh(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("pvt_harness_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

Model small_model(const Dataset& data, int64_t layers, uint64_t seed) {
    ModelSchema s = default_transformer_schema();
    s.num_layers = layers;
    s.hidden_dim = 16;
    s.num_heads = 2;
    s.max_positions = 16;
    Vocab v = dataset_vocab(data);
    s.vocab_size = v.size();
    return Model::build(s, seed, v);
}

}  // namespace

TEST_CASE("trace window") {
    auto check = [](int64_t l, int64_t w, int64_t tl, int64_t s, int64_t e) {
        const TraceWindow win = trace_window(l, w, tl);
        INFO("l=" << l << " w=" << w);
        CHECK(win.begin == s);
        CHECK(win.end == e);
    };
    check(0, 10, 8, 0, 5);
    check(3, 10, 8, 0, 8);
    check(7, 10, 8, 2, 8);
    check(3, 1, 8, 3, 4);
    check(4, 3, 8, 3, 6);  // odd widths lean right
    check(20, 10, 48, 15, 25);
    for (int64_t tl = 1; tl <= 12; ++tl) {
        for (int64_t w = 1; w <= 12; ++w) {
            for (int64_t l = 0; l < tl; ++l) {
                const TraceWindow win = trace_window(l, w, tl);
                CHECK(0 <= win.begin);
                CHECK(win.begin <= l);
                CHECK(l < win.end);
                CHECK(win.end <= tl);
            }
        }
    }
}

TEST_CASE("pronoun dataset") {
    const Dataset d = make_dataset(Task::pronoun, 0);
    std::map<std::string, int> gender_of;
    for (const auto& e : d.examples) {
        REQUIRE(e.prompt.size() == 4);
        CHECK(e.answer == (e.label == 1 ? "she" : "he"));
        auto [it, fresh_name] = gender_of.emplace(e.prompt[1], e.label);
        CHECK(it->second == e.label);
    }
    int female = 0;
    for (const auto& [name, g] : gender_of) female += g;
    CHECK(gender_of.size() == 40);
    CHECK(female == 20);
}

TEST_CASE("fact prompts have a fixed length") {
    const Dataset d = make_dataset(Task::fact_lookup, 0);
    REQUIRE_FALSE(d.examples.empty());
    for (const auto& e : d.examples) {
        CHECK(e.prompt.size() == d.examples[0].prompt.size());
    }
    CHECK_FALSE(d.subject_positions.empty());
}

TEST_CASE("datasets are deterministic and round trip") {
    for (Task task : {Task::fact_lookup, Task::pronoun, Task::story}) {
        const fs::path a = fresh("data_a");
        const fs::path b = fresh("data_b");
        save_dataset(make_dataset(task, 3), a);
        save_dataset(make_dataset(task, 3), b);
        CHECK(slurp(a / "dataset.json") == slurp(b / "dataset.json"));
        const Dataset back = load_dataset(a);
        CHECK(back.task == task);
        CHECK(back.examples.size() == make_dataset(task, 3).examples.size());
        fs::remove_all(a);
        fs::remove_all(b);
    }
    CHECK(parse_task("pronoun") == Task::pronoun);
    CHECK_THROWS_AS(parse_task("poetry"), Error);
}

TEST_CASE("pair construction") {
    const Dataset d = make_dataset(Task::pronoun, 0);
    std::vector<size_t> pool(d.examples.size());
    std::iota(pool.begin(), pool.end(), 0);
    const PairSet cf = counterfactual_pairs(d, pool, 300, 1);
    for (size_t i = 0; i < cf.base.size(); ++i) {
        CHECK(d.examples[cf.base[i]].label != d.examples[cf.source[i]].label);
    }
    const PairSet bal = balanced_pairs(d, pool, 300, 2);
    size_t same = 0;
    for (size_t i = 0; i < bal.base.size(); ++i) {
        same += d.examples[bal.base[i]].label == d.examples[bal.source[i]].label ? 1 : 0;
    }
    CHECK(same == 150);
}

TEST_CASE("trace grid on a random model") {
    const Dataset d = make_dataset(Task::fact_lookup, 0);
    const Model m = small_model(d, 3, 1);
    const Vocab& v = m.vocab();
    const auto& ex = d.examples[0];
    const std::vector<int64_t> prompt = encode_tokens(v, ex.prompt);
    TraceOptions opts;
    opts.subject_positions = d.subject_positions;
    const TraceResult r = trace_prompt(m, prompt, v.id(ex.answer), opts);
    CHECK(r.rows.size() == 3 * 3 * prompt.size());
    std::set<std::tuple<std::string, int64_t, int64_t>> cells;
    for (const auto& row : r.rows) {
        CHECK(row.prob >= 0.0);
        CHECK(row.prob <= 1.0);
        cells.emplace(row.stream, row.layer, row.pos);
    }
    CHECK(cells.size() == r.rows.size());
    CHECK(std::abs(r.full_restore_prob - r.clean_prob) < 1e-4);
    CHECK(r.clean_prob == doctest::Approx(gold_probability(m.forward(ModelInput::from_ids({prompt})).logits,
                                                           v.id(ex.answer))));
    CHECK(embedding_noise_scale(m) > 0.0);
}

TEST_CASE("csv outputs") {
    const fs::path dir = fresh("csv");
    write_trace_csv(dir / "t.csv", {{"block_output", 1, 2, 0.25}});
    write_grid_csv(dir / "g.csv", {{3, 1, "iia", 0.5}, {3, 1, "probe_acc", 1.0}});
    CHECK(slurp(dir / "t.csv") == "stream,layer,pos,prob\nblock_output,1,2,0.25\n");
    CHECK(slurp(dir / "g.csv") == "layer,pos,metric,value\n3,1,iia,0.5\n3,1,probe_acc,1\n");
    fs::remove_all(dir);
}

TEST_CASE("config validation") {
    const Dataset d = make_dataset(Task::pronoun, 0);
    const Model m = small_model(d, 2, 0);
    const fs::path dir = fresh("validate");
    auto verdict = [&](const std::string& text) {
        write_text(dir / "c.json", text);
        return validate_config(dir / "c.json", m);
    };
    CHECK_FALSE(verdict(R"({"layer": 0, "component": "mlp_output", "intervention_type": "zero"})").has_value());
    const auto serial = verdict(R"({"mode": "serial", "interventions": [{"layer": 0}]})");
    REQUIRE(serial.has_value());
    CHECK(serial->find("SerialOrderViolation") != std::string::npos);
    CHECK(verdict(R"({"component": "block_output", "unit": "t"})").has_value());
    CHECK(verdict("not json").has_value());
    CHECK(validate_config(dir / "missing.json", m).has_value());
    fs::remove_all(dir);
}

TEST_CASE("steering with coefficient zero is a no-op") {
    const Dataset d = make_dataset(Task::story, 0);
    const Model m = small_model(d, 2, 4);
    SteerOptions opts;
    opts.coefficient = 0.0;
    opts.steps = 4;
    const SteerReport r = steer(m, {{"<bos>", "the", "dog", "was"}, {"<bos>", "the", "cat"}}, opts);
    REQUIRE(r.samples.size() == 2);
    for (const auto& s : r.samples) {
        CHECK(s.logits_identical);
        CHECK(s.original == s.steered);
    }
    CHECK(r.mean_shift == 0.0);
    opts.steer_token = "zebra";
    CHECK_THROWS_AS(steer(m, {{"<bos>", "the"}}, opts), Error);
}

TEST_CASE("shuffled-label probe is near chance") {
    const Dataset d = make_dataset(Task::pronoun, 0);
    const Model m = small_model(d, 2, 5);
    ProbeOptions opts;
    opts.layer = 1;
    opts.pos = 1;
    opts.shuffle_labels = true;
    const double acc = train_probe(m, d, opts);
    CHECK(acc > 0.4);
    CHECK(acc < 0.6);
    CHECK(train_probe(m, d, opts) == acc);
}

TEST_CASE("pronoun model, identity swaps and probes") {
    const Dataset d = make_dataset(Task::pronoun, 0);
    ModelShape shape;
    shape.num_layers = 2;
    TrainedModel t = train_task_model(d, shape, default_training(Task::pronoun));
    CHECK(t.report.accuracy == 1.0);

    DasOptions opts;
    opts.layer = 1;
    opts.pos = 1;
    opts.epochs = 0;
    const DasResult das = train_das(t.model, d, opts);
    std::vector<size_t> all(d.examples.size());
    std::iota(all.begin(), all.end(), 0);
    const PairSet self{all, all};
    CHECK(interchange_accuracy(das.pv_model, d, self, 1) == 1.0);

    ProbeOptions probe;
    probe.layer = 1;
    probe.pos = 1;
    CHECK(train_probe(t.model, d, probe) >= 0.95);
}
