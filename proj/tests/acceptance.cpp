// Copyright 2026 The pvt Authors
// SPDX-License-Identifier: Apache-2.0
//
// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
// failure. `pvt_acceptance 3 7` runs a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "pvt/harness.hpp"
#include "support/engine_cases.hpp"
#include "support/grad_cases.hpp"

using namespace pvt;
using namespace pvt::harness;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

class Clock {
public:
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

Outcome gradients() {
    Clock clock;
    double worst = 0.0;
    std::string worst_name;
    size_t checks = 0;
    std::vector<testing::GradCase> cases = testing::primitive_grad_cases();
    for (auto& c : testing::intervention_grad_cases()) cases.push_back(std::move(c));
    for (const auto& c : cases) {
        for (uint64_t seed = 0; seed < 100; ++seed) {
            const double err = c.run(seed);
            ++checks;
            if (!(err <= worst)) {
                worst = err;
                worst_name = c.name;
            }
        }
    }
    const double secs = clock.seconds();
    return {worst < 1e-4 && secs < 60.0,
            fmt("%zu checks, max rel err %.2e (%s), %.1fs", checks, worst, worst_name.c_str(), secs)};
}

Outcome counted(const std::string& what, size_t total, const std::function<testing::CaseResult(uint64_t)>& run) {
    size_t ok = 0;
    std::string first;
    for (uint64_t seed = 0; seed < total; ++seed) {
        const auto r = run(seed);
        if (r.ok) {
            ++ok;
        } else if (first.empty()) {
            first = fmt(" first failure seed %llu: %s", static_cast<unsigned long long>(seed), r.detail.c_str());
        }
    }
    return {ok == total, fmt("%zu/%zu %s bit-exact%s", ok, total, what.c_str(), first.c_str())};
}

Outcome splice() {
    const Model model = testing::toy_model(1);
    return counted("splice configs", 50, [&](uint64_t s) { return testing::splice_case(model, s); });
}

Outcome laws() {
    size_t ok = 0;
    size_t total = 0;
    std::set<std::string> names;
    std::string first;
    for (uint64_t model_seed = 0; model_seed < 2; ++model_seed) {
        const Model model = testing::toy_model(model_seed + 3);
        for (uint64_t seed = 0; seed < 10; ++seed) {
            for (const auto& law : testing::algebra_laws(model, seed)) {
                ++total;
                names.insert(law.law);
                if (law.result.ok) {
                    ++ok;
                } else if (first.empty()) {
                    first = " first failure: " + law.law + ": " + law.result.detail;
                }
            }
        }
    }
    return {ok == total, fmt("%zu/%zu checks over %zu laws%s", ok, total, names.size(), first.c_str())};
}

Outcome serial() {
    const Model model = testing::toy_model(2);
    return counted("two-link chains", 20, [&](uint64_t s) { return testing::serial_case(model, s); });
}

Outcome recurrent() {
    return counted("GRU cases", 20, [](uint64_t s) { return testing::gru_case(s); });
}

Outcome roundtrip() {
    const Model model = testing::toy_model(6);
    const auto dir = std::filesystem::temp_directory_path() / "pvt_acceptance_bundles";
    const auto kinds = testing::roundtrip_kinds();
    size_t ok = 0;
    std::string failed;
    for (const auto& kind : kinds) {
        const auto r = testing::roundtrip_case(model, kind, dir / kind);
        if (r.ok) {
            ++ok;
        } else {
            failed += " " + r.detail;
        }
    }
    std::filesystem::remove_all(dir);
    return {ok == kinds.size(), fmt("%zu/%zu kinds reload bit-exact%s", ok, kinds.size(), failed.c_str())};
}

Outcome tracing() {
    Clock clock;
    const Dataset data = make_dataset(Task::fact_lookup, 0);
    const TrainedModel trained = train_task_model(data, default_shape(Task::fact_lookup),
                                                  default_training(Task::fact_lookup));
    const Model& model = trained.model;
    const Vocab& vocab = model.vocab();

    const size_t n = 24;
    const int64_t subject_last = data.subject_positions.back();
    const size_t stride = data.examples.size() / n;
    double clean = 0.0;
    double noise = 0.0;
    double worst_restore = 0.0;
    std::map<std::pair<std::string, int64_t>, double> heat;
    TraceOptions opts;
    opts.subject_positions = data.subject_positions;
    for (size_t i = 0; i < n; ++i) {
        const Example& e = data.examples[i * stride];
        const TraceResult r = trace_prompt(model, encode_tokens(vocab, e.prompt), vocab.id(e.answer), opts);
        clean += r.clean_prob / n;
        noise += r.noise_prob / n;
        worst_restore = std::max(worst_restore, std::abs(r.full_restore_prob - r.clean_prob));
        for (const auto& row : r.rows) {
            if (row.pos == subject_last) heat[{row.stream, row.layer}] += row.prob / n;
        }
    }
    double best = 0.0;
    std::string best_cell;
    for (const auto& [cell, p] : heat) {
        if (p > best) {
            best = p;
            best_cell = cell.first + "@" + std::to_string(cell.second);
        }
    }
    const double secs = clock.seconds();
    const bool acc_ok = trained.report.accuracy >= 0.99;
    const bool a = noise < clean;
    const bool b = worst_restore < 1e-4;
    const bool c = best - noise >= 0.2;
    return {acc_ok && a && b && c && secs < 600.0,
            fmt("accuracy %.3f; %zu prompts: (a) noise %.3f < clean %.3f %s; (b) full restore max |diff| %.1e %s; "
                "(c) best restore at subject last token %.3f (%s), gain %.3f %s; %.0fs",
                trained.report.accuracy, n, noise, clean, a ? "ok" : "FAIL", worst_restore, b ? "ok" : "FAIL", best,
                best_cell.c_str(), best - noise, c ? "ok" : "FAIL", secs)};
}

const Model& pronoun_model() {
    static const Model model = [] {
        const Dataset data = make_dataset(Task::pronoun, 0);
        return train_task_model(data, default_shape(Task::pronoun), default_training(Task::pronoun)).model;
    }();
    return model;
}

Outcome localization() {
    Clock clock;
    const Dataset data = make_dataset(Task::pronoun, 0);
    const Model& model = pronoun_model();
    const auto iia = das_grid(model, data, DasOptions{});
    const auto probe = probe_grid(model, data, ProbeOptions{});
    std::map<std::pair<int64_t, int64_t>, double> iia_at;
    size_t iia_high = 0;
    for (const auto& r : iia) {
        iia_at[{r.layer, r.pos}] = r.value;
        iia_high += r.value > 0.9 ? 1 : 0;
    }
    size_t probe_high = 0;
    std::string witness;
    for (const auto& r : probe) {
        probe_high += r.value > 0.9 ? 1 : 0;
        if (witness.empty() && r.value >= 0.95 && iia_at.at({r.layer, r.pos}) <= 0.6) {
            witness = fmt("layer %lld pos %lld probe %.3f iia %.3f", static_cast<long long>(r.layer),
                          static_cast<long long>(r.pos), r.value, iia_at.at({r.layer, r.pos}));
        }
    }
    const double secs = clock.seconds();
    return {iia_high < probe_high && !witness.empty() && secs < 900.0,
            fmt("cells IIA>0.9: %zu, probe>0.9: %zu of %zu; witness: %s; %.0fs", iia_high, probe_high, iia.size(),
                witness.empty() ? "none" : witness.c_str(), secs)};
}

Outcome steering() {
    const Dataset data = make_dataset(Task::story, 0);
    const TrainedModel trained = train_task_model(data, default_shape(Task::story), default_training(Task::story));
    std::vector<std::vector<std::string>> prompts;
    for (const char* animal : {"dog", "cat", "bird", "fox", "bear", "frog"}) {
        prompts.push_back({"<bos>", "the", animal});
        prompts.push_back({"<bos>", "the", animal, "was"});
    }
    SteerOptions opts;
    const SteerReport on = steer(trained.model, prompts, opts);
    opts.coefficient = 0.0;
    const SteerReport off = steer(trained.model, prompts, opts);
    size_t identical = 0;
    for (size_t i = 0; i < prompts.size(); ++i) {
        const auto ids = encode_tokens(trained.model.vocab(), prompts[i]);
        const auto plain = greedy_decode(trained.model, ids, opts.steps);
        const bool same = off.samples[i].logits_identical &&
                          trained.model.vocab().encode(off.samples[i].steered) == plain;
        identical += same ? 1 : 0;
    }
    return {on.mean_shift > 0.0 && identical == prompts.size(),
            fmt("%zu prompts: mean steer-token logit shift %+.4f at 0.3; coefficient 0 identical on %zu/%zu",
                prompts.size(), on.mean_shift, identical, prompts.size())};
}

Outcome nulls() {
    const Dataset data = make_dataset(Task::pronoun, 0);
    const Model& model = pronoun_model();
    DasOptions das;
    das.layer = 4;
    das.pos = 1;
    das.epochs = 0;
    das.eval_pairs = 400;
    const double iia = train_das(model, data, das).iia;
    ProbeOptions probe;
    probe.layer = 4;
    probe.pos = 1;
    probe.shuffle_labels = true;
    const double acc = train_probe(model, data, probe);
    const size_t held_out = data.examples.size() / 2;
    const bool ok = std::abs(iia - 0.5) <= 0.1 && std::abs(acc - 0.5) <= 0.1 && das.eval_pairs >= 200 &&
                    held_out >= 200;
    return {ok, fmt("untrained k=1 IIA %.3f over %zu pairs; shuffled probe %.3f over %zu held-out examples", iia,
                    das.eval_pairs, acc, held_out)};
}

struct Criterion {
    int id;
    const char* name;
    Outcome (*run)();
};

}  // namespace

int main(int argc, char** argv) {
    const std::vector<Criterion> all = {
        {1, "gradient oracle", gradients},
        {2, "splice-oracle equivalence", splice},
        {3, "algebraic laws", laws},
        {4, "serial/parallel consistency", serial},
        {5, "recurrent gating", recurrent},
        {6, "serialization round-trip", roundtrip},
        {7, "causal tracing", tracing},
        {8, "DAS vs probe", localization},
        {9, "steering", steering},
        {10, "null baselines", nulls},
    };
    std::set<int> only;
    for (int i = 1; i < argc; ++i) only.insert(std::stoi(argv[i]));

    int failures = 0;
    for (const auto& c : all) {
        if (!only.empty() && !only.count(c.id)) continue;
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        failures += o.pass ? 0 : 1;
        std::printf("%s [%d] %s: %s\n", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str());
        std::fflush(stdout);
    }
    return failures == 0 ? 0 : 1;
}
