// Copyright 2026 The pvt Authors
// SPDX-License-Identifier: Apache-2.0
//
// pvt: command-line harness for the toy intervention studies.

#include <CLI11.hpp>

#include <iostream>
#include <map>
#include <sstream>

#include "pvt/blob.hpp"
#include "pvt/bundle.hpp"
#include "pvt/harness.hpp"

using namespace pvt;
namespace h = pvt::harness;

namespace {

struct Common {
    std::string model;
    uint64_t seed = 0;
    std::string out;
};

void add_common(CLI::App* app, Common& c, bool needs_model) {
    auto* m = app->add_option("--model", c.model, "Model checkpoint directory");
    if (needs_model) m->required();
    app->add_option("--seed", c.seed, "Random seed");
    app->add_option("--out", c.out, "Output path")->required();
}

std::vector<std::string> split_words(const std::string& text) {
    std::istringstream in(text);
    std::vector<std::string> out;
    for (std::string w; in >> w;) out.push_back(w);
    return out;
}

int cmd_make_data(const Common& c, const std::string& task) {
    const auto data = h::make_dataset(h::parse_task(task), c.seed);
    h::save_dataset(data, c.out);
    std::cout << "wrote " << data.examples.size() << " examples";
    if (!data.auxiliary.empty()) std::cout << " and " << data.auxiliary.size() << " auxiliary lines";
    std::cout << " to " << c.out << "/dataset.json\n";
    return 0;
}

struct TrainArgs {
    std::string data;
    int64_t layers = -1;
    int64_t dim = -1;
    int64_t heads = -1;
    int64_t epochs = -1;
    int64_t aux_epochs = -1;
    double lr = -1;
};

int cmd_train_model(const Common& c, const TrainArgs& a) {
    const auto data = h::load_dataset(a.data);
    auto shape = h::default_shape(data.task);
    auto training = h::default_training(data.task);
    if (a.layers > 0) shape.num_layers = a.layers;
    if (a.dim > 0) shape.hidden_dim = a.dim;
    if (a.heads > 0) shape.num_heads = a.heads;
    if (a.epochs >= 0) training.hyper.epochs = a.epochs;
    if (a.aux_epochs >= 0) training.auxiliary_epochs = a.aux_epochs;
    if (a.lr > 0) training.hyper.lr = a.lr;
    training.hyper.seed = c.seed;
    auto trained = h::train_task_model(data, shape, training);
    trained.model.save(c.out);
    std::cout << "accuracy " << h::format_number(trained.report.accuracy) << "\n";
    if (!trained.report.loss_curve.empty()) {
        std::cout << "final loss " << h::format_number(trained.report.loss_curve.back()) << "\n";
    }
    return 0;
}

struct TraceArgs {
    std::string data;
    std::string prompt;
    std::string gold;
    int64_t num_prompts = 20;
    int64_t window = 10;
    double noise_scale = 0.0;
    std::vector<int64_t> subject;
};

int cmd_trace(const Common& c, const TraceArgs& a) {
    const Model model = Model::load(c.model);
    h::TraceOptions o;
    o.window = a.window;
    o.noise_scale = a.noise_scale;
    o.noise_seed = c.seed;

    std::vector<std::pair<std::vector<std::string>, std::string>> prompts;
    if (!a.prompt.empty()) {
        if (a.gold.empty()) throw CLI::ValidationError("--gold", "required with --prompt");
        prompts.emplace_back(split_words(a.prompt), a.gold);
    } else {
        if (a.data.empty()) throw CLI::ValidationError("--data", "give --data or --prompt");
        const auto data = h::load_dataset(a.data);
        if (!data.subject_positions.empty()) o.subject_positions = data.subject_positions;
        for (size_t i = 0; i < data.examples.size() && static_cast<int64_t>(prompts.size()) < a.num_prompts; ++i) {
            prompts.emplace_back(data.examples[i].prompt, data.examples[i].answer);
        }
    }
    if (!a.subject.empty()) o.subject_positions = a.subject;
    if (prompts.empty()) {
        fail(ErrorCode::EmptyDataset, "no prompts to trace");
    }

    std::vector<h::TraceRow> mean;
    double clean = 0, noise = 0, full = 0;
    const double n = static_cast<double>(prompts.size());
    for (size_t i = 0; i < prompts.size(); ++i) {
        o.noise_seed = c.seed + i;
        const auto r = h::trace_prompt(model, h::encode_tokens(model.vocab(), prompts[i].first),
                                       model.vocab().id(prompts[i].second), o);
        clean += r.clean_prob / n;
        noise += r.noise_prob / n;
        full += r.full_restore_prob / n;
        if (mean.empty()) {
            mean = r.rows;
            for (auto& row : mean) row.prob = 0.0;
        }
        for (size_t j = 0; j < r.rows.size(); ++j) mean[j].prob += r.rows[j].prob / n;
    }
    h::write_trace_csv(c.out, mean);
    std::cout << "prompts " << prompts.size() << "\nclean " << h::format_number(clean) << "\nnoise "
              << h::format_number(noise) << "\nfull_restore " << h::format_number(full) << "\n";
    return 0;
}

struct LocalizeArgs {
    std::string data;
    int64_t layer = 0;
    int64_t position = 0;
    int64_t k = 1;
    int64_t epochs = -1;
    bool grid = false;
    bool shuffle = false;
};

int cmd_train_das(const Common& c, const LocalizeArgs& a) {
    const Model model = Model::load(c.model);
    const auto data = h::load_dataset(a.data);
    h::DasOptions o;
    o.layer = a.layer;
    o.pos = a.position;
    o.k = a.k;
    o.seed = c.seed;
    if (a.epochs >= 0) o.epochs = a.epochs;
    if (a.grid) {
        const auto rows = h::das_grid(model, data, o);
        h::write_grid_csv(c.out, rows);
        std::cout << "wrote " << rows.size() << " cells to " << c.out << "\n";
        return 0;
    }
    auto r = h::train_das(model, data, o);
    save_bundle(r.pv_model, c.out, false);
    h::write_grid_csv(std::filesystem::path(c.out) / "metrics.csv", {{a.layer, a.position, "iia", r.iia}});
    std::cout << "iia " << h::format_number(r.iia) << "\n";
    return 0;
}

int cmd_train_probe(const Common& c, const LocalizeArgs& a) {
    const Model model = Model::load(c.model);
    const auto data = h::load_dataset(a.data);
    h::ProbeOptions o;
    o.layer = a.layer;
    o.pos = a.position;
    o.seed = c.seed;
    o.shuffle_labels = a.shuffle;
    if (a.epochs >= 0) o.epochs = a.epochs;
    std::vector<h::GridRow> rows;
    if (a.grid) {
        rows = h::probe_grid(model, data, o);
    } else {
        rows.push_back({a.layer, a.position, "probe_acc", h::train_probe(model, data, o)});
        std::cout << "accuracy " << h::format_number(rows[0].value) << "\n";
    }
    h::write_grid_csv(c.out, rows);
    return 0;
}

struct SteerArgs {
    std::vector<std::string> prompts;
    std::string token = "happy";
    double coefficient = 0.3;
    int64_t steps = 6;
};

int cmd_steer(const Common& c, const SteerArgs& a) {
    const Model model = Model::load(c.model);
    std::vector<std::vector<std::string>> prompts;
    for (const auto& p : a.prompts) prompts.push_back(split_words(p));
    const auto report = h::steer(model, prompts, {a.token, a.coefficient, a.steps});
    nlohmann::json samples = nlohmann::json::array();
    for (const auto& s : report.samples) {
        samples.push_back({{"prompt", s.prompt},
                           {"original", s.original},
                           {"steered", s.steered},
                           {"original_logit", s.original_logit},
                           {"steered_logit", s.steered_logit}});
        std::cout << s.prompt << " | " << s.original << " -> " << s.steered << "\n";
    }
    const nlohmann::json doc{{"steer_token", a.token},
                             {"coefficient", a.coefficient},
                             {"steps", a.steps},
                             {"mean_logit_shift", report.mean_shift},
                             {"samples", samples}};
    write_text(c.out, doc.dump(2) + "\n");
    std::cout << "mean_logit_shift " << h::format_number(report.mean_shift) << "\n";
    return 0;
}

int cmd_validate(const Common& c, const std::string& config) {
    const Model model = Model::load(c.model);
    const auto problem = h::validate_config(config, model);
    const std::string verdict = problem ? "invalid: " + *problem : "valid";
    if (!c.out.empty()) write_text(c.out, verdict + "\n");
    std::cout << verdict << "\n";
    return problem ? 1 : 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"pvt: intervention harness for toy models"};
    app.require_subcommand(1);

    Common c_make, c_train, c_trace, c_das, c_probe, c_steer, c_validate;

    std::string task;
    auto* make = app.add_subcommand("make-data", "Write a synthetic dataset");
    add_common(make, c_make, false);
    make->add_option("--task", task, "fact_lookup | pronoun | story")->required();

    TrainArgs train_args;
    auto* train = app.add_subcommand("train-model", "Train a toy transformer on a dataset");
    add_common(train, c_train, false);
    train->add_option("--data", train_args.data, "Dataset directory")->required();
    train->add_option("--layers", train_args.layers);
    train->add_option("--dim", train_args.dim);
    train->add_option("--heads", train_args.heads);
    train->add_option("--epochs", train_args.epochs);
    train->add_option("--aux-epochs", train_args.aux_epochs, "Epochs on auxiliary lines before the main run");
    train->add_option("--lr", train_args.lr);

    TraceArgs trace_args;
    auto* trace = app.add_subcommand("trace", "Causal tracing grid (stream,layer,pos,prob)");
    add_common(trace, c_trace, true);
    trace->add_option("--data", trace_args.data, "Dataset directory; traces the first --num-prompts");
    trace->add_option("--prompt", trace_args.prompt, "Whitespace-separated prompt");
    trace->add_option("--gold", trace_args.gold, "Gold answer token");
    trace->add_option("--num-prompts", trace_args.num_prompts);
    trace->add_option("--window", trace_args.window, "Restore window for mlp/attention streams");
    trace->add_option("--noise-scale", trace_args.noise_scale, "Default: 3x embedding std");
    trace->add_option("--subject", trace_args.subject, "Positions to corrupt");

    LocalizeArgs das_args;
    auto* das = app.add_subcommand("train-das", "Train a DAS intervention and report IIA");
    add_common(das, c_das, true);
    das->add_option("--data", das_args.data)->required();
    das->add_option("--layer", das_args.layer);
    das->add_option("--position", das_args.position);
    das->add_option("--k", das_args.k, "Low-rank dimension");
    das->add_option("--epochs", das_args.epochs);
    das->add_flag("--grid", das_args.grid, "Sweep every layer and position; --out is a CSV");

    LocalizeArgs probe_args;
    auto* probe = app.add_subcommand("train-probe", "Train a linear probe on collected activations");
    add_common(probe, c_probe, true);
    probe->add_option("--data", probe_args.data)->required();
    probe->add_option("--layer", probe_args.layer);
    probe->add_option("--position", probe_args.position);
    probe->add_option("--epochs", probe_args.epochs);
    probe->add_flag("--grid", probe_args.grid, "Sweep every layer and position");
    probe->add_flag("--shuffle-labels", probe_args.shuffle, "Permutation baseline");

    SteerArgs steer_args;
    auto* steer = app.add_subcommand("steer", "Generate with an added token embedding");
    add_common(steer, c_steer, true);
    steer->add_option("--prompt", steer_args.prompts, "Prompt (repeatable)")->required();
    steer->add_option("--steer-token", steer_args.token);
    steer->add_option("--coefficient", steer_args.coefficient);
    steer->add_option("--steps", steer_args.steps);

    std::string config_path;
    auto* validate = app.add_subcommand("validate", "Check a config against a model checkpoint");
    validate->add_option("--model", c_validate.model)->required();
    validate->add_option("--seed", c_validate.seed);
    validate->add_option("--out", c_validate.out, "Optional report file");
    validate->add_option("--config", config_path)->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*make) return cmd_make_data(c_make, task);
        if (*train) return cmd_train_model(c_train, train_args);
        if (*trace) return cmd_trace(c_trace, trace_args);
        if (*das) return cmd_train_das(c_das, das_args);
        if (*probe) return cmd_train_probe(c_probe, probe_args);
        if (*steer) return cmd_steer(c_steer, steer_args);
        if (*validate) return cmd_validate(c_validate, config_path);
    } catch (const Error& e) {
        std::cerr << "error: " << to_string(e.code()) << ": " << e.what() << "\n";
        return 2;
    } catch (const CLI::Error& e) {
        return app.exit(e);
    }
    return 0;
}
