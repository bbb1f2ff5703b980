// Copyright 2026 The pvt Authors
// SPDX-License-Identifier: Apache-2.0
//
// Toy-scale studies built on the engine: synthetic datasets, causal
// tracing, DAS and probe localization grids, and embedding steering.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "pvt/engine.hpp"

namespace pvt::harness {

// ---------------------------------------------------------------------------
// Datasets

enum class Task { fact_lookup, pronoun, story };
std::string_view to_string(Task task) noexcept;
Task parse_task(std::string_view name);

struct Example {
    std::vector<std::string> prompt;
    std::string answer;  // next token after the prompt (empty for story lines)
    int label = -1;      // pronoun task: 0 = he, 1 = she
};

struct Dataset {
    Task task = Task::fact_lookup;
    std::vector<std::string> vocab;  // task tokens, specials excluded
    std::vector<Example> examples;
    std::vector<Example> auxiliary;  // extra training lines, not queried
    std::vector<int64_t> subject_positions;  // fact_lookup: positions to corrupt
};

// fact_lookup: "<bos> [first] [last] [relation] in" -> city, where only the
// (first, last) pair identifies the entity; auxiliary lines "<bos> [first]
// [last]" -> home city. pronoun: "<bos> [name] [verb] [connective]" ->
// he/she, with gender a function of the name alone. story: short sentences
// for the steering demo.
Dataset make_dataset(Task task, uint64_t seed);

// dataset.json in `dir`. Throws IoFailure, MalformedDocument.
void save_dataset(const Dataset& data, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

Vocab dataset_vocab(const Dataset& data);
std::vector<int64_t> encode_tokens(const Vocab& vocab, const std::vector<std::string>& tokens);

// Next-token examples over examples and auxiliary lines: the answer at the
// last position, or every position for story lines.
std::vector<TrainExample> training_examples(const Dataset& data, const Vocab& vocab);

struct ModelShape {
    int64_t num_layers = 8;
    int64_t hidden_dim = 32;
    int64_t num_heads = 4;
    int64_t max_positions = 16;
};

// Auxiliary lines are trained alone first for `auxiliary_epochs`, then
// everything together under `hyper`.
struct TaskTraining {
    TrainHyper hyper;
    int64_t auxiliary_epochs = 0;
    double auxiliary_lr = 3e-3;
};

ModelShape default_shape(Task task);
TaskTraining default_training(Task task);

struct TrainedModel {
    Model model;
    TrainReport report;  // final stage; accuracy over the queried examples
};
// Trains a transformer from scratch on the dataset.
TrainedModel train_task_model(const Dataset& data, const ModelShape& shape, const TaskTraining& training);

// ---------------------------------------------------------------------------
// Causal tracing

struct TraceWindow {
    int64_t begin = 0;  // s
    int64_t end = 0;    // e, exclusive
};
// s = max(0, l - w // 2), e = min(tl, l - (-w // 2)) with floor division.
TraceWindow trace_window(int64_t layer, int64_t width, int64_t total_layers);

struct TraceRow {
    std::string stream;
    int64_t layer = 0;
    int64_t pos = 0;
    double prob = 0.0;
};

struct TraceOptions {
    std::vector<std::string> streams = {"block_output", "mlp_activation", "attention_output"};
    std::vector<int64_t> subject_positions = {1, 2};  // the fact_lookup entity span
    double noise_scale = 0.0;  // 0 = three times the std of token embeddings
    uint64_t noise_seed = 0;
    int64_t window = 10;  // forced to 1 for block_output
};

struct TraceResult {
    double clean_prob = 0.0;
    double noise_prob = 0.0;
    double full_restore_prob = 0.0;
    std::vector<TraceRow> rows;  // stream-major, then layer, then pos
};

double embedding_noise_scale(const Model& model);
// Probability of `gold` under softmax over the vocab at the last position.
double gold_probability(const Tensor& logits, int64_t gold);

TraceResult trace_prompt(const Model& model, const std::vector<int64_t>& prompt, int64_t gold,
                         const TraceOptions& options);

// ---------------------------------------------------------------------------
// Localization (DAS and probes)

struct PairSet {
    std::vector<size_t> base;
    std::vector<size_t> source;
};

// Pairs with differing labels, for training.
PairSet counterfactual_pairs(const Dataset& data, const std::vector<size_t>& pool, size_t count, uint64_t seed);
// Half same-label, half differing-label pairs, for evaluation.
PairSet balanced_pairs(const Dataset& data, const std::vector<size_t>& pool, size_t count, uint64_t seed);

struct DasOptions {
    int64_t layer = 0;
    int64_t pos = 0;
    int64_t k = 1;
    int64_t epochs = 4;
    int64_t batch_size = 32;
    double lr = 0.01;
    size_t train_pairs = 256;
    size_t eval_pairs = 256;
    uint64_t seed = 0;
};

struct DasResult {
    double iia = 0.0;
    std::vector<double> loss_curve;
    IntervenableModel pv_model;
};

// Trains a low-rank rotated intervention at block_output@layer, position
// pos, toward the source's pronoun. epochs = 0 evaluates the random map.
DasResult train_das(const Model& model, const Dataset& data, const DasOptions& options);
// Fraction of pairs whose intervened argmax is the counterfactual answer.
double interchange_accuracy(const IntervenableModel& pv_model, const Dataset& data, const PairSet& pairs,
                            int64_t pos);

struct ProbeOptions {
    int64_t layer = 0;
    int64_t pos = 0;
    int64_t epochs = 200;
    double lr = 0.05;
    bool shuffle_labels = false;
    uint64_t seed = 0;
};

// Activations at block_output@layer for every prompt, gathered with a collect
// intervention: result[pos] is [num_examples, hidden].
std::vector<Tensor> collect_block_outputs(const Model& model, const Dataset& data, int64_t layer);

// Logistic-regression probe with a 50/50 split; returns held-out accuracy.
double train_probe(const Tensor& features, const std::vector<int>& labels, const ProbeOptions& options);
double train_probe(const Model& model, const Dataset& data, const ProbeOptions& options);

struct GridRow {
    int64_t layer = 0;
    int64_t pos = 0;
    std::string metric;  // "iia" or "probe_acc"
    double value = 0.0;
};

std::vector<GridRow> das_grid(const Model& model, const Dataset& data, const DasOptions& base_options);
std::vector<GridRow> probe_grid(const Model& model, const Dataset& data, const ProbeOptions& base_options);

// ---------------------------------------------------------------------------
// Steering

struct SteerOptions {
    std::string steer_token = "happy";
    double coefficient = 0.3;
    int64_t steps = 6;
};

struct SteerSample {
    std::string prompt;
    std::string original;
    std::string steered;
    double original_logit = 0.0;  // mean steer-token logit over steps
    double steered_logit = 0.0;
    bool logits_identical = false;
};

struct SteerReport {
    std::vector<SteerSample> samples;
    double mean_shift = 0.0;
};

// Adds coefficient * embedding(steer_token) at mlp_output of every layer at
// every decoding step. Throws UnknownToken.
SteerReport steer(const Model& model, const std::vector<std::vector<std::string>>& prompts,
                  const SteerOptions& options);

// ---------------------------------------------------------------------------
// Validation and output

// Empty when valid, otherwise the first violation.
std::optional<std::string> validate_config(const std::filesystem::path& config_path, const Model& model);

void write_trace_csv(const std::filesystem::path& path, const std::vector<TraceRow>& rows);
void write_grid_csv(const std::filesystem::path& path, const std::vector<GridRow>& rows);
std::string format_number(double value);

}  // namespace pvt::harness
