// Copyright 2026 The pvt Authors
// SPDX-License-Identifier: Apache-2.0

#include <cstdio>

#include "pvt/blob.hpp"
#include "pvt/harness.hpp"

namespace pvt::harness {

namespace {

std::string join(const Vocab& vocab, const std::vector<int64_t>& ids) { return vocab.decode(ids); }

double mean_logit(const std::vector<Tensor>& step_logits, int64_t token) {
    double total = 0.0;
    for (const auto& l : step_logits) total += l[token];
    return step_logits.empty() ? 0.0 : total / static_cast<double>(step_logits.size());
}

}  // namespace

SteerReport steer(const Model& model, const std::vector<std::vector<std::string>>& prompts,
                  const SteerOptions& options) {
    const Vocab& vocab = model.vocab();
    const int64_t token = vocab.id(options.steer_token);
    const Tensor& wte = model.token_embedding();
    const Tensor direction = scale(reshape(slice(wte, 0, token, token + 1), {wte.dim(1)}), options.coefficient);

    IntervenableConfig config;
    for (int64_t l = 0; l < model.schema().num_layers; ++l) {
        InterventionSpec s;
        s.layer = l;
        s.component = "mlp_output";
        s.kind = InterventionKind::parse("addition");
        s.constant_source = direction;
        config.add_intervention(s);
    }
    const IntervenableModel pv(model, config);

    SteerReport report;
    double shift = 0.0;
    for (const auto& prompt : prompts) {
        const auto ids = encode_tokens(vocab, prompt);
        GenerateOptions plain;
        plain.steps = options.steps;
        plain.step_selector = std::set<int64_t>{};
        GenerateOptions steered = plain;
        steered.step_selector.reset();
        const auto a = pv.generate(ids, plain);
        const auto b = pv.generate(ids, steered);

        SteerSample s;
        for (size_t i = 0; i < prompt.size(); ++i) s.prompt += (i ? " " : "") + prompt[i];
        s.original = join(vocab, a.ids);
        s.steered = join(vocab, b.ids);
        s.original_logit = mean_logit(a.step_logits, token);
        s.steered_logit = mean_logit(b.step_logits, token);
        s.logits_identical = a.ids == b.ids;
        for (size_t i = 0; s.logits_identical && i < a.step_logits.size(); ++i) {
            s.logits_identical = a.step_logits[i].bit_equal(b.step_logits[i]);
        }
        shift += s.steered_logit - s.original_logit;
        report.samples.push_back(std::move(s));
    }
    report.mean_shift = prompts.empty() ? 0.0 : shift / static_cast<double>(prompts.size());
    return report;
}

std::optional<std::string> validate_config(const std::filesystem::path& config_path, const Model& model) {
    try {
        const IntervenableConfig config = parse_config_text(read_text(config_path), config_path.parent_path());
        check_config(config, model.schema());
        return std::nullopt;
    } catch (const Error& e) {
        return std::string(e.what());
    }
}

std::string format_number(double value) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", value);
    return buf;
}

void write_trace_csv(const std::filesystem::path& path, const std::vector<TraceRow>& rows) {
    std::string out = "stream,layer,pos,prob\n";
    for (const auto& r : rows) {
        out += r.stream + "," + std::to_string(r.layer) + "," + std::to_string(r.pos) + "," + format_number(r.prob) +
               "\n";
    }
    write_text(path, out);
}

void write_grid_csv(const std::filesystem::path& path, const std::vector<GridRow>& rows) {
    std::string out = "layer,pos,metric,value\n";
    for (const auto& r : rows) {
        out += std::to_string(r.layer) + "," + std::to_string(r.pos) + "," + r.metric + "," + format_number(r.value) +
               "\n";
    }
    write_text(path, out);
}

}  // namespace pvt::harness
