// Copyright 2026 The pvt Authors
// SPDX-License-Identifier: Apache-2.0
//
// Toy architectures with named intervention sites: a feed-forward
// classifier, a GRU sequence classifier and a pre-LayerNorm decoder-only
// transformer with learned positions and a tied unembedding.

#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "pvt/tensor.hpp"

namespace pvt {

enum class ArchKind { mlp, gru, transformer };
enum class UnitKind { pos, t };

std::string_view to_string(ArchKind kind) noexcept;
std::string_view to_string(UnitKind unit) noexcept;
ArchKind parse_arch(std::string_view name);
UnitKind parse_unit(std::string_view name);

struct SiteKey {
    std::string component;
    int64_t layer = 0;

    auto operator<=>(const SiteKey&) const = default;
    std::string str() const { return component + "@" + std::to_string(layer); }
};

struct SiteInfo {
    SiteKey key;
    UnitKind unit = UnitKind::pos;
    int64_t width = 0;
};

struct ModelSchema {
    ArchKind kind = ArchKind::transformer;
    int64_t num_layers = 8;
    int64_t hidden_dim = 64;
    int64_t num_heads = 4;
    int64_t vocab_size = 256;
    int64_t max_positions = 32;
    // Output classes for mlp/gru heads; the transformer's head is the tied
    // unembedding so this is ignored there.
    int64_t num_classes = 2;
    DType dtype = DType::f32;

    // Throws InvalidSchema.
    void validate() const;

    // Every (component, layer) the architecture exposes, in execution order.
    std::vector<SiteInfo> sites() const;
    // Resolves aliases (embedding_output -> block_input@0). nullopt if absent.
    std::optional<SiteInfo> find_site(std::string_view component, int64_t layer) const;

    nlohmann::json to_json() const;
    static ModelSchema from_json(const nlohmann::json& doc);
    // FNV-1a over the canonical JSON text.
    std::string digest() const;

    bool operator==(const ModelSchema&) const = default;
};

// Transformer with the default toy sizes (8 layers, dim 64, 4 heads, vocab
// 256, 32 positions).
ModelSchema default_transformer_schema();

class Vocab {
public:
    static constexpr std::string_view kPad = "<pad>";
    static constexpr std::string_view kBos = "<bos>";
    static constexpr std::string_view kUnk = "<unk>";

    Vocab();
    // Specials are placed first (ids 0..2) when not already listed.
    static Vocab from_tokens(const std::vector<std::string>& tokens);
    // Placeholder vocab "tok0".."tokN" padded to `size` entries.
    static Vocab synthetic(int64_t size);

    // One token per line; id = line number.
    static Vocab load(const std::filesystem::path& path);
    void save(const std::filesystem::path& path) const;

    int64_t size() const noexcept { return static_cast<int64_t>(tokens_.size()); }
    std::optional<int64_t> find(std::string_view token) const;
    // Throws UnknownToken.
    int64_t id(std::string_view token) const;
    const std::string& token(int64_t id) const;
    // Whitespace split; unknown tokens throw UnknownToken.
    std::vector<int64_t> encode(std::string_view text) const;
    std::string decode(const std::vector<int64_t>& ids) const;

    int64_t pad_id() const { return id(kPad); }
    int64_t bos_id() const { return id(kBos); }
    int64_t unk_id() const { return id(kUnk); }

    const std::vector<std::string>& tokens() const noexcept { return tokens_; }

private:
    std::vector<std::string> tokens_;
    std::map<std::string, int64_t, std::less<>> index_;
};

// Either token ids ([batch][seq], equal lengths) or dense embeddings
// [batch, seq, hidden].
struct ModelInput {
    std::vector<std::vector<int64_t>> ids;
    Tensor embeds;

    static ModelInput from_ids(std::vector<std::vector<int64_t>> ids);
    static ModelInput from_embeds(Tensor embeds);

    int64_t batch() const;
    int64_t length() const;
    bool same_as(const ModelInput& other) const;
};

struct ForwardResult {
    Tensor logits;  // [batch, seq, classes]
    Tensor hidden;  // [batch, seq, hidden]; post final norm for the transformer
};

// Called once per site per forward for "pos" sites (activation [B, T, W]) and
// once per time step for "t" sites (activation [B, 1, W]). The hook may
// replace the activation; downstream computation consumes the replacement.
class SiteHook {
public:
    virtual ~SiteHook() = default;
    virtual void on_site(const SiteInfo& site, Tensor& activation) = 0;
};

struct ForwardTrace {
    std::map<SiteKey, Tensor> sites;  // [B, T, W] for both unit kinds
    Tensor hidden;
    Tensor logits;
};

class Model {
public:
    Model(ModelSchema schema, Vocab vocab);

    // Normal(0, 0.02) weights, zero biases, unit norm gains.
    static Model build(const ModelSchema& schema, uint64_t seed, std::optional<Vocab> vocab = std::nullopt);

    const ModelSchema& schema() const noexcept { return schema_; }
    const Vocab& vocab() const noexcept { return vocab_; }

    std::map<std::string, Tensor>& parameters() noexcept { return params_; }
    const std::map<std::string, Tensor>& parameters() const noexcept { return params_; }
    const Tensor& param(const std::string& name) const;
    std::vector<Tensor> parameter_list() const;
    void set_requires_grad(bool flag);

    // Token embedding table (also the transformer's unembedding).
    const Tensor& token_embedding() const { return param("wte"); }

    // Throws SequenceTooLong, ShapeMismatch.
    ForwardResult forward(const ModelInput& input, SiteHook* hook = nullptr, bool compute_logits = true) const;
    // Output head applied to rows of final hidden states: [n, hidden] -> [n, classes].
    Tensor project(const Tensor& hidden_rows) const;
    // Throws UnknownSite for names not in the registry.
    ForwardTrace trace(const ModelInput& input, const std::vector<SiteKey>& record) const;

    void save(const std::filesystem::path& dir) const;
    static Model load(const std::filesystem::path& dir);

private:
    ForwardResult forward_transformer(const ModelInput& input, SiteHook* hook, bool compute_logits) const;
    ForwardResult forward_gru(const ModelInput& input, SiteHook* hook, bool compute_logits) const;
    ForwardResult forward_mlp(const ModelInput& input, SiteHook* hook, bool compute_logits) const;
    Tensor input_embeddings(const ModelInput& input) const;

    ModelSchema schema_;
    Vocab vocab_;
    std::map<std::string, Tensor> params_;
};

// Argmax of the last position, lowest id on ties.
int64_t argmax_last(const Tensor& logits, int64_t batch_index = 0);

// Greedy continuation of a single prompt; returns only the generated ids.
std::vector<int64_t> greedy_decode(const Model& model, std::vector<int64_t> prompt, int64_t steps);

struct TrainExample {
    std::vector<int64_t> input;
    std::vector<int64_t> target;  // per position; -1 = no loss
};

struct TrainHyper {
    int64_t epochs = 100;
    int64_t batch_size = 32;
    double lr = 3e-3;
    uint64_t seed = 0;
};

struct TrainReport {
    std::vector<double> loss_curve;  // mean loss per epoch
    double accuracy = 0.0;           // over supervised positions of the training set
};

// Throws EmptyDataset.
TrainReport train_model(Model& model, const std::vector<TrainExample>& data, const TrainHyper& hyper);
double evaluate_accuracy(const Model& model, const std::vector<TrainExample>& data);

}  // namespace pvt
