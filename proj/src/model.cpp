// Copyright 2026 The pvt Authors
// SPDX-License-Identifier: Apache-2.0

#include "pvt/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "pvt/blob.hpp"
#include "pvt/optim.hpp"

namespace pvt {

using nlohmann::json;

std::string_view to_string(ArchKind kind) noexcept {
    switch (kind) {
        case ArchKind::mlp: return "mlp";
        case ArchKind::gru: return "gru";
        case ArchKind::transformer: return "transformer";
    }
    return "?";
}

std::string_view to_string(UnitKind unit) noexcept { return unit == UnitKind::pos ? "pos" : "t"; }

ArchKind parse_arch(std::string_view name) {
    if (name == "mlp") return ArchKind::mlp;
    if (name == "gru") return ArchKind::gru;
    if (name == "transformer") return ArchKind::transformer;
    fail(ErrorCode::InvalidSchema, "unknown architecture '" + std::string(name) + "'");
}

UnitKind parse_unit(std::string_view name) {
    if (name == "pos") return UnitKind::pos;
    if (name == "t") return UnitKind::t;
    fail(ErrorCode::MalformedDocument, "unknown unit '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// Schema

void ModelSchema::validate() const {
    auto bad = [](const std::string& why) { fail(ErrorCode::InvalidSchema, why); };
    if (num_layers < 1) bad("num_layers must be >= 1");
    if (hidden_dim < 1) bad("hidden_dim must be >= 1");
    if (vocab_size < 3) bad("vocab_size must cover the three special tokens");
    if (kind == ArchKind::transformer) {
        if (num_heads < 1) bad("num_heads must be >= 1");
        if (hidden_dim % num_heads != 0) {
            bad("hidden_dim " + std::to_string(hidden_dim) + " not divisible by num_heads " +
                std::to_string(num_heads));
        }
        if (max_positions < 1) bad("max_positions must be >= 1");
    } else if (num_classes < 1) {
        bad("num_classes must be >= 1");
    }
}

std::vector<SiteInfo> ModelSchema::sites() const {
    std::vector<SiteInfo> out;
    const int64_t d = hidden_dim;
    for (int64_t l = 0; l < num_layers; ++l) {
        switch (kind) {
            case ArchKind::transformer:
                out.push_back({{"block_input", l}, UnitKind::pos, d});
                out.push_back({{"attention_output", l}, UnitKind::pos, d});
                out.push_back({{"mlp_activation", l}, UnitKind::pos, 4 * d});
                out.push_back({{"mlp_output", l}, UnitKind::pos, d});
                out.push_back({{"block_output", l}, UnitKind::pos, d});
                break;
            case ArchKind::gru:
                out.push_back({{"cell_output", l}, UnitKind::t, d});
                break;
            case ArchKind::mlp:
                out.push_back({{"layer_input", l}, UnitKind::pos, d});
                out.push_back({{"layer_output", l}, UnitKind::pos, d});
                break;
        }
    }
    return out;
}

std::optional<SiteInfo> ModelSchema::find_site(std::string_view component, int64_t layer) const {
    if (kind == ArchKind::transformer && component == "embedding_output") {
        if (layer != 0) {
            return std::nullopt;
        }
        component = "block_input";
    }
    for (auto& s : sites()) {
        if (s.key.component == component && s.key.layer == layer) {
            return s;
        }
    }
    return std::nullopt;
}

json ModelSchema::to_json() const {
    return json{{"kind", std::string(to_string(kind))},
                {"num_layers", num_layers},
                {"hidden_dim", hidden_dim},
                {"num_heads", num_heads},
                {"vocab_size", vocab_size},
                {"max_positions", max_positions},
                {"num_classes", num_classes},
                {"dtype", dtype == DType::f32 ? "f32" : "f64"}};
}

ModelSchema ModelSchema::from_json(const json& doc) {
    try {
        ModelSchema s;
        s.kind = parse_arch(doc.at("kind").get<std::string>());
        s.num_layers = doc.at("num_layers").get<int64_t>();
        s.hidden_dim = doc.at("hidden_dim").get<int64_t>();
        s.num_heads = doc.value("num_heads", int64_t{1});
        s.vocab_size = doc.at("vocab_size").get<int64_t>();
        s.max_positions = doc.value("max_positions", int64_t{32});
        s.num_classes = doc.value("num_classes", int64_t{2});
        s.dtype = doc.value("dtype", std::string("f32")) == "f64" ? DType::f64 : DType::f32;
        s.validate();
        return s;
    } catch (const json::exception& e) {
        fail(ErrorCode::InvalidSchema, e.what());
    }
}

std::string ModelSchema::digest() const {
    const std::string text = to_json().dump();
    return hex64(fnv1a64(std::vector<uint8_t>(text.begin(), text.end())));
}

ModelSchema default_transformer_schema() { return ModelSchema{}; }

// ---------------------------------------------------------------------------
// Vocab

Vocab::Vocab() {
    for (std::string_view t : {kPad, kBos, kUnk}) {
        index_.emplace(std::string(t), static_cast<int64_t>(tokens_.size()));
        tokens_.emplace_back(t);
    }
}

Vocab Vocab::from_tokens(const std::vector<std::string>& tokens) {
    Vocab v;
    auto push = [&v](const std::string& t) {
        if (!v.index_.contains(t)) {
            v.index_.emplace(t, static_cast<int64_t>(v.tokens_.size()));
            v.tokens_.push_back(t);
        }
    };
    for (const auto& t : tokens) {
        if (t.empty() || t.find_first_of(" \t\r\n") != std::string::npos) {
            fail(ErrorCode::MalformedDocument, "vocab tokens must be non-empty and whitespace-free");
        }
        push(t);
    }
    return v;
}

Vocab Vocab::synthetic(int64_t size) {
    std::vector<std::string> toks;
    for (int64_t i = 3; i < size; ++i) {
        toks.push_back("tok" + std::to_string(i));
    }
    return from_tokens(toks);
}

Vocab Vocab::load(const std::filesystem::path& path) {
    std::istringstream in(read_text(path));
    std::vector<std::string> toks;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        toks.push_back(line);
    }
    Vocab v = from_tokens(toks);
    if (v.size() != static_cast<int64_t>(toks.size())) {
        fail(ErrorCode::MalformedDocument, path.string() + ": duplicate tokens or specials out of place");
    }
    for (size_t i = 0; i < toks.size(); ++i) {
        if (v.tokens_[i] != toks[i]) {
            fail(ErrorCode::MalformedDocument, path.string() + ": specials must occupy ids 0..2");
        }
    }
    return v;
}

void Vocab::save(const std::filesystem::path& path) const {
    std::string text;
    for (const auto& t : tokens_) {
        text += t;
        text += '\n';
    }
    write_text(path, text);
}

std::optional<int64_t> Vocab::find(std::string_view token) const {
    if (auto it = index_.find(token); it != index_.end()) {
        return it->second;
    }
    return std::nullopt;
}

int64_t Vocab::id(std::string_view token) const {
    if (auto v = find(token)) {
        return *v;
    }
    fail(ErrorCode::UnknownToken, "'" + std::string(token) + "' is not in the vocabulary");
}

const std::string& Vocab::token(int64_t id) const {
    if (id < 0 || id >= size()) {
        fail(ErrorCode::UnknownToken, "token id " + std::to_string(id) + " out of range");
    }
    return tokens_[static_cast<size_t>(id)];
}

std::vector<int64_t> Vocab::encode(std::string_view text) const {
    std::vector<int64_t> ids;
    std::istringstream in{std::string(text)};
    std::string word;
    while (in >> word) {
        ids.push_back(id(word));
    }
    return ids;
}

std::string Vocab::decode(const std::vector<int64_t>& ids) const {
    std::string out;
    for (size_t i = 0; i < ids.size(); ++i) {
        if (i) out += ' ';
        out += token(ids[i]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Inputs

ModelInput ModelInput::from_ids(std::vector<std::vector<int64_t>> ids) {
    ModelInput in;
    in.ids = std::move(ids);
    return in;
}

ModelInput ModelInput::from_embeds(Tensor embeds) {
    if (embeds.rank() != 3) {
        fail(ErrorCode::ShapeMismatch, "inputs_embeds must be [batch, seq, hidden]");
    }
    ModelInput in;
    in.embeds = std::move(embeds);
    return in;
}

int64_t ModelInput::batch() const {
    return embeds.defined() ? embeds.dim(0) : static_cast<int64_t>(ids.size());
}

int64_t ModelInput::length() const {
    if (embeds.defined()) {
        return embeds.dim(1);
    }
    return ids.empty() ? 0 : static_cast<int64_t>(ids[0].size());
}

bool ModelInput::same_as(const ModelInput& other) const {
    if (embeds.defined() || other.embeds.defined()) {
        return embeds.defined() && other.embeds.defined() &&
               (embeds.same_storage(other.embeds) || embeds.bit_equal(other.embeds));
    }
    return ids == other.ids;
}

// ---------------------------------------------------------------------------
// Model

namespace {

struct ParamInit {
    std::mt19937_64 rng;
    std::normal_distribution<double> normal{0.0, 0.02};
    DType dtype;

    Tensor normal_tensor(Shape shape) {
        std::vector<double> v(static_cast<size_t>(numel_of(shape)));
        for (double& x : v) {
            x = normal(rng);
        }
        return Tensor::from(std::move(shape), std::move(v), dtype);
    }
};

Tensor causal_mask(int64_t t, DType dtype) {
    std::vector<double> m(static_cast<size_t>(t * t), 0.0);
    for (int64_t i = 0; i < t; ++i) {
        for (int64_t j = i + 1; j < t; ++j) {
            m[static_cast<size_t>(i * t + j)] = -1e9;
        }
    }
    return Tensor::from({t, t}, std::move(m), dtype);
}

void fire(SiteHook* hook, const SiteInfo& site, Tensor& act) {
    if (hook != nullptr) {
        hook->on_site(site, act);
        if (act.shape() != Shape{act.dim(0), act.dim(1), site.width}) {
            fail(ErrorCode::ShapeMismatch, "hook at " + site.key.str() + " changed the activation shape");
        }
    }
}

}  // namespace

Model::Model(ModelSchema schema, Vocab vocab) : schema_(std::move(schema)), vocab_(std::move(vocab)) {
    schema_.validate();
    if (vocab_.size() != schema_.vocab_size) {
        fail(ErrorCode::InvalidSchema, "vocab has " + std::to_string(vocab_.size()) + " tokens, schema says " +
                                           std::to_string(schema_.vocab_size));
    }
}

Model Model::build(const ModelSchema& schema, uint64_t seed, std::optional<Vocab> vocab) {
    schema.validate();
    Model m(schema, vocab ? std::move(*vocab) : Vocab::synthetic(schema.vocab_size));
    ParamInit init{std::mt19937_64(seed), std::normal_distribution<double>(0.0, 0.02), schema.dtype};
    const int64_t d = schema.hidden_dim;
    const int64_t v = schema.vocab_size;
    auto& p = m.params_;
    auto zeros = [&](Shape s) { return Tensor::zeros(std::move(s), schema.dtype); };
    auto ones = [&](Shape s) { return Tensor::full(std::move(s), 1.0, schema.dtype); };

    p["wte"] = init.normal_tensor({v, d});
    switch (schema.kind) {
        case ArchKind::transformer: {
            p["wpe"] = init.normal_tensor({schema.max_positions, d});
            for (int64_t l = 0; l < schema.num_layers; ++l) {
                const std::string h = "h" + std::to_string(l) + ".";
                p[h + "ln1.g"] = ones({d});
                p[h + "ln1.b"] = zeros({d});
                p[h + "attn.w_qkv"] = init.normal_tensor({d, 3 * d});
                p[h + "attn.b_qkv"] = zeros({3 * d});
                p[h + "attn.w_o"] = init.normal_tensor({d, d});
                p[h + "attn.b_o"] = zeros({d});
                p[h + "ln2.g"] = ones({d});
                p[h + "ln2.b"] = zeros({d});
                p[h + "mlp.w_in"] = init.normal_tensor({d, 4 * d});
                p[h + "mlp.b_in"] = zeros({4 * d});
                p[h + "mlp.w_out"] = init.normal_tensor({4 * d, d});
                p[h + "mlp.b_out"] = zeros({d});
            }
            p["ln_f.g"] = ones({d});
            p["ln_f.b"] = zeros({d});
            break;
        }
        case ArchKind::gru: {
            for (int64_t l = 0; l < schema.num_layers; ++l) {
                const std::string h = "gru" + std::to_string(l) + ".";
                p[h + "w_ih"] = init.normal_tensor({d, 3 * d});
                p[h + "w_hh"] = init.normal_tensor({d, 3 * d});
                p[h + "b_ih"] = zeros({3 * d});
                p[h + "b_hh"] = zeros({3 * d});
            }
            p["head.w"] = init.normal_tensor({d, schema.num_classes});
            p["head.b"] = zeros({schema.num_classes});
            break;
        }
        case ArchKind::mlp: {
            for (int64_t l = 0; l < schema.num_layers; ++l) {
                const std::string h = "fc" + std::to_string(l) + ".";
                p[h + "w"] = init.normal_tensor({d, d});
                p[h + "b"] = zeros({d});
            }
            p["head.w"] = init.normal_tensor({d, schema.num_classes});
            p["head.b"] = zeros({schema.num_classes});
            break;
        }
    }
    return m;
}

const Tensor& Model::param(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) {
        fail(ErrorCode::InvalidSchema, "model has no parameter '" + name + "'");
    }
    return it->second;
}

std::vector<Tensor> Model::parameter_list() const {
    std::vector<Tensor> out;
    for (const auto& [name, t] : params_) {
        out.push_back(t);
    }
    return out;
}

void Model::set_requires_grad(bool flag) {
    for (auto& [name, t] : params_) {
        t.set_requires_grad(flag);
    }
}

Tensor Model::input_embeddings(const ModelInput& input) const {
    const int64_t b = input.batch();
    const int64_t t = input.length();
    if (input.embeds.defined()) {
        if (input.embeds.dim(2) != schema_.hidden_dim) {
            fail(ErrorCode::ShapeMismatch, "inputs_embeds width " + std::to_string(input.embeds.dim(2)) +
                                               " != hidden_dim " + std::to_string(schema_.hidden_dim));
        }
        return input.embeds.dtype() == schema_.dtype ? input.embeds : input.embeds.to(schema_.dtype);
    }
    std::vector<int64_t> flat;
    flat.reserve(static_cast<size_t>(b * t));
    for (const auto& row : input.ids) {
        if (static_cast<int64_t>(row.size()) != t) {
            fail(ErrorCode::ShapeMismatch, "all sequences in a batch must have the same length");
        }
        flat.insert(flat.end(), row.begin(), row.end());
    }
    return embed_lookup(param("wte"), flat, {b, t});
}

ForwardResult Model::forward(const ModelInput& input, SiteHook* hook, bool compute_logits) const {
    if (input.batch() < 1 || input.length() < 1) {
        fail(ErrorCode::ShapeMismatch, "empty model input");
    }
    switch (schema_.kind) {
        case ArchKind::transformer: return forward_transformer(input, hook, compute_logits);
        case ArchKind::gru: return forward_gru(input, hook, compute_logits);
        case ArchKind::mlp: return forward_mlp(input, hook, compute_logits);
    }
    return {};
}

ForwardResult Model::forward_transformer(const ModelInput& input, SiteHook* hook, bool compute_logits) const {
    const int64_t b = input.batch();
    const int64_t t = input.length();
    const int64_t d = schema_.hidden_dim;
    const int64_t heads = schema_.num_heads;
    const int64_t hd = d / heads;
    if (t > schema_.max_positions) {
        fail(ErrorCode::SequenceTooLong, "sequence length " + std::to_string(t) + " exceeds max_positions " +
                                             std::to_string(schema_.max_positions));
    }
    const auto sites = schema_.sites();
    Tensor x = add(input_embeddings(input), slice(param("wpe"), 0, 0, t));
    const Tensor mask = causal_mask(t, schema_.dtype);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));

    auto heads_view = [&](const Tensor& qkv, int64_t which) {
        Tensor part = slice(qkv, 2, which * d, (which + 1) * d);
        return permute(reshape(part, {b, t, heads, hd}), {0, 2, 1, 3});
    };

    for (int64_t l = 0; l < schema_.num_layers; ++l) {
        const std::string h = "h" + std::to_string(l) + ".";
        const SiteInfo* s = &sites[static_cast<size_t>(l * 5)];
        fire(hook, s[0], x);

        Tensor hn = layernorm(x, param(h + "ln1.g"), param(h + "ln1.b"));
        Tensor qkv = add(matmul(hn, param(h + "attn.w_qkv")), param(h + "attn.b_qkv"));
        Tensor q = heads_view(qkv, 0);
        Tensor k = heads_view(qkv, 1);
        Tensor v = heads_view(qkv, 2);
        Tensor scores = add(scale(matmul(q, transpose(k)), inv_sqrt), mask);
        Tensor ctx = matmul(softmax(scores), v);
        ctx = reshape(permute(ctx, {0, 2, 1, 3}), {b, t, d});
        Tensor attn = add(matmul(ctx, param(h + "attn.w_o")), param(h + "attn.b_o"));
        fire(hook, s[1], attn);
        x = add(x, attn);

        Tensor hn2 = layernorm(x, param(h + "ln2.g"), param(h + "ln2.b"));
        Tensor act = gelu(add(matmul(hn2, param(h + "mlp.w_in")), param(h + "mlp.b_in")));
        fire(hook, s[2], act);
        Tensor mlp = add(matmul(act, param(h + "mlp.w_out")), param(h + "mlp.b_out"));
        fire(hook, s[3], mlp);
        x = add(x, mlp);
        fire(hook, s[4], x);
    }

    ForwardResult out;
    out.hidden = layernorm(x, param("ln_f.g"), param("ln_f.b"));
    if (compute_logits) {
        out.logits = matmul(out.hidden, transpose(param("wte")));
    }
    return out;
}

ForwardResult Model::forward_gru(const ModelInput& input, SiteHook* hook, bool compute_logits) const {
    const int64_t b = input.batch();
    const int64_t t = input.length();
    const int64_t d = schema_.hidden_dim;
    const auto sites = schema_.sites();
    Tensor seq = input_embeddings(input);

    for (int64_t l = 0; l < schema_.num_layers; ++l) {
        const std::string p = "gru" + std::to_string(l) + ".";
        const SiteInfo& site = sites[static_cast<size_t>(l)];
        Tensor gi_all = add(matmul(seq, param(p + "w_ih")), param(p + "b_ih"));
        Tensor h = Tensor::zeros({b, d}, schema_.dtype);
        std::vector<Tensor> outputs;
        for (int64_t step = 0; step < t; ++step) {
            Tensor gi = reshape(slice(gi_all, 1, step, step + 1), {b, 3 * d});
            Tensor gh = add(matmul(h, param(p + "w_hh")), param(p + "b_hh"));
            Tensor r = sigmoid(add(slice(gi, 1, 0, d), slice(gh, 1, 0, d)));
            Tensor z = sigmoid(add(slice(gi, 1, d, 2 * d), slice(gh, 1, d, 2 * d)));
            Tensor n = tanh(add(slice(gi, 1, 2 * d, 3 * d), mul(r, slice(gh, 1, 2 * d, 3 * d))));
            // (1 - z) * n + z * h
            h = add(n, mul(z, sub(h, n)));
            Tensor cell = reshape(h, {b, 1, d});
            fire(hook, site, cell);
            outputs.push_back(cell);
            h = reshape(cell, {b, d});
        }
        seq = outputs.size() == 1 ? outputs[0] : concat(outputs, 1);
    }

    ForwardResult out;
    out.hidden = seq;
    if (compute_logits) {
        out.logits = reshape(project(reshape(seq, {b * t, d})), {b, t, schema_.num_classes});
    }
    return out;
}

ForwardResult Model::forward_mlp(const ModelInput& input, SiteHook* hook, bool compute_logits) const {
    const int64_t b = input.batch();
    const int64_t t = input.length();
    const int64_t d = schema_.hidden_dim;
    const auto sites = schema_.sites();
    Tensor x = input_embeddings(input);
    for (int64_t l = 0; l < schema_.num_layers; ++l) {
        const std::string p = "fc" + std::to_string(l) + ".";
        fire(hook, sites[static_cast<size_t>(2 * l)], x);
        x = tanh(add(matmul(x, param(p + "w")), param(p + "b")));
        fire(hook, sites[static_cast<size_t>(2 * l + 1)], x);
    }
    ForwardResult out;
    out.hidden = x;
    if (compute_logits) {
        out.logits = reshape(project(reshape(x, {b * t, d})), {b, t, schema_.num_classes});
    }
    return out;
}

Tensor Model::project(const Tensor& hidden_rows) const {
    if (schema_.kind == ArchKind::transformer) {
        return matmul(hidden_rows, transpose(param("wte")));
    }
    return add(matmul(hidden_rows, param("head.w")), param("head.b"));
}

namespace {

class RecordingHook : public SiteHook {
public:
    explicit RecordingHook(std::set<SiteKey> wanted) : wanted_(std::move(wanted)) {}

    void on_site(const SiteInfo& site, Tensor& activation) override {
        if (wanted_.contains(site.key)) {
            parts_[site.key].push_back(activation);
        }
    }

    std::map<SiteKey, Tensor> take() {
        std::map<SiteKey, Tensor> out;
        for (auto& [key, parts] : parts_) {
            out[key] = parts.size() == 1 ? parts[0] : concat(parts, 1);
        }
        return out;
    }

private:
    std::set<SiteKey> wanted_;
    std::map<SiteKey, std::vector<Tensor>> parts_;
};

}  // namespace

ForwardTrace Model::trace(const ModelInput& input, const std::vector<SiteKey>& record) const {
    std::set<SiteKey> wanted;
    for (const auto& key : record) {
        auto site = schema_.find_site(key.component, key.layer);
        if (!site) {
            fail(ErrorCode::UnknownSite, key.str() + " is not a site of this " +
                                             std::string(to_string(schema_.kind)) + " model");
        }
        wanted.insert(site->key);
    }
    RecordingHook hook(wanted);
    ForwardResult r = forward(input, wanted.empty() ? nullptr : &hook);
    ForwardTrace tr;
    tr.sites = hook.take();
    tr.hidden = r.hidden;
    tr.logits = r.logits;
    return tr;
}

void Model::save(const std::filesystem::path& dir) const {
    json params = json::array();
    for (const auto& [name, t] : params_) {
        const std::string file = "params/" + name + ".pvt";
        const auto bytes = encode_blob(t);
        write_file(dir / file, bytes);
        params.push_back({{"name", name}, {"file", file}, {"fnv1a64", hex64(fnv1a64(bytes))}});
    }
    vocab_.save(dir / "vocab.txt");
    json manifest{{"format_version", 1}, {"schema", schema_.to_json()}, {"params", params}, {"vocab", "vocab.txt"}};
    write_text(dir / "model.json", manifest.dump(2) + "\n");
}

Model Model::load(const std::filesystem::path& dir) {
    json manifest;
    try {
        manifest = json::parse(read_text(dir / "model.json"));
    } catch (const json::exception& e) {
        fail(ErrorCode::MalformedDocument, (dir / "model.json").string() + ": " + e.what());
    }
    if (manifest.value("format_version", 0) != 1) {
        fail(ErrorCode::VersionUnsupported, "model checkpoint format version");
    }
    Model m(ModelSchema::from_json(manifest.at("schema")), Vocab::load(dir / manifest.value("vocab", "vocab.txt")));
    for (const auto& entry : manifest.at("params")) {
        const auto bytes = read_file(dir / entry.at("file").get<std::string>());
        if (hex64(fnv1a64(bytes)) != entry.at("fnv1a64").get<std::string>()) {
            fail(ErrorCode::ChecksumMismatch, entry.at("file").get<std::string>());
        }
        auto blob = decode_blob(bytes);
        if (!blob.tensor.defined()) {
            fail(ErrorCode::DTypeMismatch, "integer parameter blob");
        }
        m.params_[entry.at("name").get<std::string>()] = blob.tensor;
    }
    // Shapes must match what this schema builds.
    const Model reference = build(m.schema_, 0, m.vocab_);
    for (const auto& [name, t] : reference.params_) {
        auto it = m.params_.find(name);
        if (it == m.params_.end() || it->second.shape() != t.shape()) {
            fail(ErrorCode::SchemaDigestMismatch, "parameter '" + name + "' missing or misshaped");
        }
    }
    return m;
}

// ---------------------------------------------------------------------------
// Decoding and training

int64_t argmax_last(const Tensor& logits, int64_t batch_index) {
    const int64_t t = logits.dim(1);
    const int64_t c = logits.dim(2);
    const auto v = logits.data();
    const size_t base = static_cast<size_t>((batch_index * t + (t - 1)) * c);
    int64_t best = 0;
    for (int64_t j = 1; j < c; ++j) {
        if (v[base + static_cast<size_t>(j)] > v[base + static_cast<size_t>(best)]) {
            best = j;
        }
    }
    return best;
}

std::vector<int64_t> greedy_decode(const Model& model, std::vector<int64_t> prompt, int64_t steps) {
    if (steps < 1) {
        fail(ErrorCode::ShapeMismatch, "greedy_decode needs steps >= 1");
    }
    if (model.schema().kind == ArchKind::transformer &&
        static_cast<int64_t>(prompt.size()) + steps - 1 > model.schema().max_positions) {
        fail(ErrorCode::SequenceTooLong, "prompt plus generated tokens exceed max_positions");
    }
    std::vector<int64_t> generated;
    for (int64_t s = 0; s < steps; ++s) {
        const auto r = model.forward(ModelInput::from_ids({prompt}));
        const int64_t next = argmax_last(r.logits);
        generated.push_back(next);
        prompt.push_back(next);
    }
    return generated;
}

namespace {

struct Batch {
    ModelInput input;
    std::vector<int64_t> rows;     // flat [b * t + pos] rows with a target
    std::vector<int64_t> targets;
};

Batch make_batch(const Model& model, const std::vector<TrainExample>& data, std::span<const size_t> idx) {
    size_t len = 0;
    for (size_t i : idx) {
        len = std::max(len, data[i].input.size());
    }
    Batch b;
    const int64_t pad = model.vocab().pad_id();
    for (size_t r = 0; r < idx.size(); ++r) {
        const auto& ex = data[idx[r]];
        if (ex.target.size() != ex.input.size()) {
            fail(ErrorCode::ShapeMismatch, "training example target length differs from input length");
        }
        auto row = ex.input;
        row.resize(len, pad);
        b.input.ids.push_back(std::move(row));
        for (size_t p = 0; p < ex.target.size(); ++p) {
            if (ex.target[p] >= 0) {
                b.rows.push_back(static_cast<int64_t>(r * len + p));
                b.targets.push_back(ex.target[p]);
            }
        }
    }
    return b;
}

Tensor batch_logits(const Model& model, const Batch& b) {
    const auto r = model.forward(b.input, nullptr, false);
    const int64_t d = r.hidden.dim(2);
    Tensor flat = reshape(r.hidden, {r.hidden.dim(0) * r.hidden.dim(1), d});
    return model.project(gather_rows(flat, b.rows));
}

}  // namespace

TrainReport train_model(Model& model, const std::vector<TrainExample>& data, const TrainHyper& hyper) {
    if (data.empty()) {
        fail(ErrorCode::EmptyDataset, "train_model with no examples");
    }
    std::mt19937_64 rng(hyper.seed);
    std::vector<size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    model.set_requires_grad(true);
    std::vector<Tensor> params = model.parameter_list();
    Adam adam({.lr = hyper.lr});
    TrainReport report;
    const size_t bs = static_cast<size_t>(std::max<int64_t>(1, hyper.batch_size));
    for (int64_t epoch = 0; epoch < hyper.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double total = 0.0;
        size_t batches = 0;
        for (size_t start = 0; start < order.size(); start += bs) {
            const size_t end = std::min(order.size(), start + bs);
            Batch b = make_batch(model, data, std::span(order).subspan(start, end - start));
            if (b.rows.empty()) {
                continue;
            }
            Tape tape;
            TapeScope scope(tape);
            Tensor loss = cross_entropy(batch_logits(model, b), b.targets);
            adam.step(params, backward(loss));
            total += loss.item();
            ++batches;
        }
        report.loss_curve.push_back(batches ? total / static_cast<double>(batches) : 0.0);
    }
    model.set_requires_grad(false);
    report.accuracy = evaluate_accuracy(model, data);
    return report;
}

double evaluate_accuracy(const Model& model, const std::vector<TrainExample>& data) {
    if (data.empty()) {
        fail(ErrorCode::EmptyDataset, "evaluate_accuracy with no examples");
    }
    int64_t correct = 0;
    int64_t total = 0;
    std::vector<size_t> idx(data.size());
    std::iota(idx.begin(), idx.end(), 0);
    for (size_t start = 0; start < idx.size(); start += 256) {
        const size_t end = std::min(idx.size(), start + 256);
        Batch b = make_batch(model, data, std::span(idx).subspan(start, end - start));
        if (b.rows.empty()) {
            continue;
        }
        Tensor logits = batch_logits(model, b);
        const int64_t c = logits.dim(1);
        const auto v = logits.data();
        for (size_t r = 0; r < b.targets.size(); ++r) {
            const double* row = v.data() + static_cast<int64_t>(r) * c;
            const int64_t best = std::max_element(row, row + c) - row;
            correct += best == b.targets[r] ? 1 : 0;
            ++total;
        }
    }
    return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

}  // namespace pvt
