// Copyright 2026 The pvt Authors
// SPDX-License-Identifier: Apache-2.0

#include "pvt/bundle.hpp"

#include "pvt/blob.hpp"

namespace pvt {

using nlohmann::json;

namespace {

json blob_entry(const std::filesystem::path& dir, const std::string& file, const Tensor& t) {
    const auto bytes = encode_blob(t);
    write_file(dir / file, bytes);
    return json{{"file", file}, {"fnv1a64", hex64(fnv1a64(bytes))}};
}

}  // namespace

void save_bundle(const IntervenableModel& pv_model, const std::filesystem::path& dir, bool include_model_weights) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) {
        fail(ErrorCode::IoFailure, dir.string() + ": " + ec.message());
    }
    IntervenableConfig config = pv_model.config();
    std::vector<std::optional<std::string>> refs(config.size());
    json blobs = json::array();
    for (size_t i = 0; i < config.size(); ++i) {
        auto& spec = config.interventions[i];
        const auto& iv = pv_model.interventions()[i];
        if (spec.kind.tag == InterventionKind::Tag::noise) {
            spec.noise_scale = iv.noise().scale;
            spec.noise_seed = iv.noise().seed;
        }
        if (iv.boundless()) {
            spec.temperature = iv.boundless()->temperature;
        }
        for (const auto& [field, t] : iv.named_parameters()) {
            json e = blob_entry(dir, "intervention_" + std::to_string(i) + "_" + field + ".pvt", t);
            e["intervention"] = i;
            e["field"] = field;
            blobs.push_back(std::move(e));
        }
        if (spec.constant_source) {
            const std::string file = "constant_" + std::to_string(i) + ".pvt";
            json e = blob_entry(dir, file, *spec.constant_source);
            e["intervention"] = i;
            e["field"] = "constant_source";
            blobs.push_back(std::move(e));
            refs[i] = file;
        }
    }
    const auto& schema = pv_model.model().schema();
    json manifest{{"format_version", kBundleFormatVersion},
                  {"schema_digest", schema.digest()},
                  {"schema", schema.to_json()},
                  {"config", config_to_json(config, refs)},
                  {"blobs", blobs},
                  {"model", include_model_weights ? json("model") : json(nullptr)}};
    if (include_model_weights) {
        pv_model.model().save(dir / "model");
    }
    write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

IntervenableModel load_bundle(const std::filesystem::path& dir, std::optional<Model> model) {
    json manifest;
    try {
        manifest = json::parse(read_text(dir / "manifest.json"));
    } catch (const json::exception& e) {
        fail(ErrorCode::MalformedDocument, "manifest.json: " + std::string(e.what()));
    }
    if (!manifest.is_object() || manifest.value("format_version", -1) != kBundleFormatVersion) {
        fail(ErrorCode::VersionUnsupported, "bundle format version " +
                                                (manifest.contains("format_version")
                                                     ? manifest["format_version"].dump()
                                                     : std::string("missing")));
    }
    try {
        const std::string digest = manifest.at("schema_digest").get<std::string>();
        if (ModelSchema::from_json(manifest.at("schema")).digest() != digest) {
            fail(ErrorCode::SchemaDigestMismatch, "manifest schema does not match its digest");
        }

        // Every blob is verified before anything is built from it.
        std::map<std::pair<size_t, std::string>, Tensor> tensors;
        for (const auto& entry : manifest.at("blobs")) {
            const std::string file = entry.at("file").get<std::string>();
            const auto bytes = read_file(dir / file);
            if (hex64(fnv1a64(bytes)) != entry.at("fnv1a64").get<std::string>()) {
                fail(ErrorCode::ChecksumMismatch, file);
            }
            const auto blob = decode_blob(bytes);
            if (!blob.tensor.defined()) {
                fail(ErrorCode::DTypeMismatch, file + " holds integers");
            }
            tensors[{entry.at("intervention").get<size_t>(), entry.at("field").get<std::string>()}] = blob.tensor;
        }

        if (!model) {
            if (manifest.at("model").is_null()) {
                fail(ErrorCode::IoFailure, dir.string() + " has no model weights; supply a model");
            }
            model = Model::load(dir / manifest.at("model").get<std::string>());
        }
        if (model->schema().digest() != digest) {
            fail(ErrorCode::SchemaDigestMismatch, "model schema " + model->schema().digest() + " vs bundle " + digest);
        }

        IntervenableConfig config = parse_config(manifest.at("config"), dir);
        IntervenableModel pv(std::move(*model), std::move(config));
        for (const auto& [key, t] : tensors) {
            if (key.second == "constant_source") continue;
            if (key.first >= pv.interventions().size()) {
                fail(ErrorCode::MalformedDocument, "blob for intervention " + std::to_string(key.first));
            }
            pv.interventions()[key.first].set_parameter(key.second, t);
        }
        return pv;
    } catch (const json::exception& e) {
        fail(ErrorCode::MalformedDocument, "manifest.json: " + std::string(e.what()));
    }
}

}  // namespace pvt
