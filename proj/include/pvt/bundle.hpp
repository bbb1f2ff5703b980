// Copyright 2026 The pvt Authors
// SPDX-License-Identifier: Apache-2.0
//
// Bundle directory layout:
//   manifest.json                  format_version, schema_digest, schema,
//                                  config, blobs [{file, fnv1a64, ...}]
//   intervention_{i}_{field}.pvt   trainable intervention tensors
//   constant_{i}.pvt               constant sources
//   model/                         model checkpoint (optional)

#pragma once

#include <filesystem>
#include <optional>

#include "pvt/engine.hpp"

namespace pvt {

inline constexpr int kBundleFormatVersion = 1;

// Byte-deterministic for identical state. Throws IoFailure.
void save_bundle(const IntervenableModel& pv_model, const std::filesystem::path& dir, bool include_model_weights);

// Uses `model` when given, otherwise the bundled weights.
// Throws ChecksumMismatch, SchemaDigestMismatch, VersionUnsupported,
// MalformedDocument, IoFailure.
IntervenableModel load_bundle(const std::filesystem::path& dir, std::optional<Model> model = std::nullopt);

}  // namespace pvt
