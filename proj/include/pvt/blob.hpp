// Copyright 2026 The pvt Authors
// SPDX-License-Identifier: Apache-2.0
//
// Tensor blob format:
//   "PVT1" | dtype u8 (0=f32, 1=f64, 2=i64) | rank u8 | rank x u64 LE extents
//   | row-major little-endian payload

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pvt/tensor.hpp"

namespace pvt {

enum class BlobCode : uint8_t { f32 = 0, f64 = 1, i64 = 2 };

std::vector<uint8_t> encode_blob(const Tensor& tensor);
std::vector<uint8_t> encode_i64_blob(const Shape& shape, const std::vector<int64_t>& values);

struct DecodedBlob {
    BlobCode code = BlobCode::f32;
    Shape shape;
    Tensor tensor;                // set for f32 / f64
    std::vector<int64_t> ints;    // set for i64
};

// Throws ChecksumMismatch on truncated or malformed payloads.
DecodedBlob decode_blob(const std::vector<uint8_t>& bytes);

uint64_t fnv1a64(const std::vector<uint8_t>& bytes);
std::string hex64(uint64_t value);

std::vector<uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::vector<uint8_t>& bytes);
void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

void save_tensor(const std::filesystem::path& path, const Tensor& tensor);
Tensor load_tensor(const std::filesystem::path& path);

}  // namespace pvt
