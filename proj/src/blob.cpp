// Copyright 2026 The pvt Authors
// SPDX-License-Identifier: Apache-2.0

#include "pvt/blob.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace pvt {
namespace {

constexpr char kMagic[4] = {'P', 'V', 'T', '1'};

template <typename T>
void put_le(std::vector<uint8_t>& out, T value) {
    static_assert(std::endian::native == std::endian::little, "big-endian hosts are not supported");
    uint8_t raw[sizeof(T)];
    std::memcpy(raw, &value, sizeof(T));
    out.insert(out.end(), raw, raw + sizeof(T));
}

template <typename T>
T get_le(const std::vector<uint8_t>& in, size_t& pos) {
    if (pos + sizeof(T) > in.size()) {
        fail(ErrorCode::ChecksumMismatch, "blob truncated");
    }
    T value;
    std::memcpy(&value, in.data() + pos, sizeof(T));
    pos += sizeof(T);
    return value;
}

std::vector<uint8_t> header(BlobCode code, const Shape& shape) {
    if (shape.size() > 255) {
        fail(ErrorCode::ShapeMismatch, "blob rank above 255");
    }
    std::vector<uint8_t> out(kMagic, kMagic + 4);
    out.push_back(static_cast<uint8_t>(code));
    out.push_back(static_cast<uint8_t>(shape.size()));
    for (int64_t d : shape) {
        put_le<uint64_t>(out, static_cast<uint64_t>(d));
    }
    return out;
}

}  // namespace

std::vector<uint8_t> encode_blob(const Tensor& tensor) {
    const BlobCode code = tensor.dtype() == DType::f32 ? BlobCode::f32 : BlobCode::f64;
    auto out = header(code, tensor.shape());
    for (double v : tensor.data()) {
        if (code == BlobCode::f32) {
            put_le<float>(out, static_cast<float>(v));
        } else {
            put_le<double>(out, v);
        }
    }
    return out;
}

std::vector<uint8_t> encode_i64_blob(const Shape& shape, const std::vector<int64_t>& values) {
    if (numel_of(shape) != static_cast<int64_t>(values.size())) {
        fail(ErrorCode::ShapeMismatch, "i64 blob values do not fill " + shape_str(shape));
    }
    auto out = header(BlobCode::i64, shape);
    for (int64_t v : values) {
        put_le<int64_t>(out, v);
    }
    return out;
}

DecodedBlob decode_blob(const std::vector<uint8_t>& bytes) {
    if (bytes.size() < 6 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
        fail(ErrorCode::ChecksumMismatch, "missing PVT1 magic");
    }
    DecodedBlob blob;
    const uint8_t code = bytes[4];
    if (code > 2) {
        fail(ErrorCode::VersionUnsupported, "unknown blob dtype code " + std::to_string(code));
    }
    blob.code = static_cast<BlobCode>(code);
    const size_t rank = bytes[5];
    size_t pos = 6;
    for (size_t i = 0; i < rank; ++i) {
        blob.shape.push_back(static_cast<int64_t>(get_le<uint64_t>(bytes, pos)));
    }
    const size_t n = static_cast<size_t>(numel_of(blob.shape));
    const size_t width = blob.code == BlobCode::f32 ? 4 : 8;
    if (bytes.size() - pos != n * width) {
        fail(ErrorCode::ChecksumMismatch, "blob payload has " + std::to_string(bytes.size() - pos) +
                                              " bytes, expected " + std::to_string(n * width));
    }
    if (blob.code == BlobCode::i64) {
        blob.ints.reserve(n);
        for (size_t i = 0; i < n; ++i) {
            blob.ints.push_back(get_le<int64_t>(bytes, pos));
        }
        return blob;
    }
    std::vector<double> values(n);
    for (size_t i = 0; i < n; ++i) {
        values[i] = blob.code == BlobCode::f32 ? static_cast<double>(get_le<float>(bytes, pos))
                                               : get_le<double>(bytes, pos);
    }
    blob.tensor = Tensor::from(blob.shape, std::move(values),
                               blob.code == BlobCode::f32 ? DType::f32 : DType::f64);
    return blob;
}

uint64_t fnv1a64(const std::vector<uint8_t>& bytes) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (uint8_t b : bytes) {
        h ^= b;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string hex64(uint64_t value) {
    static constexpr char kDigits[] = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<size_t>(i)] = kDigits[value & 0xF];
        value >>= 4;
    }
    return s;
}

std::vector<uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        fail(ErrorCode::IoFailure, "cannot open " + path.string());
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, const std::vector<uint8_t>& bytes) {
    if (path.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(path.parent_path(), ec);
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        fail(ErrorCode::IoFailure, "cannot write " + path.string());
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        fail(ErrorCode::IoFailure, "short write to " + path.string());
    }
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    write_file(path, std::vector<uint8_t>(text.begin(), text.end()));
}

std::string read_text(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    return {bytes.begin(), bytes.end()};
}

void save_tensor(const std::filesystem::path& path, const Tensor& tensor) {
    write_file(path, encode_blob(tensor));
}

Tensor load_tensor(const std::filesystem::path& path) {
    auto blob = decode_blob(read_file(path));
    if (!blob.tensor.defined()) {
        fail(ErrorCode::DTypeMismatch, path.string() + " holds integer data");
    }
    return blob.tensor;
}

}  // namespace pvt
