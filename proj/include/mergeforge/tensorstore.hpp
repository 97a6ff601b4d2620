#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mergeforge/dtype.hpp"

namespace mergeforge::tensorstore {

struct StoreError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct MalformedHeader : StoreError {
    using StoreError::StoreError;
};
struct OverlappingTensors : StoreError {
    using StoreError::StoreError;
};
struct TruncatedData : StoreError {
    using StoreError::StoreError;
};
struct UnknownDType : StoreError {
    using StoreError::StoreError;
};
struct IoFailure : StoreError {
    using StoreError::StoreError;
};

// One named tensor: row-major, little-endian bytes.
struct TensorRecord {
    std::string name;
    DType dtype = DType::F32;
    std::vector<std::uint64_t> shape;
    std::vector<std::uint8_t> data;

    std::uint64_t numel() const;
    std::uint64_t byte_size() const { return numel() * dtype_width(dtype); }

    bool operator==(const TensorRecord&) const = default;
};

// Tensors keyed (and therefore iterated) in lexicographic name order.
struct Checkpoint {
    std::map<std::string, TensorRecord> tensors;
    std::map<std::string, std::string> metadata;

    void add(TensorRecord t);
    bool has(const std::string& name) const { return tensors.count(name) != 0; }

    bool operator==(const Checkpoint&) const = default;
};

// Container layout: [8-byte LE length N][N bytes JSON header][data buffer].
// Header maps tensor name -> {"dtype", "shape", "data_offsets"}, with an
// optional "__metadata__" string map. Offsets are relative to the data
// buffer, which must be gap-free and non-overlapping.
Checkpoint read_checkpoint(std::istream& in);
Checkpoint read_checkpoint(const std::filesystem::path& path);

// Serializes tensors contiguously in lexicographic name order. Writing is a
// pure function of the checkpoint value, so equal checkpoints produce
// byte-identical files. The path overload writes to a temp file and renames.
void write_checkpoint(const Checkpoint& ckpt, std::ostream& out);
void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);

// Widens every element to f64. Length equals numel(), including scalars
// (shape [] -> 1) and empty tensors (any 0 in the shape -> 0).
std::vector<double> decode_f64(const TensorRecord& t);

// Re-encodes in the target dtype. Same-dtype casts return the record
// unchanged; narrowing rounds to nearest even and canonicalizes NaNs.
TensorRecord cast(const TensorRecord& t, DType target);

// Encodes f64 values into a fresh record of the given dtype.
TensorRecord tensor_from_values(std::string name, DType dtype,
                                std::vector<std::uint64_t> shape,
                                std::span<const double> values);

}  // namespace mergeforge::tensorstore
