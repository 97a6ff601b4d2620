#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string_view>

namespace mergeforge {

// Element types understood by the checkpoint container.
enum class DType : std::uint8_t { F64, F32, F16, BF16 };

constexpr std::size_t dtype_width(DType d) {
    switch (d) {
        case DType::F64: return 8;
        case DType::F32: return 4;
        case DType::F16: return 2;
        case DType::BF16: return 2;
    }
    return 0;
}

constexpr const char* dtype_name(DType d) {
    switch (d) {
        case DType::F64: return "F64";
        case DType::F32: return "F32";
        case DType::F16: return "F16";
        case DType::BF16: return "BF16";
    }
    return "?";
}

std::optional<DType> dtype_from_name(std::string_view name);

// Scalar conversions between IEEE binary32 and the two 16-bit formats.
// Narrowing rounds to nearest, ties to even; NaNs are canonicalized by the
// callers in tensorstore, not here.
float f16_to_f32(std::uint16_t bits);
std::uint16_t f32_to_f16(float value);
float bf16_to_f32(std::uint16_t bits);
std::uint16_t f32_to_bf16(float value);

}  // namespace mergeforge
