#include "mergeforge/dtype.hpp"

#include <bit>
#include <cstring>

namespace mergeforge {

static_assert(std::endian::native == std::endian::little,
              "checkpoint container code assumes a little-endian host");

std::optional<DType> dtype_from_name(std::string_view name) {
    if (name == "F64") return DType::F64;
    if (name == "F32") return DType::F32;
    if (name == "F16") return DType::F16;
    if (name == "BF16") return DType::BF16;
    return std::nullopt;
}

float f16_to_f32(std::uint16_t h) {
    const std::uint32_t sign = std::uint32_t(h & 0x8000u) << 16;
    const std::uint32_t exp = (h >> 10) & 0x1Fu;
    std::uint32_t mant = h & 0x03FFu;
    std::uint32_t bits;
    if (exp == 0) {
        if (mant == 0) {
            bits = sign;  // signed zero
        } else {
            // subnormal: renormalize into the f32 exponent range
            int shift = 0;
            while (!(mant & 0x0400u)) {
                mant <<= 1;
                ++shift;
            }
            mant &= 0x03FFu;
            bits = sign | (std::uint32_t(113 - shift) << 23) | (mant << 13);
        }
    } else if (exp == 31) {
        // inf stays inf; NaN becomes a quiet NaN with the payload shifted up
        bits = sign | 0x7F800000u | (mant ? (0x00400000u | (mant << 13)) : 0u);
    } else {
        bits = sign | ((exp + 112u) << 23) | (mant << 13);
    }
    return std::bit_cast<float>(bits);
}

std::uint16_t f32_to_f16(float value) {
    const std::uint32_t x = std::bit_cast<std::uint32_t>(value);
    const std::uint16_t sign = std::uint16_t((x >> 16) & 0x8000u);
    const std::uint32_t abs = x & 0x7FFFFFFFu;

    if (abs >= 0x7F800000u) {  // inf or NaN
        return abs > 0x7F800000u ? std::uint16_t(sign | 0x7E00u)
                                 : std::uint16_t(sign | 0x7C00u);
    }

    const std::int32_t exp = std::int32_t(abs >> 23) - 127;
    std::int32_t hexp = exp + 15;
    if (hexp >= 31) return std::uint16_t(sign | 0x7C00u);  // overflow to inf

    std::uint32_t mant = abs & 0x007FFFFFu;
    if (abs != 0) mant |= 0x00800000u;

    // Shift the 24-bit significand down to 11 bits (or fewer for
    // subnormals), rounding to nearest even on the dropped bits.
    std::int32_t shift = 13;
    if (hexp <= 0) {
        shift += 1 - hexp;
        hexp = 0;
    }
    if (shift > 31) return sign;  // underflows past the rounding range

    std::uint32_t keep = mant >> shift;
    const std::uint32_t rem = mant & ((1u << shift) - 1u);
    const std::uint32_t half = 1u << (shift - 1);
    if (rem > half || (rem == half && (keep & 1u))) ++keep;

    // For normals `keep` still contains the implicit bit, which the sum
    // below folds into the exponent field (and lets a rounding carry bump
    // the exponent, including overflow into inf).
    std::uint32_t out = (std::uint32_t(hexp) << 10) + keep;
    if (hexp > 0) out -= 1u << 10;
    return std::uint16_t(sign | out);
}

float bf16_to_f32(std::uint16_t b) {
    return std::bit_cast<float>(std::uint32_t(b) << 16);
}

std::uint16_t f32_to_bf16(float value) {
    std::uint32_t x = std::bit_cast<std::uint32_t>(value);
    if ((x & 0x7FFFFFFFu) > 0x7F800000u) {  // NaN
        return std::uint16_t(((x >> 16) & 0x8000u) | 0x7FC0u);
    }
    x += 0x7FFFu + ((x >> 16) & 1u);  // round to nearest even on bit 16
    return std::uint16_t(x >> 16);
}

}  // namespace mergeforge
