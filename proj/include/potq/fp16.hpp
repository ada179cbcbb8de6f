#pragma once

#include <cmath>
#include <cstdint>
#include <limits>

namespace potq::fp16 {

// IEEE 754 binary16: 1 sign bit, 5 exponent bits (bias 15), 10 mantissa bits.
inline constexpr int kExponentBias = 15;
inline constexpr uint16_t kSignMask = 0x8000;
inline constexpr uint16_t kExponentMask = 0x7C00;
inline constexpr uint16_t kMantissaMask = 0x03FF;
inline constexpr uint16_t kPositiveInfinity = 0x7C00;
inline constexpr uint16_t kQuietNaN = 0x7E00;  // canonical NaN produced by encode
inline constexpr uint16_t kMinNormal = 0x0400; // 2^-14

struct Fields {
    uint16_t sign;      // 0 or 1
    uint16_t exponent;  // raw 5-bit field
    uint16_t mantissa;  // 10 bits
};

constexpr Fields decompose(uint16_t bits) {
    return Fields{static_cast<uint16_t>(bits >> 15),
                  static_cast<uint16_t>((bits >> 10) & 0x1Fu),
                  static_cast<uint16_t>(bits & kMantissaMask)};
}

constexpr uint16_t compose(uint16_t sign, uint16_t exponent, uint16_t mantissa) {
    return static_cast<uint16_t>(((sign & 1u) << 15) | ((exponent & 0x1Fu) << 10) |
                                 (mantissa & kMantissaMask));
}

constexpr uint16_t exponent_field(uint16_t bits) {
    return static_cast<uint16_t>((bits >> 10) & 0x1Fu);
}

// True iff the pattern is positive with a normal exponent field.
constexpr bool is_normal_positive(uint16_t bits) {
    const uint16_t e = exponent_field(bits);
    return (bits & kSignMask) == 0 && e > 0 && e < 31;
}

// Exact value of a half pattern, subnormals and signed zeros included.
// NaN patterns decode to a quiet NaN float.
inline float decode(uint16_t bits) {
    const uint16_t e = exponent_field(bits);
    const uint16_t m = bits & kMantissaMask;
    float v;
    if (e == 31) {
        v = m ? std::numeric_limits<float>::quiet_NaN()
              : std::numeric_limits<float>::infinity();
    } else if (e == 0) {
        v = std::ldexp(static_cast<float>(m), -24);  // subnormal: m * 2^-24
    } else {
        v = std::ldexp(1.0f + static_cast<float>(m) * (1.0f / 1024.0f),
                       static_cast<int>(e) - kExponentBias);
    }
    return (bits & kSignMask) ? -v : v;
}

// Nearest half with ties to even. Overflow gives a signed infinity, values
// at or below half the smallest subnormal give a signed zero, NaN gives the
// canonical quiet NaN pattern.
inline uint16_t encode(double x) {
    if (std::isnan(x)) return kQuietNaN;
    const uint16_t sign = std::signbit(x) ? kSignMask : 0;
    if (std::isinf(x)) return sign | kPositiveInfinity;
    const double ax = std::fabs(x);
    if (ax == 0.0) return sign;

    int e = 0;
    std::frexp(ax, &e);
    e -= 1;             // ax = g * 2^e, g in [1, 2)
    if (e < -14) e = -14;

    // Integer units of the result LSB 2^(e-10), then round to nearest even.
    const double units = std::ldexp(ax, 10 - e);
    uint32_t u = static_cast<uint32_t>(units);
    const double frac = units - static_cast<double>(u);
    if (frac > 0.5 || (frac == 0.5 && (u & 1u))) u += 1;

    if (u >= 2048) {  // mantissa overflow rolls into the exponent
        u >>= 1;
        e += 1;
    }
    if (u == 0) return sign;
    if (e > 15) return sign | kPositiveInfinity;
    if (u < 1024) return sign | static_cast<uint16_t>(u);  // subnormal, e == -14
    return static_cast<uint16_t>(sign | ((e + kExponentBias) << 10) | (u - 1024));
}

inline uint16_t encode(float x) { return encode(static_cast<double>(x)); }

}  // namespace potq::fp16
