#pragma once

#include <cassert>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "potq/fp16.hpp"
#include "potq/tensor.hpp"

namespace potq {

// One signed power-of-two code; together with a group scale s the stored
// value is s * sign * 2^exponent.
struct PotCode {
    int8_t sign = 1;       // -1 or +1
    uint8_t exponent = 0;  // in [0, 2^(n-1) - 1]
};

inline bool operator==(PotCode a, PotCode b) {
    return a.sign == b.sign && a.exponent == b.exponent;
}

inline int codes_per_word(int bits) { return 32 / bits; }

// n-bit slot layout: sign at the slot MSB, n-1 exponent bits below it.
inline uint32_t make_slot(PotCode c, int bits) {
    return (uint32_t(c.sign < 0) << (bits - 1)) | c.exponent;
}

inline PotCode slot_code(uint32_t slot, int bits) {
    PotCode c;
    c.sign = (slot >> (bits - 1)) & 1u ? -1 : 1;
    c.exponent = static_cast<uint8_t>(slot & ((1u << (bits - 1)) - 1u));
    return c;
}

// Bit-packed code stream: little-endian 32-bit words, slots packed LSB-first,
// floor(32/n) slots per word. Unused high bits and trailing slots are zero
// (canonical form, so equal code sequences give byte-equal streams).
struct PackedCodes {
    int bits = 3;
    uint64_t count = 0;
    std::vector<uint32_t> words;
};

PackedCodes pack(std::span<const PotCode> codes, int bits);
std::vector<PotCode> unpack(const PackedCodes& packed, uint64_t count);
inline std::vector<PotCode> unpack(const PackedCodes& packed) {
    return unpack(packed, packed.count);
}

// --- dequantization kernel ---

// Place a slot's sign at FP16 bit 15 and its exponent value at the base of
// the FP16 exponent field (bits 14..10).
inline uint16_t assemble_signed_exponent(uint32_t slot, int bits) {
    const uint32_t sign = (slot >> (bits - 1)) & 1u;
    const uint32_t e = slot & ((1u << (bits - 1)) - 1u);
    return static_cast<uint16_t>((sign << 15) | (e << 10));
}

// Dequantize one code against a positive-normal FP16 scale with a single
// 16-bit integer addition: result == scale * (-1)^S * 2^E bit-exactly while
// exponent_field(scale) + q_max <= 30.
inline uint16_t dequant_code(uint32_t slot, uint16_t scale_bits, int bits) {
    assert(fp16::is_normal_positive(scale_bits));
    assert(fp16::exponent_field(scale_bits) + ((1u << (bits - 1)) - 1u) <= 30u);
    return static_cast<uint16_t>(scale_bits + assemble_signed_exponent(slot, bits));
}

// Quantized matrix: per-(group, column) FP16 scale bits plus packed codes.
// Codes are stored per column (columns ascending), each column starting on a
// fresh 32-bit word.
struct QuantizedMatrix {
    GroupLayout layout;
    int bits = 3;
    std::vector<uint16_t> scale_bits;  // [layout.scale_index(g, j)]
    std::vector<uint32_t> code_words;  // cols * words_per_col()

    int q_max() const { return (1 << (bits - 1)) - 1; }
    uint32_t words_per_col() const {
        const uint32_t per = static_cast<uint32_t>(codes_per_word(bits));
        return (layout.rows + per - 1) / per;
    }
    uint32_t slot_at(uint32_t i, uint32_t j) const {
        const uint32_t per = static_cast<uint32_t>(codes_per_word(bits));
        const uint32_t word = code_words[uint64_t(j) * words_per_col() + i / per];
        return (word >> ((i % per) * bits)) & ((1u << bits) - 1u);
    }
    PotCode code_at(uint32_t i, uint32_t j) const { return slot_code(slot_at(i, j), bits); }
    uint16_t scale_at(uint32_t i, uint32_t j) const {
        return scale_bits[layout.scale_index(layout.group_of_row(i), j)];
    }
    void set_column_codes(uint32_t j, std::span<const PotCode> col);
    void validate() const;
};

// Integer-addition dequantization of the whole matrix into raw half bits
// (row-major). The benchmark path.
void dequant_matrix_bits(const QuantizedMatrix& q, std::span<uint16_t> out, int threads = 1);

// Same, decoded into an f16 tensor.
Tensor dequant_matrix(const QuantizedMatrix& q, int threads = 1);

// Uniform round-to-nearest baseline storage; dequantization is the float
// path (code + Z) * S per element.
struct UniformQuantized {
    GroupLayout layout;
    int bits = 3;
    std::vector<float> scales;         // [layout.scale_index(g, j)]
    std::vector<int32_t> zero_points;  // [layout.scale_index(g, j)]
    std::vector<uint8_t> codes;        // row-major rows x cols
};

void dequant_uniform_bits(const UniformQuantized& u, std::span<uint16_t> out, int threads = 1);
Tensor dequant_uniform(const UniformQuantized& u, int threads = 1);

// Branch-light float -> half (round-to-nearest-even), bit-identical to
// fp16::encode; the conversion step of the float dequantization path.
uint16_t f32_to_f16_rne(float f);

// Dequantize-then-multiply: Y = X * dequant(q), f32 accumulation.
// X is M x rows, the result is M x cols.
Tensor gemm_dequant(const QuantizedMatrix& q, const Tensor& x, int threads = 1);

// "POTQ" file: magic 50 4F 54 51, u16 version=1, u8 n_bits, u8 flags=0,
// u32 group_size, u32 d_out, u32 d_in; then scale half bits (column j
// ascending, group g ascending); then each column's packed codes.
void write_potq(const std::string& path, const QuantizedMatrix& q);
QuantizedMatrix read_potq(const std::string& path);

}  // namespace potq
