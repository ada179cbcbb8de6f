#include "potq/dequant.hpp"

#include <cstdio>
#include <cstring>
#include <memory>

#include "potq/check.hpp"
#include "potq/parallel.hpp"

namespace potq {

namespace {

void check_bits(int bits) {
    check(bits >= 2 && bits <= 4, "unsupported bit-width (want 2..4)");
}

}  // namespace

// Branch-light float -> half with round-to-nearest-even; agrees with
// fp16::encode on every input (tested exhaustively against it). Used by the
// float dequantization path where the conversion cost is part of the
// measured work.
uint16_t f32_to_f16_rne(float f) {
    uint32_t x;
    __builtin_memcpy(&x, &f, sizeof(x));
    const uint32_t u = x & 0x7FFFFFFFu;
    const uint16_t sign = static_cast<uint16_t>((x >> 16) & 0x8000u);
    if (u > 0x7F800000u) return fp16::kQuietNaN;
    if (u > 0x477FEFFFu) return sign | fp16::kPositiveInfinity;  // >= 65520
    if (u < 0x33000001u) return sign;  // <= 2^-25 rounds to zero

    uint32_t exponent = (u >> 23) & 0xFFu;
    uint32_t mantissa = u & 0x7FFFFFu;
    uint32_t shift;
    if (exponent > 0x70u) {
        shift = 13;
        exponent -= 0x70u;
    } else {
        shift = 0x7Eu - exponent;  // subnormal result
        exponent = 0;
        mantissa |= 0x800000u;
    }
    const uint32_t halfway = 1u << (shift - 1);
    const uint32_t remainder = mantissa & ((1u << shift) - 1u);
    mantissa >>= shift;
    if (remainder > halfway || (remainder == halfway && (mantissa & 1u))) {
        ++mantissa;
        if (!(mantissa & 0x3FFu)) {
            ++exponent;
            mantissa = 0;
        }
    }
    return static_cast<uint16_t>(sign | (exponent << 10) | mantissa);
}

PackedCodes pack(std::span<const PotCode> codes, int bits) {
    check_bits(bits);
    const uint32_t max_exp = (1u << (bits - 1)) - 1u;
    PackedCodes p;
    p.bits = bits;
    p.count = codes.size();
    const int per = codes_per_word(bits);
    p.words.assign((codes.size() + per - 1) / per, 0);
    for (size_t k = 0; k < codes.size(); ++k) {
        check(codes[k].exponent <= max_exp, "exponent out of range for bit-width");
        check(codes[k].sign == 1 || codes[k].sign == -1, "code sign must be +1 or -1");
        p.words[k / per] |= make_slot(codes[k], bits) << ((k % per) * bits);
    }
    return p;
}

std::vector<PotCode> unpack(const PackedCodes& packed, uint64_t count) {
    check_bits(packed.bits);
    check(count <= packed.count, "unpack: count exceeds stored codes");
    const int per = codes_per_word(packed.bits);
    const uint32_t mask = (1u << packed.bits) - 1u;
    std::vector<PotCode> out;
    out.reserve(count);
    for (uint64_t k = 0; k < count; ++k) {
        const uint32_t word = packed.words[k / per];
        out.push_back(slot_code((word >> ((k % per) * packed.bits)) & mask, packed.bits));
    }
    return out;
}

void QuantizedMatrix::set_column_codes(uint32_t j, std::span<const PotCode> col) {
    check(col.size() == layout.rows, "column code count mismatch");
    const PackedCodes p = pack(col, bits);
    std::copy(p.words.begin(), p.words.end(),
              code_words.begin() + uint64_t(j) * words_per_col());
}

void QuantizedMatrix::validate() const {
    layout.validate();
    check_bits(bits);
    check(scale_bits.size() == layout.scale_count(), "scale count mismatch");
    check(code_words.size() == uint64_t(layout.cols) * words_per_col(),
          "code word count mismatch");
    const uint32_t qmax = static_cast<uint32_t>(q_max());
    for (uint16_t s : scale_bits) {
        check(fp16::is_normal_positive(s), "scale must be a positive normal half");
        check(fp16::exponent_field(s) + qmax <= 30u, "scale exponent headroom violated");
    }
    // Canonical padding: bits past the last slot of each column are zero.
    const int per = codes_per_word(bits);
    const uint32_t wpc = words_per_col();
    const uint32_t full_words = layout.rows / per;
    const uint32_t tail_slots = layout.rows % per;
    for (uint32_t j = 0; j < layout.cols; ++j) {
        const uint32_t* col = code_words.data() + uint64_t(j) * wpc;
        for (uint32_t w = 0; w < wpc; ++w) {
            uint32_t valid_bits = 32;
            if (w > full_words) valid_bits = 0;
            else if (w == full_words) valid_bits = tail_slots * bits;
            else valid_bits = per * bits;  // may be < 32 for n=3
            if (valid_bits < 32) {
                check((col[w] >> valid_bits) == 0, "non-canonical code padding");
            }
        }
    }
}

void dequant_matrix_bits(const QuantizedMatrix& q, std::span<uint16_t> out, int threads) {
    check(out.size() == uint64_t(q.layout.rows) * q.layout.cols, "output size mismatch");
    const int bits = q.bits;
    const uint32_t per = static_cast<uint32_t>(codes_per_word(bits));
    const uint32_t mask = (1u << bits) - 1u;
    const uint32_t rows = q.layout.rows;
    const uint32_t cols = q.layout.cols;
    const uint32_t wpc = q.words_per_col();
    const uint32_t gpc = q.layout.groups_per_col();
    const uint32_t gsize = q.layout.group_size;

    // Every slot maps to one of 2^bits addends; the per-element work is a
    // table lookup plus the 16-bit addition.
    uint16_t addend[16] = {};
    for (uint32_t slot = 0; slot < (1u << bits); ++slot)
        addend[slot] = assemble_signed_exponent(slot, bits);

    // Tiled over columns so the current word and scale of each column stay
    // cache-resident while rows advance and stores stay sequential.
    constexpr uint32_t kTile = 1024;
    parallel_for(wpc, threads, [&](uint64_t w0, uint64_t w1) {
        std::vector<uint32_t> words(std::min(cols, kTile));
        std::vector<uint16_t> scales(std::min(cols, kTile));
        for (uint32_t ja = 0; ja < cols; ja += kTile) {
            const uint32_t jb = std::min(cols, ja + kTile);
            for (uint64_t wi = w0; wi < w1; ++wi) {
                const uint32_t i0 = uint32_t(wi) * per;
                const uint32_t in_word = std::min(per, rows - i0);
                for (uint32_t j = ja; j < jb; ++j)
                    words[j - ja] = q.code_words[uint64_t(j) * wpc + wi];
                uint32_t cur_group = UINT32_MAX;
                for (uint32_t s = 0; s < in_word; ++s) {
                    const uint32_t i = i0 + s;
                    if (i / gsize != cur_group) {
                        cur_group = i / gsize;
                        for (uint32_t j = ja; j < jb; ++j)
                            scales[j - ja] = q.scale_bits[uint64_t(j) * gpc + cur_group];
                    }
                    uint16_t* orow = out.data() + uint64_t(i) * cols + ja;
                    for (uint32_t j = 0; j < jb - ja; ++j) {
                        orow[j] = static_cast<uint16_t>(scales[j] + addend[words[j] & mask]);
                        words[j] >>= bits;
                    }
                }
            }
        }
    });
}

Tensor dequant_matrix(const QuantizedMatrix& q, int threads) {
    std::vector<uint16_t> bits_out(uint64_t(q.layout.rows) * q.layout.cols);
    dequant_matrix_bits(q, bits_out, threads);
    std::vector<float> vals(bits_out.size());
    for (size_t i = 0; i < bits_out.size(); ++i) vals[i] = fp16::decode(bits_out[i]);
    return make_tensor({q.layout.rows, q.layout.cols}, std::move(vals), DType::F16);
}

void dequant_uniform_bits(const UniformQuantized& u, std::span<uint16_t> out, int threads) {
    check(out.size() == uint64_t(u.layout.rows) * u.layout.cols, "output size mismatch");
    check(u.codes.size() == out.size(), "code count mismatch");
    check(u.scales.size() == u.layout.scale_count() &&
              u.zero_points.size() == u.layout.scale_count(),
          "scale/zero-point count mismatch");
    const uint32_t rows = u.layout.rows;
    const uint32_t cols = u.layout.cols;
    const uint32_t gpc = u.layout.groups_per_col();
    const uint32_t gsize = u.layout.group_size;
    // Row-major like the code storage; per-column scale and zero point are
    // gathered once per group of rows.
    constexpr uint32_t kTile = 1024;
    parallel_for(rows, threads, [&](uint64_t r0, uint64_t r1) {
        std::vector<float> scales(std::min(cols, kTile));
        std::vector<float> zeros(std::min(cols, kTile));
        for (uint32_t ja = 0; ja < cols; ja += kTile) {
            const uint32_t jb = std::min(cols, ja + kTile);
            uint32_t cur_group = UINT32_MAX;
            for (uint64_t i = r0; i < r1; ++i) {
                const uint32_t g = uint32_t(i) / gsize;
                if (g != cur_group) {
                    cur_group = g;
                    for (uint32_t j = ja; j < jb; ++j) {
                        scales[j - ja] = u.scales[uint64_t(j) * gpc + g];
                        zeros[j - ja] = float(u.zero_points[uint64_t(j) * gpc + g]);
                    }
                }
                const uint8_t* crow = u.codes.data() + i * cols + ja;
                uint16_t* orow = out.data() + i * cols + ja;
                for (uint32_t j = 0; j < jb - ja; ++j)
                    orow[j] = f32_to_f16_rne((float(crow[j]) + zeros[j]) * scales[j]);
            }
        }
    });
}

Tensor dequant_uniform(const UniformQuantized& u, int threads) {
    std::vector<uint16_t> bits_out(uint64_t(u.layout.rows) * u.layout.cols);
    dequant_uniform_bits(u, bits_out, threads);
    std::vector<float> vals(bits_out.size());
    for (size_t i = 0; i < bits_out.size(); ++i) vals[i] = fp16::decode(bits_out[i]);
    return make_tensor({u.layout.rows, u.layout.cols}, std::move(vals), DType::F16);
}

Tensor gemm_dequant(const QuantizedMatrix& q, const Tensor& x, int threads) {
    check(x.is_2d(), "gemm: input must be 2-D");
    const uint32_t m = x.rows();
    const uint32_t k = q.layout.rows;
    const uint32_t n = q.layout.cols;
    check(x.cols() == k, "gemm: inner dimensions disagree");

    const Tensor w = dequant_matrix(q, threads);
    std::vector<float> out(uint64_t(m) * n, 0.0f);
    parallel_for(m, threads, [&](uint64_t r0, uint64_t r1) {
        for (uint64_t r = r0; r < r1; ++r) {
            float* orow = out.data() + r * n;
            for (uint32_t kk = 0; kk < k; ++kk) {
                const float xv = x.data[r * k + kk];
                const float* wrow = w.data.data() + uint64_t(kk) * n;
                for (uint32_t c = 0; c < n; ++c) orow[c] += xv * wrow[c];
            }
        }
    });
    return make_tensor({m, n}, std::move(out), DType::F32);
}

namespace {

constexpr char kMagic[4] = {'P', 'O', 'T', 'Q'};
constexpr uint16_t kVersion = 1;

struct FileCloser {
    void operator()(FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

void put(FILE* f, const void* p, size_t n) {
    check(std::fwrite(p, 1, n, f) == n, "write failed");
}
void put_u16(FILE* f, uint16_t v) {
    uint8_t b[2] = {uint8_t(v), uint8_t(v >> 8)};
    put(f, b, 2);
}
void put_u32(FILE* f, uint32_t v) {
    uint8_t b[4] = {uint8_t(v), uint8_t(v >> 8), uint8_t(v >> 16), uint8_t(v >> 24)};
    put(f, b, 4);
}
bool get(FILE* f, void* p, size_t n) { return std::fread(p, 1, n, f) == n; }
uint16_t get_u16(FILE* f, const std::string& path) {
    uint8_t b[2];
    check(get(f, b, 2), "truncated quantized file: " + path);
    return uint16_t(b[0] | (b[1] << 8));
}
uint32_t get_u32(FILE* f, const std::string& path) {
    uint8_t b[4];
    check(get(f, b, 4), "truncated quantized file: " + path);
    return uint32_t(b[0]) | (uint32_t(b[1]) << 8) | (uint32_t(b[2]) << 16) |
           (uint32_t(b[3]) << 24);
}

}  // namespace

void write_potq(const std::string& path, const QuantizedMatrix& q) {
    q.validate();
    FilePtr f(std::fopen(path.c_str(), "wb"));
    check(f != nullptr, "cannot open for writing: " + path);
    put(f.get(), kMagic, 4);
    put_u16(f.get(), kVersion);
    const uint8_t nb = static_cast<uint8_t>(q.bits);
    const uint8_t flags = 0;
    put(f.get(), &nb, 1);
    put(f.get(), &flags, 1);
    put_u32(f.get(), q.layout.group_size);
    put_u32(f.get(), q.layout.rows);
    put_u32(f.get(), q.layout.cols);
    for (uint16_t s : q.scale_bits) put_u16(f.get(), s);
    for (uint32_t w : q.code_words) put_u32(f.get(), w);
}

QuantizedMatrix read_potq(const std::string& path) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    check(f != nullptr, "cannot open: " + path);
    char magic[4];
    check(get(f.get(), magic, 4), "truncated quantized file: " + path);
    check(std::memcmp(magic, kMagic, 4) == 0, "bad magic in quantized file: " + path);
    check(get_u16(f.get(), path) == kVersion, "unsupported quantized file version: " + path);
    uint8_t nb = 0, flags = 0;
    check(get(f.get(), &nb, 1) && get(f.get(), &flags, 1),
          "truncated quantized file: " + path);
    check(flags == 0, "unsupported flags in quantized file: " + path);

    QuantizedMatrix q;
    q.bits = nb;
    check_bits(q.bits);
    q.layout.group_size = get_u32(f.get(), path);
    q.layout.rows = get_u32(f.get(), path);
    q.layout.cols = get_u32(f.get(), path);
    q.layout.validate();
    check(uint64_t(q.layout.rows) * q.layout.cols <= (uint64_t(1) << 33),
          "quantized file too large: " + path);

    q.scale_bits.reserve(q.layout.scale_count());
    for (uint64_t i = 0; i < q.layout.scale_count(); ++i)
        q.scale_bits.push_back(get_u16(f.get(), path));
    const uint64_t nwords = uint64_t(q.layout.cols) * q.words_per_col();
    q.code_words.reserve(nwords);
    for (uint64_t i = 0; i < nwords; ++i) q.code_words.push_back(get_u32(f.get(), path));

    uint8_t extra;
    check(!get(f.get(), &extra, 1), "trailing bytes in quantized file: " + path);
    q.validate();
    return q;
}

}  // namespace potq
