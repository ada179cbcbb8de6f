#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "potq/check.hpp"

namespace potq {

enum class DType : uint8_t { F32 = 0, F16 = 1 };

// Dense row-major tensor. Values are held as f32 in memory; an F16 tensor is
// expected to hold values exactly representable in half precision (file I/O
// stores the raw half bits, so reading decodes and writing re-encodes).
struct Tensor {
    DType dtype = DType::F32;
    std::vector<uint64_t> dims;
    std::vector<float> data;

    uint64_t numel() const;
    bool is_2d() const { return dims.size() == 2; }
    uint32_t rows() const;
    uint32_t cols() const;
    float at(uint64_t r, uint64_t c) const { return data[r * dims[1] + c]; }
    float& at(uint64_t r, uint64_t c) { return data[r * dims[1] + c]; }
};

Tensor make_tensor(std::vector<uint64_t> dims, std::vector<float> data,
                   DType dtype = DType::F32);

// Round every value to its nearest half, tagging the tensor as F16.
Tensor to_f16(const Tensor& t);

// Group layout over a rows x cols matrix: each column is split into
// contiguous row groups of group_size; the last group may be shorter.
// Elements (i, j) and (k, j) share a scale iff i/G == k/G.
struct GroupLayout {
    uint32_t rows = 0;
    uint32_t cols = 0;
    uint32_t group_size = 1;

    uint32_t groups_per_col() const { return (rows + group_size - 1) / group_size; }
    uint32_t group_begin(uint32_t g) const { return g * group_size; }
    uint32_t group_rows(uint32_t g) const;
    uint32_t group_of_row(uint32_t i) const { return i / group_size; }
    uint64_t scale_count() const { return uint64_t(groups_per_col()) * cols; }
    // Scale-grid slots are column-major: column j outer, group g inner.
    uint64_t scale_index(uint32_t g, uint32_t j) const {
        return uint64_t(j) * groups_per_col() + g;
    }
    void validate() const;
};

inline bool operator==(const GroupLayout& a, const GroupLayout& b) {
    return a.rows == b.rows && a.cols == b.cols && a.group_size == b.group_size;
}

GroupLayout layout_for(const Tensor& w, uint32_t group_size);

// Visit every (group, column) subvector exactly once: columns ascending,
// group index ascending within a column. The span is a gathered copy valid
// only for the duration of the call.
template <typename Fn>
void for_each_group(const Tensor& w, const GroupLayout& layout, Fn&& fn) {
    check(w.is_2d(), "for_each_group: tensor must be 2-D");
    check(w.rows() == layout.rows && w.cols() == layout.cols,
          "for_each_group: tensor dims do not match layout");
    std::vector<float> scratch(layout.group_size);
    const uint32_t gpc = layout.groups_per_col();
    for (uint32_t j = 0; j < layout.cols; ++j) {
        for (uint32_t g = 0; g < gpc; ++g) {
            const uint32_t base = layout.group_begin(g);
            const uint32_t len = layout.group_rows(g);
            for (uint32_t r = 0; r < len; ++r) scratch[r] = w.at(base + r, j);
            fn(g, j, std::span<const float>(scratch.data(), len));
        }
    }
}

// "PTEN" tensor file: magic 50 54 45 4E, u16 version=1, u8 dtype (0=f32,
// 1=f16), u8 pad, u32 ndim, ndim x u64 dims, then the little-endian
// row-major payload (f32 words or raw half bits).
void write_tensor(const std::string& path, const Tensor& t);
Tensor read_tensor(const std::string& path);

}  // namespace potq
