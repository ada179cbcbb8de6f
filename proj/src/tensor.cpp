#include "potq/tensor.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <memory>

#include "potq/fp16.hpp"

namespace potq {

uint64_t Tensor::numel() const {
    uint64_t n = dims.empty() ? 0 : 1;
    for (uint64_t d : dims) n *= d;
    return n;
}

uint32_t Tensor::rows() const {
    check(is_2d(), "tensor is not 2-D");
    return static_cast<uint32_t>(dims[0]);
}

uint32_t Tensor::cols() const {
    check(is_2d(), "tensor is not 2-D");
    return static_cast<uint32_t>(dims[1]);
}

Tensor make_tensor(std::vector<uint64_t> dims, std::vector<float> data, DType dtype) {
    check(!dims.empty(), "tensor dims must be non-empty");
    uint64_t n = 1;
    for (uint64_t d : dims) {
        check(d > 0, "tensor dims must be positive");
        n *= d;
    }
    check(n == data.size(), "tensor dims do not match element count");
    Tensor t;
    t.dtype = dtype;
    t.dims = std::move(dims);
    t.data = std::move(data);
    return t;
}

Tensor to_f16(const Tensor& t) {
    Tensor out = t;
    out.dtype = DType::F16;
    for (float& v : out.data) v = fp16::decode(fp16::encode(v));
    return out;
}

uint32_t GroupLayout::group_rows(uint32_t g) const {
    const uint32_t lo = g * group_size;
    return std::min(group_size, rows - lo);
}

void GroupLayout::validate() const {
    check(rows >= 1 && cols >= 1, "group layout needs positive dims");
    check(group_size >= 1, "group size must be >= 1");
}

GroupLayout layout_for(const Tensor& w, uint32_t group_size) {
    check(w.is_2d(), "group layout requires a 2-D tensor");
    GroupLayout layout{w.rows(), w.cols(), group_size};
    layout.validate();
    return layout;
}

namespace {

constexpr char kMagic[4] = {'P', 'T', 'E', 'N'};
constexpr uint16_t kVersion = 1;

struct Writer {
    FILE* f;
    void u8(uint8_t v) { put(&v, 1); }
    void u16(uint16_t v) {
        uint8_t b[2] = {uint8_t(v), uint8_t(v >> 8)};
        put(b, 2);
    }
    void u32(uint32_t v) {
        uint8_t b[4] = {uint8_t(v), uint8_t(v >> 8), uint8_t(v >> 16), uint8_t(v >> 24)};
        put(b, 4);
    }
    void u64(uint64_t v) {
        uint8_t b[8];
        for (int i = 0; i < 8; ++i) b[i] = uint8_t(v >> (8 * i));
        put(b, 8);
    }
    void put(const void* p, size_t n) {
        check(std::fwrite(p, 1, n, f) == n, "tensor write failed");
    }
};

struct Reader {
    FILE* f;
    std::string path;
    bool get(void* p, size_t n) { return std::fread(p, 1, n, f) == n; }
    uint8_t u8() {
        uint8_t v;
        check(get(&v, 1), "truncated tensor file: " + path);
        return v;
    }
    uint16_t u16() {
        uint8_t b[2];
        check(get(b, 2), "truncated tensor file: " + path);
        return uint16_t(b[0] | (b[1] << 8));
    }
    uint32_t u32() {
        uint8_t b[4];
        check(get(b, 4), "truncated tensor file: " + path);
        return uint32_t(b[0]) | (uint32_t(b[1]) << 8) | (uint32_t(b[2]) << 16) |
               (uint32_t(b[3]) << 24);
    }
    uint64_t u64() {
        uint64_t v = 0;
        uint8_t b[8];
        check(get(b, 8), "truncated tensor file: " + path);
        for (int i = 0; i < 8; ++i) v |= uint64_t(b[i]) << (8 * i);
        return v;
    }
};

struct FileCloser {
    void operator()(FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

uint32_t f32_bits(float v) {
    uint32_t u;
    static_assert(sizeof(u) == sizeof(v));
    __builtin_memcpy(&u, &v, sizeof(u));
    return u;
}

float bits_f32(uint32_t u) {
    float v;
    __builtin_memcpy(&v, &u, sizeof(v));
    return v;
}

}  // namespace

void write_tensor(const std::string& path, const Tensor& t) {
    check(!t.dims.empty(), "tensor dims must be non-empty");
    uint64_t n = 1;
    for (uint64_t d : t.dims) {
        check(d > 0, "tensor dims must be positive");
        n *= d;
    }
    check(n == t.data.size(), "tensor dims do not match element count");
    for (float v : t.data) check(std::isfinite(v), "tensor holds a non-finite value");

    FilePtr f(std::fopen(path.c_str(), "wb"));
    check(f != nullptr, "cannot open for writing: " + path);
    Writer w{f.get()};
    w.put(kMagic, 4);
    w.u16(kVersion);
    w.u8(static_cast<uint8_t>(t.dtype));
    w.u8(0);
    w.u32(static_cast<uint32_t>(t.dims.size()));
    for (uint64_t d : t.dims) w.u64(d);
    if (t.dtype == DType::F32) {
        for (float v : t.data) w.u32(f32_bits(v));
    } else {
        for (float v : t.data) w.u16(fp16::encode(v));
    }
}

Tensor read_tensor(const std::string& path) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    check(f != nullptr, "cannot open: " + path);
    Reader r{f.get(), path};

    char magic[4];
    check(r.get(magic, 4), "truncated tensor file: " + path);
    check(std::memcmp(magic, kMagic, 4) == 0, "bad magic in tensor file: " + path);
    check(r.u16() == kVersion, "unsupported tensor file version: " + path);
    const uint8_t dtype_tag = r.u8();
    check(dtype_tag <= 1, "unknown dtype tag in tensor file: " + path);
    r.u8();  // pad
    const uint32_t ndim = r.u32();
    check(ndim >= 1, "tensor file has empty dims: " + path);
    check(ndim <= 8, "tensor file rank too large: " + path);

    Tensor t;
    t.dtype = static_cast<DType>(dtype_tag);
    uint64_t n = 1;
    for (uint32_t i = 0; i < ndim; ++i) {
        const uint64_t d = r.u64();
        check(d > 0, "tensor file has a zero dim: " + path);
        check(n <= UINT64_MAX / d, "tensor file dims overflow: " + path);
        n *= d;
        t.dims.push_back(d);
    }
    check(n <= (uint64_t(1) << 33), "tensor file too large: " + path);

    t.data.reserve(n);
    if (t.dtype == DType::F32) {
        for (uint64_t i = 0; i < n; ++i) t.data.push_back(bits_f32(r.u32()));
    } else {
        for (uint64_t i = 0; i < n; ++i) t.data.push_back(fp16::decode(r.u16()));
    }
    uint8_t extra;
    check(!r.get(&extra, 1), "trailing bytes in tensor file: " + path);
    for (float v : t.data) check(std::isfinite(v), "non-finite value in tensor file: " + path);
    return t;
}

}  // namespace potq
