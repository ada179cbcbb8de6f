#pragma once

#include <cstdint>

#include "potq/dequant.hpp"

namespace potq {

struct BenchConfig {
    uint32_t rows = 4096;
    uint32_t cols = 4096;
    int bits = 3;
    uint32_t group_size = 128;
    int threads = 1;
    int runs = 5;
    uint64_t seed = 1;
};

struct BenchPathResult {
    double seconds = 0.0;       // median over runs
    double gbps = 0.0;          // produced FP16 output bytes per second
    double elems_per_sec = 0.0;
};

struct BenchResult {
    BenchPathResult pot;      // integer-addition path
    BenchPathResult uniform;  // float multiply-add path
    double ratio = 0.0;       // pot throughput / uniform throughput
    bool correctness_ok = false;
};

// Random valid instance, a bit-exactness gate against the reference
// decode/encode path, then timed dequantization of both pipelines.
BenchResult run_dequant_bench(const BenchConfig& cfg);

}  // namespace potq
