#include <cstdio>
#include <filesystem>
#include <fstream>
#include <vector>

#include "doctest.h"
#include "potq/fp16.hpp"
#include "potq/synth.hpp"
#include "potq/tensor.hpp"

using namespace potq;

namespace {

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

std::vector<char> slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return std::vector<char>(std::istreambuf_iterator<char>(in),
                             std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("group iteration counts and shapes") {
    SUBCASE("4x2 with G=2 gives 4 groups of length 2") {
        const Tensor t = make_tensor({4, 2}, std::vector<float>(8, 1.0f));
        int count = 0;
        for_each_group(t, layout_for(t, 2), [&](uint32_t, uint32_t, std::span<const float> g) {
            CHECK(g.size() == 2);
            ++count;
        });
        CHECK(count == 4);
    }
    SUBCASE("5x1 with G=2 gives ragged lengths 2,2,1") {
        const Tensor t = make_tensor({5, 1}, std::vector<float>(5, 1.0f));
        std::vector<size_t> lens;
        for_each_group(t, layout_for(t, 2), [&](uint32_t, uint32_t, std::span<const float> g) {
            lens.push_back(g.size());
        });
        CHECK(lens == std::vector<size_t>{2, 2, 1});
    }
    SUBCASE("128x1 with G=128 is a single group") {
        const Tensor t = make_tensor({128, 1}, std::vector<float>(128, 1.0f));
        int count = 0;
        for_each_group(t, layout_for(t, 128),
                       [&](uint32_t, uint32_t, std::span<const float>) { ++count; });
        CHECK(count == 1);
    }
}

TEST_CASE("groups partition all indices exactly once") {
    Rng rng(77);
    for (int trial = 0; trial < 20; ++trial) {
        const uint32_t rows = 1 + uint32_t(rng.next() % 40);
        const uint32_t cols = 1 + uint32_t(rng.next() % 6);
        const uint32_t gsize = 1 + uint32_t(rng.next() % (rows + 2));
        std::vector<float> vals(size_t(rows) * cols);
        for (size_t i = 0; i < vals.size(); ++i) vals[i] = float(i);
        const Tensor t = make_tensor({rows, cols}, vals);
        const GroupLayout layout = layout_for(t, gsize);

        std::vector<int> seen(vals.size(), 0);
        for_each_group(t, layout, [&](uint32_t g, uint32_t j, std::span<const float> grp) {
            for (size_t k = 0; k < grp.size(); ++k) {
                const uint32_t i = layout.group_begin(g) + uint32_t(k);
                CHECK(grp[k] == t.at(i, j));
                seen[size_t(i) * cols + j]++;
            }
        });
        for (int s : seen) CHECK(s == 1);
        CHECK(layout.groups_per_col() == (rows + gsize - 1) / gsize);
    }
}

TEST_CASE("scale sharing follows the group of the row") {
    const GroupLayout layout{7, 3, 3};
    for (uint32_t i = 0; i < 7; ++i)
        for (uint32_t k = 0; k < 7; ++k) {
            const bool same = layout.group_of_row(i) == layout.group_of_row(k);
            CHECK(same == (i / 3 == k / 3));
        }
}

TEST_CASE("tensor file round-trips bit-exactly") {
    SUBCASE("f32") {
        const Tensor t = synth_matrix(13, 7, Dist::Gaussian, 5);
        const std::string path = temp_path("potq_t1.pten");
        write_tensor(path, t);
        const Tensor back = read_tensor(path);
        CHECK(back.dtype == DType::F32);
        CHECK(back.dims == t.dims);
        for (size_t i = 0; i < t.data.size(); ++i) CHECK(back.data[i] == t.data[i]);
        // write once more: byte-identical files
        const std::string path2 = temp_path("potq_t2.pten");
        write_tensor(path2, back);
        CHECK(slurp(path) == slurp(path2));
    }
    SUBCASE("f16 from random half patterns") {
        Rng rng(9);
        std::vector<float> vals;
        for (int i = 0; i < 64; ++i) {
            uint16_t bits;
            do {
                bits = uint16_t(rng.next());
            } while (fp16::exponent_field(bits) == 31);  // finite only
            vals.push_back(fp16::decode(bits));
        }
        const Tensor t = make_tensor({8, 8}, vals, DType::F16);
        const std::string path = temp_path("potq_t3.pten");
        write_tensor(path, t);
        const Tensor back = read_tensor(path);
        CHECK(back.dtype == DType::F16);
        for (size_t i = 0; i < vals.size(); ++i)
            CHECK(fp16::encode(back.data[i]) == fp16::encode(vals[i]));
        const std::string path2 = temp_path("potq_t4.pten");
        write_tensor(path2, back);
        CHECK(slurp(path) == slurp(path2));
    }
    SUBCASE("3-D dims survive") {
        const Tensor t = make_tensor({2, 3, 4}, std::vector<float>(24, 0.25f));
        const std::string path = temp_path("potq_t5.pten");
        write_tensor(path, t);
        CHECK(read_tensor(path).dims == std::vector<uint64_t>{2, 3, 4});
    }
}

TEST_CASE("tensor file error paths") {
    const std::string path = temp_path("potq_bad.pten");

    SUBCASE("bad magic") {
        std::ofstream out(path, std::ios::binary);
        out << "XTEN";
        out.write("\0\0\0\0\0\0\0\0", 8);
        out.close();
        CHECK_THROWS_WITH_AS(read_tensor(path), doctest::Contains("bad magic"),
                             std::runtime_error);
    }
    SUBCASE("truncated payload") {
        const Tensor t = make_tensor({4, 4}, std::vector<float>(16, 1.0f));
        write_tensor(path, t);
        auto bytes = slurp(path);
        std::ofstream out(path, std::ios::binary);
        out.write(bytes.data(), std::streamsize(bytes.size() - 7));
        out.close();
        CHECK_THROWS_WITH_AS(read_tensor(path), doctest::Contains("truncated"),
                             std::runtime_error);
    }
    SUBCASE("unknown dtype tag") {
        const Tensor t = make_tensor({2, 2}, std::vector<float>(4, 1.0f));
        write_tensor(path, t);
        auto bytes = slurp(path);
        bytes[6] = 9;  // dtype byte
        std::ofstream out(path, std::ios::binary);
        out.write(bytes.data(), std::streamsize(bytes.size()));
        out.close();
        CHECK_THROWS_WITH_AS(read_tensor(path), doctest::Contains("dtype"),
                             std::runtime_error);
    }
    SUBCASE("trailing bytes rejected") {
        const Tensor t = make_tensor({2, 2}, std::vector<float>(4, 1.0f));
        write_tensor(path, t);
        std::ofstream out(path, std::ios::binary | std::ios::app);
        out << "x";
        out.close();
        CHECK_THROWS_WITH_AS(read_tensor(path), doctest::Contains("trailing"),
                             std::runtime_error);
    }
    SUBCASE("empty dims rejected on construction") {
        CHECK_THROWS_AS(make_tensor({}, {}), std::runtime_error);
    }
    SUBCASE("zero dim rejected") {
        CHECK_THROWS_AS(make_tensor({0, 3}, {}), std::runtime_error);
    }
    SUBCASE("dims/element mismatch rejected") {
        CHECK_THROWS_AS(make_tensor({2, 2}, std::vector<float>(3, 0.f)),
                        std::runtime_error);
    }
    SUBCASE("non-finite values rejected on write") {
        Tensor t = make_tensor({1, 2}, {1.0f, 2.0f});
        t.data[1] = std::numeric_limits<float>::infinity();
        CHECK_THROWS_WITH_AS(write_tensor(path, t), doctest::Contains("non-finite"),
                             std::runtime_error);
    }
}
