#include <unistd.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "potq/dequant.hpp"
#include "potq/quantize.hpp"
#include "potq/synth.hpp"
#include "potq/tensor.hpp"

namespace fs = std::filesystem;
using namespace potq;

namespace {

struct RunResult {
    int exit_code = -1;
    std::string out;
};

const std::string& work_dir() {
    static const std::string dir = [] {
        const std::string d =
            (fs::temp_directory_path() / ("potq_cli_" + std::to_string(getpid())))
                .string();
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

std::string wpath(const std::string& name) { return work_dir() + "/" + name; }

RunResult run_cli(const std::string& args) {
    const std::string out_file = wpath("cmd_output.txt");
    const std::string cmd =
        std::string(POTQ_CLI_PATH) + " " + args + " > " + out_file + " 2>&1";
    const int status = std::system(cmd.c_str());
    RunResult r;
    r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    std::ifstream in(out_file);
    std::stringstream ss;
    ss << in.rdbuf();
    r.out = ss.str();
    return r;
}

std::vector<char> slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return std::vector<char>(std::istreambuf_iterator<char>(in),
                             std::istreambuf_iterator<char>());
}

// first "key=value" number in the output
double parse_metric(const std::string& out, const std::string& key) {
    const size_t pos = out.find(key + "=");
    REQUIRE(pos != std::string::npos);
    return std::strtod(out.c_str() + pos + key.size() + 1, nullptr);
}

size_t count_lines(const std::string& path) {
    std::ifstream in(path);
    REQUIRE(in.good());
    size_t n = 0;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) ++n;
    return n;
}

}  // namespace

TEST_CASE("gen writes deterministic tensors") {
    const std::string a = wpath("gen_a.pten");
    const std::string b = wpath("gen_b.pten");
    CHECK(run_cli("gen " + a + " --rows 16 --cols 8 --seed 42").exit_code == 0);
    CHECK(run_cli("gen " + b + " --rows 16 --cols 8 --seed 42").exit_code == 0);
    CHECK(slurp(a) == slurp(b));
    const Tensor t = read_tensor(a);
    CHECK(t.dims == std::vector<uint64_t>{16, 8});

    const std::string c = wpath("gen_c.pten");
    CHECK(run_cli("gen " + c + " --rows 4 --cols 4 --dist laplace --dtype f16").exit_code ==
          0);
    CHECK(read_tensor(c).dtype == DType::F16);

    CHECK(run_cli("gen " + c + " --rows 4 --cols 4 --dist cauchy").exit_code == 2);
}

TEST_CASE("quantize then eval round-trips through files") {
    const std::string w = wpath("w.pten");
    const std::string model = wpath("w.potq");
    const std::string hist = wpath("hist.csv");
    CHECK(run_cli("gen " + w + " --rows 256 --cols 8 --seed 7").exit_code == 0);

    const RunResult q = run_cli("quantize " + w + " " + model +
                                " --bits 3 --group-size 128 --hist-csv " + hist);
    CHECK(q.exit_code == 0);
    CHECK(q.out.find("bits_per_weight=3.125") != std::string::npos);

    const QuantizedMatrix m = read_potq(model);
    CHECK(m.bits == 3);
    CHECK(m.layout.rows == 256);

    // histogram: one line per bin plus header; counts sum to group count
    std::ifstream hin(hist);
    std::string line;
    std::getline(hin, line);
    CHECK(line == "bin_lower,count");
    uint64_t total = 0;
    size_t bins = 0;
    while (std::getline(hin, line)) {
        const size_t comma = line.find(',');
        REQUIRE(comma != std::string::npos);
        total += std::strtoull(line.c_str() + comma + 1, nullptr, 10);
        ++bins;
    }
    CHECK(bins == 200);
    CHECK(total == m.layout.scale_count());

    const RunResult e = run_cli("eval " + w + " " + model);
    CHECK(e.exit_code == 0);
    CHECK(parse_metric(e.out, "weight_mse") > 0.0);
    CHECK(parse_metric(e.out, "weight_max_abs_err") > 0.0);
}

TEST_CASE("exactly representable weights evaluate to zero error") {
    const std::string w = wpath("const.pten");
    const std::string model = wpath("const.potq");
    write_tensor(w, make_tensor({8, 2}, std::vector<float>(16, 1.0f)));
    CHECK(run_cli("quantize " + w + " " + model + " --group-size 4").exit_code == 0);
    const RunResult e = run_cli("eval " + w + " " + model);
    CHECK(e.exit_code == 0);
    CHECK(parse_metric(e.out, "weight_mse") == 0.0);
    CHECK(parse_metric(e.out, "weight_max_abs_err") == 0.0);
}

TEST_CASE("usage and data errors use distinct exit codes") {
    CHECK(run_cli("quantize only_one_arg.pten").exit_code == 1);   // missing positional
    CHECK(run_cli("nonsense-subcommand").exit_code == 1);
    const std::string w = wpath("w5.pten");
    write_tensor(w, make_tensor({4, 2}, std::vector<float>(8, 1.0f)));
    const RunResult r = run_cli("quantize " + w + " " + wpath("w5.potq") + " --bits 5");
    CHECK(r.exit_code == 2);
    CHECK(r.out.find("bit-width") != std::string::npos);
    CHECK(run_cli("quantize " + wpath("missing.pten") + " " + wpath("x.potq")).exit_code ==
          2);
    CHECK(run_cli("eval " + w + " " + wpath("missing.potq")).exit_code == 2);
}

TEST_CASE("calibrate updates scales and logs one CSV row per epoch") {
    const std::string w = wpath("cal_w.pten");
    const std::string x = wpath("cal_x.pten");
    const std::string model = wpath("cal.potq");
    const std::string out = wpath("cal_out.potq");
    const std::string loss = wpath("loss.csv");
    CHECK(run_cli("gen " + w + " --rows 32 --cols 8 --seed 3").exit_code == 0);
    CHECK(run_cli("gen " + x + " --rows 64 --cols 32 --seed 4 --col-scale-sigma 1.0")
              .exit_code == 0);
    CHECK(run_cli("quantize " + w + " " + model + " --bits 2 --group-size 8").exit_code ==
          0);

    SUBCASE("zero epochs is a byte-identical no-op") {
        const RunResult r = run_cli("calibrate " + model + " " + w + " " + x +
                                    " --epochs 0 --out " + out);
        CHECK(r.exit_code == 0);
        CHECK(slurp(model) == slurp(out));
    }
    SUBCASE("a short run writes the loss log and a valid model") {
        const RunResult r = run_cli("calibrate " + model + " " + w + " " + x +
                                    " --epochs 3 --out " + out + " --loss-csv " + loss);
        CHECK(r.exit_code == 0);
        CHECK(count_lines(loss) == 4);  // header + 3 epochs
        CHECK(r.out.find("epoch,loss,data_term,reg_term") != std::string::npos);
        read_potq(out);  // parses and validates
    }
    SUBCASE("literal gradient mode is accepted") {
        CHECK(run_cli("calibrate " + model + " " + w + " " + x +
                      " --epochs 1 --grad-mode literal --out " + out)
                  .exit_code == 0);
    }
    SUBCASE("unknown mode is a data error") {
        CHECK(run_cli("calibrate " + model + " " + w + " " + x + " --mode banana")
                  .exit_code == 2);
    }
    SUBCASE("epoch default follows the bit-width (40 at 2-bit)") {
        const RunResult r =
            run_cli("calibrate " + model + " " + w + " " + x + " --out " + out +
                    " --loss-csv " + loss);
        CHECK(r.exit_code == 0);
        CHECK(count_lines(loss) == 41);  // header + 40 epochs
    }
    SUBCASE("3-D calibration tensors flatten to (B*T) x d in linear mode") {
        const std::string x3 = wpath("cal_x3.pten");
        const Tensor flat = read_tensor(x);
        write_tensor(x3, make_tensor({2, 32, 32}, flat.data));
        const RunResult r3 = run_cli("calibrate " + model + " " + w + " " + x3 +
                                     " --epochs 2 --out " + out);
        const RunResult r2 = run_cli("calibrate " + model + " " + w + " " + x +
                                     " --epochs 2 --out " + out + ".flat");
        CHECK(r3.exit_code == 0);
        CHECK(r2.exit_code == 0);
        CHECK(slurp(out) == slurp(out + ".flat"));
    }
}

TEST_CASE("step-1 initialization beats the skipped arm by a wide margin") {
    const std::string w = wpath("arm_w.pten");
    const std::string m1 = wpath("arm1.potq");
    const std::string m0 = wpath("arm0.potq");
    CHECK(run_cli("gen " + w + " --rows 64 --cols 16 --seed 9").exit_code == 0);
    CHECK(run_cli("quantize " + w + " " + m1 + " --bits 2 --group-size 16").exit_code == 0);
    CHECK(run_cli("quantize " + w + " " + m0 + " --bits 2 --group-size 16 --skip-step1")
              .exit_code == 0);
    const double mse1 = parse_metric(run_cli("eval " + w + " " + m1).out, "weight_mse");
    const double mse0 = parse_metric(run_cli("eval " + w + " " + m0).out, "weight_mse");
    CHECK(mse0 / mse1 > 5.0);  // measured ~30x on Gaussian weights
}

TEST_CASE("block-mode calibration over a stacked transformer block") {
    const uint32_t d = 8;
    const std::string w = wpath("blk_w.pten");
    const std::string x = wpath("blk_x.pten");
    const std::string model = wpath("blk.potq");
    const std::string out = wpath("blk_out.potq");
    write_tensor(w, synth_matrix(5 * d, d, Dist::Gaussian, 5, 0.5));
    const Tensor flat = synth_matrix(2 * 4 * d, 1, Dist::Gaussian, 6);
    write_tensor(x, make_tensor({2, 4, d}, flat.data));

    CHECK(run_cli("quantize " + w + " " + model + " --bits 2 --group-size 4").exit_code ==
          0);
    const RunResult cal = run_cli("calibrate " + model + " " + w + " " + x +
                                  " --mode block --epochs 2 --out " + out);
    CHECK(cal.exit_code == 0);
    const RunResult ev = run_cli("eval " + w + " " + out + " " + x + " --mode block");
    CHECK(ev.exit_code == 0);
    CHECK(parse_metric(ev.out, "output_mse") >= 0.0);

    // group size that straddles the block boundary is rejected
    const std::string bad = wpath("blk_bad.potq");
    CHECK(run_cli("quantize " + w + " " + bad + " --bits 2 --group-size 16").exit_code ==
          0);
    CHECK(run_cli("calibrate " + bad + " " + w + " " + x + " --mode block --epochs 1")
              .exit_code == 2);
}

TEST_CASE("bench reports both paths after the correctness gate") {
    const std::string csv = wpath("bench.csv");
    const RunResult r =
        run_cli("bench --rows 64 --cols 64 --runs 3 --threads 2 --csv " + csv);
    CHECK(r.exit_code == 0);
    CHECK(r.out.find("correctness gate: ok") != std::string::npos);
    CHECK(r.out.find("pot") != std::string::npos);
    CHECK(r.out.find("uniform") != std::string::npos);
    CHECK(r.out.find("ratio(pot/uniform)=") != std::string::npos);
    CHECK(count_lines(csv) == 3);  // header + 2 paths
}

TEST_CASE("eval can rebuild the multiplier histogram from the original weights") {
    const std::string w = wpath("h_w.pten");
    const std::string model = wpath("h.potq");
    const std::string hist = wpath("h_hist.csv");
    CHECK(run_cli("gen " + w + " --rows 64 --cols 4 --seed 21").exit_code == 0);
    CHECK(run_cli("quantize " + w + " " + model + " --group-size 32").exit_code == 0);
    const RunResult r = run_cli("eval " + w + " " + model + " --hist-csv " + hist);
    CHECK(r.exit_code == 0);
    uint64_t total = 0;
    std::ifstream in(hist);
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
        const size_t comma = line.find(',');
        if (comma != std::string::npos)
            total += std::strtoull(line.c_str() + comma + 1, nullptr, 10);
    }
    CHECK(total == read_potq(model).layout.scale_count());
}
