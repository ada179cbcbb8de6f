#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "potq/bench.hpp"
#include "potq/calibrate.hpp"
#include "potq/check.hpp"
#include "potq/dequant.hpp"
#include "potq/quantize.hpp"
#include "potq/synth.hpp"
#include "potq/tensor.hpp"

namespace {

using namespace potq;

double bits_per_weight(int bits, uint32_t group_size) {
    return double(bits) + 16.0 / double(group_size);
}

// Linear-mode convenience: a B x T x d calibration tensor flattens to
// (B*T) x d.
Tensor flatten_to_2d(Tensor t) {
    if (t.dims.size() == 3) t.dims = {t.dims[0] * t.dims[1], t.dims[2]};
    return t;
}

std::vector<uint64_t> bstar_histogram(const std::vector<double>& b_star,
                                      const QuantConfig& cfg) {
    std::vector<uint64_t> bins(cfg.grid_count, 0);
    for (double b : b_star) {
        long idx = std::lround(b / cfg.grid_step) - 1;
        idx = std::clamp<long>(idx, 0, cfg.grid_count - 1);
        bins[size_t(idx)]++;
    }
    return bins;
}

void write_histogram_csv(const std::string& path, const std::vector<uint64_t>& bins,
                         double step) {
    std::ofstream out(path);
    check(out.good(), "cannot open for writing: " + path);
    out << "bin_lower,count\n";
    for (size_t i = 0; i < bins.size(); ++i)
        out << (step * double(i)) << "," << bins[i] << "\n";
    check(out.good(), "failed writing histogram CSV: " + path);
}

void print_loss_csv(FILE* f, const CalibResult& res) {
    std::fprintf(f, "epoch,loss,data_term,reg_term\n");
    for (const CalibEpochStat& e : res.epochs)
        std::fprintf(f, "%d,%.17g,%.17g,%.17g\n", e.epoch, e.loss, e.data_term, e.reg_term);
}

struct QuantizeArgs {
    std::string in, out, hist_csv;
    QuantConfig cfg;
    bool skip_step1 = false;
    int threads = 1;
};

int cmd_quantize(const QuantizeArgs& a) {
    const Tensor w = read_tensor(a.in);
    const Step1Result res = a.skip_step1 ? quantize_naive(w, a.cfg, a.threads)
                                         : quantize_step1(w, a.cfg, a.threads);
    write_potq(a.out, res.q);

    double q1_sum = 0.0;
    for (double q1 : res.q1) q1_sum += q1;
    std::printf("quantized %" PRIu32 "x%" PRIu32 " -> %s\n", w.rows(), w.cols(),
                a.out.c_str());
    std::printf("bits=%d group_size=%u groups=%llu bits_per_weight=%.4f\n", res.q.bits,
                res.q.layout.group_size,
                (unsigned long long)res.q.layout.scale_count(),
                bits_per_weight(res.q.bits, res.q.layout.group_size));
    std::printf("step1=%s mean_group_q1=%.6g\n", a.skip_step1 ? "skipped(b=1)" : "grid",
                q1_sum / double(res.q1.size()));
    if (!a.hist_csv.empty()) {
        write_histogram_csv(a.hist_csv, bstar_histogram(res.b_star, a.cfg), a.cfg.grid_step);
        std::printf("bstar_hist_csv=%s\n", a.hist_csv.c_str());
    }
    return 0;
}

struct CalibrateArgs {
    std::string model, weights, calib, out, loss_csv;
    std::string mode = "linear";
    std::string grad_mode = "detach";
    CalibConfig cfg;
    bool epochs_given = false;
};

int cmd_calibrate(CalibrateArgs a) {
    const QuantizedMatrix q = read_potq(a.model);
    const Tensor w = read_tensor(a.weights);
    const Tensor x = read_tensor(a.calib);
    if (!a.epochs_given) a.cfg.epochs = q.bits == 2 ? 40 : 10;
    check(a.grad_mode == "detach" || a.grad_mode == "literal",
          "unknown gradient mode: " + a.grad_mode);
    a.cfg.grad_mode =
        a.grad_mode == "detach" ? GradMode::DetachExponent : GradMode::LiteralSte;
    if (a.out.empty()) a.out = a.model;

    CalibResult res;
    if (a.mode == "linear") {
        res = calibrate_linear(w, q, flatten_to_2d(x), a.cfg);
    } else if (a.mode == "block") {
        res = calibrate_block(w, q, x, a.cfg);
    } else {
        check(false, "unknown calibration mode: " + a.mode);
    }
    write_potq(a.out, apply_calibration(q, res));

    std::printf("calibrated %s -> %s (mode=%s epochs=%d lr=%g wd=%g)\n", a.model.c_str(),
                a.out.c_str(), a.mode.c_str(), a.cfg.epochs, a.cfg.learning_rate,
                a.cfg.weight_decay);
    std::printf("initial_loss=%.17g final_loss=%.17g\n", res.initial_loss,
                res.epochs.empty() ? res.initial_loss : res.epochs.back().loss);
    print_loss_csv(stdout, res);
    if (!a.loss_csv.empty()) {
        std::ofstream out(a.loss_csv);
        check(out.good(), "cannot open for writing: " + a.loss_csv);
        out << "epoch,loss,data_term,reg_term\n";
        for (const CalibEpochStat& e : res.epochs) {
            char buf[160];
            std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g\n", e.epoch, e.loss,
                          e.data_term, e.reg_term);
            out << buf;
        }
        check(out.good(), "failed writing loss CSV: " + a.loss_csv);
    }
    return 0;
}

struct EvalArgs {
    std::string original, model, inputs, hist_csv;
    std::string mode = "linear";
    double grid_step = 0.01;
    int grid_count = 200;
    int threads = 1;
};

int cmd_eval(const EvalArgs& a) {
    const Tensor w = read_tensor(a.original);
    const QuantizedMatrix q = read_potq(a.model);
    check(w.is_2d() && w.rows() == q.layout.rows && w.cols() == q.layout.cols,
          "original tensor does not match the quantized layout");

    const Tensor deq = dequant_matrix(q, a.threads);
    double se = 0.0, max_abs = 0.0;
    for (size_t i = 0; i < w.data.size(); ++i) {
        const double d = double(w.data[i]) - double(deq.data[i]);
        se += d * d;
        max_abs = std::max(max_abs, std::fabs(d));
    }
    std::printf("weights %" PRIu32 "x%" PRIu32 " bits=%d group_size=%u bits_per_weight=%.4f\n",
                q.layout.rows, q.layout.cols, q.bits, q.layout.group_size,
                bits_per_weight(q.bits, q.layout.group_size));
    std::printf("weight_mse=%.17g\n", se / double(w.data.size()));
    std::printf("weight_max_abs_err=%.17g\n", max_abs);

    if (!a.inputs.empty()) {
        const Tensor x = a.mode == "linear" ? flatten_to_2d(read_tensor(a.inputs))
                                            : read_tensor(a.inputs);
        Tensor y0, y;
        if (a.mode == "linear") {
            y0 = linear_forward(w, x);
            y = linear_forward(deq, x);
        } else if (a.mode == "block") {
            const BlockWeights orig = split_block_weights(dmat_from(w));
            const BlockWeights quant = split_block_weights(dmat_from(deq));
            y0 = block_forward(orig, x);
            y = block_forward(quant, x);
        } else {
            check(false, "unknown eval mode: " + a.mode);
        }
        double ose = 0.0;
        for (size_t i = 0; i < y0.data.size(); ++i) {
            const double d = double(y0.data[i]) - double(y.data[i]);
            ose += d * d;
        }
        std::printf("output_mse=%.17g\n", ose / double(y0.data.size()));
    }

    if (!a.hist_csv.empty()) {
        QuantConfig cfg;
        cfg.bits = q.bits;
        cfg.group_size = q.layout.group_size;
        cfg.grid_step = a.grid_step;
        cfg.grid_count = a.grid_count;
        // b* is not stored in the model file; rerun the search on the
        // original weights to report the selection histogram.
        const Step1Result res = quantize_step1(w, cfg, a.threads);
        write_histogram_csv(a.hist_csv, bstar_histogram(res.b_star, cfg), cfg.grid_step);
        std::printf("bstar_hist_csv=%s\n", a.hist_csv.c_str());
    }
    return 0;
}

struct BenchArgs {
    BenchConfig cfg;
    std::string csv;
};

int cmd_bench(const BenchArgs& a) {
    const BenchResult r = run_dequant_bench(a.cfg);
    std::printf("correctness gate: %s\n", r.correctness_ok ? "ok (bit-exact)" : "FAILED");
    std::printf("%-8s %5s %7s %7s %8s %12s %14s\n", "path", "bits", "rows", "cols",
                "threads", "gbps", "elems/s");
    std::printf("%-8s %5d %7u %7u %8d %12.3f %14.3e\n", "pot", a.cfg.bits, a.cfg.rows,
                a.cfg.cols, a.cfg.threads, r.pot.gbps, r.pot.elems_per_sec);
    std::printf("%-8s %5d %7u %7u %8d %12.3f %14.3e\n", "uniform", a.cfg.bits, a.cfg.rows,
                a.cfg.cols, a.cfg.threads, r.uniform.gbps, r.uniform.elems_per_sec);
    std::printf("ratio(pot/uniform)=%.3f\n", r.ratio);
    if (!a.csv.empty()) {
        std::ofstream out(a.csv);
        check(out.good(), "cannot open for writing: " + a.csv);
        out << "path,bits,rows,cols,threads,gbps\n";
        char buf[160];
        std::snprintf(buf, sizeof buf, "pot,%d,%u,%u,%d,%.6f\n", a.cfg.bits, a.cfg.rows,
                      a.cfg.cols, a.cfg.threads, r.pot.gbps);
        out << buf;
        std::snprintf(buf, sizeof buf, "uniform,%d,%u,%u,%d,%.6f\n", a.cfg.bits,
                      a.cfg.rows, a.cfg.cols, a.cfg.threads, r.uniform.gbps);
        out << buf;
        check(out.good(), "failed writing bench CSV: " + a.csv);
    }
    return 0;
}

struct GenArgs {
    std::string out;
    uint32_t rows = 0, cols = 0;
    std::string dist = "gaussian";
    std::string dtype = "f32";
    uint64_t seed = 1;
    double scale = 1.0;
    double col_scale_sigma = 0.0;
};

int cmd_gen(const GenArgs& a) {
    check(a.dist == "gaussian" || a.dist == "laplace", "unknown distribution: " + a.dist);
    check(a.dtype == "f32" || a.dtype == "f16", "unknown dtype: " + a.dtype);
    Tensor t = synth_matrix(a.rows, a.cols,
                            a.dist == "gaussian" ? Dist::Gaussian : Dist::Laplace, a.seed,
                            a.scale, a.col_scale_sigma);
    if (a.dtype == "f16") t = to_f16(t);
    write_tensor(a.out, t);
    std::printf("wrote %ux%u %s %s tensor to %s (seed=%llu)\n", a.rows, a.cols,
                a.dist.c_str(), a.dtype.c_str(), a.out.c_str(),
                (unsigned long long)a.seed);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"signed power-of-two weight quantization toolkit"};
    app.require_subcommand(1);

    QuantizeArgs qa;
    CLI::App* quantize = app.add_subcommand(
        "quantize", "grid-search group scales and write a quantized model");
    quantize->add_option("input", qa.in, "input .pten weight tensor (2-D)")->required();
    quantize->add_option("output", qa.out, "output .potq file")->required();
    quantize->add_option("--bits", qa.cfg.bits, "bit-width (2..4)");
    quantize->add_option("--group-size", qa.cfg.group_size, "rows per scale group");
    quantize->add_option("--grid-step", qa.cfg.grid_step, "scale grid step");
    quantize->add_option("--grid-count", qa.cfg.grid_count, "scale grid candidate count");
    quantize->add_flag("--skip-step1", qa.skip_step1, "skip the search, use b=1 (s0)");
    quantize->add_option("--threads", qa.threads, "worker threads");
    quantize->add_option("--hist-csv", qa.hist_csv, "write the selected-b* histogram CSV");

    CalibrateArgs ca;
    CLI::App* calibrate = app.add_subcommand(
        "calibrate", "fine-tune group scales on calibration data");
    calibrate->add_option("model", ca.model, "quantized .potq model")->required();
    calibrate->add_option("weights", ca.weights, "original .pten weights")->required();
    calibrate->add_option("calib", ca.calib, "calibration .pten tensor")->required();
    calibrate->add_option("--out", ca.out, "output .potq (default: overwrite model)");
    calibrate->add_option("--epochs", ca.cfg.epochs, "epochs (default 10, 40 for 2-bit)")
        ->trigger_on_parse()
        ->each([&ca](const std::string&) { ca.epochs_given = true; });
    calibrate->add_option("--lr", ca.cfg.learning_rate, "learning rate");
    calibrate->add_option("--weight-decay", ca.cfg.weight_decay, "gamma l2 weight");
    calibrate->add_option("--batch-rows", ca.cfg.batch_rows,
                          "calibration rows per step (0 = full batch)");
    calibrate->add_option("--mode", ca.mode, "linear|block");
    calibrate->add_option("--grad-mode", ca.grad_mode, "detach|literal");
    calibrate->add_option("--loss-csv", ca.loss_csv, "also write the loss log CSV here");

    EvalArgs ea;
    CLI::App* eval = app.add_subcommand("eval", "report reconstruction quality");
    eval->add_option("original", ea.original, "original .pten weights")->required();
    eval->add_option("model", ea.model, "quantized .potq model")->required();
    eval->add_option("inputs", ea.inputs, "optional .pten inputs for output MSE");
    eval->add_option("--mode", ea.mode, "linear|block");
    eval->add_option("--grid-step", ea.grid_step, "grid step for the b* histogram");
    eval->add_option("--grid-count", ea.grid_count, "grid size for the b* histogram");
    eval->add_option("--hist-csv", ea.hist_csv, "write the selected-b* histogram CSV");
    eval->add_option("--threads", ea.threads, "worker threads");

    BenchArgs ba;
    CLI::App* bench = app.add_subcommand(
        "bench", "time integer-path vs float-path dequantization");
    bench->add_option("--rows", ba.cfg.rows, "matrix rows");
    bench->add_option("--cols", ba.cfg.cols, "matrix cols");
    bench->add_option("--bits", ba.cfg.bits, "bit-width (2..4)");
    bench->add_option("--group-size", ba.cfg.group_size, "rows per scale group");
    bench->add_option("--threads", ba.cfg.threads, "worker threads");
    bench->add_option("--runs", ba.cfg.runs, "timed runs (median reported)");
    bench->add_option("--seed", ba.cfg.seed, "instance seed");
    bench->add_option("--csv", ba.csv, "write results CSV");

    GenArgs ga;
    CLI::App* gen = app.add_subcommand("gen", "generate a synthetic weight tensor");
    gen->add_option("output", ga.out, "output .pten file")->required();
    gen->add_option("--rows", ga.rows, "rows")->required();
    gen->add_option("--cols", ga.cols, "cols")->required();
    gen->add_option("--dist", ga.dist, "gaussian|laplace");
    gen->add_option("--dtype", ga.dtype, "f32|f16");
    gen->add_option("--seed", ga.seed, "RNG seed");
    gen->add_option("--scale", ga.scale, "value scale");
    gen->add_option("--col-scale-sigma", ga.col_scale_sigma,
                    "log-normal per-column scale sigma (activation-like)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        app.exit(e);
        return 1;
    }

    try {
        if (*quantize) return cmd_quantize(qa);
        if (*calibrate) return cmd_calibrate(ca);
        if (*eval) return cmd_eval(ea);
        if (*bench) return cmd_bench(ba);
        if (*gen) return cmd_gen(ga);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 1;
}
