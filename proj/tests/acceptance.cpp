// Acceptance suite: runs every gate criterion end to end and prints one
// PASS/FAIL line per criterion. Exits nonzero if any criterion fails.
//
//  1  gradient correctness (every op + three composite paths, < 60 s)
//  2  FastICA source recovery (Amari index over 20 seeded mixtures)
//  3  bandpass filter contract (stopband attenuation, zero phase)
//  4  label mapping vs the exhaustive case-table oracle
//  5  MIL selection precision after full training
//  6  end-to-end fusion ordering on the synthetic benchmark (< 30 min)
//  7  FT/MIL/CA ablation ordering
//  8  cosine schedule exactness
//  9  training determinism
// 10  fusion sequence-length contract + query sweep

#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "emofuse/eeg.hpp"
#include "emofuse/train.hpp"

using namespace emofuse;
using namespace emofuse::harness;
using Clock = std::chrono::steady_clock;

namespace {

double secs_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Criterion {
    int id;
    bool pass;
    std::string detail;
};

std::vector<Criterion> g_results;

void record(int id, bool pass, const std::string& detail) {
    g_results.push_back({id, pass, detail});
    std::fprintf(stderr, "[criterion %2d] %s  %s\n", id, pass ? "pass" : "FAIL",
                 detail.c_str());
    std::fflush(stderr);
}

std::string fmt(const char* format, ...) {
    char buf[512];
    va_list args;
    va_start(args, format);
    std::vsnprintf(buf, sizeof buf, format, args);
    va_end(args);
    return buf;
}

// --------------------------------------------------------------------------
// 1: gradients
// --------------------------------------------------------------------------

void criterion_gradients() {
    const auto t0 = Clock::now();
    auto rows = gradcheck_battery(5);
    const double elapsed = secs_since(t0);
    bool ok = elapsed < 60.0;
    double worst = 0;
    std::string worst_name;
    for (const auto& r : rows) {
        ok = ok && r.ok;
        if (r.max_rel_err > worst) {
            worst = r.max_rel_err;
            worst_name = r.name;
        }
    }
    record(1, ok, fmt("max rel err %.2e (%s), %zu checks in %.1fs", worst, worst_name.c_str(),
                      rows.size(), elapsed));
}

// --------------------------------------------------------------------------
// 2: FastICA recovery
// --------------------------------------------------------------------------

double amari_index(const Eigen::MatrixXd& p) {
    const int n = static_cast<int>(p.rows());
    const Eigen::MatrixXd a = p.cwiseAbs();
    double total = 0.0;
    for (int i = 0; i < n; ++i) total += a.row(i).sum() / a.row(i).maxCoeff() - 1.0;
    for (int j = 0; j < n; ++j) total += a.col(j).sum() / a.col(j).maxCoeff() - 1.0;
    return total / (2.0 * n * (n - 1));
}

void criterion_fastica() {
    const long n = 4000;
    const double fs = 128.0;
    int good = 0;
    double slowest = 0;
    double worst_amari = 0;
    for (int seed = 0; seed < 20; ++seed) {
        std::mt19937_64 rng(seed * 101 + 7);
        Eigen::MatrixXd s(4, n);
        std::uniform_real_distribution<double> uni(-1.0, 1.0);
        for (long i = 0; i < n; ++i) {
            const double t = static_cast<double>(i) / fs;
            s(0, i) = std::sin(2.0 * M_PI * 3.1 * t);
            s(1, i) = 2.0 * (t * 2.7 - std::floor(t * 2.7)) - 1.0;
            s(2, i) = uni(rng);
            s(3, i) = std::sin(2.0 * M_PI * 1.3 * t) >= 0 ? 1.0 : -1.0;
        }
        std::normal_distribution<double> gauss(0.0, 1.0);
        Eigen::MatrixXd a_true(4, 4);
        do {
            for (int i = 0; i < 4; ++i)
                for (int j = 0; j < 4; ++j) a_true(i, j) = gauss(rng);
        } while (std::abs(a_true.determinant()) < 0.5);

        eeg::RawRecording rec;
        rec.data = a_true * s;
        rec.fs = fs;
        const auto t0 = Clock::now();
        auto dec = eeg::fastica(rec, 4, 1e-6, 400, static_cast<std::uint64_t>(seed));
        const double elapsed = secs_since(t0);
        slowest = std::max(slowest, elapsed);
        const double amari = amari_index(dec.unmixing * a_true);
        worst_amari = std::max(worst_amari, amari);
        if (amari < 0.05 && elapsed < 5.0) ++good;
    }
    record(2, good >= 18,
           fmt("%d/20 runs with Amari < 0.05 (worst %.3f), slowest %.2fs", good, worst_amari,
               slowest));
}

// --------------------------------------------------------------------------
// 3: filter contract
// --------------------------------------------------------------------------

double tone_gain(double freq, double fs, long n) {
    eeg::RawRecording rec;
    rec.fs = fs;
    rec.data.resize(1, n);
    for (long i = 0; i < n; ++i) rec.data(0, i) = std::sin(2.0 * M_PI * freq * i / fs);
    auto out = eeg::bandpass(rec, 1.0, 50.0);
    return out.data.row(0).segment(n / 4, n / 2).cwiseAbs().maxCoeff();
}

void criterion_filter() {
    const double fs = 128.0;
    const double g10 = tone_gain(10.0, fs, 8192);
    const double att_low = 20.0 * std::log10(tone_gain(0.2, fs, 32768) / g10);
    const double att_high = 20.0 * std::log10(tone_gain(60.0, fs, 8192) / g10);

    // symmetric pulse through the zero-phase filter
    const long n = 4095;
    const long center = (n - 1) / 2;
    eeg::RawRecording pulse;
    pulse.fs = fs;
    pulse.data.resize(1, n);
    for (long i = 0; i < n; ++i) {
        const double u = static_cast<double>(i - center) / 12.0;
        pulse.data(0, i) = std::exp(-0.5 * u * u);
    }
    auto out = eeg::bandpass(pulse, 1.0, 50.0);
    double asym = 0.0;
    for (long k = 1; k <= center; ++k)
        asym = std::max(asym, std::abs(out.data(0, center + k) - out.data(0, center - k)));

    const bool ok = att_low <= -20.0 && att_high <= -20.0 && asym < 1e-6;
    record(3, ok, fmt("attenuation %.1f dB @0.2Hz, %.1f dB @60Hz, pulse asymmetry %.1e",
                      att_low, att_high, asym));
}

// --------------------------------------------------------------------------
// 4: label mapping oracle
// --------------------------------------------------------------------------

void criterion_labels() {
    int mismatches = 0;
    int checked = 0;
    auto quadrant = [](double a, double v) {
        if (a >= 5.0 && v >= 5.0) return 0;
        if (a >= 5.0 && v < 5.0) return 1;
        if (a < 5.0 && v >= 5.0) return 2;
        return 3;
    };
    for (double a = 1.0; a <= 9.0; a += 0.5)
        for (double v = 1.0; v <= 9.0; v += 0.5) {
            ++checked;
            if (fusion::map_label(a, v, fusion::LabelScheme::Deap4) != quadrant(a, v))
                ++mismatches;
        }
    auto three = [](int s) { return s <= 3 ? 0 : (s <= 6 ? 1 : 2); };
    for (int s = 1; s <= 9; ++s) {
        checked += 4;
        if (fusion::map_label(s, 5, fusion::LabelScheme::Deap3Arousal) != three(s)) ++mismatches;
        if (fusion::map_label(5, s, fusion::LabelScheme::Deap3Valence) != three(s)) ++mismatches;
        if (fusion::map_label(s, 5, fusion::LabelScheme::Deap2Arousal) != (s >= 5 ? 1 : 0))
            ++mismatches;
        if (fusion::map_label(5, s, fusion::LabelScheme::Deap2Valence) != (s >= 5 ? 1 : 0))
            ++mismatches;
    }
    record(4, mismatches == 0, fmt("%d mismatches over %d grid points", mismatches, checked));
}

// --------------------------------------------------------------------------
// 8: cosine schedule
// --------------------------------------------------------------------------

void criterion_schedule() {
    const double lr_max = 1e-3, lr_min = 1e-5;
    const double e0 = std::abs(cosine_lr(0, 100, lr_max, lr_min) - lr_max);
    const double eT = std::abs(cosine_lr(100, 100, lr_max, lr_min) - lr_min);
    const double em = std::abs(cosine_lr(50, 100, lr_max, lr_min) - (lr_max + lr_min) / 2.0);
    bool monotone = true;
    double prev = cosine_lr(0, 100, lr_max, lr_min);
    for (int t = 1; t <= 100; ++t) {
        const double lr = cosine_lr(t, 100, lr_max, lr_min);
        monotone = monotone && lr <= prev;
        prev = lr;
    }
    const bool ok = e0 < 1e-12 && eT < 1e-12 && em < 1e-12 && monotone;
    record(8, ok, fmt("endpoint errors %.1e/%.1e, midpoint %.1e, monotone %s", e0, eT, em,
                      monotone ? "yes" : "no"));
}

// --------------------------------------------------------------------------
// 6 (+5): end-to-end benchmark
// --------------------------------------------------------------------------

Dataset benchmark_dataset(int n_trials, std::uint64_t seed) {
    GenSpec spec;
    spec.n_trials = n_trials;
    Dataset ds = gen_dataset(spec, seed);
    // preprocessing pipeline: bandpass, then ICA on the dominant subspace
    auto rec = to_recording(ds);
    rec = eeg::bandpass(rec, 1.0, 50.0);
    auto dec = eeg::fastica(rec, 8, 1e-4, 500, 99);
    rec = eeg::remove_components(rec, dec, eeg::identify_artifacts(dec));
    apply_cleaned_recording(ds, rec);
    return ds;
}

void criterion_benchmark(const Dataset& ds) {
    const auto t0 = Clock::now();
    RunConfig base = RunConfig::desk_benchmark();

    double acc_transformer = 0, acc_concat = 0, acc_eeg = 0, acc_face = 0, mil_precision = -1;
    for (auto mode : {FusionMode::Transformer, FusionMode::Concat, FusionMode::EegOnly,
                      FusionMode::FaceOnly}) {
        RunConfig cfg = base;
        cfg.fusion_mode = mode;
        auto result = train(cfg, ds);
        const double acc = result.report.accuracy;
        switch (mode) {
            case FusionMode::Transformer:
                acc_transformer = acc;
                mil_precision = result.report.mil_precision;
                break;
            case FusionMode::Concat: acc_concat = acc; break;
            case FusionMode::EegOnly: acc_eeg = acc; break;
            case FusionMode::FaceOnly: acc_face = acc; break;
        }
        std::fprintf(stderr, "    %-12s accuracy %.4f (%.1f min elapsed)\n",
                     fusion_mode_name(mode).c_str(), acc, secs_since(t0) / 60.0);
    }
    const double elapsed = secs_since(t0);
    const double unimodal = std::max(acc_eeg, acc_face);
    const bool ok = acc_transformer >= 0.90 && acc_transformer > acc_concat &&
                    acc_concat > unimodal && elapsed < 30.0 * 60.0;
    record(6, ok,
           fmt("transformer %.3f > concat %.3f > max(eeg %.3f, face %.3f); %.1f min",
               acc_transformer, acc_concat, acc_eeg, acc_face, elapsed / 60.0));
    record(5, mil_precision >= 0.80,
           fmt("selection precision@%d = %.3f (chance 0.30)", base.k_select, mil_precision));
}

// --------------------------------------------------------------------------
// 7: ablation ordering
// --------------------------------------------------------------------------

void criterion_ablation(const Dataset& ds) {
    RunConfig base = RunConfig::desk_benchmark();
    base.epochs = 40;
    base.ft_epochs = 6;
    auto rows = ablate(base, ds);

    auto acc_of = [&rows](const std::string& name) {
        for (const auto& r : rows)
            if (r.name == name && !r.failed) return r.accuracy;
        return -1.0;
    };
    const double full = acc_of("ft+mil+ca");
    const double ft_mil = acc_of("ft+mil");
    const double ft_ca = acc_of("ft+ca");
    const double mil_ca = acc_of("mil+ca");
    const double mil_only = acc_of("mil");
    const double ca_only = acc_of("ca");
    bool all_present = true;
    for (double v : {full, ft_mil, ft_ca, mil_ca, mil_only, ca_only})
        all_present = all_present && v >= 0.0;

    const bool ok = all_present && rows.size() == 12 && full >= ft_mil && full >= ft_ca &&
                    full >= mil_ca && mil_ca >= mil_only && mil_ca >= ca_only;
    record(7, ok,
           fmt("full %.3f vs ft+mil %.3f / ft+ca %.3f / mil+ca %.3f; mil+ca vs mil %.3f, ca %.3f",
               full, ft_mil, ft_ca, mil_ca, mil_only, ca_only));
}

// --------------------------------------------------------------------------
// 9: determinism
// --------------------------------------------------------------------------

void criterion_determinism(const Dataset& ds) {
    RunConfig cfg = RunConfig::desk_benchmark();
    cfg.epochs = 5;
    cfg.ft_epochs = 2;

    auto r1 = train(cfg, ds);
    auto r2 = train(cfg, ds);
    double max_diff = 0;
    for (size_t e = 0; e < r1.report.epochs.size(); ++e)
        max_diff = std::max(max_diff, std::abs(r1.report.epochs[e].train_loss -
                                               r2.report.epochs[e].train_loss));
    const bool same_confusion = r1.report.confusion == r2.report.confusion;
    record(9, max_diff < 1e-10 && same_confusion,
           fmt("max per-epoch loss diff %.2e, confusion %s", max_diff,
               same_confusion ? "identical" : "DIFFERS"));
}

// --------------------------------------------------------------------------
// 10: shape contract + sweep
// --------------------------------------------------------------------------

void criterion_shapes(const Dataset& ds) {
    bool shapes_ok = true;
    for (int k : {1, 3, 5, 10}) {
        for (int n : {16, 64, 147}) {
            RunConfig cfg = RunConfig::desk_benchmark();
            cfg.k_select = k;
            cfg.n_queries = n;
            Model model = Model::init(cfg);
            diff::Tensor seq = fusion::assemble(
                fusion::tokenize_eeg(ds.trials[0].eeg, model.eeg_tok),
                xattn::compress(
                    diff::Tensor::zeros({k * cfg.encoder.out_tokens(), cfg.encoder.out_dim()}),
                    model.bank, model.comp),
                model.fus);
            shapes_ok = shapes_ok && seq.rows() == 1 + cfg.eeg_channels + n;
        }
    }

    RunConfig sweep_cfg = RunConfig::desk_benchmark();
    sweep_cfg.epochs = 6;
    sweep_cfg.ft_epochs = 2;
    auto rows = sweep_output_size(sweep_cfg, ds);
    bool sweep_ok = rows.size() == 7;
    for (const auto& r : rows)
        sweep_ok = sweep_ok && !r.failed && std::isfinite(r.accuracy) && std::isfinite(r.macro_f1);

    record(10, shapes_ok && sweep_ok,
           fmt("sequence length 1+32+N for all K,N: %s; sweep rows ok: %s",
               shapes_ok ? "yes" : "no", sweep_ok ? "7/7" : "incomplete"));
}

}  // namespace

int main() {
    const auto t0 = Clock::now();
    std::fprintf(stderr, "running acceptance suite (single-threaded)\n");

    criterion_gradients();
    criterion_fastica();
    criterion_filter();
    criterion_labels();
    criterion_schedule();

    std::fprintf(stderr, "generating benchmark dataset (400 trials) + preprocessing\n");
    Dataset benchmark = benchmark_dataset(400, 2026);
    criterion_benchmark(benchmark);  // records 6 then 5
    criterion_ablation(benchmark);

    std::fprintf(stderr, "small dataset for determinism and sweep checks\n");
    Dataset small = benchmark;
    small.trials.resize(160);
    small.spec.n_trials = 160;
    criterion_determinism(small);
    criterion_shapes(small);

    std::sort(g_results.begin(), g_results.end(),
              [](const Criterion& a, const Criterion& b) { return a.id < b.id; });
    bool all_pass = true;
    std::printf("\n");
    for (const auto& c : g_results) {
        std::printf("criterion %2d: %s  (%s)\n", c.id, c.pass ? "PASS" : "FAIL",
                    c.detail.c_str());
        all_pass = all_pass && c.pass;
    }
    std::printf("acceptance: %s in %.1f min\n", all_pass ? "PASS" : "FAIL",
                secs_since(t0) / 60.0);
    return all_pass ? 0 : 1;
}
