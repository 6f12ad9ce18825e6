// Command-line front end: synthetic data generation, EEG preprocessing,
// training, evaluation, ablation grids, query-budget sweeps, and a gradient
// verification battery. Exit codes: 0 ok, 1 validation error, 2 runtime
// failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "emofuse/checkpoint.hpp"
#include "emofuse/eeg.hpp"
#include "emofuse/train.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace emofuse;
using namespace emofuse::harness;
using nlohmann::json;

namespace {

struct ValidationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::vector<int> parse_int_list(const std::string& csv) {
    std::vector<int> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(std::stoi(item));
    }
    return out;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << text;
}

void write_json(const std::string& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

json confusion_json(const Eigen::MatrixXi& confusion) {
    json rows = json::array();
    for (int r = 0; r < confusion.rows(); ++r) {
        json row = json::array();
        for (int c = 0; c < confusion.cols(); ++c) row.push_back(confusion(r, c));
        rows.push_back(row);
    }
    return rows;
}

void write_confusion_csv(const std::string& path, const Eigen::MatrixXi& confusion,
                         fusion::LabelScheme scheme) {
    std::ostringstream out;
    const auto& names = fusion::class_names(scheme);
    out << "true\\pred";
    for (const auto& n : names) out << "," << n;
    out << "\n";
    for (int r = 0; r < confusion.rows(); ++r) {
        out << names[static_cast<size_t>(r)];
        for (int c = 0; c < confusion.cols(); ++c) out << "," << confusion(r, c);
        out << "\n";
    }
    write_text(path, out.str());
}

void write_report(const std::string& dir, const RunConfig& cfg, const MetricsReport& report) {
    fs::create_directories(dir);
    write_json(dir + "/config.json", cfg.to_json());

    std::ostringstream epochs;
    epochs << "epoch,lr,train_loss,train_accuracy\n";
    for (const auto& e : report.epochs)
        epochs << e.epoch << "," << e.lr << "," << e.train_loss << "," << e.train_accuracy
               << "\n";
    write_text(dir + "/epochs.csv", epochs.str());

    std::ostringstream metrics;
    metrics << "accuracy,macro_f1,mil_precision,initial_loss,test_size\n";
    metrics << report.accuracy << "," << report.macro_f1 << "," << report.mil_precision << ","
            << report.initial_loss << "," << report.test_indices.size() << "\n";
    write_text(dir + "/metrics.csv", metrics.str());

    write_confusion_csv(dir + "/confusion.csv", report.confusion, cfg.scheme);
    write_json(dir + "/report.json",
               {{"accuracy", report.accuracy},
                {"macro_f1", report.macro_f1},
                {"mil_precision", report.mil_precision},
                {"initial_loss", report.initial_loss},
                {"confusion", confusion_json(report.confusion)},
                {"test_indices", report.test_indices}});
}

// Defaults, overlaid with an optional JSON config file; flags override both.
RunConfig load_config(const std::string& config_path) {
    RunConfig cfg = RunConfig::desk_benchmark();
    if (config_path.empty()) return cfg;
    std::ifstream in(config_path);
    if (!in) throw ValidationError("cannot open config file " + config_path);
    json patch = json::parse(in);
    json base = cfg.to_json();
    if (patch.contains("encoder")) {
        base["encoder"].update(patch["encoder"]);
        patch.erase("encoder");
    }
    base.update(patch);
    return RunConfig::from_json(base);
}

struct TrainFlags {
    std::string config_path;

    void attach(CLI::App* cmd, RunConfig& cfg) {
        cmd->add_option("--config", config_path, "JSON config file (flags override it)");
        cmd->add_option("--seed", cfg.seed, "run seed");
        cmd->add_option("--epochs", cfg.epochs, "training epochs");
        cmd->add_option("--batch-size", cfg.batch_size, "mini-batch size");
        cmd->add_option("--lr-max", cfg.lr_max, "peak learning rate");
        cmd->add_option("--lr-min", cfg.lr_min, "final learning rate");
        cmd->add_option("--n-queries", cfg.n_queries, "compressor query tokens N");
        cmd->add_option("--k", cfg.k_select, "MIL selection count K");
        cmd->add_option("--ft-epochs", cfg.ft_epochs, "encoder pretraining epochs");
        cmd->add_flag("--ft,!--no-ft", cfg.ft, "encoder pretraining stage");
        cmd->add_flag("--mil,!--no-mil", cfg.mil, "MIL frame selection");
        cmd->add_flag("--ca,!--no-ca", cfg.ca, "cross-attention compression");
        cmd->add_option_function<std::string>(
            "--scheme",
            [&cfg](const std::string& s) { cfg.scheme = fusion::scheme_from_name(s); },
            "label scheme (deap4, deap3-*, deap2-*)");
        cmd->add_option_function<std::string>(
            "--fusion",
            [&cfg](const std::string& s) { cfg.fusion_mode = fusion_mode_from_name(s); },
            "fusion mode (transformer, concat, eeg_only, face_only)");
    }

    // Config file values, then whatever flags the user actually passed.
    RunConfig resolve(CLI::App* cmd, const RunConfig& flag_values) const {
        RunConfig cfg = load_config(config_path);
        const json flagged = flag_values.to_json();
        json base = cfg.to_json();
        static const std::map<std::string, std::string> kScalar = {
            {"--seed", "seed"},           {"--epochs", "epochs"},
            {"--batch-size", "batch_size"}, {"--lr-max", "lr_max"},
            {"--lr-min", "lr_min"},       {"--n-queries", "n_queries"},
            {"--k", "k_select"},          {"--ft-epochs", "ft_epochs"},
            {"--scheme", "scheme"},       {"--fusion", "fusion_mode"}};
        for (const auto& [flag, key] : kScalar)
            if (cmd->count(flag) > 0) base[key] = flagged.at(key);
        static const std::map<std::string, std::string> kToggle = {
            {"--ft", "ft"}, {"--mil", "mil"}, {"--ca", "ca"}};
        for (const auto& [flag, key] : kToggle)
            if (cmd->count(flag) > 0 || cmd->count("--no-" + flag.substr(2)) > 0)
                base[key] = flagged.at(key);
        return RunConfig::from_json(base);
    }
};

int cmd_gen_data(const GenSpec& spec, std::uint64_t seed, const std::string& out,
                 const std::string& recording_out) {
    Dataset ds = gen_dataset(spec, seed);
    save_dataset(out, ds);
    std::printf("wrote %d trials to %s\n", spec.n_trials, out.c_str());
    if (!recording_out.empty()) {
        eeg::save_recording(recording_out, to_recording(ds));
        std::printf("wrote continuous recording to %s.{bin,json}\n", recording_out.c_str());
    }
    return 0;
}

struct PreprocessArgs {
    std::string in_stem, dataset_dir, out;
    double lo = 1.0, hi = 50.0;
    bool ica = false;
    std::string remove = "auto";
    int components = 0;  // 0: one per channel
    std::uint64_t seed = 0;
};

json run_ica_removal(eeg::RawRecording& rec, const PreprocessArgs& args) {
    const int n_comp = args.components > 0 ? args.components : rec.channels();
    auto dec = eeg::fastica(rec, n_comp, 1e-4, 300, args.seed);
    std::vector<int> to_remove;
    if (args.remove == "auto")
        to_remove = eeg::identify_artifacts(dec);
    else
        to_remove = parse_int_list(args.remove);
    rec = eeg::remove_components(rec, dec, to_remove);
    return {{"ica", true},
            {"converged", dec.converged},
            {"iterations", dec.iterations},
            {"removed_components", to_remove}};
}

int cmd_preprocess(const PreprocessArgs& args) {
    fs::create_directories(args.out);
    json report = {{"lo", args.lo}, {"hi", args.hi}};

    if (!args.in_stem.empty()) {
        eeg::RawRecording rec = eeg::load_recording(args.in_stem);
        rec = eeg::bandpass(rec, args.lo, args.hi);
        if (args.ica) report.update(run_ica_removal(rec, args));
        eeg::save_recording(args.out + "/cleaned", rec);
        report["output"] = args.out + "/cleaned";
    } else {
        Dataset ds = load_dataset(args.dataset_dir);
        eeg::RawRecording rec = to_recording(ds);
        rec = eeg::bandpass(rec, args.lo, args.hi);
        if (args.ica) report.update(run_ica_removal(rec, args));
        apply_cleaned_recording(ds, rec);
        save_dataset(args.out, ds);
        report["output"] = args.out;
    }
    write_json(args.out + "/preprocess.json", report);
    std::printf("preprocessed -> %s\n", args.out.c_str());
    return 0;
}

int cmd_train(const RunConfig& cfg, const std::string& data_dir, const std::string& out) {
    Dataset ds = load_dataset(data_dir);
    auto result = train(cfg, ds);
    write_report(out, cfg, result.report);
    save_checkpoint(out + "/checkpoint", *result.model);
    std::printf("accuracy %.4f  macro-F1 %.4f  (test n=%zu)\n", result.report.accuracy,
                result.report.macro_f1, result.report.test_indices.size());
    return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& data_dir,
             const std::string& out) {
    Model model = load_checkpoint(checkpoint);
    Dataset ds = load_dataset(data_dir);
    std::vector<int> indices(ds.trials.size());
    for (size_t i = 0; i < indices.size(); ++i) indices[i] = static_cast<int>(i);
    MetricsReport report = evaluate(model, ds, indices);
    write_report(out, model.cfg, report);
    std::printf("accuracy %.4f  macro-F1 %.4f  (n=%zu)\n", report.accuracy, report.macro_f1,
                indices.size());
    return 0;
}

int cmd_ablate(const RunConfig& base, const std::string& data_dir, const std::string& out) {
    Dataset ds = load_dataset(data_dir);
    auto rows = ablate(base, ds);
    fs::create_directories(out);
    std::ostringstream csv;
    csv << "name,ft,mil,ca,fusion,accuracy,macro_f1,failed,error\n";
    for (const auto& r : rows) {
        csv << r.name << "," << r.ft << "," << r.mil << "," << r.ca << ","
            << fusion_mode_name(r.mode) << "," << r.accuracy << "," << r.macro_f1 << ","
            << r.failed << "," << r.error << "\n";
        std::printf("%-16s acc=%.4f f1=%.4f%s\n", r.name.c_str(), r.accuracy, r.macro_f1,
                    r.failed ? "  FAILED" : "");
    }
    write_text(out + "/ablate.csv", csv.str());
    return 0;
}

int cmd_sweep(const RunConfig& base, const std::string& data_dir, const std::string& out,
              const std::vector<int>& sizes) {
    Dataset ds = load_dataset(data_dir);
    auto rows = sizes.empty() ? sweep_output_size(base, ds) : sweep_output_size(base, ds, sizes);
    fs::create_directories(out);
    std::ostringstream csv;
    csv << "n,accuracy,macro_f1,seconds,failed,error\n";
    for (const auto& r : rows) {
        csv << r.n_queries << "," << r.accuracy << "," << r.macro_f1 << "," << r.seconds << ","
            << r.failed << "," << r.error << "\n";
        std::printf("N=%-4d acc=%.4f f1=%.4f (%.1fs)%s\n", r.n_queries, r.accuracy, r.macro_f1,
                    r.seconds, r.failed ? "  FAILED" : "");
    }
    write_text(out + "/sweep.csv", csv.str());
    return 0;
}

int cmd_gradcheck(std::uint64_t seed) {
    auto rows = gradcheck_battery(seed);
    bool all_ok = true;
    for (const auto& r : rows) {
        std::printf("%-20s max_rel_err=%.3e  %s%s%s\n", r.name.c_str(), r.max_rel_err,
                    r.ok ? "ok" : "FAIL", r.message.empty() ? "" : " ", r.message.c_str());
        all_ok = all_ok && r.ok;
    }
    if (!all_ok) throw std::runtime_error("gradient verification failed");
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"multimodal EEG + facial-expression emotion recognition benchmark"};
    app.require_subcommand(1);

    // gen-data
    GenSpec gen_spec;
    std::uint64_t gen_seed = 1;
    std::string gen_out, gen_recording_out, gen_scheme = "deap4";
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic labeled dataset");
    gen->add_option("--out", gen_out, "output dataset directory")->required();
    gen->add_option("--trials", gen_spec.n_trials, "number of trials");
    gen->add_option("--seed", gen_seed, "generator seed");
    gen->add_option("--scheme", gen_scheme, "label scheme");
    gen->add_option("--q", gen_spec.q, "frames per bag");
    gen->add_option("--r", gen_spec.r, "informative frames per bag");
    gen->add_option("--frame-size", gen_spec.frame_size, "frame side length");
    gen->add_option("--subjects", gen_spec.subjects, "synthetic subject count");
    gen->add_option("--margin", gen_spec.margin, "rating margin from thresholds");
    gen->add_option("--eeg-noise", gen_spec.eeg_noise, "EEG noise std");
    gen->add_option("--artifact-amp", gen_spec.artifact_amp, "blink artifact amplitude");
    gen->add_option("--frame-noise", gen_spec.frame_noise, "pixel noise std");
    gen->add_option("--recording-out", gen_recording_out,
                    "also write the concatenated continuous recording to this stem");

    // preprocess
    PreprocessArgs pre;
    auto* prep = app.add_subcommand("preprocess", "bandpass + optional ICA artifact removal");
    auto* in_opt = prep->add_option("--in", pre.in_stem, "recording stem (<stem>.bin/.json)");
    auto* ds_opt = prep->add_option("--dataset", pre.dataset_dir, "dataset directory");
    in_opt->excludes(ds_opt);
    prep->add_option("--out", pre.out, "output directory")->required();
    prep->add_option("--lo", pre.lo, "low band edge in Hz");
    prep->add_option("--hi", pre.hi, "high band edge in Hz");
    prep->add_flag("--ica", pre.ica, "run FastICA artifact removal");
    prep->add_option("--remove", pre.remove, "auto or comma-separated component indices");
    prep->add_option("--components", pre.components, "ICA component count (default: channels)");
    prep->add_option("--seed", pre.seed, "ICA seed");

    // train
    RunConfig train_cfg = RunConfig::desk_benchmark();
    TrainFlags train_flags;
    std::string train_data, train_out;
    auto* tr = app.add_subcommand("train", "train a model on a dataset");
    tr->add_option("--data", train_data, "dataset directory")->required();
    tr->add_option("--out", train_out, "run output directory")->required();
    train_flags.attach(tr, train_cfg);

    // eval
    std::string eval_ckpt, eval_data, eval_out;
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    ev->add_option("--checkpoint", eval_ckpt, "checkpoint stem")->required();
    ev->add_option("--data", eval_data, "dataset directory")->required();
    ev->add_option("--out", eval_out, "output directory")->required();

    // ablate
    RunConfig ablate_cfg = RunConfig::desk_benchmark();
    TrainFlags ablate_flags;
    std::string ablate_data, ablate_out;
    auto* ab = app.add_subcommand("ablate", "fusion grid + FT/MIL/CA combination grid");
    ab->add_option("--data", ablate_data, "dataset directory")->required();
    ab->add_option("--out", ablate_out, "output directory")->required();
    ablate_flags.attach(ab, ablate_cfg);

    // sweep-n
    RunConfig sweep_cfg = RunConfig::desk_benchmark();
    TrainFlags sweep_flags;
    std::string sweep_data, sweep_out, sweep_sizes;
    auto* sw = app.add_subcommand("sweep-n", "train one model per query-bank size");
    sw->add_option("--data", sweep_data, "dataset directory")->required();
    sw->add_option("--out", sweep_out, "output directory")->required();
    sw->add_option("--sizes", sweep_sizes, "comma-separated N values");
    sweep_flags.attach(sw, sweep_cfg);

    // gradcheck
    std::uint64_t gc_seed = 5;
    auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient verification");
    gc->add_option("--seed", gc_seed, "battery seed");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            gen_spec.scheme = fusion::scheme_from_name(gen_scheme);
            gen_spec.validate();
            return cmd_gen_data(gen_spec, gen_seed, gen_out, gen_recording_out);
        }
        if (prep->parsed()) {
            if (pre.in_stem.empty() && pre.dataset_dir.empty())
                throw ValidationError("preprocess: need --in or --dataset");
            return cmd_preprocess(pre);
        }
        if (tr->parsed()) {
            RunConfig cfg = train_flags.resolve(tr, train_cfg);
            cfg.validate();
            return cmd_train(cfg, train_data, train_out);
        }
        if (ev->parsed()) return cmd_eval(eval_ckpt, eval_data, eval_out);
        if (ab->parsed()) {
            RunConfig cfg = ablate_flags.resolve(ab, ablate_cfg);
            cfg.validate();
            return cmd_ablate(cfg, ablate_data, ablate_out);
        }
        if (sw->parsed()) {
            RunConfig cfg = sweep_flags.resolve(sw, sweep_cfg);
            cfg.validate();
            return cmd_sweep(cfg, sweep_data, sweep_out, parse_int_list(sweep_sizes));
        }
        if (gc->parsed()) return cmd_gradcheck(gc_seed);
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "failure: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
