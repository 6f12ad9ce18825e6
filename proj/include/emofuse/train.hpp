#pragma once

// Training harness: run configuration, the end-to-end model (encoder, MIL
// selection, cross-attention compression, fusion classifier), an Adam loop
// with cosine learning-rate decay, metrics, and the ablation/sweep runners.

#include <Eigen/Dense>

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "emofuse/fusion.hpp"
#include "emofuse/mil.hpp"
#include "emofuse/synth.hpp"
#include "emofuse/tensor.hpp"
#include "emofuse/vision.hpp"
#include "emofuse/xattn.hpp"
#include "json.hpp"

namespace emofuse::harness {

enum class FusionMode { Transformer, Concat, EegOnly, FaceOnly };
std::string fusion_mode_name(FusionMode mode);
FusionMode fusion_mode_from_name(const std::string& name);

struct RunConfig {
    fusion::LabelScheme scheme = fusion::LabelScheme::Deap4;
    std::uint64_t seed = 7;
    int epochs = 100;
    int batch_size = 20;
    double lr_max = 1e-3;
    double lr_min = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double test_fraction = 0.2;

    vision::EncoderConfig encoder;  // image encoder dims
    int q_frames = 10;
    int k_select = 3;
    int mil_hidden = 32;
    int n_queries = 32;
    int xattn_heads = 1;
    int eeg_channels = 32;
    int eeg_samples = 384;
    int eeg_mid = 32;
    int fusion_depth = 4;
    int fusion_heads = 4;
    int fusion_mlp_ratio = 2;
    int concat_hidden = 32;

    bool ft = true;   // encoder pretraining stage
    bool mil = true;  // off: frame 0 only
    bool ca = true;   // off: visual tokens pass uncompressed
    FusionMode fusion_mode = FusionMode::Transformer;
    int ft_epochs = 8;

    // Laptop-budget preset used by the benchmark runs; all switches on.
    static RunConfig desk_benchmark();

    void validate() const;
    int n_classes() const { return fusion::n_classes(scheme); }
    // visual tokens reaching the fusion stage
    int vis_tokens() const;

    nlohmann::json to_json() const;
    static RunConfig from_json(const nlohmann::json& j);
};

double cosine_lr(int t, int total, double lr_max, double lr_min);

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

struct Model {
    RunConfig cfg;
    vision::EncoderParams encoder;
    mil::MILParams mil_params;
    xattn::QueryBank bank;
    xattn::CompressorParams comp;
    fusion::EEGTokenizerParams eeg_tok;
    fusion::FusionParams fus;
    fusion::ConcatHeadParams concat_head;

    static Model init(const RunConfig& cfg);

    // Parameters updated by the optimizer under the configured mode/flags.
    std::vector<diff::Parameter*> trainable();
    // Every parameter, for checkpointing.
    std::vector<diff::Parameter*> all_params();

    // One trial's logits (1, n_classes). Fills `selected` with the MIL
    // top-K indices when given and MIL is enabled.
    diff::Tensor forward(const TrialRecord& trial, std::vector<int>* selected = nullptr);
};

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct EpochLog {
    int epoch = 0;
    double lr = 0;
    double train_loss = 0;
    double train_accuracy = 0;
};

struct MetricsReport {
    std::vector<EpochLog> epochs;
    double initial_loss = 0;  // before the first update
    double accuracy = 0;
    double macro_f1 = 0;
    Eigen::MatrixXi confusion;  // rows = true class, cols = predicted
    double mil_precision = -1;  // selection precision vs informative_set; -1 if n/a
    std::vector<int> test_indices;
};

double macro_f1_from_confusion(const Eigen::MatrixXi& confusion);

// Stratified index split preserving class proportions within one sample.
std::pair<std::vector<int>, std::vector<int>> stratified_split(const std::vector<int>& labels,
                                                               int n_classes,
                                                               double test_fraction,
                                                               std::mt19937_64& rng);

MetricsReport evaluate(Model& model, const Dataset& data, const std::vector<int>& indices);

struct TrainResult {
    std::shared_ptr<Model> model;
    MetricsReport report;
};

// Deterministic per (config, data): stratified split, optional encoder
// pretraining stage, Adam with per-epoch cosine decay, final evaluation on
// the held-out split.
TrainResult train(const RunConfig& cfg, const Dataset& data);

// ---------------------------------------------------------------------------
// Experiment runners
// ---------------------------------------------------------------------------

struct AblationRow {
    std::string name;
    bool ft = false, mil = false, ca = false;
    FusionMode mode = FusionMode::Transformer;
    double accuracy = 0;
    double macro_f1 = 0;
    bool failed = false;
    std::string error;
};

// 4 fusion rows (eeg_only, face_only, concat, transformer) plus the 8
// FT/MIL/CA combinations, all on the same data and seed.
std::vector<AblationRow> ablate(const RunConfig& base, const Dataset& data);

struct SweepRow {
    int n_queries = 0;
    double accuracy = 0;
    double macro_f1 = 0;
    double seconds = 0;
    bool failed = false;
    std::string error;
};

// One training run per query-bank size; failures are recorded and the sweep
// continues.
std::vector<SweepRow> sweep_output_size(const RunConfig& base, const Dataset& data,
                                        const std::vector<int>& sizes = {16, 32, 64, 96, 128,
                                                                         147, 196});

// ---------------------------------------------------------------------------
// Checkpoints: parameter blob + manifest carrying the full RunConfig
// ---------------------------------------------------------------------------

void save_checkpoint(const std::string& stem, Model& model);
Model load_checkpoint(const std::string& stem);

// ---------------------------------------------------------------------------
// Gradient verification battery: every tensor op on random small instances
// plus the three composite paths (MIL scorer, compressor, full classifier).
// ---------------------------------------------------------------------------

struct GradcheckRow {
    std::string name;
    double max_rel_err = 0;
    bool ok = false;
    std::string message;
};

std::vector<GradcheckRow> gradcheck_battery(std::uint64_t seed = 5);

}  // namespace emofuse::harness
