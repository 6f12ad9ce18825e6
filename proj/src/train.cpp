#include "emofuse/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>
#include <tuple>

#include "emofuse/checkpoint.hpp"

namespace emofuse::harness {

using diff::Parameter;
using diff::Tensor;

std::string fusion_mode_name(FusionMode mode) {
    switch (mode) {
        case FusionMode::Transformer: return "transformer";
        case FusionMode::Concat: return "concat";
        case FusionMode::EegOnly: return "eeg_only";
        case FusionMode::FaceOnly: return "face_only";
    }
    throw std::logic_error("unknown fusion mode");
}

FusionMode fusion_mode_from_name(const std::string& name) {
    if (name == "transformer") return FusionMode::Transformer;
    if (name == "concat") return FusionMode::Concat;
    if (name == "eeg_only") return FusionMode::EegOnly;
    if (name == "face_only") return FusionMode::FaceOnly;
    throw std::invalid_argument("unknown fusion mode '" + name + "'");
}

RunConfig RunConfig::desk_benchmark() {
    RunConfig cfg;
    cfg.encoder.image_size = 28;
    cfg.encoder.patch_size = 7;
    cfg.encoder.embed_dim = 16;
    cfg.encoder.depth = 6;
    cfg.encoder.window_size = 4;
    cfg.encoder.num_heads = 2;
    cfg.encoder.mlp_ratio = 2;
    cfg.fusion_depth = 2;
    cfg.fusion_heads = 2;
    return cfg;
}

int RunConfig::vis_tokens() const {
    if (ca) return n_queries;
    const int m = encoder.out_tokens();
    return mil ? k_select * m : m;
}

void RunConfig::validate() const {
    encoder.validate();
    if (epochs < 1 || batch_size < 1) throw std::invalid_argument("config: bad loop sizes");
    if (!(lr_min <= lr_max) || lr_max <= 0) throw std::invalid_argument("config: bad lr range");
    if (!(test_fraction > 0 && test_fraction < 1))
        throw std::invalid_argument("config: test_fraction must be in (0,1)");
    if (k_select < 1 || k_select > q_frames)
        throw std::invalid_argument("config: K must satisfy 1 <= K <= q");
    if (n_queries < 1) throw std::invalid_argument("config: need at least one query token");
    if (eeg_channels < 1 || eeg_samples < 1 || eeg_mid < 1)
        throw std::invalid_argument("config: bad EEG dims");
    if (encoder.out_dim() % fusion_heads != 0)
        throw std::invalid_argument("config: token dim not divisible by fusion heads");
    if (encoder.out_dim() % xattn_heads != 0)
        throw std::invalid_argument("config: token dim not divisible by compressor heads");
    if (ft_epochs < 0) throw std::invalid_argument("config: negative pretraining epochs");
}

nlohmann::json RunConfig::to_json() const {
    return {{"scheme", fusion::scheme_name(scheme)},
            {"seed", seed},
            {"epochs", epochs},
            {"batch_size", batch_size},
            {"lr_max", lr_max},
            {"lr_min", lr_min},
            {"beta1", beta1},
            {"beta2", beta2},
            {"adam_eps", adam_eps},
            {"test_fraction", test_fraction},
            {"encoder",
             {{"image_size", encoder.image_size},
              {"patch_size", encoder.patch_size},
              {"in_channels", encoder.in_channels},
              {"embed_dim", encoder.embed_dim},
              {"depth", encoder.depth},
              {"window_size", encoder.window_size},
              {"num_heads", encoder.num_heads},
              {"merge_stages", encoder.merge_stages},
              {"mlp_ratio", encoder.mlp_ratio}}},
            {"q_frames", q_frames},
            {"k_select", k_select},
            {"mil_hidden", mil_hidden},
            {"n_queries", n_queries},
            {"xattn_heads", xattn_heads},
            {"eeg_channels", eeg_channels},
            {"eeg_samples", eeg_samples},
            {"eeg_mid", eeg_mid},
            {"fusion_depth", fusion_depth},
            {"fusion_heads", fusion_heads},
            {"fusion_mlp_ratio", fusion_mlp_ratio},
            {"concat_hidden", concat_hidden},
            {"ft", ft},
            {"mil", mil},
            {"ca", ca},
            {"fusion_mode", fusion_mode_name(fusion_mode)},
            {"ft_epochs", ft_epochs}};
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
    RunConfig cfg;
    cfg.scheme = fusion::scheme_from_name(j.at("scheme").get<std::string>());
    cfg.seed = j.at("seed").get<std::uint64_t>();
    cfg.epochs = j.at("epochs").get<int>();
    cfg.batch_size = j.at("batch_size").get<int>();
    cfg.lr_max = j.at("lr_max").get<double>();
    cfg.lr_min = j.at("lr_min").get<double>();
    cfg.beta1 = j.at("beta1").get<double>();
    cfg.beta2 = j.at("beta2").get<double>();
    cfg.adam_eps = j.at("adam_eps").get<double>();
    cfg.test_fraction = j.at("test_fraction").get<double>();
    const auto& je = j.at("encoder");
    cfg.encoder.image_size = je.at("image_size").get<int>();
    cfg.encoder.patch_size = je.at("patch_size").get<int>();
    cfg.encoder.in_channels = je.at("in_channels").get<int>();
    cfg.encoder.embed_dim = je.at("embed_dim").get<int>();
    cfg.encoder.depth = je.at("depth").get<int>();
    cfg.encoder.window_size = je.at("window_size").get<int>();
    cfg.encoder.num_heads = je.at("num_heads").get<int>();
    cfg.encoder.merge_stages = je.at("merge_stages").get<int>();
    cfg.encoder.mlp_ratio = je.at("mlp_ratio").get<int>();
    cfg.q_frames = j.at("q_frames").get<int>();
    cfg.k_select = j.at("k_select").get<int>();
    cfg.mil_hidden = j.at("mil_hidden").get<int>();
    cfg.n_queries = j.at("n_queries").get<int>();
    cfg.xattn_heads = j.at("xattn_heads").get<int>();
    cfg.eeg_channels = j.at("eeg_channels").get<int>();
    cfg.eeg_samples = j.at("eeg_samples").get<int>();
    cfg.eeg_mid = j.at("eeg_mid").get<int>();
    cfg.fusion_depth = j.at("fusion_depth").get<int>();
    cfg.fusion_heads = j.at("fusion_heads").get<int>();
    cfg.fusion_mlp_ratio = j.at("fusion_mlp_ratio").get<int>();
    cfg.concat_hidden = j.at("concat_hidden").get<int>();
    cfg.ft = j.at("ft").get<bool>();
    cfg.mil = j.at("mil").get<bool>();
    cfg.ca = j.at("ca").get<bool>();
    cfg.fusion_mode = fusion_mode_from_name(j.at("fusion_mode").get<std::string>());
    cfg.ft_epochs = j.at("ft_epochs").get<int>();
    return cfg;
}

double cosine_lr(int t, int total, double lr_max, double lr_min) {
    if (t < 0 || t > total) throw std::invalid_argument("cosine_lr: t outside [0, T]");
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(M_PI * t / total));
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

Model Model::init(const RunConfig& cfg) {
    cfg.validate();
    std::mt19937_64 rng(cfg.seed);
    Model m{cfg,
            vision::EncoderParams::init(cfg.encoder, rng, "enc"),
            mil::MILParams::init(cfg.mil_hidden, cfg.encoder.out_dim(), rng, "mil"),
            xattn::QueryBank::init(cfg.n_queries, cfg.encoder.out_dim(), rng, "xattn"),
            xattn::CompressorParams::init(cfg.encoder.out_dim(), cfg.xattn_heads, rng, "xattn"),
            fusion::EEGTokenizerParams::init(cfg.eeg_samples, cfg.eeg_mid, cfg.encoder.out_dim(),
                                             rng, "eegtok"),
            fusion::FusionParams::init(cfg.encoder.out_dim(), cfg.eeg_channels, cfg.vis_tokens(),
                                       cfg.fusion_depth, cfg.fusion_heads, cfg.fusion_mlp_ratio,
                                       cfg.n_classes(), rng, "fus"),
            fusion::ConcatHeadParams::init(cfg.encoder.out_dim(), cfg.concat_hidden,
                                           cfg.n_classes(), rng, "concat")};
    return m;
}

std::vector<Parameter*> Model::trainable() {
    std::vector<Parameter*> out;
    const bool vision_used = cfg.fusion_mode != FusionMode::EegOnly;
    const bool eeg_used = cfg.fusion_mode != FusionMode::FaceOnly;
    if (vision_used) {
        for (auto* p : encoder.all()) out.push_back(p);
        if (cfg.mil)
            for (auto* p : mil_params.all()) out.push_back(p);
        if (cfg.ca) {
            out.push_back(&bank.queries);
            for (auto* p : comp.all()) out.push_back(p);
        }
    }
    if (eeg_used)
        for (auto* p : eeg_tok.all()) out.push_back(p);
    if (cfg.fusion_mode == FusionMode::Concat) {
        for (auto* p : concat_head.all()) out.push_back(p);
    } else {
        for (auto* p : fus.all()) out.push_back(p);
    }
    return out;
}

std::vector<Parameter*> Model::all_params() {
    std::vector<Parameter*> out;
    for (auto* p : encoder.all()) out.push_back(p);
    for (auto* p : mil_params.all()) out.push_back(p);
    out.push_back(&bank.queries);
    for (auto* p : comp.all()) out.push_back(p);
    for (auto* p : eeg_tok.all()) out.push_back(p);
    for (auto* p : fus.all()) out.push_back(p);
    for (auto* p : concat_head.all()) out.push_back(p);
    return out;
}

Tensor Model::forward(const TrialRecord& trial, std::vector<int>* selected) {
    const bool vision_used = cfg.fusion_mode != FusionMode::EegOnly;
    const bool eeg_used = cfg.fusion_mode != FusionMode::FaceOnly;

    std::optional<Tensor> vis_tokens;
    if (vision_used) {
        Tensor vis_all;
        if (cfg.mil) {
            if (static_cast<int>(trial.frames.size()) != cfg.q_frames)
                throw std::invalid_argument("forward: trial has " +
                                            std::to_string(trial.frames.size()) +
                                            " frames, config expects " +
                                            std::to_string(cfg.q_frames));
            auto grids = vision::encode_bag(trial.frames, cfg.encoder, encoder);
            std::vector<Tensor> tokens;
            tokens.reserve(grids.size());
            for (auto& g : grids) tokens.push_back(g.tokens);
            auto bag = mil::make_bag(tokens);
            Tensor scores = mil::attention_scores(bag, mil_params);
            auto sel = mil::select_topk(bag, scores, cfg.k_select);
            if (selected != nullptr) *selected = sel.indices;
            vis_all = diff::concat_rows(mil::weighted_forward(sel));
        } else {
            // single-picture path: frame 0 stands in for the whole window
            vis_all = vision::encode_frame(trial.frames.at(0), cfg.encoder, encoder).tokens;
        }
        vis_tokens = cfg.ca ? xattn::compress(vis_all, bank, comp) : vis_all;
    }

    std::optional<Tensor> eeg_tokens;
    if (eeg_used) eeg_tokens = fusion::tokenize_eeg(trial.eeg, eeg_tok);

    if (cfg.fusion_mode == FusionMode::Concat)
        return fusion::fuse_baseline_concat(*eeg_tokens, *vis_tokens, concat_head);
    return fusion::classify(fusion::assemble(eeg_tokens, vis_tokens, fus), fus);
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

namespace {

class Adam {
public:
    Adam(std::vector<Parameter*> params, double beta1, double beta2, double eps)
        : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
        m_.resize(params_.size());
        v_.resize(params_.size());
        for (size_t i = 0; i < params_.size(); ++i) {
            m_[i].assign(params_[i]->tensor.numel(), 0.0);
            v_[i].assign(params_[i]->tensor.numel(), 0.0);
        }
    }

    void zero_grad() {
        for (auto* p : params_) p->tensor.node()->grad.clear();
    }

    // grad_scale folds the 1/batch factor of a mean loss into the update,
    // so per-sample backward passes can simply accumulate.
    void step(double lr, double grad_scale = 1.0) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, t_);
        const double bc2 = 1.0 - std::pow(beta2_, t_);
        for (size_t i = 0; i < params_.size(); ++i) {
            auto& node = *params_[i]->tensor.node();
            if (node.grad.empty()) continue;
            for (size_t k = 0; k < node.value.size(); ++k) {
                const double g = grad_scale * node.grad[k];
                m_[i][k] = beta1_ * m_[i][k] + (1.0 - beta1_) * g;
                v_[i][k] = beta2_ * v_[i][k] + (1.0 - beta2_) * g * g;
                const double mhat = m_[i][k] / bc1;
                const double vhat = v_[i][k] / bc2;
                node.value[k] -= lr * mhat / (std::sqrt(vhat) + eps_);
            }
        }
    }

private:
    std::vector<Parameter*> params_;
    std::vector<std::vector<double>> m_, v_;
    double beta1_, beta2_, eps_;
    long t_ = 0;
};

int argmax_row(const Tensor& logits) {
    int best = 0;
    for (int j = 1; j < logits.cols(); ++j)
        if (logits.at(0, j) > logits.at(0, best)) best = j;
    return best;
}

// Trial labels under the configured scheme (the generator may have used a
// different one).
std::vector<int> labels_for(const Dataset& data, fusion::LabelScheme scheme) {
    std::vector<int> labels;
    labels.reserve(data.trials.size());
    for (const auto& t : data.trials)
        labels.push_back(fusion::map_label(t.arousal, t.valence, scheme));
    return labels;
}

// Encoder pretraining on single-frame classification: informative frames
// carry their trial label, neutral frames an extra class.
void pretrain_encoder(Model& model, const Dataset& data, const std::vector<int>& train_idx,
                      const std::vector<int>& labels, std::mt19937_64& rng) {
    const RunConfig& cfg = model.cfg;
    const int n_cls = cfg.n_classes() + 1;
    const int dim = cfg.encoder.out_dim();

    struct Item {
        const vision::Frame* frame;
        int label;
    };
    std::vector<Item> items;
    for (int idx : train_idx) {
        const auto& trial = data.trials[static_cast<size_t>(idx)];
        for (int f = 0; f < static_cast<int>(trial.frames.size()); ++f) {
            const bool informative = std::binary_search(trial.informative_set.begin(),
                                                        trial.informative_set.end(), f);
            items.push_back({&trial.frames[static_cast<size_t>(f)],
                             informative ? labels[static_cast<size_t>(idx)] : n_cls - 1});
        }
    }

    Parameter head_w("ft.head.w", Tensor::randn({dim, n_cls}, rng, 0.02));
    Parameter head_b("ft.head.b", Tensor::zeros({1, n_cls}));
    head_w.tensor.node()->requires_grad = true;
    head_b.tensor.node()->requires_grad = true;

    auto params = model.encoder.all();
    params.push_back(&head_w);
    params.push_back(&head_b);
    Adam opt(params, cfg.beta1, cfg.beta2, cfg.adam_eps);

    const int batch = 40;
    std::vector<int> order(items.size());
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 0; epoch < cfg.ft_epochs; ++epoch) {
        const double lr = cosine_lr(epoch, cfg.ft_epochs, cfg.lr_max, cfg.lr_min);
        std::shuffle(order.begin(), order.end(), rng);
        for (size_t start = 0; start < order.size(); start += batch) {
            const size_t stop = std::min(order.size(), start + batch);
            std::vector<vision::Frame> frames;
            std::vector<int> batch_labels;
            for (size_t i = start; i < stop; ++i) {
                frames.push_back(*items[static_cast<size_t>(order[i])].frame);
                batch_labels.push_back(items[static_cast<size_t>(order[i])].label);
            }
            auto grids = vision::encode_bag(frames, cfg.encoder, model.encoder);
            std::vector<Tensor> rows;
            rows.reserve(grids.size());
            for (auto& g : grids)
                rows.push_back(diff::add(diff::matmul(diff::mean_rows(g.tokens), head_w.tensor),
                                         head_b.tensor));
            Tensor loss = diff::cross_entropy(diff::concat_rows(rows), batch_labels);
            if (!loss.all_finite())
                throw std::runtime_error("pretraining diverged at epoch " +
                                         std::to_string(epoch));
            loss.backward();
            opt.step(lr);
            opt.zero_grad();
        }
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

double macro_f1_from_confusion(const Eigen::MatrixXi& confusion) {
    const int n = static_cast<int>(confusion.rows());
    double total = 0;
    for (int c = 0; c < n; ++c) {
        const double tp = confusion(c, c);
        const double fn = confusion.row(c).sum() - tp;
        const double fp = confusion.col(c).sum() - tp;
        const double precision = tp + fp > 0 ? tp / (tp + fp) : 0.0;
        const double recall = tp + fn > 0 ? tp / (tp + fn) : 0.0;
        total += precision + recall > 0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
    }
    return total / n;
}

std::pair<std::vector<int>, std::vector<int>> stratified_split(const std::vector<int>& labels,
                                                               int n_classes,
                                                               double test_fraction,
                                                               std::mt19937_64& rng) {
    std::vector<std::vector<int>> per_class(static_cast<size_t>(n_classes));
    for (size_t i = 0; i < labels.size(); ++i)
        per_class.at(static_cast<size_t>(labels[i])).push_back(static_cast<int>(i));

    std::vector<int> train, test;
    for (auto& bucket : per_class) {
        std::shuffle(bucket.begin(), bucket.end(), rng);
        const int n_test = static_cast<int>(std::lround(test_fraction * bucket.size()));
        for (size_t i = 0; i < bucket.size(); ++i)
            (static_cast<int>(i) < n_test ? test : train).push_back(bucket[i]);
    }
    std::sort(train.begin(), train.end());
    std::sort(test.begin(), test.end());
    return {train, test};
}

MetricsReport evaluate(Model& model, const Dataset& data, const std::vector<int>& indices) {
    const int n = model.cfg.n_classes();
    MetricsReport report;
    report.confusion = Eigen::MatrixXi::Zero(n, n);
    report.test_indices = indices;

    const auto labels = labels_for(data, model.cfg.scheme);
    double precision_sum = 0;
    int precision_count = 0;
    for (int idx : indices) {
        const auto& trial = data.trials.at(static_cast<size_t>(idx));
        std::vector<int> selected;
        Tensor logits = model.forward(trial, &selected);
        const int pred = argmax_row(logits);
        report.confusion(labels[static_cast<size_t>(idx)], pred) += 1;
        if (!selected.empty() && !trial.informative_set.empty()) {
            int hits = 0;
            for (int s : selected)
                if (std::binary_search(trial.informative_set.begin(),
                                       trial.informative_set.end(), s))
                    ++hits;
            precision_sum += static_cast<double>(hits) / selected.size();
            ++precision_count;
        }
    }
    const int total = static_cast<int>(indices.size());
    report.accuracy = total > 0 ? static_cast<double>(report.confusion.trace()) / total : 0.0;
    report.macro_f1 = macro_f1_from_confusion(report.confusion);
    if (precision_count > 0) report.mil_precision = precision_sum / precision_count;
    return report;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

TrainResult train(const RunConfig& cfg, const Dataset& data) {
    cfg.validate();
    if (data.trials.empty()) throw std::invalid_argument("train: empty dataset");

    TrainResult result;
    result.model = std::make_shared<Model>(Model::init(cfg));
    Model& model = *result.model;

    const auto labels = labels_for(data, cfg.scheme);
    std::mt19937_64 split_rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
    auto [train_idx, test_idx] =
        stratified_split(labels, cfg.n_classes(), cfg.test_fraction, split_rng);

    std::mt19937_64 loop_rng(cfg.seed + 1);
    const bool vision_used = cfg.fusion_mode != FusionMode::EegOnly;
    if (cfg.ft && vision_used && cfg.ft_epochs > 0)
        pretrain_encoder(model, data, train_idx, labels, loop_rng);

    Adam opt(model.trainable(), cfg.beta1, cfg.beta2, cfg.adam_eps);

    // loss before any update, on the first training batch
    {
        const size_t probe = std::min<size_t>(train_idx.size(), cfg.batch_size);
        std::vector<Tensor> rows;
        std::vector<int> batch_labels;
        for (size_t i = 0; i < probe; ++i) {
            rows.push_back(model.forward(data.trials[static_cast<size_t>(train_idx[i])]));
            batch_labels.push_back(labels[static_cast<size_t>(train_idx[i])]);
        }
        result.report.initial_loss =
            diff::cross_entropy(diff::concat_rows(rows), batch_labels).item();
    }

    std::vector<int> order = train_idx;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = cosine_lr(epoch, cfg.epochs, cfg.lr_max, cfg.lr_min);
        std::shuffle(order.begin(), order.end(), loop_rng);

        double loss_sum = 0;
        int correct = 0;
        for (size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const size_t stop = std::min(order.size(), start + cfg.batch_size);
            // per-sample tapes with accumulated gradients: identical to one
            // batch graph, but the working set stays one trial wide
            for (size_t i = start; i < stop; ++i) {
                const int idx = order[i];
                Tensor logits = model.forward(data.trials[static_cast<size_t>(idx)]);
                if (argmax_row(logits) == labels[static_cast<size_t>(idx)]) ++correct;
                Tensor sample_loss =
                    diff::cross_entropy(logits, {labels[static_cast<size_t>(idx)]});
                const double loss_value = sample_loss.item();
                if (!std::isfinite(loss_value))
                    throw std::runtime_error("train: non-finite loss at epoch " +
                                             std::to_string(epoch) + ", batch " +
                                             std::to_string(start / cfg.batch_size));
                loss_sum += loss_value;
                sample_loss.backward();
            }
            opt.step(lr, 1.0 / static_cast<double>(stop - start));
            opt.zero_grad();
        }
        result.report.epochs.push_back(
            {epoch, lr, loss_sum / static_cast<double>(order.size()),
             static_cast<double>(correct) / static_cast<double>(order.size())});
    }

    MetricsReport final = evaluate(model, data, test_idx);
    final.epochs = std::move(result.report.epochs);
    final.initial_loss = result.report.initial_loss;
    result.report = std::move(final);
    return result;
}

// ---------------------------------------------------------------------------
// Experiment runners
// ---------------------------------------------------------------------------

std::vector<AblationRow> ablate(const RunConfig& base, const Dataset& data) {
    std::vector<AblationRow> rows;

    auto run = [&](AblationRow row, RunConfig cfg) {
        try {
            auto result = train(cfg, data);
            row.accuracy = result.report.accuracy;
            row.macro_f1 = result.report.macro_f1;
        } catch (const std::exception& e) {
            row.failed = true;
            row.error = e.what();
        }
        rows.push_back(std::move(row));
    };

    for (FusionMode mode : {FusionMode::EegOnly, FusionMode::FaceOnly, FusionMode::Concat,
                            FusionMode::Transformer}) {
        RunConfig cfg = base;
        cfg.fusion_mode = mode;
        AblationRow row;
        row.name = fusion_mode_name(mode);
        row.ft = cfg.ft;
        row.mil = cfg.mil;
        row.ca = cfg.ca;
        row.mode = mode;
        run(row, cfg);
    }

    const std::vector<std::tuple<std::string, bool, bool, bool>> combos = {
        {"single-picture", false, false, false},
        {"ft", true, false, false},
        {"mil", false, true, false},
        {"ca", false, false, true},
        {"ft+mil", true, true, false},
        {"ft+ca", true, false, true},
        {"mil+ca", false, true, true},
        {"ft+mil+ca", true, true, true},
    };
    for (const auto& [name, ft, mil, ca] : combos) {
        RunConfig cfg = base;
        cfg.fusion_mode = FusionMode::Transformer;
        cfg.ft = ft;
        cfg.mil = mil;
        cfg.ca = ca;
        AblationRow row;
        row.name = name;
        row.ft = ft;
        row.mil = mil;
        row.ca = ca;
        row.mode = FusionMode::Transformer;
        run(row, cfg);
    }
    return rows;
}

std::vector<SweepRow> sweep_output_size(const RunConfig& base, const Dataset& data,
                                        const std::vector<int>& sizes) {
    if (sizes.empty()) throw std::invalid_argument("sweep: no sizes");
    std::vector<SweepRow> rows;
    for (int n : sizes) {
        SweepRow row;
        row.n_queries = n;
        const auto start = std::chrono::steady_clock::now();
        try {
            RunConfig cfg = base;
            cfg.n_queries = n;
            cfg.ca = true;
            auto result = train(cfg, data);
            row.accuracy = result.report.accuracy;
            row.macro_f1 = result.report.macro_f1;
        } catch (const std::exception& e) {
            row.failed = true;
            row.error = e.what();
        }
        row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        rows.push_back(std::move(row));
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

// ---------------------------------------------------------------------------
// Gradcheck battery
// ---------------------------------------------------------------------------

std::vector<GradcheckRow> gradcheck_battery(std::uint64_t seed) {
    std::vector<GradcheckRow> rows;

    auto check = [&rows](const std::string& name, const std::function<diff::GradcheckReport()>& run,
                         double tol = 1e-4) {
        GradcheckRow row;
        row.name = name;
        try {
            auto report = run();
            row.max_rel_err = report.max_rel_err;
            row.ok = report.ok && report.max_rel_err < tol;
            row.message = report.message;
        } catch (const std::exception& e) {
            row.ok = false;
            row.message = e.what();
        }
        rows.push_back(std::move(row));
    };

    std::mt19937_64 rng(seed);
    // every tensor op, ten random small instances each
    struct OpCase {
        const char* name;
        std::function<Tensor(Parameter&, Parameter&)> build;
    };
    const std::vector<OpCase> ops = {
        {"matmul", [](Parameter& a, Parameter& b) {
             return diff::sum_all(diff::tanh(diff::matmul(a.tensor, b.tensor)));
         }},
        {"transpose", [](Parameter& a, Parameter& b) {
             return diff::sum_all(diff::mul(diff::transpose(a.tensor), b.tensor));
         }},
        {"add", [](Parameter& a, Parameter&) {
             return diff::sum_all(diff::tanh(diff::add(a.tensor, diff::scale(a.tensor, 0.3))));
         }},
        {"sub", [](Parameter& a, Parameter&) {
             return diff::sum_all(diff::tanh(diff::sub(a.tensor, diff::Tensor::scalar(0.7))));
         }},
        {"mul", [](Parameter& a, Parameter&) {
             return diff::sum_all(diff::mul(a.tensor, a.tensor));
         }},
        {"div", [](Parameter& a, Parameter&) {
             return diff::sum_all(diff::div(a.tensor, diff::Tensor::scalar(1.3)));
         }},
        {"scale", [](Parameter& a, Parameter&) {
             return diff::sum_all(diff::scale(a.tensor, -2.5));
         }},
        {"sum_all", [](Parameter& a, Parameter&) {
             return diff::sum_all(diff::tanh(a.tensor));
         }},
        {"mean_rows", [](Parameter& a, Parameter&) {
             return diff::sum_all(diff::tanh(diff::mean_rows(a.tensor)));
         }},
        {"concat_rows", [](Parameter& a, Parameter& b) {
             return diff::sum_all(
                 diff::tanh(diff::concat_rows({a.tensor, diff::transpose(b.tensor)})));
         }},
        {"concat_cols", [](Parameter& a, Parameter&) {
             return diff::sum_all(diff::tanh(diff::concat_cols({a.tensor, a.tensor})));
         }},
        {"slice_rows", [](Parameter& a, Parameter&) {
             return diff::sum_all(
                 diff::mul(diff::slice_rows(a.tensor, 0, 2), diff::slice_rows(a.tensor, 1, 2)));
         }},
        {"slice_cols", [](Parameter& a, Parameter&) {
             return diff::sum_all(diff::tanh(diff::slice_cols(a.tensor, 1, 2)));
         }},
        {"gather_rows", [](Parameter& a, Parameter&) {
             return diff::sum_all(diff::tanh(diff::gather_rows(a.tensor, {2, 0, 2})));
         }},
        {"reshape", [](Parameter& a, Parameter&) {
             return diff::sum_all(diff::tanh(diff::reshape(a.tensor, {4, 3})));
         }},
        {"softmax_lastaxis", [](Parameter& a, Parameter&) {
             return diff::sum_all(diff::mul(diff::softmax_lastaxis(a.tensor), a.tensor));
         }},
        {"tanh", [](Parameter& a, Parameter&) { return diff::sum_all(diff::tanh(a.tensor)); }},
        {"relu", [](Parameter& a, Parameter&) { return diff::sum_all(diff::relu(a.tensor)); }},
        {"gelu", [](Parameter& a, Parameter&) { return diff::sum_all(diff::gelu(a.tensor)); }},
        {"exp", [](Parameter& a, Parameter&) {
             return diff::sum_all(diff::exp(diff::scale(a.tensor, 0.4)));
         }},
        {"log", [](Parameter& a, Parameter&) {
             return diff::sum_all(
                 diff::log(diff::add(diff::mul(a.tensor, a.tensor), diff::Tensor::scalar(0.4))));
         }},
        {"layernorm", [](Parameter& a, Parameter& b) {
             Tensor g = diff::slice_rows(diff::transpose(b.tensor), 0, 1);
             Tensor be = diff::slice_rows(diff::transpose(b.tensor), 1, 1);
             return diff::sum_all(diff::mul(diff::layernorm(a.tensor, g, be), a.tensor));
         }},
        {"cross_entropy", [](Parameter& a, Parameter&) {
             return diff::cross_entropy(a.tensor, {1, 3, 0});
         }},
    };

    for (const auto& op : ops) {
        double worst = 0;
        bool ok = true;
        std::string message;
        for (int rep = 0; rep < 10 && ok; ++rep) {
            Parameter a("a", Tensor::randn({3, 4}, rng));
            Parameter b("b", Tensor::randn({4, 3}, rng));
            // keep relu away from its kink
            for (auto& v : a.tensor.mutable_data())
                if (std::abs(v) < 0.05) v += 0.1;
            auto f = [&]() { return op.build(a, b); };
            auto report = diff::gradcheck(f, {&a, &b}, 1e-5);
            worst = std::max(worst, report.max_rel_err);
            ok = ok && report.ok;
            if (!report.ok) message = report.message;
        }
        rows.push_back({std::string("op.") + op.name, worst, ok && worst < 1e-4, message});
    }

    // composite path 1: MIL scorer through selection and weighting
    check("path.mil_scorer", [&rng]() {
        std::vector<Tensor> grids;
        for (int i = 0; i < 5; ++i) grids.push_back(Tensor::randn({3, 4}, rng));
        auto params = mil::MILParams::init(6, 4, rng, "mil");
        // live gate so finite differences cannot flip the selected set
        params.w.tensor = Tensor::randn({6, 1}, rng, 0.3);
        params.w.tensor.node()->requires_grad = true;
        Tensor probe = Tensor::randn({3, 4}, rng);
        auto f = [&]() {
            auto bag = mil::make_bag(grids);
            auto sel = mil::select_topk(bag, mil::attention_scores(bag, params), 2);
            auto weighted = mil::weighted_forward(sel);
            Tensor acc = diff::mul(weighted[0], probe);
            for (size_t i = 1; i < weighted.size(); ++i)
                acc = diff::add(acc, diff::mul(weighted[i], probe));
            return diff::sum_all(acc);
        };
        return diff::gradcheck(f, {&params.v, &params.w}, 1e-5);
    });

    // composite path 2: cross-attention compressor
    check("path.compressor", [&rng]() {
        auto bank = xattn::QueryBank::init(2, 4, rng, "bank");
        auto comp = xattn::CompressorParams::init(4, 2, rng, "comp");
        Parameter tokens("tokens", Tensor::randn({3, 4}, rng));
        Tensor probe = Tensor::randn({2, 4}, rng);
        auto f = [&]() {
            return diff::sum_all(diff::mul(xattn::compress(tokens.tensor, bank, comp), probe));
        };
        return diff::gradcheck(f, {&bank.queries, &comp.wq, &comp.wk, &comp.wv, &tokens}, 1e-5);
    });

    // composite path 3: full fusion classifier loss
    check("path.classifier", [&rng]() {
        auto tok = fusion::EEGTokenizerParams::init(16, 5, 6, rng, "tok");
        auto fus = fusion::FusionParams::init(6, 3, 4, 1, 2, 2, 3, rng, "fus");
        eeg::EEGSegment seg;
        seg.data.resize(3, 16);
        std::normal_distribution<double> gauss(0.0, 1.0);
        for (int c = 0; c < 3; ++c)
            for (int s = 0; s < 16; ++s) seg.data(c, s) = gauss(rng);
        Tensor vis = Tensor::randn({4, 6}, rng);
        auto f = [&]() {
            Tensor seq = fusion::assemble(fusion::tokenize_eeg(seg, tok), vis, fus);
            return fusion::loss(fusion::classify(seq, fus), {1});
        };
        std::vector<Parameter*> params = tok.all();
        for (auto* p : fus.all()) params.push_back(p);
        return diff::gradcheck(f, params, 1e-5);
    });

    return rows;
}

void save_checkpoint(const std::string& stem, Model& model) {
    nlohmann::json config = {{"kind", "emofuse-checkpoint"}, {"run_config", model.cfg.to_json()}};
    diff::save_parameters(stem, model.all_params(), config);
}

Model load_checkpoint(const std::string& stem) {
    nlohmann::json config = diff::load_manifest_config(stem);
    if (config.value("kind", "") != "emofuse-checkpoint")
        throw std::runtime_error("not an emofuse checkpoint: " + stem);
    Model model = Model::init(RunConfig::from_json(config.at("run_config")));
    diff::load_parameters(stem, model.all_params());
    return model;
}

}  // namespace emofuse::harness
