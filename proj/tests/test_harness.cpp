#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>

#include "emofuse/train.hpp"

using namespace emofuse;
using namespace emofuse::harness;
using diff::Tensor;

namespace {

GenSpec tiny_gen(int trials = 48) {
    GenSpec spec;
    spec.n_trials = trials;
    spec.frame_size = 28;
    return spec;
}

// Small but complete configuration for fast training tests.
RunConfig tiny_run() {
    RunConfig cfg = RunConfig::desk_benchmark();
    cfg.encoder.depth = 2;
    cfg.epochs = 3;
    cfg.batch_size = 8;
    cfg.ft_epochs = 1;
    cfg.fusion_depth = 1;
    cfg.n_queries = 8;
    return cfg;
}

}  // namespace

TEST_CASE("cosine schedule endpoints, midpoint, monotonicity") {
    CHECK(cosine_lr(0, 100, 1e-3, 1e-5) == doctest::Approx(1e-3).epsilon(1e-12));
    CHECK(cosine_lr(100, 100, 1e-3, 1e-5) == doctest::Approx(1e-5).epsilon(1e-12));
    CHECK(std::abs(cosine_lr(50, 100, 1e-3, 1e-5) - (1e-3 + 1e-5) / 2.0) < 1e-12);

    double prev = cosine_lr(0, 100, 1e-3, 1e-5);
    for (int t = 1; t <= 100; ++t) {
        const double lr = cosine_lr(t, 100, 1e-3, 1e-5);
        CHECK(lr <= prev);
        prev = lr;
    }
    CHECK_THROWS_AS(cosine_lr(101, 100, 1e-3, 1e-5), std::invalid_argument);
    CHECK_THROWS_AS(cosine_lr(-1, 100, 1e-3, 1e-5), std::invalid_argument);
}

TEST_CASE("generator invariants") {
    GenSpec spec = tiny_gen(100);
    Dataset ds = gen_dataset(spec, 11);
    REQUIRE(ds.trials.size() == 100);

    std::vector<int> counts(4, 0);
    for (const auto& t : ds.trials) {
        CHECK(t.label == fusion::map_label(t.arousal, t.valence, spec.scheme));
        CHECK(t.informative_set.size() == 3);
        CHECK(t.eeg.data.rows() == 32);
        CHECK(t.eeg.data.cols() == 384);
        CHECK(t.frames.size() == 10);
        CHECK(std::abs(t.arousal - 5.0) >= spec.margin);
        CHECK(std::abs(t.valence - 5.0) >= spec.margin);
        counts[static_cast<size_t>(t.label)]++;
        // informative frames carry a bar: many bright pixels, not noise tails
        for (int f = 0; f < 10; ++f) {
            int bright = 0;
            for (double p : t.frames[static_cast<size_t>(f)].pixels)
                if (p > 0.55) ++bright;
            const bool informative = std::binary_search(t.informative_set.begin(),
                                                        t.informative_set.end(), f);
            if (informative)
                CHECK(bright >= 12);
            else
                CHECK(bright <= 8);
        }
    }
    // roughly balanced classes (binomial spread around 25)
    for (int c = 0; c < 4; ++c) CHECK(counts[static_cast<size_t>(c)] >= 10);

    // determinism of generation
    Dataset ds2 = gen_dataset(spec, 11);
    CHECK(ds2.trials[5].eeg.data == ds.trials[5].eeg.data);
    CHECK(ds2.trials[5].frames[3].pixels == ds.trials[5].frames[3].pixels);

    CHECK_THROWS_AS([&] { GenSpec bad = spec; bad.r = 11; bad.validate(); }(),
                    std::invalid_argument);
}

TEST_CASE("shuffling frames keeps informative bookkeeping consistent") {
    Dataset ds = gen_dataset(tiny_gen(4), 3);
    TrialRecord& trial = ds.trials[0];
    const auto before = trial.informative_set;

    std::vector<int> perm(10);
    std::iota(perm.begin(), perm.end(), 0);
    std::mt19937_64 rng(5);
    std::shuffle(perm.begin(), perm.end(), rng);

    auto pixels_of = trial.frames;  // copy for reference
    permute_frames(trial, perm);
    CHECK(trial.informative_set.size() == before.size());
    for (int to = 0; to < 10; ++to) {
        CHECK(trial.frames[static_cast<size_t>(to)].pixels ==
              pixels_of[static_cast<size_t>(perm[to])].pixels);
        const bool was_informative = std::binary_search(before.begin(), before.end(), perm[to]);
        const bool is_informative = std::binary_search(trial.informative_set.begin(),
                                                       trial.informative_set.end(), to);
        CHECK(was_informative == is_informative);
    }
}

TEST_CASE("artifact removal pipeline restores the clean signal") {
    GenSpec spec = tiny_gen(24);
    Dataset ds = gen_dataset(spec, 19);
    eeg::RawRecording rec = to_recording(ds);

    auto filtered = eeg::bandpass(rec, 1.0, 50.0);
    auto dec = eeg::fastica(filtered, spec.channels, 1e-5, 400, 2);
    auto flagged = eeg::identify_artifacts(dec);
    REQUIRE(!flagged.empty());
    auto cleaned = eeg::remove_components(filtered, dec, flagged);

    // correlation against the artifact-free ground truth, frontal channel
    for (int ch : {0, 1, 2}) {
        Eigen::VectorXd x = cleaned.data.row(ch).transpose();
        Eigen::VectorXd y = ds.truth.clean_eeg.row(ch).transpose();
        x.array() -= x.mean();
        y.array() -= y.mean();
        const double corr = x.dot(y) / (x.norm() * y.norm());
        CHECK(corr > 0.95);
    }

    // and the cleaned recording slots back into the dataset
    apply_cleaned_recording(ds, cleaned);
    CHECK(ds.trials[0].eeg.data == cleaned.data.leftCols(384));
}

TEST_CASE("dataset save/load round trip") {
    namespace fs_ns = std::filesystem;
    Dataset ds = gen_dataset(tiny_gen(6), 23);
    const std::string dir = (fs_ns::temp_directory_path() / "emofuse_ds_test").string();
    save_dataset(dir, ds);
    Dataset back = load_dataset(dir);
    CHECK(back.trials.size() == ds.trials.size());
    CHECK(back.trials[2].eeg.data == ds.trials[2].eeg.data);
    CHECK(back.trials[2].frames[1].pixels == ds.trials[2].frames[1].pixels);
    CHECK(back.trials[2].informative_set == ds.trials[2].informative_set);
    CHECK(back.truth.clean_eeg == ds.truth.clean_eeg);
    CHECK(back.spec.scheme == ds.spec.scheme);
    fs_ns::remove_all(dir);
}

TEST_CASE("stratified split preserves class proportions") {
    std::vector<int> labels;
    for (int c = 0; c < 4; ++c)
        for (int i = 0; i < 25 + c; ++i) labels.push_back(c);
    std::mt19937_64 rng(1);
    auto [train, test] = stratified_split(labels, 4, 0.2, rng);
    CHECK(train.size() + test.size() == labels.size());

    std::vector<int> test_counts(4, 0);
    for (int idx : test) test_counts[static_cast<size_t>(labels[static_cast<size_t>(idx)])]++;
    for (int c = 0; c < 4; ++c) {
        const double expected = 0.2 * (25 + c);
        CHECK(std::abs(test_counts[static_cast<size_t>(c)] - expected) <= 1.0);
    }
}

TEST_CASE("macro F1 matches a per-class oracle on a hand-built matrix") {
    Eigen::MatrixXi confusion(3, 3);
    confusion << 5, 2, 0, 1, 7, 1, 0, 3, 6;
    // per-class precision/recall computed directly
    double expect = 0;
    for (int c = 0; c < 3; ++c) {
        const double tp = confusion(c, c);
        const double col = confusion.col(c).sum();
        const double row = confusion.row(c).sum();
        const double p = tp / col, r = tp / row;
        expect += 2 * p * r / (p + r);
    }
    expect /= 3;
    CHECK(macro_f1_from_confusion(confusion) == doctest::Approx(expect).epsilon(1e-12));

    // perfect predictions
    Eigen::MatrixXi perfect = Eigen::MatrixXi::Zero(4, 4);
    for (int i = 0; i < 4; ++i) perfect(i, i) = 10;
    CHECK(macro_f1_from_confusion(perfect) == doctest::Approx(1.0));
}

TEST_CASE("evaluate on constant and perfect predictors") {
    // fabricated confusion checks via a tiny real model are slow; instead
    // check the arithmetic through evaluate() on a trained-free model with a
    // hand-set head is overkill -- the confusion path is already covered by
    // macro_f1; here we only check shape plumbing end to end.
    Dataset ds = gen_dataset(tiny_gen(16), 29);
    RunConfig cfg = tiny_run();
    cfg.mil = true;
    Model model = Model::init(cfg);
    std::vector<int> indices(ds.trials.size());
    std::iota(indices.begin(), indices.end(), 0);
    auto report = evaluate(model, ds, indices);
    CHECK(report.confusion.rows() == 4);
    CHECK(report.confusion.sum() == 16);
    CHECK(report.mil_precision >= 0.0);
    CHECK(report.accuracy >= 0.0);
}

TEST_CASE("training is deterministic and starts near ln(n_classes)") {
    Dataset ds = gen_dataset(tiny_gen(32), 31);
    RunConfig cfg = tiny_run();
    cfg.epochs = 2;

    auto r1 = train(cfg, ds);
    auto r2 = train(cfg, ds);
    CHECK(std::abs(r1.report.initial_loss - std::log(4.0)) < 0.1);
    REQUIRE(r1.report.epochs.size() == r2.report.epochs.size());
    for (size_t e = 0; e < r1.report.epochs.size(); ++e)
        CHECK(std::abs(r1.report.epochs[e].train_loss - r2.report.epochs[e].train_loss) < 1e-10);
    CHECK(r1.report.confusion == r2.report.confusion);
}

TEST_CASE("fusion sequence length is 1 + eeg + N regardless of K") {
    Dataset ds = gen_dataset(tiny_gen(4), 37);
    for (int k : {1, 3, 5, 10}) {
        RunConfig cfg = tiny_run();
        cfg.k_select = k;
        Model model = Model::init(cfg);
        Tensor seq = fusion::assemble(
            fusion::tokenize_eeg(ds.trials[0].eeg, model.eeg_tok),
            xattn::compress(diff::Tensor::zeros({k * cfg.encoder.out_tokens(),
                                                 cfg.encoder.out_dim()}),
                            model.bank, model.comp),
            model.fus);
        CHECK(seq.rows() == 1 + 32 + cfg.n_queries);
    }
}

TEST_CASE("checkpoint save and reload reproduces outputs") {
    namespace fs_ns = std::filesystem;
    Dataset ds = gen_dataset(tiny_gen(8), 41);
    RunConfig cfg = tiny_run();
    cfg.epochs = 1;
    auto result = train(cfg, ds);

    const std::string stem = (fs_ns::temp_directory_path() / "emofuse_ckpt_model").string();
    save_checkpoint(stem, *result.model);
    Model loaded = load_checkpoint(stem);

    Tensor a = result.model->forward(ds.trials[0]);
    Tensor b = loaded.forward(ds.trials[0]);
    CHECK(a.data() == b.data());
    fs_ns::remove(stem + ".bin");
    fs_ns::remove(stem + ".json");
}

TEST_CASE("config json round trip") {
    RunConfig cfg = RunConfig::desk_benchmark();
    cfg.scheme = fusion::LabelScheme::Deap3Valence;
    cfg.fusion_mode = FusionMode::Concat;
    cfg.mil = false;
    RunConfig back = RunConfig::from_json(cfg.to_json());
    CHECK(back.scheme == cfg.scheme);
    CHECK(back.fusion_mode == cfg.fusion_mode);
    CHECK(back.mil == cfg.mil);
    CHECK(back.encoder.embed_dim == cfg.encoder.embed_dim);
    CHECK(back.n_queries == cfg.n_queries);
}

TEST_CASE("vis_tokens reflects the MIL/CA switches") {
    RunConfig cfg = RunConfig::desk_benchmark();
    const int m = cfg.encoder.out_tokens();
    cfg.ca = true;
    CHECK(cfg.vis_tokens() == cfg.n_queries);
    cfg.ca = false;
    cfg.mil = true;
    CHECK(cfg.vis_tokens() == cfg.k_select * m);
    cfg.mil = false;
    CHECK(cfg.vis_tokens() == m);
}
