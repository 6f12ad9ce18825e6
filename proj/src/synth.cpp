#include "emofuse/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>

#include "json.hpp"

namespace emofuse::harness {

using Eigen::MatrixXd;
using Eigen::VectorXd;

void GenSpec::validate() const {
    if (n_trials < 1) throw std::invalid_argument("gen: need at least one trial");
    if (r > q || r < 0 || q < 1)
        throw std::invalid_argument("gen: informative count r must satisfy 0 <= r <= q");
    if (channels < 2) throw std::invalid_argument("gen: need at least two channels");
    if (frame_size < 8) throw std::invalid_argument("gen: frame size too small");
    if (subjects < 1) throw std::invalid_argument("gen: need at least one subject");
    if (margin < 0 || margin >= 1.5) throw std::invalid_argument("gen: unreasonable margin");
    const double exact = fs * window_s;
    if (std::abs(exact - std::round(exact)) > 1e-9)
        throw std::invalid_argument("gen: fs * window_s must be an integer");
}

namespace {

// Ratings are sampled away from every decision boundary of the scheme so
// labels stay unambiguous under small perturbations.
std::vector<double> scheme_thresholds(fusion::LabelScheme scheme) {
    switch (scheme) {
        case fusion::LabelScheme::Deap3Arousal:
        case fusion::LabelScheme::Deap3Valence:
            return {4.0, 7.0};
        default:
            return {5.0};
    }
}

double sample_rating(std::mt19937_64& rng, const std::vector<double>& thresholds,
                     double margin) {
    std::uniform_real_distribution<double> uni(1.0, 9.0);
    for (;;) {
        const double s = uni(rng);
        bool clear = true;
        for (double t : thresholds) clear = clear && std::abs(s - t) >= margin;
        if (clear) return s;
    }
}

struct BandSpec {
    double lo, hi;
};

constexpr BandSpec kTheta{4.0, 8.0};
constexpr BandSpec kAlpha{8.0, 13.0};
constexpr BandSpec kBeta{13.0, 30.0};

// Oscillators are drawn once per dataset; trials only jitter phase and
// amplitude. Keeping the carriers fixed is what makes band power readable
// from raw samples by the per-channel tokenizer.
struct BandOscillator {
    double f1, f2, ph1, ph2;

    static BandOscillator draw(const BandSpec& band, std::mt19937_64& rng) {
        std::uniform_real_distribution<double> freq(band.lo, band.hi);
        std::uniform_real_distribution<double> phase(0.0, 2.0 * M_PI);
        return {freq(rng), freq(rng), phase(rng), phase(rng)};
    }

    VectorXd wave(int samples, double fs, std::mt19937_64& rng) const {
        std::normal_distribution<double> jitter(0.0, 0.25);
        std::uniform_real_distribution<double> amp(0.9, 1.1);
        VectorXd out(samples);
        const double j1 = jitter(rng), j2 = jitter(rng);
        const double a1 = amp(rng), a2 = amp(rng);
        for (int i = 0; i < samples; ++i) {
            const double t = 2.0 * M_PI * i / fs;
            out[i] = a1 * std::sin(f1 * t + ph1 + j1) + a2 * std::sin(f2 * t + ph2 + j2);
        }
        return out;
    }
};

vision::Frame render_frame(const GenSpec& spec, bool informative, double arousal,
                           double valence, std::mt19937_64& rng) {
    vision::Frame f;
    f.height = f.width = spec.frame_size;
    f.channels = spec.frame_channels;
    f.pixels.assign(static_cast<size_t>(f.height) * f.width * f.channels, 0.0);

    std::normal_distribution<double> noise(0.0, spec.frame_noise);
    const double bg = 0.25;

    if (informative) {
        // valence picks the coarse orientation, arousal a +-22.5 degree tilt
        std::normal_distribution<double> jitter(0.0, spec.angle_jitter_deg);
        const double base = valence >= 5.0 ? 90.0 : 0.0;
        const double tilt = arousal >= 5.0 ? 22.5 : -22.5;
        const double theta = (base + tilt + jitter(rng)) * M_PI / 180.0;
        std::uniform_real_distribution<double> contrast_d(0.5, 0.8);
        std::uniform_real_distribution<double> offset(-2.0, 2.0);
        const double contrast = contrast_d(rng);
        const double cx = 0.5 * (f.width - 1) + offset(rng);
        const double cy = 0.5 * (f.height - 1) + offset(rng);
        const double half_len = 0.38 * spec.frame_size;
        const double dir_x = std::cos(theta), dir_y = std::sin(theta);

        for (int r = 0; r < f.height; ++r)
            for (int c = 0; c < f.width; ++c) {
                const double dx = c - cx, dy = r - cy;
                const double along = dx * dir_x + dy * dir_y;
                const double perp = -dx * dir_y + dy * dir_x;
                double v = bg;
                if (std::abs(along) <= half_len)
                    v += contrast * std::exp(-0.5 * (perp / 1.3) * (perp / 1.3));
                for (int ch = 0; ch < f.channels; ++ch)
                    f.pixels[(static_cast<size_t>(r) * f.width + c) * f.channels + ch] = v;
            }
    } else {
        for (auto& p : f.pixels) p = bg;
    }
    for (auto& p : f.pixels) p = std::clamp(p + noise(rng), 0.0, 1.0);
    return f;
}

}  // namespace

Dataset gen_dataset(const GenSpec& spec, std::uint64_t seed) {
    spec.validate();
    std::mt19937_64 rng(seed);
    const int t = spec.samples();
    const int c = spec.channels;

    Dataset ds;
    ds.spec = spec;
    ds.trials.reserve(static_cast<size_t>(spec.n_trials));
    ds.truth.clean_eeg.resize(c, static_cast<long>(spec.n_trials) * t);
    ds.truth.artifact_source = VectorXd::Zero(static_cast<long>(spec.n_trials) * t);

    // Dataset-level spatial structure: zero-mean unit band patterns so that
    // naive channel averaging destroys the band signal, and a frontal-heavy
    // artifact mixing vector.
    std::normal_distribution<double> gauss(0.0, 1.0);
    auto pattern = [&]() {
        VectorXd p(c);
        for (int i = 0; i < c; ++i) p[i] = gauss(rng);
        p.array() -= p.mean();
        return VectorXd(p / p.norm() * std::sqrt(static_cast<double>(c)));
    };
    const VectorXd p_theta = pattern();
    const VectorXd p_alpha = pattern();
    const VectorXd p_beta = pattern();
    const BandOscillator osc_theta = BandOscillator::draw(kTheta, rng);
    const BandOscillator osc_alpha = BandOscillator::draw(kAlpha, rng);
    const BandOscillator osc_beta = BandOscillator::draw(kBeta, rng);
    VectorXd mixing(c);
    for (int i = 0; i < c; ++i) mixing[i] = std::exp(-i / 4.0) + 0.05;
    ds.truth.artifact_mixing = mixing;

    const auto thresholds = scheme_thresholds(spec.scheme);
    std::poisson_distribution<int> blink_count(1.2);
    std::uniform_real_distribution<double> blink_pos(0.08, 0.92);
    std::uniform_real_distribution<double> blink_amp(0.8, 1.2);

    for (int trial = 0; trial < spec.n_trials; ++trial) {
        TrialRecord rec;
        rec.subject_id = trial % spec.subjects;
        rec.arousal = sample_rating(rng, thresholds, spec.margin);
        rec.valence = sample_rating(rng, thresholds, spec.margin);
        rec.label = fusion::map_label(rec.arousal, rec.valence, spec.scheme);

        // band powers: beta up / alpha down with arousal, weak theta-valence leak
        const double a_norm = (rec.arousal - 5.0) / 4.0;
        const double v_norm = (rec.valence - 5.0) / 4.0;
        const double amp_beta = 1.0 + 0.75 * a_norm;
        const double amp_alpha = 1.0 - 0.5 * a_norm;
        const double amp_theta = 1.0 + 0.35 * v_norm;

        MatrixXd clean = amp_theta * p_theta * osc_theta.wave(t, spec.fs, rng).transpose() +
                         amp_alpha * p_alpha * osc_alpha.wave(t, spec.fs, rng).transpose() +
                         amp_beta * p_beta * osc_beta.wave(t, spec.fs, rng).transpose();
        for (int i = 0; i < c; ++i)
            for (int s = 0; s < t; ++s) clean(i, s) += spec.eeg_noise * gauss(rng);

        VectorXd artifact = VectorXd::Zero(t);
        const int blinks = blink_count(rng);
        for (int b = 0; b < blinks; ++b) {
            const double center = blink_pos(rng) * t;
            const double amp = blink_amp(rng) * spec.artifact_amp;
            const double width = 0.06 * spec.fs;
            for (int s = 0; s < t; ++s) {
                const double u = (s - center) / width;
                artifact[s] += amp * std::exp(-0.5 * u * u);
            }
        }

        rec.eeg.data = clean + mixing * artifact.transpose();
        rec.eeg.trial_id = trial;
        rec.eeg.window_index = trial;
        ds.truth.clean_eeg.middleCols(static_cast<long>(trial) * t, t) = clean;
        ds.truth.artifact_source.segment(static_cast<long>(trial) * t, t) = artifact;

        // informative frame subset
        std::vector<int> order(static_cast<size_t>(spec.q));
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);
        rec.informative_set.assign(order.begin(), order.begin() + spec.r);
        std::sort(rec.informative_set.begin(), rec.informative_set.end());

        rec.frames.reserve(static_cast<size_t>(spec.q));
        for (int idx = 0; idx < spec.q; ++idx) {
            const bool informative =
                std::binary_search(rec.informative_set.begin(), rec.informative_set.end(), idx);
            vision::Frame f = render_frame(spec, informative, rec.arousal, rec.valence, rng);
            f.frame_index = idx;
            rec.frames.push_back(std::move(f));
        }
        ds.trials.push_back(std::move(rec));
    }
    return ds;
}

eeg::RawRecording to_recording(const Dataset& ds) {
    const int t = ds.spec.samples();
    eeg::RawRecording rec;
    rec.fs = ds.spec.fs;
    rec.data.resize(ds.spec.channels, static_cast<long>(ds.trials.size()) * t);
    for (size_t i = 0; i < ds.trials.size(); ++i)
        rec.data.middleCols(static_cast<long>(i) * t, t) = ds.trials[i].eeg.data;
    for (int c = 0; c < ds.spec.channels; ++c) rec.channel_names.push_back("ch" + std::to_string(c));
    return rec;
}

void apply_cleaned_recording(Dataset& ds, const eeg::RawRecording& cleaned) {
    const int t = ds.spec.samples();
    if (cleaned.data.rows() != ds.spec.channels ||
        cleaned.data.cols() != static_cast<long>(ds.trials.size()) * t)
        throw std::invalid_argument("apply_cleaned_recording: shape mismatch");
    for (size_t i = 0; i < ds.trials.size(); ++i)
        ds.trials[i].eeg.data = cleaned.data.middleCols(static_cast<long>(i) * t, t);
}

void permute_frames(TrialRecord& trial, const std::vector<int>& perm) {
    const int q = static_cast<int>(trial.frames.size());
    if (static_cast<int>(perm.size()) != q)
        throw std::invalid_argument("permute_frames: permutation size mismatch");
    std::vector<vision::Frame> frames(static_cast<size_t>(q));
    std::vector<int> informative;
    for (int to = 0; to < q; ++to) {
        frames[to] = trial.frames[perm[to]];
        frames[to].frame_index = to;
        if (std::binary_search(trial.informative_set.begin(), trial.informative_set.end(),
                               perm[to]))
            informative.push_back(to);
    }
    std::sort(informative.begin(), informative.end());
    trial.frames = std::move(frames);
    trial.informative_set = std::move(informative);
}

// ---------------------------------------------------------------------------
// Dataset I/O: manifest.json + eeg.bin + frames.bin + truth.bin
// ---------------------------------------------------------------------------

namespace {

void write_doubles(std::ofstream& out, const double* data, size_t count) {
    out.write(reinterpret_cast<const char*>(data),
              static_cast<std::streamsize>(count * sizeof(double)));
}

void read_doubles(std::ifstream& in, double* data, size_t count) {
    in.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(count * sizeof(double)));
    if (!in) throw std::runtime_error("dataset: short read");
}

}  // namespace

void save_dataset(const std::string& dir, const Dataset& ds) {
    namespace fs_ns = std::filesystem;
    fs_ns::create_directories(dir);
    const int t = ds.spec.samples();
    const int c = ds.spec.channels;

    nlohmann::json trials = nlohmann::json::array();
    std::ofstream eeg_bin(dir + "/eeg.bin", std::ios::binary | std::ios::trunc);
    std::ofstream frames_bin(dir + "/frames.bin", std::ios::binary | std::ios::trunc);
    if (!eeg_bin || !frames_bin) throw std::runtime_error("cannot write dataset binaries");

    for (const auto& trial : ds.trials) {
        for (int ch = 0; ch < c; ++ch) {
            const Eigen::VectorXd row = trial.eeg.data.row(ch).transpose();
            write_doubles(eeg_bin, row.data(), static_cast<size_t>(t));
        }
        for (const auto& f : trial.frames) write_doubles(frames_bin, f.pixels.data(), f.pixels.size());
        trials.push_back({{"arousal", trial.arousal},
                          {"valence", trial.valence},
                          {"label", trial.label},
                          {"subject", trial.subject_id},
                          {"informative", trial.informative_set}});
    }

    std::ofstream truth_bin(dir + "/truth.bin", std::ios::binary | std::ios::trunc);
    for (int ch = 0; ch < c; ++ch) {
        const Eigen::VectorXd row = ds.truth.clean_eeg.row(ch).transpose();
        write_doubles(truth_bin, row.data(), static_cast<size_t>(row.size()));
    }
    write_doubles(truth_bin, ds.truth.artifact_source.data(),
                  static_cast<size_t>(ds.truth.artifact_source.size()));

    nlohmann::json manifest = {
        {"format", "emofuse-dataset-v1"},
        {"spec",
         {{"n_trials", ds.spec.n_trials},
          {"scheme", fusion::scheme_name(ds.spec.scheme)},
          {"channels", ds.spec.channels},
          {"fs", ds.spec.fs},
          {"window_s", ds.spec.window_s},
          {"q", ds.spec.q},
          {"r", ds.spec.r},
          {"frame_size", ds.spec.frame_size},
          {"frame_channels", ds.spec.frame_channels},
          {"subjects", ds.spec.subjects},
          {"margin", ds.spec.margin},
          {"eeg_noise", ds.spec.eeg_noise},
          {"artifact_amp", ds.spec.artifact_amp},
          {"frame_noise", ds.spec.frame_noise},
          {"angle_jitter_deg", ds.spec.angle_jitter_deg}}},
        {"artifact_mixing",
         std::vector<double>(ds.truth.artifact_mixing.data(),
                             ds.truth.artifact_mixing.data() + ds.truth.artifact_mixing.size())},
        {"trials", trials}};
    std::ofstream mf(dir + "/manifest.json", std::ios::trunc);
    if (!mf) throw std::runtime_error("cannot write dataset manifest");
    mf << manifest.dump(2) << '\n';
}

Dataset load_dataset(const std::string& dir) {
    std::ifstream mf(dir + "/manifest.json");
    if (!mf) throw std::runtime_error("cannot open " + dir + "/manifest.json");
    nlohmann::json manifest = nlohmann::json::parse(mf);
    if (manifest.value("format", "") != "emofuse-dataset-v1")
        throw std::runtime_error("unknown dataset format in " + dir);

    Dataset ds;
    const auto& js = manifest.at("spec");
    ds.spec.n_trials = js.at("n_trials").get<int>();
    ds.spec.scheme = fusion::scheme_from_name(js.at("scheme").get<std::string>());
    ds.spec.channels = js.at("channels").get<int>();
    ds.spec.fs = js.at("fs").get<double>();
    ds.spec.window_s = js.at("window_s").get<double>();
    ds.spec.q = js.at("q").get<int>();
    ds.spec.r = js.at("r").get<int>();
    ds.spec.frame_size = js.at("frame_size").get<int>();
    ds.spec.frame_channels = js.at("frame_channels").get<int>();
    ds.spec.subjects = js.at("subjects").get<int>();
    ds.spec.margin = js.at("margin").get<double>();
    ds.spec.eeg_noise = js.at("eeg_noise").get<double>();
    ds.spec.artifact_amp = js.at("artifact_amp").get<double>();
    ds.spec.frame_noise = js.at("frame_noise").get<double>();
    ds.spec.angle_jitter_deg = js.at("angle_jitter_deg").get<double>();
    ds.spec.validate();

    const int t = ds.spec.samples();
    const int c = ds.spec.channels;
    const auto mixing = manifest.at("artifact_mixing").get<std::vector<double>>();
    ds.truth.artifact_mixing =
        Eigen::Map<const Eigen::VectorXd>(mixing.data(), static_cast<long>(mixing.size()));

    std::ifstream eeg_bin(dir + "/eeg.bin", std::ios::binary);
    std::ifstream frames_bin(dir + "/frames.bin", std::ios::binary);
    std::ifstream truth_bin(dir + "/truth.bin", std::ios::binary);
    if (!eeg_bin || !frames_bin || !truth_bin)
        throw std::runtime_error("missing dataset binaries in " + dir);

    const size_t frame_numel = static_cast<size_t>(ds.spec.frame_size) * ds.spec.frame_size *
                               ds.spec.frame_channels;
    std::vector<double> row(static_cast<size_t>(t));
    for (const auto& jt : manifest.at("trials")) {
        TrialRecord trial;
        trial.arousal = jt.at("arousal").get<double>();
        trial.valence = jt.at("valence").get<double>();
        trial.label = jt.at("label").get<int>();
        trial.subject_id = jt.at("subject").get<int>();
        trial.informative_set = jt.at("informative").get<std::vector<int>>();
        trial.eeg.data.resize(c, t);
        trial.eeg.trial_id = static_cast<long>(ds.trials.size());
        trial.eeg.window_index = static_cast<int>(ds.trials.size());
        for (int ch = 0; ch < c; ++ch) {
            read_doubles(eeg_bin, row.data(), row.size());
            for (int s = 0; s < t; ++s) trial.eeg.data(ch, s) = row[static_cast<size_t>(s)];
        }
        for (int fidx = 0; fidx < ds.spec.q; ++fidx) {
            vision::Frame f;
            f.height = f.width = ds.spec.frame_size;
            f.channels = ds.spec.frame_channels;
            f.frame_index = fidx;
            f.pixels.resize(frame_numel);
            read_doubles(frames_bin, f.pixels.data(), frame_numel);
            trial.frames.push_back(std::move(f));
        }
        ds.trials.push_back(std::move(trial));
    }
    if (static_cast<int>(ds.trials.size()) != ds.spec.n_trials)
        throw std::runtime_error("dataset manifest trial count mismatch");

    const long total = static_cast<long>(ds.spec.n_trials) * t;
    ds.truth.clean_eeg.resize(c, total);
    std::vector<double> long_row(static_cast<size_t>(total));
    for (int ch = 0; ch < c; ++ch) {
        read_doubles(truth_bin, long_row.data(), long_row.size());
        for (long s = 0; s < total; ++s) ds.truth.clean_eeg(ch, s) = long_row[static_cast<size_t>(s)];
    }
    ds.truth.artifact_source.resize(total);
    read_doubles(truth_bin, ds.truth.artifact_source.data(), static_cast<size_t>(total));
    return ds;
}

}  // namespace emofuse::harness
