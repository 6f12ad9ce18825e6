#pragma once

// Synthetic benchmark generator with known ground truth. EEG carries the
// arousal axis through band-power modulation (theta/alpha/beta) plus noise
// and an injected blink-like artifact with a known mixing vector; frames
// carry the valence axis through an oriented bar whose tilt weakly encodes
// arousal. Exactly r of the q frames per trial are informative.

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <vector>

#include "emofuse/eeg.hpp"
#include "emofuse/fusion.hpp"
#include "emofuse/vision.hpp"

namespace emofuse::harness {

struct GenSpec {
    int n_trials = 400;
    fusion::LabelScheme scheme = fusion::LabelScheme::Deap4;
    int channels = 32;
    double fs = 128.0;
    double window_s = 3.0;  // 384 samples per trial at the defaults
    int q = 10;             // frames per bag
    int r = 3;              // informative frames per bag
    int frame_size = 28;
    int frame_channels = 1;
    int subjects = 4;
    double margin = 0.25;          // rating distance kept from the class thresholds
    double eeg_noise = 0.5;        // white noise std on every channel sample
    double artifact_amp = 6.0;     // blink bump amplitude before mixing
    double frame_noise = 0.08;     // pixel noise std
    double angle_jitter_deg = 14;  // blurs the arousal tilt, not the valence axis

    void validate() const;
    int samples() const { return static_cast<int>(fs * window_s + 0.5); }
};

struct TrialRecord {
    eeg::EEGSegment eeg;  // observed: signal + noise + artifact
    std::vector<vision::Frame> frames;
    double arousal = 5.0;
    double valence = 5.0;
    int label = 0;
    std::vector<int> informative_set;  // sorted frame indices carrying the bar
    int subject_id = 0;
};

struct GroundTruth {
    Eigen::MatrixXd clean_eeg;        // channels x (n_trials * samples), artifact-free
    Eigen::VectorXd artifact_mixing;  // channels
    Eigen::VectorXd artifact_source;  // n_trials * samples
};

struct Dataset {
    GenSpec spec;
    std::vector<TrialRecord> trials;
    GroundTruth truth;
};

Dataset gen_dataset(const GenSpec& spec, std::uint64_t seed);

// Observed EEG of all trials, concatenated into one continuous recording.
eeg::RawRecording to_recording(const Dataset& ds);

// Writes a recording of the same total length back into the per-trial
// segments (used after bandpass/ICA cleanup).
void apply_cleaned_recording(Dataset& ds, const eeg::RawRecording& cleaned);

// Reorders a trial's frames and keeps informative_set consistent.
void permute_frames(TrialRecord& trial, const std::vector<int>& perm);

void save_dataset(const std::string& dir, const Dataset& ds);
Dataset load_dataset(const std::string& dir);

}  // namespace emofuse::harness
