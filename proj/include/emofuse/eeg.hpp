#pragma once

// EEG preprocessing: zero-phase Butterworth bandpass, FastICA blind source
// separation with kurtosis/correlation artifact picks, and fixed-length
// windowing. Everything operates on channels x samples double matrices.

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <vector>

namespace emofuse::eeg {

struct RawRecording {
    Eigen::MatrixXd data;  // channels x samples, microvolts
    double fs = 0.0;       // Hz
    std::vector<std::string> channel_names;

    int channels() const { return static_cast<int>(data.rows()); }
    long samples() const { return static_cast<long>(data.cols()); }
    void validate() const;
};

struct ICADecomposition {
    // sources = unmixing * (X - channel_means); X ~ mixing * sources + means.
    // The whitener is folded into `unmixing`, and kept separately as well.
    Eigen::MatrixXd unmixing;  // n_components x channels
    Eigen::MatrixXd mixing;    // channels x n_components
    Eigen::MatrixXd sources;   // n_components x samples, unit variance rows
    Eigen::MatrixXd whitener;  // n_components x channels
    Eigen::VectorXd channel_means;
    bool converged = true;
    int iterations = 0;
};

struct EEGSegment {
    Eigen::MatrixXd data;  // channels x (fs * window_s)
    int window_index = 0;
    long trial_id = 0;
};

// Order-4 Butterworth bandpass (8 poles), applied forward then backward so
// the net filter has zero phase. Band edges in Hz, 0 < lo < hi < fs/2.
RawRecording bandpass(const RawRecording& rec, double lo = 1.0, double hi = 50.0);

// Symmetric fixed-point FastICA with the logcosh (tanh) contrast on
// covariance-whitened data. Non-convergence flags the result but still
// returns the last iterate.
ICADecomposition fastica(const RawRecording& rec, int n_components, double tol = 1e-4,
                         int max_iter = 200, std::uint64_t seed = 0);

// Components with |excess kurtosis| above `kurt_thresh`, plus components
// whose absolute Pearson correlation with any row of `ref_channels`
// exceeds `corr_thresh`. Sorted, may be empty.
std::vector<int> identify_artifacts(const ICADecomposition& dec,
                                    const Eigen::MatrixXd* ref_channels = nullptr,
                                    double kurt_thresh = 5.0, double corr_thresh = 0.7);

// Reconstruction with the given source rows zeroed.
RawRecording remove_components(const RawRecording& rec, const ICADecomposition& dec,
                               const std::vector<int>& indices);

// Non-overlapping consecutive windows; a trailing partial window is dropped.
std::vector<EEGSegment> segment(const RawRecording& rec, double window_s = 3.0);

// --- low-level filter pieces, exposed for the response tests ---

struct Biquad {
    double b0, b1, b2;  // numerator
    double a1, a2;      // denominator (a0 normalized to 1)
};

std::vector<Biquad> butter_bandpass_sections(int order, double lo, double hi, double fs);
Eigen::VectorXd filtfilt(const std::vector<Biquad>& sections, const Eigen::VectorXd& x);

// --- recording I/O: <stem>.bin (row-major float64-le) + <stem>.json ---

void save_recording(const std::string& stem, const RawRecording& rec);
RawRecording load_recording(const std::string& stem);

}  // namespace emofuse::eeg
