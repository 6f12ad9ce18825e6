#include "emofuse/eeg.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <fstream>
#include <random>
#include <set>
#include <stdexcept>

#include "json.hpp"

namespace emofuse::eeg {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using cplx = std::complex<double>;

void RawRecording::validate() const {
    if (fs <= 0.0) throw std::invalid_argument("recording: fs must be positive");
    if (data.rows() < 1) throw std::invalid_argument("recording: needs at least one channel");
    if (!data.allFinite()) throw std::invalid_argument("recording: non-finite samples");
}

// ---------------------------------------------------------------------------
// Butterworth bandpass
// ---------------------------------------------------------------------------

std::vector<Biquad> butter_bandpass_sections(int order, double lo, double hi, double fs) {
    if (!(0.0 < lo && lo < hi && hi < fs / 2.0))
        throw std::invalid_argument("bandpass: need 0 < lo < hi < fs/2, got [" +
                                    std::to_string(lo) + ", " + std::to_string(hi) +
                                    ") at fs=" + std::to_string(fs));

    // Prewarped analog edges, center and width.
    const double wl = 2.0 * fs * std::tan(M_PI * lo / fs);
    const double wh = 2.0 * fs * std::tan(M_PI * hi / fs);
    const double w0 = std::sqrt(wl * wh);
    const double bw = wh - wl;

    // Lowpass prototype poles on the unit circle, left half-plane; the
    // lowpass-to-bandpass substitution splits each into two.
    std::vector<cplx> analog_poles;
    for (int k = 0; k < order; ++k) {
        const double theta = M_PI * (2.0 * k + order + 1.0) / (2.0 * order);
        const cplx p(std::cos(theta), std::sin(theta));
        const cplx pb = p * bw;
        const cplx disc = std::sqrt(pb * pb - 4.0 * w0 * w0);
        analog_poles.push_back((pb + disc) / 2.0);
        analog_poles.push_back((pb - disc) / 2.0);
    }

    // Bilinear transform; the bandpass zeros land on z=+1 and z=-1.
    std::vector<cplx> digital_poles;
    digital_poles.reserve(analog_poles.size());
    for (const cplx& s : analog_poles) digital_poles.push_back((2.0 * fs + s) / (2.0 * fs - s));

    std::vector<cplx> upper;
    std::vector<double> reals;
    for (const cplx& p : digital_poles) {
        if (std::abs(p.imag()) < 1e-12)
            reals.push_back(p.real());
        else if (p.imag() > 0)
            upper.push_back(p);
    }
    std::sort(upper.begin(), upper.end(),
              [](const cplx& a, const cplx& b) { return a.real() < b.real(); });
    std::sort(reals.begin(), reals.end());

    std::vector<Biquad> sections;
    for (const cplx& p : upper)
        sections.push_back(Biquad{1.0, 0.0, -1.0, -2.0 * p.real(), std::norm(p)});
    for (size_t i = 0; i + 1 < reals.size(); i += 2)
        sections.push_back(
            Biquad{1.0, 0.0, -1.0, -(reals[i] + reals[i + 1]), reals[i] * reals[i + 1]});

    // Normalize gain to 1 at the digital center frequency.
    const double theta0 = 2.0 * std::atan(w0 / (2.0 * fs));
    const cplx z = std::exp(cplx(0.0, theta0));
    cplx h(1.0, 0.0);
    for (const Biquad& s : sections) {
        const cplx num = s.b0 + s.b1 / z + s.b2 / (z * z);
        const cplx den = 1.0 + s.a1 / z + s.a2 / (z * z);
        h *= num / den;
    }
    const double per_section = std::pow(1.0 / std::abs(h), 1.0 / sections.size());
    for (Biquad& s : sections) {
        s.b0 *= per_section;
        s.b1 *= per_section;
        s.b2 *= per_section;
    }
    return sections;
}

namespace {

void run_cascade(const std::vector<Biquad>& sections, VectorXd& x) {
    for (const Biquad& s : sections) {
        double z1 = 0.0, z2 = 0.0;  // direct form II transposed
        for (long i = 0; i < x.size(); ++i) {
            const double in = x[i];
            const double out = s.b0 * in + z1;
            z1 = s.b1 * in - s.a1 * out + z2;
            z2 = s.b2 * in - s.a2 * out;
            x[i] = out;
        }
    }
}

}  // namespace

VectorXd filtfilt(const std::vector<Biquad>& sections, const VectorXd& x) {
    const long n = x.size();
    if (n < 2) return x;

    // Odd reflection padding long enough to swallow the startup transient
    // of the slowest pole before the signal proper begins.
    const long pad = std::min<long>(n - 1, 1024);
    VectorXd ext(n + 2 * pad);
    for (long i = 0; i < pad; ++i) ext[i] = 2.0 * x[0] - x[pad - i];
    ext.segment(pad, n) = x;
    for (long i = 0; i < pad; ++i) ext[pad + n + i] = 2.0 * x[n - 1] - x[n - 2 - i];

    run_cascade(sections, ext);
    ext.reverseInPlace();
    run_cascade(sections, ext);
    ext.reverseInPlace();
    return ext.segment(pad, n);
}

RawRecording bandpass(const RawRecording& rec, double lo, double hi) {
    rec.validate();
    const auto sections = butter_bandpass_sections(4, lo, hi, rec.fs);
    RawRecording out = rec;
    for (int c = 0; c < rec.channels(); ++c) {
        VectorXd ch = rec.data.row(c).transpose();
        out.data.row(c) = filtfilt(sections, ch).transpose();
    }
    return out;
}

// ---------------------------------------------------------------------------
// FastICA
// ---------------------------------------------------------------------------

namespace {

// Symmetric decorrelation: W <- (W W^T)^(-1/2) W.
MatrixXd sym_decorrelate(const MatrixXd& w) {
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(w * w.transpose());
    const VectorXd inv_sqrt = es.eigenvalues().cwiseMax(1e-18).cwiseSqrt().cwiseInverse();
    return es.eigenvectors() * inv_sqrt.asDiagonal() * es.eigenvectors().transpose() * w;
}

}  // namespace

ICADecomposition fastica(const RawRecording& rec, int n_components, double tol, int max_iter,
                         std::uint64_t seed) {
    rec.validate();
    const int c = rec.channels();
    const long t = rec.samples();
    if (n_components < 1 || n_components > c)
        throw std::invalid_argument("fastica: n_components must be in [1, channels]");
    if (t < 2 * c)
        throw std::invalid_argument("fastica: too few samples for " + std::to_string(c) +
                                    " channels");

    ICADecomposition dec;
    dec.channel_means = rec.data.rowwise().mean();
    MatrixXd xc = rec.data.colwise() - dec.channel_means;

    // Whiten via covariance eigendecomposition, strongest components first.
    const MatrixXd cov = xc * xc.transpose() / static_cast<double>(t - 1);
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(cov);
    const VectorXd evals = es.eigenvalues();  // ascending
    const double floor_ev = evals[c - 1] * 1e-12;
    for (int i = 0; i < c; ++i)
        if (evals[i] <= floor_ev)
            throw std::runtime_error("fastica: covariance is rank deficient in dimension " +
                                     std::to_string(i) + " (eigenvalue " +
                                     std::to_string(evals[i]) + ")");

    MatrixXd k(n_components, c);
    MatrixXd dewhiten(c, n_components);
    for (int i = 0; i < n_components; ++i) {
        const int src = c - 1 - i;
        k.row(i) = es.eigenvectors().col(src).transpose() / std::sqrt(evals[src]);
        dewhiten.col(i) = es.eigenvectors().col(src) * std::sqrt(evals[src]);
    }
    const MatrixXd z = k * xc;  // identity covariance

    // Symmetric fixed-point iteration with the tanh nonlinearity.
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    MatrixXd w(n_components, n_components);
    for (int i = 0; i < n_components; ++i)
        for (int j = 0; j < n_components; ++j) w(i, j) = gauss(rng);
    w = sym_decorrelate(w);

    dec.converged = false;
    for (int iter = 0; iter < max_iter; ++iter) {
        const MatrixXd wz = w * z;
        const MatrixXd g = wz.array().tanh().matrix();
        const VectorXd g_prime_mean = (1.0 - g.array().square()).rowwise().mean().matrix();
        MatrixXd w_new =
            g * z.transpose() / static_cast<double>(t) - g_prime_mean.asDiagonal() * w;
        w_new = sym_decorrelate(w_new);

        double delta = 0.0;
        for (int i = 0; i < n_components; ++i)
            delta = std::max(delta, std::abs(1.0 - std::abs(w_new.row(i).dot(w.row(i)))));
        w = w_new;
        dec.iterations = iter + 1;
        if (delta < tol) {
            dec.converged = true;
            break;
        }
    }

    dec.whitener = k;
    dec.unmixing = w * k;
    dec.mixing = dewhiten * w.transpose();
    dec.sources = w * z;
    return dec;
}

std::vector<int> identify_artifacts(const ICADecomposition& dec, const Eigen::MatrixXd* refs,
                                    double kurt_thresh, double corr_thresh) {
    const int n = static_cast<int>(dec.sources.rows());
    const long t = dec.sources.cols();
    std::set<int> picked;

    for (int i = 0; i < n; ++i) {
        const auto row = dec.sources.row(i).array();
        const auto centered = row - row.mean();
        const double m2 = centered.square().mean();
        const double m4 = centered.square().square().mean();
        const double excess_kurtosis = m4 / (m2 * m2) - 3.0;
        if (std::abs(excess_kurtosis) > kurt_thresh) picked.insert(i);
    }

    if (refs != nullptr) {
        if (refs->cols() != t)
            throw std::invalid_argument("identify_artifacts: reference length mismatch");
        for (int i = 0; i < n; ++i) {
            const VectorXd s = dec.sources.row(i).transpose();
            const VectorXd sc = s.array() - s.mean();
            const double s_norm = sc.norm();
            for (int r = 0; r < refs->rows(); ++r) {
                const VectorXd ref = refs->row(r).transpose();
                const VectorXd rc = ref.array() - ref.mean();
                const double denom = s_norm * rc.norm();
                if (denom <= 0) continue;
                if (std::abs(sc.dot(rc) / denom) > corr_thresh) picked.insert(i);
            }
        }
    }
    return {picked.begin(), picked.end()};
}

RawRecording remove_components(const RawRecording& rec, const ICADecomposition& dec,
                               const std::vector<int>& indices) {
    const int n = static_cast<int>(dec.sources.rows());
    for (int i : indices)
        if (i < 0 || i >= n)
            throw std::invalid_argument("remove_components: index " + std::to_string(i) +
                                        " out of " + std::to_string(n) + " components");
    MatrixXd masked = dec.sources;
    for (int i : indices) masked.row(i).setZero();
    RawRecording out = rec;
    out.data = dec.mixing * masked;
    out.data.colwise() += dec.channel_means;
    return out;
}

// ---------------------------------------------------------------------------
// Segmentation
// ---------------------------------------------------------------------------

std::vector<EEGSegment> segment(const RawRecording& rec, double window_s) {
    rec.validate();
    const double exact = rec.fs * window_s;
    const long win = std::lround(exact);
    if (std::abs(exact - static_cast<double>(win)) > 1e-9 || win < 1)
        throw std::invalid_argument("segment: fs * window_s must be a positive integer");

    std::vector<EEGSegment> out;
    const long count = rec.samples() / win;
    out.reserve(static_cast<size_t>(count));
    for (long i = 0; i < count; ++i) {
        EEGSegment seg;
        seg.data = rec.data.middleCols(i * win, win);
        seg.window_index = static_cast<int>(i);
        out.push_back(std::move(seg));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Recording I/O
// ---------------------------------------------------------------------------

void save_recording(const std::string& stem, const RawRecording& rec) {
    rec.validate();
    std::ofstream bin(stem + ".bin", std::ios::binary | std::ios::trunc);
    if (!bin) throw std::runtime_error("cannot write " + stem + ".bin");
    for (int c = 0; c < rec.channels(); ++c) {
        const VectorXd row = rec.data.row(c).transpose();
        bin.write(reinterpret_cast<const char*>(row.data()),
                  static_cast<std::streamsize>(sizeof(double) * row.size()));
    }
    bin.close();

    nlohmann::json manifest = {{"format", "emofuse-recording-v1"},
                               {"dtype", "float64-le"},
                               {"channels", rec.channels()},
                               {"samples", rec.samples()},
                               {"fs", rec.fs},
                               {"channel_names", rec.channel_names}};
    std::ofstream mf(stem + ".json", std::ios::trunc);
    if (!mf) throw std::runtime_error("cannot write " + stem + ".json");
    mf << manifest.dump(2) << '\n';
}

RawRecording load_recording(const std::string& stem) {
    std::ifstream mf(stem + ".json");
    if (!mf) throw std::runtime_error("cannot open " + stem + ".json");
    nlohmann::json manifest = nlohmann::json::parse(mf);
    if (manifest.value("format", "") != "emofuse-recording-v1")
        throw std::runtime_error(stem + ".json: unknown recording format");

    RawRecording rec;
    const int channels = manifest.at("channels").get<int>();
    const long samples = manifest.at("samples").get<long>();
    rec.fs = manifest.at("fs").get<double>();
    rec.channel_names = manifest.value("channel_names", std::vector<std::string>{});
    rec.data.resize(channels, samples);

    std::ifstream bin(stem + ".bin", std::ios::binary);
    if (!bin) throw std::runtime_error("cannot open " + stem + ".bin");
    std::vector<double> row(static_cast<size_t>(samples));
    for (int c = 0; c < channels; ++c) {
        bin.read(reinterpret_cast<char*>(row.data()),
                 static_cast<std::streamsize>(sizeof(double) * samples));
        if (!bin) throw std::runtime_error("short read in " + stem + ".bin");
        for (long i = 0; i < samples; ++i) rec.data(c, i) = row[static_cast<size_t>(i)];
    }
    rec.validate();
    return rec;
}

}  // namespace emofuse::eeg
