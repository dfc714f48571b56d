#include "revblind/spectral.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstring>
#include <fstream>

#include "revblind/fft.hpp"

namespace revblind {

namespace {

constexpr double kPi = 3.14159265358979323846;

double hz_to_mel(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }
double mel_to_hz(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

} // namespace

MelFilterbank MelFilterbank::make(int n_mels, int window_length, double sample_rate) {
    if (n_mels < 1 || window_length < 2) {
        throw ValueError("MelFilterbank: invalid dimensions");
    }
    MelFilterbank fb;
    fb.n_mels = n_mels;
    fb.n_bins = window_length / 2 + 1;
    fb.weights.assign(static_cast<std::size_t>(n_mels) * fb.n_bins, 0.0);

    const double nyquist = sample_rate / 2.0;
    const double mel_max = hz_to_mel(nyquist);
    fb.band_edges_hz.resize(n_mels + 2);
    for (int i = 0; i < n_mels + 2; ++i) {
        fb.band_edges_hz[i] = mel_to_hz(mel_max * i / (n_mels + 1));
    }

    const double bin_hz = sample_rate / window_length;
    for (int m = 0; m < n_mels; ++m) {
        const double lo = fb.band_edges_hz[m];
        const double mid = fb.band_edges_hz[m + 1];
        const double hi = fb.band_edges_hz[m + 2];
        bool any = false;
        for (int k = 0; k < fb.n_bins; ++k) {
            const double f = k * bin_hz;
            double w = 0.0;
            if (f > lo && f < mid) {
                w = (f - lo) / (mid - lo);
            } else if (f == mid) {
                w = 1.0;
            } else if (f > mid && f < hi) {
                w = (hi - f) / (hi - mid);
            }
            if (w > 0.0) any = true;
            fb.weights[static_cast<std::size_t>(m) * fb.n_bins + k] = w;
        }
        if (!any) {
            // Triangle narrower than the bin grid: keep the filter non-empty.
            int nearest = static_cast<int>(std::lrint(mid / bin_hz));
            nearest = std::clamp(nearest, 0, fb.n_bins - 1);
            fb.weights[static_cast<std::size_t>(m) * fb.n_bins + nearest] = 1.0;
        }
    }
    return fb;
}

Matrix stft_magnitude(const SampleBuffer& x, const StftConfig& cfg) {
    validate(x, "stft_magnitude");
    if (cfg.hop <= 0 || cfg.hop > cfg.window_length) {
        throw ValueError("stft_magnitude: require 0 < hop <= window_length");
    }
    const int win = cfg.window_length;
    const auto n = static_cast<long long>(x.samples.size());
    if (n < win) {
        throw ValueError("stft_magnitude: input shorter than one window (" + std::to_string(n) +
                         " < " + std::to_string(win) + ")");
    }
    const int frames = 1 + static_cast<int>((n - win) / cfg.hop);
    const int bins = win / 2 + 1;

    std::vector<double> window(win, 1.0);
    if (cfg.window == Window::hann) {
        for (int i = 0; i < win; ++i) {
            window[i] = 0.5 * (1.0 - std::cos(2.0 * kPi * i / win));
        }
    }

    Matrix out(bins, frames);
    std::vector<std::complex<double>> frame(static_cast<std::size_t>(next_pow2(win)));
    for (int t = 0; t < frames; ++t) {
        const std::size_t off = static_cast<std::size_t>(t) * cfg.hop;
        std::fill(frame.begin(), frame.end(), std::complex<double>(0.0, 0.0));
        for (int i = 0; i < win; ++i) {
            frame[i] = {x.samples[off + i] * window[i], 0.0};
        }
        fft_inplace(frame, false);
        for (int k = 0; k < bins; ++k) {
            out.at(k, t) = std::abs(frame[k]);
        }
    }
    return out;
}

Matrix mel_project(const Matrix& S, const MelFilterbank& fb) {
    if (S.rows != fb.n_bins) {
        throw ValueError("mel_project: expected " + std::to_string(fb.n_bins) + " rows, got " +
                         std::to_string(S.rows));
    }
    Matrix out(fb.n_mels, S.cols);
    for (int m = 0; m < fb.n_mels; ++m) {
        for (int k = 0; k < fb.n_bins; ++k) {
            const double w = fb.weight(m, k);
            if (w == 0.0) continue;
            const double* src = &S.v[static_cast<std::size_t>(k) * S.cols];
            double* dst = &out.v[static_cast<std::size_t>(m) * S.cols];
            for (int t = 0; t < S.cols; ++t) dst[t] += w * src[t];
        }
    }
    return out;
}

Matrix log_compress(const Matrix& S, double floor) {
    if (!(floor > 0.0)) {
        throw ValueError("log_compress: floor must be positive");
    }
    Matrix out(S.rows, S.cols);
    for (std::size_t i = 0; i < S.v.size(); ++i) {
        out.v[i] = 20.0 * std::log10(std::max(S.v[i], floor));
    }
    return out;
}

MelSpectrogram standardize(const MelSpectrogram& m) {
    MelSpectrogram out = m;
    const std::size_t n = out.values.v.size();
    if (n == 0) return out;
    double mean = 0.0;
    for (double v : out.values.v) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : out.values.v) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    const double sd = std::sqrt(var);
    if (sd < 1e-12) {
        std::fill(out.values.v.begin(), out.values.v.end(), 0.0);
        return out;
    }
    for (double& v : out.values.v) v = (v - mean) / sd;
    return out;
}

int FrontendConfig::rir_frames(double sample_rate) const {
    const int len = static_cast<int>(std::lrint(rir_duration_s * sample_rate));
    return 1 + (len - window_length) / rir_hop;
}

int FrontendConfig::speech_frames(int n_samples) const {
    return 1 + (n_samples - window_length) / speech_hop;
}

SpectralFrontend::SpectralFrontend(FrontendConfig cfg, double sample_rate)
    : cfg_(cfg), sample_rate_(sample_rate),
      fb_(MelFilterbank::make(cfg.n_mels, cfg.window_length, sample_rate)) {
    if (cfg_.rir_duration_s * sample_rate_ < cfg_.window_length) {
        throw ValueError("SpectralFrontend: RIR analysis duration shorter than one window");
    }
}

MelSpectrogram SpectralFrontend::rir_to_melspec(const SampleBuffer& h) const {
    SampleBuffer norm = peak_normalize(h);
    const auto target = static_cast<std::size_t>(std::lrint(cfg_.rir_duration_s * sample_rate_));
    norm.samples.resize(target, 0.0);

    StftConfig stft{cfg_.window_length, cfg_.rir_hop, cfg_.window};
    MelSpectrogram out;
    out.values = log_compress(mel_project(stft_magnitude(norm, stft), fb_), cfg_.log_floor);
    out.kind = SpecKind::rir;
    out.frame_hop = cfg_.rir_hop;
    return out;
}

MelSpectrogram SpectralFrontend::speech_to_melspec(const SampleBuffer& y) const {
    StftConfig stft{cfg_.window_length, cfg_.speech_hop, cfg_.window};
    MelSpectrogram out;
    out.values = log_compress(mel_project(stft_magnitude(y, stft), fb_), cfg_.log_floor);
    out.kind = SpecKind::speech;
    out.frame_hop = cfg_.speech_hop;
    return standardize(out);
}

namespace {
constexpr char kMelMagic[8] = {'R', 'B', 'M', 'E', 'L', '0', '0', '1'};

template <class T>
void append_le(std::vector<unsigned char>& out, T v) {
    unsigned char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.insert(out.end(), buf, buf + sizeof(T));
}
} // namespace

std::vector<unsigned char> melspec_to_bytes(const MelSpectrogram& m) {
    std::vector<unsigned char> out;
    out.reserve(sizeof(kMelMagic) + 13 + m.values.v.size() * 4);
    out.insert(out.end(), kMelMagic, kMelMagic + sizeof(kMelMagic));
    append_le<std::uint32_t>(out, static_cast<std::uint32_t>(m.values.rows));
    append_le<std::uint32_t>(out, static_cast<std::uint32_t>(m.values.cols));
    append_le<std::uint32_t>(out, static_cast<std::uint32_t>(m.frame_hop));
    out.push_back(static_cast<unsigned char>(m.kind));
    for (double v : m.values.v) {
        append_le<float>(out, static_cast<float>(v));
    }
    return out;
}

MelSpectrogram melspec_from_bytes(const std::vector<unsigned char>& bytes) {
    const std::size_t header = sizeof(kMelMagic) + 13;
    if (bytes.size() < header || std::memcmp(bytes.data(), kMelMagic, sizeof(kMelMagic)) != 0) {
        throw IoError("melspec: bad header");
    }
    auto u32 = [&](std::size_t off) {
        std::uint32_t v;
        std::memcpy(&v, bytes.data() + off, 4);
        return v;
    };
    MelSpectrogram m;
    const int rows = static_cast<int>(u32(sizeof(kMelMagic)));
    const int cols = static_cast<int>(u32(sizeof(kMelMagic) + 4));
    m.frame_hop = static_cast<int>(u32(sizeof(kMelMagic) + 8));
    const unsigned char kind = bytes[sizeof(kMelMagic) + 12];
    if (kind > 1) throw IoError("melspec: bad kind byte");
    m.kind = static_cast<SpecKind>(kind);
    const std::size_t count = static_cast<std::size_t>(rows) * cols;
    if (bytes.size() != header + count * 4) throw IoError("melspec: truncated payload");
    m.values = Matrix(rows, cols);
    for (std::size_t i = 0; i < count; ++i) {
        float f;
        std::memcpy(&f, bytes.data() + header + i * 4, 4);
        m.values.v[i] = static_cast<double>(f);
    }
    return m;
}

void write_melspec(const std::string& path, const MelSpectrogram& m) {
    const auto bytes = melspec_to_bytes(m);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("write_melspec: cannot open " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write_melspec: write failed: " + path);
}

MelSpectrogram read_melspec(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("read_melspec: cannot open " + path);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return melspec_from_bytes(bytes);
}

} // namespace revblind
