#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "revblind/signal.hpp"

namespace revblind {

enum class Window { hann, rectangular };

struct StftConfig {
    int window_length = 64;
    int hop = 16;
    Window window = Window::hann;
};

/// Dense row-major matrix of analysis values (frequency x time).
struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<double> v;

    Matrix() = default;
    Matrix(int r, int c) : rows(r), cols(c), v(static_cast<std::size_t>(r) * c, 0.0) {}
    double& at(int r, int c) { return v[static_cast<std::size_t>(r) * cols + c]; }
    double at(int r, int c) const { return v[static_cast<std::size_t>(r) * cols + c]; }
};

/// Triangular mel filterbank on linear DFT bins.
///
/// Scale: mel(f) = 2595 log10(1 + f/700), filters span 0 Hz to Nyquist with
/// peak weight 1. At this project's 33-bin resolution the lowest triangles
/// can be narrower than one bin; such filters fall back to a single unit
/// weight at the bin nearest their center so every row stays non-empty.
struct MelFilterbank {
    int n_mels = 0;
    int n_bins = 0;
    std::vector<double> weights;       // n_mels x n_bins, row-major
    std::vector<double> band_edges_hz; // n_mels + 2 triangle nodes

    static MelFilterbank make(int n_mels, int window_length, double sample_rate);
    double weight(int mel, int bin) const { return weights[static_cast<std::size_t>(mel) * n_bins + bin]; }
};

enum class SpecKind : std::uint8_t { rir = 0, speech = 1 };

/// Log-magnitude mel spectrogram (F x T). Values are dB-like
/// (20 log10 of floored linear magnitude), stored in analysis precision;
/// serialization quantizes to 32-bit floats.
struct MelSpectrogram {
    Matrix values;
    SpecKind kind = SpecKind::rir;
    int frame_hop = 0;
};

/// |DFT| of windowed frames: (window_length/2 + 1) x T,
/// T = 1 + floor((len - window_length) / hop).
Matrix stft_magnitude(const SampleBuffer& x, const StftConfig& cfg);

/// fb.weights * S.
Matrix mel_project(const Matrix& S, const MelFilterbank& fb);

/// 20 log10(max(S, floor)) elementwise.
Matrix log_compress(const Matrix& S, double floor);

/// Zero mean, unit std over all entries of the single sample.
/// Constant input maps to all-zeros.
MelSpectrogram standardize(const MelSpectrogram& m);

/// Frontend parameters shared by dataset generation and all three stages.
struct FrontendConfig {
    int window_length = 64;
    int rir_hop = 16;
    int speech_hop = 32;
    Window window = Window::hann;
    int n_mels = 16;
    double log_floor = 1e-5;
    double rir_duration_s = 1.0; // RIR analysis span: pad/truncate before the STFT

    int rir_frames(double sample_rate) const;
    int speech_frames(int n_samples) const;
};

/// Stateless analysis frontend; the filterbank is built once and shared.
class SpectralFrontend {
public:
    SpectralFrontend(FrontendConfig cfg, double sample_rate);

    /// Peak-normalize, pad/truncate to the configured duration, then
    /// STFT (hop 16) -> mel -> log.
    MelSpectrogram rir_to_melspec(const SampleBuffer& h) const;

    /// STFT (hop 32) -> mel -> log -> per-sample standardization.
    MelSpectrogram speech_to_melspec(const SampleBuffer& y) const;

    const FrontendConfig& config() const { return cfg_; }
    const MelFilterbank& filterbank() const { return fb_; }
    double sample_rate() const { return sample_rate_; }

private:
    FrontendConfig cfg_;
    double sample_rate_;
    MelFilterbank fb_;
};

/// Binary serialization: magic, dims, hop, kind header + row-major
/// little-endian 32-bit floats.
void write_melspec(const std::string& path, const MelSpectrogram& m);
MelSpectrogram read_melspec(const std::string& path);
std::vector<unsigned char> melspec_to_bytes(const MelSpectrogram& m);
MelSpectrogram melspec_from_bytes(const std::vector<unsigned char>& bytes);

} // namespace revblind
