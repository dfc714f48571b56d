#pragma once

#include <array>
#include <cstddef>
#include <vector>

#include "revblind/signal.hpp"

namespace revblind {

inline constexpr int kNumOctaveBands = 7;
inline constexpr std::array<double, kNumOctaveBands> kOctaveCentersHz = {
    125.0, 250.0, 500.0, 1000.0, 2000.0, 4000.0, 8000.0};

struct OctaveBand {
    double center = 0.0;
    double lo = 0.0; // center / sqrt(2)
    double hi = 0.0; // center * sqrt(2), clipped to Nyquist
};

/// The seven analysis bands; the top band's upper edge is clipped to Nyquist.
std::array<OctaveBand, kNumOctaveBands> octave_bands(double sample_rate);

/// One second-order section, direct form II transposed.
struct Biquad {
    double b0 = 0, b1 = 0, b2 = 0; // numerator
    double a1 = 0, a2 = 0;         // denominator (a0 normalized to 1)
};

struct SosFilter {
    std::vector<Biquad> sections;
    double gain = 1.0;
};

/// 6th-order Butterworth band-pass as three cascaded second-order sections,
/// gain normalized to unity at the band center. A band whose upper edge
/// reaches Nyquist (the 8 kHz band at 16 kHz) degenerates under the bilinear
/// transform and is designed as a 6th-order high-pass at the lower edge
/// instead, normalized at the clipped band's geometric center.
SosFilter design_octave_filter(const OctaveBand& band, double sample_rate);

/// Forward-only (causal) cascade filtering.
SampleBuffer sos_filter(const SosFilter& f, const SampleBuffer& x);

/// Band-limits an RIR to one octave band.
SampleBuffer octave_filter(const SampleBuffer& h, const OctaveBand& band);

/// Index of the direct sound: argmax |h[n]|, ties to the earliest index.
std::size_t detect_direct(const SampleBuffer& h);

/// Backward-integrated energy decay, normalized to 0 dB at the start.
/// Non-increasing by construction; the ratio is floored at 1e-12 (-120 dB).
struct EnergyDecayCurve {
    std::vector<double> values_db;
};

EnergyDecayCurve schroeder_edc(const SampleBuffer& h_b);

/// T60 from a least-squares line through the -5..-25 dB EDC segment
/// (T20 extrapolation): T60 = -60 / slope. Errors if the curve never
/// reaches -25 dB.
double estimate_t60(const EnergyDecayCurve& edc, double sample_rate);

/// Early-to-late energy ratio with a 50 ms boundary after the direct sound,
/// in dB, clamped to [-80, +80].
double compute_c50(const SampleBuffer& h_b, std::size_t direct_idx, double sample_rate);

/// Per-band reverberation time (s) and clarity (dB).
struct AcousticParams {
    std::array<double, kNumOctaveBands> t60{};
    std::array<double, kNumOctaveBands> c50{};

    /// Flattened [t60 x 7, c50 x 7] vector used as the regression target.
    std::array<double, 2 * kNumOctaveBands> flat() const;
};

/// Full ground-truth computation: per band, octave_filter ->
/// (schroeder_edc -> estimate_t60) and compute_c50 with the direct-sound
/// index detected once on the broadband RIR.
AcousticParams ground_truth_params(const SampleBuffer& h);

} // namespace revblind
