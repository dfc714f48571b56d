#pragma once

#include <array>
#include <cstdint>

#include "revblind/acoustics.hpp"
#include "revblind/signal.hpp"

namespace revblind {

/// Recipe for one synthetic RIR with analytically known per-band decay.
struct RirSpec {
    std::array<double, kNumOctaveBands> per_band_t60{0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5}; // s
    double direct_gain = 4.0; // linear amplitude of the direct impulse
    int direct_delay = 40;    // samples before the direct impulse
    int length = 16000;       // samples
    std::uint64_t seed = 0;
};

/// Throws ValueError outside the supported ranges
/// (T60 in [0.1, 2.0] s, direct_gain > 0, delay inside the buffer).
void validate(const RirSpec& spec);

/// Sum over the seven octave bands of band-filtered Gaussian noise shaped by
/// an exponential envelope that decays 60 dB in that band's T60, plus a
/// direct impulse. Each band is normalized so the summed tail starts near
/// unit RMS, making direct_gain the direct-to-tail-onset amplitude ratio.
/// Deterministic per seed.
SampleBuffer synth_rir(const RirSpec& spec);

/// Recipe for one synthetic speech-like source signal.
struct SpeechSpec {
    double duration_s = 4.0;
    double pitch_lo_hz = 100.0; // random-walk range for the fundamental
    double pitch_hi_hz = 220.0;
    double syllable_rate_hz = 3.0;
    double pause_fraction = 0.2; // fraction of syllable cycles muted, [0, 1)
    std::uint64_t seed = 0;
};

void validate(const SpeechSpec& spec);

/// Harmonic pulse train with a drifting fundamental, raised-cosine
/// syllable-rate amplitude modulation and pink noise 30 dB below the voiced
/// level. Pauses mute round(pause_fraction * n_cycles) whole syllable cycles
/// (5 ms ramps); the gate applies to the noise as well. Deterministic per seed.
SampleBuffer synth_speech(const SpeechSpec& spec);

} // namespace revblind
