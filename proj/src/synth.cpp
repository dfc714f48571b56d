#include "revblind/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "revblind/rng.hpp"

namespace revblind {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kRate = 16000.0;

} // namespace

void validate(const RirSpec& spec) {
    for (double t : spec.per_band_t60) {
        if (!(t >= 0.1 && t <= 2.0)) {
            throw ValueError("RirSpec: per-band T60 must lie in [0.1, 2.0] s");
        }
    }
    if (!(spec.direct_gain > 0.0)) {
        throw ValueError("RirSpec: direct_gain must be positive");
    }
    if (spec.length < 2) {
        throw ValueError("RirSpec: length must be at least 2 samples");
    }
    if (spec.direct_delay < 0 || spec.direct_delay >= spec.length) {
        throw ValueError("RirSpec: direct_delay must lie inside the buffer");
    }
}

SampleBuffer synth_rir(const RirSpec& spec) {
    validate(spec);
    const auto bands = octave_bands(kRate);
    const std::size_t n = static_cast<std::size_t>(spec.length);
    const std::size_t d = static_cast<std::size_t>(spec.direct_delay);

    SampleBuffer out;
    out.sample_rate = kRate;
    out.samples.assign(n, 0.0);

    const double band_scale = 1.0 / std::sqrt(static_cast<double>(kNumOctaveBands));
    for (int b = 0; b < kNumOctaveBands; ++b) {
        Rng rng(derive_seed(spec.seed, "rir-band", static_cast<std::uint64_t>(b)));
        SampleBuffer noise;
        noise.sample_rate = kRate;
        noise.samples.resize(n);
        for (auto& v : noise.samples) v = rng.normal();

        SampleBuffer filtered = octave_filter(noise, bands[b]);
        const double band_rms = rms(filtered);
        if (band_rms <= 0.0) continue; // cannot happen for Gaussian input; belt and braces
        const double gain = band_scale / band_rms;

        // Envelope drops 60 dB of energy (20 log10 amplitude) over T60.
        const double decay = -3.0 / (kRate * spec.per_band_t60[static_cast<std::size_t>(b)]);
        for (std::size_t i = d; i < n; ++i) {
            const double env = std::pow(10.0, decay * static_cast<double>(i - d));
            out.samples[i] += gain * filtered.samples[i] * env;
        }
    }

    out.samples[d] += spec.direct_gain;
    return out;
}

void validate(const SpeechSpec& spec) {
    if (!(spec.duration_s > 0.0)) {
        throw ValueError("SpeechSpec: duration must be positive");
    }
    if (!(spec.pitch_lo_hz > 0.0) || !(spec.pitch_hi_hz >= spec.pitch_lo_hz)) {
        throw ValueError("SpeechSpec: pitch range must satisfy 0 < lo <= hi");
    }
    if (!(spec.syllable_rate_hz > 0.0)) {
        throw ValueError("SpeechSpec: syllable rate must be positive");
    }
    if (!(spec.pause_fraction >= 0.0 && spec.pause_fraction < 1.0)) {
        throw ValueError("SpeechSpec: pause_fraction must lie in [0, 1)");
    }
}

SampleBuffer synth_speech(const SpeechSpec& spec) {
    validate(spec);
    const std::size_t n = static_cast<std::size_t>(std::lrint(spec.duration_s * kRate));

    // Fundamental frequency: random walk in blocks, reflected into range.
    Rng pitch_rng(derive_seed(spec.seed, "speech-pitch"));
    const std::size_t block = 160; // 10 ms
    double f0 = spec.pitch_lo_hz + (spec.pitch_hi_hz - spec.pitch_lo_hz) * pitch_rng.uniform();
    std::vector<double> pitch(n);
    for (std::size_t i = 0; i < n; i += block) {
        f0 += 2.0 * pitch_rng.normal();
        if (f0 < spec.pitch_lo_hz) f0 = 2.0 * spec.pitch_lo_hz - f0;
        if (f0 > spec.pitch_hi_hz) f0 = 2.0 * spec.pitch_hi_hz - f0;
        f0 = std::clamp(f0, spec.pitch_lo_hz, spec.pitch_hi_hz);
        const std::size_t end = std::min(n, i + block);
        for (std::size_t j = i; j < end; ++j) pitch[j] = f0;
    }

    // Harmonic stack with 1/k amplitudes, faded out approaching Nyquist.
    SampleBuffer out;
    out.sample_rate = kRate;
    out.samples.assign(n, 0.0);
    double phase = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double f = pitch[i];
        const int harmonics = static_cast<int>(7600.0 / f);
        double v = 0.0;
        for (int k = 1; k <= harmonics; ++k) {
            const double fk = f * k;
            const double fade = std::clamp((7600.0 - fk) / 600.0, 0.0, 1.0);
            if (fade <= 0.0) break;
            v += fade / k * std::sin(k * phase);
        }
        out.samples[i] = v;
        phase += 2.0 * kPi * f / kRate;
        if (phase > 2.0 * kPi) phase -= 2.0 * kPi;
    }

    // Syllable-rate raised-cosine amplitude modulation.
    Rng am_rng(derive_seed(spec.seed, "speech-am"));
    const double am_phase = 2.0 * kPi * am_rng.uniform();
    for (std::size_t i = 0; i < n; ++i) {
        const double am =
            0.55 - 0.45 * std::cos(2.0 * kPi * spec.syllable_rate_hz * static_cast<double>(i) / kRate + am_phase);
        out.samples[i] *= am;
    }

    // Pink noise (Kellett filter) 30 dB below the voiced RMS.
    const double voiced_rms = rms(out);
    if (voiced_rms > 0.0) {
        Rng noise_rng(derive_seed(spec.seed, "speech-noise"));
        const double scale = voiced_rms * std::pow(10.0, -30.0 / 20.0);
        double b0 = 0, b1 = 0, b2 = 0, b3 = 0, b4 = 0, b5 = 0, b6 = 0;
        std::vector<double> pink(n);
        for (std::size_t i = 0; i < n; ++i) {
            const double w = noise_rng.normal();
            b0 = 0.99886 * b0 + w * 0.0555179;
            b1 = 0.99332 * b1 + w * 0.0750759;
            b2 = 0.96900 * b2 + w * 0.1538520;
            b3 = 0.86650 * b3 + w * 0.3104856;
            b4 = 0.55000 * b4 + w * 0.5329522;
            b5 = -0.7616 * b5 - w * 0.0168980;
            pink[i] = b0 + b1 + b2 + b3 + b4 + b5 + b6 + w * 0.5362;
            b6 = w * 0.115926;
        }
        SampleBuffer pink_buf{std::move(pink), kRate};
        const double pink_rms = rms(pink_buf);
        for (std::size_t i = 0; i < n; ++i) {
            out.samples[i] += scale / pink_rms * pink_buf.samples[i];
        }
    }

    // Pause gate: mute round(pause_fraction * n_cycles) whole syllable
    // cycles, chosen uniformly, with 5 ms ramps. Applies to the noise too.
    const double cycle_s = 1.0 / spec.syllable_rate_hz;
    const auto n_cycles = static_cast<std::size_t>(std::ceil(spec.duration_s / cycle_s));
    const auto n_paused =
        static_cast<std::size_t>(std::lrint(spec.pause_fraction * static_cast<double>(n_cycles)));
    if (n_paused > 0) {
        std::vector<std::size_t> order(n_cycles);
        std::iota(order.begin(), order.end(), 0);
        Rng pause_rng(derive_seed(spec.seed, "speech-pause"));
        pause_rng.shuffle(order.begin(), order.end());
        std::vector<bool> muted(n_cycles, false);
        for (std::size_t i = 0; i < n_paused; ++i) muted[order[i]] = true;

        const double ramp = 0.005 * kRate; // 5 ms
        for (std::size_t i = 0; i < n; ++i) {
            const double t = static_cast<double>(i) / kRate;
            const auto cycle = std::min(n_cycles - 1, static_cast<std::size_t>(t / cycle_s));
            if (!muted[cycle]) continue;
            // Distance to the closest unmuted neighbour edge drives the ramp.
            const double start = static_cast<double>(cycle) * cycle_s * kRate;
            const double end = start + cycle_s * kRate;
            double g = 0.0;
            const bool prev_open = cycle > 0 && !muted[cycle - 1];
            const bool next_open = cycle + 1 < n_cycles && !muted[cycle + 1];
            if (prev_open) g = std::max(g, 1.0 - (static_cast<double>(i) - start) / ramp);
            if (next_open) g = std::max(g, 1.0 - (end - static_cast<double>(i)) / ramp);
            out.samples[i] *= std::clamp(g, 0.0, 1.0);
        }
    }
    return out;
}

} // namespace revblind
