#include <doctest.h>

#include <cmath>

#include "revblind/acoustics.hpp"
#include "revblind/signal.hpp"
#include "revblind/synth.hpp"

using namespace revblind;

TEST_CASE("synthetic rir with uniform decay matches its recipe per band") {
    RirSpec spec;
    spec.per_band_t60.fill(0.5);
    spec.direct_gain = 4.0;
    spec.direct_delay = 40;
    spec.length = 16000;
    spec.seed = 11;

    const SampleBuffer h = synth_rir(spec);
    REQUIRE(h.size() == 16000);
    const AcousticParams p = ground_truth_params(h);
    for (int b = 0; b < kNumOctaveBands; ++b) {
        CHECK(p.t60[b] == doctest::Approx(0.5).epsilon(0.10));
    }
}

TEST_CASE("synthetic rir decay ramp orders the band estimates") {
    RirSpec spec;
    for (int b = 0; b < kNumOctaveBands; ++b) {
        spec.per_band_t60[static_cast<std::size_t>(b)] = 0.3 + 0.1 * b; // 0.3 .. 0.9 s
    }
    spec.length = 24000;
    spec.seed = 12;

    const AcousticParams p = ground_truth_params(synth_rir(spec));
    for (int b = 1; b < kNumOctaveBands; ++b) {
        CHECK(p.t60[b] > p.t60[b - 1]);
    }
}

TEST_CASE("longer decay lowers clarity in the matching band") {
    RirSpec fast;
    fast.per_band_t60.fill(0.25);
    fast.seed = 13;
    RirSpec slow = fast;
    slow.per_band_t60.fill(1.0);

    const AcousticParams pf = ground_truth_params(synth_rir(fast));
    const AcousticParams ps = ground_truth_params(synth_rir(slow));
    for (int b = 0; b < kNumOctaveBands; ++b) {
        CHECK(ps.c50[b] < pf.c50[b]);
    }
}

TEST_CASE("strong direct impulse lands at the requested delay") {
    RirSpec spec;
    spec.per_band_t60.fill(0.1); // minimal reverb
    spec.direct_gain = 5.0;
    spec.direct_delay = 123;
    spec.seed = 14;

    const SampleBuffer h = synth_rir(spec);
    CHECK(detect_direct(h) == 123);
    for (int i = 0; i < 123; ++i) CHECK(h.samples[static_cast<std::size_t>(i)] == 0.0);
}

TEST_CASE("rir synthesis is deterministic and seed-sensitive") {
    RirSpec spec;
    spec.seed = 15;
    const SampleBuffer a = synth_rir(spec);
    const SampleBuffer b = synth_rir(spec);
    CHECK(a.samples == b.samples);

    spec.seed = 16;
    CHECK(synth_rir(spec).samples != a.samples);
}

TEST_CASE("rir spec validation enforces its ranges") {
    RirSpec spec;
    spec.per_band_t60[2] = 0.05;
    CHECK_THROWS_AS(synth_rir(spec), ValueError);

    spec = RirSpec{};
    spec.per_band_t60[0] = 2.5;
    CHECK_THROWS_AS(synth_rir(spec), ValueError);

    spec = RirSpec{};
    spec.direct_gain = 0.0;
    CHECK_THROWS_AS(synth_rir(spec), ValueError);

    spec = RirSpec{};
    spec.direct_delay = spec.length;
    CHECK_THROWS_AS(synth_rir(spec), ValueError);
}

TEST_CASE("speech length follows the duration") {
    SpeechSpec spec;
    spec.duration_s = 4.0;
    spec.seed = 20;
    CHECK(synth_speech(spec).size() == 64000);

    spec.duration_s = 1.5;
    CHECK(synth_speech(spec).size() == 24000);
}

TEST_CASE("nearly total pauses silence the signal") {
    SpeechSpec base;
    base.duration_s = 4.0;
    base.pause_fraction = 0.0;
    base.seed = 21;
    const double rms_full = rms(synth_speech(base));
    REQUIRE(rms_full > 0.0);

    SpeechSpec paused = base;
    paused.pause_fraction = 0.99;
    const double rms_paused = rms(synth_speech(paused));
    CHECK(rms_paused < 0.01 * rms_full);
}

TEST_CASE("moderate pauses remove the expected share of energy") {
    SpeechSpec base;
    base.duration_s = 8.0;
    base.syllable_rate_hz = 4.0; // 32 cycles
    base.pause_fraction = 0.0;
    base.seed = 22;
    const SampleBuffer full = synth_speech(base);

    SpeechSpec paused = base;
    paused.pause_fraction = 0.25;
    const SampleBuffer gated = synth_speech(paused);

    // 8 of 32 syllable cycles are muted; the syllable AM makes per-cycle
    // energies uneven, so allow a generous band around the expected 25%.
    const double ratio = mean_power(gated) / mean_power(full);
    CHECK(ratio > 0.55);
    CHECK(ratio < 0.95);
}

TEST_CASE("speech synthesis is deterministic and seed-sensitive") {
    SpeechSpec spec;
    spec.duration_s = 1.0;
    spec.seed = 23;
    const SampleBuffer a = synth_speech(spec);
    CHECK(a.samples == synth_speech(spec).samples);

    spec.seed = 24;
    CHECK(synth_speech(spec).samples != a.samples);
}

TEST_CASE("speech energy sits in the harmonic band") {
    SpeechSpec spec;
    spec.duration_s = 2.0;
    spec.pause_fraction = 0.0;
    spec.seed = 25;
    const SampleBuffer y = synth_speech(spec);
    CHECK(rms(y) > 0.05);
    for (double v : y.samples) CHECK(std::isfinite(v));

    // The fundamental drifts inside [100, 220] Hz: bandpassing around that
    // range must keep a noticeable share of the energy.
    const auto bands = octave_bands(16000.0);
    const SampleBuffer low = octave_filter(y, bands[0]); // 125 Hz band
    CHECK(rms(low) > 0.1 * rms(y));
}

TEST_CASE("speech spec validation enforces its ranges") {
    SpeechSpec spec;
    spec.duration_s = 0.0;
    CHECK_THROWS_AS(synth_speech(spec), ValueError);

    spec = SpeechSpec{};
    spec.pause_fraction = 1.0;
    CHECK_THROWS_AS(synth_speech(spec), ValueError);

    spec = SpeechSpec{};
    spec.pitch_hi_hz = spec.pitch_lo_hz - 1.0;
    CHECK_THROWS_AS(synth_speech(spec), ValueError);
}
