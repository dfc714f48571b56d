#include <doctest.h>

#include <cmath>
#include <vector>

#include "revblind/acoustics.hpp"
#include "revblind/rng.hpp"

using namespace revblind;

namespace {

constexpr double kPi = 3.14159265358979323846;

SampleBuffer sine(double freq, double seconds) {
    SampleBuffer b;
    b.samples.resize(static_cast<std::size_t>(seconds * b.sample_rate));
    for (std::size_t n = 0; n < b.samples.size(); ++n) {
        b.samples[n] = std::sin(2.0 * kPi * freq * static_cast<double>(n) / b.sample_rate);
    }
    return b;
}

double steady_rms(const SampleBuffer& x) {
    // RMS over the second half: past any filter transient.
    double acc = 0.0;
    const std::size_t start = x.size() / 2;
    for (std::size_t i = start; i < x.size(); ++i) acc += x.samples[i] * x.samples[i];
    return std::sqrt(acc / static_cast<double>(x.size() - start));
}

SampleBuffer exponential_envelope(double alpha, std::size_t n) {
    SampleBuffer b;
    b.samples.resize(n);
    for (std::size_t i = 0; i < n; ++i) b.samples[i] = std::exp(-alpha * static_cast<double>(i));
    return b;
}

} // namespace

TEST_CASE("octave bands cover 125 Hz to 8 kHz with the top edge clipped") {
    const auto bands = octave_bands(16000.0);
    for (int b = 0; b < kNumOctaveBands; ++b) {
        CHECK(bands[b].center == kOctaveCentersHz[b]);
        CHECK(bands[b].lo == doctest::Approx(kOctaveCentersHz[b] / std::sqrt(2.0)));
    }
    for (int b = 0; b < kNumOctaveBands - 1; ++b) {
        CHECK(bands[b].hi == doctest::Approx(kOctaveCentersHz[b] * std::sqrt(2.0)));
    }
    CHECK(bands[6].hi == doctest::Approx(8000.0)); // clipped to Nyquist
}

TEST_CASE("octave filters pass their center frequency near unity") {
    const auto bands = octave_bands(16000.0);
    for (int b = 0; b < kNumOctaveBands - 1; ++b) {
        const SampleBuffer in = sine(bands[b].center, 1.0);
        const SampleBuffer out = octave_filter(in, bands[b]);
        const double gain = steady_rms(out) / steady_rms(in);
        CHECK(gain == doctest::Approx(1.0).epsilon(0.12));
    }
    // The top band runs as a high-pass; probe inside its passband.
    const SampleBuffer in = sine(6000.0, 1.0);
    const SampleBuffer out = octave_filter(in, bands[6]);
    CHECK(steady_rms(out) / steady_rms(in) == doctest::Approx(1.0).epsilon(0.12));
}

TEST_CASE("octave filters reject tones two octaves away") {
    const auto bands = octave_bands(16000.0);
    struct Probe {
        double freq;
        int band;
    };
    for (const Probe p : {Probe{500.0, 0}, Probe{125.0, 2}, Probe{2000.0, 1},
                          Probe{500.0, 4}, Probe{2000.0, 6}, Probe{8000.0 / 4.0, 6}}) {
        const SampleBuffer in = sine(p.freq, 1.0);
        const SampleBuffer out = octave_filter(in, bands[p.band]);
        const double atten_db = 20.0 * std::log10(steady_rms(out) / steady_rms(in));
        CHECK(atten_db <= -30.0);
    }
}

TEST_CASE("octave filters are linear and map silence to silence") {
    const auto bands = octave_bands(16000.0);
    SampleBuffer zero;
    zero.samples.assign(1000, 0.0);
    const auto out = octave_filter(zero, bands[3]);
    for (double v : out.samples) CHECK(v == 0.0);
}

TEST_CASE("octave filters are stable") {
    const auto bands = octave_bands(16000.0);
    for (int b = 0; b < kNumOctaveBands; ++b) {
        SampleBuffer impulse;
        impulse.samples.assign(16000, 0.0);
        impulse.samples[0] = 1.0;
        const auto ir = octave_filter(impulse, bands[b]);
        double tail = 0.0;
        for (std::size_t i = ir.size() - 1000; i < ir.size(); ++i) tail += ir.samples[i] * ir.samples[i];
        CHECK(tail < 1e-12); // impulse response has died out after 1 s
        for (double v : ir.samples) CHECK(std::isfinite(v));
    }
}

TEST_CASE("detect_direct finds the strongest sample, earliest on ties") {
    CHECK(detect_direct({{0.0, 0.0, 1.0, 0.5}, 16000.0}) == 2);
    CHECK(detect_direct({{0.0, 1.0, 1.0}, 16000.0}) == 1);
    CHECK(detect_direct({{0.5, -0.9, 0.3}, 16000.0}) == 1); // magnitude, not value

    SampleBuffer h;
    Rng rng(1);
    h.samples.resize(500);
    for (auto& v : h.samples) v = rng.uniform(-1.0, 1.0);
    const std::size_t idx = detect_direct(h);
    SampleBuffer scaled = h;
    for (auto& v : scaled.samples) v *= 2.7;
    CHECK(detect_direct(scaled) == idx);

    SampleBuffer silent;
    silent.samples.assign(10, 0.0);
    CHECK_THROWS_AS(detect_direct(silent), ValueError);
}

TEST_CASE("edc of a lone impulse drops to the floor") {
    SampleBuffer h;
    h.samples.assign(100, 0.0);
    h.samples[0] = 1.0;
    const auto edc = schroeder_edc(h);
    CHECK(edc.values_db[0] == 0.0);
    for (std::size_t n = 1; n < edc.values_db.size(); ++n) {
        CHECK(edc.values_db[n] == doctest::Approx(-120.0)); // 10 log10(1e-12)
    }
}

TEST_CASE("edc of equal-energy samples follows the closed form") {
    const int N = 64;
    SampleBuffer h;
    h.samples.assign(N, 1.0);
    for (int i = 1; i < N; i += 2) h.samples[i] = -1.0; // equal energy, mixed sign
    const auto edc = schroeder_edc(h);
    for (int n = 0; n < N; ++n) {
        const double expected = 10.0 * std::log10(static_cast<double>(N - n) / N);
        CHECK(edc.values_db[n] == doctest::Approx(expected).epsilon(1e-12));
    }
}

TEST_CASE("edc is non-increasing for arbitrary inputs") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed);
        SampleBuffer h;
        h.samples.resize(200 + rng.uniform_index(800));
        for (auto& v : h.samples) v = rng.uniform(-1.0, 1.0);
        const auto edc = schroeder_edc(h);
        for (std::size_t n = 1; n < edc.values_db.size(); ++n) {
            CHECK(edc.values_db[n] <= edc.values_db[n - 1]);
        }
    }
    SampleBuffer silent;
    silent.samples.assign(16, 0.0);
    CHECK_THROWS_AS(schroeder_edc(silent), ValueError);
}

TEST_CASE("t60 of an exact exponential envelope is recovered") {
    // Envelope e^{-alpha n}: 60 dB of decay takes 3 ln(10)/alpha samples,
    // so alpha = 6.9078e-4 at 16 kHz gives T60 = 0.625 s.
    const double alpha = 6.9078e-4;
    const auto h = exponential_envelope(alpha, 40000);
    const double t60 = estimate_t60(schroeder_edc(h), 16000.0);
    CHECK(t60 == doctest::Approx(0.625).epsilon(0.02));

    // Doubling the decay rate halves T60.
    const auto h2 = exponential_envelope(2.0 * alpha, 40000);
    const double t60_fast = estimate_t60(schroeder_edc(h2), 16000.0);
    CHECK(t60_fast == doctest::Approx(0.3125).epsilon(0.02));
}

TEST_CASE("t60 estimation is invariant to positive scaling") {
    const auto h = exponential_envelope(6.9078e-4, 30000);
    SampleBuffer doubled = h;
    for (auto& v : doubled.samples) v *= 2.0; // power-of-two scale: exact in binary fp
    CHECK(estimate_t60(schroeder_edc(h), 16000.0) ==
          estimate_t60(schroeder_edc(doubled), 16000.0));

    SampleBuffer scaled = h;
    for (auto& v : scaled.samples) v *= 1.7;
    CHECK(estimate_t60(schroeder_edc(scaled), 16000.0) ==
          doctest::Approx(estimate_t60(schroeder_edc(h), 16000.0)).epsilon(1e-12));
}

TEST_CASE("t60 estimation rejects a curve that never reaches -25 dB") {
    SampleBuffer h;
    h.samples.assign(100, 1.0); // EDC bottoms out at 10 log10(1/100) = -20 dB
    CHECK_THROWS_AS(estimate_t60(schroeder_edc(h), 16000.0), ValueError);
}

TEST_CASE("c50 of balanced early and late energy is 0 dB") {
    SampleBuffer h;
    h.samples.assign(1600, 1.0); // boundary at 0 + 800; halves match exactly
    CHECK(compute_c50(h, 0, 16000.0) == doctest::Approx(0.0));
}

TEST_CASE("c50 of an exponential envelope matches the closed form") {
    // Geometric sums give early/late = e^{2 alpha M} - 1 for an infinite
    // tail; 40000 samples leave a vanishing truncation correction.
    const double alpha = 6.9078e-4;
    const std::size_t M = 800; // 50 ms at 16 kHz
    const auto h = exponential_envelope(alpha, 40000);

    const double closed_form = 10.0 * std::log10(std::exp(2.0 * alpha * static_cast<double>(M)) - 1.0);
    const double c50 = compute_c50(h, 0, 16000.0);
    CHECK(closed_form == doctest::Approx(3.05).epsilon(0.01)); // sanity on the reference itself
    CHECK(c50 == doctest::Approx(closed_form).epsilon(0.3 / 3.0)); // within 0.3 dB

    // And exactly against the brute-force partial sums.
    double early = 0.0, late = 0.0;
    for (std::size_t n = 0; n < h.size(); ++n) {
        (n < M ? early : late) += h.samples[n] * h.samples[n];
    }
    CHECK(c50 == doctest::Approx(10.0 * std::log10(early / late)).epsilon(1e-12));
}

TEST_CASE("c50 satisfies the energy-ratio identity on random impulse responses") {
    for (std::uint64_t seed = 100; seed < 105; ++seed) {
        Rng rng(seed);
        SampleBuffer h;
        h.samples.resize(4000);
        for (auto& v : h.samples) v = rng.uniform(-1.0, 1.0);
        const std::size_t direct = detect_direct(h);
        if (direct + 800 >= h.size()) continue;
        const double c50 = compute_c50(h, direct, 16000.0);

        double early = 0.0, late = 0.0;
        for (std::size_t n = direct; n < h.size(); ++n) {
            (n < direct + 800 ? early : late) += h.samples[n] * h.samples[n];
        }
        CHECK(std::pow(10.0, c50 / 10.0) * late == doctest::Approx(early).epsilon(1e-9));
    }
}

TEST_CASE("c50 clamps when the tail is silent and validates the boundary") {
    SampleBuffer h;
    h.samples.assign(2000, 0.0);
    for (std::size_t i = 0; i < 800; ++i) h.samples[i] = 0.5;
    CHECK(compute_c50(h, 0, 16000.0) == 80.0);

    SampleBuffer shorty;
    shorty.samples.assign(700, 1.0);
    CHECK_THROWS_AS(compute_c50(shorty, 0, 16000.0), ValueError);  // boundary past the end
    CHECK_THROWS_AS(compute_c50(shorty, 900, 16000.0), ValueError); // direct index past the end
}

TEST_CASE("ground truth recovers the decay of broadband enveloped noise") {
    // White noise under a global e^{-alpha n} envelope decays at the same
    // rate in every octave band.
    const double alpha = 6.9078e-4; // T60 = 0.625 s
    Rng rng(2024);
    SampleBuffer h;
    h.samples.resize(40000);
    for (std::size_t n = 0; n < h.samples.size(); ++n) {
        h.samples[n] = rng.normal() * std::exp(-alpha * static_cast<double>(n));
    }
    h.samples[0] = 4.0; // direct spike

    const AcousticParams p = ground_truth_params(h);
    for (int b = 0; b < kNumOctaveBands; ++b) {
        CHECK(p.t60[b] == doctest::Approx(0.625).epsilon(0.20));
        CHECK(std::isfinite(p.c50[b]));
        CHECK(p.c50[b] > 0.0); // exponential decay concentrates energy early
    }

    const auto flat = p.flat();
    for (int b = 0; b < kNumOctaveBands; ++b) {
        CHECK(flat[b] == p.t60[b]);
        CHECK(flat[kNumOctaveBands + b] == p.c50[b]);
    }
}
