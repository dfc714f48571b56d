#include <doctest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "revblind/rng.hpp"
#include "revblind/signal.hpp"

using namespace revblind;

namespace {

// Oracle: direct double-loop convolution sum, independent of the library paths.
std::vector<double> brute_convolve(const std::vector<double>& x, const std::vector<double>& h) {
    std::vector<double> out(x.size() + h.size() - 1, 0.0);
    for (std::size_t i = 0; i < x.size(); ++i) {
        for (std::size_t j = 0; j < h.size(); ++j) {
            out[i + j] += x[i] * h[j];
        }
    }
    return out;
}

SampleBuffer random_buffer(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    SampleBuffer b;
    b.samples.resize(n);
    for (auto& v : b.samples) v = rng.uniform(-1.0, 1.0);
    return b;
}

double max_rel_err(const std::vector<double>& got, const std::vector<double>& want) {
    REQUIRE(got.size() == want.size());
    double scale = 0.0;
    for (double w : want) scale = std::max(scale, std::fabs(w));
    double worst = 0.0;
    for (std::size_t i = 0; i < got.size(); ++i) {
        worst = std::max(worst, std::fabs(got[i] - want[i]) / scale);
    }
    return worst;
}

} // namespace

TEST_CASE("convolving with a unit impulse reproduces the other signal") {
    SampleBuffer h = random_buffer(20, 1);
    SampleBuffer delta({1.0, 0.0, 0.0, 0.0}, 16000.0);

    SampleBuffer out = convolve(delta, h);
    REQUIRE(out.size() == 23); // zero-padded to full length
    for (std::size_t i = 0; i < h.size(); ++i) CHECK(out.samples[i] == doctest::Approx(h.samples[i]));
    for (std::size_t i = h.size(); i < out.size(); ++i) CHECK(out.samples[i] == doctest::Approx(0.0));
}

TEST_CASE("tiny convolution by hand") {
    SampleBuffer x({1.0, 1.0}, 16000.0);
    SampleBuffer h({1.0, 1.0}, 16000.0);
    SampleBuffer out = convolve(x, h);
    REQUIRE(out.size() == 3);
    CHECK(out.samples[0] == doctest::Approx(1.0));
    CHECK(out.samples[1] == doctest::Approx(2.0));
    CHECK(out.samples[2] == doctest::Approx(1.0));
}

TEST_CASE("all convolution paths match the brute-force sum") {
    SampleBuffer x = random_buffer(37, 2);
    SampleBuffer h = random_buffer(11, 3);
    const auto expected = brute_convolve(x.samples, h.samples);

    CHECK(max_rel_err(convolve(x, h).samples, expected) < 1e-12);
    CHECK(max_rel_err(convolve_direct(x, h).samples, expected) < 1e-12);
    CHECK(max_rel_err(convolve_fft(x, h).samples, expected) < 1e-11);
}

TEST_CASE("direct and fft convolution agree on large inputs") {
    SampleBuffer x = random_buffer(4000, 4);
    SampleBuffer h = random_buffer(500, 5);
    const auto d = convolve_direct(x, h);
    const auto f = convolve_fft(x, h);
    CHECK(max_rel_err(f.samples, d.samples) < 1e-9);
}

TEST_CASE("convolution is linear") {
    SampleBuffer x1 = random_buffer(50, 6);
    SampleBuffer x2 = random_buffer(50, 7);
    SampleBuffer h = random_buffer(13, 8);
    const double a = 1.75, b = -0.5;

    SampleBuffer mix;
    mix.samples.resize(50);
    for (std::size_t i = 0; i < 50; ++i) mix.samples[i] = a * x1.samples[i] + b * x2.samples[i];

    const auto lhs = convolve(mix, h);
    const auto r1 = convolve(x1, h);
    const auto r2 = convolve(x2, h);
    std::vector<double> rhs(lhs.size());
    for (std::size_t i = 0; i < rhs.size(); ++i) rhs[i] = a * r1.samples[i] + b * r2.samples[i];
    CHECK(max_rel_err(lhs.samples, rhs) < 1e-10);
}

TEST_CASE("convolution is commutative") {
    SampleBuffer x = random_buffer(29, 9);
    SampleBuffer h = random_buffer(17, 10);
    CHECK(max_rel_err(convolve(x, h).samples, convolve(h, x).samples) < 1e-10);
}

TEST_CASE("mismatched sample rates are rejected") {
    SampleBuffer x({1.0, 2.0}, 16000.0);
    SampleBuffer h({1.0}, 8000.0);
    CHECK_THROWS_AS(convolve(x, h), ValueError);
}

TEST_CASE("infinite snr leaves the signal untouched") {
    SampleBuffer y = random_buffer(100, 11);
    SampleBuffer out = add_noise(y, std::numeric_limits<double>::infinity(), 1);
    CHECK(out.samples == y.samples);
}

TEST_CASE("0 dB snr injects noise with matching power") {
    // Unit-power deterministic signal; the realized noise power is measured
    // directly as the difference from the clean signal.
    SampleBuffer y;
    y.samples.assign(100000, 1.0);
    for (std::size_t i = 0; i < y.size(); i += 2) y.samples[i] = -1.0;

    SampleBuffer noisy = add_noise(y, 0.0, 1234);
    double noise_power = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        const double d = noisy.samples[i] - y.samples[i];
        noise_power += d * d;
    }
    noise_power /= static_cast<double>(y.size());
    CHECK(noise_power == doctest::Approx(1.0).epsilon(0.01));
}

TEST_CASE("noise is deterministic per seed and differs across seeds") {
    SampleBuffer y = random_buffer(500, 12);
    const auto a = add_noise(y, 10.0, 7);
    const auto b = add_noise(y, 10.0, 7);
    const auto c = add_noise(y, 10.0, 8);
    CHECK(a.samples == b.samples);
    CHECK(a.samples != c.samples);
}

TEST_CASE("finite snr on a silent signal is an error") {
    SampleBuffer y;
    y.samples.assign(100, 0.0);
    CHECK_THROWS_AS(add_noise(y, 20.0, 1), ValueError);
}

TEST_CASE("peak_normalize hand cases") {
    SampleBuffer x({0.0, 0.5, -0.25}, 16000.0);
    const auto out = peak_normalize(x);
    CHECK(out.samples[0] == 0.0);
    CHECK(out.samples[1] == 1.0);
    CHECK(out.samples[2] == -0.5);

    SampleBuffer unit({0.25, -1.0, 0.75}, 16000.0);
    CHECK(peak_normalize(unit).samples == unit.samples);
}

TEST_CASE("peak_normalize scales uniformly to unit peak") {
    SampleBuffer x = random_buffer(333, 13);
    const auto out = peak_normalize(x);

    double peak = 0.0;
    for (double v : out.samples) peak = std::max(peak, std::fabs(v));
    CHECK(std::fabs(peak - 1.0) <= std::numeric_limits<double>::epsilon()); // 1 ulp


    // Shape preserved: out = x / max|x| elementwise.
    double in_peak = 0.0;
    for (double v : x.samples) in_peak = std::max(in_peak, std::fabs(v));
    for (std::size_t i = 0; i < x.size(); ++i) {
        CHECK(out.samples[i] == doctest::Approx(x.samples[i] / in_peak).epsilon(1e-14));
    }
}

TEST_CASE("peak_normalize rejects silence") {
    SampleBuffer x;
    x.samples.assign(10, 0.0);
    CHECK_THROWS_AS(peak_normalize(x), ValueError);
}

TEST_CASE("validate rejects malformed buffers") {
    SampleBuffer empty;
    CHECK_THROWS_AS(validate(empty, "test"), ValueError);

    SampleBuffer nan_buf({1.0, std::nan("")}, 16000.0);
    CHECK_THROWS_AS(validate(nan_buf, "test"), ValueError);

    SampleBuffer bad_rate({1.0}, 0.0);
    CHECK_THROWS_AS(validate(bad_rate, "test"), ValueError);
}
