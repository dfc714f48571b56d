#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <vector>

#include "revblind/rng.hpp"
#include "revblind/spectral.hpp"

using namespace revblind;

namespace {

constexpr double kPi = 3.14159265358979323846;

SampleBuffer sine(double freq, double seconds, double rate = 16000.0) {
    SampleBuffer b;
    b.sample_rate = rate;
    b.samples.resize(static_cast<std::size_t>(seconds * rate));
    for (std::size_t n = 0; n < b.samples.size(); ++n) {
        b.samples[n] = std::sin(2.0 * kPi * freq * static_cast<double>(n) / rate);
    }
    return b;
}

SampleBuffer random_buffer(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    SampleBuffer b;
    b.samples.resize(n);
    for (auto& v : b.samples) v = rng.uniform(-1.0, 1.0);
    return b;
}

} // namespace

TEST_CASE("stft frame count follows the hop formula") {
    StftConfig cfg; // 64 / 16
    Rng rng(41);
    for (int trial = 0; trial < 30; ++trial) {
        const std::size_t len = 64 + rng.uniform_index(5000);
        const auto S = stft_magnitude(random_buffer(len, trial), cfg);
        CHECK(S.rows == 33);
        CHECK(S.cols == 1 + static_cast<int>((len - 64) / 16));
    }
}

TEST_CASE("stft of silence is silent") {
    SampleBuffer x;
    x.samples.assign(256, 0.0);
    const auto S = stft_magnitude(x, StftConfig{});
    for (double v : S.v) CHECK(v == 0.0);
}

TEST_CASE("stft of a unit impulse has a flat first frame") {
    SampleBuffer x;
    x.samples.assign(64, 0.0);
    x.samples[0] = 1.0;
    StftConfig cfg;
    cfg.window = Window::rectangular;
    const auto S = stft_magnitude(x, cfg);
    REQUIRE(S.cols == 1);
    for (int k = 0; k < S.rows; ++k) {
        CHECK(S.at(k, 0) == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("2 kHz sine concentrates in bin 8") {
    // 2000 Hz * 64 / 16000 = 8 cycles per window: integer, so a rectangular
    // window puts all analysed energy into bin 8.
    SampleBuffer x = sine(2000.0, 0.1);
    StftConfig cfg;
    cfg.window = Window::rectangular;
    const auto S = stft_magnitude(x, cfg);
    for (int t = 0; t < S.cols; ++t) {
        double total = 0.0;
        for (int k = 0; k < S.rows; ++k) total += S.at(k, t) * S.at(k, t);
        CHECK(S.at(8, t) * S.at(8, t) >= 0.95 * total);
    }
}

TEST_CASE("stft is shorter-than-window safe and hop-validated") {
    SampleBuffer x = random_buffer(63, 1);
    CHECK_THROWS_AS(stft_magnitude(x, StftConfig{}), ValueError);

    StftConfig bad;
    bad.hop = 0;
    CHECK_THROWS_AS(stft_magnitude(random_buffer(64, 2), bad), ValueError);
    bad.hop = 128;
    CHECK_THROWS_AS(stft_magnitude(random_buffer(256, 3), bad), ValueError);
}

TEST_CASE("stft magnitudes scale linearly with amplitude") {
    SampleBuffer x = random_buffer(512, 4);
    SampleBuffer x3 = x;
    for (double& v : x3.samples) v *= 3.0;

    const auto a = stft_magnitude(x, StftConfig{});
    const auto b = stft_magnitude(x3, StftConfig{});
    for (std::size_t i = 0; i < a.v.size(); ++i) {
        if (a.v[i] > 1e-12) {
            CHECK(b.v[i] / a.v[i] == doctest::Approx(3.0).epsilon(1e-10));
        }
    }
}

TEST_CASE("mel filterbank rows are non-empty, nonnegative and contiguous") {
    const auto fb = MelFilterbank::make(16, 64, 16000.0);
    REQUIRE(fb.n_mels == 16);
    REQUIRE(fb.n_bins == 33);
    for (int m = 0; m < fb.n_mels; ++m) {
        int first = -1, last = -1;
        for (int k = 0; k < fb.n_bins; ++k) {
            const double w = fb.weight(m, k);
            CHECK(w >= 0.0);
            if (w > 0.0) {
                if (first < 0) first = k;
                last = k;
            }
        }
        REQUIRE(first >= 0); // at least one positive weight per filter
        for (int k = first; k <= last; ++k) {
            CHECK(fb.weight(m, k) > 0.0); // support is one contiguous run
        }
    }
}

TEST_CASE("mel filter centers ascend and span the band") {
    const auto fb = MelFilterbank::make(16, 64, 16000.0);
    REQUIRE(fb.band_edges_hz.size() == 18);
    CHECK(fb.band_edges_hz.front() == doctest::Approx(0.0));
    CHECK(fb.band_edges_hz.back() == doctest::Approx(8000.0).epsilon(1e-9));
    for (std::size_t i = 1; i < fb.band_edges_hz.size(); ++i) {
        CHECK(fb.band_edges_hz[i] > fb.band_edges_hz[i - 1]);
    }
}

TEST_CASE("mel projection of an all-ones column gives row sums") {
    const auto fb = MelFilterbank::make(16, 64, 16000.0);
    Matrix S(33, 1);
    for (double& v : S.v) v = 1.0;
    const auto M = mel_project(S, fb);

    for (int m = 0; m < 16; ++m) {
        double row_sum = 0.0;
        for (int k = 0; k < 33; ++k) row_sum += fb.weight(m, k);
        CHECK(M.at(m, 0) == doctest::Approx(row_sum).epsilon(1e-12));
    }
}

TEST_CASE("mel projection of a single active bin reads the weight matrix") {
    const auto fb = MelFilterbank::make(16, 64, 16000.0);
    for (int k : {0, 8, 16, 32}) {
        Matrix S(33, 1);
        S.at(k, 0) = 1.0;
        const auto M = mel_project(S, fb);
        for (int m = 0; m < 16; ++m) {
            CHECK(M.at(m, 0) == doctest::Approx(fb.weight(m, k)).epsilon(1e-12));
        }
    }
}

TEST_CASE("mel projection maps zero to zero and preserves nonnegativity") {
    const auto fb = MelFilterbank::make(16, 64, 16000.0);
    Matrix Z(33, 4);
    const auto MZ = mel_project(Z, fb);
    for (double v : MZ.v) CHECK(v == 0.0);

    Matrix R(33, 4);
    Rng rng(5);
    for (double& v : R.v) v = rng.uniform(); // nonnegative
    const auto MR = mel_project(R, fb);
    for (double v : MR.v) CHECK(v >= 0.0);

    Matrix bad(32, 4);
    CHECK_THROWS_AS(mel_project(bad, fb), ValueError);
}

TEST_CASE("log compression hand values") {
    Matrix S(1, 3);
    S.at(0, 0) = 1.0;
    S.at(0, 1) = 0.0;
    S.at(0, 2) = 10.0;
    const auto L = log_compress(S, 1e-5);
    CHECK(L.at(0, 0) == doctest::Approx(0.0));
    CHECK(L.at(0, 1) == doctest::Approx(-100.0));
    CHECK(L.at(0, 2) == doctest::Approx(20.0));

    CHECK_THROWS_AS(log_compress(S, 0.0), ValueError);
    CHECK_THROWS_AS(log_compress(S, -1.0), ValueError);
}

TEST_CASE("standardize zeroes constant input and normalizes moments") {
    MelSpectrogram m;
    m.values = Matrix(16, 10);
    for (double& v : m.values.v) v = 7.5;
    const auto z = standardize(m);
    for (double v : z.values.v) CHECK(v == 0.0);

    Rng rng(6);
    for (double& v : m.values.v) v = rng.uniform(-40.0, 10.0);
    const auto s = standardize(m);
    double mean = 0.0;
    for (double v : s.values.v) mean += v;
    mean /= static_cast<double>(s.values.v.size());
    double var = 0.0;
    for (double v : s.values.v) var += (v - mean) * (v - mean);
    var /= static_cast<double>(s.values.v.size());
    CHECK(std::fabs(mean) < 1e-9);
    CHECK(std::sqrt(var) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("standardize is affine invariant") {
    MelSpectrogram m;
    m.values = Matrix(16, 20);
    Rng rng(7);
    for (double& v : m.values.v) v = rng.uniform(-40.0, 10.0);

    MelSpectrogram affine = m;
    for (double& v : affine.values.v) v = 3.2 * v - 17.0;

    const auto a = standardize(m);
    const auto b = standardize(affine);
    for (std::size_t i = 0; i < a.values.v.size(); ++i) {
        CHECK(a.values.v[i] == doctest::Approx(b.values.v[i]).epsilon(1e-9));
    }
}

TEST_CASE("frontend produces the documented frame counts") {
    FrontendConfig desk;
    desk.rir_duration_s = 0.25;
    SpectralFrontend frontend(desk, 16000.0);

    // 0.25 s at hop 16: 1 + (4000-64)/16 = 247 frames.
    SampleBuffer rir = random_buffer(1000, 8); // shorter than the span: padded
    const auto H = frontend.rir_to_melspec(rir);
    CHECK(H.values.rows == 16);
    CHECK(H.values.cols == 247);
    CHECK(H.values.cols == desk.rir_frames(16000.0));
    CHECK(H.kind == SpecKind::rir);
    CHECK(H.frame_hop == 16);

    // 4 s of speech at hop 32: 1 + (64000-64)/32 = 1999 frames.
    SampleBuffer speech = random_buffer(64000, 9);
    const auto Y = frontend.speech_to_melspec(speech);
    CHECK(Y.values.rows == 16);
    CHECK(Y.values.cols == 1999);
    CHECK(Y.values.cols == desk.speech_frames(64000));
    CHECK(Y.kind == SpecKind::speech);
    CHECK(Y.frame_hop == 32);

    // Default (non-desk) RIR span is 1 s: 1 + (16000-64)/16 = 997 frames.
    FrontendConfig full;
    SpectralFrontend frontend_full(full, 16000.0);
    CHECK(frontend_full.rir_to_melspec(rir).values.cols == 997);
}

TEST_CASE("frontend truncates long RIRs and is deterministic") {
    FrontendConfig desk;
    desk.rir_duration_s = 0.25;
    SpectralFrontend frontend(desk, 16000.0);

    SampleBuffer rir = random_buffer(16000, 10); // 1 s, truncated to 0.25 s
    const auto a = frontend.rir_to_melspec(rir);
    const auto b = frontend.rir_to_melspec(rir);
    CHECK(a.values.cols == 247);
    CHECK(a.values.v == b.values.v);
}

TEST_CASE("speech spectrograms come out standardized") {
    FrontendConfig cfg;
    SpectralFrontend frontend(cfg, 16000.0);
    SampleBuffer speech = random_buffer(16000, 11);
    const auto Y = frontend.speech_to_melspec(speech);

    double mean = 0.0;
    for (double v : Y.values.v) mean += v;
    mean /= static_cast<double>(Y.values.v.size());
    CHECK(std::fabs(mean) < 1e-9);
}

TEST_CASE("melspec serialization round-trips through bytes and files") {
    MelSpectrogram m;
    m.values = Matrix(16, 31);
    m.kind = SpecKind::speech;
    m.frame_hop = 32;
    Rng rng(12);
    for (double& v : m.values.v) v = rng.uniform(-100.0, 20.0);

    const auto bytes = melspec_to_bytes(m);
    const auto back = melspec_from_bytes(bytes);
    CHECK(back.values.rows == 16);
    CHECK(back.values.cols == 31);
    CHECK(back.kind == SpecKind::speech);
    CHECK(back.frame_hop == 32);
    for (std::size_t i = 0; i < m.values.v.size(); ++i) {
        // Payload is quantized to 32-bit floats.
        CHECK(back.values.v[i] == doctest::Approx(m.values.v[i]).epsilon(1e-6));
    }

    const std::string path =
        (std::filesystem::temp_directory_path() / "rb_test_mel.bin").string();
    write_melspec(path, m);
    const auto from_file = read_melspec(path);
    CHECK(from_file.values.v == back.values.v);
    std::remove(path.c_str());

    auto corrupt = bytes;
    corrupt[0] = 'X';
    CHECK_THROWS_AS(melspec_from_bytes(corrupt), IoError);
    auto truncated = bytes;
    truncated.pop_back();
    CHECK_THROWS_AS(melspec_from_bytes(truncated), IoError);
}
