#pragma once

#include <cstdint>
#include <vector>

#include "revblind/errors.hpp"

namespace revblind {

/// Mono discrete-time signal. Everything in this project runs at 16 kHz;
/// the rate is carried so that mixed-rate operations can be rejected.
struct SampleBuffer {
    std::vector<double> samples;
    double sample_rate = 16000.0;

    SampleBuffer() = default;
    SampleBuffer(std::vector<double> s, double rate) : samples(std::move(s)), sample_rate(rate) {}

    std::size_t size() const { return samples.size(); }
    double duration_s() const { return static_cast<double>(samples.size()) / sample_rate; }
};

/// Throws ValueError if the buffer is empty, has a non-positive rate or
/// contains non-finite samples.
void validate(const SampleBuffer& x, const char* what);

/// Full linear convolution, output length len(x)+len(h)-1.
/// Switches between the direct sum and an FFT overlap-free transform based
/// on problem size; both paths are exposed for cross-checking.
SampleBuffer convolve(const SampleBuffer& x, const SampleBuffer& h);
SampleBuffer convolve_direct(const SampleBuffer& x, const SampleBuffer& h);
SampleBuffer convolve_fft(const SampleBuffer& x, const SampleBuffer& h);

/// Adds white Gaussian noise scaled to the requested signal-to-noise ratio.
/// +infinity returns the input unchanged. Deterministic per seed.
SampleBuffer add_noise(const SampleBuffer& y, double snr_db, std::uint64_t seed);

/// Scales so that max |sample| == 1. All-zero input is an error.
SampleBuffer peak_normalize(const SampleBuffer& x);

double mean_power(const SampleBuffer& x);
double rms(const SampleBuffer& x);

} // namespace revblind
