#pragma once

#include <complex>
#include <cstddef>
#include <vector>

#include "revblind/errors.hpp"

namespace revblind {

/// In-place iterative radix-2 FFT. Size must be a power of two.
void fft_inplace(std::vector<std::complex<double>>& a, bool inverse);

inline std::size_t next_pow2(std::size_t n) {
    std::size_t p = 1;
    while (p < n) p <<= 1;
    return p;
}

/// Forward DFT of a real signal, zero-padded to the given power-of-two size.
std::vector<std::complex<double>> fft_real(const std::vector<double>& x, std::size_t size);

} // namespace revblind
