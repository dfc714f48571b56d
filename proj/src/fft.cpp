#include "revblind/fft.hpp"

#include <cmath>

namespace revblind {

void fft_inplace(std::vector<std::complex<double>>& a, bool inverse) {
    const std::size_t n = a.size();
    if (n == 0 || (n & (n - 1)) != 0) {
        throw ValueError("fft: size must be a nonzero power of two, got " + std::to_string(n));
    }
    // Bit-reversal permutation.
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    const double sign = inverse ? 1.0 : -1.0;
    for (std::size_t len = 2; len <= n; len <<= 1) {
        const double ang = sign * 2.0 * 3.14159265358979323846 / static_cast<double>(len);
        const std::complex<double> wlen(std::cos(ang), std::sin(ang));
        for (std::size_t i = 0; i < n; i += len) {
            std::complex<double> w(1.0, 0.0);
            for (std::size_t k = 0; k < len / 2; ++k) {
                const std::complex<double> u = a[i + k];
                const std::complex<double> v = a[i + k + len / 2] * w;
                a[i + k] = u + v;
                a[i + k + len / 2] = u - v;
                w *= wlen;
            }
        }
    }
    if (inverse) {
        const double inv_n = 1.0 / static_cast<double>(n);
        for (auto& c : a) c *= inv_n;
    }
}

std::vector<std::complex<double>> fft_real(const std::vector<double>& x, std::size_t size) {
    if (size < x.size()) {
        throw ValueError("fft_real: target size smaller than input");
    }
    std::vector<std::complex<double>> a(size, {0.0, 0.0});
    for (std::size_t i = 0; i < x.size(); ++i) a[i] = {x[i], 0.0};
    fft_inplace(a, false);
    return a;
}

} // namespace revblind
