#include "revblind/acoustics.hpp"

#include "revblind/errors.hpp"

#include <algorithm>
#include <cmath>
#include <complex>

namespace revblind {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kEdcFloorRatio = 1e-12; // -120 dB
constexpr double kC50ClampDb = 80.0;

using cplx = std::complex<double>;

/// Butterworth low-pass prototype poles, unit cutoff, left half-plane.
std::vector<cplx> butterworth_poles(int order) {
    std::vector<cplx> poles;
    poles.reserve(order);
    for (int k = 1; k <= order; ++k) {
        const double theta = kPi * (2.0 * k + order - 1.0) / (2.0 * order);
        poles.emplace_back(std::cos(theta), std::sin(theta));
    }
    return poles;
}

cplx bilinear(const cplx& s) { return (1.0 + s) / (1.0 - s); }

/// Cascade response at digital frequency w (rad/sample), gain included.
cplx sos_response(const SosFilter& f, double w) {
    const cplx z = std::polar(1.0, w);
    const cplx zi = 1.0 / z;
    cplx h(f.gain, 0.0);
    for (const Biquad& s : f.sections) {
        h *= (s.b0 + s.b1 * zi + s.b2 * zi * zi) / (1.0 + s.a1 * zi + s.a2 * zi * zi);
    }
    return h;
}

/// Pair conjugate z-plane poles into denominators; numerators supplied per
/// section. Poles are expected in conjugate pairs (order 6 -> 3 sections).
std::vector<Biquad> pair_sections(std::vector<cplx> zpoles,
                                  const std::vector<std::array<double, 3>>& numerators) {
    // Keep one pole of each conjugate pair (positive imaginary part first,
    // real poles would come in pairs from the transforms used here).
    std::sort(zpoles.begin(), zpoles.end(), [](const cplx& a, const cplx& b) {
        if (std::abs(a) != std::abs(b)) return std::abs(a) < std::abs(b);
        return std::arg(a) < std::arg(b);
    });
    std::vector<cplx> upper;
    for (const cplx& p : zpoles) {
        if (p.imag() > 1e-12) upper.push_back(p);
    }
    if (upper.size() != numerators.size()) {
        throw NumericalError("octave filter design: poles did not form conjugate pairs");
    }
    std::vector<Biquad> sections;
    for (std::size_t i = 0; i < upper.size(); ++i) {
        const cplx p = upper[i];
        Biquad s;
        s.b0 = numerators[i][0];
        s.b1 = numerators[i][1];
        s.b2 = numerators[i][2];
        s.a1 = -2.0 * p.real();
        s.a2 = std::norm(p);
        sections.push_back(s);
    }
    return sections;
}

SosFilter design_bandpass6(double lo_hz, double hi_hz, double center_hz, double fs) {
    const double w1 = std::tan(kPi * lo_hz / fs);
    const double w2 = std::tan(kPi * hi_hz / fs);
    const double w0sq = w1 * w2;
    const double bw = w2 - w1;

    std::vector<cplx> zpoles;
    for (const cplx& p : butterworth_poles(3)) {
        // LP prototype pole -> two band-pass poles.
        const cplx bp = p * (bw / 2.0);
        const cplx root = std::sqrt(bp * bp - w0sq);
        zpoles.push_back(bilinear(bp + root));
        zpoles.push_back(bilinear(bp - root));
    }
    // Zeros: three at z=1 and three at z=-1; (z-1)(z+1) per section.
    SosFilter f;
    f.sections = pair_sections(std::move(zpoles), {{{1, 0, -1}}, {{1, 0, -1}}, {{1, 0, -1}}});

    const double wc = 2.0 * kPi * center_hz / fs;
    f.gain = 1.0 / std::abs(sos_response(f, wc));
    return f;
}

SosFilter design_highpass6(double cutoff_hz, double norm_hz, double fs) {
    const double wc = std::tan(kPi * cutoff_hz / fs);
    std::vector<cplx> zpoles;
    for (const cplx& p : butterworth_poles(6)) {
        zpoles.push_back(bilinear(wc / p));
    }
    // Six zeros at z=1; (z-1)^2 per section.
    SosFilter f;
    f.sections = pair_sections(std::move(zpoles), {{{1, -2, 1}}, {{1, -2, 1}}, {{1, -2, 1}}});
    const double w = 2.0 * kPi * norm_hz / fs;
    f.gain = 1.0 / std::abs(sos_response(f, w));
    return f;
}

} // namespace

std::array<OctaveBand, kNumOctaveBands> octave_bands(double sample_rate) {
    const double nyquist = sample_rate / 2.0;
    std::array<OctaveBand, kNumOctaveBands> bands;
    for (int b = 0; b < kNumOctaveBands; ++b) {
        const double c = kOctaveCentersHz[b];
        bands[b] = {c, c / std::sqrt(2.0), std::min(c * std::sqrt(2.0), nyquist)};
    }
    return bands;
}

SosFilter design_octave_filter(const OctaveBand& band, double sample_rate) {
    const double nyquist = sample_rate / 2.0;
    if (!(band.lo > 0.0) || !(band.hi > band.lo) || band.hi > nyquist) {
        throw ValueError("design_octave_filter: band edges outside (0, Nyquist]");
    }
    if (band.hi >= 0.999 * nyquist) {
        return design_highpass6(band.lo, std::sqrt(band.lo * band.hi), sample_rate);
    }
    return design_bandpass6(band.lo, band.hi, band.center, sample_rate);
}

SampleBuffer sos_filter(const SosFilter& f, const SampleBuffer& x) {
    SampleBuffer out = x;
    for (const Biquad& s : f.sections) {
        double z1 = 0.0, z2 = 0.0;
        for (double& v : out.samples) {
            const double in = v;
            const double y = s.b0 * in + z1;
            z1 = s.b1 * in - s.a1 * y + z2;
            z2 = s.b2 * in - s.a2 * y;
            v = y;
        }
    }
    for (double& v : out.samples) v *= f.gain;
    return out;
}

SampleBuffer octave_filter(const SampleBuffer& h, const OctaveBand& band) {
    validate(h, "octave_filter");
    return sos_filter(design_octave_filter(band, h.sample_rate), h);
}

std::size_t detect_direct(const SampleBuffer& h) {
    validate(h, "detect_direct");
    std::size_t best = 0;
    double best_val = -1.0;
    for (std::size_t i = 0; i < h.samples.size(); ++i) {
        const double v = std::fabs(h.samples[i]);
        if (v > best_val) {
            best_val = v;
            best = i;
        }
    }
    if (best_val == 0.0) {
        throw ValueError("detect_direct: all-zero input");
    }
    return best;
}

EnergyDecayCurve schroeder_edc(const SampleBuffer& h_b) {
    validate(h_b, "schroeder_edc");
    const std::size_t n = h_b.samples.size();
    std::vector<double> tail(n);
    double acc = 0.0;
    for (std::size_t i = n; i-- > 0;) {
        acc += h_b.samples[i] * h_b.samples[i];
        tail[i] = acc;
    }
    if (acc <= 0.0) {
        throw ValueError("schroeder_edc: zero-energy input");
    }
    EnergyDecayCurve edc;
    edc.values_db.resize(n);
    const double total = acc;
    for (std::size_t i = 0; i < n; ++i) {
        edc.values_db[i] = 10.0 * std::log10(std::max(tail[i] / total, kEdcFloorRatio));
    }
    edc.values_db[0] = 0.0;
    return edc;
}

double estimate_t60(const EnergyDecayCurve& edc, double sample_rate) {
    if (edc.values_db.empty() || !(sample_rate > 0.0)) {
        throw ValueError("estimate_t60: invalid input");
    }
    const auto& v = edc.values_db;
    std::size_t i5 = v.size(), i25 = v.size();
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i5 == v.size() && v[i] <= -5.0) i5 = i;
        if (v[i] <= -25.0) {
            i25 = i;
            break;
        }
    }
    if (i25 == v.size()) {
        throw ValueError("estimate_t60: decay curve never reaches -25 dB (RIR too short)");
    }
    // Least-squares line over the -5..-25 dB segment, time in seconds.
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    const double n = static_cast<double>(i25 - i5 + 1);
    for (std::size_t i = i5; i <= i25; ++i) {
        const double t = static_cast<double>(i) / sample_rate;
        sx += t;
        sy += v[i];
        sxx += t * t;
        sxy += t * v[i];
    }
    const double denom = n * sxx - sx * sx;
    if (denom <= 0.0) {
        throw ValueError("estimate_t60: degenerate fit segment");
    }
    const double slope = (n * sxy - sx * sy) / denom; // dB/s
    if (!(slope < 0.0)) {
        throw ValueError("estimate_t60: non-decaying EDC segment");
    }
    return -60.0 / slope;
}

double compute_c50(const SampleBuffer& h_b, std::size_t direct_idx, double sample_rate) {
    validate(h_b, "compute_c50");
    const std::size_t len = h_b.samples.size();
    if (direct_idx >= len) {
        throw ValueError("compute_c50: direct index beyond buffer");
    }
    const std::size_t boundary =
        direct_idx + static_cast<std::size_t>(std::lrint(0.050 * sample_rate));
    if (boundary >= len) {
        throw ValueError("compute_c50: 50 ms boundary beyond buffer end");
    }
    double early = 0.0, late = 0.0;
    for (std::size_t i = direct_idx; i < boundary; ++i) early += h_b.samples[i] * h_b.samples[i];
    for (std::size_t i = boundary; i < len; ++i) late += h_b.samples[i] * h_b.samples[i];
    if (late <= 0.0) return kC50ClampDb;
    if (early <= 0.0) return -kC50ClampDb;
    return std::clamp(10.0 * std::log10(early / late), -kC50ClampDb, kC50ClampDb);
}

std::array<double, 2 * kNumOctaveBands> AcousticParams::flat() const {
    std::array<double, 2 * kNumOctaveBands> out{};
    for (int b = 0; b < kNumOctaveBands; ++b) {
        out[b] = t60[b];
        out[kNumOctaveBands + b] = c50[b];
    }
    return out;
}

AcousticParams ground_truth_params(const SampleBuffer& h) {
    validate(h, "ground_truth_params");
    const std::size_t direct = detect_direct(h);
    const auto bands = octave_bands(h.sample_rate);
    AcousticParams p;
    for (int b = 0; b < kNumOctaveBands; ++b) {
        const SampleBuffer filtered = octave_filter(h, bands[b]);
        p.t60[b] = estimate_t60(schroeder_edc(filtered), h.sample_rate);
        p.c50[b] = compute_c50(filtered, direct, h.sample_rate);
    }
    return p;
}

} // namespace revblind
