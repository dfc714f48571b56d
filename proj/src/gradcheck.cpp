#include "revblind/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "revblind/rng.hpp"

namespace revblind {

namespace {

std::vector<double> probe_weights(std::size_t n) {
    Rng rng(derive_seed(0x67726164u, "grad-probe"));
    std::vector<double> w(n);
    for (double& x : w) x = rng.uniform(-1.0, 1.0);
    return w;
}

double probe_loss(Layer& stack, const Tensor& x, const std::vector<double>& w) {
    const Tensor y = stack.forward(x, false);
    double loss = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) loss += w[i] * y.v[i];
    return loss;
}

} // namespace

GradCheckResult grad_check(Layer& stack, const Tensor& x, double eps, std::size_t max_per_param) {
    if (stack.precision() != Precision::check64 || x.precision != Precision::check64) {
        throw ValueError("grad_check: stack and input must be in check64 precision");
    }

    // Analytic pass: probe loss L = sum_i w_i * y_i, so dL/dy = w.
    Tensor y = stack.forward(x, true);
    const std::vector<double> w = probe_weights(y.size());
    Tensor gout(y.shape, Precision::check64);
    gout.v = w;
    stack.zero_grad();
    stack.backward(gout);

    const std::vector<Param*> params = stack.params();
    double sq_sum = 0.0;
    std::size_t count = 0;
    for (const Param* p : params) {
        for (double g : p->grad.v) {
            sq_sum += g * g;
            ++count;
        }
    }
    const double grad_rms = count ? std::sqrt(sq_sum / static_cast<double>(count)) : 0.0;
    const double floor = 0.01 * grad_rms + 1e-8;

    GradCheckResult result;
    for (Param* p : params) {
        const std::size_t n = p->value.size();
        const std::size_t checks = (max_per_param == 0) ? n : std::min(n, max_per_param);
        const std::size_t stride = std::max<std::size_t>(1, n / std::max<std::size_t>(checks, 1));
        for (std::size_t c = 0; c < checks; ++c) {
            const std::size_t j = std::min(n - 1, c * stride);
            const double saved = p->value.v[j];
            p->value.v[j] = saved + eps;
            const double lp = probe_loss(stack, x, w);
            p->value.v[j] = saved - eps;
            const double lm = probe_loss(stack, x, w);
            p->value.v[j] = saved;

            const double numeric = (lp - lm) / (2.0 * eps);
            const double analytic = p->grad.v[j];
            const double denom = std::max({std::fabs(analytic), std::fabs(numeric), floor});
            const double rel = std::fabs(analytic - numeric) / denom;
            ++result.checked;
            if (rel > result.max_rel_err) {
                result.max_rel_err = rel;
                result.worst_param = p->name + "[" + std::to_string(j) + "]";
            }
        }
    }
    return result;
}

} // namespace revblind
