#pragma once

#include <string>

#include "revblind/layers.hpp"

namespace revblind {

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::string worst_param;
    std::size_t checked = 0;
};

/// Verify analytic gradients of a scalar probe loss (a fixed random weighted
/// sum of the outputs) against central finite differences, parameter by
/// parameter. Requires the stack and input in check64 precision. Relative
/// error uses denominator max(|analytic|, |numeric|, 0.01*grad_rms + 1e-8) so
/// near-zero entries do not blow up the ratio.
///
/// `max_per_param` caps how many components of each parameter are probed
/// (evenly strided); 0 probes every component.
GradCheckResult grad_check(Layer& stack, const Tensor& x, double eps = 1e-5,
                           std::size_t max_per_param = 0);

} // namespace revblind
