#include "revblind/optim.hpp"

#include <cmath>

namespace revblind {

Adam::Adam(std::vector<Param*> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const Param* p : params_) {
        m_.emplace_back(p->value.size(), 0.0);
        v_.emplace_back(p->value.size(), 0.0);
    }
}

void Adam::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Param& p = *params_[i];
        if (p.grad.size() != p.value.size()) {
            throw ValueError("adam: gradient shape mismatch for " + p.name);
        }
        std::vector<double>& m = m_[i];
        std::vector<double>& v = v_[i];
        for (std::size_t j = 0; j < p.value.size(); ++j) {
            const double g = p.grad.v[j];
            m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g;
            v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g * g;
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            p.value.v[j] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
        apply_precision(p.value);
        check_finite(p.value, "adam: " + p.name);
    }
}

void Adam::zero_grad() {
    for (Param* p : params_) std::fill(p->grad.v.begin(), p->grad.v.end(), 0.0);
}

} // namespace revblind
