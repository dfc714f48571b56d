#pragma once

#include <vector>

#include "revblind/layers.hpp"

namespace revblind {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Bias-corrected Adam over a fixed parameter set. Moment buffers are owned
/// here and shaped like their parameters; the step counter starts at zero.
class Adam {
public:
    explicit Adam(std::vector<Param*> params, AdamConfig cfg = {});

    /// Consume the accumulated gradients and update the parameters.
    void step();
    void zero_grad();

    long step_count() const { return t_; }
    void set_lr(double lr) { cfg_.lr = lr; }
    double lr() const { return cfg_.lr; }

private:
    std::vector<Param*> params_;
    AdamConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    long t_ = 0;
};

} // namespace revblind
