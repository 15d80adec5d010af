#pragma once

#include <vector>

#include "stepviz/tensor.hpp"

namespace stepviz {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Standard Adam. Descends; callers that maximize negate their objective.
// A run in which every step sees zero gradients leaves parameters bitwise
// unchanged (moments stay exactly zero), which the fine-tune K=0 contract
// relies on.
class Adam {
public:
    explicit Adam(std::vector<Tensor> params, AdamConfig cfg = {});

    void step();
    void zero_grads();
    void set_lr(double lr) { cfg_.lr = lr; }
    double lr() const { return cfg_.lr; }
    long t() const { return t_; }

private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
    AdamConfig cfg_;
    long t_ = 0;
};

}  // namespace stepviz
