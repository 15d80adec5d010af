#pragma once

#include <vector>

#include "stepviz/tensor.hpp"

namespace stepviz {

// Variance-preserving schedule. alpha[t-1] is the cumulative signal
// coefficient at step t (1-indexed): z_t = sqrt(a_t) z_0 + sqrt(1-a_t) eps.
struct NoiseSchedule {
    int T = 0;
    std::vector<double> alpha;  // strictly per-t, non-increasing, in (0,1]

    // Cosine schedule (s = 0.008) normalized to f(0), clamped at 1e-4.
    static NoiseSchedule cosine(int T);
    // Adopts a caller-supplied signal curve after validating the invariants.
    static NoiseSchedule from_alphas(std::vector<double> alpha);

    // alpha_at(0) == 1 by convention (the noiseless endpoint of the chain).
    double alpha_at(int t) const;
};

// Eq.-style forward noising: sqrt(a_t) z0 + sqrt(1-a_t) eps; 1 <= t <= T.
Tensor forward_diffuse(const Tensor& z0, int t, const Tensor& eps,
                       const NoiseSchedule& sched);

// One deterministic DDIM reverse step: x_t plus the model's noise estimate
// give x_{t-1}. Records on the active tape when eps_hat carries gradients.
Tensor ddim_update(const Tensor& zt, const Tensor& eps_hat, int t,
                   const NoiseSchedule& sched);

}  // namespace stepviz
