#include "stepviz/schedule.hpp"

#include <cmath>

namespace stepviz {

namespace {

void validate(const NoiseSchedule& s) {
    if (s.T < 1 || static_cast<int>(s.alpha.size()) != s.T)
        throw ContractError("NoiseSchedule: |alpha| must equal T >= 1");
    for (double a : s.alpha)
        if (!(a > 0.0) || a > 1.0) throw ContractError("NoiseSchedule: alpha_t must be in (0,1]");
    for (int t = 1; t < s.T; ++t)
        if (s.alpha[static_cast<std::size_t>(t)] > s.alpha[static_cast<std::size_t>(t) - 1])
            throw ContractError("NoiseSchedule: alpha must be non-increasing");
    if (s.alpha.front() <= 0.95) throw ContractError("NoiseSchedule: alpha_1 must exceed 0.95");
    if (s.alpha.back() >= 0.01) throw ContractError("NoiseSchedule: alpha_T must be below 0.01");
}

}  // namespace

NoiseSchedule NoiseSchedule::cosine(int T) {
    NoiseSchedule s;
    s.T = T;
    if (T >= 1) {
        const double off = 0.008;
        auto f = [off](double u) {
            const double x = (u + off) / (1.0 + off) * (3.14159265358979323846 / 2.0);
            const double c = std::cos(x);
            return c * c;
        };
        const double f0 = f(0.0);
        s.alpha.resize(static_cast<std::size_t>(T));
        for (int t = 1; t <= T; ++t) {
            double a = f(static_cast<double>(t) / T) / f0;
            if (a < 1e-4) a = 1e-4;
            if (a > 1.0) a = 1.0;
            s.alpha[static_cast<std::size_t>(t) - 1] = a;
        }
    }
    validate(s);
    return s;
}

NoiseSchedule NoiseSchedule::from_alphas(std::vector<double> alpha) {
    NoiseSchedule s;
    s.T = static_cast<int>(alpha.size());
    s.alpha = std::move(alpha);
    validate(s);
    return s;
}

double NoiseSchedule::alpha_at(int t) const {
    if (t == 0) return 1.0;
    if (t < 1 || t > T) throw IndexError("NoiseSchedule: t out of range");
    return alpha[static_cast<std::size_t>(t) - 1];
}

Tensor forward_diffuse(const Tensor& z0, int t, const Tensor& eps,
                       const NoiseSchedule& sched) {
    if (z0.shape() != eps.shape()) throw DimError("forward_diffuse: eps shape mismatch");
    if (t < 1 || t > sched.T) throw IndexError("forward_diffuse: t out of range");
    const double a = sched.alpha_at(t);
    return add(scale(z0, std::sqrt(a)), scale(eps, std::sqrt(1.0 - a)));
}

Tensor ddim_update(const Tensor& zt, const Tensor& eps_hat, int t,
                   const NoiseSchedule& sched) {
    if (zt.shape() != eps_hat.shape()) throw DimError("ddim_update: shape mismatch");
    if (t < 1 || t > sched.T) throw IndexError("ddim_update: t out of range");
    const double a_t = sched.alpha_at(t);
    const double a_prev = sched.alpha_at(t - 1);
    // z0 estimate, then re-noise to t-1 with the same estimate (eta = 0)
    const Tensor z0_hat = scale(sub(zt, scale(eps_hat, std::sqrt(1.0 - a_t))),
                                1.0 / std::sqrt(a_t));
    return add(scale(z0_hat, std::sqrt(a_prev)), scale(eps_hat, std::sqrt(1.0 - a_prev)));
}

}  // namespace stepviz
