#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "doctest.h"
#include "stepviz/tensor.hpp"

namespace stepviz::testutil {

// Central-difference gradient check: runs `fn` once under a tape, then
// perturbs every element of every watched tensor and compares the analytic
// gradient against (f(x+h) - f(x-h)) / 2h. `fn` must be deterministic and
// return a scalar tensor.
inline void check_grads(const std::function<Tensor()>& fn, const std::vector<Tensor>& watched,
                        double h = 1e-5, double tol = 1e-6) {
    GradTape tape;
    {
        TapeScope scope(tape);
        Tensor loss = fn();
        tape.backward(loss);
    }
    std::vector<std::vector<double>> analytic;
    analytic.reserve(watched.size());
    for (const Tensor& w : watched) analytic.push_back(w.grad());
    tape.zero_all_grads();

    for (std::size_t wi = 0; wi < watched.size(); ++wi) {
        Tensor w = watched[wi];
        for (std::size_t k = 0; k < w.numel(); ++k) {
            const double orig = w.data()[k];
            double fp, fm;
            {
                NoTapeScope off;
                w.data()[k] = orig + h;
                fp = fn().item();
                w.data()[k] = orig - h;
                fm = fn().item();
                w.data()[k] = orig;
            }
            const double fd = (fp - fm) / (2.0 * h);
            const double got = analytic[wi][k];
            const double err = std::fabs(fd - got) / std::max(1.0, std::fabs(fd));
            INFO("tensor ", wi, " element ", k, ": analytic ", got, " vs fd ", fd);
            CHECK(err < tol);
        }
    }
}

inline Tensor make_seeded(std::vector<int> shape, std::uint64_t seed, double stddev = 1.0,
                          bool requires_grad = true) {
    Rng rng(seed);
    return Tensor::randn(std::move(shape), rng, stddev, requires_grad);
}

}  // namespace stepviz::testutil
