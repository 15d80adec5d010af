#pragma once

#include <cstdint>
#include <vector>

#include "stepviz/denoiser.hpp"
#include "stepviz/pairwise.hpp"
#include "stepviz/schedule.hpp"
#include "stepviz/synth.hpp"

namespace stepviz {

// Knobs for the pairwise denoiser training loop. train_step applies one mask
// to its whole batch, so batches are kept homogeneous: each optimizer step is
// a single-slice batch (no mask) with probability single_slice_fraction,
// otherwise a pair batch trained under build_pair_mask(m, cross_weight).
struct TrainConfig {
    int steps = 4000;
    int batch_size = 8;
    double lr = 1e-3;
    double p_uncond = 0.1;
    double cross_weight = 0.5;
    MaskMode mask_mode = MaskMode::mul;
    int pair_stride_max = 2;  // pairs drawn with 1 <= j - i <= this
    double single_slice_fraction = 0.25;
    std::uint64_t seed = 1;
    int log_every = 0;  // >0 prints a running mean loss to stderr
};

struct TrainResult {
    std::vector<double> loss_log;  // one entry per optimizer step

    double final_loss() const;  // mean of the last 100 entries (or fewer)
};

// Trains phi in place with Adam under a private Rng(seed). Pairs are sampled
// task-uniform, then i uniform over steps, then j uniform over the stride
// window clipped to the task length. Tasks must all have at least two steps.
TrainResult train_pair_model(DenoiserNet& net, const std::vector<SynthTask>& tasks,
                             const NoiseSchedule& sched, const CondFeatures& feats,
                             const TrainConfig& cfg);

}  // namespace stepviz
