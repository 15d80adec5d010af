#include "stepviz/trainer.hpp"

#include <algorithm>
#include <cstdio>

#include "stepviz/errors.hpp"
#include "stepviz/optim.hpp"

namespace stepviz {

double TrainResult::final_loss() const {
    if (loss_log.empty()) throw EmptyInputError("final_loss: empty loss log");
    const std::size_t n = std::min<std::size_t>(100, loss_log.size());
    double s = 0.0;
    for (std::size_t i = loss_log.size() - n; i < loss_log.size(); ++i) s += loss_log[i];
    return s / static_cast<double>(n);
}

TrainResult train_pair_model(DenoiserNet& net, const std::vector<SynthTask>& tasks,
                             const NoiseSchedule& sched, const CondFeatures& feats,
                             const TrainConfig& cfg) {
    if (tasks.empty()) throw EmptyInputError("train_pair_model: no tasks");
    if (cfg.steps < 1) throw ContractError("train_pair_model: steps must be >= 1");
    if (cfg.batch_size < 1) throw ContractError("train_pair_model: batch_size must be >= 1");
    if (cfg.lr <= 0.0) throw ContractError("train_pair_model: lr must be positive");
    if (cfg.pair_stride_max < 1)
        throw ContractError("train_pair_model: pair_stride_max must be >= 1");
    if (cfg.single_slice_fraction < 0.0 || cfg.single_slice_fraction > 1.0)
        throw ContractError("train_pair_model: single_slice_fraction must be in [0,1]");
    for (const SynthTask& task : tasks)
        if (task.spec.steps.size() < 2)
            throw ContractError("train_pair_model: every task needs at least two steps");

    AdamConfig acfg;
    acfg.lr = cfg.lr;
    Adam opt(net.params(), acfg);
    Rng rng(cfg.seed);
    const Tensor pair_mask = build_pair_mask(net.config().tokens_per_slice, cfg.cross_weight);

    TrainResult result;
    result.loss_log.reserve(static_cast<std::size_t>(cfg.steps));
    double window_sum = 0.0;
    for (int step = 0; step < cfg.steps; ++step) {
        const bool single_batch = rng.uniform() < cfg.single_slice_fraction;
        std::vector<TrainItem> batch;
        batch.reserve(static_cast<std::size_t>(cfg.batch_size));
        for (int b = 0; b < cfg.batch_size; ++b) {
            const SynthTask& task = tasks[static_cast<std::size_t>(
                rng.uniform_int(0, static_cast<int>(tasks.size()) - 1))];
            const int n = static_cast<int>(task.spec.steps.size());
            if (single_batch) {
                batch.push_back(make_single_item(task, rng.uniform_int(0, n - 1), feats));
            } else {
                const int i = rng.uniform_int(0, n - 2);
                const int j = rng.uniform_int(i + 1, std::min(n - 1, i + cfg.pair_stride_max));
                batch.push_back(make_pair_item(task, i, j, feats));
            }
        }
        opt.zero_grads();
        const double loss = train_step(net, batch, sched, cfg.p_uncond, rng,
                                       single_batch ? nullptr : &pair_mask, cfg.mask_mode);
        opt.step();
        result.loss_log.push_back(loss);
        window_sum += loss;
        if (cfg.log_every > 0 && (step + 1) % cfg.log_every == 0) {
            std::fprintf(stderr, "train step %d/%d  mean loss %.6f\n", step + 1, cfg.steps,
                         window_sum / cfg.log_every);
            window_sum = 0.0;
        }
    }
    return result;
}

}  // namespace stepviz
