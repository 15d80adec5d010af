#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "stepviz/denoiser.hpp"
#include "stepviz/synth.hpp"
#include "stepviz/textproc.hpp"

namespace stepviz {

// Two-slice adjacency mask over [c_tok conditioning, slice_i, slice_j]:
// within-slice image blocks 1, cross-slice blocks lambda, conditioning
// rows/cols all 1. lambda in (0,1].
Tensor build_mask(int m, int c_tok, double lambda);

// Mask for the pair token layout [goal, step_i, step_j, z_i, z_j]: the goal
// row/col is 1 and every cross-pair interaction (z_i<->z_j, step_i<->z_j,
// step_j<->z_i, step_i<->step_j) is lambda, so each step token stays mostly
// attached to its own slice. lambda = 1 recovers the all-ones mask.
Tensor build_pair_mask(int m, double lambda);

struct LatentPair {
    Tensor zi, zj;  // [m, channels] each
    int i = 0;
    int j = 1;
};

// Runs the denoiser over the stacked pair; returns (eps_i, eps_j).
std::pair<Tensor, Tensor> pair_denoise(const DenoiserNet& net, const LatentPair& pair, int t,
                                       const Conditioning& cond, const Tensor& mask,
                                       MaskMode mode = MaskMode::mul);

// Deterministic text featurization for denoiser conditioning.
struct CondFeatures {
    int d_goal = 32;
    int d_step = 64;
    int max_tokens = 16;
    int k_max = 4;

    Tensor goal(const std::string& goal_text) const;
    Tensor step(const std::string& step_text) const;
    Conditioning pair_cond(const TaskSpec& task, int i, int j) const;
    Conditioning single_cond(const TaskSpec& task, int i) const;
};

struct PairGenConfig {
    double guidance_w = 2.0;
    double cross_weight = 0.5;
    MaskMode mode = MaskMode::mul;
};

// Joint reverse chain over the stacked pair; returns decoded [0,1] images
// ([m, channels] token layout). Fully deterministic under seed.
std::pair<Tensor, Tensor> generate_pair(const DenoiserNet& net, const Conditioning& cond,
                                        const NoiseSchedule& sched, const PairGenConfig& cfg,
                                        std::uint64_t seed);

// Same chain from caller-supplied terminal latents (used by symmetry tests).
std::pair<Tensor, Tensor> generate_pair_from(const DenoiserNet& net, const Conditioning& cond,
                                             const NoiseSchedule& sched,
                                             const PairGenConfig& cfg, const Tensor& xi_T,
                                             const Tensor& xj_T);

struct SequencePlan {
    enum class Mode { chain, average };
    Mode mode = Mode::chain;
    std::vector<std::pair<int, int>> pairs;  // adjacent (i, i+1), in order

    static SequencePlan adjacent(int n_steps, Mode mode = Mode::chain);
    static Mode mode_of(const std::string& name);  // "chain" | "avg"
};

struct SequenceResult {
    std::vector<Tensor> images;                           // one per step, [m, ch] in [0,1]
    std::vector<std::pair<Tensor, Tensor>> pair_outputs;  // decoded per plan pair
};

// Assembles the full image sequence from overlapping adjacent pairs. In
// chain mode slice i of every pair after the first is the committed previous
// latent, re-noised to level t at each reverse step (repaint); in average
// mode pairs are generated independently and interior images are averaged.
SequenceResult generate_sequence(const DenoiserNet& net, const TaskSpec& task,
                                 const SequencePlan& plan, const NoiseSchedule& sched,
                                 const PairGenConfig& cfg, const CondFeatures& feats,
                                 std::uint64_t seed);

// Baseline: every step generated independently through the single-slice
// sampler (no pairing, no mask).
std::vector<Tensor> generate_naive_sequence(const DenoiserNet& net, const TaskSpec& task,
                                            const NoiseSchedule& sched, double w,
                                            const CondFeatures& feats, std::uint64_t seed);

// Training items from ground-truth tasks. v_i is the image after step i.
TrainItem make_pair_item(const SynthTask& task, int i, int j, const CondFeatures& feats);
TrainItem make_single_item(const SynthTask& task, int i, const CondFeatures& feats);

}  // namespace stepviz
