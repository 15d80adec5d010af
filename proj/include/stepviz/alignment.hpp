#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "stepviz/denoiser.hpp"
#include "stepviz/nn.hpp"
#include "stepviz/pairwise.hpp"
#include "stepviz/schedule.hpp"
#include "stepviz/synth.hpp"
#include "stepviz/textproc.hpp"

namespace stepviz {

struct AlignConfig {
    int d_model = 32;    // image tower width
    int tokens = 64;     // image tokens per slice (8x8, row-major)
    int channels = 3;
    int patch_side = 2;  // pixels per patch edge; tokens regroup into patches
    int d_align = 16;    // shared embedding width
    int d_goal = 32;
    int d_step = 64;
    int d_bag = 192;     // extra whole-text bag width for the step tower; the
                         // clause slots alone are too collision-prone to pin
                         // down source-vs-destination phrases
    int max_tokens = 16;
    int k_max = 4;
    double temperature = 0.07;  // InfoNCE logit scale is 1/temperature
};

// Dual encoder: a small attention tower over image tokens and linear heads
// over the parser text features. Both towers land on the unit sphere in
// d_align dimensions, so cosine similarity is a plain dot product.
class AlignmentModel {
public:
    AlignmentModel(const AlignConfig& cfg, Rng& init_rng);

    Tensor embed_image(const Tensor& image_tokens) const;   // [tokens, ch] -> [1, d_align]
    Tensor embed_step_text(const std::string& text) const;  // -> [1, d_align]
    Tensor embed_goal_text(const std::string& text) const;  // -> [1, d_align]

    const AlignConfig& config() const { return cfg_; }
    std::vector<std::pair<std::string, Tensor>> named_params();
    std::vector<Tensor> params();

private:
    AlignConfig cfg_;
    int side_ = 0;       // image edge in pixels
    int n_patches_ = 0;  // (side / patch_side)^2
    Linear img_embed_;   // patch_side^2 * channels -> d_model
    Tensor img_pos_;     // [n_patches, d_model]
    AttentionBlock block1_;
    AttentionBlock block2_;
    Tensor img_ln_g_, img_ln_b_;  // pooled-feature norm: spreads the pooled
                                  // vector away from the shared background
                                  // direction before projection
    Linear img_proj_;             // d_model -> d_align
    TextEncoder text_;
    Tensor goal_ln_g_, goal_ln_b_;
    Linear goal_proj_;  // d_goal -> d_align
    Tensor step_ln_g_, step_ln_b_;
    Linear step_proj_;  // d_step -> d_align
};

// CLIPScore-style reward on [0,1] image tokens:
//   r = 2.5 * max(0, (1 - gw) cos(img, step) + gw cos(img, goal))
// Returned as a [1] tensor so gradients can flow back into the image.
Tensor reward(const AlignmentModel& model, const Tensor& image_tokens,
              const std::string& goal_text, const std::string& step_text,
              double goal_weight = 0.0);

struct PretrainConfig {
    int steps = 4000;
    int batch = 16;
    double lr = 1e-3;
    double target_acc = 0.95;  // halt when held-out top-1 retrieval reaches this
    int eval_every = 100;
    std::uint64_t seed = 1;
    bool verbose = false;
};

struct PretrainResult {
    int steps_run = 0;
    int skipped_batches = 0;
    double holdout_acc = 0.0;
    std::vector<double> loss_log;  // one entry per optimizer step
};

// Keeps the first pair for every distinct world-state key.
std::vector<AlignPair> dedup_by_key(const std::vector<AlignPair>& pairs);

// Top-1 retrieval: fraction of images whose own text wins. group_size > 0
// scores within consecutive groups of that size (in-batch retrieval);
// group_size = 0 ranks against the whole pool.
double retrieval_accuracy(const AlignmentModel& model, const std::vector<AlignPair>& pairs,
                          int group_size = 0);

// Symmetric InfoNCE over in-batch negatives with state-key deduped batches.
// Degenerate batches (all texts equal) are skipped with a warning on stderr.
PretrainResult contrastive_pretrain(AlignmentModel& model, const std::vector<AlignPair>& train,
                                    const std::vector<AlignPair>& holdout,
                                    const PretrainConfig& cfg);

// Frozen source of (goal, step) draws for reward finetuning.
struct TaskSampler {
    std::vector<SynthTask> tasks;

    std::pair<std::string, std::string> draw(Rng& rng) const;
};

struct FinetuneConfig {
    int epochs = 3;
    int steps_per_epoch = 40;
    double lr = 1e-5;
    int grad_window = 5;  // K; must be <= sched.T
    double guidance_w = 2.0;
    double goal_reward_weight = 0.0;
    std::uint64_t seed = 1;
    bool verbose = false;
};

struct FinetuneResult {
    std::vector<double> epoch_mean_reward;
    int nan_skips = 0;
};

// Ascends the reward gradient through the last K sampling steps, updating
// only the denoiser. Non-finite gradients skip the step; three consecutive
// skips abort with NumericalAbort. The reward model and sampler stay frozen.
FinetuneResult finetune(DenoiserNet& net, const TaskSampler& sampler,
                        const AlignmentModel& reward_model, const NoiseSchedule& sched,
                        const CondFeatures& feats, const FinetuneConfig& cfg);

}  // namespace stepviz
