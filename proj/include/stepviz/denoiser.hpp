#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "stepviz/nn.hpp"
#include "stepviz/schedule.hpp"
#include "stepviz/tensor.hpp"

namespace stepviz {

struct DenoiserConfig {
    int d_model = 32;
    int n_blocks = 3;
    int tokens_per_slice = 64;  // m = w*h image tokens
    int channels = 3;
    int d_goal = 32;
    int d_step = 64;
    int d_time = 32;
};

// Conditioning features (pre-projection). nullopt means the learned null
// token is substituted — never a zero vector.
struct Conditioning {
    std::optional<Tensor> goal;                // [1, d_goal]
    std::vector<std::optional<Tensor>> steps;  // one per slice, each [1, d_step]

    static Conditioning null_for(int slices);
};

// Token-network denoiser f_phi over [goal, step_1..k, slice_1..k] tokens.
// Positions are slice-local (the same table for every slice) and all step
// tokens share one position vector, so slices are exchangeable under
// symmetric masks.
class DenoiserNet {
public:
    DenoiserNet(const DenoiserConfig& cfg, Rng& rng);

    // slices: k tensors [m, channels]; returns the per-slice noise estimates.
    std::vector<Tensor> denoise(const std::vector<Tensor>& slices, int t,
                                const Conditioning& cond, const Tensor* mask = nullptr,
                                MaskMode mode = MaskMode::mul) const;

    const DenoiserConfig& config() const { return cfg_; }
    std::vector<std::pair<std::string, Tensor>> named_params();
    std::vector<Tensor> params();

    // Instrumentation for tests and cost accounting.
    std::uint64_t forward_calls() const { return forward_calls_; }
    std::uint64_t goal_cond_uses() const { return goal_uses_; }
    std::uint64_t step_cond_uses() const { return step_uses_; }
    void reset_counters();

private:
    DenoiserConfig cfg_;
    Linear embed_, unembed_;
    Linear proj_goal_, proj_step_;
    Linear time1_, time2_;
    Tensor null_goal_, null_step_;
    Tensor pos_img_, pos_goal_, pos_step_;
    std::vector<AttentionBlock> blocks_;
    mutable std::uint64_t forward_calls_ = 0;
    mutable std::uint64_t goal_uses_ = 0;
    mutable std::uint64_t step_uses_ = 0;
};

// Eq.-literal guidance: (1+w) * f_cond - w * f_uncond.
Tensor cfg_combine(const Tensor& f_cond, const Tensor& f_uncond, double w);

struct TrainItem {
    std::vector<Tensor> slices;  // z0 per slice, each [m, channels]
    Conditioning cond;
};

// One training step: samples t and eps per item, applies independent
// goal/step conditioning dropout, and populates gradients on phi for the
// batch-mean MSE. The caller owns the optimizer update.
double train_step(DenoiserNet& net, const std::vector<TrainItem>& batch,
                  const NoiseSchedule& sched, double p_uncond, Rng& rng,
                  const Tensor* mask = nullptr, MaskMode mode = MaskMode::mul);

// Deterministic single-slice DDIM chain from x_T ~ N(0,I) under seed. The
// final grad_window steps run on the active tape; the prefix is tape-free.
Tensor sample(const DenoiserNet& net, const Conditioning& cond, const NoiseSchedule& sched,
              double w, std::uint64_t seed, int grad_window);

// Latent convention: z = 2v - 1 over pixel-token values v in [0,1].
Tensor encode_image_tokens(const Tensor& tokens01);
Tensor decode_latent_tokens(const Tensor& z);

}  // namespace stepviz
