#include "stepviz/denoiser.hpp"

namespace stepviz {

Conditioning Conditioning::null_for(int slices) {
    Conditioning c;
    c.steps.resize(static_cast<std::size_t>(slices));
    return c;
}

DenoiserNet::DenoiserNet(const DenoiserConfig& cfg, Rng& rng)
    : cfg_(cfg),
      embed_(cfg.channels, cfg.d_model, rng),
      unembed_(cfg.d_model, cfg.channels, rng),
      proj_goal_(cfg.d_goal, cfg.d_model, rng),
      proj_step_(cfg.d_step, cfg.d_model, rng),
      time1_(cfg.d_time, cfg.d_model, rng),
      time2_(cfg.d_model, cfg.d_model, rng),
      null_goal_(Tensor::randn({1, cfg.d_goal}, rng, 0.1, true)),
      null_step_(Tensor::randn({1, cfg.d_step}, rng, 0.1, true)),
      pos_img_(Tensor::randn({cfg.tokens_per_slice, cfg.d_model}, rng, 0.1, true)),
      pos_goal_(Tensor::randn({1, cfg.d_model}, rng, 0.1, true)),
      pos_step_(Tensor::randn({1, cfg.d_model}, rng, 0.1, true)) {
    if (cfg.d_model < 2 || cfg.n_blocks < 1 || cfg.tokens_per_slice < 1)
        throw ContractError("DenoiserConfig: bad dimensions");
    blocks_.reserve(static_cast<std::size_t>(cfg.n_blocks));
    for (int i = 0; i < cfg.n_blocks; ++i) blocks_.emplace_back(cfg.d_model, rng);
}

std::vector<Tensor> DenoiserNet::denoise(const std::vector<Tensor>& slices, int t,
                                         const Conditioning& cond, const Tensor* mask,
                                         MaskMode mode) const {
    const int k = static_cast<int>(slices.size());
    const int m = cfg_.tokens_per_slice;
    if (k < 1) throw ContractError("denoise: needs at least one slice");
    if (cond.steps.size() != slices.size())
        throw DimError("denoise: one step conditioning per slice required");
    for (const Tensor& s : slices)
        if (s.shape() != std::vector<int>({m, cfg_.channels}))
            throw DimError("denoise: slice shape mismatch");
    const int n = 1 + k + k * m;
    if (mask != nullptr && mask->shape() != std::vector<int>({n, n}))
        throw DimError("denoise: mask must cover conditioning plus image tokens");

    ++forward_calls_;
    const Tensor time =
        time2_(silu(time1_(sinusoidal_embed(t, cfg_.d_time))));  // [1, d]

    std::vector<Tensor> tokens;
    tokens.reserve(static_cast<std::size_t>(1 + k + k));
    const Tensor& goal_feat = cond.goal ? *cond.goal : null_goal_;
    if (cond.goal) ++goal_uses_;
    tokens.push_back(add(add(proj_goal_(goal_feat), pos_goal_), time));
    for (int s = 0; s < k; ++s) {
        const auto& sf = cond.steps[static_cast<std::size_t>(s)];
        if (sf) ++step_uses_;
        tokens.push_back(add(add(proj_step_(sf ? *sf : null_step_), pos_step_), time));
    }
    for (int s = 0; s < k; ++s)
        tokens.push_back(add_rowvec(add(embed_(slices[static_cast<std::size_t>(s)]), pos_img_),
                                    time));

    Tensor x = concat_rows(tokens);
    for (const AttentionBlock& block : blocks_) x = block(x, mask, mode);

    std::vector<Tensor> out;
    out.reserve(slices.size());
    for (int s = 0; s < k; ++s) {
        const int begin = 1 + k + s * m;
        out.push_back(unembed_(slice_rows(x, begin, begin + m)));
    }
    return out;
}

std::vector<std::pair<std::string, Tensor>> DenoiserNet::named_params() {
    std::vector<std::pair<std::string, Tensor>> out;
    embed_.collect("embed", out);
    unembed_.collect("unembed", out);
    proj_goal_.collect("proj_goal", out);
    proj_step_.collect("proj_step", out);
    time1_.collect("time1", out);
    time2_.collect("time2", out);
    out.emplace_back("null_goal", null_goal_);
    out.emplace_back("null_step", null_step_);
    out.emplace_back("pos_img", pos_img_);
    out.emplace_back("pos_goal", pos_goal_);
    out.emplace_back("pos_step", pos_step_);
    for (std::size_t i = 0; i < blocks_.size(); ++i)
        blocks_[i].collect("block" + std::to_string(i), out);
    return out;
}

std::vector<Tensor> DenoiserNet::params() {
    std::vector<Tensor> out;
    for (auto& [name, t] : named_params()) out.push_back(t);
    return out;
}

void DenoiserNet::reset_counters() {
    forward_calls_ = 0;
    goal_uses_ = 0;
    step_uses_ = 0;
}

Tensor cfg_combine(const Tensor& f_cond, const Tensor& f_uncond, double w) {
    if (f_cond.shape() != f_uncond.shape()) throw DimError("cfg_combine: shape mismatch");
    return add(scale(f_cond, 1.0 + w), scale(f_uncond, -w));
}

double train_step(DenoiserNet& net, const std::vector<TrainItem>& batch,
                  const NoiseSchedule& sched, double p_uncond, Rng& rng,
                  const Tensor* mask, MaskMode mode) {
    if (batch.empty()) throw ContractError("train_step: empty batch");
    if (p_uncond < 0.0 || p_uncond > 1.0)
        throw ContractError("train_step: p_uncond must be in [0,1]");
    GradTape tape;
    TapeScope scope(tape);
    Tensor loss_sum = Tensor::zeros({1});
    for (const TrainItem& item : batch) {
        if (item.slices.empty()) throw ContractError("train_step: item without slices");
        const int t = rng.uniform_int(1, sched.T);
        std::vector<Tensor> zts, epss;
        for (const Tensor& z0 : item.slices) {
            Tensor eps = Tensor::randn(z0.shape(), rng);
            zts.push_back(forward_diffuse(z0, t, eps, sched));
            epss.push_back(std::move(eps));
        }
        Conditioning cond = item.cond;
        if (rng.uniform() < p_uncond) cond.goal.reset();
        if (rng.uniform() < p_uncond)
            for (auto& s : cond.steps) s.reset();
        const std::vector<Tensor> eps_hat = net.denoise(zts, t, cond, mask, mode);
        loss_sum = add(loss_sum, mse(concat_rows(eps_hat), concat_rows(epss)));
    }
    Tensor loss = scale(loss_sum, 1.0 / static_cast<double>(batch.size()));
    tape.zero_all_grads();
    tape.backward(loss);
    return loss.item();
}

Tensor sample(const DenoiserNet& net, const Conditioning& cond, const NoiseSchedule& sched,
              double w, std::uint64_t seed, int grad_window) {
    if (cond.steps.size() != 1) throw ContractError("sample: single-slice conditioning required");
    if (grad_window < 0 || grad_window > sched.T)
        throw ContractError("sample: grad_window must be in [0, T]");
    if (w < -1.0) throw ContractError("sample: w must be >= -1");
    Rng rng(seed);
    Tensor x;
    {
        NoTapeScope no_tape;
        x = Tensor::randn({net.config().tokens_per_slice, net.config().channels}, rng);
    }
    const Conditioning uncond = Conditioning::null_for(1);
    auto reverse_step = [&](int t) {
        const Tensor f_cond = net.denoise({x}, t, cond)[0];
        const Tensor f_uncond = net.denoise({x}, t, uncond)[0];
        x = ddim_update(x, cfg_combine(f_cond, f_uncond, w), t, sched);
    };
    for (int t = sched.T; t >= 1; --t) {
        if (t > grad_window) {
            NoTapeScope no_tape;
            reverse_step(t);
        } else {
            reverse_step(t);
        }
    }
    return x;
}

Tensor encode_image_tokens(const Tensor& tokens01) {
    return sub(scale(tokens01, 2.0), Tensor::full(tokens01.shape(), 1.0));
}

Tensor decode_latent_tokens(const Tensor& z) {
    return clamp01(scale(add(z, Tensor::full(z.shape(), 1.0)), 0.5));
}

}  // namespace stepviz
