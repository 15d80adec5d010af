#include "stepviz/pairwise.hpp"

namespace stepviz {

namespace {

void check_lambda(double lambda) {
    if (!(lambda > 0.0) || lambda > 1.0)
        throw ContractError("cross_weight lambda must be in (0,1]");
}

}  // namespace

Tensor build_mask(int m, int c_tok, double lambda) {
    if (m < 1 || c_tok < 0) throw ContractError("build_mask: m >= 1, c_tok >= 0 required");
    check_lambda(lambda);
    const int n = c_tok + 2 * m;
    Tensor mask = Tensor::full({n, n}, 1.0);
    for (int r = 0; r < n; ++r) {
        for (int c = 0; c < n; ++c) {
            const bool r_img = r >= c_tok;
            const bool c_img = c >= c_tok;
            if (!r_img || !c_img) continue;  // conditioning rows/cols stay 1
            const int rs = (r - c_tok) / m;
            const int cs = (c - c_tok) / m;
            if (rs != cs) mask.data()[static_cast<std::size_t>(r) * n + c] = lambda;
        }
    }
    return mask;
}

Tensor build_pair_mask(int m, double lambda) {
    if (m < 1) throw ContractError("build_pair_mask: m >= 1 required");
    check_lambda(lambda);
    const int n = 3 + 2 * m;
    // slice id per token: -1 goal (visible to all), 0 pair-half i, 1 half j
    auto half_of = [m](int idx) {
        if (idx == 0) return -1;
        if (idx == 1) return 0;
        if (idx == 2) return 1;
        return idx - 3 < m ? 0 : 1;
    };
    Tensor mask = Tensor::full({n, n}, 1.0);
    for (int r = 0; r < n; ++r) {
        const int rh = half_of(r);
        if (rh < 0) continue;
        for (int c = 0; c < n; ++c) {
            const int ch = half_of(c);
            if (ch < 0 || ch == rh) continue;
            mask.data()[static_cast<std::size_t>(r) * n + c] = lambda;
        }
    }
    return mask;
}

std::pair<Tensor, Tensor> pair_denoise(const DenoiserNet& net, const LatentPair& pair, int t,
                                       const Conditioning& cond, const Tensor& mask,
                                       MaskMode mode) {
    if (pair.zi.shape() != pair.zj.shape()) throw DimError("pair_denoise: slice shape mismatch");
    auto out = net.denoise({pair.zi, pair.zj}, t, cond, &mask, mode);
    return {out[0], out[1]};
}

Tensor CondFeatures::goal(const std::string& goal_text) const {
    // bag features are flat [d]; conditioning tokens are row vectors
    return Tensor::from_data({1, d_goal}, goal_features(goal_text, d_goal).vec());
}

Tensor CondFeatures::step(const std::string& step_text) const {
    return Tensor::from_data(
        {1, d_step}, step_features(segment(step_text, max_tokens), d_step, k_max).vec());
}

Conditioning CondFeatures::pair_cond(const TaskSpec& task, int i, int j) const {
    const int n = static_cast<int>(task.steps.size());
    if (i < 0 || j < 0 || i >= n || j >= n || i == j)
        throw IndexError("pair_cond: bad step indices");
    Conditioning c;
    c.goal = goal(task.goal);
    c.steps = {step(task.steps[static_cast<std::size_t>(i)]),
               step(task.steps[static_cast<std::size_t>(j)])};
    return c;
}

Conditioning CondFeatures::single_cond(const TaskSpec& task, int i) const {
    if (i < 0 || i >= static_cast<int>(task.steps.size()))
        throw IndexError("single_cond: bad step index");
    Conditioning c;
    c.goal = goal(task.goal);
    c.steps = {step(task.steps[static_cast<std::size_t>(i)])};
    return c;
}

namespace {

// Shared reverse chain. When committed_zi is non-null, slice i is re-noised
// from that latent at every level (repaint) and pinned to it at the end.
std::pair<Tensor, Tensor> run_pair_chain(const DenoiserNet& net, const Conditioning& cond,
                                         const NoiseSchedule& sched, const PairGenConfig& cfg,
                                         Tensor xi, Tensor xj, const Tensor* committed_zi,
                                         Rng& rng) {
    const Tensor mask = build_pair_mask(net.config().tokens_per_slice, cfg.cross_weight);
    const Conditioning uncond = Conditioning::null_for(2);
    for (int t = sched.T; t >= 1; --t) {
        if (committed_zi != nullptr) {
            Tensor noise = Tensor::randn(committed_zi->shape(), rng);
            xi = forward_diffuse(*committed_zi, t, noise, sched);
        }
        const auto fc = net.denoise({xi, xj}, t, cond, &mask, cfg.mode);
        const auto fu = net.denoise({xi, xj}, t, uncond, &mask, cfg.mode);
        if (committed_zi == nullptr)
            xi = ddim_update(xi, cfg_combine(fc[0], fu[0], cfg.guidance_w), t, sched);
        xj = ddim_update(xj, cfg_combine(fc[1], fu[1], cfg.guidance_w), t, sched);
    }
    if (committed_zi != nullptr) xi = *committed_zi;
    return {xi, xj};
}

Tensor randn_latent(const DenoiserNet& net, Rng& rng) {
    return Tensor::randn({net.config().tokens_per_slice, net.config().channels}, rng);
}

}  // namespace

std::pair<Tensor, Tensor> generate_pair_from(const DenoiserNet& net, const Conditioning& cond,
                                             const NoiseSchedule& sched,
                                             const PairGenConfig& cfg, const Tensor& xi_T,
                                             const Tensor& xj_T) {
    NoTapeScope no_tape;
    Rng unused(0);
    auto [zi, zj] = run_pair_chain(net, cond, sched, cfg, xi_T, xj_T, nullptr, unused);
    return {decode_latent_tokens(zi), decode_latent_tokens(zj)};
}

std::pair<Tensor, Tensor> generate_pair(const DenoiserNet& net, const Conditioning& cond,
                                        const NoiseSchedule& sched, const PairGenConfig& cfg,
                                        std::uint64_t seed) {
    NoTapeScope no_tape;
    Rng rng(seed);
    Tensor xi = randn_latent(net, rng);
    Tensor xj = randn_latent(net, rng);
    auto [zi, zj] = run_pair_chain(net, cond, sched, cfg, xi, xj, nullptr, rng);
    return {decode_latent_tokens(zi), decode_latent_tokens(zj)};
}

SequencePlan SequencePlan::adjacent(int n_steps, Mode mode) {
    if (n_steps < 2) throw ContractError("SequencePlan: need at least two steps");
    SequencePlan plan;
    plan.mode = mode;
    for (int i = 0; i + 1 < n_steps; ++i) plan.pairs.emplace_back(i, i + 1);
    return plan;
}

SequencePlan::Mode SequencePlan::mode_of(const std::string& name) {
    if (name == "chain") return Mode::chain;
    if (name == "avg") return Mode::average;
    throw ConfigError("assembly must be chain or avg");
}

SequenceResult generate_sequence(const DenoiserNet& net, const TaskSpec& task,
                                 const SequencePlan& plan, const NoiseSchedule& sched,
                                 const PairGenConfig& cfg, const CondFeatures& feats,
                                 std::uint64_t seed) {
    const int n = static_cast<int>(task.steps.size());
    if (n < 2) throw ContractError("generate_sequence: need at least two steps");
    if (plan.pairs.size() != static_cast<std::size_t>(n) - 1)
        throw ContractError("generate_sequence: plan must cover all adjacent pairs");
    for (int i = 0; i + 1 < n; ++i)
        if (plan.pairs[static_cast<std::size_t>(i)] != std::make_pair(i, i + 1))
            throw ContractError("generate_sequence: plan pairs must be adjacent and ordered");

    NoTapeScope no_tape;
    Rng base(seed);
    SequenceResult result;
    result.images.resize(static_cast<std::size_t>(n));

    if (plan.mode == SequencePlan::Mode::chain) {
        Tensor committed;  // latent of slice i for the upcoming pair
        for (int p = 0; p + 1 < n; ++p) {
            Rng rng = base.fork(static_cast<std::uint64_t>(p));
            const Conditioning cond = feats.pair_cond(task, p, p + 1);
            Tensor zi, zj;
            if (p == 0) {
                Tensor xi = randn_latent(net, rng);
                Tensor xj = randn_latent(net, rng);
                std::tie(zi, zj) = run_pair_chain(net, cond, sched, cfg, xi, xj, nullptr, rng);
            } else {
                Tensor xj = randn_latent(net, rng);
                std::tie(zi, zj) = run_pair_chain(net, cond, sched, cfg, Tensor::zeros({1}),
                                                  xj, &committed, rng);
            }
            const Tensor vi = decode_latent_tokens(zi);
            const Tensor vj = decode_latent_tokens(zj);
            result.images[static_cast<std::size_t>(p)] = vi;
            result.images[static_cast<std::size_t>(p) + 1] = vj;
            result.pair_outputs.emplace_back(vi, vj);
            committed = zj;
        }
    } else {
        // independent pairs; interior images are the average of their two
        // instances
        std::vector<std::vector<Tensor>> instances(static_cast<std::size_t>(n));
        for (int p = 0; p + 1 < n; ++p) {
            Rng rng = base.fork(static_cast<std::uint64_t>(p));
            const Conditioning cond = feats.pair_cond(task, p, p + 1);
            Tensor xi = randn_latent(net, rng);
            Tensor xj = randn_latent(net, rng);
            auto [zi, zj] = run_pair_chain(net, cond, sched, cfg, xi, xj, nullptr, rng);
            const Tensor vi = decode_latent_tokens(zi);
            const Tensor vj = decode_latent_tokens(zj);
            instances[static_cast<std::size_t>(p)].push_back(vi);
            instances[static_cast<std::size_t>(p) + 1].push_back(vj);
            result.pair_outputs.emplace_back(vi, vj);
        }
        for (int i = 0; i < n; ++i) {
            auto& inst = instances[static_cast<std::size_t>(i)];
            result.images[static_cast<std::size_t>(i)] =
                inst.size() == 1 ? inst[0] : scale(add(inst[0], inst[1]), 0.5);
        }
    }
    return result;
}

std::vector<Tensor> generate_naive_sequence(const DenoiserNet& net, const TaskSpec& task,
                                            const NoiseSchedule& sched, double w,
                                            const CondFeatures& feats, std::uint64_t seed) {
    if (task.steps.empty()) throw ContractError("generate_naive_sequence: no steps");
    NoTapeScope no_tape;
    std::vector<Tensor> images;
    images.reserve(task.steps.size());
    for (int i = 0; i < static_cast<int>(task.steps.size()); ++i) {
        const Tensor z = sample(net, feats.single_cond(task, i), sched, w,
                                mix_seed(seed, static_cast<std::uint64_t>(i)), 0);
        images.push_back(decode_latent_tokens(z));
    }
    return images;
}

TrainItem make_pair_item(const SynthTask& task, int i, int j, const CondFeatures& feats) {
    TrainItem item;
    item.cond = feats.pair_cond(task.spec, i, j);
    item.slices = {encode_image_tokens(image_to_tokens(task.image_after_step(i))),
                   encode_image_tokens(image_to_tokens(task.image_after_step(j)))};
    return item;
}

TrainItem make_single_item(const SynthTask& task, int i, const CondFeatures& feats) {
    TrainItem item;
    item.cond = feats.single_cond(task.spec, i);
    item.slices = {encode_image_tokens(image_to_tokens(task.image_after_step(i)))};
    return item;
}

}  // namespace stepviz
