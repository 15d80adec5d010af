#include "stepviz/alignment.hpp"

#include <cmath>
#include <iostream>
#include <unordered_set>

#include "stepviz/errors.hpp"
#include "stepviz/optim.hpp"

namespace stepviz {

namespace {

const AlignConfig& validated(const AlignConfig& cfg) {
    if (cfg.d_model < 1 || cfg.tokens < 1 || cfg.channels < 1 || cfg.d_align < 1 ||
        cfg.d_goal < 1 || cfg.d_step < 1)
        throw ContractError("AlignmentModel: dimensions must be positive");
    if (cfg.k_max < 1 || cfg.d_step % cfg.k_max != 0)
        throw ContractError("AlignmentModel: d_step must be a positive multiple of k_max");
    if (cfg.d_bag < 0) throw ContractError("AlignmentModel: d_bag must be >= 0");
    if (cfg.temperature <= 0.0)
        throw ContractError("AlignmentModel: temperature must be positive");
    return cfg;
}

int image_side_of(const AlignConfig& cfg) {
    const int side = static_cast<int>(std::lround(std::sqrt(double(cfg.tokens))));
    if (side * side != cfg.tokens)
        throw ContractError("AlignmentModel: tokens must form a square image");
    if (cfg.patch_side < 1 || side % cfg.patch_side != 0)
        throw ContractError("AlignmentModel: patch_side must divide the image side");
    return side;
}

}  // namespace

AlignmentModel::AlignmentModel(const AlignConfig& cfg, Rng& init_rng)
    : cfg_(validated(cfg)),
      side_(image_side_of(cfg)),
      n_patches_((side_ / cfg.patch_side) * (side_ / cfg.patch_side)),
      img_embed_(cfg.patch_side * cfg.patch_side * cfg.channels, cfg.d_model, init_rng),
      img_pos_(Tensor::randn({n_patches_, cfg.d_model}, init_rng, 0.1, true)),
      block1_(cfg.d_model, init_rng),
      block2_(cfg.d_model, init_rng),
      img_ln_g_(Tensor::full({cfg.d_model}, 1.0, true)),
      img_ln_b_(Tensor::zeros({cfg.d_model}, true)),
      img_proj_(cfg.d_model, cfg.d_align, init_rng),
      text_(cfg.d_goal, cfg.d_step, cfg.k_max, init_rng),
      goal_ln_g_(Tensor::full({cfg.d_goal}, 1.0, true)),
      goal_ln_b_(Tensor::zeros({cfg.d_goal}, true)),
      goal_proj_(cfg.d_goal, cfg.d_align, init_rng),
      step_ln_g_(Tensor::full({cfg.d_step + cfg.d_bag}, 1.0, true)),
      step_ln_b_(Tensor::zeros({cfg.d_step + cfg.d_bag}, true)),
      step_proj_(cfg.d_step + cfg.d_bag, cfg.d_align, init_rng) {}

Tensor AlignmentModel::embed_image(const Tensor& image_tokens) const {
    const auto& sh = image_tokens.shape();
    if (sh.size() != 2 || sh[0] != cfg_.tokens || sh[1] != cfg_.channels)
        throw DimError("embed_image: expected [tokens, channels] image tokens");
    // regroup row-major pixel tokens into square patches, one row per patch
    const int ps = cfg_.patch_side;
    const int per_side = side_ / ps;
    std::vector<Tensor> patch_rows;
    patch_rows.reserve(static_cast<std::size_t>(n_patches_));
    for (int pr = 0; pr < per_side; ++pr) {
        for (int pc = 0; pc < per_side; ++pc) {
            std::vector<Tensor> pixels;
            pixels.reserve(static_cast<std::size_t>(ps) * ps);
            for (int dy = 0; dy < ps; ++dy)
                for (int dx = 0; dx < ps; ++dx) {
                    const int row = (pr * ps + dy) * side_ + pc * ps + dx;
                    pixels.push_back(slice_rows(image_tokens, row, row + 1));
                }
            patch_rows.push_back(concat(pixels, 1));
        }
    }
    Tensor x = add(img_embed_(concat_rows(patch_rows)), img_pos_);
    x = block1_(x);
    x = block2_(x);
    // mean-pool the patch axis: [1, n] x [n, d] -> [1, d]
    const Tensor ones = Tensor::full({1, n_patches_}, 1.0);
    const Tensor pooled = scale(matmul(ones, x), 1.0 / n_patches_);
    return l2_normalize(img_proj_(layernorm(pooled, img_ln_g_, img_ln_b_)));
}

Tensor AlignmentModel::embed_step_text(const std::string& text) const {
    const TextEmbedding e = text_.encode_step(segment(text, cfg_.max_tokens));
    Tensor feats = e.vector;
    if (cfg_.d_bag > 0) {
        const Tensor bag =
            Tensor::from_data({1, cfg_.d_bag}, bag_features(text, cfg_.d_bag).vec());
        feats = concat({feats, bag}, 1);
    }
    return l2_normalize(step_proj_(layernorm(feats, step_ln_g_, step_ln_b_)));
}

Tensor AlignmentModel::embed_goal_text(const std::string& text) const {
    const TextEmbedding e = text_.encode_goal(text);
    return l2_normalize(goal_proj_(layernorm(e.vector, goal_ln_g_, goal_ln_b_)));
}

std::vector<std::pair<std::string, Tensor>> AlignmentModel::named_params() {
    std::vector<std::pair<std::string, Tensor>> out;
    img_embed_.collect("img_embed", out);
    out.emplace_back("img_pos", img_pos_);
    block1_.collect("img_block1", out);
    block2_.collect("img_block2", out);
    out.emplace_back("img_ln.g", img_ln_g_);
    out.emplace_back("img_ln.b", img_ln_b_);
    img_proj_.collect("img_proj", out);
    for (auto& [name, t] : text_.named_params()) out.emplace_back(name, t);
    out.emplace_back("goal_ln.g", goal_ln_g_);
    out.emplace_back("goal_ln.b", goal_ln_b_);
    goal_proj_.collect("goal_proj", out);
    out.emplace_back("step_ln.g", step_ln_g_);
    out.emplace_back("step_ln.b", step_ln_b_);
    step_proj_.collect("step_proj", out);
    return out;
}

std::vector<Tensor> AlignmentModel::params() {
    std::vector<Tensor> out;
    for (auto& [name, t] : named_params()) out.push_back(t);
    return out;
}

Tensor reward(const AlignmentModel& model, const Tensor& image_tokens,
              const std::string& goal_text, const std::string& step_text,
              double goal_weight) {
    if (goal_weight < 0.0 || goal_weight > 1.0)
        throw ContractError("reward: goal_weight must be in [0, 1]");
    const Tensor img = model.embed_image(image_tokens);
    Tensor mix = sum_all(mul(img, model.embed_step_text(step_text)));
    if (goal_weight > 0.0) {
        const Tensor cos_goal = sum_all(mul(img, model.embed_goal_text(goal_text)));
        mix = add(scale(mix, 1.0 - goal_weight), scale(cos_goal, goal_weight));
    }
    return scale(relu(mix), 2.5);
}

std::vector<AlignPair> dedup_by_key(const std::vector<AlignPair>& pairs) {
    std::vector<AlignPair> out;
    std::unordered_set<std::uint64_t> seen;
    for (const AlignPair& p : pairs)
        if (seen.insert(p.key).second) out.push_back(p);
    return out;
}

double retrieval_accuracy(const AlignmentModel& model, const std::vector<AlignPair>& pairs,
                          int group_size) {
    if (pairs.empty()) throw EmptyInputError("retrieval_accuracy: empty pool");
    if (group_size < 0) throw ContractError("retrieval_accuracy: group_size must be >= 0");
    NoTapeScope no_tape;
    const std::size_t n = pairs.size();
    std::vector<std::vector<double>> imgs(n), txts(n);
    for (std::size_t i = 0; i < n; ++i) {
        imgs[i] = model.embed_image(image_to_tokens(pairs[i].image)).vec();
        txts[i] = model.embed_step_text(pairs[i].text).vec();
    }
    const std::size_t group =
        group_size == 0 ? n : static_cast<std::size_t>(group_size);
    int hits = 0, scored = 0;
    for (std::size_t lo = 0; lo < n; lo += group) {
        const std::size_t hi = std::min(n, lo + group);
        if (hi - lo < 2) break;  // a lone trailing item has no negatives
        for (std::size_t i = lo; i < hi; ++i) {
            std::size_t best = lo;
            double best_dot = -2.0;
            for (std::size_t j = lo; j < hi; ++j) {
                double dot = 0.0;
                for (std::size_t k = 0; k < imgs[i].size(); ++k)
                    dot += imgs[i][k] * txts[j][k];
                if (dot > best_dot) {
                    best_dot = dot;
                    best = j;
                }
            }
            if (best == i) ++hits;
            ++scored;
        }
    }
    if (scored == 0) throw EmptyInputError("retrieval_accuracy: no scorable group");
    return static_cast<double>(hits) / static_cast<double>(scored);
}

PretrainResult contrastive_pretrain(AlignmentModel& model, const std::vector<AlignPair>& train,
                                    const std::vector<AlignPair>& holdout,
                                    const PretrainConfig& cfg) {
    if (train.empty()) throw EmptyInputError("contrastive_pretrain: empty training set");
    if (cfg.batch < 2) throw ContractError("contrastive_pretrain: batch must be >= 2");
    if (cfg.steps < 0) throw ContractError("contrastive_pretrain: steps must be >= 0");
    if (cfg.lr <= 0.0) throw ContractError("contrastive_pretrain: lr must be positive");

    PretrainResult result;
    AdamConfig acfg;
    acfg.lr = cfg.lr;
    Adam opt(model.params(), acfg);
    Rng rng(cfg.seed);
    const double inv_tau = 1.0 / model.config().temperature;
    bool acc_known = false;

    for (int step = 0; step < cfg.steps; ++step) {
        // distinct world states per batch; bail out when the pool runs dry
        std::vector<const AlignPair*> batch;
        std::unordered_set<std::uint64_t> used;
        for (int attempt = 0; attempt < cfg.batch * 20 &&
                              batch.size() < static_cast<std::size_t>(cfg.batch);
             ++attempt) {
            const AlignPair& p =
                train[rng.uniform_int(0, static_cast<int>(train.size()) - 1)];
            if (used.insert(p.key).second) batch.push_back(&p);
        }
        std::unordered_set<std::string> texts;
        for (const AlignPair* p : batch) texts.insert(p->text);
        if (batch.size() < 2 || texts.size() < 2) {
            std::cerr << "warning: contrastive_pretrain: degenerate batch skipped\n";
            ++result.skipped_batches;
            continue;
        }

        GradTape tape;
        TapeScope scope(tape);
        std::vector<Tensor> img_rows, txt_rows;
        std::vector<int> targets;
        for (std::size_t i = 0; i < batch.size(); ++i) {
            img_rows.push_back(model.embed_image(image_to_tokens(batch[i]->image)));
            txt_rows.push_back(model.embed_step_text(batch[i]->text));
            targets.push_back(static_cast<int>(i));
        }
        const Tensor logits =
            scale(matmul(concat_rows(img_rows), transpose(concat_rows(txt_rows))), inv_tau);
        Tensor loss = scale(add(cross_entropy_rows(logits, targets),
                                cross_entropy_rows(transpose(logits), targets)),
                            0.5);
        tape.zero_all_grads();
        tape.backward(loss);
        opt.step();
        result.loss_log.push_back(loss.item());
        ++result.steps_run;

        if (!holdout.empty() && result.steps_run % cfg.eval_every == 0) {
            result.holdout_acc = retrieval_accuracy(model, holdout, cfg.batch);
            acc_known = true;
            if (cfg.verbose)
                std::cerr << "pretrain step " << result.steps_run << " loss " << loss.item()
                          << " holdout acc " << result.holdout_acc << "\n";
            if (result.holdout_acc >= cfg.target_acc) break;
        }
    }
    if (!holdout.empty() && !acc_known)
        result.holdout_acc = retrieval_accuracy(model, holdout, cfg.batch);
    return result;
}

std::pair<std::string, std::string> TaskSampler::draw(Rng& rng) const {
    if (tasks.empty()) throw EmptyInputError("TaskSampler: no tasks");
    const SynthTask& task = tasks[static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<int>(tasks.size()) - 1))];
    const int s = rng.uniform_int(0, static_cast<int>(task.spec.steps.size()) - 1);
    return {task.spec.goal, task.spec.steps[static_cast<std::size_t>(s)]};
}

FinetuneResult finetune(DenoiserNet& net, const TaskSampler& sampler,
                        const AlignmentModel& reward_model, const NoiseSchedule& sched,
                        const CondFeatures& feats, const FinetuneConfig& cfg) {
    if (cfg.grad_window < 0 || cfg.grad_window > sched.T)
        throw ContractError("finetune: grad_window must be in [0, T]");
    if (cfg.epochs < 0 || cfg.steps_per_epoch < 1)
        throw ContractError("finetune: epochs >= 0 and steps_per_epoch >= 1 required");
    if (cfg.guidance_w < -1.0) throw ContractError("finetune: guidance_w must be >= -1");
    if (cfg.goal_reward_weight < 0.0 || cfg.goal_reward_weight > 1.0)
        throw ContractError("finetune: goal_reward_weight must be in [0, 1]");

    FinetuneResult result;
    AdamConfig acfg;
    acfg.lr = cfg.lr;
    Adam opt(net.params(), acfg);
    Rng rng(cfg.seed);
    int consecutive_bad = 0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        double reward_sum = 0.0;
        int reward_count = 0;
        for (int step = 0; step < cfg.steps_per_epoch; ++step) {
            const auto [goal_text, step_text] = sampler.draw(rng);
            Conditioning cond;
            cond.goal = feats.goal(goal_text);
            cond.steps = {feats.step(step_text)};

            GradTape tape;
            TapeScope scope(tape);
            const Tensor z =
                sample(net, cond, sched, cfg.guidance_w, rng.next_u64(), cfg.grad_window);
            const Tensor image = decode_latent_tokens(z);
            Tensor r = reward(reward_model, image, goal_text, step_text,
                              cfg.goal_reward_weight);
            const double rv = r.item();
            if (std::isfinite(rv)) {
                reward_sum += rv;
                ++reward_count;
            }

            Tensor loss = scale(r, -1.0);  // ascend the reward
            opt.zero_grads();
            tape.zero_all_grads();
            tape.backward(loss);

            bool bad = !std::isfinite(rv);
            if (!bad) {
                for (const Tensor& p : net.params()) {
                    if (!p.has_grad()) continue;
                    for (double g : p.grad())
                        if (!std::isfinite(g)) {
                            bad = true;
                            break;
                        }
                    if (bad) break;
                }
            }
            if (bad) {
                ++result.nan_skips;
                ++consecutive_bad;
                std::cerr << "warning: finetune: non-finite gradient, step skipped\n";
                if (consecutive_bad >= 3)
                    throw NumericalAbort("finetune: three consecutive non-finite steps");
                continue;
            }
            consecutive_bad = 0;
            opt.step();
        }
        const double mean_r = reward_count > 0 ? reward_sum / reward_count : 0.0;
        result.epoch_mean_reward.push_back(mean_r);
        if (cfg.verbose)
            std::cerr << "finetune epoch " << epoch << " mean reward " << mean_r << "\n";
    }
    return result;
}

}  // namespace stepviz
