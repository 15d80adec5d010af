#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "stepviz/denoiser.hpp"
#include "stepviz/optim.hpp"
#include "stepviz/schedule.hpp"
#include "test_util.hpp"

using namespace stepviz;
using stepviz::testutil::check_grads;
using stepviz::testutil::make_seeded;

namespace {

DenoiserConfig tiny_config() {
    DenoiserConfig cfg;
    cfg.d_model = 4;
    cfg.n_blocks = 1;
    cfg.tokens_per_slice = 2;
    cfg.channels = 3;
    cfg.d_goal = 4;
    cfg.d_step = 6;
    cfg.d_time = 4;
    return cfg;
}

Conditioning tiny_cond(int slices, std::uint64_t seed) {
    Conditioning cond;
    Rng rng(seed);
    cond.goal = Tensor::randn({1, 4}, rng);
    for (int s = 0; s < slices; ++s) cond.steps.push_back(Tensor::randn({1, 6}, rng));
    return cond;
}

}  // namespace

TEST_CASE("cosine schedule satisfies the endpoint and monotonicity invariants") {
    const NoiseSchedule s = NoiseSchedule::cosine(50);
    REQUIRE(s.T == 50);
    REQUIRE(s.alpha.size() == 50);
    CHECK(s.alpha.front() > 0.95);
    CHECK(s.alpha.back() < 0.01);
    for (int t = 1; t < 50; ++t) {
        CHECK(s.alpha[static_cast<std::size_t>(t)] <= s.alpha[static_cast<std::size_t>(t) - 1]);
        CHECK(s.alpha[static_cast<std::size_t>(t)] > 0.0);
        CHECK(s.alpha[static_cast<std::size_t>(t)] <= 1.0);
    }
    CHECK(s.alpha_at(0) == 1.0);
    CHECK(s.alpha_at(1) == s.alpha.front());
    CHECK_THROWS_AS(s.alpha_at(51), IndexError);
    CHECK_THROWS_AS(s.alpha_at(-1), IndexError);
    // too coarse: alpha_1 cannot stay above 0.95
    CHECK_THROWS_AS(NoiseSchedule::cosine(5), ContractError);
}

TEST_CASE("from_alphas validates the schedule invariants") {
    const NoiseSchedule ok = NoiseSchedule::from_alphas({0.99, 0.5, 0.005});
    CHECK(ok.T == 3);
    CHECK_THROWS_AS(NoiseSchedule::from_alphas({0.99, 0.5, 0.6, 0.005}), ContractError);
    CHECK_THROWS_AS(NoiseSchedule::from_alphas({0.9, 0.5, 0.005}), ContractError);
    CHECK_THROWS_AS(NoiseSchedule::from_alphas({0.99, 0.5, 0.05}), ContractError);
    CHECK_THROWS_AS(NoiseSchedule::from_alphas({0.99, -0.1, 0.005}), ContractError);
    CHECK_THROWS_AS(NoiseSchedule::from_alphas({}), ContractError);
}

TEST_CASE("forward_diffuse collapses exactly at the schedule endpoints") {
    Tensor z0 = make_seeded({2, 3}, 5, 1.0, false);
    Tensor eps = make_seeded({2, 3}, 6, 1.0, false);
    NoiseSchedule signal_only;  // direct construction bypasses validation on
    signal_only.T = 1;          // purpose: these exercise the formula limits
    signal_only.alpha = {1.0};
    const Tensor zt1 = forward_diffuse(z0, 1, eps, signal_only);
    for (std::size_t i = 0; i < z0.numel(); ++i) CHECK(zt1.data()[i] == z0.data()[i]);

    NoiseSchedule noise_only;
    noise_only.T = 1;
    noise_only.alpha = {0.0};
    const Tensor zt0 = forward_diffuse(z0, 1, eps, noise_only);
    for (std::size_t i = 0; i < eps.numel(); ++i) CHECK(zt0.data()[i] == eps.data()[i]);

    const NoiseSchedule s = NoiseSchedule::cosine(10);
    CHECK_THROWS_AS(forward_diffuse(z0, 0, eps, s), IndexError);
    CHECK_THROWS_AS(forward_diffuse(z0, 11, eps, s), IndexError);
    CHECK_THROWS_AS(forward_diffuse(z0, 1, make_seeded({3, 2}, 7), s), DimError);
}

TEST_CASE("forward_diffuse Monte-Carlo mean matches sqrt(alpha) z0 at alpha=0.25") {
    NoiseSchedule s;
    s.T = 1;
    s.alpha = {0.25};
    Tensor z0 = Tensor::from_data({1, 2}, {1.7, -0.6});
    Rng rng(99);
    const int n = 100000;
    double acc[2] = {0.0, 0.0};
    for (int i = 0; i < n; ++i) {
        Tensor eps = Tensor::randn({1, 2}, rng);
        Tensor zt = forward_diffuse(z0, 1, eps, s);
        acc[0] += zt.data()[0];
        acc[1] += zt.data()[1];
    }
    const double se = std::sqrt(0.75) / std::sqrt(static_cast<double>(n));
    CHECK(std::fabs(acc[0] / n - 0.5 * 1.7) < 3.0 * se);
    CHECK(std::fabs(acc[1] / n - 0.5 * (-0.6)) < 3.0 * se);
}

TEST_CASE("forward_diffuse marginal moments hold at every t of a real schedule") {
    const NoiseSchedule s = NoiseSchedule::cosine(10);
    Tensor z0 = Tensor::from_data({1, 1}, {0.8});
    Rng rng(123);
    const int n = 20000;
    for (int t = 1; t <= s.T; ++t) {
        const double a = s.alpha_at(t);
        double sum = 0.0, sumsq = 0.0;
        for (int i = 0; i < n; ++i) {
            Tensor eps = Tensor::randn({1, 1}, rng);
            const double v = forward_diffuse(z0, t, eps, s).data()[0];
            sum += v;
            sumsq += v * v;
        }
        const double mean = sum / n;
        const double var = sumsq / n - mean * mean;
        const double mean_se = std::sqrt(1.0 - a) / std::sqrt(static_cast<double>(n));
        const double var_se = (1.0 - a) * std::sqrt(2.0 / (n - 1.0));
        CHECK(std::fabs(mean - std::sqrt(a) * 0.8) < 3.0 * mean_se + 1e-12);
        CHECK(std::fabs(var - (1.0 - a)) < 3.0 * var_se + 1e-12);
    }
}

TEST_CASE("ddim_update follows the deterministic reverse formula") {
    const NoiseSchedule s = NoiseSchedule::from_alphas({0.99, 0.4, 0.005});
    Tensor zt = make_seeded({2, 3}, 11, 1.0, false);
    Tensor eps = make_seeded({2, 3}, 12, 1.0, false);
    const int t = 2;
    const double at = 0.4, aprev = 0.99;
    const Tensor out = ddim_update(zt, eps, t, s);
    for (std::size_t i = 0; i < zt.numel(); ++i) {
        const double z0 = (zt.data()[i] - std::sqrt(1.0 - at) * eps.data()[i]) / std::sqrt(at);
        const double want = std::sqrt(aprev) * z0 + std::sqrt(1.0 - aprev) * eps.data()[i];
        CHECK(out.data()[i] == doctest::Approx(want).epsilon(1e-12));
    }
    // t = 1 lands exactly on the z0 estimate (alpha_0 = 1)
    const Tensor final = ddim_update(zt, eps, 1, s);
    for (std::size_t i = 0; i < zt.numel(); ++i) {
        const double z0 =
            (zt.data()[i] - std::sqrt(1.0 - 0.99) * eps.data()[i]) / std::sqrt(0.99);
        CHECK(final.data()[i] == doctest::Approx(z0).epsilon(1e-12));
    }
    CHECK_THROWS_AS(ddim_update(zt, eps, 0, s), IndexError);
    CHECK_THROWS_AS(ddim_update(zt, make_seeded({3, 2}, 13), 1, s), DimError);
}

TEST_CASE("cfg_combine matches the guidance formula exactly") {
    Tensor fc = Tensor::from_data({1, 1}, {2.0});
    Tensor fu = Tensor::from_data({1, 1}, {1.0});
    CHECK(cfg_combine(fc, fu, 3.0).item() == doctest::Approx(5.0));

    Tensor a = make_seeded({3, 4}, 21, 1.0, false);
    Tensor b = make_seeded({3, 4}, 22, 1.0, false);
    const Tensor w0 = cfg_combine(a, b, 0.0);
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(w0.data()[i] == a.data()[i]);
    const Tensor wm1 = cfg_combine(a, b, -1.0);
    for (std::size_t i = 0; i < b.numel(); ++i) CHECK(wm1.data()[i] == b.data()[i]);
    // guidance collapses when cond == uncond, for any w
    for (double w : {-1.0, 0.0, 0.7, 2.0, 10.0}) {
        const Tensor same = cfg_combine(a, a, w);
        for (std::size_t i = 0; i < a.numel(); ++i)
            CHECK(same.data()[i] == doctest::Approx(a.data()[i]).epsilon(1e-12));
    }
    CHECK_THROWS_AS(cfg_combine(a, make_seeded({4, 3}, 23), 1.0), DimError);
}

TEST_CASE("denoiser output shapes match input slices and runs are deterministic") {
    Rng rng(31);
    DenoiserNet net(DenoiserConfig{}, rng);
    Rng data_rng(32);
    Tensor z1 = Tensor::randn({64, 3}, data_rng);
    Tensor z2 = Tensor::randn({64, 3}, data_rng);
    Conditioning cond;
    cond.goal = Tensor::randn({1, 32}, data_rng);
    cond.steps = {Tensor::randn({1, 64}, data_rng), Tensor::randn({1, 64}, data_rng)};

    const auto out = net.denoise({z1, z2}, 7, cond);
    REQUIRE(out.size() == 2);
    CHECK(out[0].shape() == std::vector<int>({64, 3}));
    CHECK(out[1].shape() == std::vector<int>({64, 3}));
    CHECK(all_finite(out[0]));
    CHECK(all_finite(out[1]));
    const auto again = net.denoise({z1, z2}, 7, cond);
    CHECK(out[0].vec() == again[0].vec());
    CHECK(out[1].vec() == again[1].vec());

    Conditioning single;
    single.goal = cond.goal;
    single.steps = {cond.steps[0]};
    CHECK(net.denoise({z1}, 7, single)[0].shape() == std::vector<int>({64, 3}));

    CHECK_THROWS_AS(net.denoise({Tensor::zeros({8, 3})}, 7, single), DimError);
    CHECK_THROWS_AS(net.denoise({z1, z2}, 7, single), DimError);
    Tensor bad_mask = Tensor::full({4, 4}, 1.0);
    CHECK_THROWS_AS(net.denoise({z1}, 7, single, &bad_mask), DimError);
}

TEST_CASE("conditioning counters distinguish null and non-null paths") {
    Rng rng(41);
    DenoiserNet net(tiny_config(), rng);
    Rng data_rng(42);
    Tensor z = Tensor::randn({2, 3}, data_rng);
    net.reset_counters();
    net.denoise({z}, 1, Conditioning::null_for(1));
    CHECK(net.forward_calls() == 1);
    CHECK(net.goal_cond_uses() == 0);
    CHECK(net.step_cond_uses() == 0);
    net.denoise({z}, 1, tiny_cond(1, 43));
    CHECK(net.forward_calls() == 2);
    CHECK(net.goal_cond_uses() == 1);
    CHECK(net.step_cond_uses() == 1);
}

TEST_CASE("training loss gradient matches finite differences on a tiny network") {
    Rng rng(51);
    DenoiserNet net(tiny_config(), rng);
    const NoiseSchedule sched = NoiseSchedule::from_alphas({0.99, 0.3, 0.005});
    Rng data_rng(52);
    Tensor z0 = Tensor::randn({2, 3}, data_rng);
    Tensor eps = Tensor::randn({2, 3}, data_rng);
    const Conditioning cond = tiny_cond(1, 53);
    const Tensor zt = forward_diffuse(z0, 2, eps, sched);

    auto loss_fn = [&]() { return mse(net.denoise({zt}, 2, cond)[0], eps); };
    check_grads(loss_fn, net.params(), 1e-5, 1e-4);

    // the null path must be differentiable too (null tokens are learned)
    auto null_loss_fn = [&]() {
        return mse(net.denoise({zt}, 2, Conditioning::null_for(1))[0], eps);
    };
    check_grads(null_loss_fn, {net.params()}, 1e-5, 1e-4);
}

TEST_CASE("train_step returns a finite non-negative loss and fills gradients") {
    Rng rng(61);
    DenoiserNet net(tiny_config(), rng);
    const NoiseSchedule sched = NoiseSchedule::cosine(10);
    Rng data_rng(62);
    std::vector<TrainItem> batch;
    for (int i = 0; i < 3; ++i) {
        TrainItem item;
        item.slices = {Tensor::randn({2, 3}, data_rng)};
        item.cond = tiny_cond(1, 63 + static_cast<std::uint64_t>(i));
        batch.push_back(std::move(item));
    }
    Rng train_rng(64);
    const double loss = train_step(net, batch, sched, 0.1, train_rng);
    CHECK(loss >= 0.0);
    CHECK(std::isfinite(loss));
    bool any_grad = false;
    for (const Tensor& p : net.params()) {
        if (!p.has_grad()) continue;
        for (double g : p.grad())
            if (g != 0.0) any_grad = true;
    }
    CHECK(any_grad);
    CHECK_THROWS_AS(train_step(net, {}, sched, 0.1, train_rng), ContractError);
    CHECK_THROWS_AS(train_step(net, batch, sched, -0.2, train_rng), ContractError);
    CHECK_THROWS_AS(train_step(net, batch, sched, 1.2, train_rng), ContractError);
}

TEST_CASE("p_uncond = 1 never reaches the non-null conditioning path") {
    Rng rng(71);
    DenoiserNet net(tiny_config(), rng);
    const NoiseSchedule sched = NoiseSchedule::cosine(10);
    Rng data_rng(72);
    std::vector<TrainItem> batch;
    for (int i = 0; i < 4; ++i) {
        TrainItem item;
        item.slices = {Tensor::randn({2, 3}, data_rng)};
        item.cond = tiny_cond(1, 80 + static_cast<std::uint64_t>(i));
        batch.push_back(std::move(item));
    }
    net.reset_counters();
    Rng train_rng(73);
    for (int step = 0; step < 20; ++step) train_step(net, batch, sched, 1.0, train_rng);
    CHECK(net.forward_calls() == 80);
    CHECK(net.goal_cond_uses() == 0);
    CHECK(net.step_cond_uses() == 0);
}

TEST_CASE("500 steps on a one-sample dataset drive the loss down") {
    Rng rng(81);
    DenoiserNet net(tiny_config(), rng);
    const NoiseSchedule sched = NoiseSchedule::cosine(10);
    Rng data_rng(82);
    TrainItem item;
    item.slices = {Tensor::randn({2, 3}, data_rng)};
    item.cond = tiny_cond(1, 83);
    const std::vector<TrainItem> batch = {item};

    AdamConfig acfg;
    acfg.lr = 3e-3;
    Adam opt(net.params(), acfg);
    Rng train_rng(84);
    double first_window = 0.0, last_window = 0.0;
    for (int step = 0; step < 500; ++step) {
        const double loss = train_step(net, batch, sched, 0.1, train_rng);
        opt.step();
        if (step < 25) first_window += loss;
        if (step >= 475) last_window += loss;
    }
    CHECK(last_window < first_window);
}

TEST_CASE("sampler is deterministic, shape-invariant, and finite") {
    Rng rng(91);
    DenoiserNet net(tiny_config(), rng);
    const NoiseSchedule sched = NoiseSchedule::cosine(10);
    const Conditioning cond = tiny_cond(1, 92);
    const Tensor a = sample(net, cond, sched, 2.0, 1234, 0);
    const Tensor b = sample(net, cond, sched, 2.0, 1234, 0);
    const Tensor c = sample(net, cond, sched, 2.0, 1235, 0);
    CHECK(a.shape() == std::vector<int>({2, 3}));
    CHECK(a.vec() == b.vec());
    CHECK(a.vec() != c.vec());
    CHECK(all_finite(a));
    // different grad windows change taping, never values
    const Tensor d = sample(net, cond, sched, 2.0, 1234, 10);
    for (std::size_t i = 0; i < a.numel(); ++i)
        CHECK(a.data()[i] == doctest::Approx(d.data()[i]).epsilon(1e-12));
    CHECK_THROWS_AS(sample(net, cond, sched, 2.0, 1, -1), ContractError);
    CHECK_THROWS_AS(sample(net, cond, sched, 2.0, 1, 11), ContractError);
    CHECK_THROWS_AS(sample(net, cond, sched, -2.0, 1, 0), ContractError);
    CHECK_THROWS_AS(sample(net, Conditioning::null_for(2), sched, 2.0, 1, 0), ContractError);
}

TEST_CASE("grad window controls whether sampling reaches phi") {
    Rng rng(101);
    DenoiserNet net(tiny_config(), rng);
    const NoiseSchedule sched = NoiseSchedule::cosine(10);
    const Conditioning cond = tiny_cond(1, 102);

    {
        GradTape tape;
        TapeScope scope(tape);
        Tensor out = sample(net, cond, sched, 1.0, 7, 0);
        CHECK(!out.requires_grad());
        CHECK(tape.size() == 0);
    }
    {
        GradTape tape;
        TapeScope scope(tape);
        Tensor out = sample(net, cond, sched, 1.0, 7, 3);
        CHECK(out.requires_grad());
        Tensor loss = mean_all(out);
        tape.backward(loss);
        bool any = false;
        for (const Tensor& p : net.params()) {
            if (!p.has_grad()) continue;
            for (double g : p.grad())
                if (g != 0.0) any = true;
        }
        CHECK(any);
        tape.zero_all_grads();
    }
}

TEST_CASE("latent encode/decode round trip and clamping") {
    Rng rng(111);
    Tensor v = Tensor::zeros({4, 3});
    for (std::size_t i = 0; i < v.numel(); ++i) v.data()[i] = rng.uniform();
    const Tensor z = encode_image_tokens(v);
    for (std::size_t i = 0; i < v.numel(); ++i)
        CHECK(z.data()[i] == doctest::Approx(2.0 * v.data()[i] - 1.0).epsilon(1e-12));
    const Tensor back = decode_latent_tokens(z);
    for (std::size_t i = 0; i < v.numel(); ++i)
        CHECK(back.data()[i] == doctest::Approx(v.data()[i]).epsilon(1e-12));
    // out-of-range latents clamp into [0,1]
    const Tensor wild = decode_latent_tokens(Tensor::from_data({1, 3}, {-9.0, 0.0, 9.0}));
    CHECK(wild.data()[0] == 0.0);
    CHECK(wild.data()[1] == 0.5);
    CHECK(wild.data()[2] == 1.0);
}
