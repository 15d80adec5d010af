#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "stepviz/eval.hpp"
#include "stepviz/rng.hpp"
#include "test_util.hpp"

using namespace stepviz;

namespace {

AlignConfig narrow_tower() {
    AlignConfig cfg;  // full 64-token images and text widths, narrow tower
    cfg.d_model = 8;
    return cfg;
}

std::vector<Tensor> feature_set(const std::vector<std::vector<double>>& rows) {
    std::vector<Tensor> out;
    for (const auto& row : rows)
        out.push_back(Tensor::from_data({static_cast<int>(row.size())}, row));
    return out;
}

std::vector<Tensor> gt_images(const SynthTask& task) {
    std::vector<Tensor> images;
    for (std::size_t i = 0; i < task.spec.steps.size(); ++i)
        images.push_back(task.image_after_step(static_cast<int>(i)));
    return images;
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    auto ranks = [](const std::vector<double>& v) {
        std::vector<std::size_t> idx(v.size());
        std::iota(idx.begin(), idx.end(), 0);
        std::sort(idx.begin(), idx.end(),
                  [&](std::size_t x, std::size_t y) { return v[x] < v[y]; });
        std::vector<double> r(v.size());
        for (std::size_t k = 0; k < idx.size(); ++k)
            r[idx[k]] = static_cast<double>(k);
        return r;
    };
    const auto ra = ranks(a), rb = ranks(b);
    const double n = static_cast<double>(a.size());
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < ra.size(); ++i) {
        ma += ra[i];
        mb += rb[i];
    }
    ma /= n;
    mb /= n;
    double num = 0.0, da = 0.0, db = 0.0;
    for (std::size_t i = 0; i < ra.size(); ++i) {
        num += (ra[i] - ma) * (rb[i] - mb);
        da += (ra[i] - ma) * (ra[i] - ma);
        db += (rb[i] - mb) * (rb[i] - mb);
    }
    return num / std::sqrt(da * db);
}

}  // namespace

TEST_CASE("build_distribution bins, smoothing, and support contract") {
    // identical scores: one bin carries all the mass modulo smoothing
    const std::vector<double> same(12, 1.0);
    const ScoreDistribution d = build_distribution(same, 25);
    REQUIRE(d.edges.size() == 26);
    CHECK(d.edges.front() == 0.0);
    CHECK(d.edges.back() == 2.5);
    REQUIRE(d.probs.size() == 25);
    double total = 0.0;
    for (double p : d.probs) total += p;
    CHECK(std::abs(total - 1.0) < 1e-12);
    CHECK(d.probs[10] > 0.999);  // 1.0 lands in bin floor(1.0 / 0.1) = 10

    // the top edge belongs to the last bin
    const ScoreDistribution top = build_distribution(std::vector<double>(10, 2.5), 25);
    CHECK(top.probs[24] > 0.999);
    // numerical dust past the support is clamped, not rejected
    const ScoreDistribution dust =
        build_distribution(std::vector<double>(10, 2.5 + 1e-12), 25);
    CHECK(dust.scores[0] == 2.5);

    CHECK_THROWS_AS(build_distribution(std::vector<double>(9, 1.0), 25),
                    InsufficientDataError);
    CHECK_THROWS_AS(build_distribution(same, 0), ContractError);
    std::vector<double> low = same;
    low[3] = -0.1;
    CHECK_THROWS_AS(build_distribution(low, 25), ContractError);
    std::vector<double> high = same;
    high[3] = 2.6;
    CHECK_THROWS_AS(build_distribution(high, 25), ContractError);
}

TEST_CASE("uniform scores fill every bin within the 3-sigma multinomial band") {
    Rng rng(340);
    std::vector<double> scores;
    const int n = 10000;
    for (int i = 0; i < n; ++i) scores.push_back(rng.uniform(0.0, 2.5));
    const ScoreDistribution d = build_distribution(scores, 25);
    const double expect = 1.0 / 25.0;
    const double sigma = std::sqrt(expect * (1.0 - expect) / n);
    for (double p : d.probs) CHECK(std::abs(p - expect) <= 3.0 * sigma);
}

TEST_CASE("kl divergence closed forms, non-negativity, and bin contract") {
    // two bins: p = (0.5, 0.5), q = (0.25, 0.75)
    std::vector<double> p_scores, q_scores;
    for (int i = 0; i < 6; ++i) p_scores.push_back(0.5);
    for (int i = 0; i < 6; ++i) p_scores.push_back(2.0);
    for (int i = 0; i < 3; ++i) q_scores.push_back(0.5);
    for (int i = 0; i < 9; ++i) q_scores.push_back(2.0);
    const ScoreDistribution p = build_distribution(p_scores, 2);
    const ScoreDistribution q = build_distribution(q_scores, 2);
    // 0.5 ln 2 + 0.5 ln(2/3) = 0.1438410; smoothing shifts it by ~1e-6
    CHECK(std::abs(kl_divergence(p, q) - 0.5 * std::log(2.0) - 0.5 * std::log(2.0 / 3.0)) <
          1e-5);
    CHECK(kl_divergence(p, p) == 0.0);
    CHECK(kl_divergence(q, q) == 0.0);

    // Gibbs' inequality over random distribution pairs
    Rng rng(341);
    double min_kl = 1e300, mean_kl = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<double> a, b;
        for (int i = 0; i < 40; ++i) a.push_back(rng.uniform(0.0, 2.5));
        for (int i = 0; i < 40; ++i) b.push_back(rng.uniform(0.0, 2.5));
        const double kl = kl_divergence(build_distribution(a), build_distribution(b));
        min_kl = std::min(min_kl, kl);
        mean_kl += kl;
    }
    CHECK(min_kl >= 0.0);
    CHECK(mean_kl / 1000.0 > 0.01);

    const ScoreDistribution other = build_distribution(p_scores, 25);
    CHECK_THROWS_AS(kl_divergence(p, other), ContractError);
}

TEST_CASE("chi square closed forms and bin contract") {
    std::vector<double> p_scores, q_scores;
    for (int i = 0; i < 6; ++i) p_scores.push_back(0.5);
    for (int i = 0; i < 6; ++i) p_scores.push_back(2.0);
    for (int i = 0; i < 3; ++i) q_scores.push_back(0.5);
    for (int i = 0; i < 9; ++i) q_scores.push_back(2.0);
    const ScoreDistribution p = build_distribution(p_scores, 2);
    const ScoreDistribution q = build_distribution(q_scores, 2);
    // 0.0625/0.25 + 0.0625/0.75 = 1/3
    CHECK(std::abs(chi_square(p, q) - 1.0 / 3.0) < 1e-5);
    CHECK(chi_square(p, p) == 0.0);
    // not symmetric: q is the reference
    CHECK(chi_square(p, q) != chi_square(q, p));

    Rng rng(342);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> a, b;
        for (int i = 0; i < 40; ++i) a.push_back(rng.uniform(0.0, 2.5));
        for (int i = 0; i < 40; ++i) b.push_back(rng.uniform(0.0, 2.5));
        CHECK(chi_square(build_distribution(a), build_distribution(b)) >= 0.0);
    }
    const ScoreDistribution other = build_distribution(p_scores, 25);
    CHECK_THROWS_AS(chi_square(p, other), ContractError);
}

TEST_CASE("frechet distance closed forms") {
    // identical sets
    const auto a16 = [] {
        Rng rng(343);
        std::vector<Tensor> f;
        for (int i = 0; i < 20; ++i) f.push_back(Tensor::randn({16}, rng));
        return f;
    }();
    CHECK(frechet_distance(a16, a16) >= 0.0);
    CHECK(frechet_distance(a16, a16) < 1e-8);

    // 1-D: means 0 vs 1, unit sample variance on both sides -> 1.0
    const auto a = feature_set({{-1.0}, {0.0}, {1.0}});
    const auto b = feature_set({{0.0}, {1.0}, {2.0}});
    CHECK(std::abs(frechet_distance(a, b) - 1.0) < 1e-6);
    // 1-D: same mean, sigma 1 vs 2 -> (1 - 2)^2 = 1.0
    const auto wide = feature_set({{-2.0}, {0.0}, {2.0}});
    CHECK(std::abs(frechet_distance(a, wide) - 1.0) < 1e-6);

    // 2-D: equal covariances, mean offset (2, 0) -> 4.0
    const auto sq = feature_set({{-1, -1}, {-1, 1}, {1, -1}, {1, 1}});
    const auto sq_shift = feature_set({{1, -1}, {1, 1}, {3, -1}, {3, 1}});
    CHECK(std::abs(frechet_distance(sq, sq_shift) - 4.0) < 1e-6);

    // singular covariances (collinear points): the zero eigenvalue rides
    // through the clamp; equal covariances leave only the mean term = 8
    const auto line = feature_set({{-1, -1}, {0, 0}, {1, 1}});
    const auto line_shift = feature_set({{1, 1}, {2, 2}, {3, 3}});
    CHECK(std::abs(frechet_distance(line, line_shift) - 8.0) < 1e-6);
}

TEST_CASE("frechet distance symmetry, rotation invariance, and data contract") {
    Rng rng(344);
    std::vector<Tensor> a, b;
    for (int i = 0; i < 20; ++i) a.push_back(Tensor::randn({16}, rng));
    for (int i = 0; i < 20; ++i) b.push_back(Tensor::randn({16}, rng, 1.5));
    const double dab = frechet_distance(a, b);
    CHECK(dab > 0.0);
    CHECK(std::abs(dab - frechet_distance(b, a)) < 1e-8);

    // joint rotation leaves the distance unchanged (exercises off-diagonal
    // covariance handling in the eigensolver)
    std::vector<Tensor> a3, b3;
    for (int i = 0; i < 10; ++i) a3.push_back(Tensor::randn({3}, rng));
    for (int i = 0; i < 10; ++i) b3.push_back(Tensor::randn({3}, rng, 0.7));
    const double c1 = std::cos(0.7), s1 = std::sin(0.7);
    const double c2 = std::cos(0.4), s2 = std::sin(0.4);
    auto rotate = [&](const Tensor& v) {
        const double x = v.data()[0], y = v.data()[1], z = v.data()[2];
        // Rz(0.7) then Rx(0.4)
        const double rx = c1 * x - s1 * y, ry = s1 * x + c1 * y;
        return Tensor::from_data({3}, {rx, c2 * ry - s2 * z, s2 * ry + c2 * z});
    };
    std::vector<Tensor> ra, rb;
    for (const Tensor& v : a3) ra.push_back(rotate(v));
    for (const Tensor& v : b3) rb.push_back(rotate(v));
    CHECK(std::abs(frechet_distance(a3, b3) - frechet_distance(ra, rb)) < 1e-7);

    // d + 1 samples required per side
    const auto two = feature_set({{0, 0}, {1, 1}});
    const auto three = feature_set({{0, 0}, {1, 1}, {0, 1}});
    CHECK_THROWS_AS(frechet_distance(two, three), InsufficientDataError);
    CHECK_THROWS_AS(frechet_distance(three, two), InsufficientDataError);
    CHECK_THROWS_AS(frechet_distance({}, three), InsufficientDataError);
    const auto wrong = feature_set({{0.0}, {1.0}, {2.0}});
    CHECK_THROWS_AS(frechet_distance(three, wrong), DimError);
}

TEST_CASE("consistency score is 1 on ground truth and obeys the persistence rule") {
    const auto tasks = generate_tasks(20, 320);
    for (const SynthTask& task : tasks)
        CHECK(consistency_score(gt_images(task), task) == 1.0);
    // token-layout images decode identically
    std::vector<Tensor> tokens;
    for (const Tensor& img : gt_images(tasks[0])) tokens.push_back(image_to_tokens(img));
    CHECK(consistency_score(tokens, tasks[0]) == 1.0);

    // recolor one persisting object in one image: exactly the pairs that
    // touch that (image, region) flip to misses
    const SynthTask& task = tasks[0];
    const auto pairs = persisting_objects(task);
    REQUIRE(!pairs.empty());
    const PersistPair pp = pairs.front();
    WorldState mutated = task.states[static_cast<std::size_t>(pp.step) + 1];
    REQUIRE(mutated.regions[pp.region].has_value());
    mutated.regions[pp.region]->color = (mutated.regions[pp.region]->color + 1) % 8;
    std::vector<Tensor> images = gt_images(task);
    images[static_cast<std::size_t>(pp.step)] = render(mutated);
    int affected = 0;
    for (const PersistPair& other : pairs)
        if (other.region == pp.region &&
            (other.step == pp.step || other.step + 1 == pp.step))
            ++affected;
    REQUIRE(affected > 0);
    const double expected =
        static_cast<double>(static_cast<int>(pairs.size()) - affected) /
        static_cast<double>(pairs.size());
    CHECK(consistency_score(images, task) == expected);

    std::vector<Tensor> short_seq(images.begin(), images.end() - 1);
    CHECK_THROWS_AS(consistency_score(short_seq, task), ContractError);
}

TEST_CASE("consistency score errors on tasks with no persisting object") {
    SynthTask task;
    task.spec.goal = "build a pattern of 2 shapes";
    task.spec.steps = {"place a red square at row 1 column 1",
                       "place a blue disc at row 2 column 2"};
    WorldState s0, s1, s2;
    s1.regions[0] = ObjectRec{Shape::square, 0, false};
    s2.regions[5] = ObjectRec{Shape::disc, 1, false};
    task.states = {s0, s1, s2};
    for (const WorldState& s : task.states) task.images.push_back(render(s));
    CHECK_THROWS_AS(consistency_score(gt_images(task), task), EmptyInputError);
}

TEST_CASE("all-noise images score at the measured nearest-decode chance level") {
    Rng rng(300);
    const auto tasks = generate_tasks(50, 301);
    double total = 0.0;
    for (const SynthTask& task : tasks) {
        std::vector<Tensor> noise;
        for (std::size_t i = 0; i < task.spec.steps.size(); ++i) {
            Tensor img = Tensor::zeros({64, 3});
            for (std::size_t k = 0; k < img.numel(); ++k) img.data()[k] = rng.uniform();
            noise.push_back(img);
        }
        total += consistency_score(noise, task);
    }
    const double chance = total / 50.0;
    // measured 0.387 on this seed: uniform noise decodes to occupied regions
    // with a biased (shape, color) prior, far below the ground-truth 1.0
    CHECK(chance >= 0.25);
    CHECK(chance <= 0.55);
}

TEST_CASE("caption score identities and shared reward implementation") {
    Rng rng(350);
    AlignmentModel model(narrow_tower(), rng);
    const auto tasks = generate_tasks(6, 330);
    const Tensor& img = tasks[0].image_after_step(0);
    const std::string cap = oracle_caption(img);

    // identical caption and text -> 2.5 (self-cosine of a unit vector)
    CHECK(std::abs(caption_score(model, img, cap) - 2.5) < 1e-9);
    // token and image layouts score identically
    CHECK(caption_score(model, img, cap) ==
          caption_score(model, image_to_tokens(img), cap));

    // range plus the zero clamp on a random-init model
    int clamped = 0, checked = 0;
    for (const SynthTask& task : tasks) {
        for (std::size_t i = 0; i < task.spec.steps.size(); ++i) {
            for (const SynthTask& other : tasks) {
                const double s = caption_score(model, task.image_after_step(
                                                          static_cast<int>(i)),
                                               other.spec.steps[0]);
                CHECK(s >= 0.0);
                CHECK(s <= 2.5 + 1e-12);
                if (s == 0.0) ++clamped;
                ++checked;
            }
        }
    }
    CHECK(checked >= 30);
    CHECK(clamped > 0);

    // alignment_score shares the reward path bitwise
    const std::string step = tasks[0].spec.steps[0];
    const double direct = alignment_score(model, img, step);
    CHECK(direct == reward(model, image_to_tokens(img), step, step, 0.0).item());
    const Tensor iv = model.embed_image(image_to_tokens(img));
    const Tensor tv = model.embed_step_text(step);
    double dot = 0.0;
    for (std::size_t i = 0; i < iv.numel(); ++i) dot += iv.data()[i] * tv.data()[i];
    CHECK(std::abs(direct - 2.5 * std::max(0.0, dot)) < 1e-12);
}

TEST_CASE("trained model: caption channel discriminates and tracks direct scores") {
    Rng rng(43);
    AlignmentModel model(narrow_tower(), rng);
    const auto pairs = dedup_by_key(make_alignment_pairs(1500, 44));
    const std::vector<AlignPair> holdout(pairs.begin(), pairs.begin() + 128);
    const std::vector<AlignPair> train(pairs.begin() + 128, pairs.end());
    PretrainConfig pcfg;
    pcfg.steps = 600;
    pcfg.batch = 16;
    pcfg.lr = 3e-3;
    pcfg.eval_every = 200;
    pcfg.seed = 45;
    contrastive_pretrain(model, train, holdout, pcfg);

    const auto tasks = generate_tasks(120, 302);
    Rng pick(303);
    int wins = 0, total = 0;
    std::vector<double> cap_scores, direct_scores;
    for (const SynthTask& task : tasks) {
        for (std::size_t i = 0; i < task.spec.steps.size() && total < 500; ++i) {
            const Tensor& img = task.image_after_step(static_cast<int>(i));
            const std::string& own = task.spec.steps[i];
            const SynthTask& other_task = tasks[static_cast<std::size_t>(
                pick.uniform_int(0, static_cast<int>(tasks.size()) - 1))];
            const std::string& other = other_task.spec.steps[static_cast<std::size_t>(
                pick.uniform_int(0, static_cast<int>(other_task.spec.steps.size()) - 1))];
            if (other == own) continue;
            if (caption_score(model, img, own) > caption_score(model, img, other)) ++wins;
            ++total;
            cap_scores.push_back(caption_score(model, img, own));
            direct_scores.push_back(alignment_score(model, img, own));
        }
    }
    REQUIRE(total == 500);
    // measured 0.802 with this briefly trained narrow tower
    CHECK(static_cast<double>(wins) / total > 0.75);
    // caption-mediated and direct scores rank-correlate; measured rho 0.90
    CHECK(spearman(cap_scores, direct_scores) > 0.7);
}

TEST_CASE("full-width tower: caption discrimination at the calibrated level") {
    // pipeline-default pretraining: full-width tower, halt at 0.95 in-batch
    AlignConfig acfg;
    Rng rng(43);
    AlignmentModel model(acfg, rng);
    const auto pairs = dedup_by_key(make_alignment_pairs(4000, 44));
    REQUIRE(pairs.size() > 2000);
    const std::vector<AlignPair> holdout(pairs.begin(), pairs.begin() + 128);
    const std::vector<AlignPair> train(pairs.begin() + 128, pairs.end());
    PretrainConfig pcfg;
    pcfg.steps = 4000;
    pcfg.batch = 16;
    pcfg.lr = 1e-3;
    pcfg.eval_every = 100;
    pcfg.seed = 45;
    const PretrainResult res = contrastive_pretrain(model, train, holdout, pcfg);
    CHECK(res.holdout_acc >= 0.95);  // measured 0.9531, halting at step 3700

    // 500 scans of own step text vs a random other task's step. Measured
    // 0.88: the misses concentrate in removal steps (the caption cannot
    // mention an object whose absence is the outcome) and in 4+-object
    // boards whose long captions clamp both scores to zero, which ties and
    // counts as a loss. Calibrated once and frozen.
    const auto tasks = generate_tasks(120, 302);
    Rng pick(303);
    int wins = 0, total = 0;
    for (const SynthTask& task : tasks) {
        for (std::size_t i = 0; i < task.spec.steps.size() && total < 500; ++i) {
            const Tensor& img = task.image_after_step(static_cast<int>(i));
            const std::string& own = task.spec.steps[i];
            const SynthTask& other_task = tasks[static_cast<std::size_t>(
                pick.uniform_int(0, static_cast<int>(tasks.size()) - 1))];
            const std::string& other = other_task.spec.steps[static_cast<std::size_t>(
                pick.uniform_int(0, static_cast<int>(other_task.spec.steps.size()) - 1))];
            if (other == own) continue;
            if (caption_score(model, img, own) > caption_score(model, img, other)) ++wins;
            ++total;
        }
    }
    REQUIRE(total == 500);
    CHECK(static_cast<double>(wins) / total >= 0.85);
}

TEST_CASE("evaluate pools per-step scores against the ground-truth reference") {
    Rng rng(360);
    AlignmentModel align(narrow_tower(), rng);
    DenoiserConfig dcfg;
    dcfg.d_model = 4;
    dcfg.n_blocks = 1;
    dcfg.tokens_per_slice = 64;
    dcfg.d_time = 4;
    Rng nrng(361);
    DenoiserNet net(dcfg, nrng);
    const auto tasks = generate_tasks(100, 310);
    const NoiseSchedule sched = NoiseSchedule::cosine(10);
    const CondFeatures feats;
    EvalConfig cfg;

    const std::vector<MethodSpec> methods{{"gt", GenMethod::ground_truth, nullptr},
                                          {"naive", GenMethod::naive, &net}};
    const MetricReport report = evaluate(methods, tasks, align, sched, feats, cfg);
    REQUIRE(report.rows.size() == 2);

    // ground truth against itself: zero divergences, zero Frechet, full
    // consistency
    const EvalRow& gt_row = report.rows[0];
    CHECK(gt_row.method == "gt");
    CHECK(gt_row.gt == "oracle");
    CHECK(gt_row.captioner == "oracle");
    CHECK(gt_row.dataset == "synth-default");
    CHECK(gt_row.kl_x100 == 0.0);
    CHECK(gt_row.chi2_x100 == 0.0);
    CHECK(gt_row.fid >= 0.0);
    CHECK(gt_row.fid < 1e-8);
    REQUIRE(gt_row.consistency.has_value());
    CHECK(*gt_row.consistency == 1.0);

    // untrained sampler output scores differently from ground truth
    const EvalRow& naive_row = report.rows[1];
    CHECK(naive_row.kl_x100 > 0.0);
    CHECK(naive_row.chi2_x100 > 0.0);
    CHECK(naive_row.fid > 0.0);

    // independent recomputation of the naive row pins the score population
    // (per-step scores pooled across tasks), the seed mapping, and the
    // exactly-once x100 scaling
    std::vector<double> gen_scores, gt_scores;
    std::vector<Tensor> gen_feats, gt_feats;
    std::vector<double> gen_cons;
    for (std::size_t t = 0; t < tasks.size(); ++t) {
        const SynthTask& task = tasks[t];
        const auto images = generate_naive_sequence(net, task.spec, sched, cfg.guidance_w,
                                                    feats, mix_seed(cfg.seed, t));
        for (std::size_t i = 0; i < images.size(); ++i) {
            gen_scores.push_back(caption_score(align, images[i], task.spec.steps[i]));
            gen_feats.push_back(align.embed_image(images[i]));
        }
        gen_cons.push_back(consistency_score(images, task));
        for (std::size_t i = 0; i < task.spec.steps.size(); ++i) {
            const Tensor& img = task.image_after_step(static_cast<int>(i));
            gt_scores.push_back(caption_score(align, img, task.spec.steps[i]));
            gt_feats.push_back(align.embed_image(image_to_tokens(img)));
        }
    }
    const ScoreDistribution p = build_distribution(gen_scores, cfg.bins);
    const ScoreDistribution q = build_distribution(gt_scores, cfg.bins);
    CHECK(naive_row.kl_x100 == 100.0 * kl_divergence(p, q));
    CHECK(naive_row.chi2_x100 == 100.0 * chi_square(p, q));
    CHECK(naive_row.fid == frechet_distance(gen_feats, gt_feats));
    double cons = 0.0;
    for (double c : gen_cons) cons += c;
    CHECK(*naive_row.consistency == cons / static_cast<double>(gen_cons.size()));

    // determinism: a second run reproduces the report bitwise
    CHECK(evaluate(methods, tasks, align, sched, feats, cfg) == report);

    // serialization round trip
    const std::string csv = report_to_csv(report);
    CHECK(csv.find("method,gt,captioner,dataset,kl_x100,chi2_x100,fid,consistency\n") !=
          std::string::npos);
    CHECK(csv.find("# chi-square reference") != std::string::npos);
    CHECK(report_from_csv(csv) == report);
    const nlohmann::json j = report_to_json(report);
    CHECK(j["rows"].size() == 2);
    CHECK(j["rows"][0]["method"] == "gt");
    CHECK(j["rows"][1]["kl_x100"].get<double>() == naive_row.kl_x100);

    // contract errors
    const std::vector<SynthTask> few(tasks.begin(), tasks.begin() + 99);
    CHECK_THROWS_AS(evaluate(methods, few, align, sched, feats, cfg),
                    InsufficientDataError);
    CHECK_THROWS_AS(evaluate({}, tasks, align, sched, feats, cfg), EmptyInputError);
    const std::vector<MethodSpec> bad{{"chain", GenMethod::chain, nullptr}};
    CHECK_THROWS_AS(evaluate(bad, tasks, align, sched, feats, cfg), ContractError);
}

TEST_CASE("external report rows round-trip without value alteration") {
    const std::string fixture =
        "method,gt,captioner,dataset,kl_x100,chi2_x100,fid,consistency\n"
        "Ours,Human,llava,HTStep,12.71,5.92,31.87,\n"
        "Baseline,Human,llava,HTStep,15.26,7.05,34.9,0.5\n";
    const MetricReport report = report_from_csv(fixture);
    REQUIRE(report.rows.size() == 2);
    CHECK(report.rows[0].method == "Ours");
    CHECK(report.rows[0].gt == "Human");
    CHECK(report.rows[0].captioner == "llava");
    CHECK(report.rows[0].dataset == "HTStep");
    CHECK(report.rows[0].kl_x100 == 12.71);
    CHECK(report.rows[0].chi2_x100 == 5.92);
    CHECK(report.rows[0].fid == 31.87);
    CHECK(!report.rows[0].consistency.has_value());
    REQUIRE(report.rows[1].consistency.has_value());
    CHECK(*report.rows[1].consistency == 0.5);
    CHECK(report_to_csv(report) == fixture);

    // CRLF input parses to the same rows
    std::string crlf = fixture;
    std::string with_cr;
    for (char ch : crlf) {
        if (ch == '\n') with_cr += '\r';
        with_cr += ch;
    }
    CHECK(report_from_csv(with_cr) == report);

    CHECK_THROWS_AS(report_from_csv("a,b,c\n"), IoError);
    CHECK_THROWS_AS(report_from_csv(""), IoError);
    const std::string short_row =
        "method,gt,captioner,dataset,kl_x100,chi2_x100,fid,consistency\n"
        "Ours,Human,llava,HTStep,12.71\n";
    CHECK_THROWS_AS(report_from_csv(short_row), IoError);
    const std::string bad_value =
        "method,gt,captioner,dataset,kl_x100,chi2_x100,fid,consistency\n"
        "Ours,Human,llava,HTStep,abc,5.92,31.87,\n";
    CHECK_THROWS_AS(report_from_csv(bad_value), IoError);
}

TEST_CASE("plot exports: histogram points and a plotting-only kde curve") {
    Rng rng(370);
    std::vector<double> scores;
    for (int i = 0; i < 200; ++i) scores.push_back(rng.uniform(0.2, 2.3));
    const ScoreDistribution d = build_distribution(scores, 25);
    const std::string hist = distribution_to_csv(d);
    CHECK(std::count(hist.begin(), hist.end(), '\n') == 26);  // header + 25 bins
    CHECK(hist.rfind("bin_center,probability\n", 0) == 0);

    const auto curve = kde_curve(scores, 251);
    REQUIRE(curve.size() == 251);
    CHECK(curve.front().first == 0.0);
    CHECK(std::abs(curve.back().first - 2.5) < 1e-12);
    double integral = 0.0;
    for (std::size_t i = 1; i < curve.size(); ++i) {
        CHECK(curve[i].second >= 0.0);
        integral += 0.5 * (curve[i].second + curve[i - 1].second) *
                    (curve[i].first - curve[i - 1].first);
    }
    CHECK(std::abs(integral - 1.0) < 0.05);
    const std::string kcsv = kde_to_csv(curve);
    CHECK(kcsv.rfind("x,density\n", 0) == 0);
    CHECK(std::count(kcsv.begin(), kcsv.end(), '\n') == 252);

    // identical scores: the bandwidth floor keeps the curve finite
    const auto flat = kde_curve(std::vector<double>(12, 1.0), 100);
    for (const auto& [x, dens] : flat) {
        CHECK(std::isfinite(dens));
        CHECK(dens >= 0.0);
    }
    CHECK_THROWS_AS(kde_curve(std::vector<double>(9, 1.0), 100), InsufficientDataError);
    CHECK_THROWS_AS(kde_curve(scores, 1), ContractError);
}
