#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "stepviz/alignment.hpp"
#include "stepviz/pairwise.hpp"
#include "stepviz/synth.hpp"

namespace stepviz {

// Alignment scores live on [0, 2.5] by construction (2.5-scaled clamped
// cosine), so every distribution shares that support.
inline constexpr double kScoreMax = 2.5;

struct ScoreDistribution {
    std::vector<double> scores;  // raw scores, each in [0, 2.5]
    std::vector<double> edges;   // bins + 1 equal-width edges over [0, 2.5]
    std::vector<double> probs;   // add-eps smoothed, sums to 1
};

// Histogram over `bins` equal-width bins with add-epsilon smoothing
// (eps = 1e-6) and renormalization. Needs at least 10 scores. Scores may
// overshoot the support by numerical dust (1e-9) and are clamped; anything
// further out is a contract violation.
ScoreDistribution build_distribution(const std::vector<double>& scores, int bins = 25);

// Gaussian KDE curve for plotting only -- it never feeds a metric. Bandwidth
// by Silverman's rule (floored so identical scores stay finite). Returns
// (x, density) pairs sampled uniformly over [0, 2.5].
std::vector<std::pair<double, double>> kde_curve(const std::vector<double>& scores,
                                                 int points = 100);

// Sum over smoothed bins of p ln(p/q). Both distributions must share bin
// edges.
double kl_divergence(const ScoreDistribution& p, const ScoreDistribution& q);

// Sum over smoothed bins of (p - q)^2 / q with q as the reference
// (ground-truth) distribution.
double chi_square(const ScoreDistribution& p, const ScoreDistribution& q);

// Squared Frechet distance between Gaussian fits of two feature sets:
//   d^2 = |mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})
// computed via the symmetric form (S_b^{1/2} S_a S_b^{1/2})^{1/2} with a
// hand-rolled Jacobi eigensolver and negative eigenvalues clamped to 0.
// Every feature tensor is flattened; all must share one width d, and each
// side needs at least d + 1 samples.
double frechet_distance(const std::vector<Tensor>& features_a,
                        const std::vector<Tensor>& features_b);

// Fraction of the task's persisting objects whose (shape, color) survive
// across the two generated images they span. `images` holds one generated
// image per step, token [64, 3] or image [8, 8, 3] layout.
double consistency_score(const std::vector<Tensor>& images, const SynthTask& task);

// 2.5 * max(0, cos(text_tower(oracle_caption(image)), text_tower(text))) --
// the caption-mediated alignment score and the primary evaluation channel.
double caption_score(const AlignmentModel& model, const Tensor& image,
                     const std::string& text, int prompt_variant = 0);

// Direct image-text score; shares the reward implementation (goal path off).
double alignment_score(const AlignmentModel& model, const Tensor& image,
                       const std::string& text);

enum class GenMethod { ground_truth, naive, chain, average };

// One row of the comparison: a labeled generation method plus the denoiser
// that drives it (null only for ground_truth).
struct MethodSpec {
    std::string label;
    GenMethod method = GenMethod::chain;
    const DenoiserNet* net = nullptr;
};

struct EvalConfig {
    std::string dataset = "synth-default";
    int bins = 25;
    double guidance_w = 2.0;
    double cross_weight = 0.5;
    MaskMode mask_mode = MaskMode::mul;
    int prompt_variant = 0;
    std::uint64_t seed = 1;
};

struct EvalRow {
    std::string method;
    std::string gt;
    std::string captioner;
    std::string dataset;
    double kl_x100 = 0.0;
    double chi2_x100 = 0.0;
    double fid = 0.0;
    std::optional<double> consistency;  // external tables omit this column

    bool operator==(const EvalRow&) const = default;
};

struct MetricReport {
    std::string note;  // '#'-prefixed header line in the CSV, may be empty
    std::vector<EvalRow> rows;

    bool operator==(const MetricReport&) const = default;
};

// Pooled per-step caption scores for one method, kept around for plotting
// exports.
struct MethodScores {
    std::string label;
    std::vector<double> scores;
};

// Scores every method's generated sequences against the shared ground-truth
// caption-score distribution on the eval set: per-step caption scores pooled
// across tasks, image-tower features for the Frechet column, per-task
// consistency averaged. Needs >= 100 tasks. Fully deterministic under
// (config, seed); task t generates with seed mix_seed(cfg.seed, t). When
// scores_out is given it receives one MethodScores per method, in order.
MetricReport evaluate(const std::vector<MethodSpec>& methods,
                      const std::vector<SynthTask>& tasks, const AlignmentModel& align,
                      const NoiseSchedule& sched, const CondFeatures& feats,
                      const EvalConfig& cfg, std::vector<MethodScores>* scores_out = nullptr);

// CSV schema: method,gt,captioner,dataset,kl_x100,chi2_x100,fid,consistency
// with one optional leading '# note' line. Numbers print in shortest
// round-trip form and parse back without value alteration.
std::string report_to_csv(const MetricReport& report);
MetricReport report_from_csv(const std::string& text);
nlohmann::json report_to_json(const MetricReport& report);

// Plotting exports: histogram bins as center,probability lines and a KDE
// curve as x,density lines.
std::string distribution_to_csv(const ScoreDistribution& dist);
std::string kde_to_csv(const std::vector<std::pair<double, double>>& curve);

}  // namespace stepviz
