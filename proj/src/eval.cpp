#include "stepviz/eval.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <sstream>

#include "stepviz/errors.hpp"
#include "stepviz/rng.hpp"

namespace stepviz {

namespace {

constexpr double kSmoothEps = 1e-6;
constexpr double kSupportDust = 1e-9;  // roundoff allowance past [0, 2.5]

// ---- shape normalizers ------------------------------------------------

Tensor as_image(const Tensor& t) {
    const auto& s = t.shape();
    if (s.size() == 3) return t;
    if (s.size() == 2) return tokens_to_image(t);
    throw DimError("eval: expected an image [h,w,3] or token [m,3] tensor");
}

Tensor as_tokens(const Tensor& t) {
    const auto& s = t.shape();
    if (s.size() == 2) return t;
    if (s.size() == 3) return image_to_tokens(t);
    throw DimError("eval: expected an image [h,w,3] or token [m,3] tensor");
}

// ---- symmetric eigensolver (cyclic Jacobi) ----------------------------

struct EigenSystem {
    std::vector<double> values;   // d eigenvalues
    std::vector<double> vectors;  // row-major d x d, column k = eigenvector k
};

EigenSystem jacobi_eigen(std::vector<double> a, int d) {
    EigenSystem out;
    out.values.assign(static_cast<std::size_t>(d), 0.0);
    out.vectors.assign(static_cast<std::size_t>(d) * d, 0.0);
    for (int i = 0; i < d; ++i) out.vectors[static_cast<std::size_t>(i) * d + i] = 1.0;

    auto at = [&](std::vector<double>& m, int r, int c) -> double& {
        return m[static_cast<std::size_t>(r) * d + c];
    };
    double scale = 0.0;
    for (double v : a) scale += v * v;
    const double tol = 1e-28 * (1.0 + scale);

    const int max_sweeps = 100;
    int sweep = 0;
    for (; sweep < max_sweeps; ++sweep) {
        double off = 0.0;
        for (int p = 0; p < d; ++p)
            for (int q = p + 1; q < d; ++q) off += at(a, p, q) * at(a, p, q);
        if (off <= tol) break;
        for (int p = 0; p < d; ++p) {
            for (int q = p + 1; q < d; ++q) {
                const double apq = at(a, p, q);
                if (apq == 0.0) continue;
                const double theta = (at(a, q, q) - at(a, p, p)) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (int k = 0; k < d; ++k) {
                    const double akp = at(a, k, p), akq = at(a, k, q);
                    at(a, k, p) = c * akp - s * akq;
                    at(a, k, q) = s * akp + c * akq;
                }
                for (int k = 0; k < d; ++k) {
                    const double apk = at(a, p, k), aqk = at(a, q, k);
                    at(a, p, k) = c * apk - s * aqk;
                    at(a, q, k) = s * apk + c * aqk;
                }
                for (int k = 0; k < d; ++k) {
                    const double vkp = at(out.vectors, k, p), vkq = at(out.vectors, k, q);
                    at(out.vectors, k, p) = c * vkp - s * vkq;
                    at(out.vectors, k, q) = s * vkp + c * vkq;
                }
            }
        }
    }
    if (sweep == max_sweeps)
        throw NumericalAbort("frechet_distance: Jacobi eigensolver did not converge");
    for (int i = 0; i < d; ++i) out.values[static_cast<std::size_t>(i)] = at(a, i, i);
    return out;
}

// V diag(sqrt(max(lambda, 0))) V^T
std::vector<double> sqrtm_psd(const std::vector<double>& m, int d) {
    const EigenSystem eig = jacobi_eigen(m, d);
    std::vector<double> root(static_cast<std::size_t>(d) * d, 0.0);
    for (int i = 0; i < d; ++i) {
        for (int j = 0; j < d; ++j) {
            double acc = 0.0;
            for (int k = 0; k < d; ++k) {
                const double lam = std::max(0.0, eig.values[static_cast<std::size_t>(k)]);
                acc += eig.vectors[static_cast<std::size_t>(i) * d + k] * std::sqrt(lam) *
                       eig.vectors[static_cast<std::size_t>(j) * d + k];
            }
            root[static_cast<std::size_t>(i) * d + j] = acc;
        }
    }
    return root;
}

std::vector<double> matmul_sq(const std::vector<double>& a, const std::vector<double>& b,
                              int d) {
    std::vector<double> out(static_cast<std::size_t>(d) * d, 0.0);
    for (int i = 0; i < d; ++i)
        for (int k = 0; k < d; ++k) {
            const double aik = a[static_cast<std::size_t>(i) * d + k];
            if (aik == 0.0) continue;
            for (int j = 0; j < d; ++j)
                out[static_cast<std::size_t>(i) * d + j] +=
                    aik * b[static_cast<std::size_t>(k) * d + j];
        }
    return out;
}

struct GaussianFit {
    std::vector<double> mean;  // d
    std::vector<double> cov;   // d x d, unbiased (n - 1)
};

GaussianFit fit_gaussian(const std::vector<Tensor>& features, int d, const char* side) {
    const std::size_t n = features.size();
    if (n < static_cast<std::size_t>(d) + 1)
        throw InsufficientDataError(std::string("frechet_distance: ") + side + " needs >= " +
                                    std::to_string(d + 1) + " samples, got " +
                                    std::to_string(n));
    GaussianFit fit;
    fit.mean.assign(static_cast<std::size_t>(d), 0.0);
    fit.cov.assign(static_cast<std::size_t>(d) * d, 0.0);
    for (const Tensor& f : features)
        for (int i = 0; i < d; ++i) fit.mean[static_cast<std::size_t>(i)] += f.data()[i];
    for (double& v : fit.mean) v /= static_cast<double>(n);
    for (const Tensor& f : features) {
        for (int i = 0; i < d; ++i) {
            const double di = f.data()[i] - fit.mean[static_cast<std::size_t>(i)];
            for (int j = 0; j < d; ++j) {
                const double dj = f.data()[j] - fit.mean[static_cast<std::size_t>(j)];
                fit.cov[static_cast<std::size_t>(i) * d + j] += di * dj;
            }
        }
    }
    for (double& v : fit.cov) v /= static_cast<double>(n - 1);
    return fit;
}

// ---- number formatting -------------------------------------------------

std::string format_double(double v) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

double parse_double_field(const std::string& field, const std::string& what) {
    double v = 0.0;
    const char* first = field.data();
    const char* last = field.data() + field.size();
    const auto res = std::from_chars(first, last, v);
    if (res.ec != std::errc() || res.ptr != last)
        throw IoError("report csv: bad " + what + " value '" + field + "'");
    return v;
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            fields.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(ch);
        }
    }
    fields.push_back(cur);
    return fields;
}

const char* kCsvHeader = "method,gt,captioner,dataset,kl_x100,chi2_x100,fid,consistency";

void check_same_bins(const ScoreDistribution& p, const ScoreDistribution& q,
                     const char* what) {
    if (p.edges != q.edges)
        throw ContractError(std::string(what) + ": distributions use different bin edges");
    if (p.probs.size() != q.probs.size() || p.probs.empty())
        throw ContractError(std::string(what) + ": distributions use different bin counts");
}

}  // namespace

// ---- distributions ------------------------------------------------------

ScoreDistribution build_distribution(const std::vector<double>& scores, int bins) {
    if (bins < 1) throw ContractError("build_distribution: bins must be >= 1");
    if (scores.size() < 10)
        throw InsufficientDataError("build_distribution: needs >= 10 scores, got " +
                                    std::to_string(scores.size()));
    ScoreDistribution dist;
    dist.scores.reserve(scores.size());
    for (double s : scores) {
        if (s < -kSupportDust || s > kScoreMax + kSupportDust)
            throw ContractError("build_distribution: score " + std::to_string(s) +
                                " outside [0, 2.5]");
        dist.scores.push_back(std::clamp(s, 0.0, kScoreMax));
    }
    dist.edges.resize(static_cast<std::size_t>(bins) + 1);
    for (int k = 0; k <= bins; ++k)
        dist.edges[static_cast<std::size_t>(k)] = kScoreMax * k / bins;

    std::vector<double> counts(static_cast<std::size_t>(bins), 0.0);
    const double width = kScoreMax / bins;
    for (double s : dist.scores) {
        int b = static_cast<int>(s / width);
        if (b >= bins) b = bins - 1;  // s == 2.5 lands in the last bin
        counts[static_cast<std::size_t>(b)] += 1.0;
    }
    dist.probs.resize(static_cast<std::size_t>(bins));
    const double n = static_cast<double>(dist.scores.size());
    const double norm = 1.0 + bins * kSmoothEps;
    for (int b = 0; b < bins; ++b)
        dist.probs[static_cast<std::size_t>(b)] =
            (counts[static_cast<std::size_t>(b)] / n + kSmoothEps) / norm;
    return dist;
}

std::vector<std::pair<double, double>> kde_curve(const std::vector<double>& scores,
                                                 int points) {
    if (points < 2) throw ContractError("kde_curve: needs >= 2 points");
    if (scores.size() < 10)
        throw InsufficientDataError("kde_curve: needs >= 10 scores, got " +
                                    std::to_string(scores.size()));
    const double n = static_cast<double>(scores.size());
    double mean = 0.0;
    for (double s : scores) mean += s;
    mean /= n;
    double var = 0.0;
    for (double s : scores) var += (s - mean) * (s - mean);
    var /= (n - 1.0);
    const double sd = std::sqrt(var);

    std::vector<double> sorted = scores;
    std::sort(sorted.begin(), sorted.end());
    const auto quantile = [&](double q) {
        const double pos = q * (n - 1.0);
        const std::size_t lo = static_cast<std::size_t>(pos);
        const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
        const double frac = pos - static_cast<double>(lo);
        return sorted[lo] * (1.0 - frac) + sorted[hi] * frac;
    };
    const double iqr = quantile(0.75) - quantile(0.25);
    // Silverman's rule with a floor so identical scores stay finite
    double spread = sd;
    if (iqr > 0.0) spread = std::min(spread, iqr / 1.34);
    double h = 0.9 * spread * std::pow(n, -0.2);
    h = std::max(h, 1e-3);

    std::vector<std::pair<double, double>> curve;
    curve.reserve(static_cast<std::size_t>(points));
    const double inv = 1.0 / (n * h * std::sqrt(2.0 * M_PI));
    for (int i = 0; i < points; ++i) {
        const double x = kScoreMax * i / (points - 1);
        double dens = 0.0;
        for (double s : scores) {
            const double u = (x - s) / h;
            dens += std::exp(-0.5 * u * u);
        }
        curve.emplace_back(x, dens * inv);
    }
    return curve;
}

double kl_divergence(const ScoreDistribution& p, const ScoreDistribution& q) {
    check_same_bins(p, q, "kl_divergence");
    double kl = 0.0;
    for (std::size_t b = 0; b < p.probs.size(); ++b) {
        const double pb = p.probs[b], qb = q.probs[b];
        if (qb <= 0.0) throw ContractError("kl_divergence: reference bin has mass <= 0");
        if (pb < 0.0) throw ContractError("kl_divergence: negative bin probability");
        if (pb > 0.0) kl += pb * std::log(pb / qb);
    }
    return kl;
}

double chi_square(const ScoreDistribution& p, const ScoreDistribution& q) {
    check_same_bins(p, q, "chi_square");
    double stat = 0.0;
    for (std::size_t b = 0; b < p.probs.size(); ++b) {
        const double qb = q.probs[b];
        if (qb <= 0.0) throw ContractError("chi_square: reference bin has mass <= 0");
        const double diff = p.probs[b] - qb;
        stat += diff * diff / qb;
    }
    return stat;
}

double frechet_distance(const std::vector<Tensor>& features_a,
                        const std::vector<Tensor>& features_b) {
    if (features_a.empty() || features_b.empty())
        throw InsufficientDataError("frechet_distance: empty feature set");
    const int d = static_cast<int>(features_a.front().numel());
    if (d < 1) throw DimError("frechet_distance: zero-width features");
    for (const Tensor& f : features_a)
        if (static_cast<int>(f.numel()) != d)
            throw DimError("frechet_distance: features disagree on width");
    for (const Tensor& f : features_b)
        if (static_cast<int>(f.numel()) != d)
            throw DimError("frechet_distance: features disagree on width");

    const GaussianFit a = fit_gaussian(features_a, d, "side a");
    const GaussianFit b = fit_gaussian(features_b, d, "side b");

    double mean_term = 0.0;
    for (int i = 0; i < d; ++i) {
        const double diff = a.mean[static_cast<std::size_t>(i)] -
                            b.mean[static_cast<std::size_t>(i)];
        mean_term += diff * diff;
    }
    double trace_ab = 0.0;
    for (int i = 0; i < d; ++i)
        trace_ab += a.cov[static_cast<std::size_t>(i) * d + i] +
                    b.cov[static_cast<std::size_t>(i) * d + i];

    // Tr((S_a S_b)^{1/2}) = Tr((S_b^{1/2} S_a S_b^{1/2})^{1/2})
    const std::vector<double> rb = sqrtm_psd(b.cov, d);
    std::vector<double> inner = matmul_sq(matmul_sq(rb, a.cov, d), rb, d);
    for (int i = 0; i < d; ++i)
        for (int j = i + 1; j < d; ++j) {
            const double sym = 0.5 * (inner[static_cast<std::size_t>(i) * d + j] +
                                      inner[static_cast<std::size_t>(j) * d + i]);
            inner[static_cast<std::size_t>(i) * d + j] = sym;
            inner[static_cast<std::size_t>(j) * d + i] = sym;
        }
    const EigenSystem eig = jacobi_eigen(inner, d);
    double trace_root = 0.0;
    for (double lam : eig.values) trace_root += std::sqrt(std::max(0.0, lam));

    return std::max(0.0, mean_term + trace_ab - 2.0 * trace_root);
}

// ---- task-level scoring -------------------------------------------------

double consistency_score(const std::vector<Tensor>& images, const SynthTask& task) {
    if (images.size() != task.spec.steps.size())
        throw ContractError("consistency_score: got " + std::to_string(images.size()) +
                            " images for " + std::to_string(task.spec.steps.size()) +
                            " steps");
    const std::vector<PersistPair> pairs = persisting_objects(task);
    if (pairs.empty())
        throw EmptyInputError("consistency_score: task has no persisting objects");
    std::vector<WorldState> decoded;
    decoded.reserve(images.size());
    for (const Tensor& img : images) decoded.push_back(decode_state(as_image(img)));
    int hits = 0;
    for (const PersistPair& pp : pairs) {
        const auto& a = decoded[static_cast<std::size_t>(pp.step)].regions[pp.region];
        const auto& b = decoded[static_cast<std::size_t>(pp.step) + 1].regions[pp.region];
        if (a && b && a->shape == b->shape && a->color == b->color) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(pairs.size());
}

double caption_score(const AlignmentModel& model, const Tensor& image,
                     const std::string& text, int prompt_variant) {
    NoTapeScope no_tape;
    const std::string caption = oracle_caption(as_image(image), prompt_variant);
    const Tensor a = model.embed_step_text(caption);
    const Tensor b = model.embed_step_text(text);
    double dot = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) dot += a.data()[i] * b.data()[i];
    return kScoreMax * std::max(0.0, dot);
}

double alignment_score(const AlignmentModel& model, const Tensor& image,
                       const std::string& text) {
    NoTapeScope no_tape;
    // goal path is off at weight 0, so the text doubles as a placeholder goal
    return reward(model, as_tokens(image), text, text, 0.0).item();
}

// ---- evaluate -----------------------------------------------------------

namespace {

struct MethodArtifacts {
    std::vector<double> scores;       // per-step caption scores, pooled
    std::vector<Tensor> features;     // image-tower features, one per image
    std::vector<double> consistency;  // one per task
};

MethodArtifacts score_images(const std::vector<std::vector<Tensor>>& per_task_images,
                             const std::vector<SynthTask>& tasks,
                             const AlignmentModel& align, const EvalConfig& cfg) {
    NoTapeScope no_tape;
    MethodArtifacts out;
    for (std::size_t t = 0; t < tasks.size(); ++t) {
        const SynthTask& task = tasks[t];
        const std::vector<Tensor>& images = per_task_images[t];
        for (std::size_t i = 0; i < images.size(); ++i) {
            out.scores.push_back(
                caption_score(align, images[i], task.spec.steps[i], cfg.prompt_variant));
            out.features.push_back(align.embed_image(as_tokens(images[i])));
        }
        out.consistency.push_back(consistency_score(images, task));
    }
    return out;
}

std::vector<Tensor> generate_for_task(const MethodSpec& spec, const SynthTask& task,
                                      const NoiseSchedule& sched, const CondFeatures& feats,
                                      const EvalConfig& cfg, std::uint64_t seed) {
    switch (spec.method) {
        case GenMethod::ground_truth: {
            std::vector<Tensor> images;
            for (std::size_t i = 0; i < task.spec.steps.size(); ++i)
                images.push_back(task.image_after_step(static_cast<int>(i)));
            return images;
        }
        case GenMethod::naive:
            return generate_naive_sequence(*spec.net, task.spec, sched, cfg.guidance_w,
                                           feats, seed);
        case GenMethod::chain:
        case GenMethod::average: {
            const auto mode = spec.method == GenMethod::chain ? SequencePlan::Mode::chain
                                                              : SequencePlan::Mode::average;
            const SequencePlan plan =
                SequencePlan::adjacent(static_cast<int>(task.spec.steps.size()), mode);
            PairGenConfig pcfg;
            pcfg.guidance_w = cfg.guidance_w;
            pcfg.cross_weight = cfg.cross_weight;
            pcfg.mode = cfg.mask_mode;
            return generate_sequence(*spec.net, task.spec, plan, sched, pcfg, feats, seed)
                .images;
        }
    }
    throw ContractError("evaluate: unknown generation method");
}

double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

}  // namespace

MetricReport evaluate(const std::vector<MethodSpec>& methods,
                      const std::vector<SynthTask>& tasks, const AlignmentModel& align,
                      const NoiseSchedule& sched, const CondFeatures& feats,
                      const EvalConfig& cfg, std::vector<MethodScores>* scores_out) {
    if (methods.empty()) throw EmptyInputError("evaluate: no methods given");
    if (tasks.size() < 100)
        throw InsufficientDataError("evaluate: needs >= 100 eval tasks, got " +
                                    std::to_string(tasks.size()));
    for (const MethodSpec& m : methods)
        if (m.method != GenMethod::ground_truth && m.net == nullptr)
            throw ContractError("evaluate: method '" + m.label + "' has no denoiser");

    // shared ground-truth reference
    std::vector<std::vector<Tensor>> gt_images(tasks.size());
    MethodSpec gt_spec;
    gt_spec.method = GenMethod::ground_truth;
    for (std::size_t t = 0; t < tasks.size(); ++t)
        gt_images[t] = generate_for_task(gt_spec, tasks[t], sched, feats, cfg, 0);
    const MethodArtifacts gt = score_images(gt_images, tasks, align, cfg);
    const ScoreDistribution q = build_distribution(gt.scores, cfg.bins);

    MetricReport report;
    report.note = "chi-square reference: ground-truth distribution";
    for (const MethodSpec& spec : methods) {
        MethodArtifacts art;
        if (spec.method == GenMethod::ground_truth) {
            art = gt;
        } else {
            std::vector<std::vector<Tensor>> images(tasks.size());
            for (std::size_t t = 0; t < tasks.size(); ++t)
                images[t] = generate_for_task(spec, tasks[t], sched, feats, cfg,
                                              mix_seed(cfg.seed, t));
            art = score_images(images, tasks, align, cfg);
        }
        const ScoreDistribution p = build_distribution(art.scores, cfg.bins);
        EvalRow row;
        row.method = spec.label;
        row.gt = "oracle";
        row.captioner = "oracle";
        row.dataset = cfg.dataset;
        row.kl_x100 = 100.0 * kl_divergence(p, q);
        row.chi2_x100 = 100.0 * chi_square(p, q);
        row.fid = frechet_distance(art.features, gt.features);
        row.consistency = mean_of(art.consistency);
        report.rows.push_back(row);
        if (scores_out) scores_out->push_back({spec.label, art.scores});
    }
    return report;
}

// ---- serialization ------------------------------------------------------

std::string report_to_csv(const MetricReport& report) {
    std::string out;
    if (!report.note.empty()) out += "# " + report.note + "\n";
    out += kCsvHeader;
    out += '\n';
    for (const EvalRow& row : report.rows) {
        out += row.method + ',' + row.gt + ',' + row.captioner + ',' + row.dataset + ',';
        out += format_double(row.kl_x100) + ',' + format_double(row.chi2_x100) + ',' +
               format_double(row.fid) + ',';
        if (row.consistency) out += format_double(*row.consistency);
        out += '\n';
    }
    return out;
}

MetricReport report_from_csv(const std::string& text) {
    MetricReport report;
    std::istringstream in(text);
    std::string line;
    bool saw_header = false;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (line.front() == '#') {
            std::size_t start = 1;
            while (start < line.size() && line[start] == ' ') ++start;
            if (report.note.empty()) report.note = line.substr(start);
            continue;
        }
        if (!saw_header) {
            if (line != kCsvHeader)
                throw IoError("report csv: expected header '" + std::string(kCsvHeader) +
                              "', got '" + line + "'");
            saw_header = true;
            continue;
        }
        const std::vector<std::string> fields = split_csv_line(line);
        if (fields.size() != 8)
            throw IoError("report csv: expected 8 fields, got " +
                          std::to_string(fields.size()) + " in '" + line + "'");
        EvalRow row;
        row.method = fields[0];
        row.gt = fields[1];
        row.captioner = fields[2];
        row.dataset = fields[3];
        row.kl_x100 = parse_double_field(fields[4], "kl_x100");
        row.chi2_x100 = parse_double_field(fields[5], "chi2_x100");
        row.fid = parse_double_field(fields[6], "fid");
        if (!fields[7].empty())
            row.consistency = parse_double_field(fields[7], "consistency");
        report.rows.push_back(row);
    }
    if (!saw_header) throw IoError("report csv: missing header line");
    return report;
}

nlohmann::json report_to_json(const MetricReport& report) {
    nlohmann::json rows = nlohmann::json::array();
    for (const EvalRow& row : report.rows) {
        nlohmann::json j{{"method", row.method},       {"gt", row.gt},
                         {"captioner", row.captioner}, {"dataset", row.dataset},
                         {"kl_x100", row.kl_x100},     {"chi2_x100", row.chi2_x100},
                         {"fid", row.fid}};
        if (row.consistency)
            j["consistency"] = *row.consistency;
        else
            j["consistency"] = nullptr;
        rows.push_back(j);
    }
    return nlohmann::json{{"note", report.note}, {"rows", rows}};
}

std::string distribution_to_csv(const ScoreDistribution& dist) {
    std::string out = "bin_center,probability\n";
    for (std::size_t b = 0; b < dist.probs.size(); ++b) {
        const double center = 0.5 * (dist.edges[b] + dist.edges[b + 1]);
        out += format_double(center) + ',' + format_double(dist.probs[b]) + '\n';
    }
    return out;
}

std::string kde_to_csv(const std::vector<std::pair<double, double>>& curve) {
    std::string out = "x,density\n";
    for (const auto& [x, dens] : curve)
        out += format_double(x) + ',' + format_double(dens) + '\n';
    return out;
}

}  // namespace stepviz
