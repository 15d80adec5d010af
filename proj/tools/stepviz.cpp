#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "stepviz/alignment.hpp"
#include "stepviz/config.hpp"
#include "stepviz/errors.hpp"
#include "stepviz/eval.hpp"
#include "stepviz/io.hpp"
#include "stepviz/pairwise.hpp"
#include "stepviz/rng.hpp"
#include "stepviz/schedule.hpp"
#include "stepviz/synth.hpp"
#include "stepviz/trainer.hpp"

namespace fs = std::filesystem;
using namespace stepviz;
using nlohmann::json;

namespace {

// Rng stream ids so the subcommands never share a stream even under one seed.
enum Stream : std::uint64_t {
    kStreamNetInit = 1,
    kStreamTrain = 2,
    kStreamAlignPairs = 3,
    kStreamAlignInit = 4,
    kStreamAlignTrain = 5,
    kStreamFinetune = 6,
};

MaskMode mask_mode_of(const std::string& name) {
    if (name == "mul") return MaskMode::mul;
    if (name == "addlog") return MaskMode::addlog;
    throw ConfigError("mask_mode must be mul or addlog, got '" + name + "'");
}

DenoiserConfig denoiser_config_from(const RunConfig& rc) {
    DenoiserConfig dc;
    dc.d_model = rc.d_model;
    dc.n_blocks = rc.n_blocks;
    dc.tokens_per_slice = rc.image_size * rc.image_size;
    dc.channels = 3;
    dc.d_goal = rc.d_goal;
    dc.d_step = rc.d_step;
    dc.d_time = rc.d_model;
    return dc;
}

AlignConfig align_config_from(const RunConfig& rc) {
    AlignConfig ac;
    ac.tokens = rc.image_size * rc.image_size;
    ac.d_align = rc.d_align;
    ac.d_goal = rc.d_goal;
    ac.d_step = rc.d_step;
    ac.max_tokens = rc.max_tokens;
    ac.k_max = rc.k_max;
    return ac;
}

CondFeatures feats_from(const RunConfig& rc) {
    CondFeatures feats;
    feats.d_goal = rc.d_goal;
    feats.d_step = rc.d_step;
    feats.max_tokens = rc.max_tokens;
    feats.k_max = rc.k_max;
    return feats;
}

void require_artifact(const std::string& path, const std::string& what) {
    if (!fs::exists(path)) throw IoError("missing " + what + ": " + path);
}

json base_meta(const RunConfig& rc, const std::string& kind) {
    json meta;
    meta["kind"] = kind;
    meta["config_version"] = rc.config_version;
    meta["config_hash"] = config_hash(rc);
    meta["config"] = config_to_text(rc);
    meta["seed"] = rc.seed;
    return meta;
}

void write_manifest(const std::string& dir, const json& meta) {
    fs::create_directories(dir);
    write_text_file((fs::path(dir) / "manifest.json").string(), meta.dump(2) + "\n");
}

std::string fmt_g(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

// Rebuilds the model from the config recorded at save time, so sampling and
// evaluation cannot silently mismatch the trained dimensions.
RunConfig stored_config(const Checkpoint& ckpt, const std::string& dir) {
    if (!ckpt.meta.contains("config"))
        throw IoError("checkpoint manifest lacks a recorded config: " + dir);
    return parse_config_text(ckpt.meta["config"].get<std::string>());
}

DenoiserNet load_denoiser(const std::string& dir) {
    require_artifact(dir, "denoiser checkpoint");
    const Checkpoint ckpt = load_checkpoint(dir);
    const RunConfig rc = stored_config(ckpt, dir);
    Rng init(0);  // weights are overwritten below
    DenoiserNet net{denoiser_config_from(rc), init};
    load_into(ckpt, net.named_params());
    return net;
}

AlignmentModel load_alignment(const std::string& dir) {
    require_artifact(dir, "alignment checkpoint");
    const Checkpoint ckpt = load_checkpoint(dir);
    const RunConfig rc = stored_config(ckpt, dir);
    Rng init(0);
    AlignmentModel model{align_config_from(rc), init};
    load_into(ckpt, model.named_params());
    return model;
}

// ---- subcommands ---------------------------------------------------------

int cmd_gen_data(const RunConfig& rc, const std::string& out) {
    const auto tasks = generate_tasks(rc.tasks_count, rc.seed, Difficulty::named(rc.difficulty));
    json meta = base_meta(rc, "tasks");
    meta["count"] = rc.tasks_count;
    meta["difficulty"] = rc.difficulty;
    write_tasks(out, tasks, meta);
    std::printf("wrote %d tasks to %s\n", rc.tasks_count, out.c_str());
    return 0;
}

int cmd_train(const RunConfig& rc, const std::string& data, const std::string& out,
              bool verbose) {
    require_artifact(data, "task directory");
    const auto tasks = read_tasks(data);
    Rng init(mix_seed(rc.seed, kStreamNetInit));
    DenoiserNet net{denoiser_config_from(rc), init};
    const NoiseSchedule sched = NoiseSchedule::cosine(rc.timesteps);
    const CondFeatures feats = feats_from(rc);

    TrainConfig tcfg;
    tcfg.steps = rc.train_steps;
    tcfg.batch_size = rc.batch_size;
    tcfg.lr = rc.lr;
    tcfg.p_uncond = rc.p_uncond;
    tcfg.cross_weight = rc.cross_weight;
    tcfg.mask_mode = mask_mode_of(rc.mask_mode);
    tcfg.pair_stride_max = rc.pair_stride_max;
    tcfg.single_slice_fraction = rc.single_slice_fraction;
    tcfg.seed = mix_seed(rc.seed, kStreamTrain);
    tcfg.log_every = verbose ? 100 : 0;
    const TrainResult result = train_pair_model(net, tasks, sched, feats, tcfg);

    json meta = base_meta(rc, "denoiser");
    meta["steps"] = rc.train_steps;
    meta["final_loss"] = result.final_loss();
    save_checkpoint(out, net.named_params(), meta);
    std::string loss_csv = "step,loss\n";
    for (std::size_t i = 0; i < result.loss_log.size(); ++i)
        loss_csv += std::to_string(i) + ',' + fmt_g(result.loss_log[i]) + '\n';
    write_text_file((fs::path(out) / "loss.csv").string(), loss_csv);
    std::printf("saved denoiser checkpoint to %s (final loss %.6f)\n", out.c_str(),
                result.final_loss());
    return 0;
}

int cmd_align_train(const RunConfig& rc, const std::string& out, bool verbose) {
    const auto pairs = dedup_by_key(
        make_alignment_pairs(rc.align_pairs, mix_seed(rc.seed, kStreamAlignPairs),
                             rc.prompt_variant));
    if (static_cast<int>(pairs.size()) <= rc.align_holdout)
        throw InsufficientDataError("align-train: only " + std::to_string(pairs.size()) +
                                    " deduped pairs for a holdout of " +
                                    std::to_string(rc.align_holdout));
    const std::vector<AlignPair> holdout(pairs.begin(), pairs.begin() + rc.align_holdout);
    const std::vector<AlignPair> train(pairs.begin() + rc.align_holdout, pairs.end());

    Rng init(mix_seed(rc.seed, kStreamAlignInit));
    AlignmentModel model{align_config_from(rc), init};
    PretrainConfig pcfg;
    pcfg.steps = rc.align_steps;
    pcfg.batch = rc.align_batch;
    pcfg.lr = rc.align_lr;
    pcfg.seed = mix_seed(rc.seed, kStreamAlignTrain);
    pcfg.verbose = verbose;
    const PretrainResult result = contrastive_pretrain(model, train, holdout, pcfg);

    json meta = base_meta(rc, "alignment");
    meta["steps_run"] = result.steps_run;
    meta["holdout_acc"] = result.holdout_acc;
    save_checkpoint(out, model.named_params(), meta);
    std::printf("saved alignment checkpoint to %s (holdout acc %.4f after %d steps)\n",
                out.c_str(), result.holdout_acc, result.steps_run);
    return 0;
}

int cmd_finetune(const RunConfig& rc, const std::string& ckpt_dir, const std::string& align_dir,
                 const std::string& data, const std::string& out, bool verbose) {
    require_artifact(data, "task directory");
    DenoiserNet net = load_denoiser(ckpt_dir);
    const AlignmentModel reward_model = load_alignment(align_dir);
    const NoiseSchedule sched = NoiseSchedule::cosine(rc.timesteps);
    const CondFeatures feats = feats_from(rc);
    TaskSampler sampler;
    sampler.tasks = read_tasks(data);

    FinetuneConfig fcfg;
    fcfg.epochs = rc.finetune_epochs;
    fcfg.steps_per_epoch = rc.finetune_steps_per_epoch;
    fcfg.lr = rc.finetune_lr;
    fcfg.grad_window = rc.grad_window;
    fcfg.guidance_w = rc.guidance_w;
    fcfg.goal_reward_weight = rc.goal_reward_weight;
    fcfg.seed = mix_seed(rc.seed, kStreamFinetune);
    fcfg.verbose = verbose;
    const FinetuneResult result = finetune(net, sampler, reward_model, sched, feats, fcfg);

    json meta = base_meta(rc, "denoiser");
    meta["finetuned_from"] = ckpt_dir;
    meta["epoch_mean_reward"] = result.epoch_mean_reward;
    meta["nan_skips"] = result.nan_skips;
    save_checkpoint(out, net.named_params(), meta);
    std::string reward_csv = "epoch,mean_reward\n";
    for (std::size_t e = 0; e < result.epoch_mean_reward.size(); ++e)
        reward_csv += std::to_string(e) + ',' + fmt_g(result.epoch_mean_reward[e]) + '\n';
    write_text_file((fs::path(out) / "reward.csv").string(), reward_csv);
    std::printf("saved fine-tuned checkpoint to %s (last epoch reward %.4f)\n", out.c_str(),
                result.epoch_mean_reward.empty() ? 0.0 : result.epoch_mean_reward.back());
    return 0;
}

int cmd_sample(const RunConfig& rc, const std::string& ckpt_dir, const std::string& data,
               int task_index, const std::string& out) {
    require_artifact(data, "task directory");
    const DenoiserNet net = load_denoiser(ckpt_dir);
    const auto tasks = read_tasks(data);
    if (task_index < 0 || task_index >= static_cast<int>(tasks.size()))
        throw ConfigError("sample: --task " + std::to_string(task_index) +
                          " out of range for " + std::to_string(tasks.size()) + " tasks");
    const SynthTask& task = tasks[static_cast<std::size_t>(task_index)];
    const int n_steps = static_cast<int>(task.spec.steps.size());

    const NoiseSchedule sched = NoiseSchedule::cosine(rc.timesteps);
    const SequencePlan plan = SequencePlan::adjacent(n_steps, SequencePlan::mode_of(rc.assembly));
    PairGenConfig pcfg;
    pcfg.guidance_w = rc.guidance_w;
    pcfg.cross_weight = rc.cross_weight;
    pcfg.mode = mask_mode_of(rc.mask_mode);
    const SequenceResult seq =
        generate_sequence(net, task.spec, plan, sched, pcfg, feats_from(rc),
                          mix_seed(rc.seed, static_cast<std::uint64_t>(task_index)));

    fs::create_directories(out);
    std::vector<std::string> names;
    for (int i = 0; i < n_steps; ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "step_%02d.ppm", i + 1);
        write_ppm((fs::path(out) / name).string(), seq.images[static_cast<std::size_t>(i)],
                  rc.image_size, rc.image_size);
        names.emplace_back(name);
    }
    json meta = base_meta(rc, "sample");
    meta["task_index"] = task_index;
    meta["goal"] = task.spec.goal;
    meta["steps"] = task.spec.steps;
    meta["assembly"] = rc.assembly;
    meta["images"] = names;
    write_manifest(out, meta);
    std::printf("wrote %d step images to %s\n", n_steps, out.c_str());
    return 0;
}

int cmd_evaluate(const RunConfig& rc, const std::string& ckpt_dir, const std::string& align_dir,
                 const std::string& data, const std::string& finetuned_dir,
                 const std::string& out) {
    require_artifact(data, "task directory");
    const DenoiserNet net = load_denoiser(ckpt_dir);
    const AlignmentModel align = load_alignment(align_dir);
    auto tasks = read_tasks(data);
    if (static_cast<int>(tasks.size()) > rc.eval_tasks)
        tasks.resize(static_cast<std::size_t>(rc.eval_tasks));

    std::vector<MethodSpec> methods;
    methods.push_back({"gt", GenMethod::ground_truth, nullptr});
    methods.push_back({"naive", GenMethod::naive, &net});
    const GenMethod assembled =
        rc.assembly == "chain" ? GenMethod::chain : GenMethod::average;
    methods.push_back({rc.assembly, assembled, &net});
    std::optional<DenoiserNet> ft;
    if (!finetuned_dir.empty()) {
        ft.emplace(load_denoiser(finetuned_dir));
        methods.push_back({"finetuned", assembled, &*ft});
    }

    const NoiseSchedule sched = NoiseSchedule::cosine(rc.timesteps);
    EvalConfig ecfg;
    ecfg.dataset = "synth-" + rc.difficulty;
    ecfg.bins = rc.bins;
    ecfg.guidance_w = rc.guidance_w;
    ecfg.cross_weight = rc.cross_weight;
    ecfg.mask_mode = mask_mode_of(rc.mask_mode);
    ecfg.prompt_variant = rc.prompt_variant;
    ecfg.seed = rc.seed;
    std::vector<MethodScores> scores;
    const MetricReport report =
        evaluate(methods, tasks, align, sched, feats_from(rc), ecfg, &scores);

    fs::create_directories(out);
    write_text_file((fs::path(out) / "report.csv").string(), report_to_csv(report));
    write_text_file((fs::path(out) / "report.json").string(),
                    report_to_json(report).dump(2) + "\n");
    std::vector<std::string> files{"report.csv", "report.json"};
    for (const MethodScores& ms : scores) {
        const std::string hist = "hist_" + ms.label + ".csv";
        const std::string kde = "kde_" + ms.label + ".csv";
        write_text_file((fs::path(out) / hist).string(),
                        distribution_to_csv(build_distribution(ms.scores, rc.bins)));
        write_text_file((fs::path(out) / kde).string(), kde_to_csv(kde_curve(ms.scores)));
        files.push_back(hist);
        files.push_back(kde);
    }
    json meta = base_meta(rc, "evaluate");
    meta["tasks"] = tasks.size();
    meta["rows"] = report.rows.size();
    meta["files"] = files;
    write_manifest(out, meta);
    std::fputs(report_to_csv(report).c_str(), stdout);
    return 0;
}

int cmd_report(const RunConfig& rc, const std::vector<std::string>& inputs,
               const std::string& out) {
    MetricReport merged;
    for (const std::string& input : inputs) {
        fs::path path = input;
        if (fs::is_directory(path)) path /= "report.csv";
        require_artifact(path.string(), "evaluate output");
        const MetricReport part = report_from_csv(read_text_file(path.string()));
        if (merged.note.empty()) merged.note = part.note;
        merged.rows.insert(merged.rows.end(), part.rows.begin(), part.rows.end());
    }
    fs::create_directories(out);
    write_text_file((fs::path(out) / "report.csv").string(), report_to_csv(merged));
    write_text_file((fs::path(out) / "report.json").string(),
                    report_to_json(merged).dump(2) + "\n");
    json meta = base_meta(rc, "report");
    meta["inputs"] = inputs;
    meta["rows"] = merged.rows.size();
    write_manifest(out, meta);
    std::fputs(report_to_csv(merged).c_str(), stdout);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"stepviz: pairwise-coherent step-image generation pipeline"};
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::pair<std::string, std::string>> overrides;
    bool verbose = false;
    app.add_option("--config", config_path, "run config file (key=value lines)");
    app.add_flag("--verbose", verbose, "progress logging to stderr");
    // Every override is collected as raw text and pushed through the config
    // parser, so flag values obey exactly the config-file grammar.
    auto add_override = [&](const std::string& flag, const std::string& key,
                            const std::string& desc) {
        app.add_option_function<std::string>(
            flag, [&overrides, key](const std::string& v) { overrides.emplace_back(key, v); },
            desc);
    };
    add_override("--seed", "seed", "master seed");
    add_override("--timesteps", "timesteps", "diffusion timesteps T");
    add_override("--guidance-w", "guidance_w", "classifier-free guidance weight");
    add_override("--p-uncond", "p_uncond", "conditioning dropout probability");
    add_override("--max-tokens", "max_tokens", "clause token budget");
    add_override("--assembly", "assembly", "sequence assembly: chain | avg");
    add_override("--cross-weight", "cross_weight", "pair mask cross-slice weight");
    add_override("--mask-mode", "mask_mode", "mask application: mul | addlog");
    add_override("--grad-window", "grad_window", "reward gradient window K");
    add_override("--epochs", "finetune_epochs", "fine-tune epochs");
    add_override("--lr", "lr", "denoiser training learning rate");
    add_override("--goal-reward-weight", "goal_reward_weight", "goal share of the reward");
    add_override("--prompt-variant", "prompt_variant", "caption phrasing variant");
    add_override("--bins", "bins", "histogram bin count");
    add_override("--difficulty", "difficulty", "task difficulty: easy | default | hard");
    add_override("--train-steps", "train_steps", "denoiser optimizer steps");
    app.add_option_function<std::vector<std::string>>(
        "--set",
        [&overrides](const std::vector<std::string>& kvs) {
            for (const std::string& kv : kvs) {
                const auto eq = kv.find('=');
                if (eq == std::string::npos)
                    throw CLI::ValidationError("--set expects key=value, got '" + kv + "'");
                overrides.emplace_back(kv.substr(0, eq), kv.substr(eq + 1));
            }
        },
        "any config key override as key=value (repeatable, applied last)");

    std::string out_dir, data_dir, ckpt_dir, align_dir, finetuned_dir;
    int task_index = 0;
    std::vector<std::string> report_inputs;

    CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic task set");
    gen->fallthrough();
    gen->add_option("--out", out_dir, "output task directory")->required();
    gen->add_option_function<std::string>(
        "--count", [&overrides](const std::string& v) { overrides.emplace_back("tasks_count", v); },
        "number of tasks");

    CLI::App* train = app.add_subcommand("train", "train the pairwise denoiser");
    train->fallthrough();
    train->add_option("--data", data_dir, "task directory from gen-data")->required();
    train->add_option("--out", out_dir, "checkpoint output directory")->required();

    CLI::App* align_train = app.add_subcommand("align-train", "contrastive-pretrain the scorer");
    align_train->fallthrough();
    align_train->add_option("--out", out_dir, "checkpoint output directory")->required();
    align_train->add_option_function<std::string>(
        "--pairs", [&overrides](const std::string& v) { overrides.emplace_back("align_pairs", v); },
        "alignment pairs to draw");

    CLI::App* ft = app.add_subcommand("finetune", "reward-gradient fine-tuning");
    ft->fallthrough();
    ft->add_option("--checkpoint", ckpt_dir, "denoiser checkpoint")->required();
    ft->add_option("--align", align_dir, "alignment checkpoint")->required();
    ft->add_option("--data", data_dir, "task directory")->required();
    ft->add_option("--out", out_dir, "checkpoint output directory")->required();

    CLI::App* sample = app.add_subcommand("sample", "generate one task's step images");
    sample->fallthrough();
    sample->add_option("--checkpoint", ckpt_dir, "denoiser checkpoint")->required();
    sample->add_option("--data", data_dir, "task directory")->required();
    sample->add_option("--task", task_index, "task index within the directory");
    sample->add_option("--out", out_dir, "image output directory")->required();

    CLI::App* eval_cmd = app.add_subcommand("evaluate", "score methods against ground truth");
    eval_cmd->fallthrough();
    eval_cmd->add_option("--checkpoint", ckpt_dir, "denoiser checkpoint")->required();
    eval_cmd->add_option("--align", align_dir, "alignment checkpoint")->required();
    eval_cmd->add_option("--data", data_dir, "task directory")->required();
    eval_cmd->add_option("--finetuned", finetuned_dir, "fine-tuned denoiser checkpoint");
    eval_cmd->add_option("--out", out_dir, "report output directory")->required();
    eval_cmd->add_option_function<std::string>(
        "--tasks", [&overrides](const std::string& v) { overrides.emplace_back("eval_tasks", v); },
        "eval task budget");

    CLI::App* report = app.add_subcommand("report", "merge evaluate outputs into one table");
    report->fallthrough();
    report->add_option("--out", out_dir, "merged report directory")->required();
    report->add_option("inputs", report_inputs, "evaluate output directories or report.csv files")
        ->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 3;
    }

    try {
        RunConfig rc;
        if (!config_path.empty()) {
            require_artifact(config_path, "config file");
            rc = load_config(config_path);
        }
        for (const auto& [key, value] : overrides) apply_override(rc, key, value);
        rc.validate();

        if (gen->parsed()) return cmd_gen_data(rc, out_dir);
        if (train->parsed()) return cmd_train(rc, data_dir, out_dir, verbose);
        if (align_train->parsed()) return cmd_align_train(rc, out_dir, verbose);
        if (ft->parsed()) return cmd_finetune(rc, ckpt_dir, align_dir, data_dir, out_dir, verbose);
        if (sample->parsed()) return cmd_sample(rc, ckpt_dir, data_dir, task_index, out_dir);
        if (eval_cmd->parsed())
            return cmd_evaluate(rc, ckpt_dir, align_dir, data_dir, finetuned_dir, out_dir);
        if (report->parsed()) return cmd_report(rc, report_inputs, out_dir);
        std::fprintf(stderr, "stepviz: no subcommand\n");
        return 3;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "stepviz: %s\n", e.what());
        return 3;
    } catch (const NumericalAbort& e) {
        std::fprintf(stderr, "stepviz: %s\n", e.what());
        return 4;
    } catch (const IoError& e) {
        std::fprintf(stderr, "stepviz: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "stepviz: %s\n", e.what());
        return 1;
    }
}
