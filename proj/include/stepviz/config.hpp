#pragma once

#include <cstdint>
#include <string>

#include "stepviz/errors.hpp"

namespace stepviz {

// One versioned document holding every module default. Parsed from a strict
// key=value file ('#' comments, blank lines allowed); unknown keys are
// rejected so a typo cannot silently fall back to a default.
struct RunConfig {
    std::string config_version = "1";
    std::uint64_t seed = 1;

    // diffusion-core
    int timesteps = 50;
    double guidance_w = 2.0;
    double p_uncond = 0.1;
    int d_model = 32;
    int n_blocks = 3;
    int image_size = 8;  // images are image_size x image_size x 3

    // pairwise-coherence
    double cross_weight = 0.5;
    std::string mask_mode = "mul";  // mul | addlog
    std::string assembly = "chain";  // chain | avg
    int pair_stride_max = 2;         // training pairs drawn with |i-j| <= this
    double single_slice_fraction = 0.25;

    // textproc
    int d_goal = 32;
    int d_step = 64;
    int max_tokens = 16;
    int k_max = 4;

    // alignment-reward
    int d_align = 16;
    int grad_window = 5;
    double goal_reward_weight = 0.0;
    int align_steps = 4000;
    int align_batch = 16;
    double align_lr = 1e-3;
    int align_holdout = 128;
    int align_pairs = 4000;  // caption/image pairs drawn before dedup
    int finetune_epochs = 3;
    int finetune_steps_per_epoch = 40;
    double finetune_lr = 1e-5;

    // training
    int train_steps = 4000;
    int batch_size = 8;
    double lr = 1e-3;

    // synth-data / eval-protocol
    int tasks_count = 2000;
    int eval_tasks = 200;
    std::string difficulty = "default";  // easy | default | hard
    int prompt_variant = 0;
    int bins = 25;

    void validate() const;  // throws ConfigError on any out-of-range value
};

// Parses `key=value` lines. Later assignments win. Throws ConfigError on
// unknown keys, malformed lines, or unparsable values.
RunConfig parse_config_text(const std::string& text);
RunConfig load_config(const std::string& path);

// Applies a single key=value override (same grammar as one file line).
void apply_override(RunConfig& cfg, const std::string& key, const std::string& value);

// Canonical serialization: every key in fixed order, `key=value` lines.
std::string config_to_text(const RunConfig& cfg);

// FNV-1a 64-bit over the canonical serialization, rendered as 16 hex chars.
std::string config_hash(const RunConfig& cfg);

}  // namespace stepviz
