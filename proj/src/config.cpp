#include "stepviz/config.hpp"

#include <charconv>
#include <cstdio>
#include <functional>
#include <map>
#include <sstream>

#include "stepviz/hashing.hpp"
#include "stepviz/io.hpp"

namespace stepviz {

namespace {

std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

double parse_double(const std::string& key, const std::string& value) {
    double out;
    const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
    if (ec != std::errc{} || ptr != value.data() + value.size())
        throw ConfigError("config: bad numeric value for " + key + ": '" + value + "'");
    return out;
}

long long parse_int(const std::string& key, const std::string& value) {
    long long out;
    const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
    if (ec != std::errc{} || ptr != value.data() + value.size())
        throw ConfigError("config: bad integer value for " + key + ": '" + value + "'");
    return out;
}

std::string format_double(double v) {
    char buf[32];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
}

struct Field {
    std::function<void(RunConfig&, const std::string&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

// Single source of truth for the key set: parser, serializer, and hash all
// walk this map, so adding a field in one place covers all three.
const std::map<std::string, Field>& field_table() {
    static const std::map<std::string, Field> table = [] {
        std::map<std::string, Field> t;
        auto add_int = [&t](const std::string& key, int RunConfig::* member) {
            t[key] = {[member](RunConfig& c, const std::string& k, const std::string& v) {
                          c.*member = static_cast<int>(parse_int(k, v));
                      },
                      [member](const RunConfig& c) { return std::to_string(c.*member); }};
        };
        auto add_double = [&t](const std::string& key, double RunConfig::* member) {
            t[key] = {[member](RunConfig& c, const std::string& k, const std::string& v) {
                          c.*member = parse_double(k, v);
                      },
                      [member](const RunConfig& c) { return format_double(c.*member); }};
        };
        auto add_string = [&t](const std::string& key, std::string RunConfig::* member) {
            t[key] = {[member](RunConfig& c, const std::string&, const std::string& v) {
                          c.*member = v;
                      },
                      [member](const RunConfig& c) { return c.*member; }};
        };
        add_string("config_version", &RunConfig::config_version);
        t["seed"] = {[](RunConfig& c, const std::string& k, const std::string& v) {
                         c.seed = static_cast<std::uint64_t>(parse_int(k, v));
                     },
                     [](const RunConfig& c) { return std::to_string(c.seed); }};
        add_int("timesteps", &RunConfig::timesteps);
        add_double("guidance_w", &RunConfig::guidance_w);
        add_double("p_uncond", &RunConfig::p_uncond);
        add_int("d_model", &RunConfig::d_model);
        add_int("n_blocks", &RunConfig::n_blocks);
        add_int("image_size", &RunConfig::image_size);
        add_double("cross_weight", &RunConfig::cross_weight);
        add_string("mask_mode", &RunConfig::mask_mode);
        add_string("assembly", &RunConfig::assembly);
        add_int("pair_stride_max", &RunConfig::pair_stride_max);
        add_double("single_slice_fraction", &RunConfig::single_slice_fraction);
        add_int("d_goal", &RunConfig::d_goal);
        add_int("d_step", &RunConfig::d_step);
        add_int("max_tokens", &RunConfig::max_tokens);
        add_int("k_max", &RunConfig::k_max);
        add_int("d_align", &RunConfig::d_align);
        add_int("grad_window", &RunConfig::grad_window);
        add_double("goal_reward_weight", &RunConfig::goal_reward_weight);
        add_int("align_steps", &RunConfig::align_steps);
        add_int("align_batch", &RunConfig::align_batch);
        add_double("align_lr", &RunConfig::align_lr);
        add_int("align_holdout", &RunConfig::align_holdout);
        add_int("align_pairs", &RunConfig::align_pairs);
        add_int("finetune_epochs", &RunConfig::finetune_epochs);
        add_int("finetune_steps_per_epoch", &RunConfig::finetune_steps_per_epoch);
        add_double("finetune_lr", &RunConfig::finetune_lr);
        add_int("train_steps", &RunConfig::train_steps);
        add_int("batch_size", &RunConfig::batch_size);
        add_double("lr", &RunConfig::lr);
        add_int("tasks_count", &RunConfig::tasks_count);
        add_int("eval_tasks", &RunConfig::eval_tasks);
        add_string("difficulty", &RunConfig::difficulty);
        add_int("prompt_variant", &RunConfig::prompt_variant);
        add_int("bins", &RunConfig::bins);
        return t;
    }();
    return table;
}

}  // namespace

void RunConfig::validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError("config: " + msg); };
    if (timesteps < 1) fail("timesteps must be >= 1");
    if (guidance_w < -1.0) fail("guidance_w must be >= -1");
    if (p_uncond < 0.0 || p_uncond >= 1.0) fail("p_uncond must be in [0,1)");
    if (d_model < 4 || d_model % 2 != 0) fail("d_model must be even and >= 4");
    if (n_blocks < 1) fail("n_blocks must be >= 1");
    if (image_size != 8) fail("image_size must be 8 at this scale");
    if (cross_weight <= 0.0 || cross_weight > 1.0) fail("cross_weight must be in (0,1]");
    if (mask_mode != "mul" && mask_mode != "addlog") fail("mask_mode must be mul or addlog");
    if (assembly != "chain" && assembly != "avg") fail("assembly must be chain or avg");
    if (pair_stride_max < 1) fail("pair_stride_max must be >= 1");
    if (single_slice_fraction < 0.0 || single_slice_fraction >= 1.0)
        fail("single_slice_fraction must be in [0,1)");
    if (d_goal < 2) fail("d_goal must be >= 2");
    if (k_max < 1) fail("k_max must be >= 1");
    if (d_step < k_max || d_step % k_max != 0) fail("d_step must be a positive multiple of k_max");
    if (max_tokens < 4) fail("max_tokens must be >= 4");
    if (d_align < 2) fail("d_align must be >= 2");
    if (grad_window < 0 || grad_window > timesteps) fail("grad_window must be in [0, timesteps]");
    if (goal_reward_weight < 0.0 || goal_reward_weight > 1.0)
        fail("goal_reward_weight must be in [0,1]");
    if (align_steps < 1 || align_batch < 2 || align_holdout < 8) fail("alignment knobs out of range");
    if (align_pairs <= align_holdout) fail("align_pairs must exceed align_holdout");
    if (align_lr <= 0.0 || finetune_lr <= 0.0 || lr <= 0.0) fail("learning rates must be positive");
    if (finetune_epochs < 0 || finetune_steps_per_epoch < 1) fail("finetune knobs out of range");
    if (train_steps < 1 || batch_size < 1) fail("training knobs out of range");
    if (tasks_count < 1 || eval_tasks < 1) fail("task counts must be >= 1");
    if (difficulty != "easy" && difficulty != "default" && difficulty != "hard")
        fail("difficulty must be easy, default, or hard");
    if (prompt_variant < 0) fail("prompt_variant must be >= 0");
    if (bins < 2) fail("bins must be >= 2");
}

void apply_override(RunConfig& cfg, const std::string& key, const std::string& value) {
    const auto& table = field_table();
    auto it = table.find(key);
    if (it == table.end()) throw ConfigError("config: unknown key '" + key + "'");
    it->second.set(cfg, key, value);
}

RunConfig parse_config_text(const std::string& text) {
    RunConfig cfg;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config: line " + std::to_string(line_no) + " is not key=value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError("config: empty key on line " + std::to_string(line_no));
        apply_override(cfg, key, value);
    }
    return cfg;
}

RunConfig load_config(const std::string& path) { return parse_config_text(read_text_file(path)); }

std::string config_to_text(const RunConfig& cfg) {
    std::string out;
    for (const auto& [key, field] : field_table()) {
        out += key;
        out += '=';
        out += field.get(cfg);
        out += '\n';
    }
    return out;
}

std::string config_hash(const RunConfig& cfg) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(fnv1a64(config_to_text(cfg))));
    return std::string(buf);
}

}  // namespace stepviz
