#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "stepviz/tensor.hpp"
#include "stepviz/textproc.hpp"

namespace stepviz {

// The world is a 4x4 grid of regions over an 8x8 RGB image; each region owns
// a 2x2 pixel block and holds at most one object.
inline constexpr int kGridSide = 4;
inline constexpr int kRegionCount = kGridSide * kGridSide;
inline constexpr int kImageSide = 8;
inline constexpr int kPaletteSize = 8;
inline constexpr double kBackground = 0.1;

enum class Shape { square, disc, bar };

struct ObjectRec {
    Shape shape;
    int color;  // palette index 0..7
    bool filled;

    bool operator==(const ObjectRec&) const = default;
};

struct WorldState {
    std::array<std::optional<ObjectRec>, kRegionCount> regions;

    bool operator==(const WorldState&) const = default;
    int object_count() const;
};

// Palette: the 8 corners of the RGB cube (maximally separated values).
const std::array<std::array<double, 3>, kPaletteSize>& palette();
const std::array<std::string, kPaletteSize>& color_names();
const std::array<std::string, 3>& shape_names();

// Canonical region phrase, e.g. region 6 -> "row 2 column 3".
std::string region_phrase(int region);

struct Difficulty {
    int min_steps = 3;
    int max_steps = 6;
    double multi_clause_prob = 0.3;

    static Difficulty named(const std::string& name);  // easy | default | hard
};

struct SynthTask {
    TaskSpec spec;
    std::vector<WorldState> states;  // |steps| + 1, states[0] is empty
    std::vector<Tensor> images;      // render(states[i]) for every i

    const Tensor& image_after_step(int step) const { return images[step + 1]; }
};

// Deterministic under seed; every task keeps at least one object unchanged
// across two consecutive steps (three consecutive states).
std::vector<SynthTask> generate_tasks(int count, std::uint64_t seed,
                                      const Difficulty& difficulty = {});

Tensor render(const WorldState& state);        // [8,8,3], values in [0,1]
WorldState decode_state(const Tensor& image);  // nearest-patch decode, total

std::string describe_state(const WorldState& state, int prompt_variant = 0);
std::string oracle_caption(const Tensor& image, int prompt_variant = 0);

// Regions whose content changed between two states.
std::vector<int> delta_regions(const WorldState& before, const WorldState& after);

// True when the generated image's delta regions decode to the step's target
// occupancy/shape/color (fill status is not pinned by every template and is
// ignored).
bool step_delta_matches(const SynthTask& task, int step, const Tensor& generated);

// Pairs (step index i, region) such that states[i+1] and states[i+2] hold the
// same (shape, color) object at that region — i.e. the object persists across
// generated images i and i+1.
struct PersistPair {
    int step;
    int region;
};
std::vector<PersistPair> persisting_objects(const SynthTask& task);

std::uint64_t state_key(const WorldState& state);

// Image/token reshapes between [8,8,3] and [64,3] (same row-major buffer).
Tensor image_to_tokens(const Tensor& image);
Tensor tokens_to_image(const Tensor& tokens);

// Contrastive pretraining pairs. Caption pairs fully describe a 1..3-object
// board; action pairs pair a single-object post-state with its step text.
// state_key makes in-batch deduplication possible.
struct AlignPair {
    Tensor image;
    std::string text;
    std::uint64_t key;
};
std::vector<AlignPair> make_alignment_pairs(int count, std::uint64_t seed,
                                            int prompt_variant = 0);

// Task manifests: `manifest.json` (goal, steps, states, image paths, meta)
// plus one `.tns` file per ground-truth image.
void write_tasks(const std::string& dir, const std::vector<SynthTask>& tasks,
                 const nlohmann::json& meta);
std::vector<SynthTask> read_tasks(const std::string& dir);
nlohmann::json read_tasks_meta(const std::string& dir);

}  // namespace stepviz
