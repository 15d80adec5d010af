#include "stepviz/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>

#include "stepviz/hashing.hpp"
#include "stepviz/io.hpp"

namespace stepviz {

namespace fs = std::filesystem;

int WorldState::object_count() const {
    int n = 0;
    for (const auto& r : regions) n += r.has_value() ? 1 : 0;
    return n;
}

const std::array<std::array<double, 3>, kPaletteSize>& palette() {
    static const std::array<std::array<double, 3>, kPaletteSize> p = {{
        {0, 0, 0},  // black
        {1, 0, 0},  // red
        {0, 1, 0},  // green
        {0, 0, 1},  // blue
        {1, 1, 0},  // yellow
        {1, 0, 1},  // magenta
        {0, 1, 1},  // cyan
        {1, 1, 1},  // white
    }};
    return p;
}

const std::array<std::string, kPaletteSize>& color_names() {
    static const std::array<std::string, kPaletteSize> n = {
        "black", "red", "green", "blue", "yellow", "magenta", "cyan", "white"};
    return n;
}

const std::array<std::string, 3>& shape_names() {
    static const std::array<std::string, 3> n = {"square", "disc", "bar"};
    return n;
}

std::string region_phrase(int region) {
    if (region < 0 || region >= kRegionCount) throw IndexError("region_phrase: out of range");
    const int row = region / kGridSide;
    const int col = region % kGridSide;
    return "row " + std::to_string(row + 1) + " column " + std::to_string(col + 1);
}

Difficulty Difficulty::named(const std::string& name) {
    if (name == "easy") return Difficulty{3, 4, 0.15};
    if (name == "default") return Difficulty{3, 6, 0.3};
    if (name == "hard") return Difficulty{5, 8, 0.5};
    throw ConfigError("difficulty must be easy, default, or hard");
}

// ------------------------- rendering & decoding -------------------------

namespace {

// Pixel offsets inside a 2x2 region block, per shape.
const std::vector<std::pair<int, int>>& shape_pixels(Shape s) {
    static const std::vector<std::pair<int, int>> square = {{0, 0}, {0, 1}, {1, 0}, {1, 1}};
    static const std::vector<std::pair<int, int>> disc = {{0, 0}, {1, 1}};
    static const std::vector<std::pair<int, int>> bar = {{0, 0}, {0, 1}};
    switch (s) {
        case Shape::square: return square;
        case Shape::disc: return disc;
        case Shape::bar: return bar;
    }
    throw ContractError("shape_pixels: bad shape");
}

// The 12 values (2x2 pixels x RGB) a region renders to.
std::array<double, 12> region_patch(const std::optional<ObjectRec>& obj) {
    std::array<double, 12> patch;
    patch.fill(kBackground);
    if (obj) {
        const auto& rgb = palette()[static_cast<std::size_t>(obj->color)];
        for (const auto& [dy, dx] : shape_pixels(obj->shape)) {
            for (int c = 0; c < 3; ++c) {
                const double v = obj->filled ? rgb[static_cast<std::size_t>(c)]
                                             : 0.55 * rgb[static_cast<std::size_t>(c)] +
                                                   0.45 * kBackground;
                patch[static_cast<std::size_t>((dy * 2 + dx) * 3 + c)] = v;
            }
        }
    }
    return patch;
}

// All 49 decodable region contents: empty plus shape x color x fill.
const std::vector<std::optional<ObjectRec>>& decode_candidates() {
    static const std::vector<std::optional<ObjectRec>> cands = [] {
        std::vector<std::optional<ObjectRec>> c;
        c.push_back(std::nullopt);
        for (int s = 0; s < 3; ++s)
            for (int col = 0; col < kPaletteSize; ++col)
                for (int f = 0; f < 2; ++f)
                    c.push_back(ObjectRec{static_cast<Shape>(s), col, f == 1});
        return c;
    }();
    return cands;
}

const std::vector<std::array<double, 12>>& candidate_patches() {
    static const std::vector<std::array<double, 12>> patches = [] {
        std::vector<std::array<double, 12>> p;
        for (const auto& cand : decode_candidates()) p.push_back(region_patch(cand));
        return p;
    }();
    return patches;
}

std::size_t pixel_index(int y, int x, int c) {
    return (static_cast<std::size_t>(y) * kImageSide + static_cast<std::size_t>(x)) * 3 +
           static_cast<std::size_t>(c);
}

std::array<double, 12> extract_patch(const Tensor& image, int region) {
    const int row = region / kGridSide;
    const int col = region % kGridSide;
    std::array<double, 12> patch;
    for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx)
            for (int c = 0; c < 3; ++c)
                patch[static_cast<std::size_t>((dy * 2 + dx) * 3 + c)] =
                    image.data()[pixel_index(row * 2 + dy, col * 2 + dx, c)];
    return patch;
}

}  // namespace

Tensor render(const WorldState& state) {
    Tensor image = Tensor::full({kImageSide, kImageSide, 3}, kBackground);
    for (int r = 0; r < kRegionCount; ++r) {
        if (!state.regions[static_cast<std::size_t>(r)]) continue;
        const auto patch = region_patch(state.regions[static_cast<std::size_t>(r)]);
        const int row = r / kGridSide;
        const int col = r % kGridSide;
        for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx)
                for (int c = 0; c < 3; ++c)
                    image.data()[pixel_index(row * 2 + dy, col * 2 + dx, c)] =
                        patch[static_cast<std::size_t>((dy * 2 + dx) * 3 + c)];
    }
    return image;
}

WorldState decode_state(const Tensor& image) {
    if (image.numel() != kImageSide * kImageSide * 3)
        throw DimError("decode_state: expected an 8x8x3 image");
    WorldState state;
    const auto& cands = decode_candidates();
    const auto& patches = candidate_patches();
    for (int r = 0; r < kRegionCount; ++r) {
        const auto patch = extract_patch(image, r);
        double best = 1e300;
        std::size_t best_i = 0;
        for (std::size_t i = 0; i < patches.size(); ++i) {
            double d = 0.0;
            for (int k = 0; k < 12; ++k) {
                const double diff = patch[static_cast<std::size_t>(k)] -
                                    patches[i][static_cast<std::size_t>(k)];
                d += diff * diff;
            }
            if (d < best) {
                best = d;
                best_i = i;
            }
        }
        state.regions[static_cast<std::size_t>(r)] = cands[best_i];
    }
    return state;
}

// ------------------------- captions -------------------------

std::string describe_state(const WorldState& state, int prompt_variant) {
    const int variant = ((prompt_variant % 3) + 3) % 3;
    std::vector<std::string> items;
    for (int r = 0; r < kRegionCount; ++r) {
        const auto& obj = state.regions[static_cast<std::size_t>(r)];
        if (!obj) continue;
        items.push_back(std::string("a ") + (obj->filled ? "solid" : "hollow") + ' ' +
                        color_names()[static_cast<std::size_t>(obj->color)] + ' ' +
                        shape_names()[static_cast<std::size_t>(obj->shape)] + " at " +
                        region_phrase(r));
    }
    auto join = [](const std::vector<std::string>& parts, const std::string& sep) {
        std::string out;
        for (std::size_t i = 0; i < parts.size(); ++i) {
            if (i) out += sep;
            out += parts[i];
        }
        return out;
    };
    if (variant == 0) return items.empty() ? "an empty board" : join(items, " and ");
    if (variant == 1)
        return items.empty() ? "the board shows nothing"
                             : "the board shows " + join(items, ", ");
    return items.empty() ? "there is nothing on the board"
                         : "there is " + join(items, " and ") + " on the board";
}

std::string oracle_caption(const Tensor& image, int prompt_variant) {
    return describe_state(decode_state(image), prompt_variant);
}

// ------------------------- deltas / persistence -------------------------

std::vector<int> delta_regions(const WorldState& before, const WorldState& after) {
    std::vector<int> out;
    for (int r = 0; r < kRegionCount; ++r)
        if (before.regions[static_cast<std::size_t>(r)] !=
            after.regions[static_cast<std::size_t>(r)])
            out.push_back(r);
    return out;
}

bool step_delta_matches(const SynthTask& task, int step, const Tensor& generated) {
    if (step < 0 || step >= static_cast<int>(task.spec.steps.size()))
        throw IndexError("step_delta_matches: step out of range");
    const WorldState decoded = decode_state(generated);
    const WorldState& before = task.states[static_cast<std::size_t>(step)];
    const WorldState& after = task.states[static_cast<std::size_t>(step) + 1];
    for (int r : delta_regions(before, after)) {
        const auto& target = after.regions[static_cast<std::size_t>(r)];
        const auto& got = decoded.regions[static_cast<std::size_t>(r)];
        if (!target) {
            if (got) return false;
            continue;
        }
        if (!got || got->shape != target->shape || got->color != target->color) return false;
    }
    return true;
}

std::vector<PersistPair> persisting_objects(const SynthTask& task) {
    std::vector<PersistPair> out;
    const int n = static_cast<int>(task.spec.steps.size());
    for (int i = 0; i + 1 < n; ++i) {
        const WorldState& a = task.states[static_cast<std::size_t>(i) + 1];
        const WorldState& b = task.states[static_cast<std::size_t>(i) + 2];
        for (int r = 0; r < kRegionCount; ++r) {
            const auto& oa = a.regions[static_cast<std::size_t>(r)];
            const auto& ob = b.regions[static_cast<std::size_t>(r)];
            if (oa && ob && oa->shape == ob->shape && oa->color == ob->color)
                out.push_back({i, r});
        }
    }
    return out;
}

std::uint64_t state_key(const WorldState& state) {
    std::string bytes;
    bytes.reserve(kRegionCount * 4);
    for (const auto& obj : state.regions) {
        if (!obj) {
            bytes += 'e';
            continue;
        }
        bytes += 'o';
        bytes += static_cast<char>('0' + static_cast<int>(obj->shape));
        bytes += static_cast<char>('0' + obj->color);
        bytes += obj->filled ? 'f' : 'h';
    }
    return fnv1a64(bytes);
}

Tensor image_to_tokens(const Tensor& image) {
    if (image.numel() != kImageSide * kImageSide * 3)
        throw DimError("image_to_tokens: expected an 8x8x3 image");
    return Tensor::from_data({kImageSide * kImageSide, 3}, image.vec());
}

Tensor tokens_to_image(const Tensor& tokens) {
    if (tokens.numel() != kImageSide * kImageSide * 3)
        throw DimError("tokens_to_image: expected 64x3 tokens");
    return Tensor::from_data({kImageSide, kImageSide, 3}, tokens.vec());
}

// ------------------------- task generation -------------------------

namespace {

enum class Action { place, recolor, fill, move, remove };

struct StepDraft {
    Action action;
    int region = -1;
    int dest = -1;       // move only
    int old_color = -1;  // recolor only
    ObjectRec result{};  // object after the step (unused for remove)
    bool removed = false;
};

std::vector<int> occupied_regions(const WorldState& s) {
    std::vector<int> out;
    for (int r = 0; r < kRegionCount; ++r)
        if (s.regions[static_cast<std::size_t>(r)]) out.push_back(r);
    return out;
}

std::vector<int> empty_regions(const WorldState& s) {
    std::vector<int> out;
    for (int r = 0; r < kRegionCount; ++r)
        if (!s.regions[static_cast<std::size_t>(r)]) out.push_back(r);
    return out;
}

std::vector<int> hollow_regions(const WorldState& s) {
    std::vector<int> out;
    for (int r = 0; r < kRegionCount; ++r) {
        const auto& obj = s.regions[static_cast<std::size_t>(r)];
        if (obj && !obj->filled) out.push_back(r);
    }
    return out;
}

int pick(const std::vector<int>& options, Rng& rng) {
    return options[static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<int>(options.size()) - 1))];
}

// Draws one applicable action and mutates the state. First step on an empty
// board is always a place.
StepDraft draw_step(WorldState& state, Rng& rng) {
    struct Option {
        Action action;
        double weight;
    };
    std::vector<Option> options;
    const auto occupied = occupied_regions(state);
    const auto empties = empty_regions(state);
    const auto hollows = hollow_regions(state);
    if (!empties.empty()) options.push_back({Action::place, 0.35});
    if (!occupied.empty()) options.push_back({Action::recolor, 0.20});
    if (!hollows.empty()) options.push_back({Action::fill, 0.20});
    if (!occupied.empty() && !empties.empty()) options.push_back({Action::move, 0.15});
    if (!occupied.empty()) options.push_back({Action::remove, 0.10});

    double total = 0.0;
    for (const Option& o : options) total += o.weight;
    double roll = rng.uniform() * total;
    Action action = options.back().action;
    for (const Option& o : options) {
        if (roll < o.weight) {
            action = o.action;
            break;
        }
        roll -= o.weight;
    }

    StepDraft d;
    d.action = action;
    switch (action) {
        case Action::place: {
            d.region = pick(empties, rng);
            d.result = ObjectRec{static_cast<Shape>(rng.uniform_int(0, 2)),
                                 rng.uniform_int(0, kPaletteSize - 1),
                                 rng.uniform() < 0.3};
            state.regions[static_cast<std::size_t>(d.region)] = d.result;
            break;
        }
        case Action::recolor: {
            d.region = pick(occupied, rng);
            ObjectRec obj = *state.regions[static_cast<std::size_t>(d.region)];
            d.old_color = obj.color;
            int next = rng.uniform_int(0, kPaletteSize - 2);
            if (next >= obj.color) ++next;
            obj.color = next;
            d.result = obj;
            state.regions[static_cast<std::size_t>(d.region)] = obj;
            break;
        }
        case Action::fill: {
            d.region = pick(hollows, rng);
            ObjectRec obj = *state.regions[static_cast<std::size_t>(d.region)];
            obj.filled = true;
            d.result = obj;
            state.regions[static_cast<std::size_t>(d.region)] = obj;
            break;
        }
        case Action::move: {
            d.region = pick(occupied, rng);
            d.dest = pick(empties, rng);
            d.result = *state.regions[static_cast<std::size_t>(d.region)];
            state.regions[static_cast<std::size_t>(d.dest)] = d.result;
            state.regions[static_cast<std::size_t>(d.region)] = std::nullopt;
            break;
        }
        case Action::remove: {
            d.region = pick(occupied, rng);
            d.result = *state.regions[static_cast<std::size_t>(d.region)];
            d.removed = true;
            state.regions[static_cast<std::size_t>(d.region)] = std::nullopt;
            break;
        }
    }
    return d;
}

std::string corner_phrase(int region) {
    switch (region) {
        case 0: return "the top left corner";
        case 3: return "the top right corner";
        case 12: return "the bottom left corner";
        case 15: return "the bottom right corner";
        default: return "";
    }
}

// Every template names the action, shape, color(s), fill status, and
// region(s), so no two distinct state deltas can produce the same string.
std::string step_text(const StepDraft& d, Rng& rng, double multi_clause_prob) {
    const std::string c = color_names()[static_cast<std::size_t>(d.result.color)];
    const std::string s = shape_names()[static_cast<std::size_t>(d.result.shape)];
    const std::string r = region_phrase(d.region);
    // recolor/move/remove leave fill untouched, so the adjective pins it
    const std::string fs = d.result.filled ? "solid" : "hollow";
    const bool multi = rng.uniform() < multi_clause_prob;
    const int v = rng.uniform_int(0, 2);

    switch (d.action) {
        case Action::place: {
            if (d.result.filled) {
                if (multi)
                    return v % 2 == 0 ? "place a " + c + ' ' + s + " at " + r +
                                            " and then fill it until solid"
                                      : "draw a " + c + ' ' + s + " at " + r +
                                            " and make it solid";
                return "put a solid " + c + ' ' + s + " at " + r;
            }
            if (multi) return "take a " + c + ' ' + s + " and place it at " + r;
            const std::string corner = corner_phrase(d.region);
            if (!corner.empty() && v == 2)
                return "place a " + c + ' ' + s + " in " + corner + " at " + r;
            return v == 0 ? "place a " + c + ' ' + s + " at " + r
                          : "put a " + c + ' ' + s + " on " + r;
        }
        case Action::recolor: {
            const std::string obj = fs + ' ' +
                                    color_names()[static_cast<std::size_t>(d.old_color)] + ' ' +
                                    s;
            if (multi)
                return "take the " + obj + " at " + r + " and repaint it in " + c;
            if (v == 0) return "recolor the " + obj + " at " + r + " to " + c;
            if (v == 1) return "turn the " + obj + " at " + r + ' ' + c;
            return "repaint the " + obj + " at " + r + " in " + c;
        }
        case Action::fill: {
            if (multi) return "take the " + c + ' ' + s + " at " + r + " and fill it until solid";
            return v == 0 ? "fill the " + c + ' ' + s + " at " + r + " until solid"
                          : "fill in the " + c + ' ' + s + " at " + r;
        }
        case Action::move: {
            const std::string dst = region_phrase(d.dest);
            if (multi)
                return "take the " + fs + ' ' + c + ' ' + s + " at " + r + " and move it to " +
                       dst;
            return v == 0 ? "move the " + fs + ' ' + c + ' ' + s + " from " + r + " to " + dst
                          : "slide the " + fs + ' ' + c + ' ' + s + " from " + r + " to " + dst;
        }
        case Action::remove: {
            if (multi) return "take the " + fs + ' ' + c + ' ' + s + " at " + r + " and remove it";
            return v == 0 ? "remove the " + fs + ' ' + c + ' ' + s + " from " + r
                          : "clear the " + fs + ' ' + c + ' ' + s + " from " + r;
        }
    }
    throw ContractError("step_text: bad action");
}

std::string goal_text(int final_count, Rng& rng) {
    const std::string k = std::to_string(final_count);
    const std::string noun = final_count == 1 ? "shape" : "shapes";
    switch (rng.uniform_int(0, 2)) {
        case 0: return "build a pattern of " + k + ' ' + noun + " on the board";
        case 1: return "make a picture with " + k + ' ' + noun;
        default: return "arrange " + k + ' ' + noun + " into a small scene";
    }
}

bool has_persistence(const std::vector<WorldState>& states) {
    // An object unchanged in (shape, color) across three consecutive states.
    for (std::size_t i = 0; i + 2 < states.size(); ++i) {
        for (int r = 0; r < kRegionCount; ++r) {
            const auto& a = states[i].regions[static_cast<std::size_t>(r)];
            const auto& b = states[i + 1].regions[static_cast<std::size_t>(r)];
            const auto& c = states[i + 2].regions[static_cast<std::size_t>(r)];
            if (a && b && c && a->shape == b->shape && b->shape == c->shape &&
                a->color == b->color && b->color == c->color)
                return true;
        }
    }
    return false;
}

SynthTask generate_one(Rng task_rng, const Difficulty& diff) {
    for (int attempt = 0; attempt < 1000; ++attempt) {
        Rng rng = task_rng.fork(static_cast<std::uint64_t>(attempt));
        const int n_steps = rng.uniform_int(diff.min_steps, diff.max_steps);
        SynthTask task;
        task.states.emplace_back();  // empty board
        WorldState state;
        std::vector<StepDraft> drafts;
        for (int k = 0; k < n_steps; ++k) {
            drafts.push_back(draw_step(state, rng));
            task.states.push_back(state);
        }
        if (!has_persistence(task.states)) continue;
        for (const StepDraft& d : drafts)
            task.spec.steps.push_back(step_text(d, rng, diff.multi_clause_prob));
        task.spec.goal = goal_text(task.states.back().object_count(), rng);
        for (const WorldState& s : task.states) task.images.push_back(render(s));
        return task;
    }
    throw ContractError("generate_one: persistence constraint unsatisfiable");
}

}  // namespace

std::vector<SynthTask> generate_tasks(int count, std::uint64_t seed,
                                      const Difficulty& difficulty) {
    if (count < 1) throw ContractError("generate_tasks: count must be >= 1");
    if (difficulty.min_steps < 2 || difficulty.max_steps < difficulty.min_steps)
        throw ContractError("generate_tasks: bad step range");
    Rng base(seed);
    std::vector<SynthTask> tasks;
    tasks.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i)
        tasks.push_back(generate_one(base.fork(static_cast<std::uint64_t>(i)), difficulty));
    return tasks;
}

// ------------------------- alignment pairs -------------------------

std::vector<AlignPair> make_alignment_pairs(int count, std::uint64_t seed, int prompt_variant) {
    if (count < 1) throw ContractError("make_alignment_pairs: count must be >= 1");
    Rng base(seed);
    std::vector<AlignPair> pairs;
    pairs.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        Rng rng = base.fork(static_cast<std::uint64_t>(i));
        AlignPair pair;
        WorldState state;
        if (rng.uniform() < 0.5) {
            // Caption pair: 1..3 objects, the caption describes all of them.
            const int n_obj = rng.uniform_int(1, 3);
            std::vector<int> regions(kRegionCount);
            for (int r = 0; r < kRegionCount; ++r) regions[static_cast<std::size_t>(r)] = r;
            for (int k = 0; k < n_obj; ++k) {
                const int j = rng.uniform_int(k, kRegionCount - 1);
                std::swap(regions[static_cast<std::size_t>(k)],
                          regions[static_cast<std::size_t>(j)]);
                state.regions[static_cast<std::size_t>(regions[static_cast<std::size_t>(k)])] =
                    ObjectRec{static_cast<Shape>(rng.uniform_int(0, 2)),
                              rng.uniform_int(0, kPaletteSize - 1), rng.uniform() < 0.5};
            }
            pair.text = describe_state(state, prompt_variant + rng.uniform_int(0, 2));
        } else {
            // Action pair: a single-object post-state with its step text
            // (remove is excluded — its post-image is the empty board for
            // every removed object, which breaks retrieval).
            WorldState pre;
            StepDraft d;
            const int which = rng.uniform_int(0, 3);
            const int region = rng.uniform_int(0, kRegionCount - 1);
            const ObjectRec obj{static_cast<Shape>(rng.uniform_int(0, 2)),
                                rng.uniform_int(0, kPaletteSize - 1), false};
            if (which == 0) {  // place (hollow or solid)
                d.action = Action::place;
                d.region = region;
                d.result = obj;
                d.result.filled = rng.uniform() < 0.5;
            } else if (which == 1) {  // fill
                d.action = Action::fill;
                d.region = region;
                d.result = obj;
                d.result.filled = true;
            } else if (which == 2) {  // recolor
                d.action = Action::recolor;
                d.region = region;
                d.old_color = obj.color;
                d.result = obj;
                int next = rng.uniform_int(0, kPaletteSize - 2);
                if (next >= obj.color) ++next;
                d.result.color = next;
                d.result.filled = rng.uniform() < 0.5;
            } else {  // move
                d.action = Action::move;
                d.region = region;
                int dest = rng.uniform_int(0, kRegionCount - 2);
                if (dest >= region) ++dest;
                d.dest = dest;
                d.result = obj;
                d.result.filled = rng.uniform() < 0.5;
            }
            state.regions[static_cast<std::size_t>(d.action == Action::move ? d.dest
                                                                            : d.region)] =
                d.result;
            pair.text = step_text(d, rng, 0.3);
        }
        pair.key = state_key(state);
        Tensor image = render(state);
        if (rng.uniform() < 0.5) {
            // Mild noise augmentation so the towers tolerate generated images.
            // Kept below the nearest-patch decision margin (hollow black vs
            // empty is ~0.055 per channel) so decodes stay intact.
            const double sigma = rng.uniform(0.005, 0.02);
            for (std::size_t k = 0; k < image.numel(); ++k) {
                const double v = image.data()[k] + sigma * rng.normal();
                image.data()[k] = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
            }
        }
        pair.image = image;
        pairs.push_back(std::move(pair));
    }
    return pairs;
}

// ------------------------- manifests -------------------------

namespace {

nlohmann::json state_to_json(const WorldState& s) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& obj : s.regions) {
        if (!obj) {
            arr.push_back(nullptr);
        } else {
            arr.push_back({{"shape", static_cast<int>(obj->shape)},
                           {"color", obj->color},
                           {"filled", obj->filled}});
        }
    }
    return arr;
}

WorldState state_from_json(const nlohmann::json& arr) {
    if (!arr.is_array() || arr.size() != kRegionCount)
        throw IoError("task manifest: bad state array");
    WorldState s;
    for (int r = 0; r < kRegionCount; ++r) {
        const auto& e = arr[static_cast<std::size_t>(r)];
        if (e.is_null()) continue;
        const int shape = e.at("shape").get<int>();
        const int color = e.at("color").get<int>();
        if (shape < 0 || shape > 2 || color < 0 || color >= kPaletteSize)
            throw IoError("task manifest: bad object record");
        s.regions[static_cast<std::size_t>(r)] =
            ObjectRec{static_cast<Shape>(shape), color, e.at("filled").get<bool>()};
    }
    return s;
}

}  // namespace

void write_tasks(const std::string& dir, const std::vector<SynthTask>& tasks,
                 const nlohmann::json& meta) {
    fs::create_directories(dir);
    nlohmann::json manifest;
    manifest["meta"] = meta;
    nlohmann::json jtasks = nlohmann::json::array();
    char name[64];
    for (std::size_t ti = 0; ti < tasks.size(); ++ti) {
        const SynthTask& task = tasks[ti];
        nlohmann::json jt;
        jt["goal"] = task.spec.goal;
        jt["steps"] = task.spec.steps;
        nlohmann::json jstates = nlohmann::json::array();
        for (const WorldState& s : task.states) jstates.push_back(state_to_json(s));
        jt["states"] = std::move(jstates);
        nlohmann::json jimages = nlohmann::json::array();
        for (std::size_t ii = 0; ii < task.images.size(); ++ii) {
            std::snprintf(name, sizeof(name), "task%04zu_img%02zu.tns", ti, ii);
            write_tensor((fs::path(dir) / name).string(), task.images[ii]);
            jimages.push_back(name);
        }
        jt["images"] = std::move(jimages);
        jtasks.push_back(std::move(jt));
    }
    manifest["tasks"] = std::move(jtasks);
    write_text_file((fs::path(dir) / "manifest.json").string(), manifest.dump() + "\n");
}

std::vector<SynthTask> read_tasks(const std::string& dir) {
    const std::string manifest_path = (fs::path(dir) / "manifest.json").string();
    if (!fs::exists(manifest_path)) throw IoError("missing task manifest: " + manifest_path);
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(read_text_file(manifest_path));
    } catch (const nlohmann::json::exception&) {
        throw IoError("malformed task manifest: " + manifest_path);
    }
    std::vector<SynthTask> tasks;
    for (const auto& jt : manifest.value("tasks", nlohmann::json::array())) {
        SynthTask task;
        task.spec.goal = jt.at("goal").get<std::string>();
        task.spec.steps = jt.at("steps").get<std::vector<std::string>>();
        for (const auto& js : jt.at("states")) task.states.push_back(state_from_json(js));
        if (task.states.size() != task.spec.steps.size() + 1)
            throw IoError("task manifest: |states| != |steps| + 1");
        for (const auto& jname : jt.at("images"))
            task.images.push_back(
                read_tensor((fs::path(dir) / jname.get<std::string>()).string()));
        if (task.images.size() != task.states.size())
            throw IoError("task manifest: |images| != |states|");
        tasks.push_back(std::move(task));
    }
    return tasks;
}

nlohmann::json read_tasks_meta(const std::string& dir) {
    const std::string manifest_path = (fs::path(dir) / "manifest.json").string();
    nlohmann::json manifest = nlohmann::json::parse(read_text_file(manifest_path));
    return manifest.value("meta", nlohmann::json::object());
}

}  // namespace stepviz
