#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "stepviz/hashing.hpp"
#include "stepviz/synth.hpp"
#include "stepviz/textproc.hpp"

using namespace stepviz;

namespace {

WorldState random_state(Rng& rng, int max_objects = kRegionCount) {
    WorldState s;
    const int n = rng.uniform_int(0, max_objects);
    for (int k = 0; k < n; ++k) {
        const int r = rng.uniform_int(0, kRegionCount - 1);
        s.regions[static_cast<std::size_t>(r)] =
            ObjectRec{static_cast<Shape>(rng.uniform_int(0, 2)),
                      rng.uniform_int(0, kPaletteSize - 1), rng.uniform() < 0.5};
    }
    return s;
}

std::uint64_t image_hash(const Tensor& image) {
    std::string bytes(reinterpret_cast<const char*>(image.data()),
                      image.numel() * sizeof(double));
    return fnv1a64(bytes);
}

double cosine(const Tensor& a, const Tensor& b) {
    double dot = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) dot += a.data()[i] * b.data()[i];
    return dot;
}

}  // namespace

TEST_CASE("empty state renders uniform background") {
    const Tensor img = render(WorldState{});
    CHECK(img.shape() == std::vector<int>({8, 8, 3}));
    for (std::size_t i = 0; i < img.numel(); ++i) CHECK(img.data()[i] == kBackground);
}

TEST_CASE("solid red square at region 0 sets exactly the top-left 2x2 block") {
    WorldState s;
    s.regions[0] = ObjectRec{Shape::square, 1, true};  // palette red
    const Tensor img = render(s);
    for (int y = 0; y < 8; ++y) {
        for (int x = 0; x < 8; ++x) {
            const std::size_t base = (static_cast<std::size_t>(y) * 8 + x) * 3;
            if (y < 2 && x < 2) {
                CHECK(img.data()[base + 0] == 1.0);
                CHECK(img.data()[base + 1] == 0.0);
                CHECK(img.data()[base + 2] == 0.0);
            } else {
                CHECK(img.data()[base + 0] == kBackground);
                CHECK(img.data()[base + 1] == kBackground);
                CHECK(img.data()[base + 2] == kBackground);
            }
        }
    }
}

TEST_CASE("hollow objects blend color with background") {
    WorldState s;
    s.regions[5] = ObjectRec{Shape::square, 1, false};  // hollow red at row 2 col 2
    const Tensor img = render(s);
    const std::size_t base = (2 * 8 + 2) * 3;  // top-left pixel of region 5
    CHECK(img.data()[base + 0] == doctest::Approx(0.55 * 1.0 + 0.45 * kBackground));
    CHECK(img.data()[base + 1] == doctest::Approx(0.55 * 0.0 + 0.45 * kBackground));
}

TEST_CASE("disc and bar cover their pixel masks only") {
    WorldState s;
    s.regions[0] = ObjectRec{Shape::disc, 7, true};  // white disc
    s.regions[3] = ObjectRec{Shape::bar, 3, true};   // blue bar at row 1 col 4
    const Tensor img = render(s);
    auto px = [&](int y, int x, int c) {
        return img.data()[(static_cast<std::size_t>(y) * 8 + x) * 3 +
                          static_cast<std::size_t>(c)];
    };
    // disc: diagonal pixels
    CHECK(px(0, 0, 0) == 1.0);
    CHECK(px(1, 1, 0) == 1.0);
    CHECK(px(0, 1, 0) == kBackground);
    CHECK(px(1, 0, 0) == kBackground);
    // bar: top row of the block
    CHECK(px(0, 6, 2) == 1.0);
    CHECK(px(0, 7, 2) == 1.0);
    CHECK(px(1, 6, 2) == kBackground);
    CHECK(px(1, 7, 2) == kBackground);
}

TEST_CASE("decode inverts render and render is injective over 10^4 states") {
    Rng rng(99);
    std::map<std::uint64_t, std::uint64_t> img_to_state;  // image hash -> state key
    std::set<std::uint64_t> state_keys;
    int distinct = 0;
    for (int i = 0; i < 10000; ++i) {
        const WorldState s = random_state(rng);
        const Tensor img = render(s);
        CHECK(decode_state(img) == s);
        const std::uint64_t sk = state_key(s);
        const std::uint64_t ih = image_hash(img);
        auto [it, inserted] = img_to_state.emplace(ih, sk);
        if (!inserted) {
            // same image twice: must come from the same state
            CHECK(it->second == sk);
        }
        if (state_keys.insert(sk).second) ++distinct;
    }
    CHECK(distinct == static_cast<int>(img_to_state.size()));
    CHECK(distinct > 9000);  // sampler actually explores the space
}

TEST_CASE("describe_state variants") {
    WorldState s;
    s.regions[1] = ObjectRec{Shape::square, 1, true};
    s.regions[12] = ObjectRec{Shape::disc, 3, false};
    CHECK(describe_state(s, 0) ==
          "a solid red square at row 1 column 2 and a hollow blue disc at row 4 column 1");
    CHECK(describe_state(s, 1) ==
          "the board shows a solid red square at row 1 column 2, a hollow blue disc at row 4 "
          "column 1");
    CHECK(describe_state(s, 2) ==
          "there is a solid red square at row 1 column 2 and a hollow blue disc at row 4 "
          "column 1 on the board");
    CHECK(describe_state(WorldState{}, 0) == "an empty board");
    CHECK(describe_state(WorldState{}, 1) == "the board shows nothing");
    CHECK(describe_state(WorldState{}, 2) == "there is nothing on the board");
    CHECK(describe_state(s, 3) == describe_state(s, 0));  // variants wrap
}

TEST_CASE("oracle_caption is the inverse contract and total") {
    Rng rng(4);
    for (int i = 0; i < 50; ++i) {
        const WorldState s = random_state(rng, 5);
        for (int v = 0; v < 3; ++v)
            CHECK(oracle_caption(render(s), v) == describe_state(s, v));
    }
    // all-noise image still captions
    Tensor noise = Tensor::randn({8, 8, 3}, rng);
    const std::string cap = oracle_caption(noise, 0);
    CHECK(!cap.empty());
    CHECK(parse(cap).leaves().size() > 0);
}

TEST_CASE("region_phrase follows the row/column convention") {
    CHECK(region_phrase(0) == "row 1 column 1");
    CHECK(region_phrase(6) == "row 2 column 3");
    CHECK(region_phrase(15) == "row 4 column 4");
    CHECK_THROWS_AS(region_phrase(16), IndexError);
}

TEST_CASE("generate_tasks is deterministic under seed") {
    const auto a = generate_tasks(20, 7);
    const auto b = generate_tasks(20, 7);
    const auto c = generate_tasks(20, 8);
    REQUIRE(a.size() == b.size());
    bool all_equal = true;
    bool any_diff_from_c = false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        all_equal = all_equal && a[i].spec.goal == b[i].spec.goal &&
                    a[i].spec.steps == b[i].spec.steps && a[i].states == b[i].states;
        any_diff_from_c = any_diff_from_c || a[i].spec.steps != c[i].spec.steps;
    }
    CHECK(all_equal);
    CHECK(any_diff_from_c);
}

TEST_CASE("task invariants over 1000 tasks") {
    const auto tasks = generate_tasks(1000, 11);
    const Difficulty d;
    for (const auto& t : tasks) {
        CHECK(t.states.size() == t.spec.steps.size() + 1);
        CHECK(t.images.size() == t.states.size());
        CHECK(t.states.front() == WorldState{});
        CHECK(static_cast<int>(t.spec.steps.size()) >= d.min_steps);
        CHECK(static_cast<int>(t.spec.steps.size()) <= d.max_steps);
        // at least one object persists across two consecutive steps
        CHECK(!persisting_objects(t).empty());
    }
}

TEST_CASE("ground-truth images equal the rendered states bit for bit") {
    const auto tasks = generate_tasks(25, 3);
    for (const auto& t : tasks)
        for (std::size_t i = 0; i < t.states.size(); ++i)
            CHECK(t.images[i].vec() == render(t.states[i]).vec());
}

TEST_CASE("every generated step text parses to at least one clause") {
    const auto tasks = generate_tasks(200, 13);
    for (const auto& t : tasks) {
        CHECK(segment(t.spec.goal).clauses.size() >= 1);
        for (const auto& step : t.spec.steps) {
            const ClauseSet cs = segment(step);
            CHECK(cs.clauses.size() >= 1);
            for (const auto& clause : cs.clause_tokens) CHECK(clause.size() <= 16);
        }
    }
}

TEST_CASE("distinct state deltas never share a template string") {
    const auto tasks = generate_tasks(1500, 17);
    auto delta_sig = [](const WorldState& before, const WorldState& after) {
        std::string sig;
        for (int r : delta_regions(before, after)) {
            sig += std::to_string(r) + ':';
            for (const auto* st : {&before, &after}) {
                const auto& obj = st->regions[static_cast<std::size_t>(r)];
                sig += obj ? std::to_string(static_cast<int>(obj->shape)) +
                                 std::to_string(obj->color) + (obj->filled ? "f" : "h")
                           : std::string("e");
                sig += '>';
            }
            sig += ';';
        }
        return sig;
    };
    std::map<std::string, std::string> text_to_delta;
    int collisions = 0;
    for (const auto& t : tasks) {
        for (std::size_t i = 0; i < t.spec.steps.size(); ++i) {
            const std::string sig = delta_sig(t.states[i], t.states[i + 1]);
            auto [it, inserted] = text_to_delta.emplace(t.spec.steps[i], sig);
            if (!inserted && it->second != sig) ++collisions;
        }
    }
    CHECK(collisions == 0);
    CHECK(text_to_delta.size() > 1000);  // the scan saw plenty of distinct strings
}

TEST_CASE("caption/step-text similarity beats a random other step for >= 99% of states") {
    // Population: single-object post-states with their generating step text
    // (the contrastive-pretraining action pairs). Remove steps are excluded
    // there by construction: their post-image no longer shows the object the
    // text names, so no caption can rank them.
    const auto pairs = make_alignment_pairs(5000, 19);
    const Lexicon& lex = Lexicon::builtin();
    std::vector<const AlignPair*> actions;
    for (const auto& p : pairs) {
        const auto toks = tokenize(normalize(p.text));
        if (!toks.empty() && lex.is_verb(toks[0])) actions.push_back(&p);
    }
    REQUIRE(actions.size() >= 1100);
    Rng rng(23);
    int wins = 0;
    const int trials = 1000;
    for (int k = 0; k < trials; ++k) {
        const AlignPair* own = actions[static_cast<std::size_t>(k)];
        const AlignPair* other = own;
        while (other == own)
            other = actions[static_cast<std::size_t>(
                rng.uniform_int(0, static_cast<int>(actions.size()) - 1))];
        const Tensor cap_feat = bag_features(oracle_caption(own->image), 256);
        const double sim_own = cosine(cap_feat, bag_features(own->text, 256));
        const double sim_other = cosine(cap_feat, bag_features(other->text, 256));
        if (sim_own > sim_other) ++wins;
        else MESSAGE("loss: own='" << own->text << "' other='" << other->text << "' "
                     << sim_own << " vs " << sim_other);
    }
    CHECK(wins >= 990);
}

TEST_CASE("delta_regions matches action footprints") {
    const auto tasks = generate_tasks(50, 29);
    for (const auto& t : tasks) {
        // first action is always a place on the empty board: one delta region
        CHECK(delta_regions(t.states[0], t.states[1]).size() == 1);
        for (std::size_t i = 0; i < t.spec.steps.size(); ++i) {
            const auto d = delta_regions(t.states[i], t.states[i + 1]);
            CHECK(d.size() >= 1);
            CHECK(d.size() <= 2);  // move touches two regions, everything else one
        }
    }
}

TEST_CASE("step_delta_matches accepts ground truth and rejects the pre-state image") {
    const auto tasks = generate_tasks(30, 31);
    for (const auto& t : tasks) {
        for (std::size_t i = 0; i < t.spec.steps.size(); ++i)
            CHECK(step_delta_matches(t, static_cast<int>(i), t.image_after_step(static_cast<int>(i))));
        // step 0 is a place onto the empty board, so the before-image cannot match
        CHECK(!step_delta_matches(t, 0, t.images[0]));
    }
    CHECK_THROWS_AS(step_delta_matches(tasks[0], -1, tasks[0].images[0]), IndexError);
}

TEST_CASE("step_delta_matches ignores fill status but not color or shape") {
    WorldState before, after;
    before.regions[2] = ObjectRec{Shape::square, 4, false};
    after.regions[2] = ObjectRec{Shape::square, 4, true};  // a fill step
    SynthTask t;
    t.spec.goal = "make a picture with 1 shape";
    t.spec.steps = {"fill the yellow square at row 1 column 3 until solid"};
    t.states = {before, after};
    t.images = {render(before), render(after)};
    // hollow render of the same object decodes to the right shape/color: accepted
    CHECK(step_delta_matches(t, 0, render(before)));
    WorldState wrong_color = after;
    wrong_color.regions[2]->color = 5;
    CHECK(!step_delta_matches(t, 0, render(wrong_color)));
    WorldState wrong_shape = after;
    wrong_shape.regions[2]->shape = Shape::disc;
    CHECK(!step_delta_matches(t, 0, render(wrong_shape)));
    WorldState missing = after;
    missing.regions[2] = std::nullopt;
    CHECK(!step_delta_matches(t, 0, render(missing)));
}

TEST_CASE("persisting_objects lists exactly the stable (shape,color) pairs") {
    SynthTask t;
    WorldState s0, s1, s2;
    s1.regions[4] = ObjectRec{Shape::bar, 2, false};
    s2.regions[4] = ObjectRec{Shape::bar, 2, true};   // fill keeps shape+color
    s2.regions[9] = ObjectRec{Shape::disc, 6, true};  // new object, no pair yet
    t.spec.steps = {"place a green bar at row 2 column 1",
                    "fill the green bar at row 2 column 1 until solid"};
    t.states = {s0, s1, s2};
    const auto pairs = persisting_objects(t);
    REQUIRE(pairs.size() == 1);
    CHECK(pairs[0].step == 0);
    CHECK(pairs[0].region == 4);
}

TEST_CASE("image/token reshape round trip") {
    Rng rng(37);
    const WorldState s = random_state(rng);
    const Tensor img = render(s);
    const Tensor tok = image_to_tokens(img);
    CHECK(tok.shape() == std::vector<int>({64, 3}));
    const Tensor back = tokens_to_image(tok);
    CHECK(back.shape() == std::vector<int>({8, 8, 3}));
    CHECK(back.vec() == img.vec());
    CHECK_THROWS_AS(image_to_tokens(Tensor::zeros({4, 4, 3})), DimError);
    CHECK_THROWS_AS(tokens_to_image(Tensor::zeros({60, 3})), DimError);
}

TEST_CASE("alignment pairs are deterministic and self-consistent") {
    const auto a = make_alignment_pairs(200, 41);
    const auto b = make_alignment_pairs(200, 41);
    REQUIRE(a.size() == 200);
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].text == b[i].text);
        CHECK(a[i].key == b[i].key);
        CHECK(a[i].image.vec() == b[i].image.vec());
        CHECK(a[i].image.shape() == std::vector<int>({8, 8, 3}));
        CHECK(!a[i].text.empty());
        CHECK(segment(a[i].text).clauses.size() >= 1);
        // even with noise augmentation the image decodes back to the keyed state
        CHECK(state_key(decode_state(a[i].image)) == a[i].key);
        for (std::size_t k = 0; k < a[i].image.numel(); ++k) {
            CHECK(a[i].image.data()[k] >= 0.0);
            CHECK(a[i].image.data()[k] <= 1.0);
        }
    }
    // both pair flavors appear
    int captions = 0;
    for (const auto& p : a)
        if (p.text.find("board") != std::string::npos || p.text.rfind("a ", 0) == 0) ++captions;
    CHECK(captions > 20);
    CHECK(captions < 180);
}

TEST_CASE("difficulty presets") {
    const Difficulty easy = Difficulty::named("easy");
    CHECK(easy.max_steps == 4);
    const Difficulty hard = Difficulty::named("hard");
    CHECK(hard.min_steps == 5);
    CHECK(hard.multi_clause_prob > Difficulty{}.multi_clause_prob);
    CHECK_THROWS_AS(Difficulty::named("nightmare"), ConfigError);
    const auto tasks = generate_tasks(30, 43, hard);
    for (const auto& t : tasks) {
        CHECK(static_cast<int>(t.spec.steps.size()) >= 5);
        CHECK(static_cast<int>(t.spec.steps.size()) <= 8);
    }
}

TEST_CASE("task manifest write/read round trip") {
    const std::string dir = std::string(STEPVIZ_SOURCE_DIR) + "/build/test_tmp/tasks_rt";
    std::filesystem::remove_all(dir);
    const auto tasks = generate_tasks(5, 47);
    nlohmann::json meta = {{"dataset", "synthetic"}, {"seed", 47}};
    write_tasks(dir, tasks, meta);
    const auto loaded = read_tasks(dir);
    REQUIRE(loaded.size() == tasks.size());
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        CHECK(loaded[i].spec.goal == tasks[i].spec.goal);
        CHECK(loaded[i].spec.steps == tasks[i].spec.steps);
        CHECK(loaded[i].states == tasks[i].states);
        REQUIRE(loaded[i].images.size() == tasks[i].images.size());
        for (std::size_t j = 0; j < tasks[i].images.size(); ++j)
            CHECK(loaded[i].images[j].vec() == tasks[i].images[j].vec());
    }
    CHECK(read_tasks_meta(dir).at("dataset") == "synthetic");
    CHECK_THROWS_AS(read_tasks(dir + "/missing"), IoError);
}
