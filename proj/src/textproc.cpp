#include "stepviz/textproc.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <sstream>

#include "json.hpp"
#include "stepviz/hashing.hpp"
#include "stepviz/io.hpp"

namespace stepviz {

void TaskSpec::check() const {
    if (normalize(goal).empty()) throw ContractError("TaskSpec: empty goal");
    if (steps.size() < 2) throw ContractError("TaskSpec: need at least 2 steps");
    for (const std::string& s : steps)
        if (normalize(s).empty()) throw ContractError("TaskSpec: empty step");
}

// ------------------------- lexicon -------------------------

const Lexicon& Lexicon::builtin() {
    static const Lexicon lex = [] {
        Lexicon l;
        l.version = "1";
        l.verbs = {"place",    "put",     "set",    "drop",    "fill",   "solidify", "move",
                   "slide",    "shift",   "remove", "clear",   "erase",  "delete",   "recolor",
                   "repaint",  "paint",   "turn",   "take",    "make",   "draw",     "swap",
                   "stir",     "sift",    "beat",   "chill",   "bake",   "mix",      "add",
                   "whisk",    "fold",    "pour",   "preheat", "combine", "cream",   "knead",
                   "roll",     "cut",     "spread", "sprinkle", "melt",  "heat",     "cook",
                   "serve",    "garnish", "drain",  "simmer",  "boil",   "grill",    "season",
                   "arrange",  "build",   "assemble"};
        l.determiners = {"the",  "a",    "an",   "its",   "their",
                         "this", "that", "each", "every", "some"};
        l.prepositions = {"in",  "into", "on", "onto", "at",   "to",     "from",  "for",
                          "with", "of",  "over", "by",  "near", "toward", "within"};
        l.conjunctions = {"and", "then", "until"};
        return l;
    }();
    return lex;
}

Lexicon Lexicon::from_json_text(const std::string& json_text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(json_text);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("lexicon: malformed JSON: ") + e.what());
    }
    Lexicon l;
    l.version = j.value("version", "unversioned");
    auto fill = [&j](const char* key, std::set<std::string>& out) {
        for (const auto& w : j.value(key, std::vector<std::string>{})) out.insert(w);
    };
    fill("verbs", l.verbs);
    fill("determiners", l.determiners);
    fill("prepositions", l.prepositions);
    fill("conjunctions", l.conjunctions);
    if (l.verbs.empty()) throw IoError("lexicon: no verbs");
    return l;
}

Lexicon Lexicon::from_json_file(const std::string& path) {
    return from_json_text(read_text_file(path));
}

// ------------------------- normalization -------------------------

std::string normalize(const std::string& text) {
    std::string out;
    out.reserve(text.size());
    bool pending_space = false;
    for (char raw : text) {
        const unsigned char u = static_cast<unsigned char>(raw);
        if (std::isspace(u)) {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) {
            out.push_back(' ');
            pending_space = false;
        }
        out.push_back(static_cast<char>(std::tolower(u)));
    }
    static const std::string terminal = ".,!?;:";
    while (!out.empty() &&
           (terminal.find(out.back()) != std::string::npos || out.back() == ' '))
        out.pop_back();
    return out;
}

std::vector<std::string> tokenize(const std::string& normalized) {
    std::vector<std::string> tokens;
    std::istringstream in(normalized);
    std::string tok;
    while (in >> tok) tokens.push_back(tok);
    return tokens;
}

std::string word_of(const std::string& token) {
    std::string w = token;
    while (!w.empty() && (w.back() == ',' || w.back() == ';' || w.back() == ':')) w.pop_back();
    return w;
}

// ------------------------- parsing -------------------------

namespace {

enum class WordClass { verb, det, prep, conj, other };

WordClass classify(const std::string& token, const Lexicon& lex) {
    const std::string w = word_of(token);
    if (lex.is_conj(w)) return WordClass::conj;
    if (lex.is_verb(w)) return WordClass::verb;
    if (lex.is_prep(w)) return WordClass::prep;
    if (lex.is_det(w)) return WordClass::det;
    return WordClass::other;
}

ParseNode token_node(const std::string& token) {
    return ParseNode{NodeLabel::TOKEN, token, {}};
}

// One chunked phrase: a VP/NP/PP node, or a bare conjunction token.
struct Phrase {
    ParseNode node;
    std::vector<std::string> tokens;
    bool is_vp = false;
    bool is_conj = false;
};

// Deterministic shift-reduce chunking. VP = a single verb token; PP = the
// preposition followed by its object tokens (wrapped in an inner NP); NP =
// a maximal run of determiners and open-class tokens.
std::vector<Phrase> chunk_phrases(const std::vector<std::string>& tokens, const Lexicon& lex) {
    std::vector<Phrase> phrases;
    std::size_t i = 0;
    while (i < tokens.size()) {
        const WordClass cls = classify(tokens[i], lex);
        if (cls == WordClass::conj) {
            Phrase p;
            p.node = token_node(tokens[i]);
            p.tokens = {tokens[i]};
            p.is_conj = true;
            phrases.push_back(std::move(p));
            ++i;
        } else if (cls == WordClass::verb) {
            Phrase p;
            p.node = ParseNode{NodeLabel::VP, "", {token_node(tokens[i])}};
            p.tokens = {tokens[i]};
            p.is_vp = true;
            phrases.push_back(std::move(p));
            ++i;
        } else if (cls == WordClass::prep) {
            Phrase p;
            p.node = ParseNode{NodeLabel::PP, "", {token_node(tokens[i])}};
            p.tokens = {tokens[i]};
            ++i;
            ParseNode object{NodeLabel::NP, "", {}};
            while (i < tokens.size()) {
                const WordClass c = classify(tokens[i], lex);
                if (c != WordClass::det && c != WordClass::other) break;
                object.children.push_back(token_node(tokens[i]));
                p.tokens.push_back(tokens[i]);
                ++i;
            }
            if (!object.children.empty()) p.node.children.push_back(std::move(object));
            phrases.push_back(std::move(p));
        } else {  // det / other start an NP run
            Phrase p;
            p.node = ParseNode{NodeLabel::NP, "", {}};
            while (i < tokens.size()) {
                const WordClass c = classify(tokens[i], lex);
                if (c != WordClass::det && c != WordClass::other) break;
                p.node.children.push_back(token_node(tokens[i]));
                p.tokens.push_back(tokens[i]);
                ++i;
            }
            phrases.push_back(std::move(p));
        }
    }
    return phrases;
}

// First phrase after a run of conjunctions starting at index i; returns the
// index or phrases.size().
std::size_t after_conj_run(const std::vector<Phrase>& phrases, std::size_t i) {
    while (i < phrases.size() && phrases[i].is_conj) ++i;
    return i;
}

// Groups phrases into clauses. A boundary opens (1) at a VP when the current
// clause already holds a verb, (2) at a conjunction run whose first following
// phrase is a VP, and (3) after a token ending in ',' when the next phrase
// starts with a verb.
std::vector<std::vector<Phrase>> split_clauses(std::vector<Phrase> phrases) {
    std::vector<std::vector<Phrase>> clauses;
    std::vector<Phrase> current;
    bool has_verb = false;
    auto flush = [&] {
        if (!current.empty()) {
            clauses.push_back(std::move(current));
            current.clear();
        }
        has_verb = false;
    };
    for (std::size_t i = 0; i < phrases.size(); ++i) {
        Phrase& p = phrases[i];
        if (p.is_conj) {
            // Split before "and then fill ..." but only once per run, and not
            // when nothing verbal has accumulated yet.
            const std::size_t next = after_conj_run(phrases, i);
            if (next < phrases.size() && phrases[next].is_vp && has_verb) flush();
            current.push_back(std::move(p));
            continue;
        }
        if (p.is_vp && has_verb) flush();
        const bool trailing_comma = !p.tokens.empty() && p.tokens.back().back() == ',';
        if (p.is_vp) has_verb = true;
        current.push_back(std::move(p));
        if (trailing_comma && i + 1 < phrases.size() && phrases[i + 1].is_vp) flush();
    }
    flush();
    return clauses;
}

std::vector<std::vector<Phrase>> clause_phrases(const std::string& text, const Lexicon& lex,
                                                std::string* normalized_out) {
    const std::string norm = normalize(text);
    const std::vector<std::string> tokens = tokenize(norm);
    if (tokens.empty()) throw EmptyInputError("parse: no tokens after normalization");
    if (normalized_out) *normalized_out = norm;
    return split_clauses(chunk_phrases(tokens, lex));
}

void collect_leaves(const ParseNode& node, std::vector<std::string>& out) {
    if (node.label == NodeLabel::TOKEN) {
        out.push_back(node.token);
        return;
    }
    for (const ParseNode& child : node.children) collect_leaves(child, out);
}

}  // namespace

std::vector<std::string> ParseTree::leaves() const {
    std::vector<std::string> out;
    collect_leaves(root, out);
    return out;
}

ParseTree parse(const std::string& text, const Lexicon& lex) {
    ParseTree tree;
    const auto clauses = clause_phrases(text, lex, &tree.normalized);
    tree.root = ParseNode{NodeLabel::S, "", {}};
    for (const auto& clause : clauses) {
        ParseNode cnode{NodeLabel::CLAUSE, "", {}};
        for (const Phrase& p : clause) cnode.children.push_back(p.node);
        tree.root.children.push_back(std::move(cnode));
    }
    return tree;
}

// ------------------------- segmentation -------------------------

namespace {

std::string join_tokens(const std::vector<std::string>& tokens, std::size_t begin,
                        std::size_t end) {
    std::string out;
    for (std::size_t i = begin; i < end; ++i) {
        if (i > begin) out.push_back(' ');
        out += tokens[i];
    }
    return out;
}

void emit_clause(const std::vector<std::string>& tokens, ClauseSet& out) {
    if (tokens.empty()) return;
    out.clauses.push_back(join_tokens(tokens, 0, tokens.size()));
    out.clause_tokens.push_back(tokens);
}

}  // namespace

ClauseSet segment(const std::string& step_text, int max_tokens, const Lexicon& lex) {
    if (max_tokens < 4) throw ContractError("segment: max_tokens must be >= 4");
    const auto clauses = clause_phrases(step_text, lex, nullptr);

    ClauseSet out;
    for (const auto& clause : clauses) {
        // Greedy packing of whole phrases, then token-boundary splitting for
        // any single phrase longer than the budget.
        std::vector<std::string> current;
        auto flush = [&] {
            emit_clause(current, out);
            current.clear();
        };
        for (const Phrase& p : clause) {
            const std::size_t n = p.tokens.size();
            if (current.size() + n > static_cast<std::size_t>(max_tokens) && !current.empty())
                flush();
            if (n > static_cast<std::size_t>(max_tokens)) {
                for (std::size_t b = 0; b < n; b += max_tokens) {
                    const std::size_t e = std::min(n, b + max_tokens);
                    emit_clause(std::vector<std::string>(p.tokens.begin() + b,
                                                         p.tokens.begin() + e),
                                out);
                }
                continue;
            }
            current.insert(current.end(), p.tokens.begin(), p.tokens.end());
        }
        flush();
    }
    return out;
}

// ------------------------- featurizers -------------------------

namespace {

void hash_into(const std::string& ngram, double* acc, int dim) {
    const std::uint64_t h = fnv1a64(ngram);
    const int bucket = static_cast<int>(h % static_cast<std::uint64_t>(dim));
    acc[bucket] += (h >> 63) ? -1.0 : 1.0;
}

}  // namespace

Tensor bag_features(const std::string& text, int dim) {
    if (dim < 1) throw DimError("bag_features: dim must be positive");
    const std::vector<std::string> tokens = tokenize(normalize(text));
    if (tokens.empty()) throw EmptyInputError("bag_features: empty text");
    Tensor out = Tensor::zeros({dim});
    std::vector<std::string> words;
    words.reserve(tokens.size());
    for (const std::string& t : tokens) words.push_back(word_of(t));
    for (std::size_t i = 0; i < words.size(); ++i) {
        hash_into(words[i], out.data(), dim);
        if (i + 1 < words.size()) hash_into(words[i] + '\x1f' + words[i + 1], out.data(), dim);
    }
    double norm = 0.0;
    for (int i = 0; i < dim; ++i) norm += out.data()[i] * out.data()[i];
    norm = std::sqrt(norm);
    if (norm < 1e-12) {
        out.data()[0] = 1.0;  // pathological full cancellation
        return out;
    }
    for (int i = 0; i < dim; ++i) out.data()[i] /= norm;
    return out;
}

Tensor goal_features(const std::string& goal_text, int d_goal) {
    return bag_features(goal_text, d_goal);
}

Tensor step_features(const ClauseSet& clauses, int d_step, int k_max) {
    if (clauses.clauses.empty()) throw EmptyInputError("step_features: empty clause set");
    if (k_max < 1 || d_step % k_max != 0)
        throw DimError("step_features: d_step must be a positive multiple of k_max");
    const int slot = d_step / k_max;
    Tensor out = Tensor::zeros({d_step});
    const std::size_t n = clauses.clauses.size();
    const std::size_t direct =
        n <= static_cast<std::size_t>(k_max) ? n : static_cast<std::size_t>(k_max) - 1;
    for (std::size_t c = 0; c < direct; ++c) {
        Tensor f = bag_features(clauses.clauses[c], slot);
        std::copy(f.data(), f.data() + slot, out.data() + c * slot);
    }
    if (n > static_cast<std::size_t>(k_max)) {
        // Overflow: clauses k_max..n pooled into the final slot.
        Tensor pooled = Tensor::zeros({slot});
        int count = 0;
        for (std::size_t c = static_cast<std::size_t>(k_max) - 1; c < n; ++c) {
            Tensor f = bag_features(clauses.clauses[c], slot);
            for (int i = 0; i < slot; ++i) pooled.data()[i] += f.data()[i];
            ++count;
        }
        for (int i = 0; i < slot; ++i)
            out.data()[(k_max - 1) * static_cast<std::size_t>(slot) + i] =
                pooled.data()[i] / count;
    }
    return out;
}

// ------------------------- learnable encoders -------------------------

TextEncoder::TextEncoder(int d_goal, int d_step, int k_max, Rng& init_rng)
    : d_goal_(d_goal), d_step_(d_step), k_max_(k_max) {
    const double gs = 1.0 / std::sqrt(static_cast<double>(d_goal));
    const double ss = 1.0 / std::sqrt(static_cast<double>(d_step));
    goal_w_ = Tensor::randn({d_goal, d_goal}, init_rng, gs, true);
    goal_b_ = Tensor::zeros({d_goal}, true);
    step_w_ = Tensor::randn({d_step, d_step}, init_rng, ss, true);
    step_b_ = Tensor::zeros({d_step}, true);
}

TextEmbedding TextEncoder::encode_goal(const std::string& goal_text, const Lexicon& lex) const {
    (void)lex;  // the goal featurizer needs no grammar, only normalization
    Tensor f = goal_features(goal_text, d_goal_);
    Tensor row = Tensor::from_data({1, d_goal_}, f.vec());
    Tensor projected = add_rowvec(matmul(row, goal_w_), goal_b_);
    return TextEmbedding{projected, TextEmbedding::Role::goal};
}

TextEmbedding TextEncoder::encode_step(const ClauseSet& clauses) const {
    Tensor f = step_features(clauses, d_step_, k_max_);
    Tensor row = Tensor::from_data({1, d_step_}, f.vec());
    Tensor projected = add_rowvec(matmul(row, step_w_), step_b_);
    return TextEmbedding{projected, TextEmbedding::Role::step_aggregate};
}

std::vector<std::pair<std::string, Tensor>> TextEncoder::named_params() {
    return {{"text_goal_w", goal_w_},
            {"text_goal_b", goal_b_},
            {"text_step_w", step_w_},
            {"text_step_b", step_b_}};
}

std::vector<Tensor> TextEncoder::params() {
    std::vector<Tensor> out;
    for (auto& [name, t] : named_params()) out.push_back(t);
    return out;
}

}  // namespace stepviz
