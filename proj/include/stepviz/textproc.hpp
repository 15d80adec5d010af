#pragma once

#include <set>
#include <string>
#include <vector>

#include "stepviz/tensor.hpp"

namespace stepviz {

struct TaskSpec {
    std::string goal;
    std::vector<std::string> steps;  // n >= 2

    void check() const;  // throws ContractError on violated invariants
};

// Closed-class word lists driving the toy shift-reduce grammar. Versioned so
// checkpoints can record which grammar produced their conditioning features.
struct Lexicon {
    std::string version;
    std::set<std::string> verbs;
    std::set<std::string> determiners;
    std::set<std::string> prepositions;
    std::set<std::string> conjunctions;

    static const Lexicon& builtin();
    static Lexicon from_json_text(const std::string& json_text);
    static Lexicon from_json_file(const std::string& path);

    bool is_verb(const std::string& word) const { return verbs.count(word) > 0; }
    bool is_det(const std::string& word) const { return determiners.count(word) > 0; }
    bool is_prep(const std::string& word) const { return prepositions.count(word) > 0; }
    bool is_conj(const std::string& word) const { return conjunctions.count(word) > 0; }
};

enum class NodeLabel { S, NP, VP, PP, CLAUSE, TOKEN };

struct ParseNode {
    NodeLabel label;
    std::string token;  // only for TOKEN leaves
    std::vector<ParseNode> children;
};

struct ParseTree {
    ParseNode root;          // label S
    std::string normalized;  // joining the leaves with single spaces equals this

    std::vector<std::string> leaves() const;
};

struct ClauseSet {
    std::vector<std::string> clauses;                   // joined token spans
    std::vector<std::vector<std::string>> clause_tokens;  // same spans, tokenized
};

// Lowercases, collapses whitespace runs, strips terminal punctuation.
std::string normalize(const std::string& text);

// Whitespace split of a normalized string; commas stay attached to their token.
std::vector<std::string> tokenize(const std::string& normalized);

// A token minus trailing punctuation; the unit used for lexicon lookups and
// feature hashing.
std::string word_of(const std::string& token);

ParseTree parse(const std::string& text, const Lexicon& lex = Lexicon::builtin());

ClauseSet segment(const std::string& step_text, int max_tokens = 16,
                  const Lexicon& lex = Lexicon::builtin());

// Hashed bag of unigrams+bigrams with signed buckets, L2-normalized.
// Deterministic; never participates in the gradient tape.
Tensor bag_features(const std::string& text, int dim);

// Pre-projection goal features: bag_features over the whole text.
Tensor goal_features(const std::string& goal_text, int d_goal);

// Pre-projection step features: one bag slot of width d_step/k_max per clause
// (clause order preserved, zero padding, overflow clauses mean-pooled into the
// last slot), concatenated to width d_step.
Tensor step_features(const ClauseSet& clauses, int d_step, int k_max);

struct TextEmbedding {
    enum class Role { goal, step_clause, step_aggregate };
    Tensor vector;
    Role role;
};

// The learnable half of the dual encoders: one linear layer per role on top
// of the deterministic features. Trained by the alignment module.
class TextEncoder {
public:
    TextEncoder(int d_goal, int d_step, int k_max, Rng& init_rng);

    TextEmbedding encode_goal(const std::string& goal_text,
                              const Lexicon& lex = Lexicon::builtin()) const;
    TextEmbedding encode_step(const ClauseSet& clauses) const;

    std::vector<std::pair<std::string, Tensor>> named_params();
    std::vector<Tensor> params();

    int d_goal() const { return d_goal_; }
    int d_step() const { return d_step_; }
    int k_max() const { return k_max_; }

private:
    int d_goal_;
    int d_step_;
    int k_max_;
    Tensor goal_w_, goal_b_;
    Tensor step_w_, step_b_;
};

}  // namespace stepviz
