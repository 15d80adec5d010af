#pragma once

#include <string>
#include <utility>
#include <vector>

#include "stepviz/tensor.hpp"

namespace stepviz {

// How an attention mask combines with the logits: elementwise product
// (the literal formula) or an additive log-bias (the standard alternative).
enum class MaskMode { mul, addlog };

MaskMode mask_mode_of(const std::string& name);  // "mul" | "addlog"

struct Linear {
    Tensor w;  // [in, out]
    Tensor b;  // [out]

    Linear() = default;
    Linear(int in, int out, Rng& rng);

    Tensor operator()(const Tensor& x) const;

    void collect(const std::string& prefix,
                 std::vector<std::pair<std::string, Tensor>>& out) const;
};

// Pre-LN single-head attention + feed-forward block over [n, d] tokens.
// `mask` (optional, [n, n]) scales or biases the attention logits.
struct AttentionBlock {
    Tensor ln1_g, ln1_b;
    Linear q, k, v, o;
    Tensor ln2_g, ln2_b;
    Linear ffn1, ffn2;
    int d = 0;

    AttentionBlock() = default;
    AttentionBlock(int d_model, Rng& rng);

    Tensor operator()(const Tensor& x, const Tensor* mask = nullptr,
                      MaskMode mode = MaskMode::mul) const;

    void collect(const std::string& prefix,
                 std::vector<std::pair<std::string, Tensor>>& out) const;
};

}  // namespace stepviz
