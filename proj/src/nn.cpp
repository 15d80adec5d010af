#include "stepviz/nn.hpp"

#include <cmath>

namespace stepviz {

MaskMode mask_mode_of(const std::string& name) {
    if (name == "mul") return MaskMode::mul;
    if (name == "addlog") return MaskMode::addlog;
    throw ConfigError("mask_mode must be mul or addlog");
}

Linear::Linear(int in, int out, Rng& rng)
    : w(Tensor::randn({in, out}, rng, 1.0 / std::sqrt(static_cast<double>(in)), true)),
      b(Tensor::zeros({out}, true)) {}

Tensor Linear::operator()(const Tensor& x) const { return add_rowvec(matmul(x, w), b); }

void Linear::collect(const std::string& prefix,
                     std::vector<std::pair<std::string, Tensor>>& out) const {
    out.emplace_back(prefix + ".w", w);
    out.emplace_back(prefix + ".b", b);
}

AttentionBlock::AttentionBlock(int d_model, Rng& rng)
    : ln1_g(Tensor::full({d_model}, 1.0, true)),
      ln1_b(Tensor::zeros({d_model}, true)),
      q(d_model, d_model, rng),
      k(d_model, d_model, rng),
      v(d_model, d_model, rng),
      o(d_model, d_model, rng),
      ln2_g(Tensor::full({d_model}, 1.0, true)),
      ln2_b(Tensor::zeros({d_model}, true)),
      ffn1(d_model, 4 * d_model, rng),
      ffn2(4 * d_model, d_model, rng),
      d(d_model) {}

Tensor AttentionBlock::operator()(const Tensor& x, const Tensor* mask, MaskMode mode) const {
    const Tensor h = layernorm(x, ln1_g, ln1_b);
    const Tensor logits =
        scale(matmul(q(h), transpose(k(h))), 1.0 / std::sqrt(static_cast<double>(d)));
    Tensor att;
    if (mask == nullptr) {
        att = softmax_rows(logits);
    } else {
        if (mask->shape() != std::vector<int>({x.dim(0), x.dim(0)}))
            throw DimError("AttentionBlock: mask must be [n,n]");
        if (mode == MaskMode::mul) {
            att = masked_softmax(logits, *mask);
        } else {
            // additive log-bias; the mask is a constant, so log it untaped
            Tensor logmask;
            {
                NoTapeScope no_tape;
                logmask = Tensor::zeros(mask->shape());
                for (std::size_t i = 0; i < mask->numel(); ++i)
                    logmask.data()[i] = std::log(mask->data()[i]);
            }
            att = softmax_rows(add(logits, logmask));
        }
    }
    const Tensor after_att = add(x, o(matmul(att, v(h))));
    const Tensor h2 = layernorm(after_att, ln2_g, ln2_b);
    return add(after_att, ffn2(silu(ffn1(h2))));
}

void AttentionBlock::collect(const std::string& prefix,
                             std::vector<std::pair<std::string, Tensor>>& out) const {
    out.emplace_back(prefix + ".ln1.g", ln1_g);
    out.emplace_back(prefix + ".ln1.b", ln1_b);
    q.collect(prefix + ".q", out);
    k.collect(prefix + ".k", out);
    v.collect(prefix + ".v", out);
    o.collect(prefix + ".o", out);
    out.emplace_back(prefix + ".ln2.g", ln2_g);
    out.emplace_back(prefix + ".ln2.b", ln2_b);
    ffn1.collect(prefix + ".ffn1", out);
    ffn2.collect(prefix + ".ffn2", out);
}

}  // namespace stepviz
