#pragma once

// Neural building blocks: affine layers, multi-head attention (self and
// cross), pre-norm transformer blocks. Attention mixes context rows through
// canonical-order reductions, so outputs are exactly invariant to context
// permutations (there are no positional encodings anywhere).

#include <cmath>
#include <string>
#include <vector>

#include "cerd/errors.hpp"
#include "cerd/gradcheck.hpp"
#include "cerd/random.hpp"
#include "cerd/tensor.hpp"

namespace cerd {

// Per-forward runtime state: train/eval switch and the dropout stream.
struct RunContext {
  bool train = false;
  double dropout = 0.0;
  Rng* rng = nullptr;

  Tensor maybe_dropout(const Tensor& x) const {
    if (!train || dropout == 0.0) return x;
    if (rng == nullptr) throw ContractError("RunContext: train-mode dropout requires an rng");
    return cerd::dropout(x, dropout, *rng, true);
  }
};

inline RunContext eval_context() { return RunContext{}; }

struct LinearLayer {
  Tensor weight;  // [out x in]
  Tensor bias;    // [out]

  LinearLayer() = default;

  // Scaled uniform fan-in init, zero bias.
  LinearLayer(std::size_t in, std::size_t out, Rng& rng) {
    weight = Tensor::zeros({out, in}, true);
    bias = Tensor::zeros({out}, true);
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    fill_uniform(weight, -bound, bound, rng);
  }

  std::size_t in_features() const { return weight.dim(1); }
  std::size_t out_features() const { return weight.dim(0); }
  std::size_t parameter_count() const { return weight.size() + bias.size(); }

  // Affine map along the last axis; accepts rank-1 [in] or rank-2 [R x in].
  Tensor forward(const Tensor& x) const {
    if (x.rank() == 1) {
      if (x.dim(0) != in_features())
        throw DimensionError("linear: input width " + std::to_string(x.dim(0)) + " != " +
                             std::to_string(in_features()));
      Tensor y = add_rowvec(matmul(reshape(x, {1, in_features()}), transpose(weight)), bias);
      return reshape(y, {out_features()});
    }
    if (x.rank() != 2 || x.dim(1) != in_features())
      throw DimensionError("linear: expected [* x " + std::to_string(in_features()) + "], got " +
                           shape_str(x.shape()));
    return add_rowvec(matmul(x, transpose(weight)), bias);
  }

  void collect(ParamList& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

struct LayerNorm {
  Tensor gamma;
  Tensor beta;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t width) {
    gamma = Tensor::filled({width}, 1.0, true);
    beta = Tensor::zeros({width}, true);
  }

  Tensor forward(const Tensor& x) const { return layer_norm_rows(x, gamma, beta); }

  void collect(ParamList& out, const std::string& prefix) const {
    out.push_back({prefix + ".gamma", gamma});
    out.push_back({prefix + ".beta", beta});
  }
};

// Optional hook exposing the per-head attention weight matrices.
struct AttentionProbe {
  std::vector<Tensor> head_weights;
};

struct MultiHeadAttention {
  std::size_t heads = 0;
  std::size_t model_dim = 0;
  LinearLayer q_proj, k_proj, v_proj, out_proj;

  MultiHeadAttention() = default;

  MultiHeadAttention(std::size_t model_dim_, std::size_t heads_, Rng& rng)
      : heads(heads_), model_dim(model_dim_) {
    if (heads == 0 || model_dim % heads != 0)
      throw ParameterError("attention: model dim " + std::to_string(model_dim) +
                           " not divisible by " + std::to_string(heads) + " heads");
    q_proj = LinearLayer(model_dim, model_dim, rng);
    k_proj = LinearLayer(model_dim, model_dim, rng);
    v_proj = LinearLayer(model_dim, model_dim, rng);
    out_proj = LinearLayer(model_dim, model_dim, rng);
  }

  // queries: [P x D], context: [L x D] -> [P x D].
  Tensor forward(const Tensor& queries, const Tensor& context, AttentionProbe* probe = nullptr) const {
    if (queries.rank() != 2 || queries.dim(1) != model_dim)
      throw DimensionError("attention: queries must be [* x " + std::to_string(model_dim) + "]");
    if (context.rank() != 2 || context.dim(1) != model_dim)
      throw DimensionError("attention: context must be [* x " + std::to_string(model_dim) + "]");
    if (context.dim(0) == 0) throw ContractError("attention: empty context");

    const std::size_t head_dim = model_dim / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
    const Tensor q = q_proj.forward(queries);
    const Tensor k = k_proj.forward(context);
    const Tensor v = v_proj.forward(context);

    std::vector<Tensor> head_outputs;
    head_outputs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t c0 = h * head_dim, c1 = (h + 1) * head_dim;
      const Tensor qh = slice_cols(q, c0, c1);
      const Tensor kh = slice_cols(k, c0, c1);
      const Tensor vh = slice_cols(v, c0, c1);
      const Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
      const Tensor weights = softmax_rows(scores, 1.0);
      if (probe != nullptr) probe->head_weights.push_back(weights);
      head_outputs.push_back(matmul_canonical(weights, vh));
    }
    return out_proj.forward(concat(head_outputs, 1));
  }

  void collect(ParamList& out, const std::string& prefix) const {
    q_proj.collect(out, prefix + ".q");
    k_proj.collect(out, prefix + ".k");
    v_proj.collect(out, prefix + ".v");
    out_proj.collect(out, prefix + ".out");
  }
};

// Two-layer feed-forward with smooth-ramp nonlinearity, hidden width 4*D.
struct FeedForward {
  LinearLayer fc1, fc2;

  FeedForward() = default;
  FeedForward(std::size_t dim, Rng& rng) : fc1(dim, 4 * dim, rng), fc2(4 * dim, dim, rng) {}

  Tensor forward(const Tensor& x, const RunContext& ctx) const {
    return fc2.forward(ctx.maybe_dropout(smooth_ramp(fc1.forward(x))));
  }

  void collect(ParamList& out, const std::string& prefix) const {
    fc1.collect(out, prefix + ".fc1");
    fc2.collect(out, prefix + ".fc2");
  }
};

// Pre-norm self-attention block: residual branches vanish when their output
// projections are zero, leaving the identity map.
struct TransformerEncoderBlock {
  MultiHeadAttention attn;
  LayerNorm ln1, ln2;
  FeedForward ff;

  TransformerEncoderBlock() = default;
  TransformerEncoderBlock(std::size_t dim, std::size_t heads, Rng& rng)
      : attn(dim, heads, rng), ln1(dim), ln2(dim), ff(dim, rng) {}

  Tensor forward(const Tensor& tokens, const RunContext& ctx) const {
    const Tensor normed = ln1.forward(tokens);
    Tensor x = add(tokens, ctx.maybe_dropout(attn.forward(normed, normed)));
    return add(x, ctx.maybe_dropout(ff.forward(ln2.forward(x), ctx)));
  }

  void collect(ParamList& out, const std::string& prefix) const {
    attn.collect(out, prefix + ".attn");
    ln1.collect(out, prefix + ".ln1");
    ln2.collect(out, prefix + ".ln2");
    ff.collect(out, prefix + ".ff");
  }
};

// Pre-norm cross-attention block for the conditional generators: queries are
// normalized before attending over the raw context tokens.
struct CrossAttentionBlock {
  MultiHeadAttention attn;
  LayerNorm ln_q, ln_ff;
  FeedForward ff;

  CrossAttentionBlock() = default;
  CrossAttentionBlock(std::size_t dim, std::size_t heads, Rng& rng)
      : attn(dim, heads, rng), ln_q(dim), ln_ff(dim), ff(dim, rng) {}

  Tensor forward(const Tensor& queries, const Tensor& context, const RunContext& ctx) const {
    Tensor x = add(queries, ctx.maybe_dropout(attn.forward(ln_q.forward(queries), context)));
    return add(x, ctx.maybe_dropout(ff.forward(ln_ff.forward(x), ctx)));
  }

  void collect(ParamList& out, const std::string& prefix) const {
    attn.collect(out, prefix + ".attn");
    ln_q.collect(out, prefix + ".ln_q");
    ln_ff.collect(out, prefix + ".ln_ff");
    ff.collect(out, prefix + ".ff");
  }
};

inline Tensor encoder_forward(const std::vector<TransformerEncoderBlock>& blocks, const Tensor& tokens,
                              const RunContext& ctx = {}) {
  Tensor x = tokens;
  for (const TransformerEncoderBlock& b : blocks) x = b.forward(x, ctx);
  return x;
}

inline void zero_values(Tensor& t) {
  for (double& v : t.values_mut()) v = 0.0;
}

}  // namespace cerd
