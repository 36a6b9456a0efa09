#pragma once

// Sparse mixture-of-experts fusion: the completed token blocks pass through
// a transformer encoder, an availability-aware routing vector picks Top-k of
// E experts, and each modality block is mapped to a fused D-vector by the
// selected experts. Routing sees only the originally observed modalities.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "cerd/nn.hpp"
#include "cerd/tokenize.hpp"

namespace cerd {

// Mean-pool the tokens of a modality block, then a two-layer feed-forward
// D -> 4D -> D.
struct Expert {
  LinearLayer fc1, fc2;
  mutable std::uint64_t forward_calls = 0;

  Expert() = default;
  Expert(std::size_t hidden, Rng& rng) : fc1(hidden, 4 * hidden, rng), fc2(4 * hidden, hidden, rng) {}

  Tensor forward(const Tensor& block, const RunContext& ctx) const {
    ++forward_calls;
    const Tensor pooled = reduce(block, Reduce::mean, 0);
    return fc2.forward(ctx.maybe_dropout(smooth_ramp(fc1.forward(pooled))));
  }

  void collect(ParamList& out, const std::string& prefix) const {
    fc1.collect(out, prefix + ".fc1");
    fc2.collect(out, prefix + ".fc2");
  }
};

struct Router {
  LinearLayer gate;  // D -> E
  double temperature = 1.0;
  std::size_t top_k = 1;

  Router() = default;
  Router(std::size_t hidden, std::size_t experts, double temperature_, std::size_t top_k_, Rng& rng)
      : gate(hidden, experts, rng), temperature(temperature_), top_k(top_k_) {
    if (temperature <= 0.0) throw ParameterError("router: temperature must be positive");
    if (top_k == 0 || top_k > experts) throw ParameterError("router: top_k out of range");
  }

  void collect(ParamList& out, const std::string& prefix) const { gate.collect(out, prefix + ".gate"); }
};

struct RoutingDecision {
  Tensor pi;                          // gate distribution over E experts
  std::vector<std::size_t> selected;  // k expert indices, descending gate value
  Tensor mix_weights;                 // per selected expert; sums to 1 unless literal-sum
};

// Splits the encoded token matrix back into per-modality blocks: block m is
// the contiguous row slice at catalog position m.
inline std::vector<Tensor> split_blocks(const Tensor& encoded, std::size_t modalities,
                                        std::size_t tokens) {
  if (encoded.dim(0) != modalities * tokens)
    throw DimensionError("split_blocks: row count != modalities * tokens");
  std::vector<Tensor> blocks;
  blocks.reserve(modalities);
  for (std::size_t m = 0; m < modalities; ++m)
    blocks.push_back(slice_rows(encoded, m * tokens, (m + 1) * tokens));
  return blocks;
}

// Concat completed blocks and run the encoder stack; gaps are a contract
// violation here.
inline Tensor encode_tokens(const std::vector<TransformerEncoderBlock>& encoder,
                            const TokenSet& tokens, const RunContext& ctx) {
  for (Provenance p : tokens.provenance)
    if (p == Provenance::missing) throw ContractError("encode_tokens: unresolved gap");
  return encoder_forward(encoder, concat(tokens.blocks, 0), ctx);
}

// Availability-aware routing vector: the mask-weighted mean of the pooled
// per-modality encodings. Only originally observed modalities contribute;
// the mask here is the ingestion mask, never provenance.
inline Tensor routing_vector(const std::vector<Tensor>& encoded_blocks,
                             const std::vector<std::uint8_t>& mask) {
  if (encoded_blocks.size() != mask.size())
    throw DimensionError("routing_vector: blocks/mask length mismatch");
  std::size_t observed = 0;
  Tensor sum;
  for (std::size_t m = 0; m < encoded_blocks.size(); ++m) {
    if (!mask[m]) continue;
    const Tensor pooled = reduce(encoded_blocks[m], Reduce::mean, 0);
    sum = observed == 0 ? pooled : add(sum, pooled);
    ++observed;
  }
  if (observed == 0) throw ContractError("routing_vector: zero observed modalities");
  return scale(sum, 1.0 / static_cast<double>(observed));
}

inline Tensor gate_distribution(const Router& router, const Tensor& v) {
  return softmax(scale(router.gate.forward(v), 1.0 / router.temperature), 1.0);
}

// Top-k selection with ties broken toward the lower expert index. Mixing
// weights are the selected gate values renormalized to sum 1; the literal
// variant mixes with unit weights, reproducing a plain sum of expert
// outputs.
inline RoutingDecision select_topk(const Tensor& pi, std::size_t k, bool literal_sum = false) {
  if (pi.rank() != 1) throw DimensionError("select_topk: expects rank-1 gate values");
  const std::size_t experts = pi.dim(0);
  if (k == 0 || k > experts)
    throw ParameterError("select_topk: k = " + std::to_string(k) + " out of range for " +
                         std::to_string(experts) + " experts");
  std::vector<std::size_t> order(experts);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (pi.values()[a] != pi.values()[b]) return pi.values()[a] > pi.values()[b];
    return a < b;
  });
  RoutingDecision decision;
  decision.pi = pi;
  decision.selected.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  if (literal_sum) {
    decision.mix_weights = Tensor::filled({k}, 1.0);
  } else {
    decision.mix_weights = normalize_sum(gather(pi, decision.selected));
  }
  return decision;
}

// p^m: mixture of the selected experts applied to modality m's encoded
// block. Exactly the k selected experts execute.
inline std::vector<Tensor> expert_mix(const RoutingDecision& decision,
                                      const std::vector<Expert>& experts,
                                      const std::vector<Tensor>& encoded_blocks,
                                      const RunContext& ctx) {
  std::vector<Tensor> fused;
  fused.reserve(encoded_blocks.size());
  for (const Tensor& block : encoded_blocks) {
    Tensor acc;
    for (std::size_t i = 0; i < decision.selected.size(); ++i) {
      const Tensor out = scale_by(experts[decision.selected[i]].forward(block, ctx),
                                  pick(decision.mix_weights, i));
      acc = i == 0 ? out : add(acc, out);
    }
    fused.push_back(acc);
  }
  return fused;
}

// Mean-squared deviation of the batch's mean gate distribution from uniform;
// optional auxiliary objective, zero-weighted by default.
inline Tensor load_balance_loss(const std::vector<Tensor>& gate_distributions) {
  if (gate_distributions.empty()) throw ContractError("load_balance_loss: empty batch");
  const std::size_t experts = gate_distributions[0].dim(0);
  const Tensor mean_load = reduce(stack_rows(gate_distributions), Reduce::mean, 0);
  const Tensor deviation = sub(mean_load, Tensor::filled({experts}, 1.0 / double(experts)));
  return mean_all(mul(deviation, deviation));
}

}  // namespace cerd
