#pragma once

// Conditional evidence reconstruction: per-modality generators rebuild a
// missing modality's tokens by cross-attending learnable queries over the
// subject's observed token blocks, then gating the result elementwise.
// Generators are supervised by masked reconstruction on subjects with full
// modality coverage.

#include <cstdint>
#include <string>
#include <vector>

#include "cerd/nn.hpp"
#include "cerd/random.hpp"
#include "cerd/tokenize.hpp"

namespace cerd {

enum class ReconNorm { mse, l1 };

struct ConditionalGenerator {
  std::size_t target = 0;  // catalog index this generator reconstructs
  std::string name;
  Tensor queries;  // P x D, learnable
  std::vector<CrossAttentionBlock> blocks;
  LinearLayer gate;  // D -> D

  // Probes for tests: how often and over how many context rows we ran.
  mutable std::uint64_t forward_calls = 0;
  mutable std::size_t last_context_rows = 0;

  ConditionalGenerator() = default;

  ConditionalGenerator(std::size_t target_, std::string name_, std::size_t tokens,
                       std::size_t hidden, std::size_t depth, std::size_t heads, Rng& rng)
      : target(target_), name(std::move(name_)) {
    queries = Tensor::zeros({tokens, hidden}, true);
    fill_normal(queries, 0.0, 0.02, rng);
    for (std::size_t i = 0; i < depth; ++i) blocks.emplace_back(hidden, heads, rng);
    gate = LinearLayer(hidden, hidden, rng);
  }

  // H = stacked cross-attention of the queries over the context;
  // output = sigmoid(gate(H)) ⊙ H. Dropout stays off in here: the
  // reconstruction module must emit stable blocks for the classifier trunk,
  // which carries the regularization instead.
  Tensor generate(const Tensor& context, const RunContext& ctx) const {
    if (context.rank() != 2 || context.dim(1) != queries.dim(1))
      throw DimensionError("generator[" + name + "]: context width != hidden dim");
    if (context.dim(0) == 0) throw ContractError("generator[" + name + "]: empty context");
    ++forward_calls;
    last_context_rows = context.dim(0);
    RunContext dry = ctx;
    dry.dropout = 0.0;
    Tensor h = queries;
    for (const CrossAttentionBlock& b : blocks) h = b.forward(h, context, dry);
    return mul(sigmoid(gate.forward(h)), h);
  }

  void collect(ParamList& out, const std::string& prefix) const {
    out.push_back({prefix + ".queries", queries});
    for (std::size_t i = 0; i < blocks.size(); ++i)
      blocks[i].collect(out, prefix + ".block" + std::to_string(i));
    gate.collect(out, prefix + ".gate");
  }
};

inline std::vector<ConditionalGenerator> make_generators(const ModalityCatalog& catalog,
                                                         std::size_t depth, std::size_t heads,
                                                         Rng& rng) {
  std::vector<ConditionalGenerator> gens;
  gens.reserve(catalog.count());
  for (std::size_t m = 0; m < catalog.count(); ++m)
    gens.emplace_back(m, catalog.names[m], catalog.tokens, catalog.hidden, depth, heads, rng);
  return gens;
}

// Context for a masked target: row-concatenation of every other modality's
// block in catalog order. All non-target blocks must be present.
inline Tensor build_context(const TokenSet& tokens, std::size_t target) {
  std::vector<Tensor> parts;
  for (std::size_t m = 0; m < tokens.blocks.size(); ++m) {
    if (m == target) continue;
    if (tokens.provenance[m] == Provenance::missing)
      throw ContractError("build_context: non-target modality " + std::to_string(m) +
                          " is an unresolved gap");
    parts.push_back(tokens.blocks[m]);
  }
  if (parts.empty()) throw ContractError("build_context: no context blocks");
  return concat(parts, 0);
}

// Completion-time context: only genuinely observed blocks, never other
// reconstructions (unless sequential conditioning is requested, in which
// case previously filled gaps join in catalog order).
inline Tensor build_observed_context(const TokenSet& tokens, const std::vector<std::uint8_t>& mask,
                                     std::size_t target, bool include_reconstructed) {
  std::vector<Tensor> parts;
  for (std::size_t m = 0; m < tokens.blocks.size(); ++m) {
    if (m == target) continue;
    const bool observed = mask[m] != 0;
    const bool recon = include_reconstructed && tokens.provenance[m] == Provenance::reconstructed;
    if (observed || recon) parts.push_back(tokens.blocks[m]);
  }
  if (parts.empty()) throw ContractError("build_observed_context: no observed context");
  return concat(parts, 0);
}

inline Tensor reconstruction_loss(const Tensor& predicted, const Tensor& target, ReconNorm norm) {
  return norm == ReconNorm::mse ? mse_loss(predicted, target) : l1_loss(predicted, target);
}

// Fills every gap with its generator's output, conditioned on the observed
// modalities only. Identity on fully observed subjects; no generator runs.
inline TokenSet complete_subject(const TokenSet& tokens,
                                 const std::vector<ConditionalGenerator>& generators,
                                 const std::vector<std::uint8_t>& mask, const RunContext& ctx,
                                 bool sequential = false) {
  std::size_t observed = 0;
  for (std::uint8_t o : mask) observed += o;
  if (observed == 0) throw DataError("complete_subject: zero observed modalities");
  TokenSet out = tokens;
  for (std::size_t m = 0; m < out.blocks.size(); ++m) {
    if (out.provenance[m] != Provenance::missing) continue;
    const Tensor context = build_observed_context(out, mask, m, sequential);
    out.blocks[m] = generators[m].generate(context, ctx);
    out.provenance[m] = Provenance::reconstructed;
  }
  return out;
}

// Which modality to mask for each full-coverage subject this step.
struct MaskingPlan {
  std::vector<std::vector<std::size_t>> targets;  // per subject
  bool exhaustive = false;

  // Uniform single target per subject, or every modality when exhaustive.
  static MaskingPlan draw(std::size_t subjects, std::size_t modalities, bool exhaustive, Rng& rng) {
    MaskingPlan plan;
    plan.exhaustive = exhaustive;
    plan.targets.resize(subjects);
    for (std::size_t n = 0; n < subjects; ++n) {
      if (exhaustive) {
        for (std::size_t m = 0; m < modalities; ++m) plan.targets[n].push_back(m);
      } else {
        plan.targets[n].push_back(rng.integer(modalities));
      }
    }
    return plan;
  }
};

// Detached token blocks for a batch; lets gradient checking hold the
// reconstruction targets fixed while parameters are perturbed.
struct ReconTargets {
  std::vector<std::vector<Tensor>> blocks;  // per batch item, per modality
};

inline ReconTargets snapshot_recon_targets(const std::vector<ModalityTokenizer>& tokenizers,
                                           const std::vector<const SubjectView*>& batch) {
  NoGradGuard guard;
  ReconTargets targets;
  targets.blocks.reserve(batch.size());
  for (const SubjectView* subject : batch) {
    const TokenSet tokens = build_token_set(tokenizers, *subject);
    std::vector<Tensor> detached;
    detached.reserve(tokens.blocks.size());
    for (const Tensor& b : tokens.blocks) detached.push_back(b.detach());
    targets.blocks.push_back(std::move(detached));
  }
  return targets;
}

// Masked reconstruction loss over a full-coverage batch: for each (subject,
// target) pair, rebuild the target block from the remaining modalities and
// score it against the tokenized target. Gradients are stopped through the
// target so the tokenizers cannot collapse the representation; they still
// flow through the context side and the generators. Passing `fixed_targets`
// replaces the live detached targets; finite-difference checks need this so
// the probe differentiates the same function the tape does.
inline Tensor masked_reconstruction_loss(const std::vector<ModalityTokenizer>& tokenizers,
                                         const std::vector<ConditionalGenerator>& generators,
                                         const std::vector<const SubjectView*>& batch,
                                         const MaskingPlan& plan, ReconNorm norm,
                                         const RunContext& ctx,
                                         const ReconTargets* fixed_targets = nullptr) {
  if (batch.empty()) throw ContractError("masked_reconstruction_loss: empty batch");
  Tensor total = Tensor::scalar(0.0);
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const SubjectView& subject = *batch[i];
    if (!subject.fully_observed())
      throw ContractError("masked_reconstruction_loss: subject " + subject.id +
                          " lacks full modality coverage");
    const TokenSet tokens = build_token_set(tokenizers, subject);
    for (std::size_t target : plan.targets[i]) {
      const Tensor context = build_context(tokens, target);
      const Tensor predicted = generators[target].generate(context, ctx);
      const Tensor reference = fixed_targets != nullptr ? fixed_targets->blocks[i][target]
                                                        : tokens.blocks[target].detach();
      total = add(total, reconstruction_loss(predicted, reference, norm));
      ++pairs;
    }
  }
  return scale(total, 1.0 / static_cast<double>(pairs));
}

}  // namespace cerd
