#pragma once

// Full model assembly: tokenizers -> completion -> encoder -> fusion
// backbone -> classification head, wired per configuration. Ablation
// variants swap whole stages; modules excluded by the active variant are
// never instantiated, so their parameters cannot exist, let alone train.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cerd/cer.hpp"
#include "cerd/evidence.hpp"
#include "cerd/moe.hpp"
#include "cerd/tokenize.hpp"

namespace cerd {

enum class Completion { cer, static_fill, zero_fill };
enum class HeadKind { evidence_decomposition, plain_linear };
enum class BackboneKind { moe, shared_ffn };

inline const char* completion_name(Completion c) {
  switch (c) {
    case Completion::cer: return "cer";
    case Completion::static_fill: return "static_fill";
    case Completion::zero_fill: return "zero_fill";
  }
  return "?";
}

inline const char* head_name(HeadKind h) {
  return h == HeadKind::evidence_decomposition ? "evidence_decomposition" : "plain_linear";
}

inline const char* backbone_name(BackboneKind b) { return b == BackboneKind::moe ? "moe" : "shared_ffn"; }

inline Completion completion_from_name(const std::string& s) {
  if (s == "cer") return Completion::cer;
  if (s == "static_fill") return Completion::static_fill;
  if (s == "zero_fill") return Completion::zero_fill;
  throw ConfigError("unknown completion strategy '" + s + "'");
}

inline HeadKind head_from_name(const std::string& s) {
  if (s == "evidence_decomposition") return HeadKind::evidence_decomposition;
  if (s == "plain_linear") return HeadKind::plain_linear;
  throw ConfigError("unknown head '" + s + "'");
}

inline BackboneKind backbone_from_name(const std::string& s) {
  if (s == "moe") return BackboneKind::moe;
  if (s == "shared_ffn") return BackboneKind::shared_ffn;
  throw ConfigError("unknown backbone '" + s + "'");
}

struct ModelConfig {
  std::size_t hidden_dim = 128;  // D
  std::size_t tokens = 16;       // P
  std::size_t experts = 16;      // E
  std::size_t top_k = 4;
  std::size_t heads = 4;  // H
  std::size_t encoder_depth = 2;
  std::size_t generator_depth = 2;
  std::size_t classes = 3;
  double router_temperature = 1.0;
  double attribution_temperature = 1.0;
  Completion completion = Completion::cer;
  HeadKind head = HeadKind::evidence_decomposition;
  BackboneKind backbone = BackboneKind::moe;
  bool sequential_completion = false;
  bool literal_expert_sum = false;
  // Train-time option: feed the classifier detached copies of reconstructed
  // blocks so the diagnosis loss cannot drag the generators away from their
  // reconstruction targets.
  bool detach_completion = false;

  void validate() const {
    if (hidden_dim == 0 || tokens == 0 || classes < 2)
      throw ConfigError("model: hidden_dim, tokens must be positive and classes >= 2");
    if (heads == 0 || hidden_dim % heads != 0)
      throw ConfigError("model: hidden_dim must be divisible by heads");
    if (backbone == BackboneKind::moe && (top_k == 0 || top_k > experts))
      throw ConfigError("model: top_k out of range");
    if (router_temperature <= 0.0 || attribution_temperature <= 0.0)
      throw ConfigError("model: temperatures must be positive");
  }
};

class CerdModel {
 public:
  CerdModel(std::vector<std::string> modality_names, std::vector<std::size_t> modality_dims,
            ModelConfig config, std::uint64_t seed)
      : config_(config) {
    config_.validate();
    catalog_.names = std::move(modality_names);
    catalog_.dims = std::move(modality_dims);
    catalog_.tokens = config_.tokens;
    catalog_.hidden = config_.hidden_dim;
    catalog_.validate();

    Rng rng(derive_seed(seed, "model-init"));
    tokenizers_ = make_tokenizers(catalog_, rng);
    if (config_.completion == Completion::cer)
      generators_ = make_generators(catalog_, config_.generator_depth, config_.heads, rng);
    if (config_.completion == Completion::static_fill) {
      for (std::size_t m = 0; m < catalog_.count(); ++m) {
        Tensor fill = Tensor::zeros({config_.tokens, config_.hidden_dim}, true);
        fill_normal(fill, 0.0, 0.02, rng);
        static_fill_.push_back(fill);
      }
    }
    for (std::size_t i = 0; i < config_.encoder_depth; ++i)
      encoder_.emplace_back(config_.hidden_dim, config_.heads, rng);
    if (config_.backbone == BackboneKind::moe) {
      router_ = Router(config_.hidden_dim, config_.experts, config_.router_temperature,
                       config_.top_k, rng);
      for (std::size_t e = 0; e < config_.experts; ++e) experts_.emplace_back(config_.hidden_dim, rng);
    } else {
      shared_expert_ = Expert(config_.hidden_dim, rng);
    }
    if (config_.head == HeadKind::evidence_decomposition) {
      evidence_ = EvidenceHead(catalog_.count(), config_.hidden_dim, config_.classes, config_.heads,
                               config_.attribution_temperature, rng);
    } else {
      plain_head_ = LinearLayer(config_.hidden_dim, config_.classes, rng);
    }
  }

  const ModelConfig& config() const { return config_; }
  const ModalityCatalog& catalog() const { return catalog_; }
  const std::vector<ModalityTokenizer>& tokenizers() const { return tokenizers_; }
  const std::vector<ConditionalGenerator>& generators() const { return generators_; }
  const std::vector<TransformerEncoderBlock>& encoder() const { return encoder_; }
  const std::vector<Expert>& experts() const { return experts_; }
  const Router& router() const { return router_; }
  const EvidenceHead& evidence_head() const { return evidence_; }

  // ---- pipeline stages ----

  TokenSet tokenize(const SubjectView& subject) const { return build_token_set(tokenizers_, subject); }

  TokenSet complete(const TokenSet& tokens, const std::vector<std::uint8_t>& mask,
                    const RunContext& ctx) const {
    switch (config_.completion) {
      case Completion::cer: {
        TokenSet out = complete_subject(tokens, generators_, mask, ctx, config_.sequential_completion);
        if (config_.detach_completion && ctx.train) {
          for (std::size_t m = 0; m < out.blocks.size(); ++m)
            if (out.provenance[m] == Provenance::reconstructed)
              out.blocks[m] = out.blocks[m].detach();
        }
        return out;
      }
      case Completion::static_fill: {
        TokenSet out = tokens;
        for (std::size_t m = 0; m < out.blocks.size(); ++m) {
          if (out.provenance[m] != Provenance::missing) continue;
          out.blocks[m] = static_fill_[m];
          out.provenance[m] = Provenance::static_filled;
        }
        return out;
      }
      case Completion::zero_fill: {
        TokenSet out = tokens;
        for (std::size_t m = 0; m < out.blocks.size(); ++m) {
          if (out.provenance[m] != Provenance::missing) continue;
          out.blocks[m] = Tensor::zeros({config_.tokens, config_.hidden_dim});
          out.provenance[m] = Provenance::zero_filled;
        }
        return out;
      }
    }
    throw ContractError("complete: unreachable");
  }

  Tensor encode(const TokenSet& completed, const RunContext& ctx) const {
    return encode_tokens(encoder_, completed, ctx);
  }

  std::vector<Tensor> split_encoded(const Tensor& encoded) const {
    return split_blocks(encoded, catalog_.count(), config_.tokens);
  }

  RoutingDecision route(const std::vector<Tensor>& blocks, const std::vector<std::uint8_t>& mask) const {
    const Tensor v = routing_vector(blocks, mask);
    return select_topk(gate_distribution(router_, v), config_.top_k, config_.literal_expert_sum);
  }

  std::vector<Tensor> fuse(const std::vector<Tensor>& blocks, const RoutingDecision* decision,
                           const RunContext& ctx) const {
    if (config_.backbone == BackboneKind::moe) {
      if (decision == nullptr) throw ContractError("fuse: moe backbone needs a routing decision");
      return expert_mix(*decision, experts_, blocks, ctx);
    }
    std::vector<Tensor> fused;
    fused.reserve(blocks.size());
    for (const Tensor& b : blocks) fused.push_back(shared_expert_.forward(b, ctx));
    return fused;
  }

  struct Output {
    Tensor logits;
    std::optional<EvidenceReport> report;
    std::optional<RoutingDecision> decision;
  };

  Output forward(const SubjectView& subject, const RunContext& ctx,
                 bool want_report = false) const {
    const TokenSet completed = complete(tokenize(subject), subject.mask, ctx);
    const Tensor encoded = encode(completed, ctx);
    const std::vector<Tensor> blocks = split_encoded(encoded);

    Output out;
    std::vector<Tensor> fused;
    if (config_.backbone == BackboneKind::moe) {
      out.decision = route(blocks, subject.mask);
      fused = fuse(blocks, &*out.decision, ctx);
    } else {
      fused = fuse(blocks, nullptr, ctx);
    }

    if (config_.head == HeadKind::evidence_decomposition) {
      const auto decomposition = evidence_.decompose(fused, ctx);
      const Tensor weights = evidence_.modality_weights(decomposition.cues);
      const auto attribution = evidence_.attribute(decomposition, weights);
      out.logits = attribution.logits;
      if (want_report) out.report = evidence_.report(attribution, subject.id);
    } else {
      out.logits = plain_head_.forward(reduce(stack_rows(fused), Reduce::mean, 0));
    }
    return out;
  }

  // ---- parameters ----

  ParamList parameters() const {
    ParamList params;
    for (std::size_t m = 0; m < catalog_.count(); ++m)
      tokenizers_[m].collect(params, "tokenizer." + catalog_.names[m]);
    for (std::size_t m = 0; m < generators_.size(); ++m)
      generators_[m].collect(params, "generator." + catalog_.names[m]);
    for (std::size_t m = 0; m < static_fill_.size(); ++m)
      params.push_back({"static_fill." + catalog_.names[m], static_fill_[m]});
    for (std::size_t i = 0; i < encoder_.size(); ++i)
      encoder_[i].collect(params, "encoder.block" + std::to_string(i));
    if (config_.backbone == BackboneKind::moe) {
      router_.collect(params, "router");
      for (std::size_t e = 0; e < experts_.size(); ++e)
        experts_[e].collect(params, "expert" + std::to_string(e));
    } else {
      shared_expert_.collect(params, "shared_expert");
    }
    if (config_.head == HeadKind::evidence_decomposition) {
      evidence_.collect(params, "evidence");
    } else {
      plain_head_.collect(params, "plain_head");
    }
    return params;
  }

  std::size_t parameter_count() const {
    std::size_t total = 0;
    for (const NamedParam& p : parameters()) total += p.tensor.size();
    return total;
  }

  // Parameter names whose gradients the classification objective reaches;
  // used by the warm-up probe.
  bool is_head_parameter(const std::string& name) const {
    return name.rfind("evidence.", 0) == 0 || name.rfind("plain_head.", 0) == 0;
  }

  nlohmann::ordered_json params_to_json() const {
    nlohmann::ordered_json j;
    for (const NamedParam& p : parameters()) {
      nlohmann::ordered_json entry;
      entry["shape"] = p.tensor.shape();
      entry["values"] = std::vector<double>(p.tensor.values().begin(), p.tensor.values().end());
      j[p.name] = entry;
    }
    return j;
  }

  void params_from_json(const nlohmann::json& j) {
    ParamList params = parameters();
    if (j.size() != params.size())
      throw DataError("checkpoint: expected " + std::to_string(params.size()) + " parameters, found " +
                      std::to_string(j.size()));
    for (NamedParam& p : params) {
      if (!j.contains(p.name)) throw DataError("checkpoint: missing parameter " + p.name);
      const auto& entry = j.at(p.name);
      const auto values = entry.at("values").get<std::vector<double>>();
      if (values.size() != p.tensor.size())
        throw DataError("checkpoint: size mismatch for parameter " + p.name);
      std::copy(values.begin(), values.end(), p.tensor.values_mut().begin());
    }
  }

  std::vector<std::vector<double>> snapshot_values() const {
    std::vector<std::vector<double>> snap;
    for (const NamedParam& p : parameters())
      snap.emplace_back(p.tensor.values().begin(), p.tensor.values().end());
    return snap;
  }

  void restore_values(const std::vector<std::vector<double>>& snap) {
    ParamList params = parameters();
    if (snap.size() != params.size()) throw ContractError("restore_values: snapshot shape mismatch");
    for (std::size_t i = 0; i < params.size(); ++i)
      std::copy(snap[i].begin(), snap[i].end(), params[i].tensor.values_mut().begin());
  }

 private:
  ModelConfig config_;
  ModalityCatalog catalog_;
  std::vector<ModalityTokenizer> tokenizers_;
  std::vector<ConditionalGenerator> generators_;
  std::vector<Tensor> static_fill_;
  std::vector<TransformerEncoderBlock> encoder_;
  Router router_;
  std::vector<Expert> experts_;
  Expert shared_expert_;
  EvidenceHead evidence_;
  LinearLayer plain_head_;
};

}  // namespace cerd
