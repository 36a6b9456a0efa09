#pragma once

// Modality tokenization: maps each raw feature vector into the shared
// P x D token space and carries the availability mask alongside. Missing
// modalities are explicit gaps; their sentinel-valued raw rows are never
// read, so corrupting sentinel entries cannot change any output.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "cerd/errors.hpp"
#include "cerd/nn.hpp"
#include "cerd/tensor.hpp"

namespace cerd {

struct ModalityCatalog {
  std::vector<std::string> names;  // fixed order
  std::vector<std::size_t> dims;   // raw feature width per modality
  std::size_t tokens = 0;          // P
  std::size_t hidden = 0;          // D

  std::size_t count() const { return names.size(); }

  void validate() const {
    if (names.size() != dims.size()) throw ConfigError("catalog: names/dims length mismatch");
    if (names.empty()) throw ConfigError("catalog: no modalities");
    if (tokens == 0 || hidden == 0) throw ConfigError("catalog: P and D must be positive");
    for (std::size_t i = 0; i < names.size(); ++i)
      for (std::size_t j = i + 1; j < names.size(); ++j)
        if (names[i] == names[j]) throw ConfigError("catalog: duplicate modality name " + names[i]);
  }
};

// One subject's model-ready inputs: standardized feature vectors for the
// observed modalities, the availability mask, and the label.
struct SubjectView {
  std::vector<Tensor> features;     // rank-1 [d_m]; default-constructed when missing
  std::vector<std::uint8_t> mask;   // o_n
  std::size_t label = 0;
  std::string id;

  std::size_t observed_count() const {
    std::size_t k = 0;
    for (std::uint8_t o : mask) k += o;
    return k;
  }
  bool fully_observed() const { return observed_count() == mask.size(); }
};

enum class Provenance : std::uint8_t { missing, observed, reconstructed, static_filled, zero_filled };

inline const char* provenance_name(Provenance p) {
  switch (p) {
    case Provenance::missing: return "missing";
    case Provenance::observed: return "observed";
    case Provenance::reconstructed: return "reconstructed";
    case Provenance::static_filled: return "static_filled";
    case Provenance::zero_filled: return "zero_filled";
  }
  return "?";
}

struct TokenSet {
  std::vector<Tensor> blocks;          // per modality, P x D when present
  std::vector<Provenance> provenance;  // per modality

  bool has_gap() const {
    for (Provenance p : provenance)
      if (p == Provenance::missing) return true;
    return false;
  }

  std::size_t gap_count() const {
    std::size_t k = 0;
    for (Provenance p : provenance) k += (p == Provenance::missing) ? 1 : 0;
    return k;
  }

  // Mask implied by provenance; must round-trip the ingestion mask.
  std::vector<std::uint8_t> observed_mask() const {
    std::vector<std::uint8_t> m(provenance.size());
    for (std::size_t i = 0; i < provenance.size(); ++i)
      m[i] = provenance[i] == Provenance::observed ? 1 : 0;
    return m;
  }
};

// One affine layer d_m -> P*D plus reshape, plus a learned modality-type
// embedding added to every token row.
struct ModalityTokenizer {
  std::string modality;
  std::size_t tokens = 0;
  std::size_t hidden = 0;
  LinearLayer proj;
  Tensor type_embedding;  // [D]

  ModalityTokenizer() = default;

  ModalityTokenizer(std::string modality_, std::size_t raw_dim, std::size_t tokens_,
                    std::size_t hidden_, Rng& rng)
      : modality(std::move(modality_)), tokens(tokens_), hidden(hidden_),
        proj(raw_dim, tokens_ * hidden_, rng) {
    type_embedding = Tensor::zeros({hidden}, true);
    fill_normal(type_embedding, 0.0, 0.02, rng);
  }

  Tensor forward(const Tensor& raw) const {
    if (raw.rank() != 1 || raw.dim(0) != proj.in_features())
      throw DimensionError("tokenizer[" + modality + "]: expected " +
                           std::to_string(proj.in_features()) + " features, got " +
                           shape_str(raw.shape()));
    for (double v : raw.values())
      if (std::isnan(v))
        throw DataError("tokenizer[" + modality + "]: sentinel entry in an observed row");
    return add_rowvec(reshape(proj.forward(raw), {tokens, hidden}), type_embedding);
  }

  void collect(ParamList& out, const std::string& prefix) const {
    proj.collect(out, prefix + ".proj");
    out.push_back({prefix + ".type_embedding", type_embedding});
  }
};

inline std::vector<ModalityTokenizer> make_tokenizers(const ModalityCatalog& catalog, Rng& rng) {
  catalog.validate();
  std::vector<ModalityTokenizer> ts;
  ts.reserve(catalog.count());
  for (std::size_t m = 0; m < catalog.count(); ++m)
    ts.emplace_back(catalog.names[m], catalog.dims[m], catalog.tokens, catalog.hidden, rng);
  return ts;
}

// Tokenizes the observed modalities of one subject; missing modalities stay
// explicit gaps with provenance `missing`.
inline TokenSet build_token_set(const std::vector<ModalityTokenizer>& tokenizers,
                                const SubjectView& subject) {
  if (subject.mask.size() != tokenizers.size())
    throw DimensionError("build_token_set: mask width != modality count");
  if (subject.observed_count() == 0)
    throw DataError("subject " + subject.id + ": zero observed modalities");
  TokenSet ts;
  ts.blocks.resize(tokenizers.size());
  ts.provenance.assign(tokenizers.size(), Provenance::missing);
  for (std::size_t m = 0; m < tokenizers.size(); ++m) {
    if (!subject.mask[m]) continue;
    ts.blocks[m] = tokenizers[m].forward(subject.features[m]);
    ts.provenance[m] = Provenance::observed;
  }
  return ts;
}

}  // namespace cerd
