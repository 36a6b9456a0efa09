#pragma once

// Evidence decomposition head: separates shared cross-modal corroboration
// from modality-specific cues and emits the class logits as an exact
// additive attribution — logits = shared contribution + sum of weighted
// per-modality contributions, by construction.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "cerd/nn.hpp"

namespace cerd {

struct EvidenceReport {
  std::string subject_id;
  std::vector<double> logits;                      // C
  std::vector<double> shared;                      // C
  std::vector<std::vector<double>> contributions;  // per modality, C each
  std::vector<double> weights;                     // per modality
  std::size_t predicted_class = 0;

  // max |logit - shared - sum of contributions| over classes.
  double additive_gap() const {
    double gap = 0.0;
    for (std::size_t c = 0; c < logits.size(); ++c) {
      double acc = shared[c];
      for (const auto& contrib : contributions) acc += contrib[c];
      gap = std::max(gap, std::abs(logits[c] - acc));
    }
    return gap;
  }

  nlohmann::ordered_json to_json(const std::vector<std::string>& modality_names) const {
    nlohmann::ordered_json j;
    j["subject_id"] = subject_id;
    j["logits"] = logits;
    j["shared"] = shared;
    nlohmann::ordered_json contrib;
    for (std::size_t m = 0; m < modality_names.size(); ++m) contrib[modality_names[m]] = contributions[m];
    j["contributions"] = contrib;
    nlohmann::ordered_json w;
    for (std::size_t m = 0; m < modality_names.size(); ++m) w[modality_names[m]] = weights[m];
    j["weights"] = w;
    j["predicted_class"] = predicted_class;
    return j;
  }
};

struct EvidenceHead {
  std::size_t modalities = 0;
  std::size_t classes = 0;
  MultiHeadAttention phi;                   // lightweight extractor, residual added outside
  std::vector<LinearLayer> psi;             // per modality D -> D_u (D_u = D)
  LinearLayer shared_head;                  // D -> C
  std::vector<LinearLayer> modality_heads;  // D_u -> C
  LinearLayer gate1, gate2;                 // |M|*D_u -> D -> |M|
  double temperature = 1.0;

  EvidenceHead() = default;

  EvidenceHead(std::size_t modalities_, std::size_t hidden, std::size_t classes_, std::size_t heads,
               double temperature_, Rng& rng)
      : modalities(modalities_), classes(classes_), phi(hidden, heads, rng),
        shared_head(hidden, classes_, rng), gate1(modalities_ * hidden, hidden, rng),
        gate2(hidden, modalities_, rng), temperature(temperature_) {
    if (temperature <= 0.0) throw ParameterError("evidence head: temperature must be positive");
    for (std::size_t m = 0; m < modalities; ++m) {
      psi.emplace_back(hidden, hidden, rng);
      modality_heads.emplace_back(hidden, classes, rng);
    }
  }

  struct Decomposition {
    Tensor shared;              // s, [D]
    std::vector<Tensor> cues;   // u^m, [D_u] each
  };

  // P~ = p + SelfAttn(p); s = mean over modality rows; u^m = psi_m(p~^m - s).
  Decomposition decompose(const std::vector<Tensor>& fused, const RunContext& ctx = {}) const {
    (void)ctx;
    if (fused.size() != modalities)
      throw ContractError("decompose: expected one fused feature per modality");
    const Tensor stacked = stack_rows(fused);
    const Tensor refined = add(stacked, phi.forward(stacked, stacked));
    Decomposition d;
    d.shared = reduce(refined, Reduce::mean, 0);
    d.cues.reserve(modalities);
    for (std::size_t m = 0; m < modalities; ++m)
      d.cues.push_back(psi[m].forward(sub(row(refined, m), d.shared)));
    return d;
  }

  // w = softmax(MLP(concat u^m) / tau).
  Tensor modality_weights(const std::vector<Tensor>& cues) const {
    const Tensor scores = gate2.forward(smooth_ramp(gate1.forward(concat(cues, 0))));
    return softmax(scores, temperature);
  }

  struct Attribution {
    Tensor logits;                 // on tape, for the loss
    Tensor shared_contribution;    // f_S(s)
    std::vector<Tensor> contributions;  // c^m = w^m f_m(u^m)
    Tensor weights;                // w
  };

  Attribution attribute(const Decomposition& d, const Tensor& weights) const {
    Attribution a;
    a.weights = weights;
    a.shared_contribution = shared_head.forward(d.shared);
    Tensor acc = a.shared_contribution;
    for (std::size_t m = 0; m < modalities; ++m) {
      a.contributions.push_back(scale_by(modality_heads[m].forward(d.cues[m]), pick(weights, m)));
      acc = add(acc, a.contributions[m]);
    }
    a.logits = acc;
    return a;
  }

  EvidenceReport report(const Attribution& a, const std::string& subject_id) const {
    EvidenceReport r;
    r.subject_id = subject_id;
    r.logits.assign(a.logits.values().begin(), a.logits.values().end());
    r.shared.assign(a.shared_contribution.values().begin(), a.shared_contribution.values().end());
    for (const Tensor& c : a.contributions)
      r.contributions.emplace_back(c.values().begin(), c.values().end());
    r.weights.assign(a.weights.values().begin(), a.weights.values().end());
    r.predicted_class = 0;
    for (std::size_t c = 1; c < r.logits.size(); ++c)
      if (r.logits[c] > r.logits[r.predicted_class]) r.predicted_class = c;
    return r;
  }

  void collect(ParamList& out, const std::string& prefix) const {
    phi.collect(out, prefix + ".phi");
    for (std::size_t m = 0; m < modalities; ++m) {
      psi[m].collect(out, prefix + ".psi" + std::to_string(m));
      modality_heads[m].collect(out, prefix + ".head" + std::to_string(m));
    }
    shared_head.collect(out, prefix + ".shared_head");
    gate1.collect(out, prefix + ".gate1");
    gate2.collect(out, prefix + ".gate2");
  }
};

// ---------------------------------------------------------------------------
// Importance summary over a split
// ---------------------------------------------------------------------------

struct ImportanceSummary {
  std::vector<std::string> modalities;
  std::vector<std::string> classes;
  std::vector<double> mean_weight;            // per modality
  std::vector<double> mean_abs_contribution;  // per modality: mean L1 norm of c^m
  std::vector<std::vector<double>> mean_signed;  // per modality, per class

  std::string to_csv() const {
    std::string out = "modality,mean_weight,mean_abs_contribution";
    for (const auto& c : classes) out += ",mean_signed_" + c;
    out += "\n";
    char buf[64];
    for (std::size_t m = 0; m < modalities.size(); ++m) {
      out += modalities[m];
      std::snprintf(buf, sizeof(buf), ",%.17g,%.17g", mean_weight[m], mean_abs_contribution[m]);
      out += buf;
      for (double v : mean_signed[m]) {
        std::snprintf(buf, sizeof(buf), ",%.17g", v);
        out += buf;
      }
      out += "\n";
    }
    return out;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    for (std::size_t m = 0; m < modalities.size(); ++m) {
      nlohmann::ordered_json row;
      row["mean_weight"] = mean_weight[m];
      row["mean_abs_contribution"] = mean_abs_contribution[m];
      nlohmann::ordered_json signed_means;
      for (std::size_t c = 0; c < classes.size(); ++c) signed_means[classes[c]] = mean_signed[m][c];
      row["mean_signed"] = signed_means;
      j[modalities[m]] = row;
    }
    return j;
  }
};

inline ImportanceSummary importance_summary(const std::vector<EvidenceReport>& reports,
                                            const std::vector<std::string>& modality_names,
                                            const std::vector<std::string>& class_names) {
  if (reports.empty()) throw ContractError("importance_summary: empty split");
  const std::size_t M = modality_names.size(), C = class_names.size();
  ImportanceSummary s;
  s.modalities = modality_names;
  s.classes = class_names;
  s.mean_weight.assign(M, 0.0);
  s.mean_abs_contribution.assign(M, 0.0);
  s.mean_signed.assign(M, std::vector<double>(C, 0.0));
  for (const EvidenceReport& r : reports) {
    for (std::size_t m = 0; m < M; ++m) {
      s.mean_weight[m] += r.weights[m];
      double l1 = 0.0;
      for (std::size_t c = 0; c < C; ++c) {
        l1 += std::abs(r.contributions[m][c]);
        s.mean_signed[m][c] += r.contributions[m][c];
      }
      s.mean_abs_contribution[m] += l1;
    }
  }
  const double inv = 1.0 / static_cast<double>(reports.size());
  for (std::size_t m = 0; m < M; ++m) {
    s.mean_weight[m] *= inv;
    s.mean_abs_contribution[m] *= inv;
    for (double& v : s.mean_signed[m]) v *= inv;
  }
  return s;
}

}  // namespace cerd
