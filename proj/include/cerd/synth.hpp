#pragma once

// Synthetic multimodal benchmark. Each subject has a shared latent plus one
// private latent per modality; every modality is an affine read-out of
// (shared, private) plus Gaussian noise, so a missing modality is partially
// predictable from the others through the shared latent. Labels are drawn
// from a softmax over a linear score whose variance is budgeted between the
// shared latent and the private latents by the signal allocation.

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "cerd/data_io.hpp"
#include "cerd/errors.hpp"
#include "cerd/random.hpp"

namespace cerd {

enum class MissingPattern { independent, block };

struct SyntheticSpec {
  std::size_t subjects = 1200;
  std::size_t classes = 3;
  std::vector<std::string> modality_names{"A", "B", "C", "D"};
  std::vector<std::size_t> modality_dims{24, 40, 18, 32};
  std::size_t shared_dim = 8;
  std::vector<std::size_t> private_dims{4, 4, 4, 4};
  std::vector<double> missing_rates{0.35, 0.35, 0.35, 0.35};
  double signal_shared = 0.5;
  std::vector<double> signal_private{0.125, 0.125, 0.125, 0.125};
  double noise_std = 0.1;
  double label_sharpness = 3.0;
  MissingPattern pattern = MissingPattern::independent;
  std::uint64_t seed = 1;

  std::size_t modality_count() const { return modality_names.size(); }

  void validate() const {
    const std::size_t m = modality_count();
    if (m == 0) throw ConfigError("synth: no modalities");
    if (modality_dims.size() != m || private_dims.size() != m || missing_rates.size() != m ||
        signal_private.size() != m)
      throw ConfigError("synth: per-modality field lengths disagree");
    if (subjects < 20) throw ConfigError("synth: need at least 20 subjects");
    if (classes < 2) throw ConfigError("synth: need at least 2 classes");
    if (shared_dim == 0) throw ConfigError("synth: shared_dim must be positive");
    double alloc = signal_shared;
    for (double f : signal_private) {
      if (f < 0.0) throw ConfigError("synth: signal fractions must be non-negative");
      alloc += f;
    }
    if (std::abs(alloc - 1.0) > 1e-9)
      throw ConfigError("synth: signal fractions must sum to 1, got " + std::to_string(alloc));
    double rate_sum = 0.0;
    for (double r : missing_rates) {
      if (r < 0.0 || r >= 1.0) throw ConfigError("synth: missing rates must lie in [0,1)");
      rate_sum += r;
    }
    if (pattern == MissingPattern::block && rate_sum > 1.0)
      throw ConfigError("synth: block pattern requires missing rates summing to at most 1");
    if (noise_std < 0.0) throw ConfigError("synth: noise_std must be non-negative");
    if (label_sharpness <= 0.0) throw ConfigError("synth: label_sharpness must be positive");
  }
};

inline const char* pattern_name(MissingPattern p) {
  return p == MissingPattern::independent ? "independent" : "block";
}

inline MissingPattern pattern_from_name(const std::string& s) {
  if (s == "independent") return MissingPattern::independent;
  if (s == "block") return MissingPattern::block;
  throw ConfigError("unknown missingness pattern '" + s + "'");
}

inline nlohmann::ordered_json synth_spec_to_json(const SyntheticSpec& spec) {
  nlohmann::ordered_json j;
  j["subjects"] = spec.subjects;
  j["classes"] = spec.classes;
  j["modality_names"] = spec.modality_names;
  j["modality_dims"] = spec.modality_dims;
  j["shared_dim"] = spec.shared_dim;
  j["private_dims"] = spec.private_dims;
  j["missing_rates"] = spec.missing_rates;
  j["signal_shared"] = spec.signal_shared;
  j["signal_private"] = spec.signal_private;
  j["noise_std"] = spec.noise_std;
  j["label_sharpness"] = spec.label_sharpness;
  j["pattern"] = pattern_name(spec.pattern);
  j["seed"] = spec.seed;
  return j;
}

inline SyntheticSpec synth_spec_from_json(const nlohmann::json& j) {
  static const std::vector<std::string> known{
      "subjects",      "classes",       "modality_names", "modality_dims", "shared_dim",
      "private_dims",  "missing_rates", "signal_shared",  "signal_private", "noise_std",
      "label_sharpness", "pattern",     "seed"};
  for (const auto& [key, value] : j.items()) {
    (void)value;
    bool ok = false;
    for (const auto& k : known) ok = ok || k == key;
    if (!ok) throw UsageError("synth spec: unknown key '" + key + "'");
  }
  SyntheticSpec spec;
  if (j.contains("subjects")) spec.subjects = j.at("subjects").get<std::size_t>();
  if (j.contains("classes")) spec.classes = j.at("classes").get<std::size_t>();
  if (j.contains("modality_names"))
    spec.modality_names = j.at("modality_names").get<std::vector<std::string>>();
  if (j.contains("modality_dims"))
    spec.modality_dims = j.at("modality_dims").get<std::vector<std::size_t>>();
  if (j.contains("shared_dim")) spec.shared_dim = j.at("shared_dim").get<std::size_t>();
  if (j.contains("private_dims"))
    spec.private_dims = j.at("private_dims").get<std::vector<std::size_t>>();
  if (j.contains("missing_rates"))
    spec.missing_rates = j.at("missing_rates").get<std::vector<double>>();
  if (j.contains("signal_shared")) spec.signal_shared = j.at("signal_shared").get<double>();
  if (j.contains("signal_private"))
    spec.signal_private = j.at("signal_private").get<std::vector<double>>();
  if (j.contains("noise_std")) spec.noise_std = j.at("noise_std").get<double>();
  if (j.contains("label_sharpness")) spec.label_sharpness = j.at("label_sharpness").get<double>();
  if (j.contains("pattern")) spec.pattern = pattern_from_name(j.at("pattern").get<std::string>());
  if (j.contains("seed")) spec.seed = j.at("seed").get<std::uint64_t>();
  return spec;
}

struct PlantedImportance {
  double shared = 0.0;
  std::vector<double> per_modality;
};

inline PlantedImportance planted_importance(const SyntheticSpec& spec) {
  spec.validate();
  return PlantedImportance{spec.signal_shared, spec.signal_private};
}

namespace detail {

// Dataset-level generative parameters, drawn once per seed.
struct SynthParams {
  std::vector<std::vector<double>> class_shared;            // C x shared_dim
  std::vector<std::vector<std::vector<double>>> class_priv; // C x M x dq_m
  std::vector<std::vector<double>> mix;                     // M x (d_m * (shared+dq_m))
};

inline void normalize_to(std::vector<double>& v, double target_norm) {
  double norm = 0.0;
  for (double x : v) norm += x * x;
  norm = std::sqrt(norm);
  if (norm == 0.0) return;
  for (double& x : v) x *= target_norm / norm;
}

inline SynthParams draw_synth_params(const SyntheticSpec& spec, Rng& rng) {
  SynthParams p;
  const std::size_t M = spec.modality_count();
  p.class_shared.resize(spec.classes);
  p.class_priv.resize(spec.classes);
  for (std::size_t c = 0; c < spec.classes; ++c) {
    p.class_shared[c].resize(spec.shared_dim);
    for (double& v : p.class_shared[c]) v = rng.normal(0.0, 1.0);
    // Unit-variance score contributions per latent block, so the realized
    // label-evidence split matches the requested allocation exactly.
    normalize_to(p.class_shared[c], std::sqrt(double(spec.shared_dim)));
    p.class_priv[c].resize(M);
    for (std::size_t m = 0; m < M; ++m) {
      p.class_priv[c][m].resize(spec.private_dims[m]);
      for (double& v : p.class_priv[c][m]) v = rng.normal(0.0, 1.0);
      normalize_to(p.class_priv[c][m], std::sqrt(double(spec.private_dims[m])));
    }
  }
  // Feature variance composition: the shared latent carries most of each
  // modality's content (unit variance per feature) and the private latent a
  // smaller slice, so a missing modality is largely reconstructable from the
  // others while still holding modality-unique evidence.
  constexpr double kPrivateFeatureStd = 0.5;
  p.mix.resize(M);
  for (std::size_t m = 0; m < M; ++m) {
    const std::size_t latent = spec.shared_dim + spec.private_dims[m];
    p.mix[m].resize(spec.modality_dims[m] * latent);
    for (std::size_t r = 0; r < spec.modality_dims[m]; ++r)
      for (std::size_t c = 0; c < latent; ++c) {
        const double s = c < spec.shared_dim
                             ? 1.0 / std::sqrt(double(spec.shared_dim))
                             : kPrivateFeatureStd / std::sqrt(double(spec.private_dims[m]));
        p.mix[m][r * latent + c] = rng.normal(0.0, s);
      }
  }
  return p;
}

inline std::vector<double> class_scores(const SyntheticSpec& spec, const SynthParams& p,
                                        const std::vector<double>& shared,
                                        const std::vector<std::vector<double>>& priv) {
  std::vector<double> scores(spec.classes, 0.0);
  for (std::size_t c = 0; c < spec.classes; ++c) {
    double s = 0.0;
    double dot = 0.0;
    for (std::size_t j = 0; j < spec.shared_dim; ++j) dot += p.class_shared[c][j] * shared[j];
    s += std::sqrt(spec.signal_shared / double(spec.shared_dim)) * dot;
    for (std::size_t m = 0; m < spec.modality_count(); ++m) {
      if (spec.private_dims[m] == 0 || spec.signal_private[m] == 0.0) continue;
      double dm = 0.0;
      for (std::size_t j = 0; j < spec.private_dims[m]; ++j) dm += p.class_priv[c][m][j] * priv[m][j];
      s += std::sqrt(spec.signal_private[m] / double(spec.private_dims[m])) * dm;
    }
    scores[c] = spec.label_sharpness * s;
  }
  return scores;
}

inline std::size_t sample_categorical(const std::vector<double>& scores, Rng& rng) {
  double mx = scores[0];
  for (double s : scores) mx = std::max(mx, s);
  std::vector<double> p(scores.size());
  double z = 0.0;
  for (std::size_t c = 0; c < scores.size(); ++c) {
    p[c] = std::exp(scores[c] - mx);
    z += p[c];
  }
  double u = rng.uniform(0.0, 1.0) * z;
  for (std::size_t c = 0; c < scores.size(); ++c) {
    u -= p[c];
    if (u <= 0.0) return c;
  }
  return scores.size() - 1;
}

}  // namespace detail

inline Dataset generate(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const std::size_t M = spec.modality_count();
  const detail::SynthParams params = detail::draw_synth_params(spec, rng);

  Dataset ds;
  ds.modality_names = spec.modality_names;
  ds.modality_dims = spec.modality_dims;
  for (std::size_t c = 0; c < spec.classes; ++c) ds.class_names.push_back("class" + std::to_string(c));
  ds.features.resize(M);
  for (std::size_t m = 0; m < M; ++m)
    ds.features[m].assign(spec.subjects * spec.modality_dims[m],
                          std::numeric_limits<double>::quiet_NaN());
  ds.mask.assign(spec.subjects * M, 0);
  ds.labels.resize(spec.subjects);
  ds.subject_ids.resize(spec.subjects);

  int id_width = 1;
  for (std::size_t n = spec.subjects; n >= 10; n /= 10) ++id_width;

  // Dataset-wide resample budget: feasible specs use a handful of redraws,
  // near-total missingness exhausts it quickly.
  std::size_t resamples_left = 1000;

  for (std::size_t n = 0; n < spec.subjects; ++n) {
    std::vector<double> shared(spec.shared_dim);
    for (double& v : shared) v = rng.normal(0.0, 1.0);
    std::vector<std::vector<double>> priv(M);
    for (std::size_t m = 0; m < M; ++m) {
      priv[m].resize(spec.private_dims[m]);
      for (double& v : priv[m]) v = rng.normal(0.0, 1.0);
    }

    // Label before missingness: missingness is independent of everything.
    ds.labels[n] = detail::sample_categorical(detail::class_scores(spec, params, shared, priv), rng);

    std::vector<std::uint8_t> observed(M, 1);
    if (spec.pattern == MissingPattern::independent) {
      while (true) {
        bool any = false;
        for (std::size_t m = 0; m < M; ++m) {
          observed[m] = rng.bernoulli(spec.missing_rates[m]) ? 0 : 1;
          any = any || observed[m];
        }
        if (any) break;
        if (resamples_left-- == 0)
          throw ConfigError(
              "synth: missing rates leave subjects with no modality; resample budget of 1000 "
              "exhausted");
      }
    } else {
      // Block pattern: drop one whole modality with probability rho_m, else
      // keep full coverage.
      const double u = rng.uniform(0.0, 1.0);
      double acc = 0.0;
      for (std::size_t m = 0; m < M; ++m) {
        acc += spec.missing_rates[m];
        if (u < acc) {
          observed[m] = 0;
          break;
        }
      }
      if (M == 1 && observed[0] == 0) observed[0] = 1;
    }

    for (std::size_t m = 0; m < M; ++m) {
      ds.mask[n * M + m] = observed[m];
      if (!observed[m]) {
        // Raw row stays all-sentinel; still consume the noise stream so the
        // values of other subjects do not depend on this subject's mask.
        for (std::size_t c = 0; c < spec.modality_dims[m]; ++c) rng.normal(0.0, 1.0);
        continue;
      }
      const std::size_t d = spec.modality_dims[m];
      const std::size_t latent = spec.shared_dim + spec.private_dims[m];
      for (std::size_t r = 0; r < d; ++r) {
        double v = 0.0;
        for (std::size_t j = 0; j < spec.shared_dim; ++j)
          v += params.mix[m][r * latent + j] * shared[j];
        for (std::size_t j = 0; j < spec.private_dims[m]; ++j)
          v += params.mix[m][r * latent + spec.shared_dim + j] * priv[m][j];
        ds.features[m][n * d + r] = v + spec.noise_std * rng.normal(0.0, 1.0);
      }
    }

    char buf[32];
    std::snprintf(buf, sizeof(buf), "S%0*zu", id_width, n + 1);
    ds.subject_ids[n] = buf;
  }

  ds.splits = split_stratified(ds.labels, spec.classes, {0.7, 0.15, 0.15}, spec.seed);
  return ds;
}

// Monte-Carlo estimate of the label marginals the spec implies; diagnostic
// for distribution checks.
inline std::vector<double> implied_class_marginals(const SyntheticSpec& spec, std::size_t samples) {
  spec.validate();
  Rng rng(derive_seed(spec.seed, "marginals"));
  Rng param_rng(spec.seed);
  const detail::SynthParams params = detail::draw_synth_params(spec, param_rng);
  std::vector<double> marginal(spec.classes, 0.0);
  for (std::size_t s = 0; s < samples; ++s) {
    std::vector<double> shared(spec.shared_dim);
    for (double& v : shared) v = rng.normal(0.0, 1.0);
    std::vector<std::vector<double>> priv(spec.modality_count());
    for (std::size_t m = 0; m < spec.modality_count(); ++m) {
      priv[m].resize(spec.private_dims[m]);
      for (double& v : priv[m]) v = rng.normal(0.0, 1.0);
    }
    const auto scores = detail::class_scores(spec, params, shared, priv);
    double mx = scores[0];
    for (double v : scores) mx = std::max(mx, v);
    double z = 0.0;
    std::vector<double> p(spec.classes);
    for (std::size_t c = 0; c < spec.classes; ++c) {
      p[c] = std::exp(scores[c] - mx);
      z += p[c];
    }
    for (std::size_t c = 0; c < spec.classes; ++c) marginal[c] += p[c] / z;
  }
  for (double& v : marginal) v /= static_cast<double>(samples);
  return marginal;
}

}  // namespace cerd
