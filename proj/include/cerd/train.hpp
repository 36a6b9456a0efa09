#pragma once

// End-to-end training: joint loss (cross-entropy + weighted masked
// reconstruction), Adam, a reconstruction-only warm-up stage for the CER
// variants, best-validation-AUC checkpointing, and the Table-style ablation
// runner. Fully deterministic given (config, seed, data).

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cerd/data_io.hpp"
#include "cerd/metrics.hpp"
#include "cerd/model.hpp"
#include "cerd/optim.hpp"

namespace cerd {

enum class WarmupMode { reconstruction, lr_ramp };

inline const char* warmup_mode_name(WarmupMode m) {
  return m == WarmupMode::reconstruction ? "reconstruction" : "lr_ramp";
}

inline WarmupMode warmup_mode_from_name(const std::string& s) {
  if (s == "reconstruction") return WarmupMode::reconstruction;
  if (s == "lr_ramp") return WarmupMode::lr_ramp;
  throw ConfigError("unknown warmup mode '" + s + "'");
}

inline ReconNorm recon_norm_from_name(const std::string& s) {
  if (s == "mse") return ReconNorm::mse;
  if (s == "l1") return ReconNorm::l1;
  throw ConfigError("unknown reconstruction norm '" + s + "'");
}

inline const char* recon_norm_name(ReconNorm n) { return n == ReconNorm::mse ? "mse" : "l1"; }

struct TrainConfig {
  double learning_rate = 1e-4;
  std::size_t batch_size = 8;
  std::size_t epochs = 50;
  std::size_t warmup_epochs = 5;
  double dropout = 0.5;
  std::size_t hidden_dim = 128;
  std::size_t tokens = 16;
  std::size_t experts = 16;
  std::size_t top_k = 4;
  std::size_t heads = 4;
  std::size_t encoder_depth = 2;
  std::size_t generator_depth = 2;
  double router_temperature = 1.0;
  double attribution_temperature = 1.0;
  double recon_weight = 1.0;  // lambda
  ReconNorm recon_norm = ReconNorm::mse;
  bool exhaustive_masking = false;
  Completion completion = Completion::cer;
  HeadKind head = HeadKind::evidence_decomposition;
  BackboneKind backbone = BackboneKind::moe;
  bool sequential_completion = false;
  bool literal_expert_sum = false;
  bool detach_completion = false;
  double load_balance_weight = 0.0;
  WarmupMode warmup_mode = WarmupMode::reconstruction;
  bool column_fill = false;  // median-fill sparse entries of observed rows at load
  std::uint64_t seed = 1;
  std::uint64_t split_seed = 4242;
  std::array<double, 3> split_ratios{0.7, 0.15, 0.15};

  ModelConfig model_config(std::size_t classes) const {
    ModelConfig mc;
    mc.hidden_dim = hidden_dim;
    mc.tokens = tokens;
    mc.experts = experts;
    mc.top_k = top_k;
    mc.heads = heads;
    mc.encoder_depth = encoder_depth;
    mc.generator_depth = generator_depth;
    mc.classes = classes;
    mc.router_temperature = router_temperature;
    mc.attribution_temperature = attribution_temperature;
    mc.completion = completion;
    mc.head = head;
    mc.backbone = backbone;
    mc.sequential_completion = sequential_completion;
    mc.literal_expert_sum = literal_expert_sum;
    mc.detach_completion = detach_completion;
    return mc;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["learning_rate"] = learning_rate;
    j["batch_size"] = batch_size;
    j["epochs"] = epochs;
    j["warmup_epochs"] = warmup_epochs;
    j["dropout"] = dropout;
    j["hidden_dim"] = hidden_dim;
    j["tokens"] = tokens;
    j["experts"] = experts;
    j["top_k"] = top_k;
    j["heads"] = heads;
    j["encoder_depth"] = encoder_depth;
    j["generator_depth"] = generator_depth;
    j["router_temperature"] = router_temperature;
    j["attribution_temperature"] = attribution_temperature;
    j["recon_weight"] = recon_weight;
    j["recon_norm"] = recon_norm_name(recon_norm);
    j["exhaustive_masking"] = exhaustive_masking;
    j["completion"] = completion_name(completion);
    j["head"] = head_name(head);
    j["backbone"] = backbone_name(backbone);
    j["sequential_completion"] = sequential_completion;
    j["literal_expert_sum"] = literal_expert_sum;
    j["detach_completion"] = detach_completion;
    j["load_balance_weight"] = load_balance_weight;
    j["warmup_mode"] = warmup_mode_name(warmup_mode);
    j["column_fill"] = column_fill;
    j["seed"] = seed;
    j["split_seed"] = split_seed;
    j["split_ratios"] = split_ratios;
    return j;
  }

  static TrainConfig from_json(const nlohmann::json& j);
};

// Cross-entropy of a logits batch against labels, plus the weighted
// reconstruction term.
inline Tensor total_loss(const std::vector<Tensor>& logits, const std::vector<std::size_t>& labels,
                         const Tensor& recon_loss, double recon_weight) {
  if (logits.size() != labels.size() || logits.empty())
    throw ContractError("total_loss: logits/labels size mismatch or empty");
  Tensor ce = Tensor::scalar(0.0);
  for (std::size_t i = 0; i < logits.size(); ++i)
    ce = add(ce, cross_entropy(logits[i], labels[i]));
  ce = scale(ce, 1.0 / static_cast<double>(logits.size()));
  if (recon_weight == 0.0) return ce;
  return add(ce, scale(recon_loss, recon_weight));
}

struct EpochRecord {
  std::size_t epoch = 0;
  bool warmup = false;
  double train_loss = 0.0;
  double recon_loss = 0.0;
  double cls_loss = 0.0;
  double val_acc = 0.0;
  double val_f1 = 0.0;
  double val_auc = 0.0;
  std::vector<std::uint64_t> expert_load;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["epoch"] = epoch;
    j["warmup"] = warmup;
    j["train_loss"] = train_loss;
    j["recon_loss"] = recon_loss;
    j["cls_loss"] = cls_loss;
    j["val_acc"] = val_acc;
    j["val_f1"] = val_f1;
    j["val_auc"] = val_auc;
    j["expert_load"] = expert_load;
    return j;
  }
};

struct Checkpoint {
  static constexpr int kFormatVersion = 1;
  TrainConfig config;
  std::vector<std::string> modality_names;
  std::vector<std::size_t> modality_dims;
  std::vector<std::string> class_names;
  Standardizer standardizer;
  nlohmann::ordered_json params;

  CerdModel instantiate() const {
    CerdModel model(modality_names, modality_dims, config.model_config(class_names.size()),
                    config.seed);
    model.params_from_json(params);
    return model;
  }

  void check_compatible(const Dataset& ds) const {
    if (ds.modality_names != modality_names || ds.modality_dims != modality_dims)
      throw DataError("checkpoint: modality catalog does not match the dataset");
    if (ds.class_names != class_names)
      throw DataError("checkpoint: class list does not match the dataset");
  }

  void save(const std::filesystem::path& path) const {
    nlohmann::ordered_json j;
    j["format_version"] = kFormatVersion;
    j["config"] = config.to_json();
    j["modality_names"] = modality_names;
    j["modality_dims"] = modality_dims;
    j["class_names"] = class_names;
    j["standardizer"] = {{"mean", standardizer.mean}, {"stddev", standardizer.stddev}};
    j["params"] = params;
    std::ofstream out(path);
    if (!out) throw DataError("checkpoint: cannot write " + path.string());
    out << j.dump() << "\n";
  }

  static Checkpoint load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("checkpoint: cannot open " + path.string());
    nlohmann::ordered_json j;
    try {
      in >> j;
    } catch (const std::exception& e) {
      throw DataError("checkpoint: invalid JSON: " + std::string(e.what()));
    }
    if (!j.contains("format_version") || j.at("format_version").get<int>() != kFormatVersion)
      throw DataError("checkpoint: unsupported format version");
    Checkpoint ckpt;
    ckpt.config = TrainConfig::from_json(j.at("config"));
    ckpt.modality_names = j.at("modality_names").get<std::vector<std::string>>();
    ckpt.modality_dims = j.at("modality_dims").get<std::vector<std::size_t>>();
    ckpt.class_names = j.at("class_names").get<std::vector<std::string>>();
    ckpt.standardizer.mean = j.at("standardizer").at("mean").get<std::vector<std::vector<double>>>();
    ckpt.standardizer.stddev =
        j.at("standardizer").at("stddev").get<std::vector<std::vector<double>>>();
    ckpt.params = j.at("params");
    return ckpt;
  }
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<EpochRecord> epochs;
  EvalMetrics best_val;          // validation metrics of the retained checkpoint
  std::size_t best_epoch = 0;    // 1-based; 0 when no epoch ran
  EvalMetrics test;
  std::size_t parameter_count = 0;
};

// Evaluation-mode scores (softmax probabilities) for a list of subjects.
inline std::vector<double> predict_scores(const CerdModel& model,
                                          const std::vector<SubjectView>& views,
                                          const std::vector<std::size_t>& rows) {
  NoGradGuard guard;
  const std::size_t classes = model.config().classes;
  std::vector<double> scores;
  scores.reserve(rows.size() * classes);
  for (std::size_t n : rows) {
    const auto out = model.forward(views[n], eval_context());
    const Tensor p = softmax(out.logits, 1.0);
    scores.insert(scores.end(), p.values().begin(), p.values().end());
  }
  return scores;
}

inline EvalMetrics evaluate_split(const CerdModel& model, const std::vector<SubjectView>& views,
                                  const std::vector<std::size_t>& rows,
                                  const std::vector<std::size_t>& labels) {
  if (rows.empty()) throw ContractError("evaluate: empty split");
  std::vector<std::size_t> split_labels;
  split_labels.reserve(rows.size());
  for (std::size_t n : rows) split_labels.push_back(labels[n]);
  return compute_metrics(split_labels, predict_scores(model, views, rows),
                         model.config().classes);
}

inline std::vector<SubjectView> build_views(const Dataset& ds, const Standardizer& st) {
  std::vector<SubjectView> views;
  views.reserve(ds.size());
  for (std::size_t n = 0; n < ds.size(); ++n) views.push_back(subject_view(ds, st, n));
  return views;
}

inline TrainResult run_training(const TrainConfig& config, const Dataset& ds,
                                std::ostream* log = nullptr) {
  if (ds.class_count() < 2) throw DataError("train: dataset needs at least 2 classes");

  const SplitIndices splits =
      split_stratified(ds.labels, ds.class_count(), config.split_ratios, config.split_seed);
  const Standardizer standardizer = Standardizer::fit(ds, splits.train);
  const std::vector<SubjectView> views = build_views(ds, standardizer);

  CerdModel model(ds.modality_names, ds.modality_dims, config.model_config(ds.class_count()),
                  config.seed);

  const std::vector<std::size_t> train_full = ds.full_coverage(splits.train);
  const bool recon_active = config.completion == Completion::cer;
  const bool recon_warmup = recon_active && config.warmup_mode == WarmupMode::reconstruction &&
                            config.warmup_epochs > 0;
  if (recon_active && train_full.empty())
    throw ConfigError("train: CER completion needs at least one fully observed training subject");

  Adam adam(model.parameters(), AdamConfig{.learning_rate = config.learning_rate});
  Rng shuffle_rng(derive_seed(config.seed, "shuffle"));
  Rng mask_rng(derive_seed(config.seed, "masking"));
  Rng dropout_rng(derive_seed(config.seed, "dropout"));

  TrainResult result;
  result.parameter_count = model.parameter_count();

  std::vector<std::vector<double>> best_values = model.snapshot_values();
  double best_auc = -1.0;

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const bool warmup_epoch = recon_warmup && epoch <= config.warmup_epochs;
    if (config.warmup_mode == WarmupMode::lr_ramp && config.warmup_epochs > 0) {
      const double ramp = std::min(1.0, static_cast<double>(epoch) /
                                            static_cast<double>(config.warmup_epochs));
      adam.set_learning_rate(config.learning_rate * ramp);
    }

    EpochRecord record;
    record.epoch = epoch;
    record.warmup = warmup_epoch;
    record.expert_load.assign(config.backbone == BackboneKind::moe ? config.experts : 0, 0);

    RunContext train_ctx{true, config.dropout, &dropout_rng};
    double loss_sum = 0.0, recon_sum = 0.0, cls_sum = 0.0;
    std::size_t batches = 0;

    std::vector<std::size_t> order = warmup_epoch ? train_full : splits.train;
    std::shuffle(order.begin(), order.end(), shuffle_rng.engine());

    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(start + config.batch_size, order.size());
      GradTape tape;

      // Reconstruction term: full-coverage members of the batch, one
      // uniformly sampled target each (all targets when exhaustive).
      Tensor recon = Tensor::scalar(0.0);
      bool have_recon = false;
      if (recon_active) {
        std::vector<const SubjectView*> full_members;
        for (std::size_t i = start; i < end; ++i)
          if (views[order[i]].fully_observed()) full_members.push_back(&views[order[i]]);
        if (!full_members.empty()) {
          const MaskingPlan plan = MaskingPlan::draw(full_members.size(), ds.modality_count(),
                                                     config.exhaustive_masking, mask_rng);
          recon = masked_reconstruction_loss(model.tokenizers(), model.generators(), full_members,
                                             plan, config.recon_norm, train_ctx);
          have_recon = true;
        }
      }

      Tensor loss;
      double cls_value = 0.0;
      if (warmup_epoch) {
        if (!have_recon) continue;
        loss = recon;
      } else {
        std::vector<Tensor> logits;
        std::vector<std::size_t> labels;
        std::vector<Tensor> gate_distributions;
        for (std::size_t i = start; i < end; ++i) {
          const auto out = model.forward(views[order[i]], train_ctx);
          logits.push_back(out.logits);
          labels.push_back(views[order[i]].label);
          if (out.decision) {
            gate_distributions.push_back(out.decision->pi);
            for (std::size_t e : out.decision->selected) ++record.expert_load[e];
          }
        }
        loss = total_loss(logits, labels, recon, have_recon ? config.recon_weight : 0.0);
        if (config.load_balance_weight > 0.0 && !gate_distributions.empty())
          loss = add(loss, scale(load_balance_loss(gate_distributions), config.load_balance_weight));
        {
          NoGradGuard guard;
          cls_value = total_loss(logits, labels, Tensor::scalar(0.0), 0.0).value();
        }
      }

      tape.backward(loss);
      adam.step();

      loss_sum += loss.value();
      recon_sum += have_recon ? recon.value() : 0.0;
      cls_sum += cls_value;
      ++batches;
    }

    record.train_loss = batches ? loss_sum / static_cast<double>(batches) : 0.0;
    record.recon_loss = batches ? recon_sum / static_cast<double>(batches) : 0.0;
    record.cls_loss = batches ? cls_sum / static_cast<double>(batches) : 0.0;

    const EvalMetrics val = evaluate_split(model, views, splits.val, ds.labels);
    record.val_acc = val.accuracy;
    record.val_f1 = val.macro_f1;
    record.val_auc = val.macro_auc;
    result.epochs.push_back(record);

    // Best-validation-AUC checkpoint; among equal AUCs the most recent
    // (most trained) snapshot wins.
    if (val.macro_auc >= best_auc) {
      best_auc = val.macro_auc;
      best_values = model.snapshot_values();
      result.best_val = val;
      result.best_epoch = epoch;
    }

    if (log != nullptr)
      *log << "epoch " << epoch << (warmup_epoch ? " [warmup]" : "") << " loss "
           << record.train_loss << " val_auc " << record.val_auc << "\n";
  }

  model.restore_values(best_values);
  result.test = evaluate_split(model, views, splits.test, ds.labels);

  result.checkpoint.config = config;
  result.checkpoint.modality_names = ds.modality_names;
  result.checkpoint.modality_dims = ds.modality_dims;
  result.checkpoint.class_names = ds.class_names;
  result.checkpoint.standardizer = standardizer;
  result.checkpoint.params = model.params_to_json();
  return result;
}

// ---------------------------------------------------------------------------
// Ablation
// ---------------------------------------------------------------------------

struct AblationRun {
  std::string variant;
  std::uint64_t seed = 0;
  EvalMetrics test;
  std::size_t parameter_count = 0;
};

struct AblationTable {
  std::vector<AblationRun> runs;
  std::vector<std::string> variants;

  double median(const std::string& variant, double EvalMetrics::*field) const {
    std::vector<double> xs;
    for (const AblationRun& r : runs)
      if (r.variant == variant) xs.push_back(r.test.*field);
    if (xs.empty()) throw ContractError("ablation: no runs for variant " + variant);
    std::sort(xs.begin(), xs.end());
    const std::size_t n = xs.size();
    return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
  }

  std::string to_csv() const {
    std::string out = "variant,median_acc,median_f1,median_auc,parameters\n";
    char buf[128];
    for (const std::string& v : variants) {
      std::size_t params = 0;
      for (const AblationRun& r : runs)
        if (r.variant == v) params = r.parameter_count;
      std::snprintf(buf, sizeof(buf), "%s,%.17g,%.17g,%.17g,%zu\n", v.c_str(),
                    median(v, &EvalMetrics::accuracy), median(v, &EvalMetrics::macro_f1),
                    median(v, &EvalMetrics::macro_auc), params);
      out += buf;
    }
    return out;
  }

  std::string runs_to_csv() const {
    std::string out = "variant,seed,acc,f1,auc,parameters\n";
    char buf[160];
    for (const AblationRun& r : runs) {
      std::snprintf(buf, sizeof(buf), "%s,%llu,%.17g,%.17g,%.17g,%zu\n", r.variant.c_str(),
                    static_cast<unsigned long long>(r.seed), r.test.accuracy, r.test.macro_f1,
                    r.test.macro_auc, r.parameter_count);
      out += buf;
    }
    return out;
  }
};

inline TrainConfig ablation_variant(const TrainConfig& base, const std::string& name) {
  TrainConfig cfg = base;
  if (name == "full") {
    cfg.completion = Completion::cer;
    cfg.head = HeadKind::evidence_decomposition;
    cfg.backbone = BackboneKind::moe;
  } else if (name == "no_ed") {
    cfg.completion = Completion::cer;
    cfg.head = HeadKind::plain_linear;
    cfg.backbone = BackboneKind::moe;
  } else if (name == "static_fill") {
    cfg.completion = Completion::static_fill;
    cfg.head = HeadKind::evidence_decomposition;
    cfg.backbone = BackboneKind::moe;
  } else if (name == "no_cer") {
    cfg.completion = Completion::zero_fill;
    cfg.head = HeadKind::evidence_decomposition;
    cfg.backbone = BackboneKind::moe;
  } else if (name == "no_moe") {
    cfg.completion = Completion::cer;
    cfg.head = HeadKind::evidence_decomposition;
    cfg.backbone = BackboneKind::shared_ffn;
  } else {
    throw UsageError("unknown ablation variant '" + name + "'");
  }
  return cfg;
}

inline const std::vector<std::string>& ablation_variant_names() {
  static const std::vector<std::string> names{"full", "no_ed", "static_fill", "no_cer", "no_moe"};
  return names;
}

// Five variants x `seeds` runs with identical seed sets across variants.
inline AblationTable run_ablation(const TrainConfig& base, const Dataset& ds, std::size_t seeds,
                                  std::ostream* log = nullptr) {
  if (seeds == 0) throw UsageError("ablation: need at least one seed");
  AblationTable table;
  table.variants = ablation_variant_names();
  for (const std::string& variant : table.variants) {
    for (std::size_t i = 0; i < seeds; ++i) {
      TrainConfig cfg = ablation_variant(base, variant);
      cfg.seed = base.seed + i;
      if (log != nullptr) *log << "[ablation] " << variant << " seed " << cfg.seed << "\n";
      const TrainResult result = run_training(cfg, ds);
      table.runs.push_back({variant, cfg.seed, result.test, result.parameter_count});
      if (log != nullptr)
        *log << "[ablation] " << variant << " seed " << cfg.seed << " test_auc "
             << result.test.macro_auc << "\n";
    }
  }
  return table;
}

inline TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  static const std::vector<std::string> known{
      "learning_rate", "batch_size", "epochs", "warmup_epochs", "dropout", "hidden_dim",
      "tokens", "experts", "top_k", "heads", "encoder_depth", "generator_depth",
      "router_temperature", "attribution_temperature", "recon_weight", "recon_norm",
      "exhaustive_masking", "completion", "head", "backbone", "sequential_completion",
      "literal_expert_sum", "detach_completion", "load_balance_weight", "warmup_mode",
      "column_fill", "seed", "split_seed", "split_ratios"};
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (std::find(known.begin(), known.end(), key) == known.end())
      throw UsageError("config: unknown key '" + key + "'");
  }
  if (j.contains("learning_rate")) c.learning_rate = j.at("learning_rate").get<double>();
  if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<std::size_t>();
  if (j.contains("epochs")) c.epochs = j.at("epochs").get<std::size_t>();
  if (j.contains("warmup_epochs")) c.warmup_epochs = j.at("warmup_epochs").get<std::size_t>();
  if (j.contains("dropout")) c.dropout = j.at("dropout").get<double>();
  if (j.contains("hidden_dim")) c.hidden_dim = j.at("hidden_dim").get<std::size_t>();
  if (j.contains("tokens")) c.tokens = j.at("tokens").get<std::size_t>();
  if (j.contains("experts")) c.experts = j.at("experts").get<std::size_t>();
  if (j.contains("top_k")) c.top_k = j.at("top_k").get<std::size_t>();
  if (j.contains("heads")) c.heads = j.at("heads").get<std::size_t>();
  if (j.contains("encoder_depth")) c.encoder_depth = j.at("encoder_depth").get<std::size_t>();
  if (j.contains("generator_depth")) c.generator_depth = j.at("generator_depth").get<std::size_t>();
  if (j.contains("router_temperature")) c.router_temperature = j.at("router_temperature").get<double>();
  if (j.contains("attribution_temperature"))
    c.attribution_temperature = j.at("attribution_temperature").get<double>();
  if (j.contains("recon_weight")) c.recon_weight = j.at("recon_weight").get<double>();
  if (j.contains("recon_norm")) c.recon_norm = recon_norm_from_name(j.at("recon_norm").get<std::string>());
  if (j.contains("exhaustive_masking")) c.exhaustive_masking = j.at("exhaustive_masking").get<bool>();
  if (j.contains("completion")) c.completion = completion_from_name(j.at("completion").get<std::string>());
  if (j.contains("head")) c.head = head_from_name(j.at("head").get<std::string>());
  if (j.contains("backbone")) c.backbone = backbone_from_name(j.at("backbone").get<std::string>());
  if (j.contains("sequential_completion"))
    c.sequential_completion = j.at("sequential_completion").get<bool>();
  if (j.contains("literal_expert_sum")) c.literal_expert_sum = j.at("literal_expert_sum").get<bool>();
  if (j.contains("detach_completion")) c.detach_completion = j.at("detach_completion").get<bool>();
  if (j.contains("load_balance_weight")) c.load_balance_weight = j.at("load_balance_weight").get<double>();
  if (j.contains("warmup_mode")) c.warmup_mode = warmup_mode_from_name(j.at("warmup_mode").get<std::string>());
  if (j.contains("column_fill")) c.column_fill = j.at("column_fill").get<bool>();
  if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("split_seed")) c.split_seed = j.at("split_seed").get<std::uint64_t>();
  if (j.contains("split_ratios")) {
    const auto r = j.at("split_ratios").get<std::vector<double>>();
    if (r.size() != 3) throw UsageError("config: split_ratios must have 3 entries");
    c.split_ratios = {r[0], r[1], r[2]};
  }
  return c;
}

}  // namespace cerd
