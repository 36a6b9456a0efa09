#pragma once

// Command-line entry points: synth, train, eval, attribute, ablate,
// gradcheck. One process per command; every command is deterministic given
// (config, seed, data) and echoes its effective configuration into the
// output directory. Exit codes: 0 success, 1 usage error, 2 data error,
// 3 internal-consistency failure.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cerd/gradcheck.hpp"
#include "cerd/synth.hpp"
#include "cerd/train.hpp"

namespace cerd::cli {

namespace fs = std::filesystem;

inline fs::path resolve_out_dir(const std::string& out_flag, const std::string& command) {
  if (!out_flag.empty()) return fs::path(out_flag);
  const char* root = std::getenv("CERD_OUTPUT_ROOT");
  if (root != nullptr && *root != '\0') return fs::path(root) / command;
  throw UsageError("no output directory: pass --out or set CERD_OUTPUT_ROOT");
}

inline void write_text(const fs::path& path, const std::string& content) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << content;
}

inline nlohmann::ordered_json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file " + path.string());
  try {
    nlohmann::ordered_json j;
    in >> j;
    return j;
  } catch (const std::exception& e) {
    throw UsageError("invalid JSON in " + path.string() + ": " + e.what());
  }
}

// The config file mirrors TrainConfig plus an optional nested synth spec and
// a data manifest path; unknown keys are rejected.
struct CliConfig {
  TrainConfig train;
  SyntheticSpec synth;
  std::string data_manifest;

  static CliConfig from_file(const fs::path& path) {
    const auto j = read_json_file(path);
    CliConfig cfg;
    nlohmann::ordered_json train_part;
    for (const auto& [key, value] : j.items()) {
      if (key == "synth") {
        cfg.synth = synth_spec_from_json(value);
      } else if (key == "data_manifest") {
        cfg.data_manifest = value.get<std::string>();
      } else {
        train_part[key] = value;
      }
    }
    cfg.train = TrainConfig::from_json(train_part);  // rejects unknown keys
    return cfg;
  }
};

struct TrainOverrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
  std::optional<std::size_t> warmup_epochs;
  std::optional<std::size_t> batch_size;
  std::optional<double> learning_rate;
  std::optional<double> dropout;
  std::optional<std::string> completion;
  std::optional<std::string> head;
  std::optional<std::string> backbone;
  std::optional<std::uint64_t> split_seed;
  std::optional<bool> column_fill;

  void apply(TrainConfig& cfg) const {
    if (seed) cfg.seed = *seed;
    if (epochs) cfg.epochs = *epochs;
    if (warmup_epochs) cfg.warmup_epochs = *warmup_epochs;
    if (batch_size) cfg.batch_size = *batch_size;
    if (learning_rate) cfg.learning_rate = *learning_rate;
    if (dropout) cfg.dropout = *dropout;
    if (completion) cfg.completion = completion_from_name(*completion);
    if (head) cfg.head = head_from_name(*head);
    if (backbone) cfg.backbone = backbone_from_name(*backbone);
    if (split_seed) cfg.split_seed = *split_seed;
    if (column_fill) cfg.column_fill = *column_fill;
  }
};

inline std::string metrics_csv(const EvalMetrics& val, const EvalMetrics& test, bool with_val) {
  std::string out = "split,acc,f1,auc\n";
  char buf[128];
  if (with_val) {
    std::snprintf(buf, sizeof(buf), "val,%.17g,%.17g,%.17g\n", val.accuracy, val.macro_f1,
                  val.macro_auc);
    out += buf;
  }
  std::snprintf(buf, sizeof(buf), "test,%.17g,%.17g,%.17g\n", test.accuracy, test.macro_f1,
                test.macro_auc);
  out += buf;
  return out;
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

inline void cmd_synth(const std::string& spec_file, const std::string& out_flag, bool write_mask) {
  SyntheticSpec spec;
  if (!spec_file.empty()) {
    const auto j = read_json_file(spec_file);
    spec = j.contains("synth") ? synth_spec_from_json(j.at("synth")) : synth_spec_from_json(j);
  }
  const fs::path out = resolve_out_dir(out_flag, "synth");
  fs::create_directories(out);

  const Dataset ds = generate(spec);
  WriteOptions wopts;
  wopts.write_mask = write_mask;
  write_bundle(ds, out, wopts);

  const PlantedImportance planted = planted_importance(spec);
  nlohmann::ordered_json imp;
  imp["shared"] = planted.shared;
  nlohmann::ordered_json per;
  for (std::size_t m = 0; m < spec.modality_names.size(); ++m)
    per[spec.modality_names[m]] = planted.per_modality[m];
  imp["per_modality"] = per;
  write_text(out / "importance.json", imp.dump(2) + "\n");
  write_text(out / "config.json", synth_spec_to_json(spec).dump(2) + "\n");

  std::cout << "wrote " << ds.size() << " subjects, " << ds.modality_count() << " modalities to "
            << out.string() << "\n";
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

inline nlohmann::ordered_json effective_train_config(const TrainConfig& cfg,
                                                     const std::string& manifest) {
  nlohmann::ordered_json j = cfg.to_json();
  j["data_manifest"] = manifest;
  return j;
}

inline void cmd_train(const std::string& config_file, const std::string& data_flag,
                      const std::string& out_flag, const TrainOverrides& overrides) {
  CliConfig cfg;
  if (!config_file.empty()) cfg = CliConfig::from_file(config_file);
  overrides.apply(cfg.train);
  const std::string manifest = !data_flag.empty() ? data_flag : cfg.data_manifest;
  if (manifest.empty()) throw UsageError("train: no data manifest (pass --data or set data_manifest)");

  const fs::path out = resolve_out_dir(out_flag, "train");
  fs::create_directories(out);
  LoadOptions lopts;
  lopts.column_fill = cfg.train.column_fill;
  const Dataset ds = load_dataset(manifest, lopts);

  const TrainResult result = run_training(cfg.train, ds, &std::cout);

  result.checkpoint.save(out / "checkpoint.json");
  std::string jsonl;
  for (const EpochRecord& r : result.epochs) jsonl += r.to_json().dump() + "\n";
  write_text(out / "metrics.jsonl", jsonl);
  write_text(out / "final_metrics.csv", metrics_csv(result.best_val, result.test, true));
  write_text(out / "config.json", effective_train_config(cfg.train, manifest).dump(2) + "\n");

  std::cout << "test acc " << result.test.accuracy << " f1 " << result.test.macro_f1 << " auc "
            << result.test.macro_auc << "\n";
}

// ---------------------------------------------------------------------------
// eval / attribute
// ---------------------------------------------------------------------------

struct LoadedCheckpoint {
  Checkpoint checkpoint;
  Dataset dataset;
  SplitIndices splits;
  std::vector<SubjectView> views;
  CerdModel model;
};

inline LoadedCheckpoint load_for_eval(const std::string& checkpoint_file, const std::string& data_file) {
  Checkpoint ckpt = Checkpoint::load(checkpoint_file);
  LoadOptions lopts;
  lopts.column_fill = ckpt.config.column_fill;
  Dataset ds = load_dataset(data_file, lopts);
  ckpt.check_compatible(ds);
  SplitIndices splits = split_stratified(ds.labels, ds.class_count(), ckpt.config.split_ratios,
                                         ckpt.config.split_seed);
  std::vector<SubjectView> views = build_views(ds, ckpt.standardizer);
  CerdModel model = ckpt.instantiate();
  return LoadedCheckpoint{std::move(ckpt), std::move(ds), std::move(splits), std::move(views),
                          std::move(model)};
}

inline const std::vector<std::size_t>& pick_split(const LoadedCheckpoint& lc, const std::string& split) {
  if (split == "train") return lc.splits.train;
  if (split == "val") return lc.splits.val;
  if (split == "test") return lc.splits.test;
  throw UsageError("unknown split '" + split + "' (expected train, val or test)");
}

inline void cmd_eval(const std::string& checkpoint_file, const std::string& data_file,
                     const std::string& split, const std::string& out_flag) {
  const LoadedCheckpoint lc = load_for_eval(checkpoint_file, data_file);
  const auto& rows = pick_split(lc, split);
  const EvalMetrics m = evaluate_split(lc.model, lc.views, rows, lc.dataset.labels);
  for (std::size_t c : m.auc_skipped_classes)
    std::cerr << "warning: class " << lc.dataset.class_names[c]
              << " lacks positives or negatives in split '" << split << "'; excluded from macro AUC\n";

  char buf[160];
  std::snprintf(buf, sizeof(buf), "%s,%.17g,%.17g,%.17g\n", split.c_str(), m.accuracy, m.macro_f1,
                m.macro_auc);
  const std::string csv = std::string("split,acc,f1,auc\n") + buf;
  const fs::path out = out_flag.empty() ? fs::path(checkpoint_file).parent_path()
                                        : resolve_out_dir(out_flag, "eval");
  fs::create_directories(out);
  write_text(out / ("eval_" + split + ".csv"), csv);
  nlohmann::ordered_json echo;
  echo["checkpoint"] = checkpoint_file;
  echo["data"] = data_file;
  echo["split"] = split;
  write_text(out / ("eval_" + split + "_config.json"), echo.dump(2) + "\n");
  std::cout << csv;
}

inline void cmd_attribute(const std::string& checkpoint_file, const std::string& data_file,
                          const std::string& split, const std::string& out_flag) {
  const LoadedCheckpoint lc = load_for_eval(checkpoint_file, data_file);
  if (lc.checkpoint.config.head != HeadKind::evidence_decomposition)
    throw ConfigError("attribute: checkpoint head has no evidence decomposition");
  const auto& rows = pick_split(lc, split);
  if (rows.empty()) throw DataError("attribute: empty split");

  const fs::path out = resolve_out_dir(out_flag, "attribute");
  fs::create_directories(out);

  NoGradGuard guard;
  std::vector<EvidenceReport> reports;
  std::string jsonl;
  for (std::size_t n : rows) {
    const auto fwd = lc.model.forward(lc.views[n], eval_context(), true);
    const EvidenceReport& r = *fwd.report;
    // The additive identity is re-verified on every emitted report.
    if (r.additive_gap() >= 1e-9)
      throw ConsistencyError("attribute: additive identity violated for subject " + r.subject_id +
                             " (gap " + std::to_string(r.additive_gap()) + ")");
    jsonl += r.to_json(lc.dataset.modality_names).dump() + "\n";
    reports.push_back(r);
  }
  const ImportanceSummary summary =
      importance_summary(reports, lc.dataset.modality_names, lc.dataset.class_names);

  write_text(out / "reports.jsonl", jsonl);
  write_text(out / "importance_summary.csv", summary.to_csv());
  write_text(out / "importance_summary.json", summary.to_json().dump(2) + "\n");
  nlohmann::ordered_json echo;
  echo["checkpoint"] = checkpoint_file;
  echo["data"] = data_file;
  echo["split"] = split;
  write_text(out / "config.json", echo.dump(2) + "\n");

  std::cout << "wrote " << reports.size() << " reports to " << out.string() << "\n";
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

inline void cmd_ablate(const std::string& config_file, const std::string& data_flag,
                       std::size_t seeds, const std::string& out_flag,
                       const TrainOverrides& overrides) {
  CliConfig cfg;
  if (!config_file.empty()) cfg = CliConfig::from_file(config_file);
  overrides.apply(cfg.train);
  const std::string manifest = !data_flag.empty() ? data_flag : cfg.data_manifest;
  if (manifest.empty()) throw UsageError("ablate: no data manifest (pass --data or set data_manifest)");

  const fs::path out = resolve_out_dir(out_flag, "ablate");
  fs::create_directories(out);
  LoadOptions lopts;
  lopts.column_fill = cfg.train.column_fill;
  const Dataset ds = load_dataset(manifest, lopts);

  const AblationTable table = run_ablation(cfg.train, ds, seeds, &std::cout);
  write_text(out / "ablation.csv", table.to_csv());
  write_text(out / "ablation_runs.csv", table.runs_to_csv());
  nlohmann::ordered_json echo = effective_train_config(cfg.train, manifest);
  echo["seeds"] = seeds;
  write_text(out / "config.json", echo.dump(2) + "\n");
  std::cout << table.to_csv();
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

// Builds the tiny full pipeline (both heads of the loss: classification over
// a mixed batch plus exhaustive masked reconstruction) and runs central
// finite differences over every trainable parameter.
inline int cmd_gradcheck(const std::string& scale, double step, double tol) {
  if (scale != "tiny") throw UsageError("gradcheck: only --scale tiny is supported");

  SyntheticSpec spec;
  spec.subjects = 24;
  spec.classes = 3;
  spec.modality_names = {"A", "B", "C"};
  spec.modality_dims = {5, 6, 4};
  spec.shared_dim = 4;
  spec.private_dims = {2, 2, 2};
  spec.missing_rates = {0.0, 0.0, 0.0};
  spec.signal_shared = 0.4;
  spec.signal_private = {0.2, 0.2, 0.2};
  spec.seed = 2025;
  Dataset ds = generate(spec);

  // Two-subject batch: one fully observed, one with a gap so the completion
  // path is in the graph.
  ds.mask[1 * 3 + 2] = 0;
  for (std::size_t c = 0; c < ds.modality_dims[2]; ++c)
    ds.features[2][1 * ds.modality_dims[2] + c] = std::numeric_limits<double>::quiet_NaN();

  TrainConfig cfg;
  cfg.hidden_dim = 8;
  cfg.tokens = 2;
  cfg.experts = 4;
  cfg.top_k = 2;
  cfg.heads = 4;
  cfg.encoder_depth = 2;
  cfg.generator_depth = 2;
  cfg.dropout = 0.0;  // finite differences need a deterministic graph
  cfg.seed = 7;

  const std::vector<std::size_t> all{0, 1};
  const Standardizer st = Standardizer::fit(ds, all);
  const std::vector<SubjectView> views = build_views(ds, st);
  CerdModel model(ds.modality_names, ds.modality_dims, cfg.model_config(ds.class_count()), cfg.seed);

  const std::vector<const SubjectView*> full_batch{&views[0]};
  Rng mask_rng(derive_seed(cfg.seed, "masking"));
  const MaskingPlan plan = MaskingPlan::draw(1, 3, true, mask_rng);
  const ReconTargets targets = snapshot_recon_targets(model.tokenizers(), full_batch);

  auto loss_fn = [&]() {
    std::vector<Tensor> logits;
    std::vector<std::size_t> labels;
    for (std::size_t n : all) {
      logits.push_back(model.forward(views[n], eval_context()).logits);
      labels.push_back(views[n].label);
    }
    const Tensor recon = masked_reconstruction_loss(model.tokenizers(), model.generators(),
                                                    full_batch, plan, cfg.recon_norm,
                                                    eval_context(), &targets);
    return total_loss(logits, labels, recon, cfg.recon_weight);
  };

  const ParamList params = model.parameters();
  const GradCheckReport report = check_gradients(loss_fn, params, step, tol);

  // Per-module maxima, module = first dotted component.
  std::map<std::string, double> per_module;
  for (const GradCheckEntry& e : report.per_param) {
    const std::string module = e.param.substr(0, e.param.find('.'));
    per_module[module] = std::max(per_module[module], e.max_rel_error);
  }
  for (const auto& [module, err] : per_module) {
    char buf[128];
    std::snprintf(buf, sizeof(buf), "%-24s max_rel_error %.3e %s\n", module.c_str(), err,
                  err < tol ? "ok" : "FAIL");
    std::cout << buf;
  }
  char buf[128];
  std::snprintf(buf, sizeof(buf), "overall max_rel_error %.3e (tolerance %.1e)\n",
                report.max_rel_error, tol);
  std::cout << buf;
  if (!report.pass(tol)) {
    std::cerr << "gradcheck FAILED\n";
    return 3;
  }
  std::cout << "gradcheck passed\n";
  return 0;
}

// ---------------------------------------------------------------------------
// entry point
// ---------------------------------------------------------------------------

inline int run(int argc, const char* const* argv) {
  CLI::App app{"conditional evidence reconstruction and decomposition"};
  app.require_subcommand(1);

  std::string spec_file, config_file, data_file, checkpoint_file, out_dir, split = "test";
  std::string gradcheck_scale = "tiny";
  double gradcheck_step = 1e-5, gradcheck_tol = 1e-4;
  std::size_t seeds = 5;
  bool write_mask = false;
  TrainOverrides overrides;

  auto add_overrides = [&](CLI::App* cmd) {
    cmd->add_option("--seed", overrides.seed, "model/train seed");
    cmd->add_option("--epochs", overrides.epochs, "training epochs");
    cmd->add_option("--warmup-epochs", overrides.warmup_epochs, "warm-up epochs");
    cmd->add_option("--batch-size", overrides.batch_size, "batch size");
    cmd->add_option("--learning-rate", overrides.learning_rate, "Adam learning rate");
    cmd->add_option("--dropout", overrides.dropout, "dropout probability");
    cmd->add_option("--completion", overrides.completion, "cer | static_fill | zero_fill");
    cmd->add_option("--head", overrides.head, "evidence_decomposition | plain_linear");
    cmd->add_option("--backbone", overrides.backbone, "moe | shared_ffn");
    cmd->add_option("--split-seed", overrides.split_seed, "split seed");
    cmd->add_flag("--column-fill", overrides.column_fill,
                  "median-fill sparse entries inside observed rows at load");
  };

  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic multimodal bundle");
  synth->add_option("--spec", spec_file, "synthetic spec JSON (defaults apply when omitted)");
  synth->add_option("--out", out_dir, "output directory");
  synth->add_flag("--write-mask", write_mask, "also write an explicit mask CSV");

  CLI::App* train = app.add_subcommand("train", "train a model");
  train->add_option("--config", config_file, "config JSON");
  train->add_option("--data", data_file, "bundle manifest JSON");
  train->add_option("--out", out_dir, "output directory");
  add_overrides(train);

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--checkpoint", checkpoint_file, "checkpoint JSON")->required();
  eval->add_option("--data", data_file, "bundle manifest JSON")->required();
  eval->add_option("--split", split, "train | val | test");
  eval->add_option("--out", out_dir, "output directory (default: checkpoint directory)");

  CLI::App* attribute = app.add_subcommand("attribute", "emit per-subject evidence reports");
  attribute->add_option("--checkpoint", checkpoint_file, "checkpoint JSON")->required();
  attribute->add_option("--data", data_file, "bundle manifest JSON")->required();
  attribute->add_option("--split", split, "train | val | test");
  attribute->add_option("--out", out_dir, "output directory");

  CLI::App* ablate = app.add_subcommand("ablate", "run the five-variant ablation");
  ablate->add_option("--config", config_file, "config JSON");
  ablate->add_option("--data", data_file, "bundle manifest JSON");
  ablate->add_option("--seeds", seeds, "seeds per variant");
  ablate->add_option("--out", out_dir, "output directory");
  add_overrides(ablate);

  CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of the full pipeline");
  gradcheck->add_option("--scale", gradcheck_scale, "problem scale (tiny)");
  gradcheck->add_option("--step", gradcheck_step, "finite-difference step");
  gradcheck->add_option("--tol", gradcheck_tol, "pass tolerance");

  try {
    app.parse(argc, argv);
    if (synth->parsed()) {
      cmd_synth(spec_file, out_dir, write_mask);
    } else if (train->parsed()) {
      cmd_train(config_file, data_file, out_dir, overrides);
    } else if (eval->parsed()) {
      cmd_eval(checkpoint_file, data_file, split, out_dir);
    } else if (attribute->parsed()) {
      cmd_attribute(checkpoint_file, data_file, split, out_dir);
    } else if (ablate->parsed()) {
      cmd_ablate(config_file, data_file, seeds, out_dir, overrides);
    } else if (gradcheck->parsed()) {
      return cmd_gradcheck(gradcheck_scale, gradcheck_step, gradcheck_tol);
    }
    return 0;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);  // prints usage or help text
    return code == 0 ? 0 : 1;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 1;
  } catch (const ParameterError& e) {
    std::cerr << "parameter error: " << e.what() << "\n";
    return 1;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 3;
  }
}

}  // namespace cerd::cli
