#pragma once

// Subject-aligned matrix bundles: one CSV per modality (rows = subjects,
// first column = subject_id), a labels CSV, an optional explicit mask CSV,
// and a manifest JSON naming the pieces. Missing modalities are rows of the
// "NaN" sentinel; in memory the availability mask is authoritative.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cerd/errors.hpp"
#include "cerd/random.hpp"
#include "cerd/tokenize.hpp"

namespace cerd {

struct SplitIndices {
  std::vector<std::size_t> train, val, test;
};

struct Dataset {
  std::vector<std::string> modality_names;
  std::vector<std::size_t> modality_dims;
  std::vector<std::string> class_names;
  std::vector<std::vector<double>> features;  // per modality, N x d row-major
  std::vector<std::uint8_t> mask;             // N x M row-major
  std::vector<std::size_t> labels;
  std::vector<std::string> subject_ids;
  SplitIndices splits;

  std::size_t size() const { return labels.size(); }
  std::size_t modality_count() const { return modality_names.size(); }
  std::size_t class_count() const { return class_names.size(); }

  bool observed(std::size_t n, std::size_t m) const { return mask[n * modality_count() + m] != 0; }

  bool fully_observed(std::size_t n) const {
    for (std::size_t m = 0; m < modality_count(); ++m)
      if (!observed(n, m)) return false;
    return true;
  }

  const double* feature_row(std::size_t modality, std::size_t n) const {
    return features[modality].data() + n * modality_dims[modality];
  }

  std::vector<std::size_t> full_coverage(const std::vector<std::size_t>& rows) const {
    std::vector<std::size_t> out;
    for (std::size_t n : rows)
      if (fully_observed(n)) out.push_back(n);
    return out;
  }
};

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

namespace csvio {

// %.17g round-trips doubles exactly; the sentinel is the literal "NaN".
inline std::string format_double(double v) {
  if (std::isnan(v)) return "NaN";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> cells;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(',', start);
    if (pos == std::string::npos) {
      cells.push_back(line.substr(start));
      break;
    }
    cells.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return cells;
}

inline double parse_double(const std::string& cell, const std::string& where) {
  if (cell == "NaN" || cell == "nan" || cell == "NAN")
    return std::numeric_limits<double>::quiet_NaN();
  std::size_t consumed = 0;
  double v = 0.0;
  try {
    v = std::stod(cell, &consumed);
  } catch (const std::exception&) {
    throw DataError("csv: unparsable number '" + cell + "' at " + where);
  }
  if (consumed != cell.size()) throw DataError("csv: trailing junk in '" + cell + "' at " + where);
  return v;
}

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

inline Table read_table(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("csv: cannot open " + path.string());
  Table t;
  std::string line;
  if (!std::getline(in, line)) throw DataError("csv: missing header row in " + path.string());
  if (!line.empty() && line.back() == '\r') line.pop_back();
  t.header = split_line(line);
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto cells = split_line(line);
    if (cells.size() != t.header.size())
      throw DataError("csv: row width " + std::to_string(cells.size()) + " != header width " +
                      std::to_string(t.header.size()) + " in " + path.string());
    t.rows.push_back(std::move(cells));
  }
  return t;
}

}  // namespace csvio

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

struct ManifestEntry {
  std::string name;
  std::string file;
  std::size_t dim = 0;
};

struct Manifest {
  std::vector<ManifestEntry> modalities;
  std::string labels_file;
  std::optional<std::string> mask_file;
  std::vector<std::string> classes;
};

inline Manifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("manifest: cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw DataError("manifest: invalid JSON in " + path.string() + ": " + e.what());
  }
  Manifest m;
  try {
    for (const auto& e : j.at("modalities"))
      m.modalities.push_back({e.at("name").get<std::string>(), e.at("file").get<std::string>(),
                              e.at("dim").get<std::size_t>()});
    m.labels_file = j.at("labels_file").get<std::string>();
    if (j.contains("mask_file")) m.mask_file = j.at("mask_file").get<std::string>();
    for (const auto& c : j.at("classes")) m.classes.push_back(c.get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw DataError("manifest: schema violation in " + path.string() + ": " + e.what());
  }
  return m;
}

inline void write_manifest(const Manifest& m, const std::filesystem::path& path) {
  nlohmann::ordered_json j;
  j["modalities"] = nlohmann::ordered_json::array();
  for (const auto& e : m.modalities)
    j["modalities"].push_back({{"name", e.name}, {"file", e.file}, {"dim", e.dim}});
  j["labels_file"] = m.labels_file;
  if (m.mask_file) j["mask_file"] = *m.mask_file;
  j["classes"] = m.classes;
  std::ofstream out(path);
  if (!out) throw DataError("manifest: cannot write " + path.string());
  out << j.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

struct LoadOptions {
  // Median-fill sparse sentinel entries inside observed rows (per column,
  // median over observed rows). Off by default; fill precedes
  // standardization.
  bool column_fill = false;
};

namespace detail {

inline void check_subject_alignment(const std::vector<std::string>& reference,
                                    const std::vector<std::string>& candidate,
                                    const std::string& ref_file, const std::string& cand_file) {
  if (reference.size() != candidate.size())
    throw DataError("alignment: " + cand_file + " has " + std::to_string(candidate.size()) +
                    " subjects but " + ref_file + " has " + std::to_string(reference.size()));
  for (std::size_t i = 0; i < reference.size(); ++i)
    if (reference[i] != candidate[i])
      throw DataError("alignment: subject_id mismatch at row " + std::to_string(i) + ": " +
                      ref_file + " has '" + reference[i] + "', " + cand_file + " has '" +
                      candidate[i] + "'");
}

}  // namespace detail

inline Dataset load_dataset(const std::filesystem::path& manifest_path, const LoadOptions& opts = {}) {
  const Manifest manifest = read_manifest(manifest_path);
  const std::filesystem::path root = manifest_path.parent_path();
  if (manifest.modalities.empty()) throw DataError("manifest: no modalities listed");
  if (manifest.classes.empty()) throw DataError("manifest: no classes listed");

  Dataset ds;
  ds.class_names = manifest.classes;

  std::vector<std::string> reference_ids;
  std::string reference_file;

  for (const ManifestEntry& entry : manifest.modalities) {
    const auto table = csvio::read_table(root / entry.file);
    if (table.header.size() != entry.dim + 1)
      throw DataError("modality " + entry.name + ": expected " + std::to_string(entry.dim) +
                      " feature columns, file has " + std::to_string(table.header.size() - 1));
    std::vector<std::string> ids;
    std::vector<double> values;
    values.reserve(table.rows.size() * entry.dim);
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
      ids.push_back(table.rows[r][0]);
      for (std::size_t c = 0; c < entry.dim; ++c)
        values.push_back(csvio::parse_double(table.rows[r][c + 1],
                                             entry.file + ":" + std::to_string(r + 2)));
    }
    if (reference_ids.empty()) {
      reference_ids = ids;
      reference_file = entry.file;
    } else {
      detail::check_subject_alignment(reference_ids, ids, reference_file, entry.file);
    }
    ds.modality_names.push_back(entry.name);
    ds.modality_dims.push_back(entry.dim);
    ds.features.push_back(std::move(values));
  }
  ds.subject_ids = reference_ids;
  const std::size_t n_subjects = reference_ids.size();
  const std::size_t n_mod = ds.modality_count();
  if (n_subjects == 0) throw DataError("load: bundle contains no subjects");

  // Sentinel-derived availability pattern.
  std::vector<std::uint8_t> all_nan(n_subjects * n_mod, 0), any_nan(n_subjects * n_mod, 0);
  for (std::size_t m = 0; m < n_mod; ++m) {
    const std::size_t d = ds.modality_dims[m];
    for (std::size_t n = 0; n < n_subjects; ++n) {
      bool all_s = true, any_s = false;
      for (std::size_t c = 0; c < d; ++c) {
        const bool s = std::isnan(ds.features[m][n * d + c]);
        all_s = all_s && s;
        any_s = any_s || s;
      }
      all_nan[n * n_mod + m] = all_s ? 1 : 0;
      any_nan[n * n_mod + m] = any_s ? 1 : 0;
    }
  }

  if (manifest.mask_file) {
    const auto table = csvio::read_table(root / *manifest.mask_file);
    if (table.header.size() != n_mod + 1)
      throw DataError("mask: expected one column per modality plus subject_id");
    std::vector<std::string> ids;
    ds.mask.assign(n_subjects * n_mod, 0);
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
      ids.push_back(table.rows[r][0]);
      for (std::size_t m = 0; m < n_mod; ++m) {
        const std::string& cell = table.rows[r][m + 1];
        if (cell != "0" && cell != "1")
          throw DataError("mask: entries must be 0 or 1, got '" + cell + "'");
        ds.mask[r * n_mod + m] = cell == "1" ? 1 : 0;
      }
    }
    detail::check_subject_alignment(reference_ids, ids, reference_file, *manifest.mask_file);
    // The explicit mask must agree with the sentinel pattern.
    for (std::size_t n = 0; n < n_subjects; ++n)
      for (std::size_t m = 0; m < n_mod; ++m) {
        const bool masked_out = ds.mask[n * n_mod + m] == 0;
        if (masked_out && !all_nan[n * n_mod + m])
          throw DataError("integrity: mask marks subject " + reference_ids[n] + " modality " +
                          ds.modality_names[m] + " missing but the row holds values");
        if (!masked_out && all_nan[n * n_mod + m])
          throw DataError("integrity: mask marks subject " + reference_ids[n] + " modality " +
                          ds.modality_names[m] + " observed but the row is all sentinel");
      }
  } else {
    ds.mask.assign(n_subjects * n_mod, 0);
    for (std::size_t i = 0; i < ds.mask.size(); ++i) ds.mask[i] = all_nan[i] ? 0 : 1;
  }

  // Sparse sentinels inside observed rows: fill when configured, else reject.
  for (std::size_t m = 0; m < n_mod; ++m) {
    const std::size_t d = ds.modality_dims[m];
    for (std::size_t n = 0; n < n_subjects; ++n) {
      if (!ds.mask[n * n_mod + m] || !any_nan[n * n_mod + m]) continue;
      if (!opts.column_fill)
        throw DataError("integrity: observed row for subject " + reference_ids[n] + " modality " +
                        ds.modality_names[m] + " contains sentinel entries");
    }
    if (opts.column_fill) {
      for (std::size_t c = 0; c < d; ++c) {
        std::vector<double> col;
        for (std::size_t n = 0; n < n_subjects; ++n) {
          if (!ds.mask[n * n_mod + m]) continue;
          const double v = ds.features[m][n * d + c];
          if (!std::isnan(v)) col.push_back(v);
        }
        if (col.empty()) continue;
        std::sort(col.begin(), col.end());
        const double median = col.size() % 2 ? col[col.size() / 2]
                                             : 0.5 * (col[col.size() / 2 - 1] + col[col.size() / 2]);
        for (std::size_t n = 0; n < n_subjects; ++n) {
          if (!ds.mask[n * n_mod + m]) continue;
          double& v = ds.features[m][n * d + c];
          if (std::isnan(v)) v = median;
        }
      }
    }
  }

  // Labels.
  const auto labels_table = csvio::read_table(root / manifest.labels_file);
  if (labels_table.header.size() != 2) throw DataError("labels: expected subject_id,label");
  std::vector<std::string> label_ids;
  for (const auto& row : labels_table.rows) {
    label_ids.push_back(row[0]);
    const auto it = std::find(manifest.classes.begin(), manifest.classes.end(), row[1]);
    if (it == manifest.classes.end())
      throw DataError("labels: unknown class '" + row[1] + "' for subject " + row[0]);
    ds.labels.push_back(static_cast<std::size_t>(it - manifest.classes.begin()));
  }
  detail::check_subject_alignment(reference_ids, label_ids, reference_file, manifest.labels_file);

  for (std::size_t n = 0; n < n_subjects; ++n) {
    bool any = false;
    for (std::size_t m = 0; m < n_mod; ++m) any = any || ds.mask[n * n_mod + m];
    if (!any) throw DataError("subject " + reference_ids[n] + ": zero observed modalities");
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Writing
// ---------------------------------------------------------------------------

struct WriteOptions {
  bool write_mask = false;
};

inline void write_bundle(const Dataset& ds, const std::filesystem::path& dir,
                         const WriteOptions& opts = {}) {
  std::filesystem::create_directories(dir);
  Manifest manifest;
  for (std::size_t m = 0; m < ds.modality_count(); ++m) {
    const std::string file = ds.modality_names[m] + ".csv";
    manifest.modalities.push_back({ds.modality_names[m], file, ds.modality_dims[m]});
    std::ofstream out(dir / file);
    if (!out) throw DataError("write: cannot create " + (dir / file).string());
    out << "subject_id";
    for (std::size_t c = 0; c < ds.modality_dims[m]; ++c) out << ",f" << c;
    out << "\n";
    for (std::size_t n = 0; n < ds.size(); ++n) {
      out << ds.subject_ids[n];
      const double* r = ds.feature_row(m, n);
      for (std::size_t c = 0; c < ds.modality_dims[m]; ++c) out << "," << csvio::format_double(r[c]);
      out << "\n";
    }
  }
  manifest.labels_file = "labels.csv";
  {
    std::ofstream out(dir / "labels.csv");
    out << "subject_id,label\n";
    for (std::size_t n = 0; n < ds.size(); ++n)
      out << ds.subject_ids[n] << "," << ds.class_names[ds.labels[n]] << "\n";
  }
  if (opts.write_mask) {
    manifest.mask_file = "mask.csv";
    std::ofstream out(dir / "mask.csv");
    out << "subject_id";
    for (const auto& name : ds.modality_names) out << "," << name;
    out << "\n";
    for (std::size_t n = 0; n < ds.size(); ++n) {
      out << ds.subject_ids[n];
      for (std::size_t m = 0; m < ds.modality_count(); ++m)
        out << "," << (ds.observed(n, m) ? "1" : "0");
      out << "\n";
    }
  }
  manifest.classes = ds.class_names;
  write_manifest(manifest, dir / "manifest.json");
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

// Class-stratified split, deterministic in (seed, labels). Within each class
// the quota per split is assigned by largest remainder, ties to the earlier
// split.
inline SplitIndices split_stratified(const std::vector<std::size_t>& labels, std::size_t classes,
                                     const std::array<double, 3>& ratios, std::uint64_t seed) {
  double ratio_sum = 0.0;
  for (double r : ratios) {
    if (r <= 0.0) throw ParameterError("split: ratios must be positive");
    ratio_sum += r;
  }
  if (std::abs(ratio_sum - 1.0) > 1e-9)
    throw ParameterError("split: ratios must sum to 1, got " + std::to_string(ratio_sum));

  std::vector<std::vector<std::size_t>> per_class(classes);
  for (std::size_t n = 0; n < labels.size(); ++n) {
    if (labels[n] >= classes) throw DataError("split: label out of range");
    per_class[labels[n]].push_back(n);
  }

  std::mt19937_64 engine(derive_seed(seed, "split"));
  SplitIndices out;
  for (std::size_t c = 0; c < classes; ++c) {
    auto& members = per_class[c];
    std::shuffle(members.begin(), members.end(), engine);
    const std::size_t n = members.size();
    std::array<std::size_t, 3> take{};
    std::array<double, 3> remainder{};
    std::size_t assigned = 0;
    for (std::size_t s = 0; s < 3; ++s) {
      const double quota = ratios[s] * static_cast<double>(n);
      take[s] = static_cast<std::size_t>(quota);
      remainder[s] = quota - static_cast<double>(take[s]);
      assigned += take[s];
    }
    while (assigned < n) {
      std::size_t best = 0;
      for (std::size_t s = 1; s < 3; ++s)
        if (remainder[s] > remainder[best]) best = s;
      ++take[best];
      remainder[best] = -1.0;
      ++assigned;
    }
    std::size_t off = 0;
    for (std::size_t s = 0; s < 3; ++s) {
      auto* dst = s == 0 ? &out.train : (s == 1 ? &out.val : &out.test);
      for (std::size_t i = 0; i < take[s]; ++i) dst->push_back(members[off + i]);
      off += take[s];
    }
    if (take[0] == 0 && n > 0)
      throw DataError("stratification: class " + std::to_string(c) + " absent from the train split");
  }
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.val.begin(), out.val.end());
  std::sort(out.test.begin(), out.test.end());
  return out;
}

// ---------------------------------------------------------------------------
// Standardization
// ---------------------------------------------------------------------------

// Per-column mean/std computed on the observed train-split rows only.
struct Standardizer {
  std::vector<std::vector<double>> mean;
  std::vector<std::vector<double>> stddev;

  static Standardizer fit(const Dataset& ds, const std::vector<std::size_t>& rows) {
    Standardizer s;
    s.mean.resize(ds.modality_count());
    s.stddev.resize(ds.modality_count());
    for (std::size_t m = 0; m < ds.modality_count(); ++m) {
      const std::size_t d = ds.modality_dims[m];
      s.mean[m].assign(d, 0.0);
      s.stddev[m].assign(d, 1.0);
      std::size_t count = 0;
      for (std::size_t n : rows) {
        if (!ds.observed(n, m)) continue;
        ++count;
        const double* r = ds.feature_row(m, n);
        for (std::size_t c = 0; c < d; ++c) s.mean[m][c] += r[c];
      }
      if (count == 0) continue;
      for (std::size_t c = 0; c < d; ++c) s.mean[m][c] /= static_cast<double>(count);
      std::vector<double> var(d, 0.0);
      for (std::size_t n : rows) {
        if (!ds.observed(n, m)) continue;
        const double* r = ds.feature_row(m, n);
        for (std::size_t c = 0; c < d; ++c) {
          const double dlt = r[c] - s.mean[m][c];
          var[c] += dlt * dlt;
        }
      }
      for (std::size_t c = 0; c < d; ++c) {
        const double sd = std::sqrt(var[c] / static_cast<double>(count));
        s.stddev[m][c] = sd < 1e-12 ? 1.0 : sd;
      }
    }
    return s;
  }

  std::vector<double> apply(std::size_t modality, const double* raw, std::size_t d) const {
    std::vector<double> out(d);
    for (std::size_t c = 0; c < d; ++c) out[c] = (raw[c] - mean[modality][c]) / stddev[modality][c];
    return out;
  }
};

// Model-ready view of one subject: observed rows standardized, gaps left
// without feature tensors.
inline SubjectView subject_view(const Dataset& ds, const Standardizer& st, std::size_t n) {
  SubjectView v;
  v.id = ds.subject_ids[n];
  v.label = ds.labels[n];
  v.mask.resize(ds.modality_count());
  v.features.resize(ds.modality_count());
  for (std::size_t m = 0; m < ds.modality_count(); ++m) {
    v.mask[m] = ds.observed(n, m) ? 1 : 0;
    if (!v.mask[m]) continue;
    const std::size_t d = ds.modality_dims[m];
    v.features[m] = Tensor::vector(st.apply(m, ds.feature_row(m, n), d));
  }
  return v;
}

}  // namespace cerd
