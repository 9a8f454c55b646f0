#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "malaudit/corpus.hpp"
#include "malaudit/errors.hpp"
#include "malaudit/explainers.hpp"
#include "malaudit/learners.hpp"

namespace malaudit {

inline constexpr std::string_view kAuditSchemaVersion = "1";

// ---------------------------------------------------------------------------
// Classification metrics (malware is the positive class)
// ---------------------------------------------------------------------------

struct MetricsReport {
  long tp = 0, fp = 0, fn = 0, tn = 0;
  double accuracy = 0.0, precision = 0.0, recall = 0.0, f1 = 0.0;
};

// Zero denominators yield 0, never NaN.
inline MetricsReport metrics_from_counts(long tp, long fp, long fn, long tn) {
  MetricsReport r;
  r.tp = tp;
  r.fp = fp;
  r.fn = fn;
  r.tn = tn;
  long n = tp + fp + fn + tn;
  r.accuracy = n > 0 ? double(tp + tn) / double(n) : 0.0;
  r.precision = tp + fp > 0 ? double(tp) / double(tp + fp) : 0.0;
  r.recall = tp + fn > 0 ? double(tp) / double(tp + fn) : 0.0;
  r.f1 = r.precision + r.recall > 0
             ? 2.0 * r.precision * r.recall / (r.precision + r.recall)
             : 0.0;
  return r;
}

inline MetricsReport metrics(
    const std::vector<std::pair<Label, Label>>& truth_pred) {
  long tp = 0, fp = 0, fn = 0, tn = 0;
  for (const auto& [truth, pred] : truth_pred) {
    if (truth == Label::malware) {
      (pred == Label::malware ? tp : fn) += 1;
    } else {
      (pred == Label::malware ? fp : tn) += 1;
    }
  }
  return metrics_from_counts(tp, fp, fn, tn);
}

// ---------------------------------------------------------------------------
// Top-T ranking and importance aggregation
// ---------------------------------------------------------------------------

// Feature ids ranked by (value desc, id asc); zero-importance features never
// rank, so the result may be shorter than T.
inline std::vector<std::uint32_t> top_features(const std::vector<double>& values,
                                               std::size_t T) {
  std::vector<std::uint32_t> ids;
  for (std::uint32_t i = 0; i < values.size(); ++i) {
    if (values[i] != 0.0) ids.push_back(i);
  }
  std::sort(ids.begin(), ids.end(), [&](std::uint32_t a, std::uint32_t b) {
    if (values[a] != values[b]) return values[a] > values[b];
    return a < b;
  });
  if (ids.size() > T) ids.resize(T);
  return ids;
}

// Elementwise mean over explanation vectors.
inline std::vector<double> avg_feature_importance(
    const std::vector<ExplanationVector>& explns) {
  if (explns.empty()) {
    throw DataError("average feature importance over zero explanations");
  }
  std::size_t d = explns.front().values.size();
  std::vector<double> avg(d, 0.0);
  for (const ExplanationVector& e : explns) {
    if (e.values.size() != d) {
      throw DataError("explanation vectors disagree on catalog size");
    }
    for (std::size_t i = 0; i < d; ++i) avg[i] += e.values[i];
  }
  for (double& v : avg) v /= static_cast<double>(explns.size());
  return avg;
}

// Fraction of explanations whose top-T set contains the feature.
inline double count_top(const std::vector<ExplanationVector>& explns,
                        std::uint32_t feature_id, std::size_t T) {
  if (explns.empty()) {
    throw DataError("count_top over zero explanations");
  }
  std::size_t hits = 0;
  for (const ExplanationVector& e : explns) {
    std::vector<std::uint32_t> top = top_features(e.values, T);
    hits += std::find(top.begin(), top.end(), feature_id) != top.end();
  }
  return static_cast<double>(hits) / static_cast<double>(explns.size());
}

struct FeatureImportanceSummary {
  std::size_t n_explanations = 0;
  std::vector<double> avg_fi;               // per feature
  std::vector<std::size_t> top_ts;          // e.g. {10, 20}
  std::vector<std::vector<double>> count_top;  // [top_ts index][feature]
};

inline FeatureImportanceSummary importance_summary(
    const std::vector<ExplanationVector>& explns, std::size_t d,
    const std::vector<std::size_t>& top_ts) {
  FeatureImportanceSummary s;
  s.n_explanations = explns.size();
  s.top_ts = top_ts;
  s.avg_fi.assign(d, 0.0);
  s.count_top.assign(top_ts.size(), std::vector<double>(d, 0.0));
  if (explns.empty()) return s;
  s.avg_fi = avg_feature_importance(explns);
  if (s.avg_fi.size() != d) {
    throw DataError("explanation vectors disagree with the catalog size");
  }
  for (const ExplanationVector& e : explns) {
    for (std::size_t ti = 0; ti < top_ts.size(); ++ti) {
      for (std::uint32_t f : top_features(e.values, top_ts[ti])) {
        s.count_top[ti][f] += 1.0;
      }
    }
  }
  for (auto& row : s.count_top) {
    for (double& v : row) v /= static_cast<double>(explns.size());
  }
  return s;
}

// ---------------------------------------------------------------------------
// Time-bias table: how much of each explanation's top-T is era-specific
// ---------------------------------------------------------------------------

struct TimeBiasCell {
  std::size_t top_t = 0;
  double containment_added = 0.0;    // share of explanations with >= 1 added
  double containment_removed = 0.0;  // ... >= 1 removed
  double composition_added = 0.0;    // mean count of added in top-T, over T
  double composition_removed = 0.0;
};

struct TimeBiasGroup {
  Label group = Label::malware;  // predicted class (or true, per audit flag)
  std::size_t n_explanations = 0;
  std::vector<TimeBiasCell> cells;  // one per configured T
};

struct TimeBiasTable {
  YearRange window;
  bool lifecycle_metadata = true;  // false: catalog carries no lifecycles
  std::vector<TimeBiasGroup> groups;  // malware first, then benign
};

// Groups explanations by predicted label and tallies, per configured T, how
// often and how heavily added/removed features occupy the top-T set. With no
// lifecycle metadata in the catalog the table is all zeros and flagged.
inline TimeBiasTable time_bias_table(
    const std::vector<ExplanationVector>& explns,
    const FeatureCatalog& catalog, const YearRange& window,
    const std::vector<std::size_t>& top_ts) {
  validate_year_range(window, "time-bias audit");
  if (top_ts.empty()) throw DataError("time-bias audit: no top-T sizes");

  std::vector<LifecycleFlags> flags(catalog.size());
  bool any_lifecycle = false;
  for (std::size_t i = 0; i < catalog.size(); ++i) {
    flags[i] = lifecycle_flags(catalog.features[i], window);
    any_lifecycle |= (catalog.features[i].added_year.has_value() ||
                      catalog.features[i].removed_year.has_value());
  }

  TimeBiasTable table;
  table.window = window;
  table.lifecycle_metadata = any_lifecycle;
  for (Label group : {Label::malware, Label::benign}) {
    TimeBiasGroup g;
    g.group = group;
    for (std::size_t T : top_ts) {
      TimeBiasCell cell;
      cell.top_t = T;
      g.cells.push_back(cell);
    }
    for (const ExplanationVector& e : explns) {
      if (e.predicted_label != group) continue;
      if (e.values.size() != catalog.size()) {
        throw DataError("explanation for '" + e.sample_id +
                        "' disagrees with the catalog size");
      }
      ++g.n_explanations;
      for (std::size_t ti = 0; ti < top_ts.size(); ++ti) {
        std::size_t T = top_ts[ti];
        std::size_t n_added = 0, n_removed = 0;
        for (std::uint32_t f : top_features(e.values, T)) {
          n_added += flags[f].added;
          n_removed += flags[f].removed;
        }
        TimeBiasCell& cell = g.cells[ti];
        cell.containment_added += (n_added > 0);
        cell.containment_removed += (n_removed > 0);
        cell.composition_added +=
            static_cast<double>(n_added) / static_cast<double>(T);
        cell.composition_removed +=
            static_cast<double>(n_removed) / static_cast<double>(T);
      }
    }
    if (g.n_explanations > 0) {
      for (TimeBiasCell& cell : g.cells) {
        double n = static_cast<double>(g.n_explanations);
        cell.containment_added /= n;
        cell.containment_removed /= n;
        cell.composition_added /= n;
        cell.composition_removed /= n;
      }
    }
    table.groups.push_back(std::move(g));
  }
  return table;
}

// ---------------------------------------------------------------------------
// Run records and cross-tests
// ---------------------------------------------------------------------------

struct RunRecord {
  std::string variant;
  ModelKind model = ModelKind::svm;
  int folds = 0;
  int folds_completed = 0;
  bool timed_out = false;
  MetricsReport pooled;  // micro-averaged: confusion counts summed over folds
  std::vector<MetricsReport> fold_metrics;
  FeatureImportanceSummary importance_malware;  // predicted-malware group
  FeatureImportanceSummary importance_benign;
  TimeBiasTable time_bias;
  std::vector<ExplanationVector> explanations;  // one per variant sample
  double duration_seconds = 0.0;  // in-memory only; reports omit wall clock
};

struct CrossTestReport {
  std::string train_variant;
  std::string test_variant;
  ModelKind model = ModelKind::svm;
  MetricsReport metrics;
  TimeBiasTable time_bias;
  std::vector<ExplanationVector> explanations;
};

// Evaluate a trained model on another variant's samples and audit the
// resulting explanations.
inline CrossTestReport cross_test(const TrainedModel& model,
                                  const std::vector<Sample>& test,
                                  const FeatureCatalog& catalog,
                                  const YearRange& window,
                                  const LimeConfig& lime,
                                  const std::vector<std::size_t>& top_ts) {
  if (test.empty()) throw DataError("cross-test: empty test set");
  CrossTestReport out;
  out.model = model.kind;
  std::vector<std::pair<Label, Label>> truth_pred;
  truth_pred.reserve(test.size());
  for (const Sample& x : test) {
    ExplanationVector e = explain(model, x, lime);
    truth_pred.emplace_back(x.label, e.predicted_label);
    out.explanations.push_back(std::move(e));
  }
  out.metrics = metrics(truth_pred);
  out.time_bias = time_bias_table(out.explanations, catalog, window, top_ts);
  return out;
}

// ---------------------------------------------------------------------------
// Report emission
// ---------------------------------------------------------------------------

inline json to_json(const MetricsReport& m) {
  return json{{"tp", m.tp},           {"fp", m.fp},
              {"fn", m.fn},           {"tn", m.tn},
              {"accuracy", m.accuracy}, {"precision", m.precision},
              {"recall", m.recall},   {"f1", m.f1}};
}

inline json to_json(const TimeBiasTable& t) {
  json groups = json::array();
  for (const TimeBiasGroup& g : t.groups) {
    json cells = json::array();
    for (const TimeBiasCell& c : g.cells) {
      cells.push_back({{"top_t", c.top_t},
                       {"containment_added", c.containment_added},
                       {"containment_removed", c.containment_removed},
                       {"composition_added", c.composition_added},
                       {"composition_removed", c.composition_removed}});
    }
    groups.push_back({{"group", std::string(to_string(g.group))},
                      {"n_explanations", g.n_explanations},
                      {"cells", std::move(cells)}});
  }
  return json{{"window", {t.window.first, t.window.last}},
              {"lifecycle_metadata", t.lifecycle_metadata},
              {"groups", std::move(groups)}};
}

namespace detail {

inline json top_list_json(const FeatureImportanceSummary& s,
                          const FeatureCatalog& catalog, std::size_t n) {
  json out = json::array();
  for (std::uint32_t f : top_features(s.avg_fi, n)) {
    out.push_back({{"feature_id", f},
                   {"name", catalog.features[f].name},
                   {"avg_fi", s.avg_fi[f]}});
  }
  return out;
}

}  // namespace detail

// Deterministic JSON report; identical inputs give identical bytes (no wall
// clock, sorted object keys, shortest-round-trip floats).
inline json report_json(const std::vector<RunRecord>& runs,
                        const FeatureCatalog& catalog) {
  json out{{"audit_schema", std::string(kAuditSchemaVersion)}};
  json jruns = json::array();
  for (const RunRecord& r : runs) {
    std::size_t top_n =
        r.importance_malware.top_ts.empty() ? 10 : r.importance_malware.top_ts[0];
    json fold_metrics = json::array();
    for (const MetricsReport& m : r.fold_metrics) {
      fold_metrics.push_back(to_json(m));
    }
    jruns.push_back(
        {{"variant", r.variant},
         {"model", std::string(to_string(r.model))},
         {"folds", r.folds},
         {"folds_completed", r.folds_completed},
         {"timed_out", r.timed_out},
         {"pooled", to_json(r.pooled)},
         {"fold_metrics", std::move(fold_metrics)},
         {"time_bias", to_json(r.time_bias)},
         {"top_features",
          {{"malware",
            detail::top_list_json(r.importance_malware, catalog, top_n)},
           {"benign",
            detail::top_list_json(r.importance_benign, catalog, top_n)}}}});
  }
  out["runs"] = std::move(jruns);
  return out;
}

// CSV rows keyed (run, class, T, lifecycle); the run key is
// "<variant>/<model>" since several model kinds can share a variant. Values
// are fixed 4-decimal.
inline std::string report_csv(const std::vector<RunRecord>& runs) {
  std::string out =
      "variant,class,T,lifecycle,containment,composition,accuracy,precision,"
      "recall,f1\n";
  char buf[256];
  for (const RunRecord& r : runs) {
    std::string key = r.variant + "/" + std::string(to_string(r.model));
    for (const TimeBiasGroup& g : r.time_bias.groups) {
      for (const TimeBiasCell& c : g.cells) {
        for (int lifecycle = 0; lifecycle < 2; ++lifecycle) {
          bool added = lifecycle == 0;
          std::snprintf(buf, sizeof buf,
                        "%s,%s,%zu,%s,%.4f,%.4f,%.4f,%.4f,%.4f,%.4f\n",
                        key.c_str(), std::string(to_string(g.group)).c_str(),
                        c.top_t, added ? "added" : "removed",
                        added ? c.containment_added : c.containment_removed,
                        added ? c.composition_added : c.composition_removed,
                        r.pooled.accuracy, r.pooled.precision, r.pooled.recall,
                        r.pooled.f1);
          out += buf;
        }
      }
    }
  }
  return out;
}

// Same CSV, rebuilt from an already-emitted JSON report.
inline std::string report_csv_from_json(const json& report) {
  if (!report.contains("audit_schema") ||
      report.at("audit_schema").get<std::string>() != kAuditSchemaVersion) {
    throw DataError("report: missing or unsupported audit_schema");
  }
  std::string out =
      "variant,class,T,lifecycle,containment,composition,accuracy,precision,"
      "recall,f1\n";
  char buf[256];
  for (const json& run : report.at("runs")) {
    std::string key = run.at("variant").get<std::string>() + "/" +
                      run.at("model").get<std::string>();
    const json& pooled = run.at("pooled");
    for (const json& g : run.at("time_bias").at("groups")) {
      std::string group = g.at("group").get<std::string>();
      for (const json& c : g.at("cells")) {
        for (int lifecycle = 0; lifecycle < 2; ++lifecycle) {
          bool added = lifecycle == 0;
          std::snprintf(
              buf, sizeof buf, "%s,%s,%zu,%s,%.4f,%.4f,%.4f,%.4f,%.4f,%.4f\n",
              key.c_str(), group.c_str(), c.at("top_t").get<std::size_t>(),
              added ? "added" : "removed",
              c.at(added ? "containment_added" : "containment_removed")
                  .get<double>(),
              c.at(added ? "composition_added" : "composition_removed")
                  .get<double>(),
              pooled.at("accuracy").get<double>(),
              pooled.at("precision").get<double>(),
              pooled.at("recall").get<double>(),
              pooled.at("f1").get<double>());
          out += buf;
        }
      }
    }
  }
  return out;
}

// One line per explanation: predicted label and the top-n features by value.
inline void write_explanations_jsonl(
    const std::vector<ExplanationVector>& explns,
    const FeatureCatalog& catalog, const std::string& path,
    std::size_t top_n) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ComputeError("cannot open '" + path + "' for writing");
  for (const ExplanationVector& e : explns) {
    json top = json::array();
    for (std::uint32_t f : top_features(e.values, top_n)) {
      top.push_back({{"feature_id", f},
                     {"name", catalog.features[f].name},
                     {"value", e.values[f]}});
    }
    out << json{{"sample_id", e.sample_id},
                {"method", std::string(to_string(e.method))},
                {"predicted_label", std::string(to_string(e.predicted_label))},
                {"top", std::move(top)}}
               .dump()
        << '\n';
  }
  out.flush();
  if (!out) throw ComputeError("write failure on '" + path + "'");
}

// Dense sidecar: row-major N x d of little-endian 64-bit floats, rows in
// explanation order.
inline void write_explanations_dense(
    const std::vector<ExplanationVector>& explns, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ComputeError("cannot open '" + path + "' for writing");
  for (const ExplanationVector& e : explns) {
    out.write(reinterpret_cast<const char*>(e.values.data()),
              static_cast<std::streamsize>(e.values.size() * sizeof(double)));
  }
  out.flush();
  if (!out) throw ComputeError("write failure on '" + path + "'");
}

}  // namespace malaudit
