#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "malaudit/audit.hpp"
#include "malaudit/corpus.hpp"
#include "malaudit/errors.hpp"
#include "malaudit/explainers.hpp"
#include "malaudit/learners.hpp"
#include "malaudit/variants.hpp"

namespace malaudit {

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

struct ExperimentConfig {
  std::string corpus_path;          // exclusive with synth
  std::optional<SynthSpec> synth;
  std::vector<std::string> variant_names;  // built-in settings by name
  std::vector<VariantSpec> variant_specs;  // explicit settings
  std::vector<ModelKind> models{ModelKind::svm};
  int folds = 10;
  std::uint64_t seed = 42;
  int per_year_per_class = 0;  // 0 = min (year,label) cell of the corpus
  std::vector<std::size_t> top_ts{10, 20};
  LimeConfig lime;
  ModelHyperparams hyper;
  std::string out_dir;
  int jobs = 0;  // 0 = hardware concurrency
  bool group_by_true_label = false;  // sensitivity: group audits by truth
  bool emit_dense = false;           // raw explanation matrix sidecars
  double cell_timeout_seconds = 600.0;

  void validate() const {
    if (folds < 2) throw DataError("config: folds must be at least 2");
    if (models.empty()) throw DataError("config: no model kinds");
    if (top_ts.empty()) throw DataError("config: no top-T sizes");
    for (std::size_t t : top_ts) {
      if (t == 0) throw DataError("config: top-T sizes must be positive");
    }
    if (cell_timeout_seconds <= 0) {
      throw DataError("config: cell timeout must be positive");
    }
    lime.validate();
  }
};

inline json to_json(const ExperimentConfig& c) {
  json variants = json::array();
  for (const std::string& name : c.variant_names) variants.push_back(name);
  for (const VariantSpec& v : c.variant_specs) variants.push_back(to_json(v));
  json models = json::array();
  for (ModelKind k : c.models) models.push_back(std::string(to_string(k)));
  json j{{"variants", std::move(variants)},
         {"models", std::move(models)},
         {"folds", c.folds},
         {"seed", c.seed},
         {"per_year_per_class", c.per_year_per_class},
         {"top_t", c.top_ts},
         {"lime",
          {{"n_perturbations", c.lime.n_perturbations},
           {"kernel_width", c.lime.kernel_width},
           {"ridge_penalty", c.lime.ridge_penalty}}},
         {"hyperparams", to_json(c.hyper)},
         {"out_dir", c.out_dir},
         {"jobs", c.jobs},
         {"group_by_true_label", c.group_by_true_label},
         {"emit_dense", c.emit_dense},
         {"cell_timeout_seconds", c.cell_timeout_seconds}};
  if (c.synth) {
    j["synth"] = to_json(*c.synth);
  } else if (!c.corpus_path.empty()) {
    j["corpus"] = c.corpus_path;
  }
  return j;
}

inline ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  if (j.contains("corpus")) c.corpus_path = j.at("corpus").get<std::string>();
  if (j.contains("synth")) c.synth = synth_spec_from_json(j.at("synth"));
  if (j.contains("variants")) {
    for (const json& v : j.at("variants")) {
      if (v.is_string()) {
        c.variant_names.push_back(v.get<std::string>());
      } else {
        c.variant_specs.push_back(variant_spec_from_json(v));
      }
    }
  }
  if (j.contains("models")) {
    c.models.clear();
    for (const json& m : j.at("models")) {
      c.models.push_back(model_kind_from_string(m.get<std::string>()));
    }
  }
  if (j.contains("folds")) c.folds = j.at("folds").get<int>();
  if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("per_year_per_class")) {
    c.per_year_per_class = j.at("per_year_per_class").get<int>();
  }
  if (j.contains("top_t")) {
    c.top_ts = j.at("top_t").get<std::vector<std::size_t>>();
  }
  if (j.contains("lime")) {
    const json& l = j.at("lime");
    if (l.contains("n_perturbations")) {
      c.lime.n_perturbations = l.at("n_perturbations").get<int>();
    }
    if (l.contains("kernel_width")) {
      c.lime.kernel_width = l.at("kernel_width").get<double>();
    }
    if (l.contains("ridge_penalty")) {
      c.lime.ridge_penalty = l.at("ridge_penalty").get<double>();
    }
  }
  if (j.contains("hyperparams")) {
    c.hyper = hyperparams_from_json(j.at("hyperparams"));
  }
  if (j.contains("out_dir")) c.out_dir = j.at("out_dir").get<std::string>();
  if (j.contains("jobs")) c.jobs = j.at("jobs").get<int>();
  if (j.contains("group_by_true_label")) {
    c.group_by_true_label = j.at("group_by_true_label").get<bool>();
  }
  if (j.contains("emit_dense")) {
    c.emit_dense = j.at("emit_dense").get<bool>();
  }
  if (j.contains("cell_timeout_seconds")) {
    c.cell_timeout_seconds = j.at("cell_timeout_seconds").get<double>();
  }
  return c;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open config file '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw DataError("parse error in config '" + path + "': " + e.what());
  }
  try {
    return config_from_json(j);
  } catch (const json::exception& e) {
    throw DataError("invalid config '" + path + "': " + e.what());
  }
}

inline Corpus resolve_corpus(const ExperimentConfig& cfg) {
  if (cfg.synth && !cfg.corpus_path.empty()) {
    throw DataError("config: both a corpus path and a synthetic spec given");
  }
  if (cfg.synth) return generate_synthetic(*cfg.synth);
  if (!cfg.corpus_path.empty()) return load_corpus(cfg.corpus_path);
  throw DataError("config: neither a corpus path nor a synthetic spec given");
}

// ---------------------------------------------------------------------------
// Variant resolution
// ---------------------------------------------------------------------------

// Largest per-(year,class) draw every cell of the corpus can satisfy.
inline int derived_per_year(const Corpus& corpus) {
  YearRange span = corpus.year_span();
  std::size_t best = std::numeric_limits<std::size_t>::max();
  auto cells = corpus.cell_index();
  for (int y = span.first; y <= span.last; ++y) {
    for (Label l : {Label::malware, Label::benign}) {
      auto it = cells.find({y, l});
      std::size_t have = it == cells.end() ? 0 : it->second.size();
      best = std::min(best, have);
    }
  }
  if (best == 0) {
    throw DataError(
        "corpus has an empty (year,label) cell; set per_year_per_class "
        "explicitly");
  }
  return static_cast<int>(best);
}

inline std::vector<VariantSpec> resolve_variant_specs(
    const ExperimentConfig& cfg, const Corpus& corpus) {
  int per_year = cfg.per_year_per_class > 0 ? cfg.per_year_per_class
                                            : derived_per_year(corpus);
  std::vector<VariantSpec> out;
  if (!cfg.variant_names.empty()) {
    std::vector<VariantSpec> builtin =
        builtin_specs(corpus.year_span(), per_year, cfg.seed);
    for (const std::string& name : cfg.variant_names) {
      auto it = std::find_if(builtin.begin(), builtin.end(),
                             [&](const VariantSpec& v) { return v.name == name; });
      if (it == builtin.end()) {
        throw DataError("unknown built-in variant '" + name +
                        "' (expected baseline, v1, v2, v3 or v4)");
      }
      out.push_back(*it);
    }
  }
  for (VariantSpec v : cfg.variant_specs) {
    if (v.per_year_per_class == 0) v.per_year_per_class = per_year;
    if (v.seed == 0) v.seed = seed_mix(cfg.seed, "variant", v.name);
    out.push_back(std::move(v));
  }
  if (out.empty()) throw DataError("config: no variants configured");
  return out;
}

// ---------------------------------------------------------------------------
// Cell execution
// ---------------------------------------------------------------------------

namespace detail {

template <class Fn>
void rethrow_with_context(const std::string& ctx, Fn&& fn) {
  try {
    fn();
  } catch (const UsageError& e) {
    throw UsageError(ctx + ": " + e.what());
  } catch (const DataError& e) {
    throw DataError(ctx + ": " + e.what());
  } catch (const ComputeError& e) {
    throw ComputeError(ctx + ": " + e.what());
  }
}

// Index-ordered parallel map with deterministic first-error propagation.
template <class Fn>
void parallel_for(std::size_t n, int jobs, Fn&& fn) {
  if (n == 0) return;
  if (jobs <= 0) {
    unsigned hw = std::thread::hardware_concurrency();
    jobs = hw == 0 ? 1 : static_cast<int>(hw);
  }
  std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(jobs), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (;;) {
        std::size_t i = next.fetch_add(1);
        if (i >= n) return;
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (std::thread& t : pool) t.join();
  for (std::exception_ptr& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace detail

// k-fold cross-validated training of one model kind on one variant: every
// sample is explained exactly once, by the model of the fold that held it
// out. The cell timeout is cooperative (checked between folds); a timed-out
// record keeps the folds that finished and is flagged partial.
inline RunRecord run_cell(const Corpus& corpus, const Variant& variant,
                          const FoldAssignment& folds, ModelKind kind,
                          const ExperimentConfig& cfg) {
  auto started = std::chrono::steady_clock::now();
  RunRecord rec;
  rec.variant = variant.spec.name;
  rec.model = kind;
  rec.folds = folds.k;

  YearRange window = corpus.year_span();
  std::vector<std::optional<ExplanationVector>> by_pos(variant.samples.size());
  long tp = 0, fp = 0, fn = 0, tn = 0;

  detail::rethrow_with_context(
      "variant '" + variant.spec.name + "' model '" +
          std::string(to_string(kind)) + "'",
      [&] {
        LimeConfig lime = cfg.lime;
        lime.seed = seed_mix(cfg.seed, "lime", variant.spec.name,
                             std::string_view(to_string(kind)));
        for (int f = 0; f < folds.k; ++f) {
          double elapsed = std::chrono::duration<double>(
                               std::chrono::steady_clock::now() - started)
                               .count();
          if (elapsed > cfg.cell_timeout_seconds) {
            rec.timed_out = true;
            break;
          }
          std::vector<Sample> train;
          std::vector<std::size_t> held;
          for (std::size_t i = 0; i < variant.samples.size(); ++i) {
            if (folds.fold_of[i] == f) {
              held.push_back(i);
            } else {
              train.push_back(variant.samples[i]);
            }
          }
          std::uint64_t train_seed =
              seed_mix(cfg.seed, "cell", variant.spec.name,
                       std::string_view(to_string(kind)), f);
          TrainedModel model = fit_model(kind, train, corpus.catalog.size(),
                                         cfg.hyper, train_seed);
          long ftp = 0, ffp = 0, ffn = 0, ftn = 0;
          for (std::size_t i : held) {
            const Sample& x = variant.samples[i];
            ExplanationVector e = explain(model, x, lime);
            bool truth_m = x.label == Label::malware;
            bool pred_m = e.predicted_label == Label::malware;
            ftp += (truth_m && pred_m);
            ffn += (truth_m && !pred_m);
            ffp += (!truth_m && pred_m);
            ftn += (!truth_m && !pred_m);
            by_pos[i] = std::move(e);
          }
          rec.fold_metrics.push_back(metrics_from_counts(ftp, ffp, ffn, ftn));
          tp += ftp;
          fp += ffp;
          fn += ffn;
          tn += ftn;
          ++rec.folds_completed;
        }
      });

  rec.pooled = metrics_from_counts(tp, fp, fn, tn);
  std::vector<Label> group_labels;
  for (std::size_t i = 0; i < by_pos.size(); ++i) {
    if (!by_pos[i]) continue;
    group_labels.push_back(cfg.group_by_true_label
                               ? variant.samples[i].label
                               : by_pos[i]->predicted_label);
    rec.explanations.push_back(std::move(*by_pos[i]));
  }

  std::vector<ExplanationVector> mal, ben;
  for (std::size_t i = 0; i < rec.explanations.size(); ++i) {
    (group_labels[i] == Label::malware ? mal : ben)
        .push_back(rec.explanations[i]);
  }
  rec.importance_malware =
      importance_summary(mal, corpus.catalog.size(), cfg.top_ts);
  rec.importance_benign =
      importance_summary(ben, corpus.catalog.size(), cfg.top_ts);

  // Same grouping feeds the time-bias table.
  std::vector<ExplanationVector> regrouped = rec.explanations;
  for (std::size_t i = 0; i < regrouped.size(); ++i) {
    regrouped[i].predicted_label = group_labels[i];
  }
  rec.time_bias =
      time_bias_table(regrouped, corpus.catalog, window, cfg.top_ts);

  rec.duration_seconds = std::chrono::duration<double>(
                             std::chrono::steady_clock::now() - started)
                             .count();
  return rec;
}

// ---------------------------------------------------------------------------
// Experiments: (variant x model) cells
// ---------------------------------------------------------------------------

inline std::vector<RunRecord> run_experiment(const ExperimentConfig& cfg,
                                             const Corpus& corpus) {
  cfg.validate();
  std::vector<VariantSpec> specs = resolve_variant_specs(cfg, corpus);

  // Variants and folds are shared by every model kind on the same variant.
  std::vector<Variant> variants;
  std::vector<FoldAssignment> folds;
  for (const VariantSpec& spec : specs) {
    Variant v = build_variant(corpus, spec);
    folds.push_back(
        stratified_kfold(v, cfg.folds, seed_mix(cfg.seed, "folds", spec.name)));
    variants.push_back(std::move(v));
  }

  struct CellRef {
    std::size_t variant;
    ModelKind kind;
  };
  std::vector<CellRef> cells;
  for (std::size_t vi = 0; vi < variants.size(); ++vi) {
    for (ModelKind kind : cfg.models) cells.push_back({vi, kind});
  }

  std::vector<RunRecord> records(cells.size());
  detail::parallel_for(cells.size(), cfg.jobs, [&](std::size_t i) {
    records[i] = run_cell(corpus, variants[cells[i].variant],
                          folds[cells[i].variant], cells[i].kind, cfg);
  });
  return records;
}

inline std::vector<RunRecord> run_experiment(const ExperimentConfig& cfg) {
  Corpus corpus = resolve_corpus(cfg);
  return run_experiment(cfg, corpus);
}

// ---------------------------------------------------------------------------
// Year sweep: malware era pinned, benign era and class ratio vary
// ---------------------------------------------------------------------------

inline std::vector<RunRecord> run_year_sweep(const ExperimentConfig& cfg,
                                             const Corpus& corpus,
                                             int malware_year,
                                             const std::vector<Ratio>& ratios) {
  cfg.validate();
  YearRange span = corpus.year_span();
  if (!span.contains(malware_year)) {
    throw DataError("year sweep: malware year " + std::to_string(malware_year) +
                    " outside the corpus span");
  }
  int per_year = cfg.per_year_per_class > 0 ? cfg.per_year_per_class
                                            : derived_per_year(corpus);
  std::vector<int> benign_years;
  for (int y = span.first; y <= span.last; ++y) benign_years.push_back(y);
  std::vector<VariantSpec> specs = year_sweep_specs(
      malware_year, benign_years, ratios, per_year, cfg.seed);

  ExperimentConfig sweep_cfg = cfg;
  sweep_cfg.variant_names.clear();
  sweep_cfg.variant_specs = std::move(specs);
  return run_experiment(sweep_cfg, corpus);
}

// ---------------------------------------------------------------------------
// Cross-test: train on one variant, evaluate and audit on another
// ---------------------------------------------------------------------------

// The full-variant retrain reuses the training seed of the best-F1 fold of a
// cross-validation pass on the training variant (hyperparameters are
// otherwise constant across folds).
inline CrossTestReport run_cross_test(const ExperimentConfig& cfg,
                                      const Corpus& corpus,
                                      const std::string& train_name,
                                      const std::string& test_name,
                                      ModelKind kind,
                                      bool allow_overlap = false) {
  cfg.validate();
  ExperimentConfig resolve_cfg = cfg;
  resolve_cfg.variant_names = {train_name, test_name};
  resolve_cfg.variant_specs.clear();
  std::vector<VariantSpec> specs = resolve_variant_specs(resolve_cfg, corpus);
  Variant train_v = build_variant(corpus, specs[0]);
  Variant test_v = build_variant(corpus, specs[1]);

  if (!allow_overlap) {
    std::vector<std::string_view> ids;
    ids.reserve(train_v.samples.size());
    for (const Sample& s : train_v.samples) ids.push_back(s.sample_id);
    std::sort(ids.begin(), ids.end());
    std::size_t overlap = 0;
    for (const Sample& s : test_v.samples) {
      overlap += std::binary_search(ids.begin(), ids.end(),
                                    std::string_view(s.sample_id));
    }
    if (overlap > 0) {
      throw DataError("cross-test: variants '" + train_name + "' and '" +
                      test_name + "' share " + std::to_string(overlap) +
                      " samples (pass allow_overlap to permit)");
    }
  }

  FoldAssignment folds = stratified_kfold(
      train_v, cfg.folds, seed_mix(cfg.seed, "folds", train_v.spec.name));
  int best_fold = 0;
  double best_f1 = -1.0;
  for (int f = 0; f < folds.k; ++f) {
    std::vector<Sample> train;
    std::vector<const Sample*> held;
    for (std::size_t i = 0; i < train_v.samples.size(); ++i) {
      if (folds.fold_of[i] == f) {
        held.push_back(&train_v.samples[i]);
      } else {
        train.push_back(train_v.samples[i]);
      }
    }
    std::uint64_t train_seed = seed_mix(cfg.seed, "cell", train_v.spec.name,
                                        std::string_view(to_string(kind)), f);
    TrainedModel model =
        fit_model(kind, train, corpus.catalog.size(), cfg.hyper, train_seed);
    long tp = 0, fp = 0, fn = 0, tn = 0;
    for (const Sample* x : held) {
      bool truth_m = x->label == Label::malware;
      bool pred_m = model.predict(*x) == Label::malware;
      tp += (truth_m && pred_m);
      fn += (truth_m && !pred_m);
      fp += (!truth_m && pred_m);
      tn += (!truth_m && !pred_m);
    }
    double f1 = metrics_from_counts(tp, fp, fn, tn).f1;
    if (f1 > best_f1) {
      best_f1 = f1;
      best_fold = f;
    }
  }

  std::uint64_t retrain_seed =
      seed_mix(cfg.seed, "cell", train_v.spec.name,
               std::string_view(to_string(kind)), best_fold);
  TrainedModel model = fit_model(kind, train_v.samples, corpus.catalog.size(),
                                 cfg.hyper, retrain_seed);
  LimeConfig lime = cfg.lime;
  lime.seed = seed_mix(cfg.seed, "lime", "crosstest", train_v.spec.name,
                       test_v.spec.name, std::string_view(to_string(kind)));
  CrossTestReport report =
      cross_test(model, test_v.samples, corpus.catalog, corpus.year_span(),
                 lime, cfg.top_ts);
  report.train_variant = train_name;
  report.test_variant = test_name;
  return report;
}

inline json to_json(const CrossTestReport& r) {
  return json{{"audit_schema", std::string(kAuditSchemaVersion)},
              {"train_variant", r.train_variant},
              {"test_variant", r.test_variant},
              {"model", std::string(to_string(r.model))},
              {"metrics", to_json(r.metrics)},
              {"time_bias", to_json(r.time_bias)}};
}

// ---------------------------------------------------------------------------
// Output files
// ---------------------------------------------------------------------------

inline void write_text_file(const std::string& path, const std::string& body) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ComputeError("cannot open '" + path + "' for writing");
  out << body;
  out.flush();
  if (!out) throw ComputeError("write failure on '" + path + "'");
}

// report.json + report.csv + per-cell explanation files under out_dir.
inline void write_outputs(const ExperimentConfig& cfg,
                          const FeatureCatalog& catalog,
                          const std::vector<RunRecord>& records) {
  if (cfg.out_dir.empty()) throw DataError("config: out_dir is empty");
  std::error_code ec;
  std::filesystem::create_directories(cfg.out_dir, ec);
  if (ec) {
    throw ComputeError("cannot create output directory '" + cfg.out_dir +
                       "': " + ec.message());
  }
  std::filesystem::path dir(cfg.out_dir);
  write_text_file((dir / "report.json").string(),
                  report_json(records, catalog).dump(2) + "\n");
  write_text_file((dir / "report.csv").string(), report_csv(records));
  std::size_t top_n = cfg.top_ts.empty() ? 10 : cfg.top_ts[0];
  for (const RunRecord& r : records) {
    std::string stem =
        "explanations_" + r.variant + "_" + std::string(to_string(r.model));
    write_explanations_jsonl(r.explanations, catalog,
                             (dir / (stem + ".jsonl")).string(), top_n);
    if (cfg.emit_dense) {
      write_explanations_dense(r.explanations,
                               (dir / (stem + ".bin")).string());
    }
  }
}

}  // namespace malaudit
