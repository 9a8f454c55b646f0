#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "malaudit/audit.hpp"
#include "malaudit/corpus.hpp"
#include "malaudit/errors.hpp"
#include "malaudit/harness.hpp"
#include "malaudit/learners.hpp"
#include "malaudit/variants.hpp"

namespace malaudit {

namespace detail {

inline std::string fmt4(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

inline ModelKind parse_model_kind(const std::string& s) {
  try {
    return model_kind_from_string(s);
  } catch (const DataError&) {
    throw UsageError("unknown model kind '" + s +
                     "' (expected svm, attention, mlp, knn or rf)");
  }
}

inline std::vector<Ratio> parse_ratios(const std::string& s) {
  std::vector<Ratio> out;
  std::size_t at = 0;
  while (at <= s.size()) {
    std::size_t comma = s.find(',', at);
    std::string part =
        s.substr(at, comma == std::string::npos ? std::string::npos
                                                : comma - at);
    std::size_t colon = part.find(':');
    Ratio r;
    try {
      if (part.empty() || colon == std::string::npos) throw std::exception();
      r.malware = std::stoi(part.substr(0, colon));
      r.benign = std::stoi(part.substr(colon + 1));
    } catch (...) {
      throw UsageError("bad ratio list '" + s +
                       "' (expected e.g. 1:1,4:1,1:4)");
    }
    if (r.malware <= 0 || r.benign <= 0) {
      throw UsageError("ratio parts must be positive in '" + s + "'");
    }
    out.push_back(r);
    if (comma == std::string::npos) break;
    at = comma + 1;
  }
  return out;
}

inline SynthSpec preset_synth_spec(const std::string& name) {
  if (name == "default") return default_synth_spec();
  if (name == "androzoo-ratio") return androzoo_ratio_synth_spec();
  if (name == "unbiased") return unbiased_synth_spec();
  throw UsageError("unknown preset '" + name +
                   "' (expected default, androzoo-ratio or unbiased)");
}

inline SynthSpec load_synth_spec(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open synthetic spec '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw DataError("parse error in synthetic spec '" + path +
                    "': " + e.what());
  }
  try {
    return synth_spec_from_json(j);
  } catch (const json::exception& e) {
    throw DataError("invalid synthetic spec '" + path + "': " + e.what());
  }
}

inline void print_run_lines(std::ostream& out,
                            const std::vector<RunRecord>& records) {
  for (const RunRecord& r : records) {
    out << "run variant=" << r.variant << " model=" << to_string(r.model)
        << " folds=" << r.folds << " completed=" << r.folds_completed
        << " timed_out=" << (r.timed_out ? "true" : "false")
        << " accuracy=" << fmt4(r.pooled.accuracy)
        << " precision=" << fmt4(r.pooled.precision)
        << " recall=" << fmt4(r.pooled.recall) << " f1=" << fmt4(r.pooled.f1)
        << " duration_s=" << fmt4(r.duration_seconds) << "\n";
    for (const TimeBiasGroup& g : r.time_bias.groups) {
      for (const TimeBiasCell& c : g.cells) {
        out << "bias variant=" << r.variant << " model=" << to_string(r.model)
            << " class=" << to_string(g.group) << " T=" << c.top_t
            << " containment_added=" << fmt4(c.containment_added)
            << " containment_removed=" << fmt4(c.containment_removed)
            << " composition_added=" << fmt4(c.composition_added)
            << " composition_removed=" << fmt4(c.composition_removed) << "\n";
      }
    }
  }
}

}  // namespace detail

// Full command surface, in-process so tests can drive it without spawning.
// Exit codes: 0 success, 1 usage, 2 data validation, 3 runtime.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out,
                   std::ostream& err) {
  CLI::App app{"temporal-bias audits for explainable malware classifiers"};
  app.require_subcommand(1);

  // gen
  auto* gen = app.add_subcommand("gen", "generate a synthetic corpus");
  std::string gen_preset, gen_spec, gen_out;
  std::uint64_t gen_seed = 0;
  auto* gen_preset_opt =
      gen->add_option("--preset", gen_preset,
                      "preset: default, androzoo-ratio or unbiased");
  auto* gen_spec_opt =
      gen->add_option("--spec", gen_spec, "synthetic spec JSON file");
  gen_spec_opt->excludes(gen_preset_opt);
  gen->add_option("--out", gen_out, "output corpus path (JSONL)")->required();
  auto* gen_seed_opt = gen->add_option("--seed", gen_seed, "override the seed");

  // variant
  auto* variant = app.add_subcommand("variant", "draw a dataset variant");
  std::string var_corpus, var_name, var_spec, var_out;
  int var_per_year = 0;
  std::uint64_t var_seed = 42;
  variant->add_option("--corpus", var_corpus, "corpus JSONL path")->required();
  auto* var_name_opt = variant->add_option(
      "--variant", var_name, "built-in name: baseline, v1, v2, v3 or v4");
  auto* var_spec_opt =
      variant->add_option("--spec", var_spec, "variant spec JSON file");
  var_spec_opt->excludes(var_name_opt);
  variant->add_option("--out", var_out, "output path (corpus JSONL)")
      ->required();
  variant->add_option("--per-year", var_per_year,
                      "samples per (year,class); 0 derives the maximum");
  variant->add_option("--seed", var_seed, "master seed");

  // train
  auto* train = app.add_subcommand("train", "train one model on a variant");
  std::string tr_corpus, tr_name, tr_spec, tr_model = "svm", tr_out, tr_config;
  int tr_per_year = 0;
  std::uint64_t tr_seed = 42;
  train->add_option("--corpus", tr_corpus, "corpus JSONL path")->required();
  auto* tr_name_opt = train->add_option(
      "--variant", tr_name, "built-in name: baseline, v1, v2, v3 or v4");
  auto* tr_spec_opt =
      train->add_option("--spec", tr_spec, "variant spec JSON file");
  tr_spec_opt->excludes(tr_name_opt);
  train->add_option("--model", tr_model, "svm, attention, mlp, knn or rf");
  train->add_option("--out", tr_out, "output model path (JSON)")->required();
  train->add_option("--config", tr_config,
                    "experiment config JSON for hyperparameters");
  train->add_option("--per-year", tr_per_year,
                    "samples per (year,class); 0 derives the maximum");
  train->add_option("--seed", tr_seed, "master seed");

  // audit
  auto* audit = app.add_subcommand(
      "audit", "run cross-validated audits from an experiment config");
  std::string au_config, au_corpus, au_out_dir;
  int au_jobs = -1;
  std::uint64_t au_seed = 0;
  audit->add_option("--config", au_config, "experiment config JSON file")
      ->required();
  audit->add_option("--corpus", au_corpus, "override the config corpus path");
  audit->add_option("--out-dir", au_out_dir,
                    "override the config output directory");
  audit->add_option("--jobs", au_jobs, "worker threads (0 = all cores)");
  auto* au_seed_opt =
      audit->add_option("--seed", au_seed, "override the config seed");

  // sweep
  auto* sweep = app.add_subcommand(
      "sweep", "year sweep: malware era pinned, benign era and ratio vary");
  std::string sw_corpus, sw_out_dir, sw_model = "svm",
              sw_ratios = "1:1,4:1,1:4";
  int sw_malware_year = 0, sw_per_year = 0, sw_folds = 10, sw_jobs = 0;
  std::uint64_t sw_seed = 42;
  sweep->add_option("--corpus", sw_corpus, "corpus JSONL path")->required();
  sweep->add_option("--out-dir", sw_out_dir, "output directory")->required();
  sweep->add_option("--model", sw_model, "svm, attention, mlp, knn or rf");
  sweep->add_option("--ratios", sw_ratios, "malware:benign list");
  auto* sw_year_opt = sweep->add_option("--malware-year", sw_malware_year,
                                        "pinned malware year");
  sweep->add_option("--per-year", sw_per_year,
                    "samples per (year,class); 0 derives the maximum");
  sweep->add_option("--folds", sw_folds, "cross-validation folds");
  sweep->add_option("--jobs", sw_jobs, "worker threads (0 = all cores)");
  sweep->add_option("--seed", sw_seed, "master seed");

  // crosstest
  auto* crosstest = app.add_subcommand(
      "crosstest", "train on one variant, test and audit on another");
  std::string ct_corpus, ct_train, ct_test, ct_model = "svm", ct_out;
  int ct_per_year = 0, ct_folds = 10;
  std::uint64_t ct_seed = 42;
  bool ct_allow_overlap = false;
  crosstest->add_option("--corpus", ct_corpus, "corpus JSONL path")
      ->required();
  crosstest->add_option("--train", ct_train, "training variant name")
      ->required();
  crosstest->add_option("--test", ct_test, "test variant name")->required();
  crosstest->add_option("--model", ct_model, "svm, attention, mlp, knn or rf");
  crosstest->add_option("--out", ct_out, "write the report JSON here");
  crosstest->add_option("--per-year", ct_per_year,
                        "samples per (year,class); 0 derives the maximum");
  crosstest->add_option("--folds", ct_folds, "folds for best-seed selection");
  crosstest->add_option("--seed", ct_seed, "master seed");
  crosstest->add_flag("--allow-overlap", ct_allow_overlap,
                      "permit overlapping sample ids between the variants");

  // report
  auto* report = app.add_subcommand("report", "convert report.json to CSV");
  std::string rp_in, rp_out;
  report->add_option("--in", rp_in, "report.json path")->required();
  report->add_option("--out", rp_out, "report.csv path")->required();

  std::vector<const char*> argv;
  argv.reserve(args.size() + 1);
  argv.push_back("malaudit");
  for (const std::string& a : args) argv.push_back(a.c_str());

  try {
    try {
      app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
      int rc = app.exit(e, out, err);
      return rc == 0 ? 0 : 1;
    }

    if (gen->parsed()) {
      if (gen_preset.empty() && gen_spec.empty()) {
        throw UsageError("gen: pass --preset or --spec");
      }
      SynthSpec spec = gen_spec.empty() ? detail::preset_synth_spec(gen_preset)
                                        : detail::load_synth_spec(gen_spec);
      if (gen_seed_opt->count() > 0) spec.seed = gen_seed;
      Corpus corpus = generate_synthetic(spec);
      save_corpus(corpus, gen_out);
      std::size_t malware = 0;
      for (const Sample& s : corpus.samples) {
        malware += (s.label == Label::malware);
      }
      YearRange span = corpus.year_span();
      out << "corpus path=" << gen_out << " samples=" << corpus.samples.size()
          << " features=" << corpus.catalog.size() << " years=" << span.first
          << "-" << span.last << " malware_ratio="
          << detail::fmt4(static_cast<double>(malware) /
                          static_cast<double>(corpus.samples.size()))
          << "\n";
      return 0;
    }

    if (variant->parsed()) {
      Corpus corpus = load_corpus(var_corpus);
      ExperimentConfig cfg;
      cfg.seed = var_seed;
      cfg.per_year_per_class = var_per_year;
      if (!var_name.empty()) {
        cfg.variant_names = {var_name};
      } else if (!var_spec.empty()) {
        std::ifstream in(var_spec, std::ios::binary);
        if (!in) throw DataError("cannot open variant spec '" + var_spec + "'");
        json j;
        try {
          j = json::parse(in);
        } catch (const json::exception& e) {
          throw DataError("parse error in variant spec '" + var_spec +
                          "': " + e.what());
        }
        cfg.variant_specs = {variant_spec_from_json(j)};
      } else {
        throw UsageError("variant: pass --variant or --spec");
      }
      VariantSpec spec = resolve_variant_specs(cfg, corpus)[0];
      Variant v = build_variant(corpus, spec);
      Corpus drawn;
      drawn.catalog = corpus.catalog;
      drawn.samples = v.samples;
      save_corpus(drawn, var_out);
      out << "variant name=" << spec.name << " path=" << var_out
          << " samples=" << v.samples.size()
          << " malware=" << v.count(Label::malware)
          << " benign=" << v.count(Label::benign) << "\n";
      return 0;
    }

    if (train->parsed()) {
      Corpus corpus = load_corpus(tr_corpus);
      ExperimentConfig cfg;
      if (!tr_config.empty()) cfg = load_experiment_config(tr_config);
      cfg.seed = tr_seed;
      cfg.per_year_per_class = tr_per_year > 0 ? tr_per_year
                                               : cfg.per_year_per_class;
      cfg.variant_specs.clear();
      cfg.variant_names.clear();
      if (!tr_name.empty()) {
        cfg.variant_names = {tr_name};
      } else if (!tr_spec.empty()) {
        std::ifstream in(tr_spec, std::ios::binary);
        if (!in) throw DataError("cannot open variant spec '" + tr_spec + "'");
        cfg.variant_specs = {variant_spec_from_json(json::parse(in))};
      } else {
        throw UsageError("train: pass --variant or --spec");
      }
      ModelKind kind = detail::parse_model_kind(tr_model);
      VariantSpec spec = resolve_variant_specs(cfg, corpus)[0];
      Variant v = build_variant(corpus, spec);
      std::uint64_t train_seed =
          seed_mix(cfg.seed, "train", spec.name,
                   std::string_view(to_string(kind)));
      TrainedModel model = fit_model(kind, v.samples, corpus.catalog.size(),
                                     cfg.hyper, train_seed);
      save_model(model, tr_out);
      out << "model kind=" << to_string(kind) << " variant=" << spec.name
          << " path=" << tr_out << " train_samples=" << v.samples.size();
      if (kind == ModelKind::svm) {
        const auto& m = std::get<LinearSvmModel>(model.impl);
        out << " loss_initial=" << detail::fmt4(m.initial_loss)
            << " loss_final=" << detail::fmt4(m.epoch_losses.back());
      } else if (kind == ModelKind::attention_mlp) {
        const auto& m = std::get<AttentionMlpModel>(model.impl);
        out << " loss_initial=" << detail::fmt4(m.initial_loss)
            << " loss_final=" << detail::fmt4(m.epoch_losses.back());
      } else if (kind == ModelKind::mlp) {
        const auto& m = std::get<MlpModel>(model.impl);
        out << " loss_initial=" << detail::fmt4(m.initial_loss)
            << " loss_final=" << detail::fmt4(m.epoch_losses.back());
      }
      out << "\n";
      return 0;
    }

    if (audit->parsed()) {
      ExperimentConfig cfg = load_experiment_config(au_config);
      if (!au_corpus.empty()) {
        cfg.corpus_path = au_corpus;
        cfg.synth.reset();
      }
      if (!au_out_dir.empty()) cfg.out_dir = au_out_dir;
      if (au_jobs >= 0) cfg.jobs = au_jobs;
      if (au_seed_opt->count() > 0) cfg.seed = au_seed;
      Corpus corpus = resolve_corpus(cfg);
      std::vector<RunRecord> records = run_experiment(cfg, corpus);
      write_outputs(cfg, corpus.catalog, records);
      detail::print_run_lines(out, records);
      out << "audit out_dir=" << cfg.out_dir << " runs=" << records.size()
          << "\n";
      return 0;
    }

    if (sweep->parsed()) {
      Corpus corpus = load_corpus(sw_corpus);
      ExperimentConfig cfg;
      cfg.seed = sw_seed;
      cfg.folds = sw_folds;
      cfg.jobs = sw_jobs;
      cfg.per_year_per_class = sw_per_year;
      cfg.models = {detail::parse_model_kind(sw_model)};
      cfg.out_dir = sw_out_dir;
      int malware_year = sw_year_opt->count() > 0 ? sw_malware_year
                                                  : corpus.year_span().first;
      std::vector<RunRecord> records = run_year_sweep(
          cfg, corpus, malware_year, detail::parse_ratios(sw_ratios));
      write_outputs(cfg, corpus.catalog, records);
      detail::print_run_lines(out, records);
      out << "sweep out_dir=" << cfg.out_dir << " runs=" << records.size()
          << " malware_year=" << malware_year << "\n";
      return 0;
    }

    if (crosstest->parsed()) {
      Corpus corpus = load_corpus(ct_corpus);
      ExperimentConfig cfg;
      cfg.seed = ct_seed;
      cfg.folds = ct_folds;
      cfg.per_year_per_class = ct_per_year;
      ModelKind kind = detail::parse_model_kind(ct_model);
      CrossTestReport rep = run_cross_test(cfg, corpus, ct_train, ct_test,
                                           kind, ct_allow_overlap);
      if (!ct_out.empty()) {
        write_text_file(ct_out, to_json(rep).dump(2) + "\n");
      }
      out << "crosstest train=" << rep.train_variant
          << " test=" << rep.test_variant << " model=" << to_string(rep.model)
          << " accuracy=" << detail::fmt4(rep.metrics.accuracy)
          << " precision=" << detail::fmt4(rep.metrics.precision)
          << " recall=" << detail::fmt4(rep.metrics.recall)
          << " f1=" << detail::fmt4(rep.metrics.f1) << "\n";
      return 0;
    }

    if (report->parsed()) {
      std::ifstream in(rp_in, std::ios::binary);
      if (!in) throw DataError("cannot open report '" + rp_in + "'");
      json j;
      try {
        j = json::parse(in);
      } catch (const json::exception& e) {
        throw DataError("parse error in report '" + rp_in + "': " + e.what());
      }
      std::string csv = report_csv_from_json(j);
      write_text_file(rp_out, csv);
      std::size_t rows = std::count(csv.begin(), csv.end(), '\n');
      out << "report in=" << rp_in << " out=" << rp_out
          << " rows=" << (rows > 0 ? rows - 1 : 0) << "\n";
      return 0;
    }

    throw UsageError("no subcommand given");
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const DataError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const ComputeError& e) {
    err << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 3;
  }
}

}  // namespace malaudit
