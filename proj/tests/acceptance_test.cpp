// Acceptance gate: eight criteria, one printed PASS/FAIL line each.
// Every threshold is pinned here; helper oracles are reimplemented locally so
// the checks stay independent of the library internals they judge.
#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>

#include "helpers.hpp"
#include "malaudit/cli.hpp"

using namespace malaudit;
using testutil::TempDir;
using testutil::read_file;
using testutil::write_file;

namespace {

std::string num(double v) {
  char b[32];
  std::snprintf(b, sizeof b, "%.4f", v);
  return b;
}

// Collects expectations and prints a single verdict line per criterion.
struct Criterion {
  std::string label;
  std::vector<std::string> failures;

  explicit Criterion(std::string l) : label(std::move(l)) {}

  void expect(bool cond, const std::string& what) {
    if (!cond) failures.push_back(what);
    INFO(what);
    CHECK(cond);
  }

  void conclude() const {
    std::cout << "[acceptance] " << label << ": "
              << (failures.empty() ? "PASS" : "FAIL");
    for (const std::string& f : failures) std::cout << "  {" << f << "}";
    std::cout << std::endl;
  }
};

const Corpus& era_biased_corpus() {
  static Corpus c = generate_synthetic(default_synth_spec());
  return c;
}

Sample make_sample(std::string id, Label label,
                   std::vector<std::uint32_t> feats) {
  Sample s;
  s.sample_id = std::move(id);
  s.year = 2015;
  s.label = label;
  std::sort(feats.begin(), feats.end());
  s.present_features = std::move(feats);
  return s;
}

// Linearly separable toy set over d = 10: feature 0 marks malware, feature 1
// marks benign, the rest is noise.
std::vector<Sample> toy_batch(int per_class, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Sample> out;
  for (int i = 0; i < per_class; ++i) {
    for (Label label : {Label::malware, Label::benign}) {
      std::vector<std::uint32_t> feats;
      feats.push_back(label == Label::malware ? 0 : 1);
      for (std::uint32_t f = 2; f < 10; ++f) {
        if (rng.bernoulli(0.3)) feats.push_back(f);
      }
      out.push_back(make_sample(
          (label == Label::malware ? "m" : "b") + std::to_string(i), label,
          std::move(feats)));
    }
  }
  return out;
}

ExplanationVector expl(std::string id, Label predicted,
                       std::vector<double> values) {
  ExplanationVector e;
  e.sample_id = std::move(id);
  e.predicted_label = predicted;
  e.method = ExplainMethod::lime;
  e.values = std::move(values);
  return e;
}

std::vector<ExplanationVector> random_explanations(std::size_t n,
                                                   std::size_t d,
                                                   std::uint64_t seed) {
  Rng rng(seed);
  std::vector<ExplanationVector> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> v(d);
    for (double& x : v) {
      if (rng.bernoulli(0.35)) {
        x = 0.0;
      } else if (rng.bernoulli(0.2)) {
        x = rng.bernoulli(0.5) ? 0.5 : -0.5;  // deliberate ties
      } else {
        x = rng.uniform(-1.0, 1.0);
      }
    }
    out.push_back(expl("e" + std::to_string(i),
                       i % 2 ? Label::benign : Label::malware, std::move(v)));
  }
  return out;
}

// Exhaustive top-T membership: rank by value descending, id ascending,
// zeros excluded. Independent of the library's implementation.
std::vector<std::uint32_t> naive_top(const std::vector<double>& v,
                                     std::size_t T) {
  std::vector<std::pair<double, std::uint32_t>> items;
  for (std::uint32_t i = 0; i < v.size(); ++i) {
    if (v[i] != 0.0) items.emplace_back(v[i], i);
  }
  std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  std::vector<std::uint32_t> out;
  for (std::size_t i = 0; i < items.size() && i < T; ++i) {
    out.push_back(items[i].second);
  }
  return out;
}

// Closed-form weighted ridge over the exhaustive mask design, solved by
// Gaussian elimination with partial pivoting. Returns (intercept, coefs...)
// in the model's malware orientation.
std::vector<double> ridge_oracle(const TrainedModel& model, const Sample& x,
                                 double ridge) {
  std::size_t dp = x.present_features.size();
  std::size_t n_masks = std::size_t{1} << dp;
  double width = 0.75 * std::sqrt(static_cast<double>(dp));
  std::size_t n = dp + 1;
  std::vector<double> G(n * n, 0.0), r(n, 0.0), z(n);

  Sample probe = x;
  for (std::size_t m = 0; m < n_masks; ++m) {
    probe.present_features.clear();
    z[0] = 1.0;
    for (std::size_t i = 0; i < dp; ++i) {
      z[i + 1] = static_cast<double>((m >> i) & 1);
      if ((m >> i) & 1) probe.present_features.push_back(x.present_features[i]);
    }
    double y = model.score(probe);
    double dropped = static_cast<double>(dp - probe.present_features.size());
    double w = std::exp(-(dropped * dropped) / (width * width));
    for (std::size_t i = 0; i < n; ++i) {
      r[i] += w * z[i] * y;
      for (std::size_t j = 0; j < n; ++j) G[i * n + j] += w * z[i] * z[j];
    }
  }
  for (std::size_t i = 1; i < n; ++i) G[i * n + i] += ridge;

  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t row = col + 1; row < n; ++row) {
      if (std::abs(G[row * n + col]) > std::abs(G[piv * n + col])) piv = row;
    }
    for (std::size_t j = 0; j < n; ++j) {
      std::swap(G[col * n + j], G[piv * n + j]);
    }
    std::swap(r[col], r[piv]);
    for (std::size_t row = col + 1; row < n; ++row) {
      double f = G[row * n + col] / G[col * n + col];
      for (std::size_t j = col; j < n; ++j) {
        G[row * n + j] -= f * G[col * n + j];
      }
      r[row] -= f * r[col];
    }
  }
  std::vector<double> beta(n);
  for (std::size_t ii = n; ii > 0; --ii) {
    std::size_t i = ii - 1;
    double sum = r[i];
    for (std::size_t j = i + 1; j < n; ++j) sum -= G[i * n + j] * beta[j];
    beta[i] = sum / G[i * n + i];
  }
  return beta;
}

}  // namespace

TEST_CASE("criterion 1: era-separated training outscores era-aligned") {
  Criterion c("criterion 1 era-separated F1 margins");

  ExperimentConfig cfg;
  cfg.variant_names = {"v1", "v2", "v3", "v4"};
  cfg.models = {ModelKind::svm, ModelKind::attention_mlp};
  cfg.folds = 10;
  cfg.seed = 2026;
  cfg.top_ts = {10, 20};

  auto t0 = std::chrono::steady_clock::now();
  std::vector<RunRecord> records = run_experiment(cfg, era_biased_corpus());
  double secs = std::chrono::duration<double>(
                    std::chrono::steady_clock::now() - t0)
                    .count();
  c.expect(secs < 300.0, "runtime " + num(secs) + "s under five minutes");

  if (records.size() != 8) {
    c.expect(false, "expected 8 runs, got " + std::to_string(records.size()));
    c.conclude();
    return;
  }
  // Variant-major, model order as configured.
  auto f1 = [&](std::size_t variant, std::size_t model) {
    return records[variant * 2 + model].pooled.f1;
  };
  for (std::size_t m : {std::size_t{0}, std::size_t{1}}) {
    std::string name = m == 0 ? "svm" : "attention";
    for (std::size_t mixed : {std::size_t{2}, std::size_t{3}}) {
      std::string vn = mixed == 2 ? "v3" : "v4";
      for (std::size_t aligned : {std::size_t{0}, std::size_t{1}}) {
        std::string an = aligned == 0 ? "v1" : "v2";
        c.expect(f1(mixed, m) >= f1(aligned, m) + 0.05,
                 name + " F1(" + vn + ")=" + num(f1(mixed, m)) + " >= F1(" +
                     an + ")=" + num(f1(aligned, m)) + "+0.05");
      }
    }
  }
  c.conclude();
}

TEST_CASE("criterion 2: cross-era testing collapses") {
  Criterion c("criterion 2 cross-era collapse");
  const Corpus& corpus = era_biased_corpus();

  ExperimentConfig cfg;
  cfg.variant_names = {"v3", "v4"};
  cfg.models = {ModelKind::svm};
  cfg.folds = 10;
  cfg.seed = 2026;
  cfg.top_ts = {10};

  CrossTestReport v4_to_v3 =
      run_cross_test(cfg, corpus, "v4", "v3", ModelKind::svm);
  CrossTestReport v3_to_v4 =
      run_cross_test(cfg, corpus, "v3", "v4", ModelKind::svm);
  c.expect(v4_to_v3.metrics.accuracy < 0.50,
           "acc(v4->v3)=" + num(v4_to_v3.metrics.accuracy) + " < 0.50");
  c.expect(v3_to_v4.metrics.accuracy < 0.50,
           "acc(v3->v4)=" + num(v3_to_v4.metrics.accuracy) + " < 0.50");

  // Same-setting holdout: split the drawn v4 in halves, train on one, test
  // on the other.
  std::vector<VariantSpec> specs = resolve_variant_specs(cfg, corpus);
  Variant v4 = build_variant(corpus, specs[1]);
  std::vector<Sample> train, test;
  for (std::size_t i = 0; i < v4.samples.size(); ++i) {
    (i % 2 ? test : train).push_back(v4.samples[i]);
  }
  TrainedModel model = fit_model(ModelKind::svm, train, corpus.catalog.size(),
                                 cfg.hyper, 91);
  CrossTestReport holdout = cross_test(model, test, corpus.catalog,
                                       corpus.year_span(), cfg.lime, {10});
  c.expect(v4_to_v3.metrics.accuracy < holdout.metrics.accuracy - 0.3,
           "acc(v4->v3)=" + num(v4_to_v3.metrics.accuracy) +
               " < acc(v4->v4 holdout)=" + num(holdout.metrics.accuracy) +
               " - 0.3");
  c.conclude();
}

TEST_CASE("criterion 3: lifecycle containment separates the mixed classes") {
  Criterion c("criterion 3 containment directions");

  ExperimentConfig cfg;
  cfg.variant_names = {"v4"};
  cfg.models = {ModelKind::svm, ModelKind::mlp, ModelKind::attention_mlp,
                ModelKind::knn, ModelKind::random_forest};
  cfg.folds = 10;
  cfg.seed = 2026;
  cfg.top_ts = {10, 20};
  // The direction check needs stable ranks, not tight coefficients; a
  // 150-mask budget keeps the KNN surrogate fits tractable on one core.
  cfg.lime.n_perturbations = 150;

  std::vector<RunRecord> records = run_experiment(cfg, era_biased_corpus());
  if (records.size() != 5) {
    c.expect(false, "expected 5 runs, got " + std::to_string(records.size()));
    c.conclude();
    return;
  }
  for (const RunRecord& rec : records) {
    std::string name(to_string(rec.model));
    const TimeBiasGroup& mal = rec.time_bias.groups[0];
    const TimeBiasGroup& ben = rec.time_bias.groups[1];
    for (std::size_t ti = 0; ti < 2; ++ti) {
      std::string t = "T=" + std::to_string(cfg.top_ts[ti]);
      c.expect(mal.cells[ti].containment_removed >
                   ben.cells[ti].containment_removed,
               name + " " + t + " removed: malware " +
                   num(mal.cells[ti].containment_removed) + " > benign " +
                   num(ben.cells[ti].containment_removed));
      c.expect(ben.cells[ti].containment_added >
                   mal.cells[ti].containment_added,
               name + " " + t + " added: benign " +
                   num(ben.cells[ti].containment_added) + " > malware " +
                   num(mal.cells[ti].containment_added));
    }
  }
  c.conclude();
}

TEST_CASE("criterion 4: the year sweep rewards the temporal gap") {
  Criterion c("criterion 4 year sweep trend");
  const Corpus& corpus = era_biased_corpus();

  ExperimentConfig cfg;
  cfg.models = {ModelKind::svm};
  cfg.folds = 10;
  cfg.seed = 2026;
  cfg.top_ts = {10};

  std::vector<Ratio> ratios = {{1, 1}, {4, 1}, {1, 4}};
  std::vector<RunRecord> records = run_year_sweep(cfg, corpus, 2010, ratios);
  if (records.size() != 33) {
    c.expect(false, "expected 33 runs, got " + std::to_string(records.size()));
    c.conclude();
    return;
  }
  auto rec = [&](int year, std::size_t ratio) -> const RunRecord& {
    return records[static_cast<std::size_t>(year - 2010) * 3 + ratio];
  };
  const char* ratio_names[] = {"1:1", "4:1", "1:4"};
  for (std::size_t r = 0; r < 3; ++r) {
    double gap0 = rec(2010, r).pooled.f1;
    double gap_max = rec(2020, r).pooled.f1;
    c.expect(gap_max > gap0, std::string(ratio_names[r]) + " F1(max gap)=" +
                                 num(gap_max) + " > F1(gap 0)=" + num(gap0));

    double prev = -1.0;
    bool monotone = true;
    for (int year = 2010; year <= 2020; ++year) {
      double cur = rec(year, r).time_bias.groups[1].cells[0].containment_added;
      if (cur < prev - 0.05) monotone = false;
      prev = cur;
    }
    c.expect(monotone, std::string(ratio_names[r]) +
                           " benign containment_added non-decreasing "
                           "within 0.05");
  }
  c.conclude();
}

TEST_CASE("criterion 5: no era signal leaves only the malice signal") {
  Criterion c("criterion 5 unbiased sanity");

  Corpus corpus = generate_synthetic(unbiased_synth_spec());
  ExperimentConfig cfg;
  cfg.variant_names = {"baseline"};
  cfg.models = {ModelKind::svm};
  cfg.folds = 10;
  cfg.seed = 2026;
  cfg.top_ts = {10};

  std::vector<RunRecord> records = run_experiment(cfg, corpus);
  if (records.size() != 1) {
    c.expect(false, "expected 1 run, got " + std::to_string(records.size()));
    c.conclude();
    return;
  }
  const RunRecord& rec = records[0];
  c.expect(rec.pooled.accuracy >= 0.8,
           "pooled accuracy " + num(rec.pooled.accuracy) + " >= 0.8");

  std::vector<std::uint32_t> top =
      top_features(rec.importance_malware.avg_fi, 10);
  std::size_t flagged = 0;
  for (std::uint32_t f : top) {
    flagged += corpus.catalog.features[f].malice_signal;
  }
  c.expect(flagged >= 6, "malice-flagged in top-10 Avg_fi: " +
                             std::to_string(flagged) + "/10 >= 6");
  c.conclude();
}

TEST_CASE("criterion 6: gradients and attention normalization are sound") {
  Criterion c("criterion 6 numerical correctness");

  std::vector<Sample> batch = toy_batch(4, 17);
  MlpHyperparams hp;
  hp.hidden = 6;
  for (std::uint64_t seed : {11ull, 22ull, 33ull, 44ull, 55ull}) {
    double m = gradient_check(ModelKind::mlp, batch, 10, hp, 1e-5, seed);
    double a =
        gradient_check(ModelKind::attention_mlp, batch, 10, hp, 1e-5, seed);
    c.expect(m < 1e-3,
             "mlp gradient rel err " + num(m) + " seed " + std::to_string(seed));
    c.expect(a < 1e-3, "attention gradient rel err " + num(a) + " seed " +
                           std::to_string(seed));
  }

  MlpHyperparams ahp;
  ahp.hidden = 8;
  ahp.epochs = 2;
  AttentionMlpModel model = fit_attention_mlp(toy_batch(10, 3), 10, ahp, 5);
  Rng rng(71);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    std::vector<std::uint32_t> feats;
    for (std::uint32_t f = 0; f < 10; ++f) {
      if (rng.bernoulli(0.4)) feats.push_back(f);
    }
    if (feats.empty()) feats.push_back(rng.below(10));
    Sample x = make_sample("p" + std::to_string(i), Label::benign,
                           std::move(feats));
    std::vector<double> alpha = model.attention_weights(x);
    double sum = 0.0;
    for (double av : alpha) sum += av;
    worst = std::max(worst, std::abs(sum - 1.0));
  }
  c.expect(worst <= 1e-6,
           "softmax row sums within 1e-6 of 1 over 1000 inputs (worst " +
               num(worst) + ")");
  c.conclude();
}

TEST_CASE("criterion 7: aggregates match independent oracles") {
  Criterion c("criterion 7 oracle equivalences");

  // count_top vs exhaustive sort membership, 100 randomized cases.
  Rng rng(929);
  std::size_t mismatches = 0;
  for (int i = 0; i < 100; ++i) {
    std::size_t d = 1 + rng.below(8);
    std::size_t n = 1 + rng.below(20);
    std::vector<ExplanationVector> explns =
        random_explanations(n, d, 1000 + static_cast<std::uint64_t>(i));
    for (std::uint32_t f = 0; f < d; ++f) {
      for (std::size_t T = 1; T <= d; ++T) {
        std::size_t hits = 0;
        for (const ExplanationVector& e : explns) {
          std::vector<std::uint32_t> top = naive_top(e.values, T);
          hits += std::find(top.begin(), top.end(), f) != top.end();
        }
        double expected = static_cast<double>(hits) / static_cast<double>(n);
        if (count_top(explns, f, T) != expected) ++mismatches;
      }
    }
  }
  c.expect(mismatches == 0, "count_top exact on 100 randomized cases (" +
                                std::to_string(mismatches) + " mismatches)");

  // Exhaustive LIME vs the closed-form weighted ridge solution.
  LinearSvmModel lm;
  lm.d = 10;
  lm.weights = {0.9, -0.5, 0.3, -0.2, 0.7, 0.15, -0.35, 0.5, -0.1, 0.25};
  lm.bias = -0.4;
  TrainedModel tm;
  tm.kind = ModelKind::svm;
  tm.impl = lm;
  Sample x = make_sample("all", Label::malware, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9});
  LimeConfig lcfg;
  lcfg.n_perturbations = 2048;  // 2^10 masks fit: exhaustive mode
  lcfg.ridge_penalty = 0.01;
  lcfg.seed = 7;
  LimeDiagnostics diag;
  ExplanationVector e = lime_explain(tm, x, lcfg, &diag);
  c.expect(diag.exhaustive, "lime ran exhaustive masks at d=10");
  std::vector<double> beta = ridge_oracle(tm, x, lcfg.ridge_penalty);
  double lime_err = 0.0;
  for (std::size_t i = 0; i < 10; ++i) {
    lime_err = std::max(lime_err, std::abs(e.values[i] - beta[i + 1]));
  }
  c.expect(lime_err < 1e-8,
           "lime vs closed-form ridge max err " + num(lime_err) + " < 1e-8");

  // avg_feature_importance vs a two-pass mean.
  std::vector<ExplanationVector> explns = random_explanations(200, 40, 9);
  std::vector<double> avg = avg_feature_importance(explns);
  double avg_err = 0.0;
  for (std::size_t f = 0; f < 40; ++f) {
    double first = 0.0;
    for (const ExplanationVector& ev : explns) first += ev.values[f];
    first /= 200.0;
    double correction = 0.0;
    for (const ExplanationVector& ev : explns) {
      correction += ev.values[f] - first;
    }
    double two_pass = first + correction / 200.0;
    avg_err = std::max(avg_err, std::abs(avg[f] - two_pass));
  }
  c.expect(avg_err < 1e-12,
           "avg importance vs two-pass max err < 1e-12");
  c.conclude();
}

TEST_CASE("criterion 8: determinism, round-trips and the pinned ratio") {
  Criterion c("criterion 8 determinism and formats");
  TempDir tmp;

  // Small corpus shared by the checks below.
  SynthSpec spec = default_synth_spec();
  spec.years = {2010, 2016};
  spec.per_cell_count = 12;
  spec.seed = 404;
  Corpus corpus = generate_synthetic(spec);
  std::string corpus_path = tmp.file("corpus.jsonl");
  save_corpus(corpus, corpus_path);

  // Two identical audit runs produce byte-identical reports.
  ExperimentConfig cfg;
  cfg.corpus_path = corpus_path;
  cfg.variant_names = {"v1"};
  cfg.models = {ModelKind::svm};
  cfg.folds = 3;
  cfg.seed = 7;
  cfg.top_ts = {5, 10};
  cfg.jobs = 1;
  std::string cfg_path = tmp.file("experiment.json");
  write_file(cfg_path, to_json(cfg).dump(2));
  for (const char* dir : {"a", "b"}) {
    std::ostringstream out, err;
    int rc = run_cli({"audit", "--config", cfg_path, "--out-dir",
                      tmp.file(dir)},
                     out, err);
    c.expect(rc == 0, std::string("audit run into ") + dir + " exits 0");
  }
  for (const char* f :
       {"report.json", "report.csv", "explanations_v1_svm.jsonl"}) {
    c.expect(read_file(tmp.file("a") + "/" + f) ==
                 read_file(tmp.file("b") + "/" + f),
             std::string(f) + " byte-identical across reruns");
  }

  // Corpus files round-trip exactly.
  Corpus loaded = load_corpus(corpus_path);
  std::string resaved = tmp.file("corpus2.jsonl");
  save_corpus(loaded, resaved);
  c.expect(read_file(corpus_path) == read_file(resaved),
           "corpus save/load/save is byte-identical");

  // Model files round-trip with exact prediction preservation.
  ModelHyperparams hp;
  hp.mlp.hidden = 8;
  hp.mlp.epochs = 3;
  hp.attention.hidden = 8;
  hp.attention.epochs = 3;
  hp.forest.trees = 20;
  hp.forest.max_depth = 8;
  for (ModelKind kind : {ModelKind::svm, ModelKind::mlp,
                         ModelKind::attention_mlp, ModelKind::knn,
                         ModelKind::random_forest}) {
    TrainedModel m =
        fit_model(kind, corpus.samples, corpus.catalog.size(), hp, 23);
    std::string path = tmp.file("model_" + std::string(to_string(kind)) +
                                ".json");
    save_model(m, path);
    TrainedModel back = load_model(path);
    bool same = true;
    for (std::size_t i = 0; i < 40; ++i) {
      if (back.score(corpus.samples[i]) != m.score(corpus.samples[i])) {
        same = false;
      }
    }
    c.expect(same, std::string(to_string(kind)) +
                       " round-trips with exact scores");
  }

  // The skewed preset prints a malware ratio within 0.005 of 0.173.
  std::ostringstream out, err;
  int rc = run_cli({"gen", "--preset", "androzoo-ratio", "--out",
                    tmp.file("skewed.jsonl")},
                   out, err);
  c.expect(rc == 0, "gen --preset androzoo-ratio exits 0");
  std::string line = out.str();
  std::size_t at = line.find("malware_ratio=");
  double ratio = at == std::string::npos
                     ? -1.0
                     : std::stod(line.substr(at + 14));
  c.expect(std::abs(ratio - 0.173) <= 0.005,
           "printed malware ratio " + num(ratio) + " within 0.005 of 0.173");
  c.conclude();
}
