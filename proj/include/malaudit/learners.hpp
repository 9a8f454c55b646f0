#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <json.hpp>

#include "malaudit/corpus.hpp"
#include "malaudit/errors.hpp"
#include "malaudit/rng.hpp"

namespace malaudit {

inline constexpr std::string_view kModelSchemaVersion = "1";

enum class ModelKind { svm, attention_mlp, mlp, knn, random_forest };

inline constexpr std::array<ModelKind, 5> kAllModelKinds = {
    ModelKind::svm, ModelKind::attention_mlp, ModelKind::mlp, ModelKind::knn,
    ModelKind::random_forest,
};

inline std::string_view to_string(ModelKind k) {
  switch (k) {
    case ModelKind::svm: return "svm";
    case ModelKind::attention_mlp: return "attention";
    case ModelKind::mlp: return "mlp";
    case ModelKind::knn: return "knn";
    case ModelKind::random_forest: return "rf";
  }
  throw DataError("invalid model kind value");
}

inline ModelKind model_kind_from_string(std::string_view s) {
  for (ModelKind k : kAllModelKinds) {
    if (to_string(k) == s) return k;
  }
  throw DataError("unknown model kind '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// Hyperparameters
// ---------------------------------------------------------------------------

struct SvmHyperparams {
  double lambda = 1e-4;
  int epochs = 30;
};

struct MlpHyperparams {
  int hidden = 64;
  int epochs = 50;
  double learning_rate = 0.05;
};

struct KnnHyperparams {
  int k = 5;  // odd, so votes never tie
};

struct ForestHyperparams {
  int trees = 100;
  int max_depth = 12;
};

struct ModelHyperparams {
  SvmHyperparams svm;
  MlpHyperparams attention;
  MlpHyperparams mlp;
  KnnHyperparams knn;
  ForestHyperparams forest;
};

inline json to_json(const ModelHyperparams& h) {
  return json{
      {"svm", {{"lambda", h.svm.lambda}, {"epochs", h.svm.epochs}}},
      {"attention",
       {{"hidden", h.attention.hidden},
        {"epochs", h.attention.epochs},
        {"learning_rate", h.attention.learning_rate}}},
      {"mlp",
       {{"hidden", h.mlp.hidden},
        {"epochs", h.mlp.epochs},
        {"learning_rate", h.mlp.learning_rate}}},
      {"knn", {{"k", h.knn.k}}},
      {"forest",
       {{"trees", h.forest.trees}, {"max_depth", h.forest.max_depth}}},
  };
}

inline ModelHyperparams hyperparams_from_json(const json& j) {
  ModelHyperparams h;
  auto mlp_from = [](const json& m, MlpHyperparams& out) {
    if (m.contains("hidden")) out.hidden = m.at("hidden").get<int>();
    if (m.contains("epochs")) out.epochs = m.at("epochs").get<int>();
    if (m.contains("learning_rate")) {
      out.learning_rate = m.at("learning_rate").get<double>();
    }
  };
  if (j.contains("svm")) {
    const json& s = j.at("svm");
    if (s.contains("lambda")) h.svm.lambda = s.at("lambda").get<double>();
    if (s.contains("epochs")) h.svm.epochs = s.at("epochs").get<int>();
  }
  if (j.contains("attention")) mlp_from(j.at("attention"), h.attention);
  if (j.contains("mlp")) mlp_from(j.at("mlp"), h.mlp);
  if (j.contains("knn") && j.at("knn").contains("k")) {
    h.knn.k = j.at("knn").at("k").get<int>();
  }
  if (j.contains("forest")) {
    const json& f = j.at("forest");
    if (f.contains("trees")) h.forest.trees = f.at("trees").get<int>();
    if (f.contains("max_depth")) {
      h.forest.max_depth = f.at("max_depth").get<int>();
    }
  }
  return h;
}

// ---------------------------------------------------------------------------
// Shared numerics
// ---------------------------------------------------------------------------

inline double sigmoid(double z) {
  if (z >= 0) {
    double e = std::exp(-z);
    return 1.0 / (1.0 + e);
  }
  double e = std::exp(z);
  return e / (1.0 + e);
}

// log(1 + e^z) without overflow.
inline double softplus(double z) {
  return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)));
}

// Cross-entropy from the logit; y is 1 for malware.
inline double logistic_loss(double logit, double y) {
  return softplus(logit) - y * logit;
}

inline double label_01(Label l) { return l == Label::malware ? 1.0 : 0.0; }
inline double label_pm1(Label l) { return l == Label::malware ? 1.0 : -1.0; }

// Training-set checks shared by every fit function.
inline void require_trainable(const std::vector<Sample>& train,
                              std::size_t catalog_size) {
  if (train.empty()) throw DataError("training set is empty");
  bool has_m = false, has_b = false;
  for (const Sample& s : train) {
    (s.label == Label::malware ? has_m : has_b) = true;
    if (!s.present_features.empty() &&
        s.present_features.back() >= catalog_size) {
      throw DataError("catalog mismatch: sample '" + s.sample_id +
                      "' references feature " +
                      std::to_string(s.present_features.back()) +
                      " but the catalog has " + std::to_string(catalog_size) +
                      " features");
    }
  }
  if (!has_m || !has_b) {
    throw DataError("training set contains a single class");
  }
}

inline void require_in_catalog(const Sample& x, std::size_t catalog_size) {
  if (!x.present_features.empty() &&
      x.present_features.back() >= catalog_size) {
    throw DataError("catalog mismatch: sample '" + x.sample_id +
                    "' references feature " +
                    std::to_string(x.present_features.back()) +
                    " but the model expects " + std::to_string(catalog_size) +
                    " features");
  }
}

// ---------------------------------------------------------------------------
// Linear SVM (Pegasos)
// ---------------------------------------------------------------------------

struct LinearSvmModel {
  std::size_t d = 0;
  std::vector<double> weights;
  double bias = 0.0;
  SvmHyperparams hp;
  // Training diagnostics; not serialized.
  double initial_loss = 0.0;
  std::vector<double> epoch_losses;

  double margin(const Sample& x) const {
    double m = bias;
    for (std::uint32_t f : x.present_features) m += weights[f];
    return m;
  }
};

// One subgradient step at rate eta: every weight decays by (1 - eta*lambda);
// a margin violation additionally adds eta*y on the present features and the
// bias. With margin > 1 the step is pure decay.
inline void svm_step(std::vector<double>& w, double& b, const Sample& x,
                     double lambda, double eta) {
  double y = label_pm1(x.label);
  double m = b;
  for (std::uint32_t f : x.present_features) m += w[f];
  m *= y;
  double decay = 1.0 - eta * lambda;
  for (double& wi : w) wi *= decay;
  if (m < 1.0) {
    for (std::uint32_t f : x.present_features) w[f] += eta * y;
    b += eta * y;
  }
}

// Regularized hinge objective: lambda/2 ||w||^2 + mean hinge.
inline double svm_objective(const std::vector<double>& w, double b,
                            const std::vector<Sample>& data, double lambda) {
  double norm2 = 0.0;
  for (double wi : w) norm2 += wi * wi;
  double hinge = 0.0;
  for (const Sample& x : data) {
    double m = b;
    for (std::uint32_t f : x.present_features) m += w[f];
    hinge += std::max(0.0, 1.0 - label_pm1(x.label) * m);
  }
  return 0.5 * lambda * norm2 +
         hinge / static_cast<double>(data.size());
}

inline LinearSvmModel fit_svm(const std::vector<Sample>& train,
                              std::size_t catalog_size,
                              const SvmHyperparams& hp, std::uint64_t seed) {
  require_trainable(train, catalog_size);
  if (hp.lambda <= 0) throw DataError("svm: lambda must be positive");
  if (hp.epochs <= 0) throw DataError("svm: epochs must be positive");

  LinearSvmModel m;
  m.d = catalog_size;
  m.hp = hp;
  Rng rng(seed);
  m.weights.resize(catalog_size);
  for (double& w : m.weights) w = rng.uniform(-0.05, 0.05);
  m.bias = 0.0;
  m.initial_loss = svm_objective(m.weights, m.bias, train, hp.lambda);

  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  double cap = 1.0 / std::sqrt(hp.lambda);
  long t = 1;  // global step counter across epochs
  for (int epoch = 0; epoch < hp.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t i : order) {
      double eta = 1.0 / (hp.lambda * static_cast<double>(t));
      svm_step(m.weights, m.bias, train[i], hp.lambda, eta);
      // Project onto the ball of radius 1/sqrt(lambda).
      double norm2 = 0.0;
      for (double w : m.weights) norm2 += w * w;
      if (norm2 > cap * cap) {
        double scale = cap / std::sqrt(norm2);
        for (double& w : m.weights) w *= scale;
      }
      ++t;
    }
    double loss = svm_objective(m.weights, m.bias, train, hp.lambda);
    if (!std::isfinite(loss)) {
      throw ComputeError("svm: non-finite training loss in epoch " +
                         std::to_string(epoch));
    }
    m.epoch_losses.push_back(loss);
  }
  return m;
}

// ---------------------------------------------------------------------------
// MLP head shared by the plain and attention models
// ---------------------------------------------------------------------------
//
// Layouts put the per-input-feature slices contiguously: w1[i*hidden + h] is
// input i's weight into hidden unit h, scorer_w[i*d + j] is input i's
// contribution to energy j. Sparse binary inputs then touch whole rows.

struct MlpModel {
  std::size_t d = 0;
  int hidden = 0;
  std::vector<double> w1;  // d * hidden
  std::vector<double> b1;  // hidden
  std::vector<double> w2;  // hidden
  double b2 = 0.0;
  MlpHyperparams hp;
  double initial_loss = 0.0;
  std::vector<double> epoch_losses;

  struct Forward {
    std::vector<double> hid;
    double logit = 0.0;
    double prob = 0.0;
  };

  Forward forward(const Sample& x) const {
    Forward f;
    f.hid = b1;
    for (std::uint32_t i : x.present_features) {
      const double* row = &w1[static_cast<std::size_t>(i) *
                              static_cast<std::size_t>(hidden)];
      for (int h = 0; h < hidden; ++h) f.hid[static_cast<std::size_t>(h)] += row[h];
    }
    f.logit = b2;
    for (int h = 0; h < hidden; ++h) {
      double& v = f.hid[static_cast<std::size_t>(h)];
      v = std::tanh(v);
      f.logit += w2[static_cast<std::size_t>(h)] * v;
    }
    f.prob = sigmoid(f.logit);
    return f;
  }
};

struct AttentionMlpModel {
  std::size_t d = 0;
  int hidden = 0;
  std::vector<double> scorer_w;  // d * d: energies = scorer_w^T x + scorer_b
  std::vector<double> scorer_b;  // d
  std::vector<double> w1;        // d * hidden, consumes attended input
  std::vector<double> b1;        // hidden
  std::vector<double> w2;        // hidden
  double b2 = 0.0;
  MlpHyperparams hp;
  double initial_loss = 0.0;
  std::vector<double> epoch_losses;

  struct Forward {
    std::vector<double> alpha;  // softmax over all d energies
    std::vector<double> hid;
    double logit = 0.0;
    double prob = 0.0;
  };

  Forward forward(const Sample& x) const {
    Forward f;
    f.alpha = scorer_b;
    for (std::uint32_t i : x.present_features) {
      const double* row = &scorer_w[static_cast<std::size_t>(i) * d];
      for (std::size_t j = 0; j < d; ++j) f.alpha[j] += row[j];
    }
    // In-place softmax, max-subtracted.
    double mx = *std::max_element(f.alpha.begin(), f.alpha.end());
    double sum = 0.0;
    for (double& a : f.alpha) {
      a = std::exp(a - mx);
      sum += a;
    }
    for (double& a : f.alpha) a /= sum;
    // Attended input is alpha masked to the present features.
    f.hid = b1;
    for (std::uint32_t i : x.present_features) {
      const double* row = &w1[static_cast<std::size_t>(i) *
                              static_cast<std::size_t>(hidden)];
      double a = f.alpha[i];
      for (int h = 0; h < hidden; ++h) {
        f.hid[static_cast<std::size_t>(h)] += a * row[h];
      }
    }
    f.logit = b2;
    for (int h = 0; h < hidden; ++h) {
      double& v = f.hid[static_cast<std::size_t>(h)];
      v = std::tanh(v);
      f.logit += w2[static_cast<std::size_t>(h)] * v;
    }
    f.prob = sigmoid(f.logit);
    return f;
  }

  // Attention weights double as the model's explanation.
  std::vector<double> attention_weights(const Sample& x) const {
    return forward(x).alpha;
  }
};

namespace detail {

// Backward intermediates; both SGD updates and the gradient check consume
// these through identical formulas.
struct HeadBackward {
  double dz = 0.0;
  std::vector<double> dpre1;
};

template <class Model>
HeadBackward head_backward(const Model& m, const typename Model::Forward& f,
                           double y) {
  HeadBackward b;
  b.dz = f.prob - y;
  b.dpre1.resize(static_cast<std::size_t>(m.hidden));
  for (int h = 0; h < m.hidden; ++h) {
    double hid = f.hid[static_cast<std::size_t>(h)];
    b.dpre1[static_cast<std::size_t>(h)] =
        b.dz * m.w2[static_cast<std::size_t>(h)] * (1.0 - hid * hid);
  }
  return b;
}

// d(loss)/d(energies) via the softmax Jacobian: de = alpha .* (dalpha - sum).
inline std::vector<double> softmax_backward(const std::vector<double>& alpha,
                                            const std::vector<double>& dalpha) {
  double s = 0.0;
  for (std::size_t j = 0; j < alpha.size(); ++j) s += alpha[j] * dalpha[j];
  std::vector<double> de(alpha.size());
  for (std::size_t j = 0; j < alpha.size(); ++j) {
    de[j] = alpha[j] * (dalpha[j] - s);
  }
  return de;
}

// dalpha for the attention model: only present features feed the head.
inline std::vector<double> attention_dalpha(const AttentionMlpModel& m,
                                            const Sample& x,
                                            const HeadBackward& hb) {
  std::vector<double> dalpha(m.d, 0.0);
  for (std::uint32_t i : x.present_features) {
    const double* row = &m.w1[static_cast<std::size_t>(i) *
                              static_cast<std::size_t>(m.hidden)];
    double acc = 0.0;
    for (int h = 0; h < m.hidden; ++h) {
      acc += hb.dpre1[static_cast<std::size_t>(h)] * row[h];
    }
    dalpha[i] = acc;
  }
  return dalpha;
}

inline void init_uniform(Rng& rng, std::vector<double>& v) {
  for (double& x : v) x = rng.uniform(-0.05, 0.05);
}

// Draw order is part of the contract: scorer_w, w1, w2 (biases stay zero).
inline AttentionMlpModel init_attention(std::size_t d,
                                        const MlpHyperparams& hp,
                                        std::uint64_t seed) {
  AttentionMlpModel m;
  m.d = d;
  m.hidden = hp.hidden;
  m.hp = hp;
  Rng rng(seed);
  m.scorer_w.resize(d * d);
  init_uniform(rng, m.scorer_w);
  m.scorer_b.assign(d, 0.0);
  m.w1.resize(d * static_cast<std::size_t>(hp.hidden));
  init_uniform(rng, m.w1);
  m.b1.assign(static_cast<std::size_t>(hp.hidden), 0.0);
  m.w2.resize(static_cast<std::size_t>(hp.hidden));
  init_uniform(rng, m.w2);
  m.b2 = 0.0;
  return m;
}

inline MlpModel init_mlp(std::size_t d, const MlpHyperparams& hp,
                         std::uint64_t seed) {
  MlpModel m;
  m.d = d;
  m.hidden = hp.hidden;
  m.hp = hp;
  Rng rng(seed);
  m.w1.resize(d * static_cast<std::size_t>(hp.hidden));
  init_uniform(rng, m.w1);
  m.b1.assign(static_cast<std::size_t>(hp.hidden), 0.0);
  m.w2.resize(static_cast<std::size_t>(hp.hidden));
  init_uniform(rng, m.w2);
  m.b2 = 0.0;
  return m;
}

inline void validate_mlp_hp(const MlpHyperparams& hp, const char* what) {
  if (hp.hidden <= 0) {
    throw DataError(std::string(what) + ": hidden width must be positive");
  }
  if (hp.epochs <= 0) {
    throw DataError(std::string(what) + ": epochs must be positive");
  }
  if (hp.learning_rate <= 0) {
    throw DataError(std::string(what) + ": learning rate must be positive");
  }
}

}  // namespace detail

inline MlpModel fit_mlp(const std::vector<Sample>& train,
                        std::size_t catalog_size, const MlpHyperparams& hp,
                        std::uint64_t seed) {
  require_trainable(train, catalog_size);
  detail::validate_mlp_hp(hp, "mlp");
  MlpModel m = detail::init_mlp(catalog_size, hp, seed);
  Rng rng(seed_mix(seed, "sgd"));

  double init_sum = 0.0;
  for (const Sample& x : train) {
    init_sum += logistic_loss(m.forward(x).logit, label_01(x.label));
  }
  m.initial_loss = init_sum / static_cast<double>(train.size());

  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::size_t H = static_cast<std::size_t>(hp.hidden);
  for (int epoch = 0; epoch < hp.epochs; ++epoch) {
    rng.shuffle(order);
    double loss_sum = 0.0;
    for (std::size_t idx : order) {
      const Sample& x = train[idx];
      double y = label_01(x.label);
      MlpModel::Forward f = m.forward(x);
      loss_sum += logistic_loss(f.logit, y);
      detail::HeadBackward hb = detail::head_backward(m, f, y);
      double lr = hp.learning_rate;
      for (std::size_t h = 0; h < H; ++h) {
        m.w2[h] -= lr * hb.dz * f.hid[h];
        m.b1[h] -= lr * hb.dpre1[h];
      }
      m.b2 -= lr * hb.dz;
      for (std::uint32_t i : x.present_features) {
        double* row = &m.w1[static_cast<std::size_t>(i) * H];
        for (std::size_t h = 0; h < H; ++h) row[h] -= lr * hb.dpre1[h];
      }
    }
    double avg = loss_sum / static_cast<double>(train.size());
    if (!std::isfinite(avg)) {
      throw ComputeError("mlp: non-finite training loss in epoch " +
                         std::to_string(epoch));
    }
    m.epoch_losses.push_back(avg);
  }
  return m;
}

inline AttentionMlpModel fit_attention_mlp(const std::vector<Sample>& train,
                                           std::size_t catalog_size,
                                           const MlpHyperparams& hp,
                                           std::uint64_t seed) {
  require_trainable(train, catalog_size);
  detail::validate_mlp_hp(hp, "attention");
  AttentionMlpModel m = detail::init_attention(catalog_size, hp, seed);
  Rng rng(seed_mix(seed, "sgd"));

  double init_sum = 0.0;
  for (const Sample& x : train) {
    init_sum += logistic_loss(m.forward(x).logit, label_01(x.label));
  }
  m.initial_loss = init_sum / static_cast<double>(train.size());

  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::size_t H = static_cast<std::size_t>(hp.hidden);
  for (int epoch = 0; epoch < hp.epochs; ++epoch) {
    rng.shuffle(order);
    double loss_sum = 0.0;
    for (std::size_t idx : order) {
      const Sample& x = train[idx];
      double y = label_01(x.label);
      AttentionMlpModel::Forward f = m.forward(x);
      loss_sum += logistic_loss(f.logit, y);
      detail::HeadBackward hb = detail::head_backward(m, f, y);
      std::vector<double> dalpha = detail::attention_dalpha(m, x, hb);
      std::vector<double> de = detail::softmax_backward(f.alpha, dalpha);
      double lr = hp.learning_rate;
      for (std::size_t h = 0; h < H; ++h) {
        m.w2[h] -= lr * hb.dz * f.hid[h];
        m.b1[h] -= lr * hb.dpre1[h];
      }
      m.b2 -= lr * hb.dz;
      for (std::uint32_t i : x.present_features) {
        double* row = &m.w1[static_cast<std::size_t>(i) * H];
        double a = f.alpha[i];
        for (std::size_t h = 0; h < H; ++h) {
          row[h] -= lr * hb.dpre1[h] * a;
        }
      }
      for (std::size_t j = 0; j < m.d; ++j) m.scorer_b[j] -= lr * de[j];
      for (std::uint32_t i : x.present_features) {
        double* row = &m.scorer_w[static_cast<std::size_t>(i) * m.d];
        for (std::size_t j = 0; j < m.d; ++j) row[j] -= lr * de[j];
      }
    }
    double avg = loss_sum / static_cast<double>(train.size());
    if (!std::isfinite(avg)) {
      throw ComputeError("attention: non-finite training loss in epoch " +
                         std::to_string(epoch));
    }
    m.epoch_losses.push_back(avg);
  }
  return m;
}

// ---------------------------------------------------------------------------
// KNN over Hamming distance
// ---------------------------------------------------------------------------

struct KnnModel {
  std::size_t d = 0;
  int k = 5;
  std::vector<std::vector<std::uint32_t>> points;
  std::vector<Label> labels;
};

// |a| + |b| - 2|a intersect b| on sorted sets.
inline int hamming_distance(const std::vector<std::uint32_t>& a,
                            const std::vector<std::uint32_t>& b) {
  std::size_t i = 0, j = 0, common = 0;
  while (i < a.size() && j < b.size()) {
    if (a[i] == b[j]) {
      ++common;
      ++i;
      ++j;
    } else if (a[i] < b[j]) {
      ++i;
    } else {
      ++j;
    }
  }
  return static_cast<int>(a.size() + b.size() - 2 * common);
}

inline KnnModel fit_knn(const std::vector<Sample>& train,
                        std::size_t catalog_size, const KnnHyperparams& hp) {
  require_trainable(train, catalog_size);
  if (hp.k < 1 || hp.k % 2 == 0) {
    throw DataError("knn: k must be a positive odd number");
  }
  if (static_cast<std::size_t>(hp.k) > train.size()) {
    throw DataError("knn: k exceeds the training set size");
  }
  KnnModel m;
  m.d = catalog_size;
  m.k = hp.k;
  for (const Sample& s : train) {
    m.points.push_back(s.present_features);
    m.labels.push_back(s.label);
  }
  return m;
}

// Fraction of malware among the k nearest points; ties on distance break by
// training index, so the result is deterministic.
inline double knn_score(const KnnModel& m, const Sample& x) {
  std::vector<std::pair<int, std::size_t>> dist(m.points.size());
  for (std::size_t i = 0; i < m.points.size(); ++i) {
    dist[i] = {hamming_distance(m.points[i], x.present_features), i};
  }
  std::size_t k = static_cast<std::size_t>(m.k);
  std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k),
                    dist.end());
  int votes = 0;
  for (std::size_t i = 0; i < k; ++i) {
    votes += (m.labels[dist[i].second] == Label::malware);
  }
  return static_cast<double>(votes) / static_cast<double>(m.k);
}

// ---------------------------------------------------------------------------
// Random forest of binary-split trees
// ---------------------------------------------------------------------------

struct TreeNode {
  std::int32_t feature = -1;  // -1 marks a leaf
  std::int32_t absent = -1;
  std::int32_t present = -1;
  double p_malware = 0.0;
};

struct RandomForestModel {
  std::size_t d = 0;
  ForestHyperparams hp;
  std::vector<std::vector<TreeNode>> trees;
};

namespace detail {

inline double gini(long n, long mal) {
  if (n == 0) return 0.0;
  double pm = static_cast<double>(mal) / static_cast<double>(n);
  double pb = 1.0 - pm;
  return 1.0 - pm * pm - pb * pb;
}

struct TreeBuilder {
  const std::vector<Sample>& data;
  std::size_t d;
  int max_depth;
  std::vector<TreeNode> nodes;
  std::vector<long> present_count;
  std::vector<long> present_mal;

  explicit TreeBuilder(const std::vector<Sample>& data_, std::size_t d_,
                       int max_depth_)
      : data(data_), d(d_), max_depth(max_depth_),
        present_count(d_, 0), present_mal(d_, 0) {}

  std::int32_t build(std::vector<std::size_t>& idx, int depth) {
    long n = static_cast<long>(idx.size());
    long mal = 0;
    for (std::size_t i : idx) mal += (data[i].label == Label::malware);
    std::int32_t me = static_cast<std::int32_t>(nodes.size());
    nodes.emplace_back();
    nodes[static_cast<std::size_t>(me)].p_malware =
        n == 0 ? 0.0 : static_cast<double>(mal) / static_cast<double>(n);
    if (depth >= max_depth || mal == 0 || mal == n) return me;

    std::fill(present_count.begin(), present_count.end(), 0);
    std::fill(present_mal.begin(), present_mal.end(), 0);
    for (std::size_t i : idx) {
      bool is_mal = data[i].label == Label::malware;
      for (std::uint32_t f : data[i].present_features) {
        ++present_count[f];
        present_mal[f] += is_mal;
      }
    }
    double parent = gini(n, mal);
    double best = parent - 1e-12;  // a split must strictly reduce impurity
    std::int32_t best_f = -1;
    for (std::size_t f = 0; f < d; ++f) {
      long np = present_count[f];
      long na = n - np;
      if (np == 0 || na == 0) continue;
      double w = (static_cast<double>(np) * gini(np, present_mal[f]) +
                  static_cast<double>(na) * gini(na, mal - present_mal[f])) /
                 static_cast<double>(n);
      if (w < best) {  // strict: ties keep the lowest feature id
        best = w;
        best_f = static_cast<std::int32_t>(f);
      }
    }
    if (best_f < 0) return me;

    std::vector<std::size_t> left, right;
    for (std::size_t i : idx) {
      (data[i].contains(static_cast<std::uint32_t>(best_f)) ? right : left)
          .push_back(i);
    }
    idx.clear();
    idx.shrink_to_fit();
    nodes[static_cast<std::size_t>(me)].feature = best_f;
    std::int32_t l = build(left, depth + 1);
    nodes[static_cast<std::size_t>(me)].absent = l;
    std::int32_t r = build(right, depth + 1);
    nodes[static_cast<std::size_t>(me)].present = r;
    return me;
  }
};

}  // namespace detail

inline RandomForestModel fit_rf(const std::vector<Sample>& train,
                                std::size_t catalog_size,
                                const ForestHyperparams& hp,
                                std::uint64_t seed) {
  require_trainable(train, catalog_size);
  if (hp.trees <= 0) throw DataError("rf: tree count must be positive");
  if (hp.max_depth <= 0) throw DataError("rf: max depth must be positive");
  RandomForestModel m;
  m.d = catalog_size;
  m.hp = hp;
  std::size_t n = train.size();
  for (int t = 0; t < hp.trees; ++t) {
    Rng rng(seed_mix(seed, "tree", static_cast<std::uint64_t>(t)));
    std::vector<std::size_t> boot(n);
    for (std::size_t i = 0; i < n; ++i) {
      boot[i] = static_cast<std::size_t>(rng.below(n));
    }
    detail::TreeBuilder b(train, catalog_size, hp.max_depth);
    b.build(boot, 0);
    m.trees.push_back(std::move(b.nodes));
  }
  return m;
}

inline double tree_score(const std::vector<TreeNode>& nodes, const Sample& x) {
  std::int32_t at = 0;
  while (nodes[static_cast<std::size_t>(at)].feature >= 0) {
    const TreeNode& nd = nodes[static_cast<std::size_t>(at)];
    at = x.contains(static_cast<std::uint32_t>(nd.feature)) ? nd.present
                                                            : nd.absent;
  }
  return nodes[static_cast<std::size_t>(at)].p_malware;
}

inline double rf_score(const RandomForestModel& m, const Sample& x) {
  double sum = 0.0;
  for (const auto& t : m.trees) sum += tree_score(t, x);
  return sum / static_cast<double>(m.trees.size());
}

// ---------------------------------------------------------------------------
// Unified trained model
// ---------------------------------------------------------------------------

struct TrainedModel {
  ModelKind kind = ModelKind::svm;
  std::variant<LinearSvmModel, AttentionMlpModel, MlpModel, KnnModel,
               RandomForestModel>
      impl;

  std::size_t catalog_size() const {
    return std::visit([](const auto& m) { return m.d; }, impl);
  }

  // Malware-leaning score in [0, 1].
  double score(const Sample& x) const {
    require_in_catalog(x, catalog_size());
    switch (kind) {
      case ModelKind::svm:
        return sigmoid(std::get<LinearSvmModel>(impl).margin(x));
      case ModelKind::attention_mlp:
        return std::get<AttentionMlpModel>(impl).forward(x).prob;
      case ModelKind::mlp:
        return std::get<MlpModel>(impl).forward(x).prob;
      case ModelKind::knn:
        return knn_score(std::get<KnnModel>(impl), x);
      case ModelKind::random_forest:
        return rf_score(std::get<RandomForestModel>(impl), x);
    }
    throw ComputeError("invalid model kind value");
  }

  // Exact tie goes to benign.
  Label predict(const Sample& x) const {
    return score(x) > 0.5 ? Label::malware : Label::benign;
  }
};

inline TrainedModel fit_model(ModelKind kind, const std::vector<Sample>& train,
                              std::size_t catalog_size,
                              const ModelHyperparams& hp, std::uint64_t seed) {
  TrainedModel tm;
  tm.kind = kind;
  switch (kind) {
    case ModelKind::svm:
      tm.impl = fit_svm(train, catalog_size, hp.svm, seed);
      return tm;
    case ModelKind::attention_mlp:
      tm.impl = fit_attention_mlp(train, catalog_size, hp.attention, seed);
      return tm;
    case ModelKind::mlp:
      tm.impl = fit_mlp(train, catalog_size, hp.mlp, seed);
      return tm;
    case ModelKind::knn:
      tm.impl = fit_knn(train, catalog_size, hp.knn);
      return tm;
    case ModelKind::random_forest:
      tm.impl = fit_rf(train, catalog_size, hp.forest, seed);
      return tm;
  }
  throw ComputeError("invalid model kind value");
}

// ---------------------------------------------------------------------------
// Gradient check: analytic vs central differences at initialization
// ---------------------------------------------------------------------------

namespace detail {

template <class LossFn>
double max_rel_grad_error(std::vector<double*> params,
                          const std::vector<double>& analytic, double eps,
                          LossFn&& batch_loss) {
  double worst = 0.0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    double saved = *params[p];
    *params[p] = saved + eps;
    double up = batch_loss();
    *params[p] = saved - eps;
    double down = batch_loss();
    *params[p] = saved;
    double numeric = (up - down) / (2.0 * eps);
    double ga = analytic[p];
    double rel =
        std::abs(ga - numeric) / std::max({1.0, std::abs(ga), std::abs(numeric)});
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace detail

// Returns the worst relative disagreement between backprop and central
// differences over a freshly initialized model and the summed batch loss.
inline double gradient_check(ModelKind kind, const std::vector<Sample>& batch,
                             std::size_t catalog_size,
                             const MlpHyperparams& hp, double epsilon,
                             std::uint64_t seed) {
  if (batch.empty()) throw DataError("gradient check: empty batch");
  if (epsilon <= 0) throw DataError("gradient check: epsilon must be positive");
  for (const Sample& x : batch) require_in_catalog(x, catalog_size);
  std::size_t H = static_cast<std::size_t>(hp.hidden);

  if (kind == ModelKind::mlp) {
    MlpModel m = detail::init_mlp(catalog_size, hp, seed);
    std::size_t n_params = m.w1.size() + m.b1.size() + m.w2.size() + 1;
    std::vector<double> analytic(n_params, 0.0);
    for (const Sample& x : batch) {
      double y = label_01(x.label);
      MlpModel::Forward f = m.forward(x);
      detail::HeadBackward hb = detail::head_backward(m, f, y);
      double* gw1 = analytic.data();
      double* gb1 = gw1 + m.w1.size();
      double* gw2 = gb1 + m.b1.size();
      double* gb2 = gw2 + m.w2.size();
      for (std::uint32_t i : x.present_features) {
        for (std::size_t h = 0; h < H; ++h) {
          gw1[static_cast<std::size_t>(i) * H + h] += hb.dpre1[h];
        }
      }
      for (std::size_t h = 0; h < H; ++h) {
        gb1[h] += hb.dpre1[h];
        gw2[h] += hb.dz * f.hid[h];
      }
      *gb2 += hb.dz;
    }
    std::vector<double*> params;
    params.reserve(n_params);
    for (double& v : m.w1) params.push_back(&v);
    for (double& v : m.b1) params.push_back(&v);
    for (double& v : m.w2) params.push_back(&v);
    params.push_back(&m.b2);
    auto loss = [&] {
      double s = 0.0;
      for (const Sample& x : batch) {
        s += logistic_loss(m.forward(x).logit, label_01(x.label));
      }
      return s;
    };
    return detail::max_rel_grad_error(std::move(params), analytic, epsilon,
                                      loss);
  }

  if (kind == ModelKind::attention_mlp) {
    AttentionMlpModel m = detail::init_attention(catalog_size, hp, seed);
    std::size_t n_params = m.scorer_w.size() + m.scorer_b.size() +
                           m.w1.size() + m.b1.size() + m.w2.size() + 1;
    std::vector<double> analytic(n_params, 0.0);
    for (const Sample& x : batch) {
      double y = label_01(x.label);
      AttentionMlpModel::Forward f = m.forward(x);
      detail::HeadBackward hb = detail::head_backward(m, f, y);
      std::vector<double> dalpha = detail::attention_dalpha(m, x, hb);
      std::vector<double> de = detail::softmax_backward(f.alpha, dalpha);
      double* gsw = analytic.data();
      double* gsb = gsw + m.scorer_w.size();
      double* gw1 = gsb + m.scorer_b.size();
      double* gb1 = gw1 + m.w1.size();
      double* gw2 = gb1 + m.b1.size();
      double* gb2 = gw2 + m.w2.size();
      for (std::uint32_t i : x.present_features) {
        for (std::size_t j = 0; j < m.d; ++j) {
          gsw[static_cast<std::size_t>(i) * m.d + j] += de[j];
        }
        for (std::size_t h = 0; h < H; ++h) {
          gw1[static_cast<std::size_t>(i) * H + h] += hb.dpre1[h] * f.alpha[i];
        }
      }
      for (std::size_t j = 0; j < m.d; ++j) gsb[j] += de[j];
      for (std::size_t h = 0; h < H; ++h) {
        gb1[h] += hb.dpre1[h];
        gw2[h] += hb.dz * f.hid[h];
      }
      *gb2 += hb.dz;
    }
    std::vector<double*> params;
    params.reserve(n_params);
    for (double& v : m.scorer_w) params.push_back(&v);
    for (double& v : m.scorer_b) params.push_back(&v);
    for (double& v : m.w1) params.push_back(&v);
    for (double& v : m.b1) params.push_back(&v);
    for (double& v : m.w2) params.push_back(&v);
    params.push_back(&m.b2);
    auto loss = [&] {
      double s = 0.0;
      for (const Sample& x : batch) {
        s += logistic_loss(m.forward(x).logit, label_01(x.label));
      }
      return s;
    };
    return detail::max_rel_grad_error(std::move(params), analytic, epsilon,
                                      loss);
  }

  throw DataError("gradient check: model kind '" +
                  std::string(to_string(kind)) + "' has no gradients");
}

// ---------------------------------------------------------------------------
// Model persistence
// ---------------------------------------------------------------------------

inline json to_json(const TrainedModel& tm) {
  json params;
  switch (tm.kind) {
    case ModelKind::svm: {
      const auto& m = std::get<LinearSvmModel>(tm.impl);
      params = {{"weights", m.weights},
                {"bias", m.bias},
                {"lambda", m.hp.lambda},
                {"epochs", m.hp.epochs}};
      break;
    }
    case ModelKind::attention_mlp: {
      const auto& m = std::get<AttentionMlpModel>(tm.impl);
      params = {{"hidden", m.hidden}, {"scorer_w", m.scorer_w},
                {"scorer_b", m.scorer_b}, {"w1", m.w1},
                {"b1", m.b1},           {"w2", m.w2},
                {"b2", m.b2}};
      break;
    }
    case ModelKind::mlp: {
      const auto& m = std::get<MlpModel>(tm.impl);
      params = {{"hidden", m.hidden}, {"w1", m.w1}, {"b1", m.b1},
                {"w2", m.w2},         {"b2", m.b2}};
      break;
    }
    case ModelKind::knn: {
      const auto& m = std::get<KnnModel>(tm.impl);
      json labels = json::array();
      for (Label l : m.labels) labels.push_back(l == Label::malware ? 1 : 0);
      params = {{"k", m.k}, {"points", m.points}, {"labels", std::move(labels)}};
      break;
    }
    case ModelKind::random_forest: {
      const auto& m = std::get<RandomForestModel>(tm.impl);
      json trees = json::array();
      for (const auto& t : m.trees) {
        json nodes = json::array();
        for (const TreeNode& nd : t) {
          nodes.push_back({{"feature", nd.feature},
                           {"absent", nd.absent},
                           {"present", nd.present},
                           {"p_malware", nd.p_malware}});
        }
        trees.push_back(std::move(nodes));
      }
      params = {{"trees", std::move(trees)}};
      break;
    }
  }
  return json{{"model_schema", std::string(kModelSchemaVersion)},
              {"kind", std::string(to_string(tm.kind))},
              {"catalog_size", tm.catalog_size()},
              {"params", std::move(params)}};
}

inline TrainedModel model_from_json(const json& j) {
  if (j.at("model_schema").get<std::string>() != kModelSchemaVersion) {
    throw DataError("unsupported model schema_version");
  }
  TrainedModel tm;
  tm.kind = model_kind_from_string(j.at("kind").get<std::string>());
  std::size_t d = j.at("catalog_size").get<std::size_t>();
  const json& p = j.at("params");
  auto expect_size = [&](const std::vector<double>& v, std::size_t want,
                         const char* what) {
    if (v.size() != want) {
      throw DataError(std::string("model params: '") + what +
                      "' has wrong length");
    }
  };
  switch (tm.kind) {
    case ModelKind::svm: {
      LinearSvmModel m;
      m.d = d;
      m.weights = p.at("weights").get<std::vector<double>>();
      expect_size(m.weights, d, "weights");
      m.bias = p.at("bias").get<double>();
      m.hp.lambda = p.at("lambda").get<double>();
      m.hp.epochs = p.at("epochs").get<int>();
      tm.impl = std::move(m);
      break;
    }
    case ModelKind::attention_mlp: {
      AttentionMlpModel m;
      m.d = d;
      m.hidden = p.at("hidden").get<int>();
      std::size_t H = static_cast<std::size_t>(m.hidden);
      m.scorer_w = p.at("scorer_w").get<std::vector<double>>();
      expect_size(m.scorer_w, d * d, "scorer_w");
      m.scorer_b = p.at("scorer_b").get<std::vector<double>>();
      expect_size(m.scorer_b, d, "scorer_b");
      m.w1 = p.at("w1").get<std::vector<double>>();
      expect_size(m.w1, d * H, "w1");
      m.b1 = p.at("b1").get<std::vector<double>>();
      expect_size(m.b1, H, "b1");
      m.w2 = p.at("w2").get<std::vector<double>>();
      expect_size(m.w2, H, "w2");
      m.b2 = p.at("b2").get<double>();
      tm.impl = std::move(m);
      break;
    }
    case ModelKind::mlp: {
      MlpModel m;
      m.d = d;
      m.hidden = p.at("hidden").get<int>();
      std::size_t H = static_cast<std::size_t>(m.hidden);
      m.w1 = p.at("w1").get<std::vector<double>>();
      expect_size(m.w1, d * H, "w1");
      m.b1 = p.at("b1").get<std::vector<double>>();
      expect_size(m.b1, H, "b1");
      m.w2 = p.at("w2").get<std::vector<double>>();
      expect_size(m.w2, H, "w2");
      m.b2 = p.at("b2").get<double>();
      tm.impl = std::move(m);
      break;
    }
    case ModelKind::knn: {
      KnnModel m;
      m.d = d;
      m.k = p.at("k").get<int>();
      m.points =
          p.at("points").get<std::vector<std::vector<std::uint32_t>>>();
      for (const auto& lj : p.at("labels")) {
        m.labels.push_back(lj.get<int>() == 1 ? Label::malware
                                              : Label::benign);
      }
      if (m.points.size() != m.labels.size()) {
        throw DataError("model params: points/labels length mismatch");
      }
      tm.impl = std::move(m);
      break;
    }
    case ModelKind::random_forest: {
      RandomForestModel m;
      m.d = d;
      for (const json& tj : p.at("trees")) {
        std::vector<TreeNode> nodes;
        for (const json& nj : tj) {
          TreeNode nd;
          nd.feature = nj.at("feature").get<std::int32_t>();
          nd.absent = nj.at("absent").get<std::int32_t>();
          nd.present = nj.at("present").get<std::int32_t>();
          nd.p_malware = nj.at("p_malware").get<double>();
          nodes.push_back(nd);
        }
        m.trees.push_back(std::move(nodes));
      }
      if (m.trees.empty()) throw DataError("model params: no trees");
      m.hp.trees = static_cast<int>(m.trees.size());
      tm.impl = std::move(m);
      break;
    }
  }
  return tm;
}

inline void save_model(const TrainedModel& tm, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ComputeError("cannot open '" + path + "' for writing");
  out << to_json(tm).dump() << '\n';
  out.flush();
  if (!out) throw ComputeError("write failure on '" + path + "'");
}

inline TrainedModel load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open model file '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw DataError("parse error in model file '" + path + "': " + e.what());
  }
  try {
    return model_from_json(j);
  } catch (const json::exception& e) {
    throw DataError("invalid model file '" + path + "': " + e.what());
  }
}

}  // namespace malaudit
