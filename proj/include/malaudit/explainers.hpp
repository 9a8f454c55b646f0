#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "malaudit/corpus.hpp"
#include "malaudit/errors.hpp"
#include "malaudit/learners.hpp"
#include "malaudit/rng.hpp"

namespace malaudit {

enum class ExplainMethod { svm_weights, attention, lime };

inline std::string_view to_string(ExplainMethod m) {
  switch (m) {
    case ExplainMethod::svm_weights: return "svm_weights";
    case ExplainMethod::attention: return "attention";
    case ExplainMethod::lime: return "lime";
  }
  throw DataError("invalid explain method value");
}

// Per-sample feature attribution, dense over the catalog. Positive values
// support the predicted class; absent features always carry zero.
struct ExplanationVector {
  std::string sample_id;
  Label predicted_label = Label::benign;
  ExplainMethod method = ExplainMethod::svm_weights;
  std::vector<double> values;
};

// ---------------------------------------------------------------------------
// Weight-based explanation for the linear model: w elementwise the binary
// input, flipped when the prediction is benign so positive still means
// "supports the prediction".
// ---------------------------------------------------------------------------

inline ExplanationVector svm_explain(const LinearSvmModel& m,
                                     const Sample& x) {
  require_in_catalog(x, m.d);
  ExplanationVector out;
  out.sample_id = x.sample_id;
  out.method = ExplainMethod::svm_weights;
  out.predicted_label =
      sigmoid(m.margin(x)) > 0.5 ? Label::malware : Label::benign;
  out.values.assign(m.d, 0.0);
  double sign = out.predicted_label == Label::malware ? 1.0 : -1.0;
  for (std::uint32_t f : x.present_features) {
    out.values[f] = sign * m.weights[f];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Attention explanation: the sample's attention weights. Absent features get
// zero; their attention mass never reaches the head.
// ---------------------------------------------------------------------------

inline ExplanationVector attention_explain(const AttentionMlpModel& m,
                                           const Sample& x) {
  require_in_catalog(x, m.d);
  AttentionMlpModel::Forward f = m.forward(x);
  ExplanationVector out;
  out.sample_id = x.sample_id;
  out.method = ExplainMethod::attention;
  out.predicted_label = f.prob > 0.5 ? Label::malware : Label::benign;
  out.values.assign(m.d, 0.0);
  for (std::uint32_t i : x.present_features) out.values[i] = f.alpha[i];
  return out;
}

// ---------------------------------------------------------------------------
// LIME: local ridge surrogate over presence masks
// ---------------------------------------------------------------------------

struct LimeConfig {
  int n_perturbations = 1000;
  double kernel_width = 0.0;  // 0 = auto: 0.75 * sqrt(d_present)
  double ridge_penalty = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_perturbations < 2) {
      throw DataError("lime: n_perturbations must be at least 2");
    }
    if (kernel_width < 0) throw DataError("lime: kernel_width must be >= 0");
    if (ridge_penalty <= 0) {
      throw DataError("lime: ridge_penalty must be positive");
    }
  }
};

struct LimeDiagnostics {
  double weighted_r2 = 0.0;
  bool exhaustive = false;
  double ridge_used = 0.0;
  std::size_t n_masks = 0;
};

namespace detail {

// In-place Cholesky solve of the SPD system A x = b (A row-major n x n).
inline bool cholesky_solve(std::vector<double>& A, std::vector<double>& b,
                           std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      double sum = A[i * n + j];
      for (std::size_t k = 0; k < j; ++k) sum -= A[i * n + k] * A[j * n + k];
      if (i == j) {
        if (sum <= 0.0 || !std::isfinite(sum)) return false;
        A[i * n + i] = std::sqrt(sum);
      } else {
        A[i * n + j] = sum / A[j * n + j];
      }
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    double sum = b[i];
    for (std::size_t k = 0; k < i; ++k) sum -= A[i * n + k] * b[k];
    b[i] = sum / A[i * n + i];
  }
  for (std::size_t ii = n; ii > 0; --ii) {
    std::size_t i = ii - 1;
    double sum = b[i];
    for (std::size_t k = i + 1; k < n; ++k) sum -= A[k * n + i] * b[k];
    b[i] = sum / A[i * n + i];
  }
  return true;
}

}  // namespace detail

// Fits a weighted ridge surrogate to the model's scores over presence masks
// of the sample's own features (absent features stay absent). Masks are
// enumerated exhaustively when 2^d_present fits the perturbation budget at
// d_present <= 10, otherwise sampled iid with p=0.5 per bit. Mask weights are
// exp(-D^2 / width^2) with D the count of dropped features. The intercept is
// unpenalized. Coefficients flip sign for benign predictions, matching the
// other explainers.
inline ExplanationVector lime_explain(const TrainedModel& model,
                                      const Sample& x, const LimeConfig& cfg,
                                      LimeDiagnostics* diag = nullptr) {
  cfg.validate();
  std::size_t d = model.catalog_size();
  require_in_catalog(x, d);
  const std::vector<std::uint32_t>& present = x.present_features;
  std::size_t dp = present.size();
  if (dp == 0) {
    throw DataError("lime: sample '" + x.sample_id +
                    "' has no present features to explain");
  }

  bool exhaustive = dp <= 10 && (std::size_t{1} << dp) <=
                                    static_cast<std::size_t>(cfg.n_perturbations);
  std::size_t n_masks = exhaustive ? (std::size_t{1} << dp)
                                   : static_cast<std::size_t>(cfg.n_perturbations);
  double width =
      cfg.kernel_width > 0 ? cfg.kernel_width : 0.75 * std::sqrt(double(dp));

  Rng rng(seed_mix(cfg.seed, "lime", x.sample_id));
  std::vector<std::uint8_t> bits(n_masks * dp);
  for (std::size_t m = 0; m < n_masks; ++m) {
    for (std::size_t i = 0; i < dp; ++i) {
      bits[m * dp + i] = exhaustive ? static_cast<std::uint8_t>((m >> i) & 1)
                                    : static_cast<std::uint8_t>(rng.bernoulli(0.5));
    }
  }

  Sample probe;
  probe.sample_id = x.sample_id;
  probe.year = x.year;
  probe.label = x.label;
  std::vector<double> ys(n_masks), ws(n_masks);
  for (std::size_t m = 0; m < n_masks; ++m) {
    probe.present_features.clear();
    std::size_t kept = 0;
    for (std::size_t i = 0; i < dp; ++i) {
      if (bits[m * dp + i]) {
        probe.present_features.push_back(present[i]);
        ++kept;
      }
    }
    ys[m] = model.score(probe);
    double dropped = static_cast<double>(dp - kept);
    ws[m] = std::exp(-(dropped * dropped) / (width * width));
  }

  // Normal equations over z = (1, bits...), weighted; ridge on the
  // coefficients only.
  std::size_t n = dp + 1;
  std::vector<double> A(n * n, 0.0), rhs(n, 0.0), z(n);
  for (std::size_t m = 0; m < n_masks; ++m) {
    z[0] = 1.0;
    for (std::size_t i = 0; i < dp; ++i) z[i + 1] = bits[m * dp + i];
    double w = ws[m];
    for (std::size_t i = 0; i < n; ++i) {
      if (z[i] == 0.0) continue;
      double wz = w * z[i];
      rhs[i] += wz * ys[m];
      for (std::size_t j = 0; j <= i; ++j) A[i * n + j] += wz * z[j];
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) A[i * n + j] = A[j * n + i];
  }

  double ridge = cfg.ridge_penalty;
  std::vector<double> beta;
  for (int attempt = 0; attempt < 2; ++attempt) {
    std::vector<double> Awork = A;
    beta = rhs;
    for (std::size_t i = 1; i < n; ++i) Awork[i * n + i] += ridge;
    if (detail::cholesky_solve(Awork, beta, n)) break;
    if (attempt == 1) {
      throw ComputeError("lime: singular local regression for sample '" +
                         x.sample_id + "'");
    }
    ridge *= 10.0;
  }

  if (diag) {
    double sw = 0.0, sy = 0.0;
    for (std::size_t m = 0; m < n_masks; ++m) {
      sw += ws[m];
      sy += ws[m] * ys[m];
    }
    double mean = sy / sw;
    double sse = 0.0, sst = 0.0;
    for (std::size_t m = 0; m < n_masks; ++m) {
      double pred = beta[0];
      for (std::size_t i = 0; i < dp; ++i) {
        if (bits[m * dp + i]) pred += beta[i + 1];
      }
      sse += ws[m] * (ys[m] - pred) * (ys[m] - pred);
      sst += ws[m] * (ys[m] - mean) * (ys[m] - mean);
    }
    // Variance below fp noise means constant targets: the surrogate fits
    // them through its intercept, so report a perfect fit.
    double scale = std::max(1.0, std::abs(mean));
    double tiny = 1e-24 * sw * scale * scale;
    diag->weighted_r2 = sst > tiny ? 1.0 - sse / sst : 1.0;
    diag->exhaustive = exhaustive;
    diag->ridge_used = ridge;
    diag->n_masks = n_masks;
  }

  ExplanationVector out;
  out.sample_id = x.sample_id;
  out.method = ExplainMethod::lime;
  out.predicted_label = model.predict(x);
  out.values.assign(d, 0.0);
  double sign = out.predicted_label == Label::malware ? 1.0 : -1.0;
  for (std::size_t i = 0; i < dp; ++i) {
    out.values[present[i]] = sign * beta[i + 1];
  }
  return out;
}

// Model-appropriate dispatch: the linear model explains itself through its
// weights, the attention model through its attention, everything else
// through LIME.
inline ExplanationVector explain(const TrainedModel& model, const Sample& x,
                                 const LimeConfig& cfg) {
  switch (model.kind) {
    case ModelKind::svm:
      return svm_explain(std::get<LinearSvmModel>(model.impl), x);
    case ModelKind::attention_mlp:
      return attention_explain(std::get<AttentionMlpModel>(model.impl), x);
    default:
      return lime_explain(model, x, cfg);
  }
}

}  // namespace malaudit
