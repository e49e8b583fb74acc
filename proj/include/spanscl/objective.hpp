#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "spanscl/autodiff.hpp"
#include "spanscl/io.hpp"
#include "spanscl/kv_config.hpp"
#include "spanscl/spans.hpp"

namespace spanscl {

struct ContrastiveConfig {
  /// Each selected hard negative appears this many times in the hard-loss
  /// denominator: once in the sum over all others and once more as TopKNeg.
  static constexpr double kHardNegativeMultiplicity = 2.0;

  double temperature = 0.07;
  std::size_t top_k = 5;
  bool normalize = true;
  double lambda_span = 0.0;

  void validate() const {
    if (!(temperature > 0.0)) throw ConfigError("temperature must be > 0");
    if (top_k < 1) throw ConfigError("top_k must be >= 1");
    if (!(lambda_span >= 0.0)) throw ConfigError("lambda_span must be >= 0");
  }

  static ContrastiveConfig from(const KeyValueConfig& kv, const std::string& prefix = "") {
    ContrastiveConfig c;
    c.temperature = kv.get_double(prefix + "temperature", c.temperature);
    const auto k = kv.get_int(prefix + "top_k", static_cast<long long>(c.top_k));
    if (k < 1) throw ConfigError("top_k must be >= 1");
    c.top_k = static_cast<std::size_t>(k);
    c.normalize = kv.get_bool(prefix + "normalize_spans", c.normalize);
    c.lambda_span = kv.get_double(prefix + "lambda_span", c.lambda_span);
    c.validate();
    return c;
  }

  void store(KeyValueConfig& kv, const std::string& prefix = "") const {
    kv.set(prefix + "temperature", format_fixed(temperature, 6));
    kv.set(prefix + "top_k", std::to_string(top_k));
    kv.set(prefix + "normalize_spans", normalize ? "true" : "false");
    kv.set(prefix + "lambda_span", format_fixed(lambda_span, 6));
  }
};

/// Span embeddings of one minibatch (one row per span) with their classes.
struct SpanBatch {
  Matrix z;
  std::vector<std::string> labels;
  std::vector<Span> spans;

  std::size_t size() const { return labels.size(); }
};

struct LossBreakdown {
  double slot = 0.0;
  double span_reg = 0.0;
  double span_hard = 0.0;
  double span = 0.0;
  double total = 0.0;
  std::size_t eligible_anchors = 0;
};

// --- slot loss -------------------------------------------------------------------

namespace detail {

inline std::size_t supervised_count(std::size_t rows, const std::vector<std::size_t>& gold,
                                    const std::vector<bool>& mask) {
  if (gold.size() != rows || mask.size() != rows) {
    throw std::invalid_argument("slot_loss: logits, gold labels and mask must have equal lengths");
  }
  const auto count = static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true));
  if (count == 0) throw std::invalid_argument("slot_loss: every position is masked");
  return count;
}

}  // namespace detail

/// Mean cross-entropy of softmax(logits) against gold indices over unmasked rows.
inline double slot_loss(const Matrix& logits, const std::vector<std::size_t>& gold, const std::vector<bool>& mask) {
  const auto count = detail::supervised_count(static_cast<std::size_t>(logits.rows()), gold, mask);
  double sum = 0.0;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    if (!mask[static_cast<std::size_t>(r)]) continue;
    const auto g = static_cast<Eigen::Index>(gold[static_cast<std::size_t>(r)]);
    if (g >= logits.cols()) throw std::out_of_range("slot_loss: gold label index out of range");
    const double m = logits.row(r).maxCoeff();
    const double lse = m + std::log((logits.row(r).array() - m).exp().sum());
    sum += lse - logits(r, g);
  }
  return sum / static_cast<double>(count);
}

inline autodiff::Var slot_loss_on_tape(autodiff::Var logits, const std::vector<std::size_t>& gold,
                                       const std::vector<bool>& mask) {
  autodiff::Tape& t = *logits.tape();
  Matrix out(1, 1);
  out(0, 0) = slot_loss(logits.value(), gold, mask);
  const double inv = 1.0 / static_cast<double>(detail::supervised_count(static_cast<std::size_t>(logits.rows()), gold, mask));
  return t.make(std::move(out), {logits}, [logits, gold, mask, inv](autodiff::Tape& t, std::size_t self) {
    const double g = t.grad(self)(0, 0);
    const Matrix p = autodiff::softmax_rows_value(t.value(logits));
    Matrix& gl = t.grad(logits);
    for (Eigen::Index r = 0; r < p.rows(); ++r) {
      if (!mask[static_cast<std::size_t>(r)]) continue;
      RowVector d = p.row(r);
      d(static_cast<Eigen::Index>(gold[static_cast<std::size_t>(r)])) -= 1.0;
      gl.row(r) += d * (g * inv);
    }
  });
}

// --- span contrastive loss ------------------------------------------------------

/// l_ij = z_i . z_j / tau.
inline Matrix similarity_logits(const Matrix& z, double temperature) {
  if (!(temperature > 0.0)) throw std::invalid_argument("similarity_logits: temperature must be > 0");
  return (z * z.transpose()) / temperature;
}

/// Per-anchor losses; `eligible[i]` is false when anchor i has no positive,
/// in which case loss[i] is 0 and must be ignored.
struct AnchorLosses {
  std::vector<double> loss;
  std::vector<bool> eligible;

  std::size_t eligible_count() const {
    return static_cast<std::size_t>(std::count(eligible.begin(), eligible.end(), true));
  }
};

namespace detail {

inline void check_logits(const Matrix& logits, std::size_t labels) {
  if (logits.rows() != logits.cols() || static_cast<std::size_t>(logits.rows()) != labels) {
    throw std::invalid_argument("span contrastive loss: logits must be n x n for n labels");
  }
}

/// Shared pieces of both losses for one anchor, scaled by the row maximum
/// over j != i so nothing overflows.
struct AnchorSums {
  double max = 0.0;       // max_{j != i} l_ij
  double positives = 0.0;  // sum_{p in P(i)} exp(l_ip - max)
  double others = 0.0;     // sum_{j != i} exp(l_ij - max)
  bool has_positive = false;
};

inline AnchorSums anchor_sums(const Matrix& logits, const std::vector<std::string>& labels, std::size_t i) {
  const auto n = labels.size();
  const auto r = static_cast<Eigen::Index>(i);
  AnchorSums s;
  s.max = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < n; ++j) {
    if (j != i) s.max = std::max(s.max, logits(r, static_cast<Eigen::Index>(j)));
  }
  for (std::size_t j = 0; j < n; ++j) {
    if (j == i) continue;
    const double e = std::exp(logits(r, static_cast<Eigen::Index>(j)) - s.max);
    s.others += e;
    if (labels[j] == labels[i]) {
      s.positives += e;
      s.has_positive = true;
    }
  }
  return s;
}

}  // namespace detail

/// L^reg_i = -log( sum_{p in P(i)} e^{l_ip} / sum_{j != i} e^{l_ij} ).
inline AnchorLosses span_contrastive_regular(const Matrix& logits, const std::vector<std::string>& labels) {
  detail::check_logits(logits, labels.size());
  AnchorLosses out{std::vector<double>(labels.size(), 0.0), std::vector<bool>(labels.size(), false)};
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto s = detail::anchor_sums(logits, labels, i);
    if (!s.has_positive) continue;
    out.eligible[i] = true;
    out.loss[i] = -std::log(s.positives / s.others);
  }
  return out;
}

/// For each anchor, up to k differently-labeled spans with the largest l_ij,
/// ties going to the lower index.
inline std::vector<std::vector<std::size_t>> topk_hard_negatives(const Matrix& logits,
                                                                 const std::vector<std::string>& labels,
                                                                 std::size_t k) {
  detail::check_logits(logits, labels.size());
  std::vector<std::vector<std::size_t>> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    std::vector<std::size_t> negatives;
    for (std::size_t j = 0; j < labels.size(); ++j) {
      if (j != i && labels[j] != labels[i]) negatives.push_back(j);
    }
    const auto r = static_cast<Eigen::Index>(i);
    std::stable_sort(negatives.begin(), negatives.end(), [&](std::size_t a, std::size_t b) {
      return logits(r, static_cast<Eigen::Index>(a)) > logits(r, static_cast<Eigen::Index>(b));
    });
    if (negatives.size() > k) negatives.resize(k);
    out[i] = std::move(negatives);
  }
  return out;
}

/// L^hard_i: as L^reg_i with sum_{j in TopKNeg(i)} e^{l_ij} added to the
/// denominator. Evaluated as L^reg_i + log1p(S_top / S_others), which is
/// exactly L^reg_i when TopKNeg(i) is empty.
inline AnchorLosses span_contrastive_hard(const Matrix& logits, const std::vector<std::string>& labels,
                                          std::size_t k) {
  const auto reg = span_contrastive_regular(logits, labels);
  const auto top = topk_hard_negatives(logits, labels, k);
  AnchorLosses out = reg;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (!out.eligible[i] || top[i].empty()) continue;
    const auto s = detail::anchor_sums(logits, labels, i);
    double extra = 0.0;
    for (auto j : top[i]) extra += std::exp(logits(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) - s.max);
    out.loss[i] = reg.loss[i] + std::log1p(extra / s.others);
  }
  return out;
}

struct SpanContrastiveResult {
  double value = 0.0;  // mean over eligible anchors of (L^reg_i + L^hard_i) / 2
  double regular = 0.0;
  double hard = 0.0;
  std::size_t eligible_anchors = 0;
  AnchorLosses per_anchor_regular;
  AnchorLosses per_anchor_hard;
};

/// Averages L_i = (L^reg_i + L^hard_i) / 2 over anchors that have at least
/// one positive. Batches without such anchors yield 0.
inline SpanContrastiveResult span_contrastive_loss(const SpanBatch& batch, const ContrastiveConfig& config) {
  if (static_cast<std::size_t>(batch.z.rows()) != batch.labels.size()) {
    throw std::invalid_argument("span_contrastive_loss: embedding rows and labels differ");
  }
  SpanContrastiveResult r;
  if (batch.size() < 2) {
    r.per_anchor_regular = {std::vector<double>(batch.size(), 0.0), std::vector<bool>(batch.size(), false)};
    r.per_anchor_hard = r.per_anchor_regular;
    return r;
  }
  const Matrix logits = similarity_logits(batch.z, config.temperature);
  r.per_anchor_regular = span_contrastive_regular(logits, batch.labels);
  r.per_anchor_hard = span_contrastive_hard(logits, batch.labels, config.top_k);
  r.eligible_anchors = r.per_anchor_regular.eligible_count();
  if (r.eligible_anchors == 0) return r;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (!r.per_anchor_regular.eligible[i]) continue;
    r.regular += r.per_anchor_regular.loss[i];
    r.hard += r.per_anchor_hard.loss[i];
  }
  const auto m = static_cast<double>(r.eligible_anchors);
  r.regular /= m;
  r.hard /= m;
  r.value = 0.5 * r.regular + 0.5 * r.hard;
  return r;
}

/// d(span_contrastive_loss)/dZ. TopKNeg membership is treated as locally
/// constant (it changes only where two logits tie).
inline Matrix span_contrastive_gradient(const Matrix& z, const std::vector<std::string>& labels,
                                        const ContrastiveConfig& config) {
  const auto n = labels.size();
  Matrix grad = Matrix::Zero(z.rows(), z.cols());
  if (n < 2) return grad;
  const Matrix logits = similarity_logits(z, config.temperature);
  const auto top = topk_hard_negatives(logits, labels, config.top_k);
  std::size_t eligible = 0;
  for (std::size_t i = 0; i < n; ++i) eligible += detail::anchor_sums(logits, labels, i).has_positive ? 1 : 0;
  if (eligible == 0) return grad;

  // dL/dl_ij, then l = Z Z^T / tau gives dL/dZ = (G + G^T) Z / tau.
  Matrix g = Matrix::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  const double weight = 0.5 / static_cast<double>(eligible);
  for (std::size_t i = 0; i < n; ++i) {
    const auto s = detail::anchor_sums(logits, labels, i);
    if (!s.has_positive) continue;
    const auto r = static_cast<Eigen::Index>(i);
    double hard_denominator = s.others;
    for (auto j : top[i]) hard_denominator += std::exp(logits(r, static_cast<Eigen::Index>(j)) - s.max);
    std::vector<double> multiplicity(n, 1.0);
    for (auto j : top[i]) multiplicity[j] = ContrastiveConfig::kHardNegativeMultiplicity;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const auto c = static_cast<Eigen::Index>(j);
      const double e = std::exp(logits(r, c) - s.max);
      const double positive_term = labels[j] == labels[i] ? e / s.positives : 0.0;
      const double d_reg = e / s.others - positive_term;
      const double d_hard = multiplicity[j] * e / hard_denominator - positive_term;
      g(r, c) = weight * (d_reg + d_hard);
    }
  }
  grad = (g + g.transpose()) * z / config.temperature;
  return grad;
}

inline autodiff::Var span_contrastive_on_tape(autodiff::Var z, const std::vector<std::string>& labels,
                                              const ContrastiveConfig& config, SpanContrastiveResult* result = nullptr) {
  autodiff::Tape& t = *z.tape();
  SpanBatch batch{z.value(), labels, {}};
  auto r = span_contrastive_loss(batch, config);
  Matrix out(1, 1);
  out(0, 0) = r.value;
  if (result != nullptr) *result = std::move(r);
  return t.make(std::move(out), {z}, [z, labels, config](autodiff::Tape& t, std::size_t self) {
    const double g = t.grad(self)(0, 0);
    t.grad(z) += span_contrastive_gradient(t.value(z), labels, config) * g;
  });
}

/// slot + lambda * span.
inline double total_loss(double slot, double span, double lambda_span) {
  if (!(lambda_span >= 0.0)) throw std::invalid_argument("total_loss: lambda_span must be >= 0");
  return slot + lambda_span * span;
}

}  // namespace spanscl
