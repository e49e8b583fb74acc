#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>
#include <json.hpp>

#include "spanscl/harness.hpp"
#include "spanscl/model.hpp"
#include "spanscl/spans.hpp"

namespace spanscl {

enum class EmbeddingKind { kCls, kWord, kSpan };

inline EmbeddingKind embedding_kind_from(const std::string& s) {
  if (s == "cls") return EmbeddingKind::kCls;
  if (s == "word") return EmbeddingKind::kWord;
  if (s == "span") return EmbeddingKind::kSpan;
  throw std::invalid_argument("unknown embedding kind: " + s + " (expected cls, word or span)");
}

inline std::string to_string(EmbeddingKind k) {
  switch (k) {
    case EmbeddingKind::kCls: return "cls";
    case EmbeddingKind::kWord: return "word";
    case EmbeddingKind::kSpan: return "span";
  }
  return "unknown";
}

/// Where a point came from. For cls points start = end = 0; for word points
/// [start, end) covers the single word.
struct PointMeta {
  std::string sentence_id;
  std::size_t start = 0;
  std::size_t end = 0;
  std::string label;
  std::string model;
  double lambda_span = 0.0;

  bool operator==(const PointMeta&) const = default;
};

struct EmbeddingDump {
  EmbeddingKind kind = EmbeddingKind::kCls;
  Matrix points;
  std::vector<PointMeta> meta;

  std::size_t size() const { return meta.size(); }
};

/// cls: one point per sentence, labeled "idiomatic" when the sentence has a
/// span and "literal" otherwise. word: one point per word with its gold tag.
/// span: one mean-pooled point per label-agnostic run, O runs included.
inline EmbeddingDump extract_embeddings(SpanTagger& model, const std::vector<LabeledSentence>& sentences,
                                        EmbeddingKind kind, const std::string& model_tag, double lambda_span) {
  check_tag_coverage(model.tags(), sentences, model_tag, "analysis input");
  const bool normalize = model.training_config().get_bool("normalize_spans", true);
  EmbeddingDump dump;
  dump.kind = kind;
  std::vector<RowVector> rows;
  for (const auto& s : sentences) {
    const auto p = model.prepare(s);
    const auto enc = model.encode(p);
    const auto& labels = p.sentence.labels;
    switch (kind) {
      case EmbeddingKind::kCls: {
        const bool has_span = std::any_of(labels.begin(), labels.end(), [](const auto& l) { return l != kOutsideTag; });
        rows.push_back(enc.cls);
        dump.meta.push_back({s.id, 0, 0, has_span ? "idiomatic" : "literal", model_tag, lambda_span});
        break;
      }
      case EmbeddingKind::kWord:
        for (std::size_t w = 0; w < labels.size(); ++w) {
          rows.push_back(enc.words.row(static_cast<Eigen::Index>(w)));
          dump.meta.push_back({s.id, w, w + 1, labels[w], model_tag, lambda_span});
        }
        break;
      case EmbeddingKind::kSpan:
        for (const auto& span : extract_label_agnostic_spans(labels, s.id)) {
          rows.push_back(pool_span(enc, span, normalize).z);
          dump.meta.push_back({s.id, span.start, span.end, span.label, model_tag, lambda_span});
        }
        break;
    }
  }
  const Eigen::Index d = rows.empty() ? 0 : rows.front().size();
  dump.points.resize(static_cast<Eigen::Index>(rows.size()), d);
  for (std::size_t i = 0; i < rows.size(); ++i) dump.points.row(static_cast<Eigen::Index>(i)) = rows[i];
  return dump;
}

inline std::string serialize_dump_jsonl(const EmbeddingDump& dump) {
  std::string out;
  for (std::size_t i = 0; i < dump.size(); ++i) {
    const auto& m = dump.meta[i];
    const auto row = dump.points.row(static_cast<Eigen::Index>(i));
    nlohmann::json j = {{"kind", to_string(dump.kind)}, {"sentence_id", m.sentence_id}, {"start", m.start},
                        {"end", m.end},                 {"label", m.label},             {"model", m.model},
                        {"lambda_span", m.lambda_span}, {"vector", std::vector<double>(row.begin(), row.end())}};
    out += j.dump() + "\n";
  }
  return out;
}

inline EmbeddingDump parse_dump_jsonl(std::string_view text) {
  EmbeddingDump dump;
  std::vector<std::vector<double>> rows;
  std::size_t line_no = 0;
  for (const auto& raw : detail::split(text, '\n')) {
    ++line_no;
    const auto line = detail::trim(raw);
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(line_no, e.what());
    }
    dump.kind = embedding_kind_from(j.at("kind").get<std::string>());
    dump.meta.push_back({j.at("sentence_id").get<std::string>(), j.at("start").get<std::size_t>(),
                         j.at("end").get<std::size_t>(), j.at("label").get<std::string>(),
                         j.at("model").get<std::string>(), j.at("lambda_span").get<double>()});
    rows.push_back(j.at("vector").get<std::vector<double>>());
    if (rows.back().size() != rows.front().size()) throw ParseError(line_no, "vector dimension differs from line 1");
  }
  dump.points.resize(static_cast<Eigen::Index>(rows.size()), rows.empty() ? 0 : static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < rows[i].size(); ++j) dump.points(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  }
  return dump;
}

// --- projections -----------------------------------------------------------------

enum class ProjectionMethod { kPca, kTsne };

inline ProjectionMethod projection_method_from(const std::string& s) {
  if (s == "pca") return ProjectionMethod::kPca;
  if (s == "tsne") return ProjectionMethod::kTsne;
  throw std::invalid_argument("unknown projection method: " + s + " (expected pca or tsne)");
}

inline std::string to_string(ProjectionMethod m) { return m == ProjectionMethod::kPca ? "pca" : "tsne"; }

struct TsneParams {
  double perplexity = 30.0;
  std::size_t iterations = 1000;
  /// 0 picks max(points / early_exaggeration / 4, 50).
  double learning_rate = 0.0;
  double early_exaggeration = 12.0;
  std::size_t exaggeration_iterations = 250;
  std::uint64_t seed = 7;
};

struct Projection {
  ProjectionMethod method = ProjectionMethod::kPca;
  Matrix coords;
  std::size_t components = 2;
  TsneParams tsne;
};

class InsufficientPoints : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct PcaResult {
  RowVector mean;
  /// d x k, one principal axis per column, by decreasing variance.
  Matrix axes;
  Vector variances;
  Matrix coords;
};

/// Exact PCA from the covariance eigendecomposition. Each axis is signed so
/// its largest-magnitude loading is positive.
inline PcaResult pca(const Matrix& points, std::size_t components) {
  const auto m = points.rows();
  const auto d = points.cols();
  if (m < 3) throw InsufficientPoints("pca needs at least 3 points, got " + std::to_string(m));
  if (components == 0 || static_cast<Eigen::Index>(components) > d) {
    throw std::invalid_argument("pca: components must be in [1, " + std::to_string(d) + "]");
  }
  PcaResult r;
  r.mean = points.colwise().mean();
  const Matrix centered = points.rowwise() - r.mean;
  const Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(m - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) throw std::runtime_error("pca: eigendecomposition failed");
  const auto k = static_cast<Eigen::Index>(components);
  r.axes.resize(d, k);
  r.variances.resize(k);
  for (Eigen::Index c = 0; c < k; ++c) {
    const Eigen::Index src = d - 1 - c;  // eigenvalues come in increasing order
    Eigen::VectorXd axis = solver.eigenvectors().col(src);
    Eigen::Index arg = 0;
    axis.cwiseAbs().maxCoeff(&arg);
    if (axis(arg) < 0.0) axis = -axis;
    r.axes.col(c) = axis;
    r.variances(c) = std::max(solver.eigenvalues()(src), 0.0);
  }
  r.coords = centered * r.axes;
  return r;
}

namespace detail {

inline Matrix squared_distances(const Matrix& x) {
  const Vector sq = x.rowwise().squaredNorm();
  Matrix d = (-2.0 * x * x.transpose()).colwise() + sq;
  d.rowwise() += sq.transpose();
  d = d.cwiseMax(0.0);
  d.diagonal().setZero();
  return d;
}

/// Row-conditional affinities whose entropy matches log(perplexity).
inline Matrix conditional_affinities(const Matrix& dist, double perplexity) {
  const auto m = dist.rows();
  const double target = std::log(perplexity);
  Matrix p = Matrix::Zero(m, m);
  for (Eigen::Index i = 0; i < m; ++i) {
    double beta = 1.0, lo = 0.0, hi = std::numeric_limits<double>::infinity();
    double min_d = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < m; ++j) {
      if (j != i) min_d = std::min(min_d, dist(i, j));
    }
    for (int iter = 0; iter < 200; ++iter) {
      double sum = 0.0, weighted = 0.0;
      for (Eigen::Index j = 0; j < m; ++j) {
        if (j == i) continue;
        const double e = std::exp(-beta * (dist(i, j) - min_d));
        p(i, j) = e;
        sum += e;
        weighted += e * (dist(i, j) - min_d);
      }
      const double entropy = std::log(sum) + beta * weighted / sum;
      p.row(i) /= sum;
      const double diff = entropy - target;
      if (std::abs(diff) < 1e-10) break;
      if (diff > 0.0) {
        lo = beta;
        beta = std::isinf(hi) ? beta * 2.0 : (beta + hi) / 2.0;
      } else {
        hi = beta;
        beta = (beta + lo) / 2.0;
      }
    }
  }
  return p;
}

}  // namespace detail

/// Exact t-SNE (all pairs) with early exaggeration, momentum and per-coordinate
/// gains; momentum and gains restart when exaggeration ends. Initialized from
/// the top two principal components scaled to a small standard deviation, plus
/// seeded jitter.
inline Matrix tsne(const Matrix& points, const TsneParams& params) {
  const auto m = points.rows();
  if (!(params.perplexity > 0.0)) throw std::invalid_argument("tsne: perplexity must be > 0");
  if (static_cast<double>(m) < 3.0 * params.perplexity) {
    throw InsufficientPoints("tsne needs at least 3 * perplexity = " + format_fixed(3.0 * params.perplexity, 1) +
                             " points, got " + std::to_string(m));
  }
  Matrix p = detail::conditional_affinities(detail::squared_distances(points), params.perplexity);
  p = (p + p.transpose()).eval() / (2.0 * static_cast<double>(m));
  p = p.cwiseMax(1e-12);
  p.diagonal().setZero();

  Matrix y(m, 2);
  Rng rng(params.seed);
  if (points.cols() >= 2) {
    y = pca(points, 2).coords;
  } else {
    y.col(0) = points.col(0).array() - points.col(0).mean();
    y.col(1).setZero();
  }
  const double spread = std::sqrt((y.col(0).array() - y.col(0).mean()).square().mean());
  y *= spread > 0.0 ? 1e-4 / spread : 0.0;
  for (Eigen::Index i = 0; i < y.size(); ++i) y.data()[i] += 1e-6 * rng.normal();

  const double rate = params.learning_rate > 0.0
                         ? params.learning_rate
                         : std::max(static_cast<double>(m) / params.early_exaggeration / 4.0, 50.0);
  Matrix update = Matrix::Zero(m, 2);
  Matrix gains = Matrix::Ones(m, 2);
  Matrix num(m, m);
  for (std::size_t iter = 0; iter < params.iterations; ++iter) {
    const bool early = iter < params.exaggeration_iterations;
    const double exaggeration = early ? params.early_exaggeration : 1.0;
    const double momentum = early ? 0.5 : 0.8;
    if (iter == params.exaggeration_iterations) {
      update.setZero();
      gains.setOnes();
    }
    num = (1.0 + detail::squared_distances(y).array()).inverse().matrix();
    num.diagonal().setZero();
    const double q_sum = std::max(num.sum(), 1e-300);
    const Matrix w = ((exaggeration * p).array() - (num.array() / q_sum).max(1e-12)).matrix().cwiseProduct(num);
    Matrix grad = 4.0 * (w.rowwise().sum().asDiagonal() * y - w * y);
    for (Eigen::Index i = 0; i < grad.size(); ++i) {
      double& g = gains.data()[i];
      g = (grad.data()[i] > 0.0) != (update.data()[i] > 0.0) ? g + 0.2 : g * 0.8;
      g = std::max(g, 0.01);
    }
    update = momentum * update - rate * gains.cwiseProduct(grad);
    y += update;
    y.rowwise() -= y.colwise().mean();
  }
  return y;
}

inline Projection project(const EmbeddingDump& dump, ProjectionMethod method, const TsneParams& params = {}) {
  Projection out;
  out.method = method;
  out.tsne = params;
  out.components = 2;
  if (method == ProjectionMethod::kPca) {
    if (dump.points.cols() < 2) throw std::invalid_argument("pca projection needs at least 2 dimensions");
    out.coords = pca(dump.points, 2).coords;
  } else {
    out.coords = tsne(dump.points, params);
  }
  if (!out.coords.allFinite()) throw std::runtime_error("projection produced non-finite coordinates");
  return out;
}

/// Mean silhouette coefficient of `coords` grouped by label. Points whose
/// label occurs once score 0. Returns 0 with fewer than two labels.
inline double silhouette(const Matrix& coords, const std::vector<std::string>& labels) {
  if (static_cast<std::size_t>(coords.rows()) != labels.size()) throw std::invalid_argument("silhouette: size mismatch");
  std::map<std::string, std::size_t> sizes;
  for (const auto& l : labels) ++sizes[l];
  if (sizes.size() < 2) return 0.0;
  const Matrix dist = detail::squared_distances(coords).cwiseSqrt();
  double total = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (sizes[labels[i]] < 2) continue;
    std::map<std::string, double> sums;
    for (std::size_t j = 0; j < labels.size(); ++j) {
      if (j != i) sums[labels[j]] += dist(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    }
    const double a = sums[labels[i]] / static_cast<double>(sizes[labels[i]] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (const auto& [label, sum] : sums) {
      if (label != labels[i]) b = std::min(b, sum / static_cast<double>(sizes[label]));
    }
    const double denom = std::max(a, b);
    total += denom > 0.0 ? (b - a) / denom : 0.0;
  }
  return total / static_cast<double>(labels.size());
}

}  // namespace spanscl
