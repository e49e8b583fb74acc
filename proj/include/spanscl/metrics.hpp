#pragma once

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "spanscl/corpus.hpp"
#include "spanscl/io.hpp"
#include "spanscl/spans.hpp"

namespace spanscl {

/// (start, end, class) triples of one sentence.
using Entity = std::tuple<std::size_t, std::size_t, std::string>;
using EntitySet = std::set<Entity>;

inline EntitySet entities_of(const std::vector<std::string>& labels) {
  EntitySet out;
  LabeledSentence tmp{{}, std::vector<std::string>(labels.size(), "_"), labels};
  for (const auto& s : extract_gold_spans(tmp)) out.emplace(s.start, s.end, s.label);
  return out;
}

struct EntityCounts {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  bool operator==(const EntityCounts&) const = default;
};

struct PrecisionRecallF1 {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

struct EvalReport {
  std::size_t sentences = 0;
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  double sa = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double gm = 0.0;

  bool operator==(const EvalReport&) const = default;
};

/// Fraction of sentences whose whole tag sequence matches.
inline double sequence_accuracy(const std::vector<std::vector<std::string>>& pred,
                                const std::vector<std::vector<std::string>>& gold) {
  if (pred.size() != gold.size()) throw std::invalid_argument("sequence_accuracy: sentence counts differ");
  if (gold.empty()) return 0.0;
  std::size_t exact = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    if (pred[i].size() != gold[i].size()) {
      throw std::invalid_argument("sequence_accuracy: sentence " + std::to_string(i) + " lengths differ");
    }
    exact += pred[i] == gold[i] ? 1 : 0;
  }
  return static_cast<double>(exact) / static_cast<double>(gold.size());
}

/// Exact boundary and class matching, summed over sentences.
inline EntityCounts entity_counts(const std::vector<EntitySet>& pred, const std::vector<EntitySet>& gold) {
  if (pred.size() != gold.size()) throw std::invalid_argument("entity_counts: sentence counts differ");
  EntityCounts c;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    std::size_t common = 0;
    for (const auto& e : pred[i]) common += gold[i].count(e);
    c.tp += common;
    c.fp += pred[i].size() - common;
    c.fn += gold[i].size() - common;
  }
  return c;
}

/// Zero denominators give 0 for the affected quantity.
inline PrecisionRecallF1 prf1(std::size_t tp, std::size_t fp, std::size_t fn) {
  PrecisionRecallF1 r;
  if (tp + fp > 0) r.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
  if (tp + fn > 0) r.recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
  if (r.precision + r.recall > 0.0) r.f1 = 2.0 * r.precision * r.recall / (r.precision + r.recall);
  return r;
}

inline double geometric_mean(double f1, double sa) {
  if (f1 < 0.0 || sa < 0.0 || f1 > 1.0 || sa > 1.0) {
    throw std::invalid_argument("geometric_mean: inputs must lie in [0, 1]");
  }
  return std::sqrt(f1 * sa);
}

inline EvalReport evaluate_tags(const std::vector<std::vector<std::string>>& pred,
                                const std::vector<std::vector<std::string>>& gold) {
  EvalReport r;
  r.sentences = gold.size();
  r.sa = sequence_accuracy(pred, gold);
  std::vector<EntitySet> pe, ge;
  pe.reserve(pred.size());
  ge.reserve(gold.size());
  for (const auto& p : pred) pe.push_back(entities_of(p));
  for (const auto& g : gold) ge.push_back(entities_of(g));
  const auto c = entity_counts(pe, ge);
  r.tp = c.tp;
  r.fp = c.fp;
  r.fn = c.fn;
  const auto m = prf1(c.tp, c.fp, c.fn);
  r.precision = m.precision;
  r.recall = m.recall;
  r.f1 = m.f1;
  r.gm = geometric_mean(r.f1, r.sa);
  return r;
}

// --- cross-dataset summaries ---------------------------------------------------

struct DatasetScore {
  std::string name;
  double sa = 0.0;
  double f1 = 0.0;
  double gm = 0.0;
};

struct CrossEvalSummary {
  std::vector<DatasetScore> rows;
  double mu_sa = 0.0;
  double mu_f1 = 0.0;
  double mu_gm = 0.0;
  std::string hardest;
  double r_sa = 0.0;
  double r_f1 = 0.0;
  double r_gm = 0.0;
  std::size_t datasets = 0;
};

/// Means over datasets, the dataset with the lowest per-dataset GM (first on
/// ties), and independent minima of SA and F1 with R_GM = sqrt(R_SA * R_F1).
inline CrossEvalSummary summarize_cross_eval(const std::vector<DatasetScore>& input) {
  if (input.empty()) throw std::invalid_argument("summarize_cross_eval: no datasets");
  CrossEvalSummary s;
  s.datasets = input.size();
  s.r_sa = input.front().sa;
  s.r_f1 = input.front().f1;
  double worst_gm = 0.0;
  for (std::size_t i = 0; i < input.size(); ++i) {
    DatasetScore row = input[i];
    row.gm = geometric_mean(row.f1, row.sa);
    s.mu_sa += row.sa;
    s.mu_f1 += row.f1;
    s.mu_gm += row.gm;
    s.r_sa = std::min(s.r_sa, row.sa);
    s.r_f1 = std::min(s.r_f1, row.f1);
    if (i == 0 || row.gm < worst_gm) {
      worst_gm = row.gm;
      s.hardest = row.name;
    }
    s.rows.push_back(std::move(row));
  }
  const auto k = static_cast<double>(input.size());
  s.mu_sa /= k;
  s.mu_f1 /= k;
  s.mu_gm /= k;
  s.r_gm = std::sqrt(s.r_sa * s.r_f1);
  return s;
}

// --- rendering -------------------------------------------------------------------

/// Percentage with two decimals, rounding half up.
inline std::string format_percent(double fraction) {
  const auto hundredths = static_cast<long long>(std::floor(fraction * 10000.0 + 0.5 + 1e-9));
  const auto whole = hundredths / 100;
  const auto frac = hundredths % 100;
  return std::to_string(whole) + "." + (frac < 10 ? "0" : "") + std::to_string(frac);
}

/// "SA/F1/P/R" in percent.
inline std::string format_quadruple(const EvalReport& r) {
  return format_percent(r.sa) + "/" + format_percent(r.f1) + "/" + format_percent(r.precision) + "/" +
         format_percent(r.recall);
}

inline nlohmann::json to_json(const EvalReport& r) {
  return {{"sentences", r.sentences}, {"tp", r.tp}, {"fp", r.fp}, {"fn", r.fn},  {"sa", r.sa},
          {"precision", r.precision}, {"recall", r.recall}, {"f1", r.f1}, {"gm", r.gm}};
}

inline EvalReport eval_report_from_json(const nlohmann::json& j) {
  EvalReport r;
  r.sentences = j.at("sentences").get<std::size_t>();
  r.tp = j.at("tp").get<std::size_t>();
  r.fp = j.at("fp").get<std::size_t>();
  r.fn = j.at("fn").get<std::size_t>();
  r.sa = j.at("sa").get<double>();
  r.precision = j.at("precision").get<double>();
  r.recall = j.at("recall").get<double>();
  r.f1 = j.at("f1").get<double>();
  r.gm = j.at("gm").get<double>();
  return r;
}

inline nlohmann::json to_json(const CrossEvalSummary& s) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : s.rows) rows.push_back({{"dataset", r.name}, {"sa", r.sa}, {"f1", r.f1}, {"gm", r.gm}});
  return {{"datasets", s.datasets}, {"rows", rows},     {"mu_sa", s.mu_sa}, {"mu_f1", s.mu_f1},
          {"mu_gm", s.mu_gm},       {"hardest", s.hardest}, {"r_sa", s.r_sa},   {"r_f1", s.r_f1},
          {"r_gm", s.r_gm}};
}

/// Left-aligned text table with column widths fitted to the content.
inline std::string render_table(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> widths(header.size(), 0);
  for (std::size_t c = 0; c < header.size(); ++c) widths[c] = header[c].size();
  for (const auto& row : rows) {
    for (std::size_t c = 0; c < row.size() && c < widths.size(); ++c) widths[c] = std::max(widths[c], row[c].size());
  }
  auto line = [&](const std::vector<std::string>& cells) {
    std::string out;
    for (std::size_t c = 0; c < widths.size(); ++c) {
      const std::string cell = c < cells.size() ? cells[c] : "";
      out += cell;
      if (c + 1 < widths.size()) out += std::string(widths[c] - cell.size() + 2, ' ');
    }
    while (!out.empty() && out.back() == ' ') out.pop_back();
    return out + "\n";
  };
  std::string out = line(header);
  std::size_t total = 0;
  for (auto w : widths) total += w + 2;
  out += std::string(total > 2 ? total - 2 : 0, '-') + "\n";
  for (const auto& row : rows) out += line(row);
  return out;
}

inline std::string render_summary_table(const std::vector<std::pair<std::string, CrossEvalSummary>>& summaries) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& [model, s] : summaries) {
    rows.push_back({model, format_fixed(s.mu_sa, 4), format_fixed(s.mu_f1, 4), format_fixed(s.mu_gm, 4), s.hardest,
                    format_fixed(s.r_sa, 4), format_fixed(s.r_f1, 4), format_fixed(s.r_gm, 4)});
  }
  return render_table({"model", "mu_SA", "mu_F1", "mu_GM", "hardest", "R_SA", "R_F1", "R_GM"}, rows);
}

}  // namespace spanscl
