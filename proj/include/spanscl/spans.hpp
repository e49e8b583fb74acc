#pragma once

#include <algorithm>
#include <cstdint>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "spanscl/autodiff.hpp"
#include "spanscl/corpus.hpp"
#include "spanscl/encoder.hpp"
#include "spanscl/rng.hpp"

namespace spanscl {

enum class SpanSource { kGold, kPredicted, kMinedNegative, kLabelAgnostic };

inline std::string to_string(SpanSource s) {
  switch (s) {
    case SpanSource::kGold: return "gold";
    case SpanSource::kPredicted: return "predicted";
    case SpanSource::kMinedNegative: return "mined-negative";
    case SpanSource::kLabelAgnostic: return "label-agnostic";
  }
  return "unknown";
}

/// Word range [start, end) of one sentence. `label` is the span class, or O.
struct Span {
  std::string sentence_id;
  std::size_t start = 0;
  std::size_t end = 0;
  std::string label;
  SpanSource source = SpanSource::kGold;

  std::size_t length() const { return end - start; }
  bool overlaps(const Span& o) const { return start < o.end && o.start < end; }
  bool operator==(const Span&) const = default;
};

inline nlohmann::json to_json(const Span& s) {
  return {{"sentence_id", s.sentence_id}, {"start", s.start}, {"end", s.end}, {"label", s.label},
          {"source", to_string(s.source)}};
}

struct SpanEmbedding {
  Span span;
  RowVector z;
  bool normalized = false;
};

class DegenerateSpan : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// One span per maximal B-c I-c* run. Labels must already be valid IOB2.
inline std::vector<Span> extract_gold_spans(const LabeledSentence& sentence) {
  if (!is_valid_iob2(sentence.labels)) {
    throw ValidationError("sentence '" + sentence.id + "' is not valid IOB2; repair the labels first");
  }
  std::vector<Span> spans;
  for (std::size_t i = 0; i < sentence.labels.size();) {
    const auto t = parse_tag(sentence.labels[i]);
    if (t.kind != TagKind::kBegin) {
      ++i;
      continue;
    }
    std::size_t j = i + 1;
    while (j < sentence.labels.size() && sentence.labels[j] == "I-" + t.cls) ++j;
    spans.push_back({sentence.id, i, j, t.cls, SpanSource::kGold});
    i = j;
  }
  return spans;
}

/// Every maximal run of one label, O runs included. A B- tag always opens a
/// new run, so adjacent entities of the same class stay separate.
inline std::vector<Span> extract_label_agnostic_spans(const std::vector<std::string>& labels,
                                                      const std::string& sentence_id = {}) {
  std::vector<Span> spans;
  std::string current;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto t = parse_tag(labels[i]);
    const std::string cls = t.kind == TagKind::kOutside ? std::string(kOutsideTag) : t.cls;
    if (spans.empty() || t.kind == TagKind::kBegin || cls != current) {
      spans.push_back({sentence_id, i, i + 1, cls, SpanSource::kLabelAgnostic});
      current = cls;
    } else {
      spans.back().end = i + 1;
    }
  }
  return spans;
}

inline void check_span_bounds(const Span& span, Eigen::Index rows) {
  if (span.end <= span.start) throw std::invalid_argument("pool_span: zero-length span");
  if (static_cast<Eigen::Index>(span.end) > rows) {
    throw std::out_of_range("pool_span: span [" + std::to_string(span.start) + ", " + std::to_string(span.end) +
                            ") exceeds " + std::to_string(rows) + " words");
  }
}

/// Mean of the span's word vectors, optionally scaled to unit length.
inline SpanEmbedding pool_span(const EncodedSentence& enc, const Span& span, bool normalize) {
  check_span_bounds(span, enc.words.rows());
  const auto begin = static_cast<Eigen::Index>(span.start);
  const auto count = static_cast<Eigen::Index>(span.length());
  RowVector z = enc.words.middleRows(begin, count).colwise().mean();
  if (normalize) {
    const double n = z.norm();
    if (!(n > 0.0)) throw DegenerateSpan("pool_span: zero vector cannot be normalized");
    z /= n;
  }
  return {span, std::move(z), normalize};
}

inline autodiff::Var pool_span_on_tape(autodiff::Var words, const Span& span, bool normalize) {
  check_span_bounds(span, words.rows());
  auto z = autodiff::mean_rows(words, static_cast<Eigen::Index>(span.start), static_cast<Eigen::Index>(span.end));
  if (!normalize) return z;
  if (!(z.value().norm() > 0.0)) throw DegenerateSpan("pool_span: zero vector cannot be normalized");
  return autodiff::l2_normalize_rows(z);
}

// --- negative mining ------------------------------------------------------------

/// Lowercased surface forms of known spans (e.g. every gold idiom in training).
class PhraseLexicon {
 public:
  void add(std::vector<std::string> words) {
    for (auto& w : words) {
      for (auto& c : w) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    }
    if (!words.empty()) {
      longest_ = std::max(longest_, words.size());
      phrases_.insert(std::move(words));
    }
  }

  void add_gold_spans(const std::vector<LabeledSentence>& sentences) {
    for (const auto& s : sentences) {
      for (const auto& span : extract_gold_spans(s)) {
        add({s.tokens.begin() + static_cast<std::ptrdiff_t>(span.start),
             s.tokens.begin() + static_cast<std::ptrdiff_t>(span.end)});
      }
    }
  }

  bool contains(const std::vector<std::string>& words) const { return phrases_.count(words) != 0; }
  std::size_t longest() const { return longest_; }
  std::size_t size() const { return phrases_.size(); }
  const std::set<std::vector<std::string>>& phrases() const { return phrases_; }

 private:
  std::set<std::vector<std::string>> phrases_;
  std::size_t longest_ = 0;
};

enum class MiningKind { kNone, kSurfaceMatch, kRandomWindow, kSurfaceThenRandom };

inline MiningKind mining_kind_from(const std::string& s) {
  if (s == "none") return MiningKind::kNone;
  if (s == "surface-match") return MiningKind::kSurfaceMatch;
  if (s == "random-window") return MiningKind::kRandomWindow;
  if (s == "surface-then-random" || s == "default") return MiningKind::kSurfaceThenRandom;
  throw std::invalid_argument("unknown negative-mining policy: " + s);
}

inline std::string to_string(MiningKind k) {
  switch (k) {
    case MiningKind::kNone: return "none";
    case MiningKind::kSurfaceMatch: return "surface-match";
    case MiningKind::kRandomWindow: return "random-window";
    case MiningKind::kSurfaceThenRandom: return "surface-then-random";
  }
  return "unknown";
}

struct MiningPolicy {
  MiningKind kind = MiningKind::kSurfaceThenRandom;
  /// Maximum mined spans per sentence.
  std::size_t cap = 2;
  /// Longest random window, in words.
  std::size_t max_window = 4;
};

namespace detail {

/// Maximal runs of O tags as [start, end) pairs.
inline std::vector<std::pair<std::size_t, std::size_t>> outside_runs(const std::vector<std::string>& labels) {
  std::vector<std::pair<std::size_t, std::size_t>> runs;
  for (std::size_t i = 0; i < labels.size();) {
    if (labels[i] != kOutsideTag) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < labels.size() && labels[j] == kOutsideTag) ++j;
    runs.emplace_back(i, j);
    i = j;
  }
  return runs;
}

}  // namespace detail

/// Negative spans (label O) drawn from O regions only, so they never overlap
/// gold spans. Deterministic for a given seed.
inline std::vector<Span> mine_negative_spans(const LabeledSentence& sentence, const MiningPolicy& policy,
                                             const PhraseLexicon& lexicon, std::uint64_t seed) {
  std::vector<Span> mined;
  if (policy.kind == MiningKind::kNone || policy.cap == 0) return mined;
  const auto runs = detail::outside_runs(sentence.labels);
  if (runs.empty()) return mined;

  auto taken = [&](const Span& s) {
    return std::any_of(mined.begin(), mined.end(), [&](const Span& m) { return m.overlaps(s); });
  };

  if (policy.kind == MiningKind::kSurfaceMatch || policy.kind == MiningKind::kSurfaceThenRandom) {
    std::vector<std::string> lower(sentence.tokens);
    for (auto& w : lower) {
      for (auto& c : w) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    }
    for (const auto& [begin, end] : runs) {
      for (std::size_t i = begin; i < end && mined.size() < policy.cap;) {
        std::size_t matched = 0;
        for (std::size_t len = std::min(lexicon.longest(), end - i); len >= 1; --len) {
          if (lexicon.contains({lower.begin() + static_cast<std::ptrdiff_t>(i),
                                lower.begin() + static_cast<std::ptrdiff_t>(i + len)})) {
            matched = len;
            break;
          }
        }
        if (matched > 0) {
          mined.push_back({sentence.id, i, i + matched, std::string(kOutsideTag), SpanSource::kMinedNegative});
          i += matched;
        } else {
          ++i;
        }
      }
    }
  }

  if (policy.kind == MiningKind::kRandomWindow || policy.kind == MiningKind::kSurfaceThenRandom) {
    Rng rng(seed);
    const std::size_t attempts = 8 * policy.cap;
    for (std::size_t a = 0; a < attempts && mined.size() < policy.cap; ++a) {
      const auto& [begin, end] = runs[rng.below(runs.size())];
      const std::size_t room = end - begin;
      const std::size_t len = 1 + rng.below(std::min(std::max<std::size_t>(policy.max_window, 1), room));
      const std::size_t start = begin + rng.below(room - len + 1);
      Span s{sentence.id, start, start + len, std::string(kOutsideTag), SpanSource::kMinedNegative};
      if (!taken(s)) mined.push_back(std::move(s));
    }
  }
  std::sort(mined.begin(), mined.end(), [](const Span& a, const Span& b) { return a.start < b.start; });
  return mined;
}

}  // namespace spanscl
