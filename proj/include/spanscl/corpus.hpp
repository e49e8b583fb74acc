#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "spanscl/io.hpp"
#include "spanscl/kv_config.hpp"
#include "spanscl/rng.hpp"

namespace spanscl {

/// Malformed input structure; carries the 1-based line number.
class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

/// A tag outside the O / B-<class> / I-<class> grammar, or an invalid span.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LabeledSentence {
  std::string id;
  std::vector<std::string> tokens;
  std::vector<std::string> labels;

  std::size_t size() const { return tokens.size(); }
  bool operator==(const LabeledSentence&) const = default;
};

// --- tag grammar -----------------------------------------------------------

enum class TagKind { kOutside, kBegin, kInside };

struct Tag {
  TagKind kind = TagKind::kOutside;
  std::string cls;  // empty for O
};

inline constexpr std::string_view kOutsideTag = "O";

inline std::optional<Tag> try_parse_tag(std::string_view tag) {
  if (tag == kOutsideTag) return Tag{};
  if (tag.size() < 3 || tag[1] != '-') return std::nullopt;
  const auto cls = tag.substr(2);
  if (cls.find_first_of(" \t\r\n") != std::string_view::npos) return std::nullopt;
  if (tag[0] == 'B') return Tag{TagKind::kBegin, std::string(cls)};
  if (tag[0] == 'I') return Tag{TagKind::kInside, std::string(cls)};
  return std::nullopt;
}

inline Tag parse_tag(std::string_view tag) {
  auto t = try_parse_tag(tag);
  if (!t) throw ValidationError("unknown tag '" + std::string(tag) + "' (expected O, B-<class> or I-<class>)");
  return *t;
}

inline bool is_valid_iob2(const std::vector<std::string>& labels) {
  std::optional<Tag> prev;
  for (const auto& l : labels) {
    const auto t = try_parse_tag(l);
    if (!t) return false;
    if (t->kind == TagKind::kInside &&
        (!prev || prev->kind == TagKind::kOutside || prev->cls != t->cls)) {
      return false;
    }
    prev = t;
  }
  return true;
}

/// Turns every I-<c> lacking a same-class predecessor into B-<c>.
inline std::vector<std::string> repair_labels(const std::vector<std::string>& labels) {
  std::vector<std::string> out;
  out.reserve(labels.size());
  std::optional<Tag> prev;
  for (const auto& l : labels) {
    auto t = parse_tag(l);
    if (t.kind == TagKind::kInside &&
        (!prev || prev->kind == TagKind::kOutside || prev->cls != t.cls)) {
      t.kind = TagKind::kBegin;
      out.push_back("B-" + t.cls);
    } else {
      out.push_back(l);
    }
    prev = std::move(t);
  }
  return out;
}

/// Span classes mentioned by a label sequence (sorted, unique).
inline std::vector<std::string> classes_of(const std::vector<LabeledSentence>& sentences) {
  std::map<std::string, bool> seen;
  for (const auto& s : sentences) {
    for (const auto& l : s.labels) {
      const auto t = parse_tag(l);
      if (t.kind != TagKind::kOutside) seen[t.cls] = true;
    }
  }
  std::vector<std::string> out;
  for (const auto& [c, _] : seen) out.push_back(c);
  return out;
}

// --- CoNLL-style and JSON-lines formats -------------------------------------

inline void validate_sentence(const LabeledSentence& s) {
  if (s.tokens.empty()) throw ValidationError("sentence '" + s.id + "' has no tokens");
  if (s.tokens.size() != s.labels.size()) {
    throw ValidationError("sentence '" + s.id + "': token/label count mismatch");
  }
  for (const auto& l : s.labels) parse_tag(l);
}

/// Blank-line separated blocks of `token<TAB>tag` lines. A leading
/// `# id = <id>` line names the sentence; otherwise it is named s<index>.
inline std::vector<LabeledSentence> parse_conll(std::string_view text) {
  std::vector<LabeledSentence> out;
  LabeledSentence current;
  bool open = false;
  auto close = [&] {
    if (!open) return;
    if (current.id.empty()) current.id = "s" + std::to_string(out.size());
    if (current.tokens.empty()) throw ValidationError("sentence '" + current.id + "' has no tokens");
    out.push_back(std::move(current));
    current = {};
    open = false;
  };

  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    auto line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);

    if (detail::trim(line).empty()) {
      close();
      continue;
    }
    if (line.starts_with("# id = ")) {
      if (open && !current.tokens.empty()) throw ParseError(line_no, "id line inside a sentence block");
      current.id = std::string(line.substr(7));
      open = true;
      continue;
    }
    const auto cols = detail::split(line, '\t');
    if (cols.size() != 2) {
      throw ParseError(line_no, "expected 2 tab-separated columns, found " + std::to_string(cols.size()));
    }
    if (cols[0].empty()) throw ParseError(line_no, "empty token");
    if (!try_parse_tag(cols[1])) {
      throw ValidationError("line " + std::to_string(line_no) + ": unknown tag '" + cols[1] + "'");
    }
    current.tokens.push_back(cols[0]);
    current.labels.push_back(cols[1]);
    open = true;
  }
  close();
  return out;
}

inline std::string serialize_conll(const std::vector<LabeledSentence>& sentences) {
  std::string out;
  for (const auto& s : sentences) {
    out += "# id = " + s.id + "\n";
    for (std::size_t i = 0; i < s.size(); ++i) out += s.tokens[i] + "\t" + s.labels[i] + "\n";
    out += "\n";
  }
  return out;
}

/// One JSON object per line: {"id": ..., "tokens": [...], "labels": [...]}.
inline std::vector<LabeledSentence> parse_jsonl(std::string_view text) {
  std::vector<LabeledSentence> out;
  std::size_t line_no = 0;
  for (const auto& raw : detail::split(text, '\n')) {
    ++line_no;
    if (detail::trim(raw).empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(raw);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(line_no, std::string("invalid JSON: ") + e.what());
    }
    if (!j.is_object() || !j.contains("tokens") || !j.contains("labels")) {
      throw ParseError(line_no, "expected an object with \"tokens\" and \"labels\"");
    }
    LabeledSentence s;
    try {
      s.id = j.value("id", "s" + std::to_string(out.size()));
      s.tokens = j.at("tokens").get<std::vector<std::string>>();
      s.labels = j.at("labels").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(line_no, e.what());
    }
    try {
      validate_sentence(s);
    } catch (const ValidationError& e) {
      throw ValidationError("line " + std::to_string(line_no) + ": " + e.what());
    }
    out.push_back(std::move(s));
  }
  return out;
}

inline std::string serialize_jsonl(const std::vector<LabeledSentence>& sentences) {
  std::string out;
  for (const auto& s : sentences) {
    nlohmann::json j = {{"id", s.id}, {"tokens", s.tokens}, {"labels", s.labels}};
    out += j.dump() + "\n";
  }
  return out;
}

inline bool is_jsonl_path(const std::filesystem::path& path) {
  const auto ext = path.extension().string();
  return ext == ".jsonl" || ext == ".json";
}

/// Reads either format (chosen by extension) and repairs stray I- tags.
inline std::vector<LabeledSentence> load_sentences(const std::filesystem::path& path) {
  const auto text = read_file(path);
  auto sentences = is_jsonl_path(path) ? parse_jsonl(text) : parse_conll(text);
  std::size_t repaired = 0;
  for (auto& s : sentences) {
    if (!is_valid_iob2(s.labels)) {
      s.labels = repair_labels(s.labels);
      ++repaired;
    }
  }
  if (repaired > 0) {
    log(LogLevel::kWarning, path.string() + ": repaired IOB2 tags in " + std::to_string(repaired) + " sentence(s)");
  }
  return sentences;
}

inline void save_sentences(const std::filesystem::path& path, const std::vector<LabeledSentence>& sentences) {
  write_file_atomic(path, is_jsonl_path(path) ? serialize_jsonl(sentences) : serialize_conll(sentences));
}

// --- splitting ---------------------------------------------------------------

struct DatasetSplit {
  std::vector<LabeledSentence> train;
  std::vector<LabeledSentence> dev;
  std::vector<LabeledSentence> test;
  std::uint64_t seed = 0;
  std::array<double, 3> ratios{0.8, 0.1, 0.1};
};

/// Seeded shuffle, then cut at floor(r_train * n) and floor((r_train + r_dev) * n).
inline DatasetSplit split_dataset(std::vector<LabeledSentence> sentences, std::array<double, 3> ratios,
                                  std::uint64_t seed) {
  if (sentences.empty()) throw std::invalid_argument("split_dataset: no sentences");
  for (double r : ratios) {
    if (r < 0.0) throw std::invalid_argument("split_dataset: negative ratio");
  }
  if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9) {
    throw std::invalid_argument("split_dataset: ratios must sum to 1");
  }
  Rng rng(seed);
  rng.shuffle(sentences);
  const auto n = sentences.size();
  const double nd = static_cast<double>(n);
  // The epsilon keeps e.g. 0.9 * 10 from flooring to 8 on representation error.
  auto cut = [&](double r) { return std::min(n, static_cast<std::size_t>(std::floor(r * nd + 1e-9))); };
  const auto train_n = cut(ratios[0]);
  const auto dev_n = cut(ratios[0] + ratios[1]) - train_n;

  DatasetSplit split;
  split.seed = seed;
  split.ratios = ratios;
  auto it = sentences.begin();
  split.train.assign(std::make_move_iterator(it), std::make_move_iterator(it + static_cast<std::ptrdiff_t>(train_n)));
  it += static_cast<std::ptrdiff_t>(train_n);
  split.dev.assign(std::make_move_iterator(it), std::make_move_iterator(it + static_cast<std::ptrdiff_t>(dev_n)));
  it += static_cast<std::ptrdiff_t>(dev_n);
  split.test.assign(std::make_move_iterator(it), std::make_move_iterator(sentences.end()));
  return split;
}

inline std::filesystem::path find_split_file(const std::filesystem::path& dir, const std::string& split) {
  for (const char* ext : {".conll", ".tsv", ".txt", ".jsonl"}) {
    auto p = dir / (split + ext);
    if (std::filesystem::exists(p)) return p;
  }
  throw IoError("no " + split + " file (.conll/.tsv/.txt/.jsonl) in " + dir.string());
}

/// Loads train/dev/test files from a dataset directory.
inline DatasetSplit load_split_dir(const std::filesystem::path& dir) {
  DatasetSplit split;
  split.train = load_sentences(find_split_file(dir, "train"));
  split.dev = load_sentences(find_split_file(dir, "dev"));
  split.test = load_sentences(find_split_file(dir, "test"));
  const double n = static_cast<double>(split.train.size() + split.dev.size() + split.test.size());
  if (n > 0) {
    split.ratios = {split.train.size() / n, split.dev.size() / n, split.test.size() / n};
  }
  return split;
}

inline void save_split_dir(const std::filesystem::path& dir, const DatasetSplit& split) {
  save_sentences(dir / "train.conll", split.train);
  save_sentences(dir / "dev.conll", split.dev);
  save_sentences(dir / "test.conll", split.test);
}

// --- subword alignment ---------------------------------------------------------

/// Only the first subword of each word is supervised.
struct SubwordAlignment {
  std::vector<std::size_t> first_positions;
  std::vector<bool> mask;

  std::size_t subword_count() const { return mask.size(); }
};

inline SubwordAlignment align_to_subwords(const LabeledSentence& sentence,
                                          const std::vector<std::size_t>& subword_lengths) {
  if (subword_lengths.size() != sentence.size()) {
    throw std::invalid_argument("align_to_subwords: " + std::to_string(subword_lengths.size()) +
                                " subword lengths for " + std::to_string(sentence.size()) + " words");
  }
  SubwordAlignment a;
  std::size_t pos = 0;
  for (auto len : subword_lengths) {
    if (len == 0) throw std::invalid_argument("align_to_subwords: word with zero subwords");
    a.first_positions.push_back(pos);
    a.mask.push_back(true);
    for (std::size_t k = 1; k < len; ++k) a.mask.push_back(false);
    pos += len;
  }
  return a;
}

// --- synthetic corpus ------------------------------------------------------------

/// A phrase with contexts that use it figuratively (span is labeled) and
/// literally (span stays O). In templates `{}` is replaced by the phrase and
/// `_` by a random filler word.
struct PhraseTemplates {
  std::string surface;
  std::vector<std::string> figurative;
  std::vector<std::string> literal;
};

struct SynthesisConfig {
  std::size_t vocabulary_size = 300;
  std::vector<PhraseTemplates> phrases;
  std::size_t train_count = 2000;
  std::size_t dev_count = 250;
  std::size_t test_count = 250;
  double idiom_rate = 0.5;
  std::uint64_t seed = 13;
  std::string span_class = "idiom";
};

inline std::vector<PhraseTemplates> default_phrase_inventory() {
  return {
      {"saw the light",
       {"after years of doubt the skeptic finally {} _ _", "_ the stubborn critic {} about the plan",
        "once the debate was over she {} at last _"},
       {"from the ship the sailor {} of the lighthouse _", "_ at night we {} from the tower window",
        "the guard {} shining under the door _"}},
      {"break the ice",
       {"at the party a joke helped {} between strangers _", "_ the host tried to {} with the new team",
        "a warm story can {} at awkward meetings"},
       {"the fisherman used an axe to {} on the lake _", "_ we had to {} covering the frozen pond",
        "heavy boats {} in the harbor each winter"}},
      {"spill the beans",
       {"_ please do not {} about the surprise party", "the witness refused to {} to the press _",
        "sooner or later someone will {} about the secret deal"},
       {"_ be careful not to {} on the kitchen floor", "the clumsy cook managed to {} from the pot",
        "a tipped jar can {} across the table _"}},
      {"in hot water",
       {"after the scandal the mayor was {} with voters _", "_ he landed {} for missing the deadline",
        "the company found itself {} with regulators"},
       {"boil the eggs {} for ten minutes _", "_ soak the dirty pans {} with soap",
        "the tea leaves steep {} before serving"}},
      {"on the fence",
       {"_ many voters are still {} about the election", "the committee remained {} regarding the offer",
        "she is {} about moving abroad _"},
       {"a small bird sat {} near the garden _", "_ the farmer hung his coat {} by the gate",
        "fresh paint dried {} behind the barn"}},
      {"in the same boat",
       {"all the students are {} before the exam _", "_ during the layoffs everyone was {}",
        "we are {} when prices go up"},
       {"the two fishermen sat {} on the river _", "_ the rowers trained {} every morning",
        "the tourists crossed the bay {} with a guide"}},
      {"over the moon",
       {"_ she was {} about the promotion", "the parents were {} when the baby arrived",
        "our team is {} after the victory _"},
       {"the probe flew {} and toward the planets _", "_ the rocket passed {} on its long orbit",
        "thin clouds drifted {} that cold night"}},
      {"piece of cake",
       {"_ for her the final exam was a {}", "fixing that old engine is a {} for him",
        "the first level of the game is a {} _"},
       {"he ate a {} with his coffee _", "_ the child saved a {} for later",
        "grandma baked a {} for every guest"}},
  };
}

/// Deterministic pronounceable filler words ("kabo", "melu", ...).
inline std::vector<std::string> filler_vocabulary(std::size_t size) {
  static const std::array<const char*, 20> syllables = {"ka", "bo", "mi", "lu", "te", "ri", "no", "sa", "pe", "du",
                                                        "vo", "zi", "fa", "gu", "he", "jo", "ne", "wu", "ya", "xo"};
  std::vector<std::string> words;
  words.reserve(size);
  for (std::size_t i = 0; i < size; ++i) {
    std::size_t v = i;
    std::string w;
    std::size_t digits = 0;
    do {
      w += syllables[v % syllables.size()];
      v /= syllables.size();
      ++digits;
    } while (v > 0 || digits < 2);
    words.push_back(std::move(w));
  }
  return words;
}

namespace detail {

inline std::vector<std::string> split_words(std::string_view s) {
  std::vector<std::string> out;
  for (const auto& w : split(s, ' ')) {
    if (!w.empty()) out.push_back(w);
  }
  return out;
}

}  // namespace detail

/// Reads a flat key-value synthesis config. Phrases are given as
/// `phrase.<n> = surface`, `phrase.<n>.figurative = tpl | tpl | ...` and
/// `phrase.<n>.literal = tpl | ...`; without them the built-in inventory is used.
inline SynthesisConfig synthesis_config_from(const KeyValueConfig& kv) {
  SynthesisConfig c;
  c.vocabulary_size = static_cast<std::size_t>(kv.get_int("vocabulary_size", static_cast<long long>(c.vocabulary_size)));
  c.train_count = static_cast<std::size_t>(kv.get_int("train_count", static_cast<long long>(c.train_count)));
  c.dev_count = static_cast<std::size_t>(kv.get_int("dev_count", static_cast<long long>(c.dev_count)));
  c.test_count = static_cast<std::size_t>(kv.get_int("test_count", static_cast<long long>(c.test_count)));
  c.idiom_rate = kv.get_double("idiom_rate", c.idiom_rate);
  c.seed = static_cast<std::uint64_t>(kv.get_int("seed", static_cast<long long>(c.seed)));
  c.span_class = kv.get_string("span_class", c.span_class);

  std::map<std::string, PhraseTemplates> by_index;
  for (const auto& [key, value] : kv.with_prefix("phrase.")) {
    const auto dot = key.find('.');
    const auto index = key.substr(0, dot);
    auto& p = by_index[index];
    auto templates = [&] {
      std::vector<std::string> out;
      for (const auto& t : detail::split(value, '|')) {
        const auto tt = detail::trim(t);
        if (!tt.empty()) out.emplace_back(tt);
      }
      return out;
    };
    if (dot == std::string::npos) {
      p.surface = value;
    } else if (key.substr(dot + 1) == "figurative") {
      p.figurative = templates();
    } else if (key.substr(dot + 1) == "literal") {
      p.literal = templates();
    } else {
      throw ConfigError("unknown phrase key: phrase." + key);
    }
  }
  for (auto& [index, p] : by_index) {
    if (p.surface.empty() || p.figurative.empty() || p.literal.empty()) {
      throw ConfigError("phrase." + index + " needs a surface form plus figurative and literal templates");
    }
    c.phrases.push_back(std::move(p));
  }
  if (c.phrases.empty()) c.phrases = default_phrase_inventory();
  return c;
}

/// Each sentence holds exactly one phrase occurrence, figurative (labeled
/// span) with probability idiom_rate and literal (all O) otherwise.
inline DatasetSplit generate_synthetic_corpus(const SynthesisConfig& config) {
  if (!(config.idiom_rate >= 0.0 && config.idiom_rate <= 1.0)) {
    throw std::invalid_argument("generate_synthetic_corpus: idiom_rate must lie in [0, 1]");
  }
  if (config.phrases.empty()) throw std::invalid_argument("generate_synthetic_corpus: empty phrase inventory");
  if (config.vocabulary_size == 0) throw std::invalid_argument("generate_synthetic_corpus: empty vocabulary");
  for (const auto& p : config.phrases) {
    if (p.figurative.empty() || p.literal.empty() || detail::split_words(p.surface).empty()) {
      throw std::invalid_argument("generate_synthetic_corpus: phrase '" + p.surface + "' is incomplete");
    }
  }

  const auto fillers = filler_vocabulary(config.vocabulary_size);
  Rng rng(config.seed);
  const std::size_t total = config.train_count + config.dev_count + config.test_count;
  std::vector<LabeledSentence> all;
  all.reserve(total);
  for (std::size_t n = 0; n < total; ++n) {
    const auto& phrase = config.phrases[rng.below(config.phrases.size())];
    const bool figurative = rng.uniform() < config.idiom_rate;
    const auto& pool = figurative ? phrase.figurative : phrase.literal;
    const auto& tpl = pool[rng.below(pool.size())];

    LabeledSentence s;
    char id[32];
    std::snprintf(id, sizeof id, "syn-%06zu", n);
    s.id = id;
    for (const auto& word : detail::split_words(tpl)) {
      if (word == "{}") {
        bool first = true;
        for (const auto& pw : detail::split_words(phrase.surface)) {
          s.tokens.push_back(pw);
          s.labels.push_back(figurative ? (first ? "B-" : "I-") + config.span_class : std::string(kOutsideTag));
          first = false;
        }
      } else if (word == "_") {
        s.tokens.push_back(fillers[rng.below(fillers.size())]);
        s.labels.emplace_back(kOutsideTag);
      } else {
        s.tokens.push_back(word);
        s.labels.emplace_back(kOutsideTag);
      }
    }
    all.push_back(std::move(s));
  }

  DatasetSplit split;
  split.seed = config.seed;
  const double t = total == 0 ? 1.0 : static_cast<double>(total);
  split.ratios = {config.train_count / t, config.dev_count / t, config.test_count / t};
  auto it = all.begin();
  split.train.assign(it, it + static_cast<std::ptrdiff_t>(config.train_count));
  it += static_cast<std::ptrdiff_t>(config.train_count);
  split.dev.assign(it, it + static_cast<std::ptrdiff_t>(config.dev_count));
  it += static_cast<std::ptrdiff_t>(config.dev_count);
  split.test.assign(it, all.end());
  return split;
}

}  // namespace spanscl
