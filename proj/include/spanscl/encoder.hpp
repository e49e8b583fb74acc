#pragma once

#include <cctype>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "spanscl/autodiff.hpp"
#include "spanscl/corpus.hpp"
#include "spanscl/kv_config.hpp"
#include "spanscl/rng.hpp"

namespace spanscl {

enum class EncoderMode { kTinyFromScratch, kPretrained };

inline std::string to_string(EncoderMode m) {
  return m == EncoderMode::kTinyFromScratch ? "tiny-from-scratch" : "pretrained-transformer";
}

inline EncoderMode encoder_mode_from(const std::string& s) {
  if (s == "tiny-from-scratch" || s == "tiny") return EncoderMode::kTinyFromScratch;
  if (s == "pretrained-transformer" || s == "pretrained") return EncoderMode::kPretrained;
  throw ConfigError("unknown encoder mode: " + s);
}

struct EncoderConfig {
  EncoderMode mode = EncoderMode::kTinyFromScratch;
  std::size_t hidden_size = 32;
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t ffn_size = 64;
  /// Subword positions available to a sentence, excluding the [CLS] slot.
  std::size_t max_length = 64;
  std::size_t buckets = 2048;
  std::size_t max_piece_length = 5;
  double init_std = 0.02;
  std::uint64_t seed = 1;
  /// Overlong sentences are cut (with a warning) instead of rejected.
  bool truncate = true;
  /// Checkpoint whose encoder weights seed a pretrained-transformer run.
  std::string pretrained_path;

  void validate() const {
    if (hidden_size < 8) throw ConfigError("encoder hidden size must be >= 8");
    if (heads == 0 || hidden_size % heads != 0) throw ConfigError("encoder heads must divide the hidden size");
    if (layers == 0) throw ConfigError("encoder needs at least one layer");
    if (ffn_size == 0 || max_length == 0) throw ConfigError("encoder ffn size and max length must be positive");
    if (buckets < 3) throw ConfigError("encoder needs at least 3 vocabulary buckets");
    if (max_piece_length == 0) throw ConfigError("encoder max piece length must be positive");
    if (mode == EncoderMode::kPretrained && pretrained_path.empty()) {
      throw ConfigError("pretrained-transformer mode needs encoder.pretrained_path");
    }
  }

  static EncoderConfig from(const KeyValueConfig& kv, const std::string& prefix = "encoder.") {
    EncoderConfig c;
    c.mode = encoder_mode_from(kv.get_string(prefix + "mode", to_string(c.mode)));
    auto size = [&](const char* key, std::size_t fallback) {
      const auto v = kv.get_int(prefix + key, static_cast<long long>(fallback));
      if (v < 0) throw ConfigError(prefix + key + " must be non-negative");
      return static_cast<std::size_t>(v);
    };
    c.hidden_size = size("hidden_size", c.hidden_size);
    c.layers = size("layers", c.layers);
    c.heads = size("heads", c.heads);
    c.ffn_size = size("ffn_size", c.ffn_size);
    c.max_length = size("max_length", c.max_length);
    c.buckets = size("buckets", c.buckets);
    c.max_piece_length = size("max_piece_length", c.max_piece_length);
    c.init_std = kv.get_double(prefix + "init_std", c.init_std);
    c.truncate = kv.get_bool(prefix + "truncate", c.truncate);
    c.pretrained_path = kv.get_string(prefix + "pretrained_path", c.pretrained_path);
    return c;
  }

  void store(KeyValueConfig& kv, const std::string& prefix = "encoder.") const {
    kv.set(prefix + "mode", to_string(mode));
    kv.set(prefix + "hidden_size", std::to_string(hidden_size));
    kv.set(prefix + "layers", std::to_string(layers));
    kv.set(prefix + "heads", std::to_string(heads));
    kv.set(prefix + "ffn_size", std::to_string(ffn_size));
    kv.set(prefix + "max_length", std::to_string(max_length));
    kv.set(prefix + "buckets", std::to_string(buckets));
    kv.set(prefix + "max_piece_length", std::to_string(max_piece_length));
    kv.set(prefix + "init_std", format_fixed(init_std, 6));
    kv.set(prefix + "truncate", truncate ? "true" : "false");
    if (!pretrained_path.empty()) kv.set(prefix + "pretrained_path", pretrained_path);
  }
};

// --- subword tokenizer ------------------------------------------------------

/// Vocabulary-free subword tokenizer: a lowercased word is cut into pieces of
/// at most max_piece_length characters (continuations are prefixed "##") and
/// each piece is hashed into a fixed number of buckets. Id 0 is [CLS].
class SubwordTokenizer {
 public:
  static constexpr std::size_t kClsId = 0;

  SubwordTokenizer(std::size_t buckets, std::size_t max_piece_length)
      : buckets_(buckets), max_piece_length_(max_piece_length) {}

  std::vector<std::size_t> pieces(std::string_view word) const {
    std::string lower(word);
    for (auto& ch : lower) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    std::vector<std::size_t> ids;
    for (std::size_t at = 0; at < lower.size() || ids.empty(); at += max_piece_length_) {
      std::string piece = at == 0 ? std::string() : std::string("##");
      piece += lower.substr(at, max_piece_length_);
      ids.push_back(1 + fnv1a(piece) % (buckets_ - 1));
      if (lower.empty()) break;
    }
    return ids;
  }

  std::vector<std::size_t> subword_lengths(const LabeledSentence& s) const {
    std::vector<std::size_t> out;
    out.reserve(s.size());
    for (const auto& w : s.tokens) out.push_back(pieces(w).size());
    return out;
  }

  /// Piece ids of a whole sentence (without [CLS]).
  std::vector<std::size_t> encode(const LabeledSentence& s) const {
    std::vector<std::size_t> ids;
    for (const auto& w : s.tokens) {
      const auto p = pieces(w);
      ids.insert(ids.end(), p.begin(), p.end());
    }
    return ids;
  }

  SubwordAlignment align(const LabeledSentence& s) const { return align_to_subwords(s, subword_lengths(s)); }

 private:
  static std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
    return h;
  }

  std::size_t buckets_;
  std::size_t max_piece_length_;
};

// --- encoder ------------------------------------------------------------------

/// Contextual representations of one sentence: the [CLS] vector and one row
/// per word taken at the word's first subword.
struct EncodedSentence {
  RowVector cls;
  Matrix words;
};

/// Tape handles for an encoding that is part of a differentiable graph.
struct EncodedVars {
  autodiff::Var cls;
  autodiff::Var words;
};

class SequenceTooLong : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Post-LN transformer encoder with learned positions, in the BERT layout.
/// Parameters live in a fixed-size vector so their addresses stay stable.
class TransformerEncoder {
 public:
  explicit TransformerEncoder(EncoderConfig config) : config_(std::move(config)) {
    config_.validate();
    const auto d = static_cast<Eigen::Index>(config_.hidden_size);
    const auto ff = static_cast<Eigen::Index>(config_.ffn_size);
    Rng rng(derive_seed(config_.seed, 0x656e63));
    auto normal = [&](Eigen::Index r, Eigen::Index c) {
      Matrix m(r, c);
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal() * config_.init_std;
      return m;
    };
    auto add = [&](std::string name, Matrix m) {
      params_.emplace_back(std::move(name), std::move(m));
      return params_.size() - 1;
    };
    params_.reserve(4 + 16 * config_.layers);
    token_embedding_ = add("encoder.token_embedding", normal(static_cast<Eigen::Index>(config_.buckets), d));
    position_embedding_ = add("encoder.position_embedding", normal(static_cast<Eigen::Index>(config_.max_length) + 1, d));
    embed_ln_gain_ = add("encoder.embed_ln.gain", Matrix::Ones(1, d));
    embed_ln_bias_ = add("encoder.embed_ln.bias", Matrix::Zero(1, d));
    for (std::size_t l = 0; l < config_.layers; ++l) {
      const std::string p = "encoder.layer" + std::to_string(l) + ".";
      Layer layer;
      layer.query = add(p + "query.weight", normal(d, d));
      layer.query_bias = add(p + "query.bias", Matrix::Zero(1, d));
      layer.key = add(p + "key.weight", normal(d, d));
      layer.key_bias = add(p + "key.bias", Matrix::Zero(1, d));
      layer.value = add(p + "value.weight", normal(d, d));
      layer.value_bias = add(p + "value.bias", Matrix::Zero(1, d));
      layer.output = add(p + "attn_out.weight", normal(d, d));
      layer.output_bias = add(p + "attn_out.bias", Matrix::Zero(1, d));
      layer.ln1_gain = add(p + "ln1.gain", Matrix::Ones(1, d));
      layer.ln1_bias = add(p + "ln1.bias", Matrix::Zero(1, d));
      layer.ffn_in = add(p + "ffn_in.weight", normal(d, ff));
      layer.ffn_in_bias = add(p + "ffn_in.bias", Matrix::Zero(1, ff));
      layer.ffn_out = add(p + "ffn_out.weight", normal(ff, d));
      layer.ffn_out_bias = add(p + "ffn_out.bias", Matrix::Zero(1, d));
      layer.ln2_gain = add(p + "ln2.gain", Matrix::Ones(1, d));
      layer.ln2_bias = add(p + "ln2.bias", Matrix::Zero(1, d));
      layers_.push_back(layer);
    }
  }

  TransformerEncoder(const TransformerEncoder&) = delete;
  TransformerEncoder& operator=(const TransformerEncoder&) = delete;
  TransformerEncoder(TransformerEncoder&&) = default;
  TransformerEncoder& operator=(TransformerEncoder&&) = default;

  const EncoderConfig& config() const { return config_; }
  std::size_t hidden_size() const { return config_.hidden_size; }
  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }

  /// Hidden states for [CLS] followed by the given subword ids.
  autodiff::Var forward(autodiff::Tape& tape, const std::vector<std::size_t>& subword_ids) {
    using namespace autodiff;
    if (subword_ids.size() > config_.max_length) {
      throw SequenceTooLong("sequence of " + std::to_string(subword_ids.size()) + " subwords exceeds max length " +
                            std::to_string(config_.max_length));
    }
    std::vector<std::size_t> ids;
    ids.reserve(subword_ids.size() + 1);
    ids.push_back(SubwordTokenizer::kClsId);
    ids.insert(ids.end(), subword_ids.begin(), subword_ids.end());
    std::vector<std::size_t> positions(ids.size());
    for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = i;

    Var x = add(embedding_lookup(tape, params_[token_embedding_], ids),
                embedding_lookup(tape, params_[position_embedding_], positions));
    x = layer_norm(x, p(tape, embed_ln_gain_), p(tape, embed_ln_bias_));

    const auto heads = static_cast<Eigen::Index>(config_.heads);
    const auto head_dim = static_cast<Eigen::Index>(config_.hidden_size) / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
    for (const auto& layer : layers_) {
      Var q = add_row(matmul(x, p(tape, layer.query)), p(tape, layer.query_bias));
      Var k = add_row(matmul(x, p(tape, layer.key)), p(tape, layer.key_bias));
      Var v = add_row(matmul(x, p(tape, layer.value)), p(tape, layer.value_bias));
      std::vector<Var> head_out;
      head_out.reserve(static_cast<std::size_t>(heads));
      for (Eigen::Index h = 0; h < heads; ++h) {
        Var qh = slice_cols(q, h * head_dim, head_dim);
        Var kh = slice_cols(k, h * head_dim, head_dim);
        Var vh = slice_cols(v, h * head_dim, head_dim);
        Var attn = softmax_rows(scale(matmul_transposed(qh, kh), inv_sqrt));
        head_out.push_back(matmul(attn, vh));
      }
      Var attended = heads == 1 ? head_out.front() : concat_cols(head_out);
      Var projected = add_row(matmul(attended, p(tape, layer.output)), p(tape, layer.output_bias));
      x = layer_norm(add(x, projected), p(tape, layer.ln1_gain), p(tape, layer.ln1_bias));
      Var hidden = gelu(add_row(matmul(x, p(tape, layer.ffn_in)), p(tape, layer.ffn_in_bias)));
      Var ffn = add_row(matmul(hidden, p(tape, layer.ffn_out)), p(tape, layer.ffn_out_bias));
      x = layer_norm(add(x, ffn), p(tape, layer.ln2_gain), p(tape, layer.ln2_bias));
    }
    return x;
  }

  /// Word vectors gathered at first-subword positions.
  EncodedVars encode_on_tape(autodiff::Tape& tape, const std::vector<std::size_t>& subword_ids,
                             const SubwordAlignment& alignment) {
    if (alignment.subword_count() != subword_ids.size()) {
      throw std::invalid_argument("encode: alignment does not match the subword sequence");
    }
    autodiff::Var hidden = forward(tape, subword_ids);
    std::vector<std::size_t> rows;
    rows.reserve(alignment.first_positions.size());
    for (auto pos : alignment.first_positions) rows.push_back(pos + 1);
    return {autodiff::top_rows(hidden, 1), autodiff::gather_rows(hidden, rows)};
  }

  /// Inference-mode encoding; deterministic for fixed parameters.
  EncodedSentence encode(const std::vector<std::size_t>& subword_ids, const SubwordAlignment& alignment) {
    autodiff::Tape tape(false);
    const auto vars = encode_on_tape(tape, subword_ids, alignment);
    return {vars.cls.value().row(0), vars.words.value()};
  }

 private:
  struct Layer {
    std::size_t query, query_bias, key, key_bias, value, value_bias, output, output_bias;
    std::size_t ln1_gain, ln1_bias, ffn_in, ffn_in_bias, ffn_out, ffn_out_bias, ln2_gain, ln2_bias;
  };

  autodiff::Var p(autodiff::Tape& tape, std::size_t index) { return tape.parameter(params_[index]); }

  EncoderConfig config_;
  std::vector<Parameter> params_;
  std::vector<Layer> layers_;
  std::size_t token_embedding_ = 0;
  std::size_t position_embedding_ = 0;
  std::size_t embed_ln_gain_ = 0;
  std::size_t embed_ln_bias_ = 0;
};

// --- tag set and classifier head ------------------------------------------------

/// Ordered label inventory: O first, then B-/I- for each class in sorted order.
class TagSet {
 public:
  TagSet() = default;
  explicit TagSet(std::vector<std::string> tags) : tags_(std::move(tags)) {
    if (tags_.size() < 2) throw std::invalid_argument("tag set needs at least 2 labels");
    for (const auto& t : tags_) parse_tag(t);
  }

  static TagSet for_classes(const std::vector<std::string>& classes) {
    std::vector<std::string> tags{std::string(kOutsideTag)};
    for (const auto& c : classes) {
      tags.push_back("B-" + c);
      tags.push_back("I-" + c);
    }
    if (tags.size() < 2) throw std::invalid_argument("tag set needs at least one span class");
    return TagSet(std::move(tags));
  }

  std::size_t size() const { return tags_.size(); }
  const std::string& at(std::size_t i) const { return tags_.at(i); }
  const std::vector<std::string>& tags() const { return tags_; }

  std::size_t index_of(const std::string& tag) const {
    for (std::size_t i = 0; i < tags_.size(); ++i) {
      if (tags_[i] == tag) return i;
    }
    throw ValidationError("tag '" + tag + "' is not in the model's tag set");
  }

  bool covers_class(const std::string& cls) const {
    bool b = false, i = false;
    for (const auto& t : tags_) {
      b = b || t == "B-" + cls;
      i = i || t == "I-" + cls;
    }
    return b && i;
  }

 private:
  std::vector<std::string> tags_;
};

/// Token classifier: logits = W h + b with W of shape (labels x d).
struct ClassifierHead {
  Parameter weight;
  Parameter bias;

  ClassifierHead() = default;
  ClassifierHead(std::size_t labels, std::size_t hidden, Rng& rng, double init_std) {
    if (labels < 2) throw std::invalid_argument("classifier head needs at least 2 labels");
    Matrix w(static_cast<Eigen::Index>(labels), static_cast<Eigen::Index>(hidden));
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = rng.normal() * init_std;
    weight = Parameter("head.weight", std::move(w));
    bias = Parameter("head.bias", Matrix::Zero(1, static_cast<Eigen::Index>(labels)));
  }
  ClassifierHead(Matrix w, Matrix b) : weight("head.weight", std::move(w)), bias("head.bias", std::move(b)) {}

  std::size_t labels() const { return static_cast<std::size_t>(weight.value.rows()); }
  std::size_t hidden() const { return static_cast<std::size_t>(weight.value.cols()); }

  autodiff::Var logits(autodiff::Tape& tape, autodiff::Var words) {
    if (static_cast<std::size_t>(words.cols()) != hidden()) {
      throw std::invalid_argument("classifier head expects dimension " + std::to_string(hidden()) + ", got " +
                                  std::to_string(words.cols()));
    }
    return autodiff::add_row(autodiff::matmul_transposed(words, tape.parameter(weight)), tape.parameter(bias));
  }
};

/// Per-word label distributions and their argmax (lowest index wins ties).
struct TokenPredictions {
  Matrix probabilities;
  std::vector<std::size_t> argmax;
};

inline std::size_t argmax_first(const Eigen::Ref<const RowVector>& row) {
  std::size_t best = 0;
  for (Eigen::Index j = 1; j < row.size(); ++j) {
    if (row(j) > row(static_cast<Eigen::Index>(best))) best = static_cast<std::size_t>(j);
  }
  return best;
}

inline TokenPredictions predictions_from_logits(const Matrix& logits) {
  TokenPredictions p;
  p.probabilities = autodiff::softmax_rows_value(logits);
  for (Eigen::Index r = 0; r < logits.rows(); ++r) p.argmax.push_back(argmax_first(p.probabilities.row(r)));
  return p;
}

inline TokenPredictions classify_tokens(const EncodedSentence& enc, const ClassifierHead& head) {
  if (static_cast<std::size_t>(enc.words.cols()) != head.hidden()) {
    throw std::invalid_argument("classify_tokens: head expects dimension " + std::to_string(head.hidden()) +
                                ", encoding has " + std::to_string(enc.words.cols()));
  }
  Matrix logits = enc.words * head.weight.value.transpose();
  logits.rowwise() += head.bias.value.row(0);
  return predictions_from_logits(logits);
}

/// Argmax tags followed by IOB2 repair.
inline std::vector<std::string> decode_labels(const TokenPredictions& preds, const TagSet& tags) {
  std::vector<std::string> out;
  out.reserve(preds.argmax.size());
  for (auto i : preds.argmax) out.push_back(tags.at(i));
  return repair_labels(out);
}

}  // namespace spanscl
