#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "spanscl/corpus.hpp"
#include "spanscl/encoder.hpp"
#include "spanscl/io.hpp"
#include "spanscl/kv_config.hpp"
#include "spanscl/spans.hpp"

namespace spanscl {

/// A sentence ready for the encoder. `sentence` is shorter than
/// `original_words` when it was truncated to the encoder's maximum length.
struct PreparedSentence {
  LabeledSentence sentence;
  std::vector<std::size_t> subword_ids;
  SubwordAlignment alignment;
  std::size_t original_words = 0;
};

/// Encoder + token classifier + the metadata needed to reuse them: tag set,
/// tokenizer settings, mining lexicon and the training configuration.
class SpanTagger {
 public:
  SpanTagger(EncoderConfig config, TagSet tags, std::uint64_t seed)
      : config_(std::move(config)),
        tags_(std::move(tags)),
        tokenizer_(config_.buckets, config_.max_piece_length),
        encoder_(with_seed(config_, seed)),
        seed_(seed) {
    Rng rng(derive_seed(seed, 0x68656164));
    head_ = ClassifierHead(tags_.size(), config_.hidden_size, rng, config_.init_std);
  }

  const EncoderConfig& config() const { return config_; }
  const TagSet& tags() const { return tags_; }
  const SubwordTokenizer& tokenizer() const { return tokenizer_; }
  TransformerEncoder& encoder() { return encoder_; }
  ClassifierHead& head() { return head_; }
  const ClassifierHead& head() const { return head_; }
  PhraseLexicon& lexicon() { return lexicon_; }
  const PhraseLexicon& lexicon() const { return lexicon_; }
  std::uint64_t seed() const { return seed_; }
  KeyValueConfig& training_config() { return training_config_; }
  const KeyValueConfig& training_config() const { return training_config_; }

  /// Encoder parameters followed by the head, in a fixed order.
  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out;
    for (auto& p : encoder_.parameters()) out.push_back(&p);
    out.push_back(&head_.weight);
    out.push_back(&head_.bias);
    return out;
  }

  std::vector<const Parameter*> parameters() const {
    std::vector<const Parameter*> out;
    for (const auto& p : encoder_.parameters()) out.push_back(&p);
    out.push_back(&head_.weight);
    out.push_back(&head_.bias);
    return out;
  }

  /// Subword-encodes a sentence, truncating (with a warning) or rejecting it
  /// when it exceeds the encoder's maximum length.
  PreparedSentence prepare(const LabeledSentence& sentence) const {
    PreparedSentence p;
    p.original_words = sentence.size();
    p.sentence = sentence;
    auto lengths = tokenizer_.subword_lengths(sentence);
    std::size_t total = 0, kept = 0;
    for (; kept < lengths.size() && total + lengths[kept] <= config_.max_length; ++kept) total += lengths[kept];
    if (kept < lengths.size()) {
      if (!config_.truncate || kept == 0) {
        throw SequenceTooLong("sentence '" + sentence.id + "' needs more than " + std::to_string(config_.max_length) +
                              " subwords");
      }
      log(LogLevel::kWarning, "sentence '" + sentence.id + "' truncated to " + std::to_string(kept) + " of " +
                                  std::to_string(lengths.size()) + " words");
      p.sentence.tokens.resize(kept);
      p.sentence.labels = repair_labels({sentence.labels.begin(), sentence.labels.begin() + static_cast<std::ptrdiff_t>(kept)});
      lengths.resize(kept);
    }
    p.subword_ids = tokenizer_.encode(p.sentence);
    p.alignment = align_to_subwords(p.sentence, lengths);
    return p;
  }

  EncodedSentence encode(const PreparedSentence& p) { return encoder_.encode(p.subword_ids, p.alignment); }

  /// Predicted IOB2 tags for every word; truncated words are tagged O.
  std::vector<std::string> predict(const LabeledSentence& sentence) {
    const auto p = prepare(sentence);
    auto tags = decode_labels(classify_tokens(encode(p), head_), tags_);
    tags.resize(p.original_words, std::string(kOutsideTag));
    return tags;
  }

  void copy_parameters_from(const SpanTagger& other) {
    auto dst = parameters();
    const auto src = other.parameters();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i]->value = src[i]->value;
  }

 private:
  static EncoderConfig with_seed(EncoderConfig c, std::uint64_t seed) {
    c.seed = seed;
    return c;
  }

  EncoderConfig config_;
  TagSet tags_;
  SubwordTokenizer tokenizer_;
  TransformerEncoder encoder_;
  ClassifierHead head_;
  PhraseLexicon lexicon_;
  std::uint64_t seed_;
  KeyValueConfig training_config_;
};

// --- checkpoint container --------------------------------------------------------
//
// Layout: 8-byte magic "SPANSCL1", uint32 format version, uint64 header size,
// a JSON header (configuration, tag set, seed, lexicon, parameter shapes),
// then every parameter as row-major little-endian float64 in header order.

inline constexpr char kCheckpointMagic[8] = {'S', 'P', 'A', 'N', 'S', 'C', 'L', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string serialize_checkpoint(const SpanTagger& model) {
  nlohmann::json header;
  header["format_version"] = kCheckpointVersion;
  KeyValueConfig enc;
  model.config().store(enc);
  header["encoder"] = enc.entries();
  header["tags"] = model.tags().tags();
  header["seed"] = model.seed();
  nlohmann::json lexicon = nlohmann::json::array();
  for (const auto& phrase : model.lexicon().phrases()) lexicon.push_back(phrase);
  header["lexicon"] = lexicon;
  header["training_config"] = model.training_config().entries();
  nlohmann::json params = nlohmann::json::array();
  for (const auto* p : model.parameters()) params.push_back({{"name", p->name}, {"rows", p->value.rows()}, {"cols", p->value.cols()}});
  header["parameters"] = params;
  const std::string header_text = header.dump();

  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  auto put = [&out](const void* data, std::size_t n) { out.append(static_cast<const char*>(data), n); };
  const std::uint32_t version = kCheckpointVersion;
  const std::uint64_t header_size = header_text.size();
  put(&version, sizeof version);
  put(&header_size, sizeof header_size);
  out += header_text;
  for (const auto* p : model.parameters()) put(p->value.data(), sizeof(double) * static_cast<std::size_t>(p->value.size()));
  return out;
}

inline void save_checkpoint(const std::filesystem::path& path, const SpanTagger& model) {
  write_file_atomic(path, serialize_checkpoint(model));
}

inline SpanTagger deserialize_checkpoint(const std::string& bytes) {
  std::size_t at = 0;
  auto take = [&](void* dst, std::size_t n) {
    if (at + n > bytes.size()) throw CheckpointError("checkpoint is truncated");
    std::memcpy(dst, bytes.data() + at, n);
    at += n;
  };
  char magic[8];
  take(magic, sizeof magic);
  if (std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) throw CheckpointError("not a span tagger checkpoint");
  std::uint32_t version = 0;
  take(&version, sizeof version);
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  std::uint64_t header_size = 0;
  take(&header_size, sizeof header_size);
  if (at + header_size > bytes.size()) throw CheckpointError("checkpoint header is truncated");
  const auto header = nlohmann::json::parse(bytes.substr(at, header_size));
  at += header_size;

  KeyValueConfig enc;
  for (const auto& [k, v] : header.at("encoder").items()) enc.set(k, v.get<std::string>());
  // Weights come from this file; a pretrained source path is recorded only.
  const auto config = EncoderConfig::from(enc);
  SpanTagger model(config, TagSet(header.at("tags").get<std::vector<std::string>>()), header.at("seed").get<std::uint64_t>());
  for (const auto& phrase : header.at("lexicon")) model.lexicon().add(phrase.get<std::vector<std::string>>());
  for (const auto& [k, v] : header.at("training_config").items()) model.training_config().set(k, v.get<std::string>());

  auto params = model.parameters();
  const auto& shapes = header.at("parameters");
  if (shapes.size() != params.size()) throw CheckpointError("checkpoint parameter count does not match its configuration");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& s = shapes[i];
    if (s.at("name").get<std::string>() != params[i]->name || s.at("rows").get<Eigen::Index>() != params[i]->value.rows() ||
        s.at("cols").get<Eigen::Index>() != params[i]->value.cols()) {
      throw CheckpointError("checkpoint parameter " + s.at("name").get<std::string>() + " does not match the model layout");
    }
    take(params[i]->value.data(), sizeof(double) * static_cast<std::size_t>(params[i]->value.size()));
  }
  if (at != bytes.size()) throw CheckpointError("trailing bytes after checkpoint parameters");
  return model;
}

inline SpanTagger load_checkpoint(const std::filesystem::path& path) { return deserialize_checkpoint(read_file(path)); }

/// Builds a model for training. In pretrained-transformer mode the encoder
/// weights are copied from an existing checkpoint; the head starts fresh.
inline SpanTagger create_tagger(const EncoderConfig& config, const TagSet& tags, std::uint64_t seed) {
  config.validate();
  SpanTagger model(config, tags, seed);
  if (config.mode == EncoderMode::kPretrained) {
    auto source = load_checkpoint(config.pretrained_path);
    auto& dst = model.encoder().parameters();
    auto& src = source.encoder().parameters();
    if (dst.size() != src.size()) throw CheckpointError("pretrained encoder has a different layer layout");
    for (std::size_t i = 0; i < dst.size(); ++i) {
      if (dst[i].value.rows() != src[i].value.rows() || dst[i].value.cols() != src[i].value.cols()) {
        throw CheckpointError("pretrained encoder parameter " + src[i].name + " has a different shape");
      }
      dst[i].value = src[i].value;
    }
  }
  return model;
}

}  // namespace spanscl
