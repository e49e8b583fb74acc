#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <functional>

#include "spanscl/encoder.hpp"
#include "spanscl/model.hpp"
#include "spanscl/objective.hpp"

using namespace spanscl;

namespace {

EncoderConfig tiny(std::size_t max_length = 64) {
  EncoderConfig c;
  c.hidden_size = 16;
  c.layers = 2;
  c.heads = 2;
  c.ffn_size = 24;
  c.max_length = max_length;
  c.buckets = 257;
  c.init_std = 0.3;
  return c;
}

LabeledSentence words(std::vector<std::string> tokens) {
  std::vector<std::string> labels(tokens.size(), "O");
  return {"t", std::move(tokens), std::move(labels)};
}

Matrix random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

double relative_error(double a, double b) { return std::abs(a - b) / std::max({1e-8, std::abs(a), std::abs(b)}); }

}  // namespace

TEST(Tokenizer, PiecesAreDeterministicAndInRange) {
  SubwordTokenizer tok(100, 3);
  const auto a = tok.pieces("Lighthouse");
  EXPECT_EQ(a.size(), 4u);
  EXPECT_EQ(a, tok.pieces("lighthouse"));
  for (auto id : a) {
    EXPECT_GE(id, 1u);
    EXPECT_LT(id, 100u);
  }
  EXPECT_EQ(tok.pieces("a").size(), 1u);
  EXPECT_EQ(tok.pieces("").size(), 1u);
}

TEST(Encoder, RowCountEqualsWordCountAndFinite) {
  SpanTagger model(tiny(), TagSet::for_classes({"idiom"}), 5);
  for (const auto& s : {words({"he", "finally", "saw", "the", "light"}), words({"x"}),
                        words({"antidisestablishmentarianism", "is", "long"})}) {
    const auto enc = model.encode(model.prepare(s));
    EXPECT_EQ(enc.words.rows(), static_cast<Eigen::Index>(s.size()));
    EXPECT_EQ(enc.words.cols(), 16);
    EXPECT_EQ(enc.cls.size(), 16);
    EXPECT_TRUE(enc.words.allFinite());
  }
}

TEST(Encoder, InferenceIsDeterministic) {
  SpanTagger model(tiny(), TagSet::for_classes({"idiom"}), 5);
  const auto s = words({"spill", "the", "beans"});
  const auto a = model.encode(model.prepare(s));
  const auto b = model.encode(model.prepare(s));
  EXPECT_EQ(a.words, b.words);
  EXPECT_EQ(a.cls, b.cls);
}

TEST(Encoder, WordOrderChangesRepresentations) {
  SpanTagger model(tiny(), TagSet::for_classes({"idiom"}), 9);
  Rng rng(1);
  const std::vector<std::string> vocab{"the", "boat", "moon", "over", "cake", "ice", "water", "hot"};
  int changed = 0, compared = 0;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::string> t(5);
    for (auto& w : t) w = vocab[rng.below(vocab.size())];
    auto shuffled = t;
    std::swap(shuffled[0], shuffled[4]);
    if (shuffled == t) continue;
    ++compared;
    const auto a = model.encode(model.prepare(words(t)));
    const auto b = model.encode(model.prepare(words(shuffled)));
    // Compare the vector of the same word at its new position.
    changed += (a.words.row(0) - b.words.row(4)).norm() > 1e-9 ? 1 : 0;
  }
  EXPECT_GT(compared, 10);
  EXPECT_EQ(changed, compared);
}

TEST(Encoder, OverlongSentenceTruncatesOrThrows) {
  log_quiet() = true;
  auto cfg = tiny(4);
  SpanTagger model(cfg, TagSet::for_classes({"idiom"}), 1);
  LabeledSentence s{"long", {"a", "b", "c", "d", "e", "f"}, {"O", "O", "O", "B-idiom", "I-idiom", "O"}};
  const auto p = model.prepare(s);
  EXPECT_EQ(p.sentence.size(), 4u);
  EXPECT_EQ(p.sentence.labels.back(), "B-idiom");
  EXPECT_EQ(model.predict(s).size(), 6u);

  cfg.truncate = false;
  SpanTagger strict(cfg, TagSet::for_classes({"idiom"}), 1);
  EXPECT_THROW(strict.prepare(s), SequenceTooLong);
  autodiff::Tape tape(false);
  EXPECT_THROW(strict.encoder().forward(tape, std::vector<std::size_t>(5, 1)), SequenceTooLong);
}

TEST(EncoderConfig, Validation) {
  auto c = tiny();
  c.hidden_size = 4;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny();
  c.heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny();
  c.mode = EncoderMode::kPretrained;
  EXPECT_THROW(c.validate(), ConfigError);
  KeyValueConfig kv;
  tiny().store(kv);
  const auto back = EncoderConfig::from(kv);
  EXPECT_EQ(back.hidden_size, 16u);
  EXPECT_EQ(back.buckets, 257u);
}

TEST(ClassifyTokens, ZeroWeightsGiveUniformRows) {
  EncodedSentence enc{RowVector::Zero(4), Matrix::Random(3, 4)};
  ClassifierHead head(Matrix::Zero(3, 4), Matrix::Zero(1, 3));
  const auto p = classify_tokens(enc, head);
  for (Eigen::Index r = 0; r < 3; ++r) {
    for (Eigen::Index c = 0; c < 3; ++c) EXPECT_NEAR(p.probabilities(r, c), 1.0 / 3.0, 1e-15);
    EXPECT_EQ(p.argmax[static_cast<std::size_t>(r)], 0u);
  }
}

TEST(ClassifyTokens, BiasDominance) {
  EncodedSentence enc{RowVector::Zero(4), Matrix::Random(5, 4)};
  Matrix b(1, 3);
  b << 10, 0, 0;
  ClassifierHead head(Matrix::Zero(3, 4), b);
  for (auto a : classify_tokens(enc, head).argmax) EXPECT_EQ(a, 0u);
}

TEST(ClassifyTokens, MatchesDirectSoftmaxOracle) {
  Rng rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    const Eigen::Index n = 1 + static_cast<Eigen::Index>(rng.below(6)), d = 3, k = 3;
    EncodedSentence enc{RowVector::Zero(d), random_matrix(rng, n, d)};
    ClassifierHead head(random_matrix(rng, k, d), random_matrix(rng, 1, k));
    const auto p = classify_tokens(enc, head);
    for (Eigen::Index i = 0; i < n; ++i) {
      double z[3], sum = 0.0;
      for (Eigen::Index c = 0; c < k; ++c) {
        double logit = head.bias.value(0, c);
        for (Eigen::Index j = 0; j < d; ++j) logit += head.weight.value(c, j) * enc.words(i, j);
        z[c] = std::exp(logit);
        sum += z[c];
      }
      double row_sum = 0.0;
      for (Eigen::Index c = 0; c < k; ++c) {
        EXPECT_NEAR(p.probabilities(i, c), z[c] / sum, 1e-9);
        row_sum += p.probabilities(i, c);
      }
      EXPECT_NEAR(row_sum, 1.0, 1e-12);
    }
  }
}

TEST(ClassifyTokens, DimensionMismatchThrows) {
  EncodedSentence enc{RowVector::Zero(4), Matrix::Zero(2, 4)};
  ClassifierHead head(Matrix::Zero(3, 5), Matrix::Zero(1, 3));
  EXPECT_THROW(classify_tokens(enc, head), std::invalid_argument);
}

TEST(SoftmaxRows, SumToOneOnLargeRandomLogits) {
  Rng rng(2);
  const Matrix logits = random_matrix(rng, 200, 7, 50.0);
  const Matrix p = autodiff::softmax_rows_value(logits);
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    EXPECT_NEAR(p.row(r).sum(), 1.0, 1e-6);
    EXPECT_GE(p.row(r).minCoeff(), 0.0);
  }
}

TEST(DecodeLabels, TieRuleOneHotAndRepair) {
  const TagSet tags({"O", "B-idiom", "I-idiom"});
  TokenPredictions uniform = predictions_from_logits(Matrix::Zero(4, 3));
  EXPECT_EQ(decode_labels(uniform, tags), (std::vector<std::string>(4, "O")));

  Matrix onehot = Matrix::Zero(3, 3);
  onehot(0, 1) = onehot(1, 2) = onehot(2, 0) = 5.0;
  EXPECT_EQ(decode_labels(predictions_from_logits(onehot), tags), (std::vector<std::string>{"B-idiom", "I-idiom", "O"}));

  Matrix stray = Matrix::Zero(2, 3);
  stray(0, 0) = stray(1, 2) = 5.0;
  EXPECT_EQ(decode_labels(predictions_from_logits(stray), tags), (std::vector<std::string>{"O", "B-idiom"}));
}

TEST(TagSet, ForClassesAndLookup) {
  const auto t = TagSet::for_classes({"idiom", "metaphor"});
  EXPECT_EQ(t.tags(), (std::vector<std::string>{"O", "B-idiom", "I-idiom", "B-metaphor", "I-metaphor"}));
  EXPECT_EQ(t.index_of("I-metaphor"), 4u);
  EXPECT_THROW(t.index_of("B-other"), ValidationError);
  EXPECT_TRUE(t.covers_class("idiom"));
  EXPECT_FALSE(t.covers_class("other"));
}

// Central differences against the tape's reverse pass for a scalar function of
// one parameter.
double max_fd_error(Parameter& p, const std::function<autodiff::Var(autodiff::Tape&)>& loss_fn, std::size_t probes,
                    Rng& rng) {
  p.zero_grad();
  {
    autodiff::Tape tape;
    auto loss = loss_fn(tape);
    tape.backward(loss);
  }
  const Matrix analytic = p.grad;
  double worst = 0.0;
  const double eps = 1e-5;
  for (std::size_t k = 0; k < probes; ++k) {
    const auto i = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(p.value.size())));
    const double orig = p.value.data()[i];
    auto eval = [&] {
      autodiff::Tape tape(false);
      return loss_fn(tape).value()(0, 0);
    };
    p.value.data()[i] = orig + eps;
    const double up = eval();
    p.value.data()[i] = orig - eps;
    const double down = eval();
    p.value.data()[i] = orig;
    const double numeric = (up - down) / (2 * eps);
    if (std::abs(numeric) < 1e-7 && std::abs(analytic.data()[i]) < 1e-7) continue;
    worst = std::max(worst, relative_error(numeric, analytic.data()[i]));
  }
  p.zero_grad();
  return worst;
}

TEST(Gradients, SlotLossThroughWholeTaggerMatchesFiniteDifferences) {
  auto cfg = tiny();
  cfg.init_std = 0.5;
  SpanTagger model(cfg, TagSet::for_classes({"idiom"}), 17);
  const LabeledSentence s{"g", {"she", "was", "over", "the", "moon"}, {"O", "O", "B-idiom", "I-idiom", "I-idiom"}};
  const auto p = model.prepare(s);
  std::vector<std::size_t> gold;
  for (const auto& l : s.labels) gold.push_back(model.tags().index_of(l));
  auto loss_fn = [&](autodiff::Tape& tape) {
    const auto enc = model.encoder().encode_on_tape(tape, p.subword_ids, p.alignment);
    return slot_loss_on_tape(model.head().logits(tape, enc.words), gold, std::vector<bool>(gold.size(), true));
  };
  Rng rng(4);
  for (auto* param : model.parameters()) {
    EXPECT_LT(max_fd_error(*param, loss_fn, 6, rng), 1e-4) << param->name;
  }
}

TEST(Checkpoint, RoundTripPreservesPredictionsAndMetadata) {
  SpanTagger model(tiny(), TagSet::for_classes({"idiom"}), 3);
  model.lexicon().add({"Saw", "the", "light"});
  model.training_config().set("lambda_span", "0.3");
  const auto bytes = serialize_checkpoint(model);
  auto back = deserialize_checkpoint(bytes);
  EXPECT_EQ(serialize_checkpoint(back), bytes);
  EXPECT_TRUE(back.lexicon().contains({"saw", "the", "light"}));
  EXPECT_EQ(back.training_config().get_string("lambda_span", ""), "0.3");
  const auto s = words({"the", "sailor", "saw", "the", "light"});
  EXPECT_EQ(model.encode(model.prepare(s)).words, back.encode(back.prepare(s)).words);

  EXPECT_THROW(deserialize_checkpoint("garbage"), CheckpointError);
  EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, bytes.size() - 3)), CheckpointError);
  auto wrong_version = bytes;
  wrong_version[8] = 9;
  EXPECT_THROW(deserialize_checkpoint(wrong_version), CheckpointError);
}

TEST(Checkpoint, PretrainedModeCopiesEncoderWeights) {
  const auto path = std::filesystem::temp_directory_path() / "spanscl_pretrained.ckpt";
  SpanTagger source(tiny(), TagSet::for_classes({"idiom"}), 99);
  save_checkpoint(path, source);
  auto cfg = tiny();
  cfg.mode = EncoderMode::kPretrained;
  cfg.pretrained_path = path.string();
  auto model = create_tagger(cfg, TagSet::for_classes({"idiom", "metaphor"}), 1);
  for (std::size_t i = 0; i < model.encoder().parameters().size(); ++i) {
    EXPECT_EQ(model.encoder().parameters()[i].value, source.encoder().parameters()[i].value);
  }
  EXPECT_EQ(model.head().labels(), 5u);

  auto other = tiny();
  other.hidden_size = 32;
  other.mode = EncoderMode::kPretrained;
  other.pretrained_path = path.string();
  EXPECT_THROW(create_tagger(other, TagSet::for_classes({"idiom"}), 1), CheckpointError);
  std::filesystem::remove(path);
}
