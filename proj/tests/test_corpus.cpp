#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "spanscl/corpus.hpp"

using namespace spanscl;

namespace {

LabeledSentence sentence(std::string id, std::vector<std::string> tokens, std::vector<std::string> labels) {
  return {std::move(id), std::move(tokens), std::move(labels)};
}

std::vector<LabeledSentence> numbered(std::size_t n) {
  std::vector<LabeledSentence> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(sentence(std::to_string(i), {"w"}, {"O"}));
  return out;
}

std::vector<std::string> ids(const std::vector<LabeledSentence>& s) {
  std::vector<std::string> out;
  for (const auto& x : s) out.push_back(x.id);
  return out;
}

}  // namespace

TEST(ParseConll, SingleIdiomSentence) {
  const auto out = parse_conll("saw\tB-idiom\nthe\tI-idiom\nlight\tI-idiom\n\n");
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].tokens, (std::vector<std::string>{"saw", "the", "light"}));
  EXPECT_EQ(out[0].labels, (std::vector<std::string>{"B-idiom", "I-idiom", "I-idiom"}));
  EXPECT_EQ(out[0].id, "s0");
}

TEST(ParseConll, EmptyInputGivesNoSentences) { EXPECT_TRUE(parse_conll("").empty()); }

TEST(ParseConll, WrongColumnCountReportsLine) {
  try {
    parse_conll("a\tB-idiom\tx");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 1u);
  }
  try {
    parse_conll("a\tO\n\nb\tO\nc\n");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 4u);
  }
}

TEST(ParseConll, UnknownTagPrefixIsValidationError) {
  EXPECT_THROW(parse_conll("a\tX-idiom\n"), ValidationError);
  EXPECT_THROW(parse_conll("a\tB-\n"), ValidationError);
}

TEST(ParseConll, IdLinesAndCrlf) {
  const auto out = parse_conll("# id = first\r\na\tO\r\n\r\n# id = second\nb\tB-x\n");
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[0].id, "first");
  EXPECT_EQ(out[1].id, "second");
  EXPECT_EQ(out[1].labels[0], "B-x");
}

TEST(Serialization, ConllAndJsonlRoundTrip) {
  SynthesisConfig c;
  c.phrases = default_phrase_inventory();
  c.train_count = 40;
  c.dev_count = 5;
  c.test_count = 5;
  const auto data = generate_synthetic_corpus(c);
  EXPECT_EQ(parse_conll(serialize_conll(data.train)), data.train);
  EXPECT_EQ(parse_jsonl(serialize_jsonl(data.train)), data.train);
}

TEST(Serialization, JsonlErrors) {
  EXPECT_THROW(parse_jsonl("{not json}\n"), ParseError);
  EXPECT_THROW(parse_jsonl("{\"tokens\": [\"a\"]}\n"), ParseError);
  EXPECT_THROW(parse_jsonl("{\"tokens\": [\"a\"], \"labels\": [\"Q\"]}\n"), ValidationError);
  EXPECT_THROW(parse_jsonl("{\"tokens\": [\"a\", \"b\"], \"labels\": [\"O\"]}\n"), ValidationError);
}

TEST(RepairLabels, SpecExamples) {
  using V = std::vector<std::string>;
  EXPECT_EQ(repair_labels({"O", "I-idiom", "I-idiom"}), (V{"O", "B-idiom", "I-idiom"}));
  EXPECT_EQ(repair_labels({"B-idiom", "I-idiom", "O"}), (V{"B-idiom", "I-idiom", "O"}));
  EXPECT_EQ(repair_labels({"I-idiom"}), (V{"B-idiom"}));
  EXPECT_EQ(repair_labels({"B-a", "I-b", "I-b"}), (V{"B-a", "B-b", "I-b"}));
}

TEST(RepairLabels, IdempotentAndValidOnRandomSequences) {
  Rng rng(3);
  const std::vector<std::string> alphabet{"O", "B-a", "I-a", "B-b", "I-b"};
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<std::string> labels(1 + rng.below(8));
    for (auto& l : labels) l = alphabet[rng.below(alphabet.size())];
    const auto once = repair_labels(labels);
    EXPECT_TRUE(is_valid_iob2(once));
    EXPECT_EQ(repair_labels(once), once);
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] != once[i]) {
        EXPECT_EQ(labels[i][0], 'I');
        EXPECT_EQ(once[i], "B-" + labels[i].substr(2));
      }
    }
  }
}

TEST(SplitDataset, PaperRatiosOnTenSentences) {
  const auto s = split_dataset(numbered(10), {0.8, 0.1, 0.1}, 7);
  EXPECT_EQ(s.train.size(), 8u);
  EXPECT_EQ(s.dev.size(), 1u);
  EXPECT_EQ(s.test.size(), 1u);
}

TEST(SplitDataset, SingleSentenceAllTrain) {
  const auto s = split_dataset(numbered(1), {1.0, 0.0, 0.0}, 1);
  EXPECT_EQ(s.train.size(), 1u);
  EXPECT_TRUE(s.dev.empty());
  EXPECT_TRUE(s.test.empty());
}

// Expected permutations come from tests/oracles/split_oracle.py, an
// independent MT19937-64 + Fisher-Yates implementation.
TEST(SplitDataset, FrozenPermutationsMatchOracle) {
  using V = std::vector<std::string>;
  const auto a = split_dataset(numbered(9), {0.8, 0.1, 0.1}, 1);
  EXPECT_EQ(ids(a.train), (V{"8", "3", "2", "1", "7", "0", "4"}));
  EXPECT_EQ(ids(a.dev), (V{"6"}));
  EXPECT_EQ(ids(a.test), (V{"5"}));
  const auto b = split_dataset(numbered(9), {0.8, 0.1, 0.1}, 2);
  EXPECT_EQ(ids(b.train), (V{"0", "2", "3", "4", "8", "5", "7"}));
  EXPECT_EQ(ids(b.dev), (V{"1"}));
  EXPECT_EQ(ids(b.test), (V{"6"}));
  const auto c = split_dataset(numbered(9), {0.8, 0.1, 0.1}, 13);
  EXPECT_EQ(ids(c.train), (V{"1", "2", "6", "8", "7", "0", "5"}));
  const auto d = split_dataset(numbered(10), {0.8, 0.1, 0.1}, 7);
  EXPECT_EQ(ids(d.train), (V{"0", "7", "4", "9", "3", "1", "2", "8"}));
  EXPECT_EQ(ids(d.dev), (V{"6"}));
  EXPECT_EQ(ids(d.test), (V{"5"}));
}

TEST(SplitDataset, PartitionProperty) {
  for (std::size_t n = 1; n <= 40; ++n) {
    const auto s = split_dataset(numbered(n), {0.8, 0.1, 0.1}, n);
    std::set<std::string> seen;
    for (const auto* part : {&s.train, &s.dev, &s.test}) {
      for (const auto& x : *part) EXPECT_TRUE(seen.insert(x.id).second);
    }
    EXPECT_EQ(seen.size(), n);
  }
}

TEST(SplitDataset, Errors) {
  EXPECT_THROW(split_dataset({}, {0.8, 0.1, 0.1}, 1), std::invalid_argument);
  EXPECT_THROW(split_dataset(numbered(3), {0.8, 0.1, 0.2}, 1), std::invalid_argument);
  EXPECT_THROW(split_dataset(numbered(3), {1.1, -0.1, 0.0}, 1), std::invalid_argument);
}

TEST(AlignToSubwords, SpecExamples) {
  const auto three = sentence("x", {"a", "b", "c"}, {"O", "O", "O"});
  auto a = align_to_subwords(three, {1, 1, 1});
  EXPECT_EQ(a.first_positions, (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_EQ(a.mask, (std::vector<bool>{true, true, true}));

  const auto two = sentence("x", {"a", "b"}, {"O", "O"});
  a = align_to_subwords(two, {2, 1});
  EXPECT_EQ(a.first_positions, (std::vector<std::size_t>{0, 2}));
  EXPECT_EQ(a.mask, (std::vector<bool>{true, false, true}));

  const auto one = sentence("x", {"a"}, {"O"});
  a = align_to_subwords(one, {3});
  EXPECT_EQ(a.first_positions, (std::vector<std::size_t>{0}));
  EXPECT_EQ(a.mask, (std::vector<bool>{true, false, false}));

  EXPECT_THROW(align_to_subwords(two, {1}), std::invalid_argument);
  EXPECT_THROW(align_to_subwords(two, {1, 0}), std::invalid_argument);
}

TEST(AlignToSubwords, UnmaskedCountEqualsWordsProperty) {
  Rng rng(11);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 1 + rng.below(12);
    LabeledSentence s{"r", std::vector<std::string>(n, "w"), std::vector<std::string>(n, "O")};
    std::vector<std::size_t> lengths(n);
    for (auto& l : lengths) l = 1 + rng.below(4);
    const auto a = align_to_subwords(s, lengths);
    std::size_t unmasked = 0;
    for (std::size_t i = 0; i < a.mask.size(); ++i) unmasked += a.mask[i] ? 1 : 0;
    EXPECT_EQ(unmasked, n);
    for (std::size_t i = 0; i < n; ++i) {
      EXPECT_TRUE(a.mask[a.first_positions[i]]);
      if (i > 0) {
        EXPECT_LT(a.first_positions[i - 1], a.first_positions[i]);
      }
    }
  }
}

TEST(SyntheticCorpus, IdiomRateZeroHasNoSpans) {
  SynthesisConfig c;
  c.phrases = default_phrase_inventory();
  c.idiom_rate = 0.0;
  c.train_count = 100;
  const auto d = generate_synthetic_corpus(c);
  for (const auto& s : d.train) {
    for (const auto& l : s.labels) EXPECT_EQ(l, "O");
  }
}

TEST(SyntheticCorpus, IdiomRateOneHasExactlyOneSpanPerSentence) {
  SynthesisConfig c;
  c.phrases = default_phrase_inventory();
  c.idiom_rate = 1.0;
  c.train_count = 100;
  c.dev_count = 0;
  c.test_count = 0;
  const auto d = generate_synthetic_corpus(c);
  ASSERT_EQ(d.train.size(), 100u);
  for (const auto& s : d.train) {
    std::size_t begins = 0;
    for (const auto& l : s.labels) begins += l.rfind("B-", 0) == 0 ? 1 : 0;
    EXPECT_EQ(begins, 1u);
    EXPECT_TRUE(is_valid_iob2(s.labels));
  }
}

TEST(SyntheticCorpus, DeterministicAndBothUsagesPresent) {
  SynthesisConfig c;
  c.phrases = default_phrase_inventory();
  c.train_count = 400;
  const auto a = generate_synthetic_corpus(c);
  const auto b = generate_synthetic_corpus(c);
  EXPECT_EQ(serialize_conll(a.train), serialize_conll(b.train));
  EXPECT_EQ(serialize_conll(a.test), serialize_conll(b.test));
  c.seed = 14;
  EXPECT_NE(serialize_conll(generate_synthetic_corpus(c).train), serialize_conll(a.train));

  // Each phrase shows up both as a labeled idiom and in an all-O sentence.
  for (const auto& p : default_phrase_inventory()) {
    bool figurative = false, literal = false;
    const auto words = detail::split_words(p.surface);
    for (const auto& s : a.train) {
      for (std::size_t i = 0; i + words.size() <= s.size(); ++i) {
        if (std::equal(words.begin(), words.end(), s.tokens.begin() + static_cast<std::ptrdiff_t>(i))) {
          (s.labels[i] == "O" ? literal : figurative) = true;
        }
      }
    }
    EXPECT_TRUE(figurative) << p.surface;
    EXPECT_TRUE(literal) << p.surface;
  }
}

TEST(SyntheticCorpus, RejectsBadConfig) {
  SynthesisConfig c;
  c.phrases = default_phrase_inventory();
  c.idiom_rate = 1.5;
  EXPECT_THROW(generate_synthetic_corpus(c), std::invalid_argument);
  c.idiom_rate = 0.5;
  c.phrases.clear();
  EXPECT_THROW(generate_synthetic_corpus(c), std::invalid_argument);
}

TEST(SyntheticCorpus, ConfigFileWithCustomPhrase) {
  const auto kv = KeyValueConfig::parse(
      "train_count = 10\ndev_count = 2\ntest_count = 2\nphrase.0 = kick the bucket\n"
      "phrase.0.figurative = sadly the old man {} _\nphrase.0.literal = _ the kid did {} over\n");
  const auto c = synthesis_config_from(kv);
  ASSERT_EQ(c.phrases.size(), 1u);
  EXPECT_EQ(c.phrases[0].surface, "kick the bucket");
  const auto d = generate_synthetic_corpus(c);
  EXPECT_EQ(d.train.size(), 10u);
  EXPECT_THROW(synthesis_config_from(KeyValueConfig::parse("phrase.0 = x\n")), ConfigError);
}

TEST(DatasetFiles, SaveAndLoadSplitDirRepairsTags) {
  const auto dir = std::filesystem::temp_directory_path() / "spanscl_corpus_test";
  std::filesystem::remove_all(dir);
  DatasetSplit split;
  split.train = {sentence("a", {"x", "y"}, {"B-idiom", "I-idiom"})};
  split.dev = {sentence("b", {"x"}, {"O"})};
  split.test = {sentence("c", {"x", "y"}, {"O", "I-idiom"})};
  save_split_dir(dir, split);
  log_quiet() = true;
  const auto loaded = load_split_dir(dir);
  EXPECT_EQ(loaded.train, split.train);
  EXPECT_EQ(loaded.test[0].labels, (std::vector<std::string>{"O", "B-idiom"}));
  save_sentences(dir / "extra.jsonl", split.train);
  EXPECT_EQ(load_sentences(dir / "extra.jsonl"), split.train);
  std::filesystem::remove_all(dir);
}
