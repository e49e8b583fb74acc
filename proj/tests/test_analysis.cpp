#include <gtest/gtest.h>

#include <filesystem>

#include "spanscl/analysis.hpp"
#include "spanscl/plot.hpp"

using namespace spanscl;
namespace fs = std::filesystem;

namespace {

std::vector<LabeledSentence> fixture() { return load_sentences(fs::path(SPANSCL_TEST_DATA) / "fixture10.conll"); }

SpanTagger fixture_model() {
  EncoderConfig c;
  c.hidden_size = 16;
  c.layers = 1;
  c.ffn_size = 32;
  return SpanTagger(c, TagSet::for_classes({"idiom"}), 5);
}

Matrix random_points(std::uint64_t seed, Eigen::Index rows, Eigen::Index cols) {
  Rng rng(seed);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

}  // namespace

TEST(ExtractEmbeddings, PointCountsPerKind) {
  auto model = fixture_model();
  const auto sentences = fixture();
  ASSERT_EQ(sentences.size(), 10u);
  const auto cls = extract_embeddings(model, sentences, EmbeddingKind::kCls, "m", 0.0);
  const auto word = extract_embeddings(model, sentences, EmbeddingKind::kWord, "m", 0.0);
  const auto span = extract_embeddings(model, sentences, EmbeddingKind::kSpan, "m", 0.0);
  EXPECT_EQ(cls.size(), 10u);
  EXPECT_EQ(word.size(), 93u);
  EXPECT_EQ(span.size(), 19u);
  EXPECT_EQ(cls.points.cols(), 16);
  EXPECT_EQ(std::count_if(cls.meta.begin(), cls.meta.end(), [](const auto& m) { return m.label == "idiomatic"; }), 5);
  EXPECT_EQ(std::count_if(span.meta.begin(), span.meta.end(), [](const auto& m) { return m.label == "idiom"; }), 5);
  EXPECT_EQ(word.meta[7].label, "B-idiom");
  for (Eigen::Index r = 0; r < span.points.rows(); ++r) EXPECT_NEAR(span.points.row(r).norm(), 1.0, 1e-12);
}

TEST(ExtractEmbeddings, KindNamesAndCoverage) {
  EXPECT_EQ(embedding_kind_from("span"), EmbeddingKind::kSpan);
  EXPECT_THROW(embedding_kind_from("token"), std::invalid_argument);
  auto model = fixture_model();
  EXPECT_THROW(extract_embeddings(model, {{"x", {"a"}, {"B-other"}}}, EmbeddingKind::kCls, "m", 0), ValidationError);
}

TEST(DumpJsonl, RoundTrip) {
  auto model = fixture_model();
  const auto dump = extract_embeddings(model, fixture(), EmbeddingKind::kSpan, "tiny", 0.3);
  const auto text = serialize_dump_jsonl(dump);
  const auto back = parse_dump_jsonl(text);
  EXPECT_EQ(back.kind, EmbeddingKind::kSpan);
  EXPECT_EQ(back.meta, dump.meta);
  EXPECT_EQ(back.points, dump.points);
  EXPECT_EQ(serialize_dump_jsonl(back), text);
  EXPECT_THROW(parse_dump_jsonl("{not json}\n"), ParseError);
}

TEST(Pca, AxisAlignedDataAndVarianceOrder) {
  Matrix pts(4, 3);
  pts << -3, 0.5, 0, 3, -0.5, 0, -3, -0.5, 0, 3, 0.5, 0;
  const auto r = pca(pts, 3);
  EXPECT_NEAR(std::abs(r.axes(0, 0)), 1.0, 1e-12);
  EXPECT_NEAR(std::abs(r.axes(1, 1)), 1.0, 1e-12);
  EXPECT_NEAR(r.variances(0), 12.0, 1e-12);
  EXPECT_NEAR(r.variances(1), 1.0 / 3.0, 1e-12);
  EXPECT_NEAR(r.variances(2), 0.0, 1e-12);
  EXPECT_GE(r.axes(0, 0), 0.0);
}

TEST(Pca, DuplicatePointsCollapse) {
  const Matrix same = Matrix::Constant(5, 4, 2.5);
  const auto r = pca(same, 2);
  EXPECT_LT(r.coords.cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_THROW(pca(Matrix::Zero(2, 4), 2), InsufficientPoints);
  EXPECT_THROW(pca(Matrix::Zero(5, 2), 3), std::invalid_argument);
}

TEST(Pca, FullRankReconstructionAndTranslationInvariance) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const Matrix x = random_points(seed, 12, 5);
    const auto r = pca(x, 5);
    const Matrix back = (r.coords * r.axes.transpose()).rowwise() + r.mean;
    EXPECT_LT((back - x).cwiseAbs().maxCoeff(), 1e-6);
    RowVector shift(5);
    shift << 10, -3, 0.25, 7, -100;
    const Matrix moved = x.rowwise() + shift;
    EXPECT_LT((pca(moved, 2).coords - pca(x, 2).coords).cwiseAbs().maxCoeff(), 1e-9);
    for (Eigen::Index c = 1; c < 5; ++c) EXPECT_GE(r.variances(c - 1), r.variances(c));
  }
}

TEST(Tsne, SeededRunsAreReproducible) {
  const Matrix x = random_points(3, 40, 6);
  TsneParams p;
  p.perplexity = 5;
  p.iterations = 300;
  const Matrix a = tsne(x, p);
  EXPECT_EQ(a, tsne(x, p));
  p.seed = 8;
  EXPECT_NE(a, tsne(x, p));
  EXPECT_TRUE(a.allFinite());
  EXPECT_LT(a.colwise().mean().norm(), 1e-9);
}

TEST(Tsne, SeparatesClusters) {
  Matrix x = random_points(4, 30, 4) * 0.1;
  x.topRows(15).array() += 5.0;
  TsneParams p;
  p.perplexity = 5;
  std::vector<std::string> labels(30, "b");
  std::fill(labels.begin(), labels.begin() + 15, "a");
  const Matrix y = tsne(x, p);
  EXPECT_GT(silhouette(y, labels), 0.8);
  EXPECT_LT(y.cwiseAbs().maxCoeff(), 200.0);
}

TEST(Tsne, TooFewPointsForPerplexity) {
  TsneParams p;
  EXPECT_THROW(tsne(random_points(1, 50, 3), p), InsufficientPoints);
  p.perplexity = 0;
  EXPECT_THROW(tsne(random_points(1, 50, 3), p), std::invalid_argument);
}

TEST(Silhouette, Examples) {
  Matrix pts(4, 2);
  pts << 0, 0, 0, 1, 10, 0, 10, 1;
  // Every point: a = 1, b = (10 + sqrt(101)) / 2.
  EXPECT_NEAR(silhouette(pts, {"a", "a", "b", "b"}), 1.0 - 2.0 / (10.0 + std::sqrt(101.0)), 1e-12);
  EXPECT_LT(silhouette(pts, {"a", "b", "a", "b"}), 0.0);
  EXPECT_EQ(silhouette(pts, {"a", "a", "a", "a"}), 0.0);
}

TEST(EmitPlot, WritesImageAndDeterministicSidecars) {
  auto model = fixture_model();
  const auto dump = extract_embeddings(model, fixture(), EmbeddingKind::kWord, "tiny", 0.0);
  std::vector<PlotPanel> panels;
  for (int i = 0; i < 5; ++i) panels.push_back({"panel" + std::to_string(i), project(dump, ProjectionMethod::kPca), dump.meta});
  const auto dir = fs::temp_directory_path() / "spanscl_plot_test";
  fs::remove_all(dir);
  const auto files = emit_plot(panels, dir / "words.png");
  EXPECT_EQ(files.coordinates, dir / "words.csv");
  EXPECT_EQ(files.silhouettes, dir / "words.silhouette.csv");
  const auto png = read_file(files.image);
  ASSERT_GT(png.size(), 8u);
  EXPECT_EQ(png.substr(1, 3), "PNG");
  const auto csv = read_file(files.coordinates);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 5 * 93);
  const auto sil = read_file(files.silhouettes);
  EXPECT_EQ(std::count(sil.begin(), sil.end(), '\n'), 6);

  emit_plot(panels, dir / "words.png");
  EXPECT_EQ(read_file(files.image), png);
  EXPECT_EQ(read_file(files.coordinates), csv);
  EXPECT_THROW(emit_plot({}, dir / "none.png"), std::invalid_argument);
}

TEST(Raster, PngDimensions) {
  Raster r(7, 3);
  r.set(1, 1, {255, 0, 0});
  const auto png = r.encode_png();
  auto be32 = [&](std::size_t at) {
    return (static_cast<unsigned>(static_cast<unsigned char>(png[at])) << 24) |
           (static_cast<unsigned>(static_cast<unsigned char>(png[at + 1])) << 16) |
           (static_cast<unsigned>(static_cast<unsigned char>(png[at + 2])) << 8) |
           static_cast<unsigned>(static_cast<unsigned char>(png[at + 3]));
  };
  EXPECT_EQ(be32(16), 7u);
  EXPECT_EQ(be32(20), 3u);
}
