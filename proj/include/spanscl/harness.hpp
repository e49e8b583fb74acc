#pragma once

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "spanscl/corpus.hpp"
#include "spanscl/encoder.hpp"
#include "spanscl/io.hpp"
#include "spanscl/kv_config.hpp"
#include "spanscl/metrics.hpp"
#include "spanscl/model.hpp"
#include "spanscl/objective.hpp"
#include "spanscl/optim.hpp"
#include "spanscl/spans.hpp"

namespace spanscl {

/// Dev metric used to pick the checkpoint. `kLast` keeps the final step.
enum class SelectionMetric { kPrecision, kF1, kSequenceAccuracy, kGeometricMean, kLast };

inline SelectionMetric selection_metric_from(const std::string& s) {
  if (s == "precision") return SelectionMetric::kPrecision;
  if (s == "f1") return SelectionMetric::kF1;
  if (s == "sa") return SelectionMetric::kSequenceAccuracy;
  if (s == "gm") return SelectionMetric::kGeometricMean;
  if (s == "last") return SelectionMetric::kLast;
  throw ConfigError("unknown selection metric: " + s + " (expected precision, f1, sa, gm or last)");
}

inline std::string to_string(SelectionMetric m) {
  switch (m) {
    case SelectionMetric::kPrecision: return "precision";
    case SelectionMetric::kF1: return "f1";
    case SelectionMetric::kSequenceAccuracy: return "sa";
    case SelectionMetric::kGeometricMean: return "gm";
    case SelectionMetric::kLast: return "last";
  }
  return "unknown";
}

inline double metric_value(const EvalReport& r, SelectionMetric m) {
  switch (m) {
    case SelectionMetric::kPrecision: return r.precision;
    case SelectionMetric::kF1: return r.f1;
    case SelectionMetric::kSequenceAccuracy: return r.sa;
    case SelectionMetric::kGeometricMean: return r.gm;
    case SelectionMetric::kLast: return 0.0;
  }
  return 0.0;
}

/// Prefixes relative paths with $SPANSCL_OUTPUT_ROOT when it is set.
inline std::filesystem::path resolve_output_path(const std::filesystem::path& p) {
  const char* root = std::getenv("SPANSCL_OUTPUT_ROOT");
  if (root == nullptr || *root == '\0' || p.is_absolute()) return p;
  return std::filesystem::path(root) / p;
}

/// "0.0", "0.3", "0.25": at least one decimal, no trailing zeros.
inline std::string format_lambda(double lambda) {
  std::string s = format_fixed(lambda, 6);
  while (s.size() > 1 && s.back() == '0' && s[s.size() - 2] != '.') s.pop_back();
  return s;
}

struct ExperimentConfig {
  /// Dataset name -> directory holding train/dev/test files.
  std::map<std::string, std::string> datasets;
  std::string train_dataset;
  EncoderConfig encoder;
  ContrastiveConfig contrastive;
  MiningPolicy mining;
  AdamConfig optimizer;
  std::size_t batch_size = 4;
  /// 0 means epochs * ceil(train / batch_size).
  std::size_t max_steps = 0;
  std::size_t epochs = 3;
  /// 0 means 10, or 1000 when the training split has more than 10k sentences.
  std::size_t eval_interval = 0;
  std::size_t log_interval = 0;
  std::uint64_t seed = 13;
  /// Empty disables all file output.
  std::string output_dir = "runs";
  std::string run_name;
  SelectionMetric selection = SelectionMetric::kPrecision;

  void validate() const {
    encoder.validate();
    contrastive.validate();
    if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (max_steps == 0 && epochs == 0) throw ConfigError("set train.max_steps or train.epochs");
    if (!(optimizer.learning_rate > 0.0)) throw ConfigError("train.learning_rate must be > 0");
  }

  std::size_t resolved_interval(std::size_t configured, std::size_t train_size) const {
    if (configured > 0) return configured;
    return train_size > 10000 ? 1000 : 10;
  }

  std::string resolved_run_name() const {
    if (!run_name.empty()) return run_name;
    return (train_dataset.empty() ? std::string("run") : train_dataset) + "_SCL_neg_" +
           format_lambda(contrastive.lambda_span);
  }

  static ExperimentConfig from(const KeyValueConfig& kv) {
    ExperimentConfig c;
    for (const auto& [key, value] : kv.with_prefix("dataset.")) c.datasets[key] = value;
    c.train_dataset = kv.get_string("train.dataset", c.datasets.size() == 1 ? c.datasets.begin()->first : "");
    c.encoder = EncoderConfig::from(kv);
    c.contrastive = ContrastiveConfig::from(kv);
    c.mining.kind = mining_kind_from(kv.get_string("mining.policy", to_string(c.mining.kind)));
    auto count = [&](const std::string& key, std::size_t fallback) {
      const auto v = kv.get_int(key, static_cast<long long>(fallback));
      if (v < 0) throw ConfigError(key + " must be non-negative");
      return static_cast<std::size_t>(v);
    };
    c.mining.cap = count("mining.cap", c.mining.cap);
    c.mining.max_window = count("mining.max_window", c.mining.max_window);
    c.optimizer.learning_rate = kv.get_double("train.learning_rate", c.optimizer.learning_rate);
    c.optimizer.warmup_steps = count("train.warmup_steps", c.optimizer.warmup_steps);
    c.optimizer.clip_norm = kv.get_double("train.clip_norm", c.optimizer.clip_norm);
    c.batch_size = count("train.batch_size", c.batch_size);
    c.max_steps = count("train.max_steps", c.max_steps);
    c.epochs = count("train.epochs", c.epochs);
    c.eval_interval = count("train.eval_interval", c.eval_interval);
    c.log_interval = count("train.log_interval", c.log_interval);
    c.seed = static_cast<std::uint64_t>(count("train.seed", c.seed));
    c.output_dir = kv.get_string("output.dir", c.output_dir);
    c.run_name = kv.get_string("output.run_name", c.run_name);
    c.selection = selection_metric_from(kv.get_string("train.selection", to_string(c.selection)));
    c.validate();
    return c;
  }

  /// Every setting, including defaults, as a flat key-value config.
  KeyValueConfig store() const {
    KeyValueConfig kv;
    for (const auto& [name, path] : datasets) kv.set("dataset." + name, path);
    if (!train_dataset.empty()) kv.set("train.dataset", train_dataset);
    encoder.store(kv);
    contrastive.store(kv);
    kv.set("mining.policy", to_string(mining.kind));
    kv.set("mining.cap", std::to_string(mining.cap));
    kv.set("mining.max_window", std::to_string(mining.max_window));
    kv.set("train.learning_rate", format_fixed(optimizer.learning_rate, 8));
    kv.set("train.warmup_steps", std::to_string(optimizer.warmup_steps));
    kv.set("train.clip_norm", format_fixed(optimizer.clip_norm, 6));
    kv.set("train.adam_beta1", format_fixed(optimizer.beta1, 6));
    kv.set("train.adam_beta2", format_fixed(optimizer.beta2, 6));
    kv.set("train.adam_epsilon", "1e-8");
    kv.set("train.batch_size", std::to_string(batch_size));
    kv.set("train.max_steps", std::to_string(max_steps));
    kv.set("train.epochs", std::to_string(epochs));
    kv.set("train.eval_interval", std::to_string(eval_interval));
    kv.set("train.log_interval", std::to_string(log_interval));
    kv.set("train.seed", std::to_string(seed));
    kv.set("train.selection", to_string(selection));
    kv.set("output.dir", output_dir);
    if (!run_name.empty()) kv.set("output.run_name", run_name);
    return kv;
  }
};

// --- run records -------------------------------------------------------------------

struct TrajectoryPoint {
  std::size_t step = 0;
  /// Mean training losses since the previous point.
  LossBreakdown train;
  EvalReport dev;
};

struct RunRecord {
  std::string name;
  KeyValueConfig config;
  double lambda_span = 0.0;
  std::vector<TrajectoryPoint> trajectory;
  std::size_t selected_step = 0;
  EvalReport dev;
  EvalReport test;
  /// Kept out of the JSON record so reruns stay byte-identical.
  double wall_clock_seconds = 0.0;
  std::string checkpoint;
};

inline nlohmann::json to_json(const LossBreakdown& b) {
  return {{"slot", b.slot},   {"span_reg", b.span_reg}, {"span_hard", b.span_hard},
          {"span", b.span},   {"total", b.total},       {"eligible_anchors", b.eligible_anchors}};
}

inline nlohmann::json to_json(const RunRecord& r) {
  nlohmann::json trajectory = nlohmann::json::array();
  for (const auto& p : r.trajectory) {
    trajectory.push_back({{"step", p.step}, {"train", to_json(p.train)}, {"dev", to_json(p.dev)}});
  }
  return {{"name", r.name},
          {"lambda_span", r.lambda_span},
          {"config", r.config.entries()},
          {"trajectory", trajectory},
          {"selected_step", r.selected_step},
          {"dev", to_json(r.dev)},
          {"test", to_json(r.test)},
          {"checkpoint", r.checkpoint}};
}

inline RunRecord run_record_from_json(const nlohmann::json& j) {
  RunRecord r;
  r.name = j.at("name").get<std::string>();
  r.lambda_span = j.at("lambda_span").get<double>();
  for (const auto& [k, v] : j.at("config").items()) r.config.set(k, v.get<std::string>());
  for (const auto& p : j.at("trajectory")) {
    TrajectoryPoint t;
    t.step = p.at("step").get<std::size_t>();
    const auto& l = p.at("train");
    t.train = {l.at("slot").get<double>(),  l.at("span_reg").get<double>(), l.at("span_hard").get<double>(),
               l.at("span").get<double>(),  l.at("total").get<double>(),    l.at("eligible_anchors").get<std::size_t>()};
    t.dev = eval_report_from_json(p.at("dev"));
    r.trajectory.push_back(t);
  }
  r.selected_step = j.at("selected_step").get<std::size_t>();
  r.dev = eval_report_from_json(j.at("dev"));
  r.test = eval_report_from_json(j.at("test"));
  r.checkpoint = j.at("checkpoint").get<std::string>();
  return r;
}

/// (test - dev) for SA and F1; positive means the test split scored higher.
inline std::pair<double, double> generalization_delta(const RunRecord& r) {
  return {r.test.sa - r.dev.sa, r.test.f1 - r.dev.f1};
}

// --- evaluation ----------------------------------------------------------------------

class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Throws ValidationError naming the first span class the tag set cannot emit.
inline void check_tag_coverage(const TagSet& tags, const std::vector<LabeledSentence>& sentences,
                               const std::string& model_name, const std::string& dataset_name) {
  for (const auto& cls : classes_of(sentences)) {
    if (!tags.covers_class(cls)) {
      throw ValidationError("model '" + model_name + "' cannot label dataset '" + dataset_name + "': missing class '" +
                            cls + "'");
    }
  }
}

inline EvalReport evaluate_model(SpanTagger& model, const std::vector<LabeledSentence>& sentences) {
  std::vector<std::vector<std::string>> pred, gold;
  pred.reserve(sentences.size());
  gold.reserve(sentences.size());
  for (const auto& s : sentences) {
    pred.push_back(model.predict(s));
    gold.push_back(s.labels);
  }
  return evaluate_tags(pred, gold);
}

// --- training ------------------------------------------------------------------------

/// Epoch-wise seeded permutation of the training set cut into batches; the
/// last batch of an epoch may be smaller.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::size_t batch_size, std::uint64_t seed)
      : n_(n), batch_size_(batch_size), seed_(seed), per_epoch_((n + batch_size - 1) / batch_size) {
    if (n == 0) throw std::invalid_argument("BatchSampler: empty training set");
    if (batch_size == 0) throw std::invalid_argument("BatchSampler: batch size must be >= 1");
  }

  std::size_t batches_per_epoch() const { return per_epoch_; }

  /// Indices of the batch used at 0-based step `step`.
  std::vector<std::size_t> batch(std::size_t step) {
    const std::size_t epoch = step / per_epoch_;
    if (!order_ || epoch != epoch_) {
      std::vector<std::size_t> order(n_);
      for (std::size_t i = 0; i < n_; ++i) order[i] = i;
      Rng rng(derive_seed(seed_, 0x626174636800ULL + epoch));
      rng.shuffle(order);
      order_ = std::move(order);
      epoch_ = epoch;
    }
    const std::size_t begin = (step % per_epoch_) * batch_size_;
    const std::size_t end = std::min(n_, begin + batch_size_);
    return {order_->begin() + static_cast<std::ptrdiff_t>(begin), order_->begin() + static_cast<std::ptrdiff_t>(end)};
  }

 private:
  std::size_t n_, batch_size_;
  std::uint64_t seed_;
  std::size_t per_epoch_;
  std::optional<std::vector<std::size_t>> order_;
  std::size_t epoch_ = 0;
};

inline std::size_t total_steps(const ExperimentConfig& c, std::size_t train_size) {
  if (c.max_steps > 0) return c.max_steps;
  return c.epochs * ((train_size + c.batch_size - 1) / c.batch_size);
}

/// Tag set covering every class of the dataset's three splits.
inline TagSet tag_set_for(const DatasetSplit& split) {
  std::vector<LabeledSentence> all(split.train);
  all.insert(all.end(), split.dev.begin(), split.dev.end());
  all.insert(all.end(), split.test.begin(), split.test.end());
  auto classes = classes_of(all);
  if (classes.empty()) throw ValidationError("dataset has no labeled spans");
  return TagSet::for_classes(classes);
}

struct TrainedModel {
  RunRecord record;
  SpanTagger model;
};

namespace detail {

struct PreparedExample {
  PreparedSentence prepared;
  std::vector<std::size_t> gold;
  std::vector<Span> gold_spans;
};

inline void write_nonfinite_dump(const std::filesystem::path& path, std::size_t step, const LossBreakdown& loss,
                                 const std::vector<std::size_t>& batch, const std::vector<PreparedExample>& examples) {
  nlohmann::json sentences = nlohmann::json::array();
  for (auto i : batch) {
    const auto& s = examples[i].prepared.sentence;
    sentences.push_back({{"id", s.id}, {"tokens", s.tokens}, {"labels", s.labels}});
  }
  auto finite_or_string = [](double v) -> nlohmann::json {
    if (std::isfinite(v)) return v;
    return std::isnan(v) ? "nan" : (v > 0 ? "inf" : "-inf");
  };
  nlohmann::json dump = {{"step", step},
                         {"slot", finite_or_string(loss.slot)},
                         {"span_reg", finite_or_string(loss.span_reg)},
                         {"span_hard", finite_or_string(loss.span_hard)},
                         {"span", finite_or_string(loss.span)},
                         {"total", finite_or_string(loss.total)},
                         {"eligible_anchors", loss.eligible_anchors},
                         {"batch", sentences}};
  write_file_atomic(path, dump.dump(2) + "\n");
}

}  // namespace detail

/// Minibatch training on slot + lambda * span loss with periodic dev
/// evaluation, dev-metric checkpoint selection and a single final test pass.
/// At lambda = 0 the span branch is not built at all.
inline TrainedModel train_model(const ExperimentConfig& config, const DatasetSplit& data) {
  config.validate();
  if (data.train.empty()) throw ValidationError("training split is empty");
  const auto started = std::chrono::steady_clock::now();
  const double lambda = config.contrastive.lambda_span;
  const std::string name = config.resolved_run_name();

  SpanTagger model = create_tagger(config.encoder, tag_set_for(data), config.seed);
  model.training_config() = config.store();
  model.lexicon().add_gold_spans(data.train);
  const auto params = model.parameters();

  std::vector<detail::PreparedExample> examples;
  examples.reserve(data.train.size());
  for (const auto& s : data.train) {
    detail::PreparedExample e{model.prepare(s), {}, {}};
    for (const auto& l : e.prepared.sentence.labels) e.gold.push_back(model.tags().index_of(l));
    e.gold_spans = extract_gold_spans(e.prepared.sentence);
    examples.push_back(std::move(e));
  }

  const std::size_t steps = total_steps(config, data.train.size());
  const std::size_t eval_every = config.resolved_interval(config.eval_interval, data.train.size());
  const std::size_t log_every = config.resolved_interval(config.log_interval, data.train.size());
  BatchSampler sampler(data.train.size(), config.batch_size, config.seed);

  RunRecord record;
  record.name = name;
  record.config = config.store();
  record.lambda_span = lambda;

  std::vector<Matrix> best_values;
  std::optional<EvalReport> best_report;
  LossBreakdown interval_sum, log_sum;
  std::size_t interval_steps = 0, log_steps = 0;

  auto better = [&](const EvalReport& candidate) {
    if (!best_report || config.selection == SelectionMetric::kLast) return true;
    auto key = [&](const EvalReport& r) { return std::make_tuple(metric_value(r, config.selection), r.f1, r.sa); };
    return key(candidate) > key(*best_report);
  };
  auto accumulate = [](LossBreakdown& sum, const LossBreakdown& b) {
    sum.slot += b.slot;
    sum.span_reg += b.span_reg;
    sum.span_hard += b.span_hard;
    sum.span += b.span;
    sum.total += b.total;
    sum.eligible_anchors += b.eligible_anchors;
  };
  auto mean_of = [](LossBreakdown sum, std::size_t count) {
    const double k = static_cast<double>(std::max<std::size_t>(count, 1));
    sum.slot /= k;
    sum.span_reg /= k;
    sum.span_hard /= k;
    sum.span /= k;
    sum.total /= k;
    sum.eligible_anchors = static_cast<std::size_t>(std::llround(static_cast<double>(sum.eligible_anchors) / k));
    return sum;
  };

  for (std::size_t step = 1; step <= steps; ++step) {
    const auto batch = sampler.batch(step - 1);
    autodiff::Tape tape;
    std::vector<autodiff::Var> logits_parts, span_parts;
    std::vector<std::size_t> gold;
    std::vector<std::string> span_labels;
    for (auto i : batch) {
      const auto& e = examples[i];
      const auto enc = model.encoder().encode_on_tape(tape, e.prepared.subword_ids, e.prepared.alignment);
      logits_parts.push_back(model.head().logits(tape, enc.words));
      gold.insert(gold.end(), e.gold.begin(), e.gold.end());
      if (lambda > 0.0) {
        auto spans = e.gold_spans;
        const auto mined = mine_negative_spans(e.prepared.sentence, config.mining, model.lexicon(),
                                               derive_seed(derive_seed(config.seed, step), i));
        spans.insert(spans.end(), mined.begin(), mined.end());
        for (const auto& s : spans) {
          span_parts.push_back(pool_span_on_tape(enc.words, s, config.contrastive.normalize));
          span_labels.push_back(s.label);
        }
      }
    }
    autodiff::Var logits = logits_parts.size() == 1 ? logits_parts.front() : autodiff::stack_rows(logits_parts);
    autodiff::Var loss = slot_loss_on_tape(logits, gold, std::vector<bool>(gold.size(), true));

    LossBreakdown b;
    b.slot = loss.value()(0, 0);
    if (lambda > 0.0 && span_parts.size() >= 2) {
      SpanContrastiveResult r;
      autodiff::Var span = span_contrastive_on_tape(autodiff::stack_rows(span_parts), span_labels, config.contrastive, &r);
      b.span_reg = r.regular;
      b.span_hard = r.hard;
      b.span = r.value;
      b.eligible_anchors = r.eligible_anchors;
      loss = autodiff::add_scalar_terms(loss, span, lambda);
    }
    b.total = loss.value()(0, 0);

    if (!std::isfinite(b.total)) {
      std::string where = "no dump written (output disabled)";
      if (!config.output_dir.empty()) {
        const auto path = resolve_output_path(config.output_dir) / name / ("nonfinite_step" + std::to_string(step) + ".json");
        detail::write_nonfinite_dump(path, step, b, batch, examples);
        where = "batch dumped to " + path.string();
      }
      throw NonFiniteLoss("non-finite loss at step " + std::to_string(step) + " (slot " + std::to_string(b.slot) +
                          ", span " + std::to_string(b.span) + "); " + where);
    }

    tape.backward(loss);
    clip_gradients(params, config.optimizer.clip_norm);
    adam_step(params, config.optimizer, step);

    accumulate(interval_sum, b);
    accumulate(log_sum, b);
    ++interval_steps;
    ++log_steps;
    if (step % log_every == 0) {
      const auto m = mean_of(log_sum, log_steps);
      log(LogLevel::kInfo, name + " step " + std::to_string(step) + "/" + std::to_string(steps) + " loss " +
                               format_fixed(m.total, 4) + " (slot " + format_fixed(m.slot, 4) + ", span " +
                               format_fixed(m.span, 4) + ")");
      log_sum = {};
      log_steps = 0;
    }
    if (step % eval_every == 0 || step == steps) {
      TrajectoryPoint point{step, mean_of(interval_sum, interval_steps), evaluate_model(model, data.dev)};
      interval_sum = {};
      interval_steps = 0;
      if (better(point.dev)) {
        best_report = point.dev;
        record.selected_step = step;
        best_values.clear();
        for (const auto* p : params) best_values.push_back(p->value);
      }
      record.trajectory.push_back(point);
    }
  }

  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = best_values[i];
  record.dev = *best_report;
  record.test = evaluate_model(model, data.test);
  record.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();

  if (!config.output_dir.empty()) {
    const auto dir = resolve_output_path(config.output_dir) / name;
    record.checkpoint = (dir / "model.ckpt").string();
    save_checkpoint(dir / "model.ckpt", model);
    write_file_atomic(dir / "config.txt", record.config.serialize());
    write_file_atomic(dir / "record.json", to_json(record).dump(2) + "\n");
    write_file_atomic(dir / "timing.txt", "wall_clock_seconds = " + format_fixed(record.wall_clock_seconds, 3) + "\n");
  }
  return {std::move(record), std::move(model)};
}

inline DatasetSplit load_training_data(const ExperimentConfig& config) {
  if (config.train_dataset.empty()) throw ConfigError("train.dataset is not set");
  const auto it = config.datasets.find(config.train_dataset);
  if (it == config.datasets.end()) throw ConfigError("no dataset." + config.train_dataset + " path configured");
  return load_split_dir(it->second);
}

inline RunRecord train(const ExperimentConfig& config) { return train_model(config, load_training_data(config)).record; }

// --- lambda ablation -----------------------------------------------------------------

struct AblationResult {
  std::vector<RunRecord> runs;
  double best_by_sa = 0.0;
  double best_by_f1 = 0.0;
};

/// Lambda with the highest dev metric; ties go to the smaller lambda.
/// With `positive_only`, lambda = 0 runs are ignored.
inline double select_best_lambda(const std::vector<RunRecord>& runs, SelectionMetric metric, bool positive_only = false) {
  std::optional<std::pair<double, double>> best;  // (metric, lambda)
  for (const auto& r : runs) {
    if (positive_only && !(r.lambda_span > 0.0)) continue;
    const double v = metric_value(r.dev, metric);
    if (!best || v > best->first || (v == best->first && r.lambda_span < best->second)) best = {v, r.lambda_span};
  }
  if (!best) throw std::invalid_argument("select_best_lambda: no eligible runs");
  return best->second;
}

inline std::vector<double> default_lambda_grid() {
  std::vector<double> grid;
  for (int i = 0; i <= 10; ++i) grid.push_back(i / 10.0);
  return grid;
}

inline AblationResult ablate_lambda(const ExperimentConfig& config, const std::vector<double>& grid,
                                    const DatasetSplit& data) {
  if (grid.empty()) throw std::invalid_argument("ablate_lambda: empty grid");
  AblationResult result;
  for (double lambda : grid) {
    ExperimentConfig c = config;
    c.contrastive.lambda_span = lambda;
    if (!config.run_name.empty()) c.run_name = config.run_name + "_SCL_neg_" + format_lambda(lambda);
    result.runs.push_back(train_model(c, data).record);
  }
  result.best_by_sa = select_best_lambda(result.runs, SelectionMetric::kSequenceAccuracy);
  result.best_by_f1 = select_best_lambda(result.runs, SelectionMetric::kF1);
  return result;
}

inline AblationResult ablate_lambda(const ExperimentConfig& config, const std::vector<double>& grid) {
  return ablate_lambda(config, grid, load_training_data(config));
}

// --- cross evaluation ----------------------------------------------------------------

struct CrossEvalCell {
  EvalReport dev;
  EvalReport test;
};

struct CrossEvalMatrix {
  std::vector<std::string> models;
  std::vector<std::string> datasets;
  /// cells[model][dataset]
  std::vector<std::vector<CrossEvalCell>> cells;

  /// Cross-dataset summary of one model's row on the "dev" or "test" split.
  CrossEvalSummary summary(std::size_t row, const std::string& split = "test") const {
    std::vector<DatasetScore> scores;
    for (std::size_t c = 0; c < datasets.size(); ++c) {
      const auto& r = split == "dev" ? cells.at(row).at(c).dev : cells.at(row).at(c).test;
      scores.push_back({datasets[c], r.sa, r.f1, r.gm});
    }
    return summarize_cross_eval(scores);
  }
};

struct NamedDataset {
  std::string name;
  DatasetSplit split;
};

/// Evaluates every model on the dev and test split of every dataset.
inline CrossEvalMatrix cross_evaluate(const std::vector<std::pair<std::string, SpanTagger*>>& models,
                                      const std::vector<NamedDataset>& datasets) {
  CrossEvalMatrix m;
  for (const auto& d : datasets) m.datasets.push_back(d.name);
  for (const auto& [name, model] : models) {
    for (const auto& d : datasets) {
      check_tag_coverage(model->tags(), d.split.dev, name, d.name);
      check_tag_coverage(model->tags(), d.split.test, name, d.name);
    }
  }
  for (const auto& [name, model] : models) {
    m.models.push_back(name);
    auto& row = m.cells.emplace_back();
    for (const auto& d : datasets) row.push_back({evaluate_model(*model, d.split.dev), evaluate_model(*model, d.split.test)});
  }
  return m;
}

/// Loads each checkpoint from disk; models are never retrained here.
inline CrossEvalMatrix cross_evaluate(const std::vector<std::pair<std::string, std::filesystem::path>>& checkpoints,
                                      const std::vector<NamedDataset>& datasets) {
  std::vector<SpanTagger> loaded;
  loaded.reserve(checkpoints.size());
  for (const auto& [name, path] : checkpoints) loaded.push_back(load_checkpoint(path));
  std::vector<std::pair<std::string, SpanTagger*>> models;
  for (std::size_t i = 0; i < loaded.size(); ++i) models.emplace_back(checkpoints[i].first, &loaded[i]);
  return cross_evaluate(models, datasets);
}

inline nlohmann::json to_json(const CrossEvalMatrix& m) {
  nlohmann::json cells = nlohmann::json::array();
  nlohmann::json summaries = nlohmann::json::object();
  for (std::size_t r = 0; r < m.models.size(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (const auto& c : m.cells[r]) row.push_back({{"dev", to_json(c.dev)}, {"test", to_json(c.test)}});
    cells.push_back(row);
    if (!m.datasets.empty()) summaries[m.models[r]] = {{"dev", to_json(m.summary(r, "dev"))}, {"test", to_json(m.summary(r, "test"))}};
  }
  return {{"models", m.models}, {"datasets", m.datasets}, {"cells", cells}, {"summaries", summaries}};
}

// --- report emission -----------------------------------------------------------------

/// Model-by-dataset table of "SA/F1/P/R" cells for one split.
inline std::string render_quadruple_table(const CrossEvalMatrix& m, const std::string& split) {
  std::vector<std::string> header{"model"};
  header.insert(header.end(), m.datasets.begin(), m.datasets.end());
  std::vector<std::vector<std::string>> rows;
  for (std::size_t r = 0; r < m.models.size(); ++r) {
    std::vector<std::string> row{m.models[r]};
    for (const auto& c : m.cells[r]) row.push_back(format_quadruple(split == "dev" ? c.dev : c.test));
    rows.push_back(std::move(row));
  }
  return render_table(header, rows);
}

inline std::string ablation_csv(const std::vector<RunRecord>& runs) {
  std::string out = "lambda,dev_sa,dev_f1,dev_precision,dev_recall,test_sa,test_f1,test_precision,test_recall\n";
  for (const auto& r : runs) {
    out += format_lambda(r.lambda_span);
    for (double v : {r.dev.sa, r.dev.f1, r.dev.precision, r.dev.recall, r.test.sa, r.test.f1, r.test.precision, r.test.recall}) {
      out += "," + format_fixed(v, 6);
    }
    out += "\n";
  }
  return out;
}

inline std::string delta_csv(const std::vector<RunRecord>& runs) {
  std::string out = "run,lambda,delta_sa,delta_f1\n";
  for (const auto& r : runs) {
    const auto [dsa, df1] = generalization_delta(r);
    out += r.name + "," + format_lambda(r.lambda_span) + "," + format_fixed(dsa, 6) + "," + format_fixed(df1, 6) + "\n";
  }
  return out;
}

/// Writes results.json, quadruple tables per split, the cross-dataset summary
/// table, ablation.csv and deltas.csv. Existing files are overwritten.
inline std::vector<std::filesystem::path> emit_reports(const CrossEvalMatrix& matrix, const std::vector<RunRecord>& records,
                                                       const std::filesystem::path& out_dir) {
  nlohmann::json runs = nlohmann::json::array();
  for (const auto& r : records) runs.push_back(to_json(r));
  const nlohmann::json results = {{"runs", runs}, {"cross_eval", to_json(matrix)}};

  std::vector<std::pair<std::string, CrossEvalSummary>> summaries;
  if (!matrix.datasets.empty()) {
    for (std::size_t r = 0; r < matrix.models.size(); ++r) summaries.emplace_back(matrix.models[r], matrix.summary(r));
  }

  const std::vector<std::pair<std::string, std::string>> files{
      {"results.json", results.dump(2) + "\n"},
      {"cross_eval_test.txt", render_quadruple_table(matrix, "test")},
      {"cross_eval_dev.txt", render_quadruple_table(matrix, "dev")},
      {"summary_test.txt", render_summary_table(summaries)},
      {"ablation.csv", ablation_csv(records)},
      {"deltas.csv", delta_csv(records)},
  };
  std::vector<std::filesystem::path> written;
  for (const auto& [file, content] : files) {
    write_file_atomic(out_dir / file, content);
    written.push_back(out_dir / file);
  }
  return written;
}

}  // namespace spanscl
