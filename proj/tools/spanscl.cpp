#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

#include "spanscl/spanscl.hpp"

namespace fs = std::filesystem;
using namespace spanscl;

namespace {

struct CommonOptions {
  std::string config_path;
  std::vector<std::string> overrides;
};

// --config, then --set k=v, then any --dotted.key=value extras, in that order.
KeyValueConfig load_config(const CommonOptions& opts, const std::vector<std::string>& extras) {
  KeyValueConfig kv = opts.config_path.empty() ? KeyValueConfig{} : KeyValueConfig::load(opts.config_path);
  for (const auto& o : opts.overrides) kv.apply_override(o);
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const std::string& arg = extras[i];
    if (arg.rfind("--", 0) != 0 || arg.size() < 3) throw ConfigError("unexpected argument: " + arg);
    const std::string body = arg.substr(2);
    if (body.find('=') != std::string::npos) {
      kv.apply_override(body);
    } else if (i + 1 < extras.size()) {
      kv.set(body, extras[++i]);
    } else {
      throw ConfigError("flag --" + body + " needs a value");
    }
  }
  return kv;
}

void add_common(CLI::App* sub, CommonOptions& opts) {
  sub->add_option("-c,--config", opts.config_path, "Flat key = value config file");
  sub->add_option("-s,--set", opts.overrides, "Override one config key (key=value); repeatable");
  sub->allow_extras();
  sub->footer("Any config key can also be given directly as --key=value.");
}

fs::path run_dir(const KeyValueConfig& kv, const std::string& fallback_name) {
  return resolve_output_path(kv.get_string("output.dir", "runs")) / kv.get_string("output.run_name", fallback_name);
}

std::vector<std::pair<std::string, fs::path>> model_paths(const KeyValueConfig& kv) {
  std::vector<std::pair<std::string, fs::path>> out;
  for (const auto& [name, path] : kv.with_prefix("model.")) out.emplace_back(name, path);
  if (out.empty()) throw ConfigError("no model.<name> = <checkpoint> entries configured");
  return out;
}

std::vector<LabeledSentence> load_split_or_file(const fs::path& path, const std::string& split) {
  if (fs::is_directory(path)) return load_sentences(find_split_file(path, split));
  return load_sentences(path);
}

CrossEvalMatrix self_matrix(const std::vector<RunRecord>& runs, const std::string& dataset) {
  CrossEvalMatrix m;
  m.datasets = {dataset.empty() ? std::string("train") : dataset};
  for (const auto& r : runs) {
    m.models.push_back(r.name);
    m.cells.push_back({{r.dev, r.test}});
  }
  return m;
}

void print_run(const RunRecord& r) {
  std::cout << r.name << "  dev " << format_quadruple(r.dev) << "  test " << format_quadruple(r.test)
            << "  (selected step " << r.selected_step << ")\n";
}

int cmd_synth(const KeyValueConfig& kv_in) {
  KeyValueConfig kv = kv_in;
  const auto config = synthesis_config_from(kv);
  const fs::path out = resolve_output_path(kv.get_string("output.dir", "data/synthetic"));
  kv.set("output.dir", kv.get_string("output.dir", "data/synthetic"));
  kv.set("vocabulary_size", std::to_string(config.vocabulary_size));
  kv.set("train_count", std::to_string(config.train_count));
  kv.set("dev_count", std::to_string(config.dev_count));
  kv.set("test_count", std::to_string(config.test_count));
  kv.set("idiom_rate", format_fixed(config.idiom_rate, 6));
  kv.set("seed", std::to_string(config.seed));
  kv.set("span_class", config.span_class);
  for (std::size_t i = 0; i < config.phrases.size(); ++i) {
    const auto& p = config.phrases[i];
    const std::string key = "phrase." + std::to_string(i);
    auto join = [](const std::vector<std::string>& v) {
      std::string s;
      for (const auto& t : v) s += (s.empty() ? "" : " | ") + t;
      return s;
    };
    kv.set(key, p.surface);
    kv.set(key + ".figurative", join(p.figurative));
    kv.set(key + ".literal", join(p.literal));
  }
  const auto split = generate_synthetic_corpus(config);
  save_split_dir(out, split);
  write_file_atomic(out / "config.txt", kv.serialize());
  std::cout << "wrote " << split.train.size() << "/" << split.dev.size() << "/" << split.test.size()
            << " sentences to " << out.string() << "\n";
  return 0;
}

int cmd_train(const KeyValueConfig& kv) {
  auto config = ExperimentConfig::from(kv);
  if (config.output_dir.empty()) throw ConfigError("output.dir must be set for the train verb");
  const auto trained = train_model(config, load_training_data(config));
  const auto dir = resolve_output_path(config.output_dir) / trained.record.name;
  emit_reports(self_matrix({trained.record}, config.train_dataset), {trained.record}, dir);
  print_run(trained.record);
  return 0;
}

int cmd_ablate(const KeyValueConfig& kv) {
  auto config = ExperimentConfig::from(kv);
  if (config.output_dir.empty()) throw ConfigError("output.dir must be set for the ablate verb");
  const auto grid = kv.get_double_list("ablation.grid", default_lambda_grid());
  const auto result = ablate_lambda(config, grid);
  const auto base = config.run_name.empty() ? (config.train_dataset.empty() ? "run" : config.train_dataset) : config.run_name;
  const auto dir = resolve_output_path(config.output_dir) / (base + "_ablation");
  emit_reports(self_matrix(result.runs, config.train_dataset), result.runs, dir);

  auto resolved = config.store();
  std::string grid_text;
  for (double l : grid) grid_text += (grid_text.empty() ? "" : ",") + format_lambda(l);
  resolved.set("ablation.grid", grid_text);
  write_file_atomic(dir / "config.txt", resolved.serialize());
  const nlohmann::json best = {{"best_lambda_by_sa", result.best_by_sa}, {"best_lambda_by_f1", result.best_by_f1}};
  write_file_atomic(dir / "best.json", best.dump(2) + "\n");

  for (const auto& r : result.runs) print_run(r);
  std::cout << "best lambda by dev SA " << format_lambda(result.best_by_sa) << ", by dev F1 "
            << format_lambda(result.best_by_f1) << "\n";
  return 0;
}

int cmd_cross_eval(const KeyValueConfig& kv_in) {
  KeyValueConfig kv = kv_in;
  const auto models = model_paths(kv);
  std::vector<NamedDataset> datasets;
  for (const auto& [name, path] : kv.with_prefix("dataset.")) datasets.push_back({name, load_split_dir(path)});
  if (datasets.empty()) throw ConfigError("no dataset.<name> = <dir> entries configured");

  const auto matrix = cross_evaluate(models, datasets);
  std::vector<RunRecord> records;
  for (const auto& [name, path] : models) {
    const auto record_path = path.parent_path() / "record.json";
    if (fs::exists(record_path)) records.push_back(run_record_from_json(nlohmann::json::parse(read_file(record_path))));
  }
  kv.set("output.dir", kv.get_string("output.dir", "runs"));
  kv.set("output.run_name", kv.get_string("output.run_name", "cross_eval"));
  const auto dir = run_dir(kv, "cross_eval");
  emit_reports(matrix, records, dir);
  write_file_atomic(dir / "config.txt", kv.serialize());
  std::cout << render_quadruple_table(matrix, "test");
  std::vector<std::pair<std::string, CrossEvalSummary>> summaries;
  for (std::size_t r = 0; r < matrix.models.size(); ++r) summaries.emplace_back(matrix.models[r], matrix.summary(r));
  std::cout << "\n" << render_summary_table(summaries);
  return 0;
}

int cmd_evaluate(const KeyValueConfig& kv_in) {
  KeyValueConfig kv = kv_in;
  const fs::path checkpoint = kv.require_string("evaluate.checkpoint");
  const fs::path data = kv.require_string("evaluate.data");
  kv.set("evaluate.split", kv.get_string("evaluate.split", "test"));
  kv.set("output.dir", kv.get_string("output.dir", "runs"));
  kv.set("output.run_name", kv.get_string("output.run_name", "evaluate"));

  auto model = load_checkpoint(checkpoint);
  const auto sentences = load_split_or_file(data, kv.get_string("evaluate.split", "test"));
  check_tag_coverage(model.tags(), sentences, checkpoint.string(), data.string());
  std::vector<LabeledSentence> predicted;
  std::vector<std::vector<std::string>> pred_tags, gold_tags;
  for (const auto& s : sentences) {
    auto p = s;
    p.labels = model.predict(s);
    pred_tags.push_back(p.labels);
    gold_tags.push_back(s.labels);
    predicted.push_back(std::move(p));
  }
  const auto report = evaluate_tags(pred_tags, gold_tags);
  const auto dir = run_dir(kv, "evaluate");
  write_file_atomic(dir / "evaluation.json", to_json(report).dump(2) + "\n");
  save_sentences(dir / "predictions.conll", predicted);
  write_file_atomic(dir / "config.txt", kv.serialize());
  std::cout << "SA/F1/P/R " << format_quadruple(report) << " over " << report.sentences << " sentences\n";
  return 0;
}

int cmd_visualize(const KeyValueConfig& kv_in) {
  KeyValueConfig kv = kv_in;
  const auto models = model_paths(kv);
  const fs::path data = kv.require_string("visualize.data");
  const auto split = kv.get_string("visualize.split", "test");
  const auto method = projection_method_from(kv.get_string("visualize.method", "pca"));
  std::vector<std::string> kinds;
  for (const auto& k : detail::split(kv.get_string("visualize.kinds", "cls,word,span"), ',')) {
    const auto t = detail::trim(k);
    if (!t.empty()) kinds.emplace_back(t);
  }
  TsneParams tsne;
  tsne.perplexity = kv.get_double("tsne.perplexity", tsne.perplexity);
  tsne.iterations = static_cast<std::size_t>(kv.get_int("tsne.iterations", static_cast<long long>(tsne.iterations)));
  tsne.learning_rate = kv.get_double("tsne.learning_rate", tsne.learning_rate);
  tsne.seed = static_cast<std::uint64_t>(kv.get_int("tsne.seed", static_cast<long long>(tsne.seed)));

  kv.set("visualize.split", split);
  kv.set("visualize.method", to_string(method));
  kv.set("tsne.perplexity", format_fixed(tsne.perplexity, 6));
  kv.set("tsne.iterations", std::to_string(tsne.iterations));
  kv.set("tsne.learning_rate", format_fixed(tsne.learning_rate, 6));
  kv.set("tsne.seed", std::to_string(tsne.seed));
  kv.set("output.dir", kv.get_string("output.dir", "runs"));
  kv.set("output.run_name", kv.get_string("output.run_name", "visualize"));
  const auto dir = run_dir(kv, "visualize");

  const auto sentences = load_split_or_file(data, split);
  std::vector<std::pair<std::string, SpanTagger>> loaded;
  for (const auto& [name, path] : models) loaded.emplace_back(name, load_checkpoint(path));

  std::string kinds_text;
  for (const auto& kind_name : kinds) {
    const auto kind = embedding_kind_from(kind_name);
    kinds_text += (kinds_text.empty() ? "" : ",") + to_string(kind);
    std::vector<PlotPanel> panels;
    for (auto& [name, model] : loaded) {
      const double lambda = model.training_config().get_double("lambda_span", 0.0);
      const auto dump = extract_embeddings(model, sentences, kind, name, lambda);
      write_file_atomic(dir / (name + "_" + to_string(kind) + ".jsonl"), serialize_dump_jsonl(dump));
      panels.push_back({name + " lambda=" + format_lambda(lambda), project(dump, method, tsne), dump.meta});
    }
    const auto files = emit_plot(panels, dir / (to_string(kind) + "_" + to_string(method) + ".png"));
    std::cout << "wrote " << files.image.string() << "\n";
  }
  kv.set("visualize.kinds", kinds_text);
  write_file_atomic(dir / "config.txt", kv.serialize());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Span-level contrastive training and evaluation for idiom span detection"};
  app.require_subcommand(1);
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Suppress progress logging");

  struct Verb {
    const char* name;
    const char* help;
    int (*run)(const KeyValueConfig&);
  };
  const Verb verbs[] = {
      {"synth-data", "Generate a synthetic idiom corpus (train/dev/test)", cmd_synth},
      {"train", "Train one model with slot + lambda * span loss", cmd_train},
      {"ablate", "Train one model per lambda in ablation.grid", cmd_ablate},
      {"cross-eval", "Evaluate model.<name> checkpoints on every dataset.<name>", cmd_cross_eval},
      {"evaluate", "Score one checkpoint on one dataset split", cmd_evaluate},
      {"visualize", "Project cls/word/span embeddings and plot them", cmd_visualize},
  };
  std::vector<CommonOptions> options(std::size(verbs));
  std::vector<CLI::App*> subs;
  for (std::size_t i = 0; i < std::size(verbs); ++i) {
    subs.push_back(app.add_subcommand(verbs[i].name, verbs[i].help));
    add_common(subs.back(), options[i]);
  }

  CLI11_PARSE(app, argc, argv);
  log_quiet() = quiet;
  try {
    for (std::size_t i = 0; i < subs.size(); ++i) {
      if (subs[i]->parsed()) return verbs[i].run(load_config(options[i], subs[i]->remaining()));
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
