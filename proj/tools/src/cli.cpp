#include "hulm_cli/cli.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "hulm/checkpoint.hpp"
#include "hulm/corpus.hpp"
#include "hulm/error.hpp"
#include "hulm/eval.hpp"
#include "hulm/packer.hpp"
#include "hulm/report.hpp"
#include "hulm/synthetic.hpp"
#include "hulm/training.hpp"
#include "hulm_cli/run_config.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace hulm::cli {

namespace {

// Output directory with the resolved config and an append-only event log.
class RunDir {
 public:
  RunDir(fs::path root, const std::string& subcommand, const RunConfig& config) : root_(std::move(root)) {
    std::error_code ec;
    fs::create_directories(root_, ec);
    if (ec) throw RuntimeFailure("cannot create " + root_.string() + ": " + ec.message());
    json resolved = config.to_json();
    resolved["subcommand"] = subcommand;
    write_json("resolved_config.json", resolved);
    log_.open(root_ / "run_log.jsonl", std::ios::binary | std::ios::trunc);
    if (!log_) throw RuntimeFailure("cannot write " + (root_ / "run_log.jsonl").string());
    event({{"event", "start"}, {"subcommand", subcommand}});
  }

  const fs::path& root() const noexcept { return root_; }

  void event(const json& j) {
    log_ << j.dump() << '\n';
    log_.flush();
  }

  void write_json(const fs::path& rel, const json& j) const { write_text(rel, j.dump(2) + "\n"); }

  void write_text(const fs::path& rel, const std::string& text) const {
    const auto p = root_ / rel;
    std::error_code ec;
    fs::create_directories(p.parent_path(), ec);
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out << text;
    if (!out) throw RuntimeFailure("cannot write " + p.string());
  }

 private:
  fs::path root_;
  std::ofstream log_;
};

ModelConfig model_config(const RunConfig& c) {
  ModelConfig m;
  m.d_model = c.count("model.d_model");
  m.n_layers = c.count("model.n_layers");
  m.n_heads = c.count("model.n_heads");
  m.d_ff = c.count("model.d_ff");
  m.max_positions = c.count("model.max_positions");
  m.tied_head = c.flag("model.tied_head");
  m.seed = c.u64("run.seed");
  m.validate();
  return m;
}

Trainable trainable_of(const RunConfig& c) {
  const auto& v = c.str("train.trainable");
  if (v == "adapter") return Trainable::adapter_only;
  if (v == "full") return Trainable::full;
  throw ConfigError("invalid value '" + v + "' for train.trainable: expected adapter or full");
}

TrainConfig train_config(const RunConfig& c, std::uint64_t seed) {
  TrainConfig t;
  t.learning_rate = c.real("train.lr");
  t.batch_size = c.count("train.batch_size");
  t.batch_tokens = c.count("train.batch_tokens");
  t.max_epochs = c.count("train.epochs");
  t.early_stop_patience = c.count("train.patience");
  t.seed = seed;
  t.trainable = trainable_of(c);
  t.lora_rank = c.count("train.lora_rank");
  t.lora_alpha = c.real("train.lora_alpha");
  t.quantize_base = c.flag("train.quantize");
  t.quant_block = c.count("train.quant_block");
  t.threads = static_cast<unsigned>(c.count("run.threads"));
  t.validate();
  return t;
}

TaskSpec task_spec(const RunConfig& c) {
  TaskSpec t;
  t.name = c.str("task.name");
  const auto& level = c.str("task.level");
  if (level == "document") {
    t.level = TaskLevel::document_level;
  } else if (level == "person") {
    t.level = TaskLevel::person_level;
  } else {
    throw ConfigError("invalid value '" + level + "' for task.level: expected document or person");
  }
  const auto& obj = c.str("task.objective");
  if (obj == "classification") {
    t.objective = Objective::classification;
  } else if (obj == "regression") {
    t.objective = Objective::regression;
  } else {
    throw ConfigError("invalid value '" + obj + "' for task.objective: expected classification or regression");
  }
  t.n_classes = c.count("task.n_classes");
  if (t.objective == Objective::classification && t.n_classes < 2) {
    throw ConfigError("task.n_classes must be at least 2");
  }
  return t;
}

PackOptions pack_options(const RunConfig& c) { return PackOptions{c.flag("pack.bos")}; }

std::size_t max_len_or(const RunConfig& c, std::size_t fallback) {
  const auto v = c.count("pack.max_len");
  return v == 0 ? fallback : v;
}

TaskPackOptions task_pack(const RunConfig& c) {
  TaskPackOptions p;
  p.max_len = max_len_or(c, kTaskMaxLen);
  p.pack = pack_options(c);
  p.pool_separator = c.flag("pack.pool_separator");
  return p;
}

PretrainMode mode_of(const RunConfig& c) {
  const auto& m = c.str("pack.mode");
  if (m == "hulm") return PretrainMode::hulm;
  if (m == "standard") return PretrainMode::standard;
  throw ConfigError("invalid value '" + m + "' for pack.mode: expected hulm or standard");
}

FinetuneStyle style_of(const std::string& s) {
  if (s == "huft") return FinetuneStyle::huft;
  if (s == "tft") return FinetuneStyle::tft;
  throw ConfigError("invalid finetune style '" + s + "': expected huft or tft");
}

std::vector<AuthorStream> load_streams(const RunConfig& c, const std::string& key) {
  const auto p = c.path(key);
  if (!p) return {};
  return read_streams_jsonl(*p);
}

std::string streams_text(const std::vector<AuthorStream>& streams) {
  std::ostringstream out;
  write_streams_jsonl(out, streams);
  return out.str();
}

json epoch_event(const std::string& stage, const EpochLog& log) {
  json j = to_json(log);
  j["event"] = "epoch";
  j["stage"] = stage;
  return j;
}

// One JSON line per item: author, document (null at person level), label,
// prediction.
std::string predictions_text(const std::vector<TaskItem>& items, std::span<const AuthorStream> streams,
                             const std::vector<double>& preds) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    json j{{"author_id", streams[items[i].stream].author_id},
           {"document", items[i].document ? json(*items[i].document) : json(nullptr)},
           {"label", items[i].label},
           {"prediction", preds[i]}};
    out += j.dump() + "\n";
  }
  return out;
}

std::vector<double> labels_of(const std::vector<TaskItem>& items) {
  std::vector<double> y;
  for (const auto& it : items) y.push_back(it.label);
  return y;
}

std::optional<double> metric_or_null(const TaskSpec& task, const std::vector<double>& y, const std::vector<double>& p) {
  try {
    return task_metric(task, y, p);
  } catch (const DataError&) {
    return std::nullopt;
  }
}

json opt_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

// ---------------------------------------------------------------------------

void cmd_synth(const RunConfig& c, RunDir& dir) {
  SyntheticConfig s;
  s.seed = c.u64("run.seed");
  s.n_authors = c.count("synth.n_authors");
  s.docs_per_author = c.count("synth.docs_per_author");
  s.doc_len = c.count("synth.doc_len");
  s.style_strength = c.real("synth.style_strength");
  s.n_clusters = c.count("synth.n_clusters");
  s.language_seed = c.u64("synth.language_seed");
  s.cluster_scale = c.real("synth.cluster_scale");
  s.trait_scale = c.real("synth.trait_scale");
  s.shared_trait_axis = c.flag("synth.shared_trait_axis");
  const auto corpus = generate_synthetic_author_corpus(s);
  dir.write_text("corpus.jsonl", streams_text(corpus.streams));
  dir.write_text("person_trait.jsonl", streams_text(with_person_labels(corpus, PersonLabel::trait)));
  dir.write_text("person_cluster.jsonl", streams_text(with_person_labels(corpus, PersonLabel::cluster)));
  std::string authors;
  for (const auto& a : corpus.authors) {
    authors += json{{"author_id", a.author_id}, {"trait", a.trait}, {"cluster", a.cluster}}.dump() + "\n";
  }
  dir.write_text("authors.jsonl", authors);
  dir.event({{"event", "synth"}, {"authors", corpus.streams.size()}});
}

void cmd_build_corpus(const RunConfig& c, RunDir& dir) {
  const auto input = c.required_path("corpus.input");
  auto ingested = ingest(input);
  PipelineConfig p;
  p.ascii_threshold = c.real("corpus.ascii_threshold");
  p.stopword_threshold = c.real("corpus.stopword_threshold");
  p.toxic_max_hits = c.count("corpus.toxic_max_hits");
  p.replace_mentions = c.flag("corpus.replace_mentions");
  if (const auto lex = c.path("corpus.toxic_lexicon")) {
    std::ifstream in(*lex);
    if (!in) throw DataError("cannot open " + lex->string());
    std::string word;
    while (in >> word) p.toxic_lexicon.insert(word);
  }
  PipelineReport report;
  const auto streams = run_pipeline(std::move(ingested.documents), p, &report);
  dir.write_text("streams.jsonl", streams_text(streams));
  dir.write_json("stats.json", to_json(corpus_stats(streams)));
  const json r{{"input", report.input},
               {"rejected_lines", ingested.rejected_lines},
               {"after_drop_missing", report.after_drop_missing},
               {"after_dedupe", report.after_dedupe},
               {"after_english", report.after_english},
               {"after_toxic", report.after_toxic},
               {"toxicity_applied", report.toxicity_applied},
               {"replacements",
                {{"emails", report.replacements.emails},
                 {"phones", report.replacements.phones},
                 {"mentions", report.replacements.mentions}}}};
  dir.write_json("pipeline_report.json", r);
  dir.event({{"event", "pipeline"}, {"report", r}});
}

void cmd_pack(const RunConfig& c, RunDir& dir) {
  const auto streams = read_streams_jsonl(c.required_path("data.input"));
  PretrainOptions opt;
  opt.mode = mode_of(c);
  opt.pack = pack_options(c);
  opt.author_max_len = max_len_or(c, kAuthorMaxLen);
  opt.independent_max_len = max_len_or(c, kIndependentMaxLen);
  const auto packed = pack_for_pretraining(streams, opt, c.u64("run.seed"));
  std::ostringstream text, binary;
  write_packed_jsonl(text, packed);
  write_packed_binary(binary, packed);
  dir.write_text("packed.jsonl", text.str());
  dir.write_text("packed.bin", binary.str());
  std::size_t tokens = 0;
  for (const auto& p : packed) tokens += p.size();
  dir.event({{"event", "pack"}, {"instances", packed.size()}, {"tokens", tokens}});
}

Checkpoint initial_checkpoint(const RunConfig& c) {
  if (const auto p = c.path("model.checkpoint")) return load_checkpoint(*p);
  return Checkpoint{init_parameters(model_config(c)), std::nullopt, {}};
}

void cmd_pretrain(const RunConfig& c, RunDir& dir) {
  const auto train = read_streams_jsonl(c.required_path("data.train"));
  const auto dev = load_streams(c, "data.dev");
  PretrainOptions opt;
  opt.mode = mode_of(c);
  opt.pack = pack_options(c);
  opt.author_max_len = max_len_or(c, kAuthorMaxLen);
  opt.independent_max_len = max_len_or(c, kIndependentMaxLen);
  opt.merge_adapter = c.flag("train.merge_adapter");
  const auto tc = train_config(c, c.u64("run.seed"));
  const auto result = pretrain(initial_checkpoint(c), train, dev, opt, tc);
  for (const auto& l : result.log) dir.event(epoch_event("pretrain", l));
  save_checkpoint(dir.root() / "checkpoint.bin", result.checkpoint);
  dir.write_json("metrics.json", {{"initial_dev_loss", result.initial_dev_loss},
                                  {"best_dev_loss", result.best_dev_loss},
                                  {"best_dev_perplexity", std::exp(result.best_dev_loss)},
                                  {"epochs", result.log.size()}});
}

void cmd_finetune(const RunConfig& c, RunDir& dir) {
  const auto checkpoint = load_checkpoint(c.required_path("model.checkpoint"));
  const auto train = read_streams_jsonl(c.required_path("data.train"));
  const auto dev = load_streams(c, "data.dev");
  const auto test = load_streams(c, "data.test");
  const auto task = task_spec(c);
  const auto pack = task_pack(c);
  const auto styles = c.list("finetune.styles");
  std::vector<std::uint64_t> seeds;
  for (const auto& s : c.list("finetune.seeds")) {
    RunConfig one({{"finetune.seed", s}});
    seeds.push_back(one.u64("finetune.seed"));
  }
  if (styles.empty() || seeds.empty()) throw ConfigError("finetune.styles and finetune.seeds must not be empty");
  for (const auto& s : styles) style_of(s);
  const auto test_items = test.empty() ? std::vector<TaskItem>{} : task_items(task, test);
  const auto test_labels = labels_of(test_items);

  json sweep = json::array();
  std::map<std::string, std::vector<double>> per_style_metric;
  for (const auto& style_name : styles) {
    const auto style = style_of(style_name);
    for (const auto seed : seeds) {
      const std::string member = style_name + "-seed" + std::to_string(seed);
      const auto tc = train_config(c, seed);
      const auto result = finetune(checkpoint, task, train, dev, style, pack, tc);
      for (const auto& l : result.log) {
        auto e = epoch_event("finetune", l);
        e["member"] = member;
        dir.event(e);
      }
      fs::create_directories(dir.root() / member);
      save_checkpoint(dir.root() / member / "checkpoint.bin", result.checkpoint);
      save_task_head(dir.root() / member / "head.bin", result.head, task);
      json entry{{"member", member}, {"style", style_name}, {"seed", seed}, {"epochs", result.log.size()}};
      if (!test.empty()) {
        const auto preds = predict_task(result.checkpoint, result.head, task, test, style, pack);
        dir.write_text(fs::path(member) / "predictions.jsonl", predictions_text(test_items, test, preds));
        const auto m = metric_or_null(task, test_labels, preds);
        entry["test_metric"] = opt_json(m);
        if (m) per_style_metric[style_name].push_back(*m);
      }
      sweep.push_back(entry);
    }
  }
  dir.write_json("sweep.json", sweep);

  // Per-seed test metrics of every style against the first style.
  if (per_style_metric.size() > 1 && seeds.size() > 1) {
    const std::string metric = task.objective == Objective::regression ? "pearson_r" : "weighted_f1";
    std::vector<TaskResult> results;
    for (const auto& s : styles) {
      const auto& v = per_style_metric[s];
      if (v.size() != seeds.size()) continue;
      double mean = 0.0;
      for (double x : v) mean += x;
      results.push_back({task.name, s, metric, mean / static_cast<double>(v.size()), v});
    }
    std::vector<ComparisonRequest> req;
    for (std::size_t i = 1; i < results.size(); ++i) {
      req.push_back({task.name, results[i].variant, results[0].variant, SignificanceTest::paired_t});
    }
    const auto reports = build_report(results, req);
    dir.write_json("report.json", to_json(reports));
    dir.write_text("report.txt", format_table(reports));
  }
}

void cmd_probe(const RunConfig& c, RunDir& dir) {
  const auto checkpoint = load_checkpoint(c.required_path("model.checkpoint"));
  const auto train = read_streams_jsonl(c.required_path("data.train"));
  const auto dev = load_streams(c, "data.dev");
  const auto test = load_streams(c, "data.test");
  const auto task = task_spec(c);
  const auto pack = task_pack(c);
  const bool history = c.flag("probe.include_history");
  const auto tc = train_config(c, c.u64("run.seed"));
  const auto result = linear_probe(checkpoint, task, train, dev, history, pack, tc);
  for (const auto& l : result.log) dir.event(epoch_event("probe", l));
  save_task_head(dir.root() / "head.bin", result.head, task);
  json metrics{{"epochs", result.log.size()}};
  if (!test.empty()) {
    const auto items = task_items(task, test);
    const auto preds = predict_probe(checkpoint, result.head, task, test, history, pack);
    dir.write_text("predictions.jsonl", predictions_text(items, test, preds));
    metrics["test_metric"] = opt_json(metric_or_null(task, labels_of(items), preds));
  }
  dir.write_json("metrics.json", metrics);
}

struct PredictionFile {
  std::vector<double> labels;  // empty when the file carries none
  std::vector<double> predictions;
};

PredictionFile read_predictions(const fs::path& path, bool need_prediction) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  PredictionFile f;
  std::string line;
  std::size_t line_no = 0;
  bool all_labelled = true;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = json::parse(line);
      if (need_prediction) f.predictions.push_back(j.at("prediction").get<double>());
      if (j.contains("label") && j["label"].is_number()) {
        f.labels.push_back(j["label"].get<double>());
      } else {
        all_labelled = false;
      }
    } catch (const json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (!all_labelled) f.labels.clear();
  return f;
}

void cmd_evaluate(const RunConfig& c, RunDir& dir) {
  TaskSpec task = task_spec(c);
  const auto entries = c.list("evaluate.predictions");
  if (entries.empty()) throw ConfigError("evaluate needs at least one --predictions NAME=PATH");
  std::optional<std::vector<double>> labels;
  if (const auto lp = c.path("evaluate.labels")) {
    labels = read_predictions(*lp, false).labels;
    if (labels->empty()) throw DataError("no labels in " + lp->string());
  }
  const auto& test_name = c.str("evaluate.test");
  SignificanceTest test;
  if (test_name == "permutation") {
    test = SignificanceTest::permutation;
  } else if (test_name == "paired_t") {
    test = SignificanceTest::paired_t;
  } else {
    throw ConfigError("invalid value '" + test_name + "' for evaluate.test: expected permutation or paired_t");
  }

  const bool classification = task.objective == Objective::classification;
  std::vector<TaskResult> results;
  for (const auto& e : entries) {
    const auto eq = e.find('=');
    const std::string name = eq == std::string::npos ? fs::path(e).stem().string() : e.substr(0, eq);
    const fs::path path = eq == std::string::npos ? fs::path(e) : fs::path(e.substr(eq + 1));
    auto f = read_predictions(path, true);
    const auto& y = labels ? *labels : f.labels;
    if (y.empty()) throw DataError("no labels for " + name + ": pass --labels or label every prediction");
    if (y.size() != f.predictions.size()) {
      throw DataError(name + ": " + std::to_string(f.predictions.size()) + " predictions for " +
                      std::to_string(y.size()) + " labels");
    }
    results.push_back({task.name, name, classification ? "weighted_f1" : "pearson_r",
                       task_metric(task, y, f.predictions), item_scores(y, f.predictions, classification)});
  }
  std::vector<ComparisonRequest> req;
  const auto& baseline = c.str("evaluate.baseline");
  if (!baseline.empty()) {
    for (const auto& r : results) {
      if (r.variant != baseline) req.push_back({task.name, r.variant, baseline, test});
    }
  }
  const auto reports = build_report(results, req, c.count("evaluate.permutations"), c.u64("run.seed"));
  const auto table = format_table(reports, c.real("evaluate.alpha"));
  dir.write_json("report.json", to_json(reports));
  dir.write_text("report.txt", table);
  dir.event({{"event", "evaluate"}, {"variants", results.size()}});
}

// ---------------------------------------------------------------------------

struct FlagSpec {
  std::string name;  // without leading dashes
  std::string key;
  std::string help;
};

const std::vector<FlagSpec>& shared_flags() {
  static const std::vector<FlagSpec> f{
      {"seed", "run.seed", "random seed"},
      {"threads", "run.threads", "worker threads"},
  };
  return f;
}

const std::vector<FlagSpec> kModelFlags{
    {"checkpoint", "model.checkpoint", "checkpoint file"},
    {"d-model", "model.d_model", "hidden size of a fresh model"},
    {"n-layers", "model.n_layers", "layers of a fresh model"},
    {"n-heads", "model.n_heads", "attention heads of a fresh model"},
    {"d-ff", "model.d_ff", "feed-forward size of a fresh model"},
    {"max-positions", "model.max_positions", "position table size of a fresh model"},
};

const std::vector<FlagSpec> kTrainFlags{
    {"lr", "train.lr", "learning rate"},
    {"epochs", "train.epochs", "maximum epochs"},
    {"patience", "train.patience", "early-stopping patience"},
    {"batch-size", "train.batch_size", "instances per step"},
    {"batch-tokens", "train.batch_tokens", "tokens per step (overrides batch size when > 0)"},
    {"trainable", "train.trainable", "adapter|full"},
    {"lora-rank", "train.lora_rank", "LoRA rank"},
    {"lora-alpha", "train.lora_alpha", "LoRA alpha"},
    {"quantize", "train.quantize", "4-bit base weights: on|off"},
};

const std::vector<FlagSpec> kTaskFlags{
    {"task", "task.name", "task name"},
    {"level", "task.level", "document|person"},
    {"objective", "task.objective", "classification|regression"},
    {"n-classes", "task.n_classes", "number of classes"},
};

const std::vector<FlagSpec> kDataFlags{
    {"train", "data.train", "training streams (JSONL)"},
    {"dev", "data.dev", "dev streams (JSONL)"},
    {"test", "data.test", "test streams (JSONL)"},
};

const std::vector<FlagSpec> kPackFlags{
    {"max-len", "pack.max_len", "window length (0: mode default)"},
    {"bos", "pack.bos", "prepend BOS: on|off"},
};

template <typename... Lists>
std::vector<FlagSpec> join(const Lists&... lists) {
  std::vector<FlagSpec> out;
  (out.insert(out.end(), lists.begin(), lists.end()), ...);
  return out;
}

struct Subcommand {
  std::string name;
  std::string help;
  std::vector<FlagSpec> flags;
  std::function<void(const RunConfig&, RunDir&)> body;
};

std::vector<Subcommand> subcommands() {
  return {
      {"synth", "generate a labelled synthetic author corpus",
       {{"n-authors", "synth.n_authors", "authors"},
        {"docs-per-author", "synth.docs_per_author", "documents per author"},
        {"doc-len", "synth.doc_len", "mean bytes per document"},
        {"style-strength", "synth.style_strength", "style strength in [0, 1]"},
        {"n-clusters", "synth.n_clusters", "style clusters"},
        {"language-seed", "synth.language_seed", "seed of the shared language"}},
       cmd_synth},
      {"build-corpus", "clean a raw JSONL corpus into author streams",
       {{"input", "corpus.input", "raw JSONL corpus"},
        {"toxic-lexicon", "corpus.toxic_lexicon", "whitespace-separated lexicon file"},
        {"ascii-threshold", "corpus.ascii_threshold", "minimum ASCII fraction"},
        {"stopword-threshold", "corpus.stopword_threshold", "minimum stopword fraction"}},
       cmd_build_corpus},
      {"pack", "pack author streams into training instances",
       join(std::vector<FlagSpec>{{"input", "data.input", "author streams (JSONL)"},
                                  {"mode", "pack.mode", "hulm|standard"}},
            kPackFlags),
       cmd_pack},
      {"pretrain", "continued language-model pre-training",
       join(kModelFlags, std::vector<FlagSpec>{{"train", "data.train", "training streams (JSONL)"},
                                               {"dev", "data.dev", "dev streams (JSONL)"},
                                               {"mode", "pack.mode", "hulm|standard"},
                                               {"merge-adapter", "train.merge_adapter", "merge the adapter: on|off"}},
            kPackFlags, kTrainFlags),
       cmd_pretrain},
      {"finetune", "fine-tune adapter and task head (sweeps styles x seeds)",
       join(std::vector<FlagSpec>{{"checkpoint", "model.checkpoint", "checkpoint file"},
                                  {"style", "finetune.styles", "comma list of huft|tft"},
                                  {"seeds", "finetune.seeds", "comma list of seeds"},
                                  {"pool-separator", "pack.pool_separator", "pool the EOS after the target: on|off"}},
            kDataFlags, kTaskFlags, kPackFlags, kTrainFlags),
       cmd_finetune},
      {"probe", "train a linear head on frozen features",
       join(std::vector<FlagSpec>{{"checkpoint", "model.checkpoint", "checkpoint file"},
                                  {"include-history", "probe.include_history", "on|off"}},
            kDataFlags, kTaskFlags, kPackFlags,
            std::vector<FlagSpec>{{"lr", "train.lr", "learning rate"},
                                  {"epochs", "train.epochs", "maximum epochs"},
                                  {"patience", "train.patience", "early-stopping patience"},
                                  {"batch-size", "train.batch_size", "items per step"}}),
       cmd_probe},
      {"evaluate", "score prediction files and test them against a baseline",
       join(std::vector<FlagSpec>{{"predictions", "evaluate.predictions", "comma list of NAME=PATH"},
                                  {"labels", "evaluate.labels", "JSONL with a label per line"},
                                  {"baseline", "evaluate.baseline", "variant compared against"},
                                  {"significance", "evaluate.test", "permutation|paired_t"},
                                  {"permutations", "evaluate.permutations", "sampled permutations"}},
            kTaskFlags),
       cmd_evaluate},
  };
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Human language modeling toolkit", "hulm"};
  app.require_subcommand(1);
  app.fallthrough(false);

  struct Bound {
    std::map<std::string, std::string> values;  // flag name -> value
    std::vector<std::string> sets;
    std::string config;
    std::string out;
  };
  const auto subs = subcommands();
  std::map<std::string, Bound> bound;
  std::map<std::string, std::vector<std::pair<CLI::Option*, std::string>>> options;

  for (const auto& s : subs) {
    auto* sub = app.add_subcommand(s.name, s.help);
    auto& b = bound[s.name];
    sub->add_option("--config", b.config, "INI or JSON config file");
    sub->add_option("--out", b.out, "output directory")->required();
    sub->add_option("--set", b.sets, "override any key: section.key=value");
    for (const auto& f : join(shared_flags(), s.flags)) {
      auto* opt = sub->add_option("--" + f.name, b.values[f.name], f.help);
      options[s.name].emplace_back(opt, f.key);
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    err << app.help();
    return kExitUsage;
  }

  const Subcommand* chosen = nullptr;
  for (const auto& s : subs) {
    if (app.got_subcommand(s.name)) chosen = &s;
  }
  auto& b = bound[chosen->name];

  try {
    std::map<std::string, std::string> flags;
    for (const auto& set : b.sets) {
      const auto eq = set.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects section.key=value, got '" + set + "'");
      flags[set.substr(0, eq)] = set.substr(eq + 1);
    }
    for (const auto& [opt, key] : options[chosen->name]) {
      if (opt->count() > 0) flags[key] = opt->as<std::string>();
    }
    const auto config = resolve_config(chosen->name, b.config.empty() ? std::nullopt : std::optional<fs::path>(b.config),
                                       flags);
    RunDir dir(b.out, chosen->name, config);
    const auto t0 = std::chrono::steady_clock::now();
    chosen->body(config, dir);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    dir.event({{"event", "done"}});
    out << chosen->name << ": done in " << secs << " s, outputs in " << b.out << "\n";
    if (chosen->name == "evaluate") {
      std::ifstream table(fs::path(b.out) / "report.txt");
      out << table.rdbuf();
    }
    return kExitOk;
  } catch (const ConfigError& e) {
    err << "hulm " << chosen->name << ": " << e.what() << "\n";
    return kExitUsage;
  } catch (const DataError& e) {
    err << "hulm " << chosen->name << ": " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    err << "hulm " << chosen->name << ": " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace hulm::cli
