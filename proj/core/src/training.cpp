#include "hulm/training.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <random>
#include <stdexcept>

#include "hulm/error.hpp"
#include "hulm/eval.hpp"
#include "hulm/optim.hpp"
#include "hulm/quantize.hpp"
#include "parallel.hpp"

namespace hulm {

namespace {

const char* trainable_name(Trainable t) {
  switch (t) {
    case Trainable::adapter_only:
      return "adapter_only";
    case Trainable::full:
      return "full";
    case Trainable::head_only:
      return "head_only";
  }
  return "adapter_only";
}

// Groups indices of `order` into optimizer steps.
std::vector<std::vector<std::size_t>> make_batches(const std::vector<std::size_t>& order,
                                                   const std::vector<std::size_t>& sizes, const TrainConfig& config) {
  std::vector<std::vector<std::size_t>> batches;
  std::vector<std::size_t> current;
  std::size_t tokens = 0;
  for (auto idx : order) {
    if (config.batch_tokens > 0) {
      if (!current.empty() && tokens + sizes[idx] > config.batch_tokens) {
        batches.push_back(std::move(current));
        current.clear();
        tokens = 0;
      }
      current.push_back(idx);
      tokens += sizes[idx];
    } else {
      current.push_back(idx);
      if (current.size() == config.batch_size) {
        batches.push_back(std::move(current));
        current.clear();
      }
    }
  }
  if (!current.empty()) batches.push_back(std::move(current));
  return batches;
}

std::size_t counted_positions(const PackedInstance& inst) {
  std::size_t n = 0;
  for (std::size_t i = 0; i + 1 < inst.tokens.size(); ++i) {
    if (inst.loss_mask[i] && inst.tokens[i + 1] != kPad) ++n;
  }
  return n;
}

void collect_trainable(LmParameters& params, std::optional<LoraAdapter>& adapter, Gradients& grads,
                       std::vector<std::pair<Matrix*, const Matrix*>>& out) {
  if (grads.base) {
    auto p = params.named_tensors();
    auto g = grads.base->named_tensors();
    for (std::size_t i = 0; i < p.size(); ++i) out.emplace_back(p[i].second, g[i].second);
  }
  if (grads.adapter && adapter) {
    auto p = adapter->named_tensors();
    auto g = grads.adapter->named_tensors();
    for (std::size_t i = 0; i < p.size(); ++i) out.emplace_back(p[i].second, g[i].second);
  }
}

}  // namespace

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be positive");
  if (batch_size == 0) throw ConfigError("batch_size must be at least 1");
  if (max_epochs == 0) throw ConfigError("max_epochs must be at least 1");
  if (early_stop_patience == 0) throw ConfigError("early_stop_patience must be at least 1");
  if (lora_rank == 0) throw ConfigError("lora_rank must be at least 1");
  if (!(lora_alpha > 0.0)) throw ConfigError("lora_alpha must be positive");
  if (quant_block == 0) throw ConfigError("quant_block must be at least 1");
  if (threads == 0) throw ConfigError("threads must be at least 1");
  if (quantize_base && trainable == Trainable::full) throw ConfigError("a quantized base cannot be trained in full");
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate}, {"batch_size", c.batch_size},
          {"batch_tokens", c.batch_tokens},   {"max_epochs", c.max_epochs},
          {"early_stop_patience", c.early_stop_patience}, {"seed", c.seed},
          {"trainable", trainable_name(c.trainable)},    {"lora_rank", c.lora_rank},
          {"lora_alpha", c.lora_alpha},       {"quantize_base", c.quantize_base},
          {"quant_block", c.quant_block},     {"threads", c.threads}};
}

nlohmann::json to_json(const EpochLog& log) {
  nlohmann::json j{{"epoch", log.epoch}, {"train_loss", log.train_loss}, {"dev_loss", log.dev_loss}};
  j["dev_metric"] = log.dev_metric ? nlohmann::json(*log.dev_metric) : nlohmann::json(nullptr);
  return j;
}

bool EarlyStopping::update(double dev_loss) {
  if (!seen_ || dev_loss < best_) {
    seen_ = true;
    best_ = dev_loss;
    bad_evals_ = 0;
    return true;
  }
  ++bad_evals_;
  return false;
}

std::vector<std::size_t> seeded_permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  std::mt19937_64 rng(seed);
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(perm[i - 1], perm[j]);
  }
  return perm;
}

// ---------------------------------------------------------------------------

std::vector<PackedInstance> pack_for_pretraining(std::span<const AuthorStream> streams, const PretrainOptions& options,
                                                 std::uint64_t seed) {
  std::vector<PackedInstance> out;
  if (options.mode == PretrainMode::hulm) {
    for (const auto& s : streams) {
      auto packed = pack_author(s, options.author_max_len, options.pack);
      for (auto& p : packed) out.push_back(std::move(p));
    }
    return out;
  }
  std::vector<CleanDocument> docs;
  for (const auto& s : streams) docs.insert(docs.end(), s.documents.begin(), s.documents.end());
  auto packed = pack_independent(docs, options.independent_max_len, options.pack);
  for (auto idx : seeded_permutation(packed.size(), seed)) out.push_back(std::move(packed[idx]));
  return out;
}

NllSum evaluate_nll(const LmParameters& params, const LoraAdapter* adapter, std::span<const PackedInstance> instances,
                    unsigned threads) {
  std::vector<NllSum> partial(detail::chunk_count(instances.size(), threads));
  detail::run_chunks(instances.size(), threads, [&](std::size_t c, std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const auto& inst = instances[i];
      const auto result = forward(params, adapter, inst.tokens, true);
      const auto s = nll_sum(result.logits, inst.tokens, inst.loss_mask);
      partial[c].sum += s.sum;
      partial[c].count += s.count;
    }
  });
  NllSum total;
  for (const auto& p : partial) {
    total.sum += p.sum;
    total.count += p.count;
  }
  return total;
}

LmTrainResult train_language_model(const LmParameters& params, std::optional<LoraAdapter> adapter,
                                   std::span<const PackedInstance> train, std::span<const PackedInstance> dev,
                                   const TrainConfig& config) {
  config.validate();
  if (train.empty()) throw DataError("empty training corpus");
  if (config.trainable == Trainable::adapter_only && !adapter) {
    throw ConfigError("adapter-only training needs an adapter");
  }
  if (adapter) check_adapter_shapes(params.config, *adapter);

  LmTrainResult result;
  result.params = params;
  result.adapter = adapter;
  LmParameters& P = result.params;
  std::optional<LoraAdapter>& A = result.adapter;

  std::vector<std::size_t> sizes(train.size());
  std::vector<std::size_t> counts(train.size());
  for (std::size_t i = 0; i < train.size(); ++i) {
    sizes[i] = train[i].size();
    counts[i] = counted_positions(train[i]);
  }

  // Without a dev split the training loss drives early stopping.
  auto dev_loss_of = [&]() {
    const auto s = evaluate_nll(P, A ? &*A : nullptr, dev.empty() ? train : dev, config.threads);
    if (s.count == 0) throw DataError("empty loss support");
    return s.mean();
  };

  result.initial_dev_loss = dev_loss_of();

  EarlyStopping stopper(config.early_stop_patience);
  stopper.update(result.initial_dev_loss);
  LmParameters best_params = P;
  std::optional<LoraAdapter> best_adapter = A;

  Adam adam(AdamConfig{config.learning_rate});
  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    const auto order = seeded_permutation(train.size(), config.seed + epoch);
    NllSum epoch_sum;
    for (const auto& batch : make_batches(order, sizes, config)) {
      std::size_t batch_count = 0;
      for (auto idx : batch) batch_count += counts[idx];
      if (batch_count == 0) continue;
      const double scale = 1.0 / static_cast<double>(batch_count);
      const LoraAdapter* aptr = A ? &*A : nullptr;
      const std::size_t chunks = detail::chunk_count(batch.size(), config.threads);
      std::vector<Gradients> partial;
      for (std::size_t c = 0; c < chunks; ++c) partial.push_back(zero_gradients(P, aptr, config.trainable));
      std::vector<NllSum> sums(chunks);
      detail::run_chunks(batch.size(), config.threads, [&](std::size_t c, std::size_t begin, std::size_t end) {
        for (std::size_t b = begin; b < end; ++b) {
          const auto& inst = train[batch[b]];
          const auto s = accumulate_nll_gradients(P, aptr, inst.tokens, inst.loss_mask, scale, partial[c]);
          sums[c].sum += s.sum;
          sums[c].count += s.count;
        }
      });
      for (std::size_t c = 1; c < chunks; ++c) partial[0].add(partial[c]);
      for (const auto& s : sums) {
        epoch_sum.sum += s.sum;
        epoch_sum.count += s.count;
      }
      std::vector<std::pair<Matrix*, const Matrix*>> step;
      collect_trainable(P, A, partial[0], step);
      if (!step.empty()) adam.step(step);
    }
    EpochLog log;
    log.epoch = epoch;
    log.train_loss = epoch_sum.mean();
    log.dev_loss = dev_loss_of();
    result.log.push_back(log);
    if (stopper.update(log.dev_loss)) {
      best_params = P;
      best_adapter = A;
    }
    if (stopper.stop()) break;
  }
  result.best_dev_loss = stopper.best();
  result.params = std::move(best_params);
  result.adapter = std::move(best_adapter);
  return result;
}

PretrainResult pretrain(const Checkpoint& init, std::span<const AuthorStream> train, std::span<const AuthorStream> dev,
                        const PretrainOptions& options, const TrainConfig& config) {
  config.validate();
  const auto train_packed = pack_for_pretraining(train, options, config.seed);
  if (train_packed.empty()) throw DataError("empty training corpus");
  const auto dev_packed = pack_for_pretraining(dev, options, config.seed + 1);

  LmParameters base = config.quantize_base ? quantize_frozen_weights(init.params, config.quant_block) : init.params;
  std::optional<LoraAdapter> adapter = init.adapter;
  if (!adapter && config.trainable == Trainable::adapter_only) {
    adapter = init_lora(base.config, config.lora_rank, config.lora_alpha, config.seed);
  }
  auto trained = train_language_model(base, adapter, train_packed, dev_packed, config);

  PretrainResult out;
  out.log = trained.log;
  out.initial_dev_loss = trained.initial_dev_loss;
  out.best_dev_loss = trained.best_dev_loss;
  if (options.merge_adapter && trained.adapter) {
    out.checkpoint.params = lora_merge(trained.params, *trained.adapter);
  } else {
    out.checkpoint.params = std::move(trained.params);
    out.checkpoint.adapter = std::move(trained.adapter);
  }
  nlohmann::json log = nlohmann::json::array();
  for (const auto& l : out.log) log.push_back(to_json(l));
  out.checkpoint.metadata = {{"stage", "pretrain"},
                             {"mode", options.mode == PretrainMode::hulm ? "hulm" : "standard"},
                             {"train", to_json(config)},
                             {"quantized_base", config.quantize_base},
                             {"merged_adapter", options.merge_adapter},
                             {"initial_dev_loss", out.initial_dev_loss},
                             {"best_dev_loss", out.best_dev_loss},
                             {"log", log}};
  return out;
}

// ---------------------------------------------------------------------------

namespace {

double label_value(const Label& label, const TaskSpec& task) {
  double v = 0.0;
  if (const auto* s = std::get_if<std::string>(&label)) {
    const char* first = s->data();
    const char* last = s->data() + s->size();
    auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec != std::errc() || ptr != last) throw DataError("label does not fit the task objective: \"" + *s + "\"");
  } else {
    v = std::get<double>(label);
  }
  if (!std::isfinite(v)) throw DataError("label must be finite");
  if (task.objective == Objective::classification) {
    if (v != std::floor(v) || v < 0 || v >= static_cast<double>(task.n_classes)) {
      throw DataError("label does not fit the task objective: class id out of range");
    }
  }
  return v;
}

enum class UnitLayout { history, per_document, pooled_documents };

struct Segment {
  std::vector<TokenId> tokens;
  std::vector<std::size_t> positions;
};

struct Unit {
  std::vector<Segment> segments;
  PoolingMode mode = PoolingMode::last;
  double label = 0.0;
  std::size_t item = 0;
};

Segment make_segment(const PackedInstance& inst, PoolMode mode, bool separator) {
  Segment s;
  s.tokens = inst.tokens;
  s.positions = locate_pool_positions(inst, mode, separator);
  if (s.positions.empty()) throw DataError("pooling over an empty position set");
  return s;
}

void append_units(const TaskSpec& task, const AuthorStream& stream, const TaskItem& item, std::size_t item_index,
                  UnitLayout layout, const TaskPackOptions& pack, std::vector<Unit>& out) {
  if (task.level == TaskLevel::document_level) {
    Unit u;
    u.mode = PoolingMode::last;
    u.label = item.label;
    u.item = item_index;
    const auto inst = pack_for_task(stream, item.document, pack.max_len, layout == UnitLayout::history, pack.pack);
    u.segments.push_back(make_segment(inst, PoolMode::target_last_token, pack.pool_separator));
    out.push_back(std::move(u));
    return;
  }
  if (layout == UnitLayout::history) {
    Unit u;
    u.mode = PoolingMode::mean;
    u.label = item.label;
    u.item = item_index;
    const auto inst = pack_for_task(stream, std::nullopt, pack.max_len, true, pack.pack);
    u.segments.push_back(make_segment(inst, PoolMode::author_mean, pack.pool_separator));
    out.push_back(std::move(u));
    return;
  }
  Unit pooled;
  pooled.mode = PoolingMode::mean;
  pooled.label = item.label;
  pooled.item = item_index;
  std::size_t added = 0;
  for (std::size_t t = 0; t < stream.documents.size(); ++t) {
    if (stream.documents[t].normalized_text.empty()) continue;
    const auto inst = pack_for_task(stream, t, pack.max_len, false, pack.pack);
    auto seg = make_segment(inst, PoolMode::author_mean, pack.pool_separator);
    ++added;
    if (layout == UnitLayout::per_document) {
      Unit u;
      u.mode = PoolingMode::mean;
      u.label = item.label;
      u.item = item_index;
      u.segments.push_back(std::move(seg));
      out.push_back(std::move(u));
    } else {
      pooled.segments.push_back(std::move(seg));
    }
  }
  if (added == 0) throw DataError("author " + stream.author_id + " has no non-empty documents");
  if (layout == UnitLayout::pooled_documents) out.push_back(std::move(pooled));
}

std::vector<Unit> build_units(const TaskSpec& task, std::span<const AuthorStream> streams,
                              const std::vector<TaskItem>& items, UnitLayout layout, const TaskPackOptions& pack) {
  std::vector<Unit> units;
  for (std::size_t i = 0; i < items.size(); ++i) {
    append_units(task, streams[items[i].stream], items[i], i, layout, pack, units);
  }
  return units;
}

std::size_t total_positions(const Unit& u) {
  std::size_t n = 0;
  for (const auto& s : u.segments) n += s.positions.size();
  return n;
}

RowVector unit_features(const LmParameters& params, const LoraAdapter* adapter, const Unit& unit) {
  RowVector acc = RowVector::Zero(static_cast<Eigen::Index>(params.config.d_model));
  for (const auto& seg : unit.segments) {
    const auto result = forward(params, adapter, seg.tokens, false);
    for (auto p : seg.positions) acc += result.hidden.row(static_cast<Eigen::Index>(p));
  }
  return acc / static_cast<double>(total_positions(unit));
}

struct HeadGrad {
  Matrix weight;
  Matrix bias;
};

// Task loss of one pooled representation; returns d loss / d raw output.
double head_loss(const TaskHead& head, const RowVector& raw, double label, RowVector& draw) {
  if (head.objective == Objective::classification) {
    const double m = raw.maxCoeff();
    const RowVector e = (raw.array() - m).exp();
    const double z = e.sum();
    const auto y = static_cast<Eigen::Index>(label);
    draw = e / z;
    draw(y) -= 1.0;
    return std::log(z) + m - raw(y);
  }
  const double target = (label - head.label_mean) / head.label_std;
  const double diff = raw(0) - target;
  draw = RowVector::Constant(1, 2.0 * diff);
  return diff * diff;
}

double unit_loss(const TaskHead& head, const RowVector& features, double label) {
  RowVector draw;
  return head_loss(head, head.raw_output(features), label, draw);
}

// Forward + backward of one unit; gradients scaled by `scale`.
double accumulate_unit(const LmParameters& params, const LoraAdapter* adapter, const TaskHead& head, const Unit& unit,
                       double scale, Gradients& grads, HeadGrad& hg) {
  std::vector<ForwardCache> caches;
  RowVector pooled = RowVector::Zero(static_cast<Eigen::Index>(params.config.d_model));
  const double denom = static_cast<double>(total_positions(unit));
  for (const auto& seg : unit.segments) {
    caches.push_back(forward_cached(params, adapter, seg.tokens, false));
    for (auto p : seg.positions) pooled += caches.back().hidden.row(static_cast<Eigen::Index>(p));
  }
  pooled /= denom;
  RowVector draw;
  const double loss = head_loss(head, head.raw_output(pooled), unit.label, draw);
  draw *= scale;
  hg.weight.noalias() += draw.transpose() * pooled;
  hg.bias += draw;
  if (!grads.base && !grads.adapter) return loss;
  const RowVector dpooled = draw * head.weight / denom;
  for (std::size_t s = 0; s < unit.segments.size(); ++s) {
    const auto& seg = unit.segments[s];
    Matrix dhidden = Matrix::Zero(caches[s].hidden.rows(), caches[s].hidden.cols());
    for (auto p : seg.positions) dhidden.row(static_cast<Eigen::Index>(p)) += dpooled;
    backward_from(params, adapter, caches[s], nullptr, &dhidden, grads);
  }
  return loss;
}

std::vector<double> item_labels(const std::vector<TaskItem>& items) {
  std::vector<double> out;
  out.reserve(items.size());
  for (const auto& it : items) out.push_back(it.label);
  return out;
}

// Per-item predictions from per-unit predictions.
std::vector<double> aggregate_units(const std::vector<Unit>& units, const std::vector<double>& unit_preds,
                                    std::size_t n_items, Objective objective) {
  std::vector<std::vector<double>> by_item(n_items);
  for (std::size_t u = 0; u < units.size(); ++u) by_item[units[u].item].push_back(unit_preds[u]);
  std::vector<double> out(n_items);
  for (std::size_t i = 0; i < n_items; ++i) out[i] = aggregate_person(by_item[i], objective);
  return out;
}

std::optional<double> safe_metric(const TaskSpec& task, const std::vector<double>& labels,
                                  const std::vector<double>& preds) {
  try {
    return task_metric(task, labels, preds);
  } catch (const DataError&) {
    return std::nullopt;
  }
}

void standardize_labels(TaskHead& head, const std::vector<TaskItem>& items) {
  if (head.objective != Objective::regression || items.empty()) return;
  double mean = 0.0;
  for (const auto& it : items) mean += it.label;
  mean /= static_cast<double>(items.size());
  double var = 0.0;
  for (const auto& it : items) var += (it.label - mean) * (it.label - mean);
  var /= static_cast<double>(items.size());
  head.label_mean = mean;
  head.label_std = var > 0.0 ? std::sqrt(var) : 1.0;
}

UnitLayout layout_for(FinetuneStyle style) {
  return style == FinetuneStyle::huft ? UnitLayout::history : UnitLayout::per_document;
}

UnitLayout layout_for_probe(const TaskSpec& task, bool include_history) {
  if (include_history) return UnitLayout::history;
  return task.level == TaskLevel::person_level ? UnitLayout::pooled_documents : UnitLayout::per_document;
}

std::vector<double> predict_units(const LmParameters& params, const LoraAdapter* adapter, const TaskHead& head,
                                  const std::vector<Unit>& units, unsigned threads) {
  std::vector<double> preds(units.size());
  detail::run_chunks(units.size(), threads, [&](std::size_t, std::size_t begin, std::size_t end) {
    for (std::size_t u = begin; u < end; ++u) preds[u] = head.predict(unit_features(params, adapter, units[u]));
  });
  return preds;
}

}  // namespace

std::vector<TaskItem> task_items(const TaskSpec& task, std::span<const AuthorStream> streams) {
  if (task.objective == Objective::classification && task.n_classes < 2) {
    throw ConfigError("classification needs at least two classes");
  }
  std::vector<TaskItem> items;
  for (std::size_t s = 0; s < streams.size(); ++s) {
    const auto& docs = streams[s].documents;
    if (task.level == TaskLevel::document_level) {
      for (std::size_t t = 0; t < docs.size(); ++t) {
        if (!docs[t].label) continue;
        items.push_back({s, t, label_value(*docs[t].label, task)});
      }
      continue;
    }
    std::optional<double> label;
    for (const auto& d : docs) {
      if (!d.label) continue;
      const double v = label_value(*d.label, task);
      if (label && std::abs(*label - v) > 1e-12 * std::max(1.0, std::abs(v))) {
        throw DataError("inconsistent person-level labels for author " + streams[s].author_id);
      }
      label = v;
    }
    if (!label) throw DataError("missing label for author " + streams[s].author_id);
    items.push_back({s, std::nullopt, *label});
  }
  if (items.empty()) throw DataError("no labelled items");
  return items;
}

RowVector TaskHead::raw_output(const RowVector& pooled) const {
  return pooled * weight.transpose() + bias;
}

double TaskHead::predict(const RowVector& pooled) const {
  const RowVector raw = raw_output(pooled);
  if (objective == Objective::classification) {
    Eigen::Index best = 0;
    raw.maxCoeff(&best);
    return static_cast<double>(best);
  }
  return raw(0) * label_std + label_mean;
}

TaskHead init_task_head(const TaskSpec& task, std::size_t d_model, std::uint64_t seed) {
  TaskHead head;
  head.objective = task.objective;
  const auto out = static_cast<Eigen::Index>(task.output_dim());
  const auto d = static_cast<Eigen::Index>(d_model);
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::normal_distribution<double> dist(0.0, 0.02);
  head.weight = Matrix(out, d);
  for (Eigen::Index i = 0; i < head.weight.size(); ++i) head.weight.data()[i] = dist(rng);
  head.bias = Matrix::Zero(1, out);
  return head;
}

void save_task_head(const std::filesystem::path& path, const TaskHead& head, const TaskSpec& task) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RuntimeFailure("cannot write task head: " + path.string());
  const nlohmann::json meta{{"task", task.name},
                            {"level", task.level == TaskLevel::document_level ? "document" : "person"},
                            {"objective", head.objective == Objective::classification ? "classification" : "regression"},
                            {"n_classes", task.n_classes},
                            {"label_mean", head.label_mean},
                            {"label_std", head.label_std}};
  write_container(out, meta, {{"head.weight", &head.weight}, {"head.bias", &head.bias}});
  if (!out) throw RuntimeFailure("cannot write task head: " + path.string());
}

TaskHead load_task_head(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open task head: " + path.string());
  auto c = read_container(in);
  TaskHead head;
  try {
    head.objective =
        c.metadata.at("objective").get<std::string>() == "regression" ? Objective::regression : Objective::classification;
    head.label_mean = c.metadata.at("label_mean").get<double>();
    head.label_std = c.metadata.at("label_std").get<double>();
    head.weight = c.tensors.at("head.weight");
    head.bias = c.tensors.at("head.bias");
  } catch (const std::exception& e) {
    throw DataError(std::string("malformed task head: ") + e.what());
  }
  if (head.bias.rows() != 1 || head.bias.cols() != head.weight.rows()) throw DataError("malformed task head: shapes");
  return head;
}

FinetuneResult finetune(const Checkpoint& checkpoint, const TaskSpec& task, std::span<const AuthorStream> train,
                        std::span<const AuthorStream> dev, FinetuneStyle style, const TaskPackOptions& pack,
                        const TrainConfig& config) {
  config.validate();
  const auto train_items = task_items(task, train);
  const std::vector<TaskItem> dev_items = dev.empty() ? std::vector<TaskItem>{} : task_items(task, dev);
  const auto layout = layout_for(style);
  const auto train_units = build_units(task, train, train_items, layout, pack);
  const auto dev_units = build_units(task, dev, dev_items, layout, pack);

  // A pre-training adapter is folded into the base; fine-tuning gets a fresh one.
  LmParameters base = checkpoint.adapter ? lora_merge(checkpoint.params, *checkpoint.adapter) : checkpoint.params;
  if (config.quantize_base) base = quantize_frozen_weights(base, config.quant_block);
  std::optional<LoraAdapter> adapter;
  if (config.trainable == Trainable::adapter_only) {
    adapter = init_lora(base.config, config.lora_rank, config.lora_alpha, config.seed);
  }
  TaskHead head = init_task_head(task, base.config.d_model, config.seed);
  standardize_labels(head, train_items);

  const auto dev_labels = item_labels(dev_items);
  auto evaluate_dev = [&](double fallback, std::optional<double>& metric) {
    if (dev_units.empty()) return fallback;
    const LoraAdapter* aptr = adapter ? &*adapter : nullptr;
    std::vector<double> losses(dev_units.size());
    std::vector<double> preds(dev_units.size());
    detail::run_chunks(dev_units.size(), config.threads, [&](std::size_t, std::size_t begin, std::size_t end) {
      for (std::size_t u = begin; u < end; ++u) {
        const auto f = unit_features(base, aptr, dev_units[u]);
        losses[u] = unit_loss(head, f, dev_units[u].label);
        preds[u] = head.predict(f);
      }
    });
    double total = 0.0;
    for (double l : losses) total += l;
    metric = safe_metric(task, dev_labels, aggregate_units(dev_units, preds, dev_items.size(), task.objective));
    return total / static_cast<double>(dev_units.size());
  };

  FinetuneResult result;
  EarlyStopping stopper(config.early_stop_patience);
  LmParameters best_base = base;
  std::optional<LoraAdapter> best_adapter = adapter;
  TaskHead best_head = head;

  Adam adam(AdamConfig{config.learning_rate});
  std::vector<std::size_t> sizes(train_units.size());
  for (std::size_t u = 0; u < train_units.size(); ++u) {
    for (const auto& s : train_units[u].segments) sizes[u] += s.tokens.size();
  }
  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    const auto order = seeded_permutation(train_units.size(), config.seed + epoch);
    double epoch_loss = 0.0;
    for (const auto& batch : make_batches(order, sizes, config)) {
      const double scale = 1.0 / static_cast<double>(batch.size());
      const LoraAdapter* aptr = adapter ? &*adapter : nullptr;
      const std::size_t chunks = detail::chunk_count(batch.size(), config.threads);
      std::vector<Gradients> partial;
      std::vector<HeadGrad> head_partial;
      for (std::size_t c = 0; c < chunks; ++c) {
        partial.push_back(zero_gradients(base, aptr, config.trainable));
        head_partial.push_back({Matrix::Zero(head.weight.rows(), head.weight.cols()), Matrix::Zero(1, head.bias.cols())});
      }
      std::vector<double> losses(chunks, 0.0);
      detail::run_chunks(batch.size(), config.threads, [&](std::size_t c, std::size_t begin, std::size_t end) {
        for (std::size_t b = begin; b < end; ++b) {
          losses[c] += accumulate_unit(base, aptr, head, train_units[batch[b]], scale, partial[c], head_partial[c]);
        }
      });
      for (std::size_t c = 1; c < chunks; ++c) {
        partial[0].add(partial[c]);
        head_partial[0].weight += head_partial[c].weight;
        head_partial[0].bias += head_partial[c].bias;
      }
      for (double l : losses) epoch_loss += l;
      std::vector<std::pair<Matrix*, const Matrix*>> step{{&head.weight, &head_partial[0].weight},
                                                          {&head.bias, &head_partial[0].bias}};
      collect_trainable(base, adapter, partial[0], step);
      adam.step(step);
    }
    EpochLog log;
    log.epoch = epoch;
    log.train_loss = epoch_loss / static_cast<double>(train_units.size());
    log.dev_loss = evaluate_dev(log.train_loss, log.dev_metric);
    result.log.push_back(log);
    if (stopper.update(log.dev_loss)) {
      best_base = base;
      best_adapter = adapter;
      best_head = head;
    }
    if (stopper.stop()) break;
  }

  result.checkpoint.params = std::move(best_base);
  result.checkpoint.adapter = std::move(best_adapter);
  result.head = std::move(best_head);
  nlohmann::json log = nlohmann::json::array();
  for (const auto& l : result.log) log.push_back(to_json(l));
  result.checkpoint.metadata = {{"stage", "finetune"},
                                {"task", task.name},
                                {"style", style == FinetuneStyle::huft ? "huft" : "tft"},
                                {"train", to_json(config)},
                                {"best_dev_loss", stopper.best()},
                                {"log", log}};
  return result;
}

RowVector item_features(const Checkpoint& checkpoint, const TaskSpec& task, const AuthorStream& stream,
                        const TaskItem& item, bool include_history, const TaskPackOptions& pack) {
  std::vector<Unit> units;
  append_units(task, stream, item, 0, layout_for_probe(task, include_history), pack, units);
  const LoraAdapter* aptr = checkpoint.adapter ? &*checkpoint.adapter : nullptr;
  return unit_features(checkpoint.params, aptr, units.front());
}

ProbeResult linear_probe(const Checkpoint& checkpoint, const TaskSpec& task, std::span<const AuthorStream> train,
                         std::span<const AuthorStream> dev, bool include_history, const TaskPackOptions& pack,
                         const TrainConfig& config) {
  config.validate();
  const auto train_items = task_items(task, train);
  const std::vector<TaskItem> dev_items = dev.empty() ? std::vector<TaskItem>{} : task_items(task, dev);
  const auto layout = layout_for_probe(task, include_history);
  const LoraAdapter* aptr = checkpoint.adapter ? &*checkpoint.adapter : nullptr;

  auto features_of = [&](std::span<const AuthorStream> streams, const std::vector<TaskItem>& items) {
    const auto units = build_units(task, streams, items, layout, pack);
    std::vector<RowVector> feats(units.size());
    detail::run_chunks(units.size(), config.threads, [&](std::size_t, std::size_t begin, std::size_t end) {
      for (std::size_t u = begin; u < end; ++u) feats[u] = unit_features(checkpoint.params, aptr, units[u]);
    });
    return feats;
  };
  const auto train_x = features_of(train, train_items);
  const auto dev_x = features_of(dev, dev_items);
  const auto dev_labels = item_labels(dev_items);

  ProbeResult result;
  result.head = init_task_head(task, checkpoint.params.config.d_model, config.seed);
  TaskHead& head = result.head;
  standardize_labels(head, train_items);
  TaskHead best = head;
  EarlyStopping stopper(config.early_stop_patience);
  Adam adam(AdamConfig{config.learning_rate});
  const std::vector<std::size_t> sizes(train_x.size(), 1);

  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    const auto order = seeded_permutation(train_x.size(), config.seed + epoch);
    double epoch_loss = 0.0;
    for (const auto& batch : make_batches(order, sizes, config)) {
      HeadGrad g{Matrix::Zero(head.weight.rows(), head.weight.cols()), Matrix::Zero(1, head.bias.cols())};
      const double scale = 1.0 / static_cast<double>(batch.size());
      for (auto idx : batch) {
        RowVector draw;
        epoch_loss += head_loss(head, head.raw_output(train_x[idx]), train_items[idx].label, draw);
        draw *= scale;
        g.weight.noalias() += draw.transpose() * train_x[idx];
        g.bias += draw;
      }
      adam.step({{&head.weight, &g.weight}, {&head.bias, &g.bias}});
    }
    EpochLog log;
    log.epoch = epoch;
    log.train_loss = epoch_loss / static_cast<double>(train_x.size());
    if (dev_x.empty()) {
      log.dev_loss = log.train_loss;
    } else {
      double total = 0.0;
      std::vector<double> preds(dev_x.size());
      for (std::size_t i = 0; i < dev_x.size(); ++i) {
        total += unit_loss(head, dev_x[i], dev_items[i].label);
        preds[i] = head.predict(dev_x[i]);
      }
      log.dev_loss = total / static_cast<double>(dev_x.size());
      log.dev_metric = safe_metric(task, dev_labels, preds);
    }
    result.log.push_back(log);
    if (stopper.update(log.dev_loss)) best = head;
    if (stopper.stop()) break;
  }
  result.head = std::move(best);
  return result;
}

std::vector<double> predict_task(const Checkpoint& checkpoint, const TaskHead& head, const TaskSpec& task,
                                 std::span<const AuthorStream> streams, FinetuneStyle style,
                                 const TaskPackOptions& pack) {
  const auto items = task_items(task, streams);
  const auto units = build_units(task, streams, items, layout_for(style), pack);
  const LoraAdapter* aptr = checkpoint.adapter ? &*checkpoint.adapter : nullptr;
  const auto preds = predict_units(checkpoint.params, aptr, head, units, 1);
  return aggregate_units(units, preds, items.size(), task.objective);
}

std::vector<double> predict_probe(const Checkpoint& checkpoint, const TaskHead& head, const TaskSpec& task,
                                  std::span<const AuthorStream> streams, bool include_history,
                                  const TaskPackOptions& pack) {
  const auto items = task_items(task, streams);
  const auto units = build_units(task, streams, items, layout_for_probe(task, include_history), pack);
  const LoraAdapter* aptr = checkpoint.adapter ? &*checkpoint.adapter : nullptr;
  const auto preds = predict_units(checkpoint.params, aptr, head, units, 1);
  return aggregate_units(units, preds, items.size(), task.objective);
}

double aggregate_person(std::span<const double> predictions, Objective objective) {
  if (predictions.empty()) throw DataError("nothing to aggregate");
  if (objective == Objective::regression) {
    double s = 0.0;
    for (double p : predictions) s += p;
    return s / static_cast<double>(predictions.size());
  }
  std::map<double, std::size_t> counts;
  for (double p : predictions) ++counts[p];
  double best = counts.begin()->first;
  std::size_t best_count = 0;
  for (const auto& [label, n] : counts) {
    if (n > best_count) {
      best = label;
      best_count = n;
    }
  }
  return best;
}

double task_metric(const TaskSpec& task, std::span<const double> labels, std::span<const double> predictions) {
  if (labels.size() != predictions.size()) throw DataError("task_metric: length mismatch");
  if (task.objective == Objective::regression) return pearson_r(labels, predictions);
  std::vector<int> y(labels.size());
  std::vector<int> p(predictions.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    y[i] = static_cast<int>(std::lround(labels[i]));
    p[i] = static_cast<int>(std::lround(predictions[i]));
  }
  return weighted_f1(y, p);
}

}  // namespace hulm
