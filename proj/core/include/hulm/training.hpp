#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hulm/checkpoint.hpp"
#include "hulm/corpus.hpp"
#include "hulm/model.hpp"
#include "hulm/packer.hpp"

namespace hulm {

struct TrainConfig {
  double learning_rate = 3e-4;
  std::size_t batch_size = 8;    // instances per optimizer step
  std::size_t batch_tokens = 0;  // when non-zero, batches are filled up to this many tokens instead
  std::size_t max_epochs = 5;
  std::size_t early_stop_patience = 6;
  std::uint64_t seed = 42;
  Trainable trainable = Trainable::adapter_only;
  std::size_t lora_rank = 8;
  double lora_alpha = 16.0;
  bool quantize_base = false;
  std::size_t quant_block = 64;
  unsigned threads = 1;

  // Throws ConfigError.
  void validate() const;
};

nlohmann::json to_json(const TrainConfig& config);

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double dev_loss = 0.0;
  std::optional<double> dev_metric;
};

nlohmann::json to_json(const EpochLog& log);

// Tracks the best dev loss; stop() turns true after `patience` consecutive
// evaluations without strict improvement.
class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience) : patience_(patience) {}

  // Returns true when `dev_loss` is a new best.
  bool update(double dev_loss);
  bool stop() const noexcept { return bad_evals_ >= patience_; }
  double best() const noexcept { return best_; }

 private:
  std::size_t patience_;
  std::size_t bad_evals_ = 0;
  double best_ = 0.0;
  bool seen_ = false;
};

// Fisher-Yates permutation of [0, n) from a seeded 64-bit Mersenne Twister.
std::vector<std::size_t> seeded_permutation(std::size_t n, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Language-model training.

enum class PretrainMode { hulm, standard };

struct PretrainOptions {
  PretrainMode mode = PretrainMode::hulm;
  std::size_t author_max_len = kAuthorMaxLen;
  std::size_t independent_max_len = kIndependentMaxLen;
  PackOptions pack;
  bool merge_adapter = false;
};

// hulm: pack_author per stream; standard: pack_independent over all
// documents followed by a seeded shuffle.
std::vector<PackedInstance> pack_for_pretraining(std::span<const AuthorStream> streams,
                                                 const PretrainOptions& options, std::uint64_t seed);

// Token-weighted NLL over every counted position of every instance.
NllSum evaluate_nll(const LmParameters& params, const LoraAdapter* adapter,
                    std::span<const PackedInstance> instances, unsigned threads = 1);

struct LmTrainResult {
  LmParameters params;
  std::optional<LoraAdapter> adapter;
  std::vector<EpochLog> log;
  double initial_dev_loss = 0.0;
  double best_dev_loss = 0.0;
};

// Next-token training over packed instances with Adam and early stopping on
// dev loss. The best-dev parameters are returned.
LmTrainResult train_language_model(const LmParameters& params, std::optional<LoraAdapter> adapter,
                                   std::span<const PackedInstance> train, std::span<const PackedInstance> dev,
                                   const TrainConfig& config);

struct PretrainResult {
  Checkpoint checkpoint;
  std::vector<EpochLog> log;
  double initial_dev_loss = 0.0;
  double best_dev_loss = 0.0;
};

// Throws DataError on an empty training corpus. With trainable ==
// adapter_only a fresh adapter is attached unless `init` already has one.
PretrainResult pretrain(const Checkpoint& init, std::span<const AuthorStream> train,
                        std::span<const AuthorStream> dev, const PretrainOptions& options,
                        const TrainConfig& config);

// ---------------------------------------------------------------------------
// Downstream tasks.

enum class TaskLevel { document_level, person_level };
enum class Objective { classification, regression };

struct TaskSpec {
  std::string name = "task";
  TaskLevel level = TaskLevel::document_level;
  Objective objective = Objective::classification;
  std::size_t n_classes = 2;

  std::size_t output_dim() const noexcept { return objective == Objective::classification ? n_classes : 1; }
};

// One labelled unit of a task: a document (document-level) or an author
// (person-level, `document` empty).
struct TaskItem {
  std::size_t stream = 0;
  std::optional<std::size_t> document;
  double label = 0.0;
};

// Extracts labelled items. Throws DataError on missing labels, labels that do
// not fit the objective, or inconsistent person-level labels.
std::vector<TaskItem> task_items(const TaskSpec& task, std::span<const AuthorStream> streams);

struct TaskHead {
  Objective objective = Objective::classification;
  Matrix weight;  // outputs x d_model
  Matrix bias;    // 1 x outputs
  // Regression targets are standardized with the training split statistics.
  double label_mean = 0.0;
  double label_std = 1.0;

  RowVector raw_output(const RowVector& pooled) const;
  // Class id (classification) or de-standardized value (regression).
  double predict(const RowVector& pooled) const;
};

TaskHead init_task_head(const TaskSpec& task, std::size_t d_model, std::uint64_t seed);
void save_task_head(const std::filesystem::path& path, const TaskHead& head, const TaskSpec& task);
TaskHead load_task_head(const std::filesystem::path& path);

enum class FinetuneStyle { huft, tft };

struct TaskPackOptions {
  std::size_t max_len = kTaskMaxLen;
  PackOptions pack;
  bool pool_separator = false;  // pool the EOS after the target instead of its last token
};

struct FinetuneResult {
  Checkpoint checkpoint;  // base parameters plus the trained adapter
  TaskHead head;
  std::vector<EpochLog> log;
};

// Adapter (or full, per config.trainable) and head trained jointly on the
// task loss: cross-entropy for classification, MSE for regression.
FinetuneResult finetune(const Checkpoint& checkpoint, const TaskSpec& task, std::span<const AuthorStream> train,
                        std::span<const AuthorStream> dev, FinetuneStyle style, const TaskPackOptions& pack,
                        const TrainConfig& config);

struct ProbeResult {
  TaskHead head;
  std::vector<EpochLog> log;
};

// Frozen backbone; only the head is trained on pooled last-layer states.
ProbeResult linear_probe(const Checkpoint& checkpoint, const TaskSpec& task, std::span<const AuthorStream> train,
                         std::span<const AuthorStream> dev, bool include_history, const TaskPackOptions& pack,
                         const TrainConfig& config);

// Pooled features of one item. Person-level without history averages the
// hidden states of every token of every independently processed document.
RowVector item_features(const Checkpoint& checkpoint, const TaskSpec& task, const AuthorStream& stream,
                        const TaskItem& item, bool include_history, const TaskPackOptions& pack);

// Per-item predictions in task_items() order. FinetuneStyle::tft at person
// level predicts every document and aggregates with aggregate_person.
std::vector<double> predict_task(const Checkpoint& checkpoint, const TaskHead& head, const TaskSpec& task,
                                 std::span<const AuthorStream> streams, FinetuneStyle style,
                                 const TaskPackOptions& pack);
std::vector<double> predict_probe(const Checkpoint& checkpoint, const TaskHead& head, const TaskSpec& task,
                                  std::span<const AuthorStream> streams, bool include_history,
                                  const TaskPackOptions& pack);

// Mode (ties to the smallest label) for classification, mean for regression.
// Throws DataError on empty input.
double aggregate_person(std::span<const double> predictions, Objective objective);

// Weighted F1 for classification, Pearson r for regression.
double task_metric(const TaskSpec& task, std::span<const double> labels, std::span<const double> predictions);

}  // namespace hulm
