#pragma once

#include "ega/data.hpp"
#include "ega/model.hpp"

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace ega {

struct TrainConfig {
  std::size_t steps = 5000;
  std::size_t batch = 64;
  std::size_t context = 256;
  double lr_max = 3e-4;
  std::size_t warmup = 300;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  double weight_decay = 0.1;
  double clip_norm = 1.0;
  std::size_t eval_every = 100;
  std::size_t eval_batches = 200;
  std::size_t snapshot_every = 100;
  std::size_t checkpoint_every = 0;  // 0: final checkpoint only
  std::size_t micro_batch = 0;       // rows per forward pass; 0 = whole batch
  double ema_decay = 0.99;
  std::uint64_t seed = 1337;

  /// Throws ContractError on an inconsistent configuration.
  void validate() const;
};

/// Linear warmup 0 -> lr_max over [0, warmup], then cosine to 0 at `steps`.
double lr_at(std::size_t step, const TrainConfig& config);

template <typename Scalar>
struct OptimState {
  std::vector<NdArray<Scalar>> m;
  std::vector<NdArray<Scalar>> v;
  std::uint64_t step = 0;

  static OptimState zeros_like(const std::vector<Parameter<Scalar>*>& params);
};

/// Bias-corrected AdamW update. Decoupled decay lr*wd*theta applies to kWeight parameters only.
/// Throws NonFiniteError naming the first parameter whose gradient is not finite.
template <typename Scalar>
void adamw_step(const std::vector<Parameter<Scalar>*>& params, OptimState<Scalar>& state, double lr,
                const TrainConfig& config);

/// Scales every gradient by max_norm / ||g|| when the global norm exceeds max_norm.
/// Returns the pre-clip norm.
template <typename Scalar>
double clip_global_norm(const std::vector<Parameter<Scalar>*>& params, double max_norm);

struct MetricsRow {
  std::size_t step = 0;
  double train_loss = 0.0;      // exponentially smoothed
  double train_loss_raw = 0.0;  // this step's batch loss
  std::optional<double> val_loss;
  double lr = 0.0;
  double grad_norm = 0.0;
  double wall_ms = 0.0;
};

struct GateRecord {
  std::size_t step = 0;
  std::size_t layer = 0;
  std::size_t head = 0;
  std::size_t scale = 0;
  double tau = 0.0;
  double alpha = 0.0;
  std::optional<double> omega_sigma;
  std::optional<double> scale_weight;
};

/// Snapshot of every gate scalar of a model at one step.
template <typename Scalar>
std::vector<GateRecord> gate_snapshot(const TransformerModel<Scalar>& model, std::size_t step);

/// Raised when the training loss stops being finite.
class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(std::size_t step, double lr);
  std::size_t step;
  double lr;
};

struct TrainProgress {
  std::size_t step = 0;  // completed optimizer steps
  double ema = 0.0;
  bool ema_started = false;
  double best_val = 0.0;
  bool has_val = false;
};

/// Receives artifacts as training proceeds. Every member is optional.
struct TrainCallbacks {
  std::function<void(const MetricsRow&)> on_metrics;
  std::function<void(const std::vector<GateRecord>&)> on_gates;
  /// Called at checkpoint_every intervals and after the last step.
  std::function<void(const TrainProgress&)> on_checkpoint;
  /// Checked after every step; returning true checkpoints and returns early.
  std::function<bool(const TrainProgress&)> should_stop;
  bool record_wall_time = true;
};

struct TrainResult {
  std::vector<MetricsRow> metrics;
  std::vector<GateRecord> gates;
  double final_train = 0.0;  // smoothed
  double final_val = 0.0;
  double best_val = 0.0;
  std::uint64_t batch_fingerprint = 0;
};

/// Mean cross-entropy over eval_batches fixed batches of the split, dropout off.
template <typename Scalar>
double evaluate(const TransformerModel<Scalar>& model, const Corpus& corpus, Split split, const TrainConfig& config);

/// Runs optimizer steps progress.step .. config.steps. Pass the state and progress restored from a
/// checkpoint to resume; the continuation then matches an uninterrupted run exactly.
template <typename Scalar>
TrainResult train(TransformerModel<Scalar>& model, const Corpus& corpus, const TrainConfig& config,
                  const TrainCallbacks& callbacks = {}, OptimState<Scalar>* state = nullptr,
                  TrainProgress* progress = nullptr);

// ---- checkpoints ----

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { kIo, kFormat, kVersion, kTruncated, kShapeMismatch };
  CheckpointError(Kind kind, const std::string& what) : std::runtime_error(what), kind(kind) {}
  Kind kind;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointInfo {
  std::uint32_t version = 0;
  ModelConfig model;
  TrainConfig train;
  TrainProgress progress;
  bool has_optimizer = false;
  std::uint64_t optimizer_step = 0;
};

/// Header: 8-byte magic, u64 LE header length, JSON header (version, configs, parameter table with
/// shapes and byte offsets, progress). Payload: little-endian float32 values, then Adam moments.
/// Written to a temporary file and renamed into place.
template <typename Scalar>
void save_checkpoint(const std::filesystem::path& path, const TransformerModel<Scalar>& model,
                     const TrainConfig& train, const TrainProgress& progress,
                     const OptimState<Scalar>* state = nullptr);

CheckpointInfo read_checkpoint_info(const std::filesystem::path& path);

/// Loads parameters (and optimizer moments when `state` is given) into a model whose
/// configuration must produce the same parameter table.
template <typename Scalar>
CheckpointInfo load_checkpoint(const std::filesystem::path& path, TransformerModel<Scalar>& model,
                               OptimState<Scalar>* state = nullptr);

// ---- structured text ----

std::string model_config_json(const ModelConfig& c);
std::string train_config_json(const TrainConfig& c);
ModelConfig model_config_from_json(const std::string& text);
TrainConfig train_config_from_json(const std::string& text);

/// `step,train_loss,val_loss,lr,grad_norm,wall_ms`; val_loss empty between evaluations.
std::string metrics_csv_header();
std::string metrics_csv_row(const MetricsRow& row);
/// One JSON object per line.
std::string gate_record_json(const GateRecord& r);

}  // namespace ega
