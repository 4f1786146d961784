#pragma once

#include "ega/trainer.hpp"

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ega {

// ---- run directories ----

struct RunSummary {
  std::string variant;  // CLI spelling
  std::string dataset;
  std::uint64_t seed = 0;
  std::size_t steps = 0;
  double final_train = 0.0;
  double final_val = 0.0;
  double best_val = 0.0;
  std::uint64_t batch_fingerprint = 0;
  std::size_t params = 0;
  std::size_t gate_params = 0;
};

std::string summary_json(const RunSummary& s);
RunSummary summary_from_json(const std::string& text);

/// Everything a finished run leaves behind:
///   config.json     dataset, data_path, model, train (written before step 0)
///   metrics.csv     step,train_loss,val_loss,lr,grad_norm,wall_ms
///   train_raw.csv   step,loss (unsmoothed batch loss)
///   gates.jsonl     one gate record per line
///   checkpoint.bin
///   summary.json
struct RunRecord {
  std::filesystem::path dir;
  std::string dataset;
  std::string data_path;
  ModelConfig model;
  TrainConfig train;
  RunSummary summary;
  std::vector<MetricsRow> metrics;
  std::vector<GateRecord> gates;
  std::filesystem::path checkpoint;
};

std::string run_config_json(const std::string& dataset, const std::string& data_path, const ModelConfig& model,
                            const TrainConfig& train);

/// Parsers for the two streamed logs. Malformed lines raise IoError with the line number.
std::vector<MetricsRow> parse_metrics_csv(const std::string& text);
std::vector<GateRecord> parse_gates_jsonl(const std::string& text);

/// Throws IoError naming the missing directory or file.
RunRecord load_run(const std::filesystem::path& dir);

// ---- comparisons ----

struct Comparison {
  double delta = 0.0;  // base val - other val; positive means `other` is better
  double gap_base = 0.0;
  double gap_other = 0.0;
};

/// Refuses (ContractError) unless both runs share dataset, seed, step count and batch fingerprint.
Comparison compare_runs(const RunSummary& base, const RunSummary& other);
inline Comparison compare_runs(const RunRecord& base, const RunRecord& other) {
  return compare_runs(base.summary, other.summary);
}

// ---- threshold statistics ----

inline constexpr double kReportedTau = 0.35;

struct TauPoint {
  std::size_t step = 0;
  double mean_tau = 0.0;
};

struct TauStatistics {
  std::vector<GateRecord> finals;  // the last snapshot
  double mean = 0.0;               // over every (layer, head, scale) of the last snapshot
  double deviation = 0.0;          // mean - 0.35, for the report only
  std::vector<TauPoint> trajectory;
};

/// Needs at least two snapshot steps (ContractError otherwise).
TauStatistics tau_statistics(const std::vector<GateRecord>& records);

/// Standard normal CDF.
double normal_cdf(double x);

struct ThresholdFraction {
  double analytic = 0.0;  // 1 - Phi(tau)
  std::optional<double> empirical;
  std::optional<double> difference;  // empirical - analytic
};

/// The empirical share counts normalized energies strictly above tau.
ThresholdFraction above_threshold_fraction(double tau, std::span<const double> energies = {});

/// Every z-normalized energy value the gates see on `n_batches` fixed validation batches
/// (eval mode). Empty for BASE.
template <typename Scalar>
std::vector<double> collect_normalized_energy(const TransformerModel<Scalar>& model, const Corpus& corpus,
                                              const TrainConfig& config, std::size_t n_batches = 50);

// ---- scalograms ----

struct ScalogramReport {
  Scalogram scalogram;  // power [64 scales, T]
  std::string probe;    // the text actually analysed
  std::size_t layer = 0;  // 1-indexed block
  std::optional<std::string> warning;
};

/// Mean Morlet scalogram over all d_model dimensions of the residual stream leaving block
/// `layer` (1-indexed) in eval mode. A probe longer than the context is cut to fit.
template <typename Scalar>
ScalogramReport scalogram_report(const TransformerModel<Scalar>& model, const Vocab& vocab, const std::string& probe,
                                 std::size_t layer, std::size_t n_scales = 64);

struct EnergySpectrum {
  std::vector<double> scales;
  std::vector<double> energy;  // per-scale sum over positions
  std::vector<double> markers;
};

EnergySpectrum energy_spectrum(const Scalogram& s);

// ---- sequence-length ablation ----

inline constexpr std::size_t kAblationTokensPerBatch = 16384;

struct SeqlenRow {
  std::size_t context = 0;
  std::size_t batch = 0;
  double val_base = 0.0;
  double val_ega1 = 0.0;
  double delta = 0.0;
  std::uint64_t fingerprint_base = 0;
  std::uint64_t fingerprint_ega1 = 0;
};

/// For each T trains BASE and EGA-1 on identical batches with B = tokens / T.
/// T above the model context raises ContractError. `on_run` sees each finished training run.
SeqlenRow seqlen_row(const ModelConfig& model, const TrainConfig& train, const Corpus& corpus, std::size_t context,
                     std::size_t tokens_per_batch = kAblationTokensPerBatch);
std::vector<SeqlenRow> seqlen_ablation(const ModelConfig& model, const TrainConfig& train, const Corpus& corpus,
                                       const std::vector<std::size_t>& lengths = {64, 128, 256},
                                       std::size_t tokens_per_batch = kAblationTokensPerBatch);

// ---- tables ----

std::string tau_trajectory_csv(const TauStatistics& t);
std::string tau_finals_csv(const TauStatistics& t);
std::string scalogram_csv(const Scalogram& s);
std::string spectrum_csv(const EnergySpectrum& s);
std::string seqlen_csv(const std::vector<SeqlenRow>& rows);

}  // namespace ega
