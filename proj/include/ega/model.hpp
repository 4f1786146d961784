#pragma once

#include "ega/gates.hpp"

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

namespace ega {

struct ModelConfig {
  std::size_t n_layers = 6;
  std::size_t n_heads = 8;
  std::size_t d_model = 256;
  std::size_t context = 256;
  std::size_t vocab = 65;
  double dropout = 0.1;
  GateVariant variant = GateVariant::kBase;
  ZNormMode znorm = ZNormMode::kPaperLiteral;
  std::uint64_t seed = 1337;
  double init_std = 0.02;
  double tau_init = 0.0;
  double alpha_init = 2.0;

  std::size_t head_dim() const { return d_model / n_heads; }
  /// Throws ContractError on an inconsistent configuration.
  void validate() const;
};

/// Gate parameters of one block; unused slots stay null.
template <typename Scalar>
struct GateParams {
  Parameter<Scalar>* w_proj = nullptr;        // [d, S*H], linear variants
  Parameter<Scalar>* tau = nullptr;           // [S, H]
  Parameter<Scalar>* alpha = nullptr;         // [S, H]
  Parameter<Scalar>* scale_logits = nullptr;  // [H, S], EGA-C and EGA-M
  std::vector<Parameter<Scalar>*> filters;    // EGA-C: [d, k_s]
  std::vector<Parameter<Scalar>*> mix;        // EGA-C: [d, H]
  Parameter<Scalar>* omega = nullptr;         // EGA-M: [S, H]
  Parameter<Scalar>* sigma = nullptr;         // EGA-M: [S, H]
};

template <typename Scalar>
struct Block {
  Parameter<Scalar>*ln1_gain, *ln1_bias;
  Parameter<Scalar>*wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo;
  Parameter<Scalar>*ln2_gain, *ln2_bias;
  Parameter<Scalar>*w1, *b1, *w2, *b2;
  GateParams<Scalar> gate;
};

/// Intermediate values captured by an optional forward trace.
template <typename Scalar>
struct LayerTrace {
  NdArray<Scalar> residual;     // block output [B, T, d]
  NdArray<Scalar> energy;       // raw energy [S, B, H', T] (H' = 1 for shared DWT energy)
  NdArray<Scalar> energy_norm;  // z-normalized, same shape
  NdArray<Scalar> gate;         // combined gate [B, H, T]
};

template <typename Scalar>
struct ForwardTrace {
  std::vector<LayerTrace<Scalar>> layers;
};

/// GPT-style pre-LayerNorm decoder with learned positions, a tied output head and an
/// energy-gate slot in every attention head.
template <typename Scalar>
class TransformerModel {
 public:
  explicit TransformerModel(const ModelConfig& config);

  TransformerModel(const TransformerModel&) = delete;
  TransformerModel& operator=(const TransformerModel&) = delete;

  const ModelConfig& config() const { return config_; }

  /// Logits [B, T, V]. `dropout_rng` enables training mode (dropout on); pass nullptr for
  /// evaluation. With a tape, parameters are recorded for backward().
  Var<Scalar> forward(const TokenArray& tokens, Tape<Scalar>* tape = nullptr, Rng* dropout_rng = nullptr,
                      ForwardTrace<Scalar>* trace = nullptr) const;

  std::vector<Parameter<Scalar>*> parameters() const;
  Parameter<Scalar>* find(const std::string& name) const;
  Parameter<Scalar>& at(const std::string& name) const;
  bool is_gate_parameter(const Parameter<Scalar>* p) const;

  std::size_t count_params() const;
  std::size_t count_gate_params() const;

  const std::vector<Block<Scalar>>& blocks() const { return blocks_; }

  /// EGA-M: raises sigma to 5 / omega wherever the product fell below. Returns clamps.
  std::size_t enforce_admissibility();

  void zero_grad();

  /// Telemetry for one layer. Energy statistics need a trace from a forward pass.
  GateDiagnostics gate_diagnostics(std::size_t layer, const LayerTrace<Scalar>* trace = nullptr) const;

 private:
  Parameter<Scalar>* make_param(const std::string& name, Shape shape, ParamRole role, bool gate, double stddev,
                         double fill = 0.0);
  Var<Scalar> gate_for(const Block<Scalar>& blk, const Var<Scalar>& h, Tape<Scalar>* tape,
                       LayerTrace<Scalar>* trace) const;

  ModelConfig config_;
  std::vector<std::unique_ptr<Parameter<Scalar>>> params_;
  std::vector<bool> gate_flags_;
  Parameter<Scalar>* wte_ = nullptr;
  Parameter<Scalar>* wpe_ = nullptr;
  Parameter<Scalar>* lnf_gain_ = nullptr;
  Parameter<Scalar>* lnf_bias_ = nullptr;
  std::vector<Block<Scalar>> blocks_;
};

/// Mean next-token negative log-likelihood (nats).
template <typename Scalar>
Var<Scalar> cross_entropy_loss(const Var<Scalar>& logits, const TokenArray& targets);

/// Autoregressive continuation inside a sliding context window. temperature <= 1e-6 is greedy.
template <typename Scalar>
std::vector<std::int32_t> sample(const TransformerModel<Scalar>& model, std::vector<std::int32_t> prompt,
                                 long n_new, double temperature, Rng& rng);

/// FNV-1a digest over parameter names, shapes and values.
template <typename Scalar>
std::uint64_t parameter_fingerprint(const TransformerModel<Scalar>& model, bool gate_only = false);

/// 64-bit FNV-1a.
std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL);

}  // namespace ega
