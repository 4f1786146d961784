#pragma once

#include "ega/ops.hpp"
#include "ega/wavelets.hpp"

#include <string>
#include <string_view>
#include <vector>

namespace ega {

/// Attention-gate variant of a model.
enum class GateVariant { kBase, kEga1, kEga2, kEga4, kEgaC, kEgaM, kEgaDb2, kEgaDb4 };

inline constexpr GateVariant kAllVariants[] = {
    GateVariant::kBase, GateVariant::kEga1, GateVariant::kEga2,   GateVariant::kEga4,
    GateVariant::kEgaC, GateVariant::kEgaM, GateVariant::kEgaDb2, GateVariant::kEgaDb4,
};

/// CLI spelling: base, ega1, ega2, ega4, egac, egam, egadb2, egadb4.
std::string_view variant_name(GateVariant v);
/// Table spelling: BASE, EGA-1, ...
std::string_view variant_label(GateVariant v);
/// Throws ContractError listing the valid names.
GateVariant parse_variant(std::string_view name);
std::string valid_variant_names();

/// Number of energy scales (0 for BASE).
std::size_t scale_count(GateVariant v);

/// Filter lengths of the causal-conv energy bank.
inline constexpr std::size_t kConvFilterLengths[] = {3, 7, 15, 31};

/// How energy statistics see the sequence.
enum class ZNormMode {
  kPaperLiteral,  // mean / std over the whole sequence, reflect padding for filters
  kCausalPrefix,  // mean / std over positions <= t, edge padding for filters
};

std::string_view znorm_name(ZNormMode m);
ZNormMode parse_znorm(std::string_view name);

/// Left extension used by the filter-based energy estimators under each mode.
inline PadMode gate_pad_mode(ZNormMode m) {
  return m == ZNormMode::kCausalPrefix ? PadMode::kEdge : PadMode::kReflect;
}

inline constexpr double kZNormEps = 1e-5;
inline constexpr double kRenormEps = 1e-8;

/// e = x . w + b. `w` is [d] (result [..]) or [d, n] (result [.., n]).
template <typename Scalar>
Var<Scalar> energy_linear(const Var<Scalar>& x, const Var<Scalar>& w, Scalar b = Scalar(0));

/// Standardizes the last axis (see ZNormMode); population statistics, eps added to the std.
template <typename Scalar>
Var<Scalar> z_normalize(const Var<Scalar>& e, ZNormMode mode, Scalar eps = Scalar(kZNormEps));

/// sigmoid(alpha * (e_norm - tau)), tau and alpha broadcast against e_norm.
template <typename Scalar>
Var<Scalar> gate_from_energy(const Var<Scalar>& e_norm, const Var<Scalar>& tau, const Var<Scalar>& alpha);

/// out[.., i, j] = A[.., i, j] g[.., j] / max(sum_k A[.., i, k] g[.., k], eps).
/// The floor only guards the division, so rows sum to exactly 1 whenever the gated mass
/// exceeds eps.
template <typename Scalar>
Var<Scalar> apply_gate(const Var<Scalar>& attn, const Var<Scalar>& g, Scalar eps = Scalar(kRenormEps));

/// Convex combination of per-scale gates (each [B, H, T]). `scale_logits` is [S] or [H, S]
/// and goes through a softmax; nullptr averages uniformly. Needs S >= 2.
template <typename Scalar>
Var<Scalar> combine_scale_gates(const std::vector<Var<Scalar>>& gates, const Var<Scalar>* scale_logits);

/// Causal filter bank over embedding channels followed by a pointwise mix.
/// x [B, T, d]; filters[s] is [d, k_s]; mix[s] is [d, n]. Result [B, S, n, T].
template <typename Scalar>
Var<Scalar> energy_conv(const Var<Scalar>& x, const std::vector<Var<Scalar>>& filters,
                        const std::vector<Var<Scalar>>& mix, PadMode pad);

/// Squared magnitude of the causal Morlet response, averaged over channels.
/// x [B, T, d]; omega and sigma hold n filters each ([n] or any shape with n entries).
/// Result [B, n, T].
template <typename Scalar>
Var<Scalar> energy_morlet(const Var<Scalar>& x, const Var<Scalar>& omega, const Var<Scalar>& sigma,
                          PadMode pad);

/// Two-level undecimated causal detail energy, averaged over channels. x [B, T, d] -> [B, T].
template <typename Scalar>
Var<Scalar> energy_dwt(const Var<Scalar>& x, int order, PadMode pad);

/// Per-head gate telemetry for one layer.
struct GateDiagnostics {
  std::vector<double> energy_mean;       // [H]
  std::vector<double> energy_std;        // [H]
  std::vector<double> active_fraction;   // [H], P(g > 0.5)
  std::vector<std::vector<double>> tau;  // [H][S]
  std::vector<std::vector<double>> alpha;
  std::vector<std::vector<double>> omega_sigma;   // EGA-M only
  std::vector<std::vector<double>> scale_weights;  // softmaxed, S > 1 only
};

}  // namespace ega
