#pragma once

// Differentiable primitives. Every function works on tracked and untracked values alike;
// when any operand is tracked the result is recorded on the operand's tape.
//
// Binary elementwise ops follow NumPy broadcasting. Reductions run sequentially over the
// flattened index so results are bitwise reproducible.

#include "ega/autodiff.hpp"
#include "ega/rng.hpp"

#include <cstdint>
#include <optional>
#include <vector>

namespace ega {

/// Additive value used for masked logits.
inline constexpr double kMaskedLogit = -1e9;

/// Integer token ids with a shape (usually [B, T]).
struct TokenArray {
  Shape shape;
  std::vector<std::int32_t> ids;

  std::size_t numel() const { return ids.size(); }
  std::int32_t at(std::size_t b, std::size_t t) const { return ids[b * shape.at(1) + t]; }
};

/// Left-extension rule for causal filtering.
enum class PadMode {
  kValid,    // input is already padded; output is T_in - k + 1 long
  kReflect,  // mirror without repeating the edge sample, continued periodically if needed
  kEdge,     // repeat the first sample (uses only positions <= t)
  kZero,
};

/// Source index for left-extended position `pos` (may be negative) of a length-n signal;
/// -1 means a zero sample.
std::ptrdiff_t pad_source_index(std::ptrdiff_t pos, std::size_t n, PadMode mode);

Shape broadcast_shapes(const Shape& a, const Shape& b);

// ---- elementwise ------------------------------------------------------------------------

template <typename Scalar> Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar> Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar> Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar> Var<Scalar> div(const Var<Scalar>& a, const Var<Scalar>& b);

template <typename Scalar> Var<Scalar> scale(const Var<Scalar>& x, Scalar factor);
template <typename Scalar> Var<Scalar> add_scalar(const Var<Scalar>& x, Scalar c);
template <typename Scalar> Var<Scalar> neg(const Var<Scalar>& x);
template <typename Scalar> Var<Scalar> square(const Var<Scalar>& x);
template <typename Scalar> Var<Scalar> exp(const Var<Scalar>& x);
template <typename Scalar> Var<Scalar> log(const Var<Scalar>& x);
template <typename Scalar> Var<Scalar> sigmoid(const Var<Scalar>& x);
/// GELU, tanh approximation.
template <typename Scalar> Var<Scalar> gelu(const Var<Scalar>& x);

// ---- reductions -------------------------------------------------------------------------

template <typename Scalar> Var<Scalar> sum(const Var<Scalar>& x);
template <typename Scalar> Var<Scalar> mean(const Var<Scalar>& x);
/// Sums out one axis (the axis is removed from the shape).
template <typename Scalar> Var<Scalar> sum_axis(const Var<Scalar>& x, int axis);
template <typename Scalar> Var<Scalar> mean_axis(const Var<Scalar>& x, int axis);

// ---- shape ------------------------------------------------------------------------------

template <typename Scalar> Var<Scalar> reshape(const Var<Scalar>& x, Shape shape);
template <typename Scalar> Var<Scalar> permute(const Var<Scalar>& x, const std::vector<std::size_t>& axes);
/// Swaps the last two axes.
template <typename Scalar> Var<Scalar> transpose(const Var<Scalar>& x);
/// Elements [begin, end) along `axis`.
template <typename Scalar>
Var<Scalar> slice(const Var<Scalar>& x, int axis, std::size_t begin, std::size_t end);
/// Stacks equally shaped values along a new axis.
template <typename Scalar> Var<Scalar> stack(const std::vector<Var<Scalar>>& xs, int axis);

// ---- linear algebra ---------------------------------------------------------------------

/// [..., m, k] x [..., k, n] with identical batch dims, or [..., m, k] x [k, n].
template <typename Scalar> Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b);

// ---- neural-network primitives ----------------------------------------------------------

/// Softmax over the last axis. `mask` is additive and broadcast over leading axes
/// (entries 0 or kMaskedLogit). Rows whose every entry is masked come back uniform and
/// bump softmax_all_masked_rows().
template <typename Scalar>
Var<Scalar> softmax_lastdim(const Var<Scalar>& x, const NdArray<Scalar>* mask = nullptr);
std::uint64_t softmax_all_masked_rows();

/// [T, T] additive causal mask: 0 on and below the diagonal, kMaskedLogit above.
template <typename Scalar> NdArray<Scalar> causal_mask(std::size_t t);

/// LayerNorm over the last axis with population variance.
template <typename Scalar>
Var<Scalar> layer_norm(const Var<Scalar>& x, const Var<Scalar>& gain, const Var<Scalar>& bias,
                       Scalar eps = Scalar(1e-5));

/// Rows of `table` [V, d] gathered by `ids` -> [..ids.shape, d].
template <typename Scalar> Var<Scalar> embedding(const TokenArray& ids, const Var<Scalar>& table);

/// Inverted dropout. Identity when `training` is false or p == 0.
template <typename Scalar> Var<Scalar> dropout(const Var<Scalar>& x, double p, Rng& rng, bool training);

/// Mean negative log-likelihood of `targets` under softmax(logits) over the last axis.
template <typename Scalar>
Var<Scalar> cross_entropy(const Var<Scalar>& logits, const std::vector<std::int32_t>& targets);

/// out[..., t] = sum_j kernel[j] * x[..., t - j] with the left extension given by `mode`.
/// `kernel` is [k] (shared) or [C, k] with C equal to the signal's second-to-last axis.
template <typename Scalar>
Var<Scalar> causal_conv1d(const Var<Scalar>& signal, const Var<Scalar>& kernel,
                          PadMode mode = PadMode::kReflect);

}  // namespace ega
