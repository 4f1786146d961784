#pragma once

#include "ega/autodiff.hpp"

#include <complex>
#include <cstdint>
#include <span>
#include <vector>

namespace ega {

/// Minimum omega0 * sigma for a Morlet wavelet to count as admissible.
inline constexpr double kMorletAdmissibility = 5.0;

/// Discretized complex Morlet wavelet psi(t) = exp(i w t) exp(-t^2 / (2 s^2)) on
/// t in [-ceil(4s), ceil(4s)], scaled to unit L2 norm.
struct MorletKernel {
  double omega0 = 0.0;
  double sigma = 0.0;
  std::size_t half_width = 0;
  std::vector<std::complex<double>> taps;
  bool clamped = false;  // sigma was raised to satisfy admissibility
};

MorletKernel morlet_kernel(double omega0, double sigma);

/// Half-width ceil(4 sigma) of the truncated support.
std::size_t morlet_half_width(double sigma);

/// Raises sigma to kMorletAdmissibility / omega0 where the product falls short.
/// Returns how many entries were clamped; also counted by admissibility_clamp_count().
template <typename Scalar>
std::size_t enforce_admissibility(NdArray<Scalar>& omega, NdArray<Scalar>& sigma);
std::uint64_t admissibility_clamp_count();

/// Orthogonal Daubechies filter pair; order = number of vanishing moments (1 is Haar).
struct DaubechiesFilter {
  int order = 0;
  std::vector<double> lowpass;
  std::vector<double> highpass;  // g[k] = (-1)^k h[L-1-k]
};

DaubechiesFilter daubechies_coefficients(int order);

/// Left-extends the last axis by p samples, mirroring without repeating the edge sample:
/// [a, b, c] with p = 2 gives [c, b, a, b, c]. Requires p < T.
template <typename Scalar>
NdArray<Scalar> causal_reflect_pad(const NdArray<Scalar>& signal, std::size_t p);

/// Where analysis kernels sit relative to the output sample.
enum class CwtAlignment {
  kCentered,  // response at t is centred on t (both sides mirrored)
  kCausal,    // response at t uses samples <= t only (delayed by the half-width)
};

/// Scales x positions energy matrix.
struct Scalogram {
  std::vector<double> scales;
  NdArray<double> power;  // [S, T]
};

/// n log-spaced scales in [lo, hi].
std::vector<double> log_spaced_scales(double lo = 1.0, double hi = 316.0, std::size_t n = 64);

/// Centre frequency (rad/sample) and envelope width of the analysis wavelet at a scale:
/// scale 1 sits at the Nyquist frequency; omega * sigma is 6 at every scale.
double cwt_center_frequency(double scale);
double cwt_sigma(double scale);

/// |Morlet response|^2 of one signal at every scale. The analysis kernels carry the
/// admissibility correction term, so constants map to zero at every scale.
Scalogram cwt_scalogram(std::span<const double> signal, std::span<const double> scales,
                        CwtAlignment alignment = CwtAlignment::kCentered);

/// Mean over signals of the per-signal scalograms; `signals` is [D, T].
Scalogram mean_scalogram(const NdArray<double>& signals, std::span<const double> scales,
                         CwtAlignment alignment = CwtAlignment::kCentered);

/// Sum of squared samples.
double parseval_energy(std::span<const double> x);

/// Periodic, decimated orthogonal DWT.
struct DwtCoefficients {
  std::vector<std::vector<double>> details;  // finest first
  std::vector<double> approx;
};

DwtCoefficients dwt_decimated(std::span<const double> x, const DaubechiesFilter& filter, int levels);

/// |sum x^2 - (sum approx^2 + sum detail^2)| / sum x^2 (0 for the zero signal).
double dwt_parseval_check(std::span<const double> x, const DaubechiesFilter& filter, int levels = 3);

/// Differentiable Morlet taps from scalar omega and sigma: [2, K] with the real part in
/// row 0 and the imaginary part in row 1. The support is fixed by sigma at call time.
template <typename Scalar>
Var<Scalar> morlet_taps(const Var<Scalar>& omega, const Var<Scalar>& sigma);

}  // namespace ega
