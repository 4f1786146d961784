#include "ega/wavelets.hpp"

#include "ega/ops.hpp"

#include <Eigen/Dense>

#include <atomic>
#include <cmath>
#include <numbers>

namespace ega {

namespace {

std::atomic<std::uint64_t> g_admissibility_clamps{0};

// Lowpass taps to 20 significant digits (spectral factorization in 50-digit arithmetic).
constexpr double kDb4[8] = {
    0.23037781330889650086,  0.71484657055291564709, 0.63088076792985890788,
    -0.027983769416859854211, -0.18703481171909308408, 0.030841381835560763627,
    0.032883011666885199735, -0.010597401785069032105,
};

// Index into a signal of length n after mirroring without edge repetition on both sides.
std::size_t mirror_index(std::ptrdiff_t p, std::size_t n) {
  if (n == 1) return 0;
  const auto period = static_cast<std::ptrdiff_t>(2 * (n - 1));
  std::ptrdiff_t m = p % period;
  if (m < 0) m += period;
  if (m >= static_cast<std::ptrdiff_t>(n)) m = period - m;
  return static_cast<std::size_t>(m);
}

using ComplexMatrix = Eigen::Matrix<std::complex<double>, Eigen::Dynamic, Eigen::Dynamic>;

// Morlet taps with the usual correction term: subtract kappa * envelope so the truncated
// kernel has exactly zero mean, then renormalize.
std::vector<std::complex<double>> zero_mean_taps(const MorletKernel& kernel) {
  std::complex<double> total = 0.0;
  double env_total = 0.0;
  for (const auto& c : kernel.taps) {
    total += c;
    env_total += std::abs(c);
  }
  const std::complex<double> kappa = total / env_total;
  std::vector<std::complex<double>> taps(kernel.taps.size());
  double n2 = 0.0;
  for (std::size_t j = 0; j < taps.size(); ++j) {
    taps[j] = kernel.taps[j] - kappa * std::abs(kernel.taps[j]);
    n2 += std::norm(taps[j]);
  }
  for (auto& c : taps) c /= std::sqrt(n2);
  return taps;
}

// Linear map from a length-n signal to its Morlet response at every position.
ComplexMatrix analysis_operator(const MorletKernel& kernel, std::size_t n, CwtAlignment alignment) {
  ComplexMatrix op = ComplexMatrix::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  const auto m = static_cast<std::ptrdiff_t>(kernel.half_width);
  const auto taps = zero_mean_taps(kernel);
  for (std::size_t t = 0; t < n; ++t) {
    for (std::ptrdiff_t j = -m; j <= m; ++j) {
      const std::complex<double> w = taps[static_cast<std::size_t>(j + m)];
      // centred: y[t] = sum_j psi(j) x[t - j]; causal: y[t] = sum_j psi(j) x[t - j - m]
      std::ptrdiff_t pos = static_cast<std::ptrdiff_t>(t) - j;
      if (alignment == CwtAlignment::kCausal) pos -= m;
      const std::size_t src = mirror_index(pos, n);
      op(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(src)) += w;
    }
  }
  return op;
}

}  // namespace

std::size_t morlet_half_width(double sigma) { return static_cast<std::size_t>(std::ceil(4.0 * sigma)); }

MorletKernel morlet_kernel(double omega0, double sigma) {
  if (!(omega0 > 0.0) || !(sigma > 0.0)) {
    throw ContractError("morlet_kernel: omega0 and sigma must be positive");
  }
  MorletKernel k;
  if (omega0 * sigma < kMorletAdmissibility) {
    sigma = kMorletAdmissibility / omega0;
    k.clamped = true;
    g_admissibility_clamps.fetch_add(1);
  }
  k.omega0 = omega0;
  k.sigma = sigma;
  k.half_width = morlet_half_width(sigma);
  const auto m = static_cast<std::ptrdiff_t>(k.half_width);
  double norm2 = 0.0;
  for (std::ptrdiff_t j = -m; j <= m; ++j) {
    const double t = static_cast<double>(j);
    const double env = std::exp(-t * t / (2.0 * sigma * sigma));
    k.taps.push_back(std::polar(env, omega0 * t));
    norm2 += env * env;
  }
  const double inv = 1.0 / std::sqrt(norm2);
  for (auto& c : k.taps) c *= inv;
  return k;
}

template <typename Scalar>
std::size_t enforce_admissibility(NdArray<Scalar>& omega, NdArray<Scalar>& sigma) {
  if (!omega.same_shape(sigma)) {
    throw DimensionError("enforce_admissibility: omega " + shape_str(omega.shape()) + " vs sigma " +
                         shape_str(sigma.shape()));
  }
  std::size_t clamped = 0;
  for (std::size_t i = 0; i < omega.numel(); ++i) {
    // keep the centre frequency positive so the bound stays finite
    if (!(omega[i] > Scalar(1e-3))) omega[i] = Scalar(1e-3);
    const auto floor = static_cast<Scalar>(kMorletAdmissibility / static_cast<double>(omega[i]));
    if (sigma[i] < floor || static_cast<double>(omega[i]) * static_cast<double>(sigma[i]) < kMorletAdmissibility) {
      sigma[i] = floor;
      // rounding can leave the product a hair under the bound
      while (static_cast<double>(omega[i]) * static_cast<double>(sigma[i]) < kMorletAdmissibility) {
        sigma[i] = std::nextafter(sigma[i], std::numeric_limits<Scalar>::infinity());
      }
      ++clamped;
    }
  }
  g_admissibility_clamps.fetch_add(clamped);
  return clamped;
}

std::uint64_t admissibility_clamp_count() { return g_admissibility_clamps.load(); }

DaubechiesFilter daubechies_coefficients(int order) {
  DaubechiesFilter f;
  f.order = order;
  const double r2 = std::numbers::sqrt2;
  switch (order) {
    case 1:
      f.lowpass = {1.0 / r2, 1.0 / r2};
      break;
    case 2: {
      const double r3 = std::numbers::sqrt3;
      const double d = 4.0 * r2;
      f.lowpass = {(1.0 + r3) / d, (3.0 + r3) / d, (3.0 - r3) / d, (1.0 - r3) / d};
      break;
    }
    case 4:
      f.lowpass.assign(std::begin(kDb4), std::end(kDb4));
      break;
    default:
      throw ContractError("daubechies_coefficients: unsupported order " + std::to_string(order) +
                          " (supported: 1, 2, 4)");
  }
  const std::size_t len = f.lowpass.size();
  f.highpass.resize(len);
  for (std::size_t k = 0; k < len; ++k) {
    f.highpass[k] = (k % 2 == 0 ? 1.0 : -1.0) * f.lowpass[len - 1 - k];
  }
  return f;
}

template <typename Scalar>
NdArray<Scalar> causal_reflect_pad(const NdArray<Scalar>& signal, std::size_t p) {
  if (signal.rank() == 0) throw ContractError("causal_reflect_pad on a scalar");
  const std::size_t t = signal.shape().back();
  if (p >= t) {
    throw ContractError("causal_reflect_pad: pad amount " + std::to_string(p) +
                        " must be smaller than signal length " + std::to_string(t));
  }
  Shape out_shape = signal.shape();
  out_shape.back() = t + p;
  NdArray<Scalar> out(out_shape);
  const std::size_t rows = signal.numel() / t;
  for (std::size_t r = 0; r < rows; ++r) {
    const Scalar* src = signal.data() + r * t;
    Scalar* dst = out.data() + r * (t + p);
    for (std::size_t i = 0; i < p; ++i) dst[i] = src[p - i];
    std::copy_n(src, t, dst + p);
  }
  return out;
}

std::vector<double> log_spaced_scales(double lo, double hi, std::size_t n) {
  if (n == 0) throw ContractError("log_spaced_scales: n must be positive");
  if (!(lo > 0.0) || !(hi >= lo)) throw ContractError("log_spaced_scales: need 0 < lo <= hi");
  std::vector<double> s(n);
  if (n == 1) {
    s[0] = lo;
    return s;
  }
  const double a = std::log(lo);
  const double b = std::log(hi);
  for (std::size_t i = 0; i < n; ++i) {
    s[i] = std::exp(a + (b - a) * static_cast<double>(i) / static_cast<double>(n - 1));
  }
  return s;
}

double cwt_center_frequency(double scale) { return std::numbers::pi / scale; }
double cwt_sigma(double scale) { return 6.0 / cwt_center_frequency(scale); }

Scalogram mean_scalogram(const NdArray<double>& signals, std::span<const double> scales,
                         CwtAlignment alignment) {
  if (scales.empty()) throw ContractError("cwt_scalogram: empty scale list");
  if (signals.rank() != 2) throw DimensionError("mean_scalogram: signals must be [D, T]");
  const std::size_t dims = signals.dim(0);
  const std::size_t n = signals.dim(1);
  if (n == 0 || dims == 0) throw ContractError("mean_scalogram: empty signal");
  Scalogram out;
  out.scales.assign(scales.begin(), scales.end());
  out.power = NdArray<double>({scales.size(), n});
  // columns are signals
  const Eigen::MatrixXd x = signals.matrix(dims, n).transpose();
  for (std::size_t s = 0; s < scales.size(); ++s) {
    if (!(scales[s] > 0.0)) throw ContractError("cwt_scalogram: scales must be positive");
    const MorletKernel kernel = morlet_kernel(cwt_center_frequency(scales[s]), cwt_sigma(scales[s]));
    const ComplexMatrix op = analysis_operator(kernel, n, alignment);
    const ComplexMatrix y = op * x.cast<std::complex<double>>();
    for (std::size_t t = 0; t < n; ++t) {
      double acc = 0.0;
      for (std::size_t d = 0; d < dims; ++d) {
        acc += std::norm(y(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(d)));
      }
      out.power[s * n + t] = acc / static_cast<double>(dims);
    }
  }
  return out;
}

Scalogram cwt_scalogram(std::span<const double> signal, std::span<const double> scales,
                        CwtAlignment alignment) {
  NdArray<double> one({1, signal.size()}, std::vector<double>(signal.begin(), signal.end()));
  return mean_scalogram(one, scales, alignment);
}

double parseval_energy(std::span<const double> x) {
  double e = 0.0;
  for (double v : x) e += v * v;
  return e;
}

DwtCoefficients dwt_decimated(std::span<const double> x, const DaubechiesFilter& filter, int levels) {
  if (levels < 1) throw ContractError("dwt_decimated: levels must be >= 1");
  if (x.size() % (std::size_t{1} << levels) != 0) {
    throw ContractError("dwt_decimated: length " + std::to_string(x.size()) + " not divisible by 2^" +
                        std::to_string(levels));
  }
  DwtCoefficients out;
  std::vector<double> a(x.begin(), x.end());
  const std::size_t len = filter.lowpass.size();
  for (int level = 0; level < levels; ++level) {
    const std::size_t n = a.size();
    std::vector<double> approx(n / 2, 0.0);
    std::vector<double> detail(n / 2, 0.0);
    for (std::size_t i = 0; i < n / 2; ++i) {
      for (std::size_t k = 0; k < len; ++k) {
        const double v = a[(2 * i + k) % n];
        approx[i] += filter.lowpass[k] * v;
        detail[i] += filter.highpass[k] * v;
      }
    }
    out.details.push_back(std::move(detail));
    a = std::move(approx);
  }
  out.approx = std::move(a);
  return out;
}

double dwt_parseval_check(std::span<const double> x, const DaubechiesFilter& filter, int levels) {
  const double total = parseval_energy(x);
  const DwtCoefficients c = dwt_decimated(x, filter, levels);
  double transformed = parseval_energy(c.approx);
  for (const auto& d : c.details) transformed += parseval_energy(d);
  if (total == 0.0) return transformed == 0.0 ? 0.0 : 1.0;
  return std::abs(total - transformed) / total;
}

template <typename Scalar>
Var<Scalar> morlet_taps(const Var<Scalar>& omega, const Var<Scalar>& sigma) {
  if (omega.numel() != 1 || sigma.numel() != 1) {
    throw DimensionError("morlet_taps: omega " + shape_str(omega.shape()) + " and sigma " +
                         shape_str(sigma.shape()) + " must be scalars");
  }
  const double w = static_cast<double>(omega.value()[0]);
  const double s = static_cast<double>(sigma.value()[0]);
  if (!(w > 0.0) || !(s > 0.0)) throw ContractError("morlet_taps: omega and sigma must be positive");
  const std::size_t m = morlet_half_width(s);
  const std::size_t k = 2 * m + 1;
  double norm2 = 0.0;
  double dnorm2_ds = 0.0;
  for (std::size_t j = 0; j < k; ++j) {
    const double t = static_cast<double>(j) - static_cast<double>(m);
    const double e2 = std::exp(-t * t / (s * s));
    norm2 += e2;
    dnorm2_ds += e2 * 2.0 * t * t / (s * s * s);
  }
  const double norm = std::sqrt(norm2);
  const double dnorm_ds = dnorm2_ds / (2.0 * norm);
  NdArray<Scalar> out({2, k});
  auto d_dw = std::make_shared<std::vector<double>>(2 * k);
  auto d_ds = std::make_shared<std::vector<double>>(2 * k);
  for (std::size_t j = 0; j < k; ++j) {
    const double t = static_cast<double>(j) - static_cast<double>(m);
    const double env = std::exp(-t * t / (2.0 * s * s));
    const double denv_ds = env * t * t / (s * s * s);
    const double c = std::cos(w * t);
    const double sn = std::sin(w * t);
    const double re = c * env;
    const double im = sn * env;
    out[j] = static_cast<Scalar>(re / norm);
    out[k + j] = static_cast<Scalar>(im / norm);
    (*d_dw)[j] = -t * sn * env / norm;
    (*d_dw)[k + j] = t * c * env / norm;
    (*d_ds)[j] = c * denv_ds / norm - re * dnorm_ds / norm2;
    (*d_ds)[k + j] = sn * denv_ds / norm - im * dnorm_ds / norm2;
  }
  return make_result<Scalar>(std::move(out), {&omega, &sigma},
                             [omega, sigma, d_dw, d_ds](Tape<Scalar>& t, const NdArray<Scalar>& g) {
                               double gw = 0.0;
                               double gs = 0.0;
                               for (std::size_t i = 0; i < g.numel(); ++i) {
                                 gw += static_cast<double>(g[i]) * (*d_dw)[i];
                                 gs += static_cast<double>(g[i]) * (*d_ds)[i];
                               }
                               if (NdArray<Scalar>* go = t.grad_buffer(omega)) (*go)[0] += static_cast<Scalar>(gw);
                               if (NdArray<Scalar>* gsig = t.grad_buffer(sigma)) (*gsig)[0] += static_cast<Scalar>(gs);
                             });
}

template std::size_t enforce_admissibility(NdArray<float>&, NdArray<float>&);
template std::size_t enforce_admissibility(NdArray<double>&, NdArray<double>&);
template NdArray<float> causal_reflect_pad(const NdArray<float>&, std::size_t);
template NdArray<double> causal_reflect_pad(const NdArray<double>&, std::size_t);
template Var<float> morlet_taps(const Var<float>&, const Var<float>&);
template Var<double> morlet_taps(const Var<double>&, const Var<double>&);

}  // namespace ega
