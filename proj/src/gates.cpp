#include "ega/gates.hpp"

#include <algorithm>
#include <cmath>

namespace ega {

std::string_view variant_name(GateVariant v) {
  switch (v) {
    case GateVariant::kBase: return "base";
    case GateVariant::kEga1: return "ega1";
    case GateVariant::kEga2: return "ega2";
    case GateVariant::kEga4: return "ega4";
    case GateVariant::kEgaC: return "egac";
    case GateVariant::kEgaM: return "egam";
    case GateVariant::kEgaDb2: return "egadb2";
    case GateVariant::kEgaDb4: return "egadb4";
  }
  return "?";
}

std::string_view variant_label(GateVariant v) {
  switch (v) {
    case GateVariant::kBase: return "BASE";
    case GateVariant::kEga1: return "EGA-1";
    case GateVariant::kEga2: return "EGA-2";
    case GateVariant::kEga4: return "EGA-4";
    case GateVariant::kEgaC: return "EGA-C";
    case GateVariant::kEgaM: return "EGA-M";
    case GateVariant::kEgaDb2: return "EGA-DB2";
    case GateVariant::kEgaDb4: return "EGA-DB4";
  }
  return "?";
}

std::string valid_variant_names() {
  std::string out;
  for (GateVariant v : kAllVariants) {
    if (!out.empty()) out += ", ";
    out += variant_name(v);
  }
  return out;
}

GateVariant parse_variant(std::string_view name) {
  for (GateVariant v : kAllVariants) {
    if (variant_name(v) == name) return v;
  }
  throw ContractError("unknown gate variant '" + std::string(name) + "'; valid: " + valid_variant_names());
}

std::size_t scale_count(GateVariant v) {
  switch (v) {
    case GateVariant::kBase: return 0;
    case GateVariant::kEga1: return 1;
    case GateVariant::kEga2: return 2;
    case GateVariant::kEga4: return 4;
    case GateVariant::kEgaC: return 4;
    case GateVariant::kEgaM: return 4;
    case GateVariant::kEgaDb2: return 1;
    case GateVariant::kEgaDb4: return 1;
  }
  return 0;
}

std::string_view znorm_name(ZNormMode m) {
  return m == ZNormMode::kPaperLiteral ? "paper" : "causal";
}

ZNormMode parse_znorm(std::string_view name) {
  if (name == "paper") return ZNormMode::kPaperLiteral;
  if (name == "causal") return ZNormMode::kCausalPrefix;
  throw ContractError("unknown znorm mode '" + std::string(name) + "'; valid: paper, causal");
}

template <typename S>
Var<S> energy_linear(const Var<S>& x, const Var<S>& w, S b) {
  Var<S> e;
  if (w.rank() == 1) {
    Shape out_shape(x.shape().begin(), x.shape().end() - 1);
    e = reshape(matmul(x, reshape(w, {w.dim(0), 1})), out_shape);
  } else {
    e = matmul(x, w);
  }
  return b == S(0) ? e : add_scalar(e, b);
}

template <typename S>
Var<S> z_normalize(const Var<S>& e, ZNormMode mode, S eps) {
  const NdArray<S>& ev = e.value();
  if (ev.rank() == 0) throw ContractError("z_normalize on a scalar");
  const std::size_t n = ev.shape().back();
  const std::size_t rows = ev.numel() / n;
  // per-position statistics (per-row values repeated for the paper-literal mode)
  auto mu = std::make_shared<std::vector<double>>(ev.numel());
  auto sd = std::make_shared<std::vector<double>>(ev.numel());
  NdArray<S> out(ev.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const S* er = ev.data() + r * n;
    S* yr = out.data() + r * n;
    double* mr = mu->data() + r * n;
    double* sr = sd->data() + r * n;
    if (mode == ZNormMode::kPaperLiteral) {
      double m = 0.0;
      for (std::size_t t = 0; t < n; ++t) m += static_cast<double>(er[t]);
      m /= static_cast<double>(n);
      double v = 0.0;
      for (std::size_t t = 0; t < n; ++t) v += (er[t] - m) * (er[t] - m);
      const double s = std::sqrt(v / static_cast<double>(n));
      for (std::size_t t = 0; t < n; ++t) {
        mr[t] = m;
        sr[t] = s;
        yr[t] = static_cast<S>((er[t] - m) / (s + static_cast<double>(eps)));
      }
    } else {
      double m = 0.0;
      double m2 = 0.0;
      for (std::size_t t = 0; t < n; ++t) {
        const double x = static_cast<double>(er[t]);
        const double delta = x - m;
        m += delta / static_cast<double>(t + 1);
        m2 += delta * (x - m);
        const double s = std::sqrt(std::max(m2, 0.0) / static_cast<double>(t + 1));
        mr[t] = m;
        sr[t] = s;
        yr[t] = static_cast<S>((x - m) / (s + static_cast<double>(eps)));
      }
    }
  }
  return make_result<S>(std::move(out), {&e}, [e, mode, eps, mu, sd, n, rows](Tape<S>& tp, const NdArray<S>& g) {
    NdArray<S>* ge = tp.grad_buffer(e);
    const NdArray<S>& ev = e.value();
    const double ep = static_cast<double>(eps);
    for (std::size_t r = 0; r < rows; ++r) {
      const S* er = ev.data() + r * n;
      const S* gr = g.data() + r * n;
      const double* mr = mu->data() + r * n;
      const double* sr = sd->data() + r * n;
      S* dr = ge->data() + r * n;
      if (mode == ZNormMode::kPaperLiteral) {
        const double s = sr[0] + ep;
        double gbar = 0.0;
        double c = 0.0;
        for (std::size_t t = 0; t < n; ++t) {
          gbar += gr[t];
          c += gr[t] * (er[t] - mr[0]);
        }
        gbar /= static_cast<double>(n);
        const double k = sr[0] > 0.0 ? c / (s * s * static_cast<double>(n) * sr[0]) : 0.0;
        for (std::size_t t = 0; t < n; ++t) {
          dr[t] += static_cast<S>((gr[t] - gbar) / s - k * (er[t] - mr[0]));
        }
      } else {
        // suffix sums over t >= u of g_t / (n_t s_t), k_t and k_t mu_t
        double a = 0.0;
        double ksum = 0.0;
        double kmu = 0.0;
        for (std::size_t u = n; u-- > 0;) {
          const double cnt = static_cast<double>(u + 1);
          const double s = sr[u] + ep;
          a += gr[u] / (cnt * s);
          const double k = sr[u] > 0.0 ? gr[u] * (er[u] - mr[u]) / (s * s * cnt * sr[u]) : 0.0;
          ksum += k;
          kmu += k * mr[u];
          dr[u] += static_cast<S>(gr[u] / s - a - static_cast<double>(er[u]) * ksum + kmu);
        }
      }
    }
  });
}

template <typename S>
Var<S> gate_from_energy(const Var<S>& e_norm, const Var<S>& tau, const Var<S>& alpha) {
  return sigmoid(mul(alpha, sub(e_norm, tau)));
}

template <typename S>
Var<S> apply_gate(const Var<S>& attn, const Var<S>& g, S eps) {
  const NdArray<S>& av = attn.value();
  const NdArray<S>& gv = g.value();
  if (av.rank() < 2 || gv.rank() != av.rank() - 1 ||
      !std::equal(gv.shape().begin(), gv.shape().end() - 1, av.shape().begin()) ||
      gv.shape().back() != av.shape().back()) {
    throw DimensionError("apply_gate: attention " + shape_str(av.shape()) + " and gate " +
                         shape_str(gv.shape()) + " disagree");
  }
  const std::size_t tq = av.dim(-2);
  const std::size_t tk = av.dim(-1);
  const std::size_t batch = av.numel() / (tq * tk);
  auto out = std::make_shared<NdArray<S>>(av.shape());
  auto denom = std::make_shared<std::vector<S>>(batch * tq);
  for (std::size_t b = 0; b < batch; ++b) {
    const S* gb = gv.data() + b * tk;
    for (std::size_t i = 0; i < tq; ++i) {
      const S* ar = av.data() + (b * tq + i) * tk;
      S* orow = out->data() + (b * tq + i) * tk;
      S s = S(0);
      for (std::size_t j = 0; j < tk; ++j) s += ar[j] * gb[j];
      s = std::max(s, eps);
      (*denom)[b * tq + i] = s;
      const S inv = S(1) / s;
      for (std::size_t j = 0; j < tk; ++j) orow[j] = ar[j] * gb[j] * inv;
    }
  }
  std::shared_ptr<const NdArray<S>> y = out;
  return make_result<S>(y, {&attn, &g}, [attn, g, y, denom, batch, tq, tk, eps](Tape<S>& t, const NdArray<S>& grad) {
    NdArray<S>* ga = t.grad_buffer(attn);
    NdArray<S>* gg = t.grad_buffer(g);
    const NdArray<S>& av = attn.value();
    const NdArray<S>& gv = g.value();
    for (std::size_t b = 0; b < batch; ++b) {
      const S* gb = gv.data() + b * tk;
      for (std::size_t i = 0; i < tq; ++i) {
        const std::size_t row = (b * tq + i) * tk;
        const S* gr = grad.data() + row;
        const S* yr = y->data() + row;
        const S inv = S(1) / (*denom)[b * tq + i];
        // below the floor the denominator is a constant
        S r = S(0);
        if ((*denom)[b * tq + i] > eps) {
          for (std::size_t j = 0; j < tk; ++j) r += gr[j] * yr[j];
        }
        for (std::size_t j = 0; j < tk; ++j) {
          const S common = (gr[j] - r) * inv;
          if (ga) (*ga)[row + j] += gb[j] * common;
          if (gg) (*gg)[b * tk + j] += av[row + j] * common;
        }
      }
    }
  });
}

template <typename S>
Var<S> combine_scale_gates(const std::vector<Var<S>>& gates, const Var<S>* scale_logits) {
  if (gates.size() < 2) throw ContractError("combine_scale_gates needs at least two scales");
  const std::size_t scales = gates.size();
  const Var<S> stacked = stack(gates, 0);  // [S, B, H, T]
  if (scale_logits == nullptr) return mean_axis(stacked, 0);
  if (scale_logits->shape().back() != scales) {
    throw ContractError("combine_scale_gates: " + std::to_string(scales) + " gates but scale weights " +
                        shape_str(scale_logits->shape()));
  }
  const Var<S> w = softmax_lastdim(*scale_logits);
  Var<S> wb;
  if (w.rank() == 1) {
    Shape s(stacked.rank(), 1);
    s[0] = scales;
    wb = reshape(w, s);
  } else if (w.rank() == 2) {
    if (gates.front().rank() != 3 || gates.front().dim(1) != w.dim(0)) {
      throw ContractError("combine_scale_gates: per-head weights " + shape_str(w.shape()) +
                          " for gates " + shape_str(gates.front().shape()));
    }
    wb = reshape(transpose(w), {scales, 1, w.dim(0), 1});
  } else {
    throw DimensionError("combine_scale_gates: scale weights must be [S] or [H, S]");
  }
  return sum_axis(mul(stacked, wb), 0);
}

template <typename S>
Var<S> energy_conv(const Var<S>& x, const std::vector<Var<S>>& filters, const std::vector<Var<S>>& mix,
                   PadMode pad) {
  if (filters.size() != mix.size() || filters.empty()) {
    throw ContractError("energy_conv: need one mix per filter bank");
  }
  const Var<S> xt = permute(x, {0, 2, 1});  // [B, d, T]
  std::vector<Var<S>> per_scale;
  for (std::size_t s = 0; s < filters.size(); ++s) {
    const Var<S> y = permute(causal_conv1d(xt, filters[s], pad), {0, 2, 1});  // [B, T, d]
    per_scale.push_back(permute(matmul(y, mix[s]), {0, 2, 1}));             // [B, n, T]
  }
  return stack(per_scale, 1);
}

template <typename S>
Var<S> energy_morlet(const Var<S>& x, const Var<S>& omega, const Var<S>& sigma, PadMode pad) {
  if (omega.numel() != sigma.numel()) {
    throw DimensionError("energy_morlet: omega " + shape_str(omega.shape()) + " vs sigma " +
                         shape_str(sigma.shape()));
  }
  const std::size_t n = omega.numel();
  const Var<S> xt = permute(x, {0, 2, 1});  // [B, d, T]
  const Var<S> wf = reshape(omega, {n});
  const Var<S> sf = reshape(sigma, {n});
  std::vector<Var<S>> per_filter;
  for (std::size_t i = 0; i < n; ++i) {
    const Var<S> taps = morlet_taps(slice(wf, 0, i, i + 1), slice(sf, 0, i, i + 1));
    const std::size_t k = taps.dim(1);
    const Var<S> re = reshape(slice(taps, 0, 0, 1), {k});
    const Var<S> im = reshape(slice(taps, 0, 1, 2), {k});
    const Var<S> power = add(square(causal_conv1d(xt, re, pad)), square(causal_conv1d(xt, im, pad)));
    per_filter.push_back(mean_axis(power, 1));  // [B, T]
  }
  return stack(per_filter, 1);
}

template <typename S>
Var<S> energy_dwt(const Var<S>& x, int order, PadMode pad) {
  const DaubechiesFilter f = daubechies_coefficients(order);
  const std::size_t len = f.lowpass.size();
  NdArray<S> lo({len});
  NdArray<S> hi({len});
  NdArray<S> hi2({2 * len - 1});
  for (std::size_t k = 0; k < len; ++k) {
    lo[k] = static_cast<S>(f.lowpass[k]);
    hi[k] = static_cast<S>(f.highpass[k]);
    hi2[2 * k] = static_cast<S>(f.highpass[k]);
  }
  const Var<S> xt = permute(x, {0, 2, 1});  // [B, d, T]
  const Var<S> d1 = causal_conv1d(xt, Var<S>(std::move(hi)), pad);
  const Var<S> a1 = causal_conv1d(xt, Var<S>(std::move(lo)), pad);
  const Var<S> d2 = causal_conv1d(a1, Var<S>(std::move(hi2)), pad);
  return mean_axis(add(square(d1), square(d2)), 1);
}

#define EGA_INSTANTIATE_GATES(S)                                                                   \
  template Var<S> energy_linear(const Var<S>&, const Var<S>&, S);                                  \
  template Var<S> z_normalize(const Var<S>&, ZNormMode, S);                                        \
  template Var<S> gate_from_energy(const Var<S>&, const Var<S>&, const Var<S>&);                   \
  template Var<S> apply_gate(const Var<S>&, const Var<S>&, S);                                     \
  template Var<S> combine_scale_gates(const std::vector<Var<S>>&, const Var<S>*);                  \
  template Var<S> energy_conv(const Var<S>&, const std::vector<Var<S>>&, const std::vector<Var<S>>&, \
                              PadMode);                                                            \
  template Var<S> energy_morlet(const Var<S>&, const Var<S>&, const Var<S>&, PadMode);             \
  template Var<S> energy_dwt(const Var<S>&, int, PadMode);

EGA_INSTANTIATE_GATES(float)
EGA_INSTANTIATE_GATES(double)

}  // namespace ega
