#include "ega/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace ega {

std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h) {
  const auto* bytes = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= bytes[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

void ModelConfig::validate() const {
  if (n_layers == 0) throw ContractError("model needs at least one layer");
  if (n_heads == 0 || d_model % n_heads != 0) {
    throw ContractError("d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
                        std::to_string(n_heads));
  }
  if (context == 0) throw ContractError("context length must be >= 1");
  if (vocab == 0) throw ContractError("vocabulary must be non-empty");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ContractError("dropout must lie in [0, 1)");
}

template <typename S>
Parameter<S>* TransformerModel<S>::make_param(const std::string& name, Shape shape, ParamRole role, bool gate,
                                       double stddev, double fill) {
  NdArray<S> value(std::move(shape), static_cast<S>(fill));
  if (stddev > 0.0) {
    // keyed by name so shared parameters start identical across gate variants
    Rng rng(counter_hash(config_.seed, static_cast<std::uint64_t>(Stream::kInit), fnv1a(name.data(), name.size())));
    for (S& v : value.values()) v = static_cast<S>(fill + stddev * rng.normal());
  }
  params_.push_back(std::make_unique<Parameter<S>>(name, std::move(value), role));
  gate_flags_.push_back(gate);
  return params_.back().get();
}

template <typename S>
TransformerModel<S>::TransformerModel(const ModelConfig& config) : config_(config) {
  config_.validate();
  const std::size_t d = config_.d_model;
  const std::size_t h = config_.n_heads;
  const double sd = config_.init_std;
  const double resid_sd = sd / std::sqrt(2.0 * static_cast<double>(config_.n_layers));
  wte_ = make_param("wte", {config_.vocab, d}, ParamRole::kEmbedding, false, sd);
  wpe_ = make_param("wpe", {config_.context, d}, ParamRole::kEmbedding, false, sd);
  const std::size_t scales = scale_count(config_.variant);
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    Block<S> b{};
    b.ln1_gain = make_param(p + "ln1.gain", {d}, ParamRole::kNorm, false, 0.0, 1.0);
    b.ln1_bias = make_param(p + "ln1.bias", {d}, ParamRole::kNorm, false, 0.0);
    b.wq = make_param(p + "attn.wq", {d, d}, ParamRole::kWeight, false, sd);
    b.bq = make_param(p + "attn.bq", {d}, ParamRole::kBias, false, 0.0);
    b.wk = make_param(p + "attn.wk", {d, d}, ParamRole::kWeight, false, sd);
    b.bk = make_param(p + "attn.bk", {d}, ParamRole::kBias, false, 0.0);
    b.wv = make_param(p + "attn.wv", {d, d}, ParamRole::kWeight, false, sd);
    b.bv = make_param(p + "attn.bv", {d}, ParamRole::kBias, false, 0.0);
    b.wo = make_param(p + "attn.wo", {d, d}, ParamRole::kWeight, false, resid_sd);
    b.bo = make_param(p + "attn.bo", {d}, ParamRole::kBias, false, 0.0);
    b.ln2_gain = make_param(p + "ln2.gain", {d}, ParamRole::kNorm, false, 0.0, 1.0);
    b.ln2_bias = make_param(p + "ln2.bias", {d}, ParamRole::kNorm, false, 0.0);
    b.w1 = make_param(p + "mlp.w1", {d, 4 * d}, ParamRole::kWeight, false, sd);
    b.b1 = make_param(p + "mlp.b1", {4 * d}, ParamRole::kBias, false, 0.0);
    b.w2 = make_param(p + "mlp.w2", {4 * d, d}, ParamRole::kWeight, false, resid_sd);
    b.b2 = make_param(p + "mlp.b2", {d}, ParamRole::kBias, false, 0.0);

    GateParams<S>& g = b.gate;
    const std::string gp = p + "gate.";
    switch (config_.variant) {
      case GateVariant::kBase:
        break;
      case GateVariant::kEga1:
      case GateVariant::kEga2:
      case GateVariant::kEga4:
        g.w_proj = make_param(gp + "w_proj", {d, scales * h}, ParamRole::kWeight, true, sd);
        break;
      case GateVariant::kEgaC:
        for (std::size_t s = 0; s < scales; ++s) {
          const std::size_t k = kConvFilterLengths[s];
          g.filters.push_back(make_param(gp + "filter" + std::to_string(k), {d, k}, ParamRole::kWeight, true,
                                  1.0 / std::sqrt(static_cast<double>(k))));
          g.mix.push_back(make_param(gp + "mix" + std::to_string(k), {d, h}, ParamRole::kWeight, true, sd));
        }
        break;
      case GateVariant::kEgaM: {
        g.omega = make_param(gp + "omega", {scales, h}, ParamRole::kGateScalar, true, 0.0, 5.0);
        g.sigma = make_param(gp + "sigma", {scales, h}, ParamRole::kGateScalar, true, 0.0, 1.0);
        // small upward jitter keeps the filters distinct without leaving the admissible set
        Rng rng(counter_hash(config_.seed, static_cast<std::uint64_t>(Stream::kInit), l, 0x6a77));
        for (S& v : g.sigma->value->values()) v = static_cast<S>(1.0 + 0.05 * rng.uniform());
        break;
      }
      case GateVariant::kEgaDb2:
      case GateVariant::kEgaDb4:
        break;
    }
    if (config_.variant != GateVariant::kBase) {
      g.tau = make_param(gp + "tau", {scales, h}, ParamRole::kGateScalar, true, 0.0, config_.tau_init);
      g.alpha = make_param(gp + "alpha", {scales, h}, ParamRole::kGateScalar, true, 0.0, config_.alpha_init);
    }
    if (config_.variant == GateVariant::kEgaC || config_.variant == GateVariant::kEgaM) {
      g.scale_logits = make_param(gp + "scale_logits", {h, scales}, ParamRole::kGateScalar, true, 0.0);
    }
    blocks_.push_back(b);
  }
  lnf_gain_ = make_param("ln_f.gain", {d}, ParamRole::kNorm, false, 0.0, 1.0);
  lnf_bias_ = make_param("ln_f.bias", {d}, ParamRole::kNorm, false, 0.0);
}

template <typename S>
std::vector<Parameter<S>*> TransformerModel<S>::parameters() const {
  std::vector<Parameter<S>*> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.get());
  return out;
}

template <typename S>
Parameter<S>* TransformerModel<S>::find(const std::string& name) const {
  for (const auto& p : params_) {
    if (p->name == name) return p.get();
  }
  return nullptr;
}

template <typename S>
Parameter<S>& TransformerModel<S>::at(const std::string& name) const {
  Parameter<S>* p = find(name);
  if (p == nullptr) throw ContractError("no parameter named '" + name + "'");
  return *p;
}

template <typename S>
bool TransformerModel<S>::is_gate_parameter(const Parameter<S>* p) const {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].get() == p) return gate_flags_[i];
  }
  return false;
}

template <typename S>
std::size_t TransformerModel<S>::count_params() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p->numel();
  return n;
}

template <typename S>
std::size_t TransformerModel<S>::count_gate_params() const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (gate_flags_[i]) n += params_[i]->numel();
  }
  return n;
}

template <typename S>
std::size_t TransformerModel<S>::enforce_admissibility() {
  std::size_t n = 0;
  for (Block<S>& b : blocks_) {
    if (b.gate.omega != nullptr) n += ega::enforce_admissibility(*b.gate.omega->value, *b.gate.sigma->value);
  }
  return n;
}

template <typename S>
void TransformerModel<S>::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

namespace {

template <typename S>
Var<S> use(Parameter<S>* p, Tape<S>* tape) {
  return tape ? tape->parameter(*p) : Var<S>(p->value, nullptr, -1);
}

}  // namespace

template <typename S>
Var<S> TransformerModel<S>::gate_for(const Block<S>& blk, const Var<S>& h, Tape<S>* tape,
                                     LayerTrace<S>* trace) const {
  const GateParams<S>& gp = blk.gate;
  const std::size_t scales = scale_count(config_.variant);
  const std::size_t heads = config_.n_heads;
  const std::size_t batch = h.dim(0);
  const std::size_t t_len = h.dim(1);
  const PadMode pad = gate_pad_mode(config_.znorm);

  Var<S> energy;  // [S, B, H or 1, T]
  switch (config_.variant) {
    case GateVariant::kEga1:
    case GateVariant::kEga2:
    case GateVariant::kEga4:
      energy = permute(reshape(matmul(h, use(gp.w_proj, tape)), {batch, t_len, scales, heads}), {2, 0, 3, 1});
      break;
    case GateVariant::kEgaC: {
      std::vector<Var<S>> filters, mix;
      for (std::size_t s = 0; s < scales; ++s) {
        filters.push_back(use(gp.filters[s], tape));
        mix.push_back(use(gp.mix[s], tape));
      }
      energy = permute(energy_conv(h, filters, mix, pad), {1, 0, 2, 3});
      break;
    }
    case GateVariant::kEgaM:
      energy = permute(reshape(energy_morlet(h, use(gp.omega, tape), use(gp.sigma, tape), pad),
                               {batch, scales, heads, t_len}),
                       {1, 0, 2, 3});
      break;
    case GateVariant::kEgaDb2:
    case GateVariant::kEgaDb4:
      energy = reshape(energy_dwt(h, config_.variant == GateVariant::kEgaDb2 ? 2 : 4, pad), {1, batch, 1, t_len});
      break;
    case GateVariant::kBase:
      throw ContractError("BASE has no gate");
  }
  const Var<S> normed = z_normalize(energy, config_.znorm);
  const Var<S> tau = reshape(use(gp.tau, tape), {scales, 1, heads, 1});
  const Var<S> alpha = reshape(use(gp.alpha, tape), {scales, 1, heads, 1});
  Var<S> g = gate_from_energy(normed, tau, alpha);  // [S, B, H, T]
  if (scales == 1) {
    g = reshape(g, {batch, heads, t_len});
  } else if (gp.scale_logits != nullptr) {
    const Var<S> w = reshape(transpose(softmax_lastdim(use(gp.scale_logits, tape))), {scales, 1, heads, 1});
    g = sum_axis(mul(g, w), 0);
  } else {
    g = mean_axis(g, 0);
  }
  if (trace != nullptr) {
    trace->energy = energy.value();
    trace->energy_norm = normed.value();
    trace->gate = g.value();
  }
  return g;
}

template <typename S>
Var<S> TransformerModel<S>::forward(const TokenArray& tokens, Tape<S>* tape, Rng* dropout_rng,
                                    ForwardTrace<S>* trace) const {
  if (tokens.shape.size() != 2 || tokens.ids.size() != tokens.shape[0] * tokens.shape[1]) {
    throw DimensionError("forward: tokens must be [B, T], got " + shape_str(tokens.shape));
  }
  const std::size_t batch = tokens.shape[0];
  const std::size_t t_len = tokens.shape[1];
  if (t_len > config_.context) {
    throw ContextError("sequence length " + std::to_string(t_len) + " exceeds context " +
                       std::to_string(config_.context));
  }
  if (t_len == 0) throw ContextError("empty sequence");
  for (std::int32_t id : tokens.ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab) {
      throw VocabularyError("token id " + std::to_string(id) + " outside vocabulary of size " +
                            std::to_string(config_.vocab));
    }
  }
  const std::size_t d = config_.d_model;
  const std::size_t heads = config_.n_heads;
  const std::size_t dk = config_.head_dim();
  const bool training = dropout_rng != nullptr && config_.dropout > 0.0;
  const double p = config_.dropout;
  auto drop = [&](const Var<S>& v) { return training ? dropout(v, p, *dropout_rng, true) : v; };

  Var<S> x = add(embedding(tokens, use(wte_, tape)), slice(use(wpe_, tape), 0, 0, t_len));
  x = drop(x);
  const NdArray<S> mask = causal_mask<S>(t_len);
  const S inv_sqrt_dk = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dk)));
  if (trace != nullptr) trace->layers.assign(blocks_.size(), LayerTrace<S>{});

  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const Block<S>& b = blocks_[l];
    LayerTrace<S>* lt = trace ? &trace->layers[l] : nullptr;
    const Var<S> h = layer_norm(x, use(b.ln1_gain, tape), use(b.ln1_bias, tape));
    auto heads_of = [&](Parameter<S>* w, Parameter<S>* bias) {
      const Var<S> y = add(matmul(h, use(w, tape)), use(bias, tape));
      return permute(reshape(y, {batch, t_len, heads, dk}), {0, 2, 1, 3});
    };
    const Var<S> q = heads_of(b.wq, b.bq);
    const Var<S> k = heads_of(b.wk, b.bk);
    const Var<S> v = heads_of(b.wv, b.bv);
    Var<S> attn = softmax_lastdim(scale(matmul(q, transpose(k)), inv_sqrt_dk), &mask);
    if (config_.variant != GateVariant::kBase) attn = apply_gate(attn, gate_for(b, h, tape, lt));
    attn = drop(attn);
    Var<S> y = reshape(permute(matmul(attn, v), {0, 2, 1, 3}), {batch, t_len, d});
    y = drop(add(matmul(y, use(b.wo, tape)), use(b.bo, tape)));
    x = add(x, y);

    const Var<S> h2 = layer_norm(x, use(b.ln2_gain, tape), use(b.ln2_bias, tape));
    Var<S> m = gelu(add(matmul(h2, use(b.w1, tape)), use(b.b1, tape)));
    m = drop(add(matmul(m, use(b.w2, tape)), use(b.b2, tape)));
    x = add(x, m);
    if (lt != nullptr) lt->residual = x.value();
  }
  x = layer_norm(x, use(lnf_gain_, tape), use(lnf_bias_, tape));
  return matmul(x, transpose(use(wte_, tape)));
}

template <typename S>
GateDiagnostics TransformerModel<S>::gate_diagnostics(std::size_t layer, const LayerTrace<S>* trace) const {
  const Block<S>& b = blocks_.at(layer);
  const GateParams<S>& gp = b.gate;
  const std::size_t heads = config_.n_heads;
  const std::size_t scales = scale_count(config_.variant);
  GateDiagnostics out;
  if (config_.variant == GateVariant::kBase) return out;
  out.tau.assign(heads, std::vector<double>(scales));
  out.alpha.assign(heads, std::vector<double>(scales));
  for (std::size_t s = 0; s < scales; ++s) {
    for (std::size_t h = 0; h < heads; ++h) {
      out.tau[h][s] = static_cast<double>((*gp.tau->value)[s * heads + h]);
      out.alpha[h][s] = static_cast<double>((*gp.alpha->value)[s * heads + h]);
    }
  }
  if (gp.omega != nullptr) {
    out.omega_sigma.assign(heads, std::vector<double>(scales));
    for (std::size_t s = 0; s < scales; ++s)
      for (std::size_t h = 0; h < heads; ++h)
        out.omega_sigma[h][s] = static_cast<double>((*gp.omega->value)[s * heads + h]) *
                                static_cast<double>((*gp.sigma->value)[s * heads + h]);
  }
  if (scales > 1) {
    out.scale_weights.assign(heads, std::vector<double>(scales, 1.0 / static_cast<double>(scales)));
    if (gp.scale_logits != nullptr) {
      for (std::size_t h = 0; h < heads; ++h) {
        const S* row = gp.scale_logits->value->data() + h * scales;
        const double mx = static_cast<double>(*std::max_element(row, row + scales));
        double z = 0.0;
        for (std::size_t s = 0; s < scales; ++s) z += std::exp(static_cast<double>(row[s]) - mx);
        for (std::size_t s = 0; s < scales; ++s) {
          out.scale_weights[h][s] = std::exp(static_cast<double>(row[s]) - mx) / z;
        }
      }
    }
  }
  if (trace != nullptr && trace->energy.rank() == 4) {
    const NdArray<S>& e = trace->energy;
    const std::size_t hs = e.dim(2);
    const std::size_t t_len = e.dim(3);
    out.energy_mean.assign(heads, 0.0);
    out.energy_std.assign(heads, 0.0);
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t src = hs == 1 ? 0 : h;
      double sum = 0.0, sq = 0.0;
      std::size_t n = 0;
      for (std::size_t s = 0; s < e.dim(0); ++s)
        for (std::size_t bi = 0; bi < e.dim(1); ++bi)
          for (std::size_t t = 0; t < t_len; ++t) {
            const double v = static_cast<double>(e[((s * e.dim(1) + bi) * hs + src) * t_len + t]);
            sum += v;
            sq += v * v;
            ++n;
          }
      const double mean = sum / static_cast<double>(n);
      out.energy_mean[h] = mean;
      out.energy_std[h] = std::sqrt(std::max(0.0, sq / static_cast<double>(n) - mean * mean));
    }
    const NdArray<S>& g = trace->gate;
    out.active_fraction.assign(heads, 0.0);
    const std::size_t bsz = g.dim(0);
    for (std::size_t bi = 0; bi < bsz; ++bi)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t t = 0; t < t_len; ++t) {
          if (g[(bi * heads + h) * t_len + t] > S(0.5)) out.active_fraction[h] += 1.0;
        }
    for (double& f : out.active_fraction) f /= static_cast<double>(bsz * t_len);
  }
  return out;
}

template <typename S>
Var<S> cross_entropy_loss(const Var<S>& logits, const TokenArray& targets) {
  if (logits.rank() != 3 || targets.shape.size() != 2 || logits.dim(0) != targets.shape[0] ||
      logits.dim(1) != targets.shape[1]) {
    throw DimensionError("cross_entropy_loss: logits " + shape_str(logits.shape()) + " vs targets " +
                         shape_str(targets.shape));
  }
  return cross_entropy(logits, targets.ids);
}

template <typename S>
std::vector<std::int32_t> sample(const TransformerModel<S>& model, std::vector<std::int32_t> prompt, long n_new,
                                 double temperature, Rng& rng) {
  if (n_new < 0) throw ContractError("sample: n_new must be >= 0, got " + std::to_string(n_new));
  if (prompt.empty()) throw ContractError("sample: prompt must hold at least one token");
  const std::size_t window = model.config().context;
  const std::size_t vocab = model.config().vocab;
  for (long i = 0; i < n_new; ++i) {
    const std::size_t start = prompt.size() > window ? prompt.size() - window : 0;
    TokenArray ctx{{1, prompt.size() - start},
                   std::vector<std::int32_t>(prompt.begin() + static_cast<std::ptrdiff_t>(start), prompt.end())};
    const Var<S> logits = model.forward(ctx);
    const S* last = logits.value().data() + (ctx.shape[1] - 1) * vocab;
    std::size_t pick = 0;
    if (temperature <= 1e-6) {
      pick = static_cast<std::size_t>(std::max_element(last, last + vocab) - last);
    } else {
      const double mx = static_cast<double>(*std::max_element(last, last + vocab));
      std::vector<double> p(vocab);
      double z = 0.0;
      for (std::size_t v = 0; v < vocab; ++v) {
        p[v] = std::exp((static_cast<double>(last[v]) - mx) / temperature);
        z += p[v];
      }
      double u = rng.uniform() * z;
      pick = vocab - 1;
      for (std::size_t v = 0; v < vocab; ++v) {
        u -= p[v];
        if (u < 0.0) {
          pick = v;
          break;
        }
      }
    }
    prompt.push_back(static_cast<std::int32_t>(pick));
  }
  return prompt;
}

template <typename S>
std::uint64_t parameter_fingerprint(const TransformerModel<S>& model, bool gate_only) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const Parameter<S>* p : model.parameters()) {
    if (gate_only && !model.is_gate_parameter(p)) continue;
    h = fnv1a(p->name.data(), p->name.size(), h);
    for (std::size_t d : p->value->shape()) {
      const auto d64 = static_cast<std::uint64_t>(d);
      h = fnv1a(&d64, sizeof d64, h);
    }
    h = fnv1a(p->value->data(), p->value->numel() * sizeof(S), h);
  }
  return h;
}

template class TransformerModel<float>;
template class TransformerModel<double>;
template Var<float> cross_entropy_loss(const Var<float>&, const TokenArray&);
template Var<double> cross_entropy_loss(const Var<double>&, const TokenArray&);
template std::vector<std::int32_t> sample(const TransformerModel<float>&, std::vector<std::int32_t>, long, double,
                                          Rng&);
template std::vector<std::int32_t> sample(const TransformerModel<double>&, std::vector<std::int32_t>, long, double,
                                          Rng&);
template std::uint64_t parameter_fingerprint(const TransformerModel<float>&, bool);
template std::uint64_t parameter_fingerprint(const TransformerModel<double>&, bool);

}  // namespace ega
