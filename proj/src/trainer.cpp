#include "ega/trainer.hpp"

#include "ega/grad_check.hpp"

#include <json.hpp>

#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

namespace ega {

using nlohmann::json;

void TrainConfig::validate() const {
  if (steps == 0 || batch == 0 || context == 0) throw ContractError("steps, batch and context must be positive");
  if (warmup >= steps) {
    throw ContractError("warmup " + std::to_string(warmup) + " must be below steps " + std::to_string(steps));
  }
  if (!(lr_max > 0.0) || weight_decay < 0.0 || !(clip_norm > 0.0)) {
    throw ContractError("lr_max and clip_norm must be positive, weight_decay non-negative");
  }
  if (eval_every == 0 || eval_batches == 0) throw ContractError("evaluation cadence must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ContractError("betas must lie in [0, 1)");
  if (!(ema_decay >= 0.0 && ema_decay < 1.0)) throw ContractError("ema_decay must lie in [0, 1)");
}

double lr_at(std::size_t step, const TrainConfig& c) {
  if (step > c.steps) throw ContractError("lr_at: step " + std::to_string(step) + " beyond " + std::to_string(c.steps));
  if (step <= c.warmup) {
    return c.warmup == 0 ? c.lr_max : c.lr_max * static_cast<double>(step) / static_cast<double>(c.warmup);
  }
  const double progress = static_cast<double>(step - c.warmup) / static_cast<double>(c.steps - c.warmup);
  return 0.5 * c.lr_max * (1.0 + std::cos(std::numbers::pi * progress));
}

template <typename S>
OptimState<S> OptimState<S>::zeros_like(const std::vector<Parameter<S>*>& params) {
  OptimState<S> s;
  for (const Parameter<S>* p : params) {
    s.m.emplace_back(p->value->shape());
    s.v.emplace_back(p->value->shape());
  }
  return s;
}

template <typename S>
void adamw_step(const std::vector<Parameter<S>*>& params, OptimState<S>& state, double lr, const TrainConfig& c) {
  if (state.m.size() != params.size()) state = OptimState<S>::zeros_like(params);
  for (const Parameter<S>* p : params) {
    if (!p->grad.array().allFinite()) throw NonFiniteError("non-finite gradient in parameter '" + p->name + "'");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  const S b1 = static_cast<S>(c.beta1), b2 = static_cast<S>(c.beta2);
  const S step_size = static_cast<S>(lr / bc1);
  const S inv_sqrt_bc2 = static_cast<S>(1.0 / std::sqrt(bc2));
  const S eps = static_cast<S>(c.adam_eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter<S>& p = *params[i];
    auto theta = p.value->array();
    auto g = p.grad.array();
    auto m = state.m[i].array();
    auto v = state.v[i].array();
    if (p.role == ParamRole::kWeight && c.weight_decay > 0.0) theta *= static_cast<S>(1.0 - lr * c.weight_decay);
    m = b1 * m + (S(1) - b1) * g;
    v = b2 * v + (S(1) - b2) * g.square();
    theta -= step_size * m / (v.sqrt() * inv_sqrt_bc2 + eps);
  }
}

template <typename S>
double clip_global_norm(const std::vector<Parameter<S>*>& params, double max_norm) {
  double sq = 0.0;
  for (const Parameter<S>* p : params) sq += p->grad.array().template cast<double>().square().sum();
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const S factor = static_cast<S>(max_norm / norm);
    for (Parameter<S>* p : params) p->grad.array() *= factor;
  }
  return norm;
}

template <typename S>
std::vector<GateRecord> gate_snapshot(const TransformerModel<S>& model, std::size_t step) {
  std::vector<GateRecord> out;
  for (std::size_t l = 0; l < model.blocks().size(); ++l) {
    const GateDiagnostics d = model.gate_diagnostics(l);
    for (std::size_t h = 0; h < d.tau.size(); ++h) {
      for (std::size_t s = 0; s < d.tau[h].size(); ++s) {
        GateRecord r{step, l, h, s, d.tau[h][s], d.alpha[h][s], std::nullopt, std::nullopt};
        if (!d.omega_sigma.empty()) r.omega_sigma = d.omega_sigma[h][s];
        if (!d.scale_weights.empty()) r.scale_weight = d.scale_weights[h][s];
        out.push_back(r);
      }
    }
  }
  return out;
}

TrainingDiverged::TrainingDiverged(std::size_t s, double l)
    : std::runtime_error([&] {
        std::ostringstream os;
        os << "loss became non-finite at step " << s << " (lr " << l << ")";
        return os.str();
      }()),
      step(s),
      lr(l) {}

namespace {

TokenArray rows(const TokenArray& x, std::size_t begin, std::size_t end) {
  const std::size_t t = x.shape[1];
  return TokenArray{{end - begin, t},
                    std::vector<std::int32_t>(x.ids.begin() + static_cast<std::ptrdiff_t>(begin * t),
                                              x.ids.begin() + static_cast<std::ptrdiff_t>(end * t))};
}

}  // namespace

template <typename S>
double evaluate(const TransformerModel<S>& model, const Corpus& corpus, Split split, const TrainConfig& c) {
  const std::size_t rows_per_pass = c.micro_batch == 0 ? c.batch : c.micro_batch;
  double total = 0.0;
  for (std::size_t i = 0; i < c.eval_batches; ++i) {
    const Batch b = sample_batch(corpus, split, c.context, c.batch, c.seed, i, Stream::kEvalBatch);
    for (std::size_t r = 0; r < c.batch; r += rows_per_pass) {
      const std::size_t e = std::min(c.batch, r + rows_per_pass);
      const Var<S> loss = cross_entropy_loss(model.forward(rows(b.inputs, r, e)), rows(b.targets, r, e));
      total += static_cast<double>(loss.value().item()) * static_cast<double>(e - r);
    }
  }
  return total / static_cast<double>(c.eval_batches * c.batch);
}

template <typename S>
TrainResult train(TransformerModel<S>& model, const Corpus& corpus, const TrainConfig& c, const TrainCallbacks& cb,
                  OptimState<S>* state_in, TrainProgress* progress_in) {
  c.validate();
  if (model.config().vocab < corpus.vocab.size()) {
    throw ContractError("model vocabulary " + std::to_string(model.config().vocab) + " is smaller than corpus vocabulary " +
                        std::to_string(corpus.vocab.size()));
  }
  if (c.context > model.config().context) {
    throw ContractError("training context " + std::to_string(c.context) + " exceeds model context " +
                        std::to_string(model.config().context));
  }
  const std::vector<Parameter<S>*> params = model.parameters();
  OptimState<S> local_state;
  OptimState<S>& state = state_in ? *state_in : local_state;
  if (state.m.size() != params.size()) state = OptimState<S>::zeros_like(params);
  TrainProgress local_progress;
  TrainProgress& prog = progress_in ? *progress_in : local_progress;

  TrainResult result;
  result.batch_fingerprint = batch_fingerprint(corpus, c.seed, c.steps, c.context, c.batch);
  const std::size_t rows_per_pass = c.micro_batch == 0 ? c.batch : c.micro_batch;
  using Clock = std::chrono::steady_clock;

  if (prog.step == 0) {
    auto snap = gate_snapshot(model, 0);
    if (!snap.empty()) {
      if (cb.on_gates) cb.on_gates(snap);
      result.gates.insert(result.gates.end(), snap.begin(), snap.end());
    }
  }
  while (prog.step < c.steps) {
    const std::size_t step = prog.step;
    const auto t0 = Clock::now();
    const double lr = lr_at(step, c);
    const Batch batch = sample_batch(corpus, Split::kTrain, c.context, c.batch, c.seed, step);
    model.zero_grad();
    double loss_value = 0.0;
    std::uint64_t micro = 0;
    for (std::size_t r = 0; r < c.batch; r += rows_per_pass, ++micro) {
      const std::size_t e = std::min(c.batch, r + rows_per_pass);
      Rng dropout_rng(counter_hash(c.seed, static_cast<std::uint64_t>(Stream::kDropout), step, micro));
      Tape<S> tape;
      const Var<S> loss =
          cross_entropy_loss(model.forward(rows(batch.inputs, r, e), &tape, &dropout_rng), rows(batch.targets, r, e));
      const double weight = static_cast<double>(e - r) / static_cast<double>(c.batch);
      loss_value += weight * static_cast<double>(loss.value().item());
      if (!std::isfinite(loss_value)) throw TrainingDiverged(step + 1, lr);
      tape.backward(scale(loss, static_cast<S>(weight)));
    }
    const double norm = clip_global_norm(params, c.clip_norm);
    if (!std::isfinite(norm)) throw TrainingDiverged(step + 1, lr);
    adamw_step(params, state, lr, c);
    model.enforce_admissibility();
    prog.step = step + 1;
    prog.ema = prog.ema_started ? c.ema_decay * prog.ema + (1.0 - c.ema_decay) * loss_value : loss_value;
    prog.ema_started = true;

    MetricsRow row;
    row.step = prog.step;
    row.train_loss = prog.ema;
    row.train_loss_raw = loss_value;
    row.lr = lr;
    row.grad_norm = norm;
    if (prog.step % c.eval_every == 0 || prog.step == c.steps) {
      const double val = evaluate(model, corpus, Split::kVal, c);
      row.val_loss = val;
      prog.best_val = prog.has_val ? std::min(prog.best_val, val) : val;
      prog.has_val = true;
      result.final_val = val;
    }
    if (cb.record_wall_time) {
      row.wall_ms = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
    }
    if (cb.on_metrics) cb.on_metrics(row);
    result.metrics.push_back(row);

    if (c.snapshot_every > 0 && (prog.step % c.snapshot_every == 0 || prog.step == c.steps)) {
      auto snap = gate_snapshot(model, prog.step);
      if (!snap.empty()) {
        if (cb.on_gates) cb.on_gates(snap);
        result.gates.insert(result.gates.end(), snap.begin(), snap.end());
      }
    }
    const bool stop = prog.step < c.steps && cb.should_stop && cb.should_stop(prog);
    if (cb.on_checkpoint &&
        ((c.checkpoint_every > 0 && prog.step % c.checkpoint_every == 0) || prog.step == c.steps || stop)) {
      cb.on_checkpoint(prog);
    }
    if (stop) break;
  }
  result.final_train = prog.ema;
  result.best_val = prog.best_val;
  return result;
}

// ---- structured text ----

namespace {

json model_json(const ModelConfig& c) {
  return json{{"n_layers", c.n_layers}, {"n_heads", c.n_heads},   {"d_model", c.d_model},
              {"context", c.context},   {"vocab", c.vocab},       {"dropout", c.dropout},
              {"variant", std::string(variant_name(c.variant))},  {"znorm", std::string(znorm_name(c.znorm))},
              {"seed", c.seed},         {"init_std", c.init_std}, {"tau_init", c.tau_init},
              {"alpha_init", c.alpha_init}};
}

json train_json(const TrainConfig& c) {
  return json{{"steps", c.steps},
              {"batch", c.batch},
              {"context", c.context},
              {"lr_max", c.lr_max},
              {"warmup", c.warmup},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"adam_eps", c.adam_eps},
              {"weight_decay", c.weight_decay},
              {"clip_norm", c.clip_norm},
              {"eval_every", c.eval_every},
              {"eval_batches", c.eval_batches},
              {"snapshot_every", c.snapshot_every},
              {"checkpoint_every", c.checkpoint_every},
              {"micro_batch", c.micro_batch},
              {"ema_decay", c.ema_decay},
              {"seed", c.seed}};
}

template <typename T>
void take(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

ModelConfig model_from(const json& j) {
  ModelConfig c;
  take(j, "n_layers", c.n_layers);
  take(j, "n_heads", c.n_heads);
  take(j, "d_model", c.d_model);
  take(j, "context", c.context);
  take(j, "vocab", c.vocab);
  take(j, "dropout", c.dropout);
  if (j.contains("variant")) c.variant = parse_variant(j.at("variant").get<std::string>());
  if (j.contains("znorm")) c.znorm = parse_znorm(j.at("znorm").get<std::string>());
  take(j, "seed", c.seed);
  take(j, "init_std", c.init_std);
  take(j, "tau_init", c.tau_init);
  take(j, "alpha_init", c.alpha_init);
  return c;
}

TrainConfig train_from(const json& j) {
  TrainConfig c;
  take(j, "steps", c.steps);
  take(j, "batch", c.batch);
  take(j, "context", c.context);
  take(j, "lr_max", c.lr_max);
  take(j, "warmup", c.warmup);
  take(j, "beta1", c.beta1);
  take(j, "beta2", c.beta2);
  take(j, "adam_eps", c.adam_eps);
  take(j, "weight_decay", c.weight_decay);
  take(j, "clip_norm", c.clip_norm);
  take(j, "eval_every", c.eval_every);
  take(j, "eval_batches", c.eval_batches);
  take(j, "snapshot_every", c.snapshot_every);
  take(j, "checkpoint_every", c.checkpoint_every);
  take(j, "micro_batch", c.micro_batch);
  take(j, "ema_decay", c.ema_decay);
  take(j, "seed", c.seed);
  return c;
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(8) << v;
  return os.str();
}

}  // namespace

std::string model_config_json(const ModelConfig& c) { return model_json(c).dump(2); }
std::string train_config_json(const TrainConfig& c) { return train_json(c).dump(2); }
ModelConfig model_config_from_json(const std::string& text) { return model_from(json::parse(text)); }
TrainConfig train_config_from_json(const std::string& text) { return train_from(json::parse(text)); }

std::string metrics_csv_header() { return "step,train_loss,val_loss,lr,grad_norm,wall_ms"; }

std::string metrics_csv_row(const MetricsRow& r) {
  std::ostringstream os;
  os << r.step << ',' << fmt(r.train_loss) << ',' << (r.val_loss ? fmt(*r.val_loss) : "") << ',' << fmt(r.lr) << ','
     << fmt(r.grad_norm) << ',' << std::fixed << std::setprecision(1) << r.wall_ms;
  return os.str();
}

std::string gate_record_json(const GateRecord& r) {
  json j{{"step", r.step}, {"layer", r.layer}, {"head", r.head}, {"scale", r.scale}, {"tau", r.tau}, {"alpha", r.alpha}};
  j["omega_sigma"] = r.omega_sigma ? json(*r.omega_sigma) : json(nullptr);
  j["scale_weight"] = r.scale_weight ? json(*r.scale_weight) : json(nullptr);
  return j.dump();
}

// ---- checkpoints ----

namespace {

constexpr char kMagic[8] = {'E', 'G', 'A', 'C', 'K', 'P', 'T', '1'};

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint64_t get_u64(const char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

template <typename S>
void put_f32(std::string& out, const NdArray<S>& a) {
  for (S x : a.values()) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(x));
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
  }
}

template <typename S>
void get_f32(const char* p, NdArray<S>& a) {
  for (S& x : a.values()) {
    std::uint32_t bits = 0;
    for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
    x = static_cast<S>(std::bit_cast<float>(bits));
    p += 4;
  }
}

struct RawCheckpoint {
  json header;
  std::string payload;
};

RawCheckpoint read_raw(const std::filesystem::path& path, bool need_payload) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointError::Kind::kIo, "cannot open checkpoint " + path.string());
  char head[16];
  in.read(head, 16);
  if (in.gcount() != 16 || std::memcmp(head, kMagic, 7) != 0) {
    throw CheckpointError(CheckpointError::Kind::kFormat, path.string() + " is not a checkpoint file");
  }
  const std::uint64_t header_len = get_u64(head + 8);
  std::string text(header_len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(header_len));
  if (static_cast<std::uint64_t>(in.gcount()) != header_len) {
    throw CheckpointError(CheckpointError::Kind::kTruncated, path.string() + ": header is truncated");
  }
  RawCheckpoint raw;
  try {
    raw.header = json::parse(text);
  } catch (const json::exception& e) {
    throw CheckpointError(CheckpointError::Kind::kFormat, path.string() + ": unreadable header: " + e.what());
  }
  const auto version = raw.header.value("version", 0u);
  if (version != kCheckpointVersion) {
    throw CheckpointError(CheckpointError::Kind::kVersion, path.string() + ": format version " + std::to_string(version) +
                                                               ", this build reads " +
                                                               std::to_string(kCheckpointVersion));
  }
  if (need_payload) {
    const auto bytes = raw.header.at("payload_bytes").get<std::uint64_t>();
    raw.payload.resize(bytes);
    in.read(raw.payload.data(), static_cast<std::streamsize>(bytes));
    if (static_cast<std::uint64_t>(in.gcount()) != bytes) {
      throw CheckpointError(CheckpointError::Kind::kTruncated,
                            path.string() + ": payload holds " + std::to_string(in.gcount()) + " of " +
                                std::to_string(bytes) + " bytes");
    }
  }
  return raw;
}

CheckpointInfo info_from(const json& h) {
  CheckpointInfo info;
  info.version = h.at("version").get<std::uint32_t>();
  info.model = model_from(h.at("model"));
  info.train = train_from(h.at("train"));
  const json& p = h.at("progress");
  info.progress.step = p.at("step").get<std::size_t>();
  info.progress.ema = p.at("ema").get<double>();
  info.progress.ema_started = p.at("ema_started").get<bool>();
  info.progress.best_val = p.at("best_val").get<double>();
  info.progress.has_val = p.at("has_val").get<bool>();
  info.has_optimizer = h.at("has_optimizer").get<bool>();
  info.optimizer_step = h.at("optimizer_step").get<std::uint64_t>();
  return info;
}

}  // namespace

template <typename S>
void save_checkpoint(const std::filesystem::path& path, const TransformerModel<S>& model, const TrainConfig& train,
                     const TrainProgress& progress, const OptimState<S>* state) {
  const std::vector<Parameter<S>*> params = model.parameters();
  const bool with_opt = state != nullptr && state->m.size() == params.size();
  std::string payload;
  json table = json::array();
  for (const Parameter<S>* p : params) {
    table.push_back({{"name", p->name}, {"shape", p->value->shape()}, {"offset", payload.size()}});
    put_f32(payload, *p->value);
  }
  std::uint64_t moments_offset = payload.size();
  if (with_opt) {
    for (const auto& m : state->m) put_f32(payload, m);
    for (const auto& v : state->v) put_f32(payload, v);
  }
  json header{{"version", kCheckpointVersion},
              {"model", model_json(model.config())},
              {"train", train_json(train)},
              {"progress",
               {{"step", progress.step},
                {"ema", progress.ema},
                {"ema_started", progress.ema_started},
                {"best_val", progress.best_val},
                {"has_val", progress.has_val}}},
              {"params", table},
              {"has_optimizer", with_opt},
              {"optimizer_step", with_opt ? state->step : 0},
              {"moments_offset", moments_offset},
              {"payload_bytes", payload.size()}};
  const std::string text = header.dump();
  std::string bytes(kMagic, 8);
  put_u64(bytes, text.size());
  bytes += text;
  bytes += payload;

  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError(CheckpointError::Kind::kIo, "cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError(CheckpointError::Kind::kIo, "write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw CheckpointError(CheckpointError::Kind::kIo, "cannot rename into " + path.string() + ": " + ec.message());
}

CheckpointInfo read_checkpoint_info(const std::filesystem::path& path) {
  return info_from(read_raw(path, false).header);
}

template <typename S>
CheckpointInfo load_checkpoint(const std::filesystem::path& path, TransformerModel<S>& model, OptimState<S>* state) {
  const RawCheckpoint raw = read_raw(path, true);
  const CheckpointInfo info = info_from(raw.header);
  const std::vector<Parameter<S>*> params = model.parameters();
  const json& table = raw.header.at("params");
  if (table.size() != params.size()) {
    throw CheckpointError(CheckpointError::Kind::kShapeMismatch,
                          path.string() + ": checkpoint holds " + std::to_string(table.size()) +
                              " parameters (variant " + std::string(variant_name(info.model.variant)) +
                              "), model has " + std::to_string(params.size()) + " (variant " +
                              std::string(variant_name(model.config().variant)) + ")");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto name = table[i].at("name").get<std::string>();
    const auto shape = table[i].at("shape").get<Shape>();
    if (name != params[i]->name || shape != params[i]->value->shape()) {
      throw CheckpointError(CheckpointError::Kind::kShapeMismatch,
                            path.string() + ": entry " + name + " " + shape_str(shape) + " does not match model " +
                                params[i]->name + " " + shape_str(params[i]->value->shape()));
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto offset = table[i].at("offset").get<std::size_t>();
    if (offset + 4 * params[i]->numel() > raw.payload.size()) {
      throw CheckpointError(CheckpointError::Kind::kTruncated, path.string() + ": payload too short for " + params[i]->name);
    }
    get_f32(raw.payload.data() + offset, *params[i]->value);
  }
  if (state != nullptr && info.has_optimizer) {
    *state = OptimState<S>::zeros_like(params);
    state->step = info.optimizer_step;
    std::size_t offset = raw.header.at("moments_offset").get<std::size_t>();
    for (auto* bank : {&state->m, &state->v}) {
      for (auto& a : *bank) {
        if (offset + 4 * a.numel() > raw.payload.size()) {
          throw CheckpointError(CheckpointError::Kind::kTruncated, path.string() + ": optimizer moments truncated");
        }
        get_f32(raw.payload.data() + offset, a);
        offset += 4 * a.numel();
      }
    }
  }
  return info;
}

#define EGA_INSTANTIATE_TRAINER(S)                                                                              \
  template struct OptimState<S>;                                                                                \
  template void adamw_step(const std::vector<Parameter<S>*>&, OptimState<S>&, double, const TrainConfig&);      \
  template double clip_global_norm(const std::vector<Parameter<S>*>&, double);                                  \
  template std::vector<GateRecord> gate_snapshot(const TransformerModel<S>&, std::size_t);                     \
  template double evaluate(const TransformerModel<S>&, const Corpus&, Split, const TrainConfig&);               \
  template TrainResult train(TransformerModel<S>&, const Corpus&, const TrainConfig&, const TrainCallbacks&,    \
                             OptimState<S>*, TrainProgress*);                                                    \
  template void save_checkpoint(const std::filesystem::path&, const TransformerModel<S>&, const TrainConfig&,   \
                                const TrainProgress&, const OptimState<S>*);                                    \
  template CheckpointInfo load_checkpoint(const std::filesystem::path&, TransformerModel<S>&, OptimState<S>*);

EGA_INSTANTIATE_TRAINER(float)
EGA_INSTANTIATE_TRAINER(double)

}  // namespace ega
