#include "ega/analysis.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

namespace ega {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

std::string fmt(double v, int precision = 8) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> split_line(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, sep)) out.push_back(cell);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

}  // namespace

// ---- run directories ----

std::string summary_json(const RunSummary& s) {
  json j{{"variant", s.variant},
         {"dataset", s.dataset},
         {"seed", s.seed},
         {"steps", s.steps},
         {"final_train", s.final_train},
         {"final_val", s.final_val},
         {"best_val", s.best_val},
         {"batch_fingerprint", hex64(s.batch_fingerprint)},
         {"params", s.params},
         {"gate_params", s.gate_params}};
  return j.dump(2);
}

RunSummary summary_from_json(const std::string& text) {
  const json j = json::parse(text);
  RunSummary s;
  s.variant = j.at("variant").get<std::string>();
  s.dataset = j.at("dataset").get<std::string>();
  s.seed = j.at("seed").get<std::uint64_t>();
  s.steps = j.at("steps").get<std::size_t>();
  s.final_train = j.at("final_train").get<double>();
  s.final_val = j.at("final_val").get<double>();
  s.best_val = j.at("best_val").get<double>();
  s.batch_fingerprint = std::stoull(j.at("batch_fingerprint").get<std::string>(), nullptr, 16);
  s.params = j.at("params").get<std::size_t>();
  s.gate_params = j.at("gate_params").get<std::size_t>();
  return s;
}

std::string run_config_json(const std::string& dataset, const std::string& data_path, const ModelConfig& model,
                            const TrainConfig& train) {
  json j{{"dataset", dataset},
         {"data_path", data_path},
         {"model", json::parse(model_config_json(model))},
         {"train", json::parse(train_config_json(train))}};
  return j.dump(2);
}

std::vector<MetricsRow> parse_metrics_csv(const std::string& text) {
  std::vector<MetricsRow> rows;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line_no == 1) {
      if (line != metrics_csv_header()) throw IoError("metrics.csv: unexpected header '" + line + "'");
      continue;
    }
    const auto cells = split_line(line, ',');
    if (cells.size() != 6) throw IoError("metrics.csv line " + std::to_string(line_no) + ": expected 6 columns");
    try {
      MetricsRow r;
      r.step = std::stoul(cells[0]);
      r.train_loss = std::stod(cells[1]);
      if (!cells[2].empty()) r.val_loss = std::stod(cells[2]);
      r.lr = std::stod(cells[3]);
      r.grad_norm = std::stod(cells[4]);
      r.wall_ms = std::stod(cells[5]);
      rows.push_back(r);
    } catch (const std::logic_error&) {
      throw IoError("metrics.csv line " + std::to_string(line_no) + ": not a number");
    }
  }
  return rows;
}

std::vector<GateRecord> parse_gates_jsonl(const std::string& text) {
  std::vector<GateRecord> out;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      GateRecord r;
      r.step = j.at("step").get<std::size_t>();
      r.layer = j.at("layer").get<std::size_t>();
      r.head = j.at("head").get<std::size_t>();
      r.scale = j.at("scale").get<std::size_t>();
      r.tau = j.at("tau").get<double>();
      r.alpha = j.at("alpha").get<double>();
      if (!j.at("omega_sigma").is_null()) r.omega_sigma = j["omega_sigma"].get<double>();
      if (!j.at("scale_weight").is_null()) r.scale_weight = j["scale_weight"].get<double>();
      out.push_back(r);
    } catch (const json::exception& e) {
      throw IoError("gates.jsonl line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

RunRecord load_run(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("run directory not found: " + dir.string());
  RunRecord r;
  r.dir = dir;
  try {
    const json cfg = json::parse(read_file(dir / "config.json"));
    r.dataset = cfg.at("dataset").get<std::string>();
    r.data_path = cfg.value("data_path", "");
    r.model = model_config_from_json(cfg.at("model").dump());
    r.train = train_config_from_json(cfg.at("train").dump());
    r.summary = summary_from_json(read_file(dir / "summary.json"));
  } catch (const json::exception& e) {
    throw IoError("malformed run files in " + dir.string() + ": " + e.what());
  }
  r.metrics = parse_metrics_csv(read_file(dir / "metrics.csv"));
  if (r.metrics.empty()) throw IoError("no metrics rows in " + (dir / "metrics.csv").string());
  if (fs::exists(dir / "gates.jsonl")) r.gates = parse_gates_jsonl(read_file(dir / "gates.jsonl"));
  if (fs::exists(dir / "checkpoint.bin")) r.checkpoint = dir / "checkpoint.bin";
  return r;
}

// ---- comparisons ----

Comparison compare_runs(const RunSummary& a, const RunSummary& b) {
  std::string why;
  if (a.dataset != b.dataset) why = "datasets differ (" + a.dataset + " vs " + b.dataset + ")";
  else if (a.seed != b.seed) why = "seeds differ (" + std::to_string(a.seed) + " vs " + std::to_string(b.seed) + ")";
  else if (a.steps != b.steps) why = "step counts differ (" + std::to_string(a.steps) + " vs " + std::to_string(b.steps) + ")";
  else if (a.batch_fingerprint != b.batch_fingerprint) {
    why = "batch fingerprints differ (" + hex64(a.batch_fingerprint) + " vs " + hex64(b.batch_fingerprint) + ")";
  }
  if (!why.empty()) throw ContractError("runs are not comparable: " + why);
  return {a.final_val - b.final_val, a.final_val - a.final_train, b.final_val - b.final_train};
}

// ---- threshold statistics ----

TauStatistics tau_statistics(const std::vector<GateRecord>& records) {
  std::map<std::size_t, std::pair<double, std::size_t>> by_step;
  for (const auto& r : records) {
    auto& [sum, n] = by_step[r.step];
    sum += r.tau;
    ++n;
  }
  if (by_step.size() < 2) {
    throw ContractError("tau statistics need at least 2 gate snapshots, got " + std::to_string(by_step.size()));
  }
  TauStatistics t;
  for (const auto& [step, acc] : by_step) t.trajectory.push_back({step, acc.first / static_cast<double>(acc.second)});
  const std::size_t last = by_step.rbegin()->first;
  for (const auto& r : records)
    if (r.step == last) t.finals.push_back(r);
  t.mean = t.trajectory.back().mean_tau;
  t.deviation = t.mean - kReportedTau;
  return t;
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

ThresholdFraction above_threshold_fraction(double tau, std::span<const double> energies) {
  ThresholdFraction f;
  f.analytic = 1.0 - normal_cdf(tau);
  if (!energies.empty()) {
    const auto above = std::count_if(energies.begin(), energies.end(), [tau](double e) { return e > tau; });
    f.empirical = static_cast<double>(above) / static_cast<double>(energies.size());
    f.difference = *f.empirical - f.analytic;
  }
  return f;
}

template <typename S>
std::vector<double> collect_normalized_energy(const TransformerModel<S>& model, const Corpus& corpus,
                                              const TrainConfig& c, std::size_t n_batches) {
  std::vector<double> out;
  if (model.config().variant == GateVariant::kBase) return out;
  for (std::size_t i = 0; i < n_batches; ++i) {
    const Batch b = sample_batch(corpus, Split::kVal, c.context, c.batch, c.seed, i, Stream::kEvalBatch);
    ForwardTrace<S> trace;
    model.forward(b.inputs, nullptr, nullptr, &trace);
    for (const auto& layer : trace.layers)
      for (S v : layer.energy_norm.values()) out.push_back(static_cast<double>(v));
  }
  return out;
}

// ---- scalograms ----

template <typename S>
ScalogramReport scalogram_report(const TransformerModel<S>& model, const Vocab& vocab, const std::string& probe,
                                 std::size_t layer, std::size_t n_scales) {
  const ModelConfig& cfg = model.config();
  if (layer < 1 || layer > cfg.n_layers) {
    throw ContractError("layer " + std::to_string(layer) + " outside [1, " + std::to_string(cfg.n_layers) + "]");
  }
  ScalogramReport rep;
  rep.layer = layer;
  std::u32string text = decode_utf8(probe);
  if (text.empty()) throw ContractError("scalogram probe is empty");
  if (text.size() > cfg.context) {
    rep.warning = "probe has " + std::to_string(text.size()) + " characters; truncated to the context of " +
                  std::to_string(cfg.context);
    text.resize(cfg.context);
  }
  rep.probe = encode_utf8(text);
  const std::vector<std::int32_t> ids = vocab.encode(text);
  const TokenArray tokens{Shape{1, ids.size()}, ids};

  ForwardTrace<S> trace;
  model.forward(tokens, nullptr, nullptr, &trace);
  const NdArray<S>& resid = trace.layers[layer - 1].residual;  // [1, T, d]
  const std::size_t T = ids.size(), d = cfg.d_model;
  NdArray<double> signals(Shape{d, T});
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t k = 0; k < d; ++k) signals[k * T + t] = static_cast<double>(resid[t * d + k]);
  const auto scales = log_spaced_scales(1.0, 316.0, n_scales);
  rep.scalogram = mean_scalogram(signals, scales, CwtAlignment::kCentered);
  return rep;
}

EnergySpectrum energy_spectrum(const Scalogram& s) {
  EnergySpectrum e;
  e.scales = s.scales;
  const std::size_t n = s.scales.size();
  const std::size_t T = n == 0 ? 0 : s.power.numel() / n;
  e.energy.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t t = 0; t < T; ++t) e.energy[i] += s.power[i * T + t];
  for (std::size_t k : kConvFilterLengths) e.markers.push_back(static_cast<double>(k));
  return e;
}

// ---- sequence-length ablation ----

SeqlenRow seqlen_row(const ModelConfig& model, const TrainConfig& train, const Corpus& corpus, std::size_t context,
                     std::size_t tokens_per_batch) {
  if (context == 0 || context > model.context) {
    throw ContractError("sequence length " + std::to_string(context) + " outside [1, " + std::to_string(model.context) +
                        "]");
  }
  if (tokens_per_batch % context != 0) {
    throw ContractError("tokens per batch " + std::to_string(tokens_per_batch) + " is not a multiple of " +
                        std::to_string(context));
  }
  TrainConfig tc = train;
  tc.context = context;
  tc.batch = tokens_per_batch / context;
  if (tc.micro_batch > tc.batch) tc.micro_batch = 0;
  SeqlenRow row;
  row.context = context;
  row.batch = tc.batch;
  for (GateVariant v : {GateVariant::kBase, GateVariant::kEga1}) {
    ModelConfig mc = model;
    mc.variant = v;
    TransformerModel<float> m(mc);
    TrainCallbacks cb;
    cb.record_wall_time = false;
    const TrainResult r = ega::train(m, corpus, tc, cb);
    if (v == GateVariant::kBase) {
      row.val_base = r.final_val;
      row.fingerprint_base = r.batch_fingerprint;
    } else {
      row.val_ega1 = r.final_val;
      row.fingerprint_ega1 = r.batch_fingerprint;
    }
  }
  if (row.fingerprint_base != row.fingerprint_ega1) {
    throw ContractError("batch fingerprints diverged at T=" + std::to_string(context));
  }
  row.delta = row.val_base - row.val_ega1;
  return row;
}

std::vector<SeqlenRow> seqlen_ablation(const ModelConfig& model, const TrainConfig& train, const Corpus& corpus,
                                       const std::vector<std::size_t>& lengths, std::size_t tokens_per_batch) {
  for (std::size_t T : lengths) {
    if (T == 0 || T > model.context) {
      throw ContractError("sequence length " + std::to_string(T) + " outside [1, " + std::to_string(model.context) +
                          "]");
    }
  }
  std::vector<SeqlenRow> rows;
  for (std::size_t T : lengths) rows.push_back(seqlen_row(model, train, corpus, T, tokens_per_batch));
  return rows;
}

// ---- tables ----

std::string tau_trajectory_csv(const TauStatistics& t) {
  std::ostringstream os;
  os << "step,mean_tau\n";
  for (const auto& p : t.trajectory) os << p.step << ',' << fmt(p.mean_tau) << '\n';
  return os.str();
}

std::string tau_finals_csv(const TauStatistics& t) {
  std::ostringstream os;
  os << "layer,head,scale,tau,alpha\n";
  for (const auto& r : t.finals) os << r.layer << ',' << r.head << ',' << r.scale << ',' << fmt(r.tau) << ',' << fmt(r.alpha) << '\n';
  return os.str();
}

std::string scalogram_csv(const Scalogram& s) {
  const std::size_t n = s.scales.size();
  const std::size_t T = n == 0 ? 0 : s.power.numel() / n;
  std::ostringstream os;
  os << "scale";
  for (std::size_t t = 0; t < T; ++t) os << ",t" << t;
  os << '\n';
  for (std::size_t i = 0; i < n; ++i) {
    os << fmt(s.scales[i]);
    for (std::size_t t = 0; t < T; ++t) os << ',' << fmt(s.power[i * T + t]);
    os << '\n';
  }
  return os.str();
}

std::string spectrum_csv(const EnergySpectrum& s) {
  std::ostringstream os;
  os << "scale,energy\n";
  for (std::size_t i = 0; i < s.scales.size(); ++i) os << fmt(s.scales[i]) << ',' << fmt(s.energy[i]) << '\n';
  return os.str();
}

std::string seqlen_csv(const std::vector<SeqlenRow>& rows) {
  std::ostringstream os;
  os << "T,B,val_base,val_ega1,delta,fingerprint\n";
  for (const auto& r : rows) {
    os << r.context << ',' << r.batch << ',' << fmt(r.val_base) << ',' << fmt(r.val_ega1) << ',' << fmt(r.delta) << ','
       << hex64(r.fingerprint_base) << '\n';
  }
  return os.str();
}

#define EGA_INSTANTIATE_ANALYSIS(S)                                                                              \
  template std::vector<double> collect_normalized_energy<S>(const TransformerModel<S>&, const Corpus&,          \
                                                            const TrainConfig&, std::size_t);                  \
  template ScalogramReport scalogram_report<S>(const TransformerModel<S>&, const Vocab&, const std::string&, \
                                               std::size_t, std::size_t);

EGA_INSTANTIATE_ANALYSIS(float)
EGA_INSTANTIATE_ANALYSIS(double)

}  // namespace ega
