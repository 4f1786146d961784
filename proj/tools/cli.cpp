#include "cli.hpp"

#include "ega/analysis.hpp"
#include "ega/grad_check.hpp"
#include "ega/svg.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

namespace ega::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kDefaultProbe =
    "To be or not to be that is the question Whether tis nobler in the mind to suffer";

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Everything a training run needs. Filled from defaults, then --config, then flags.
struct RunOptions {
  std::string dataset = "shakespeare";
  std::string data_path;
  ModelConfig model;
  TrainConfig train;
  std::string out;
  std::string config_file;
  bool resume = false;
  bool force = false;
  bool wall_time = false;
  std::size_t stop_after = 0;
};

std::string default_data_path(const std::string& dataset) {
  return dataset == "ptb" ? "data/ptb" : "data/tinyshakespeare.txt";
}

std::string run_tag(const std::string& variant, const std::string& dataset, std::uint64_t seed) {
  return variant + "_" + dataset + "_s" + std::to_string(seed);
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + p.string());
  out << text;
  if (!out) throw IoError("write failed: " + p.string());
}

std::string fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

std::string sci(double v) {
  std::ostringstream os;
  os << std::scientific << std::setprecision(2) << v;
  return os.str();
}

std::string signed_fixed(double v, int digits) { return (v >= 0.0 ? "+" : "") + fixed(v, digits); }

// Flags that only override the configuration when given on the command line.
class Overrides {
 public:
  template <typename T, typename Target>
  CLI::Option* add(CLI::App& app, const std::string& name, Target& target, const std::string& help) {
    auto holder = std::make_shared<T>(static_cast<T>(target));
    CLI::Option* opt = app.add_option(name, *holder, help);
    opt->default_val(*holder);
    appliers_.push_back([opt, holder, &target] {
      if (opt->count() > 0) target = static_cast<Target>(*holder);
    });
    return opt;
  }
  template <typename T>
  CLI::Option* add_custom(CLI::App& app, const std::string& name, T initial, std::function<void(const T&)> apply,
                          const std::string& help) {
    auto holder = std::make_shared<T>(std::move(initial));
    CLI::Option* opt = app.add_option(name, *holder, help);
    opt->default_val(*holder);
    appliers_.push_back([opt, holder, apply] {
      if (opt->count() > 0) apply(*holder);
    });
    return opt;
  }
  void apply() const {
    for (const auto& f : appliers_) f();
  }

 private:
  std::vector<std::function<void()>> appliers_;
};

// Training-related flags shared by train, ablate and analyze seqlen.
void add_run_flags(CLI::App& app, RunOptions& o, Overrides& ov, bool with_variant) {
  app.add_option("--config", o.config_file, "JSON run manifest (same layout as a run's config.json)");
  ov.add<std::string>(app, "--dataset", o.dataset, "Dataset name: shakespeare or ptb")
      ->check(CLI::IsMember({"shakespeare", "ptb"}));
  ov.add<std::string>(app, "--data-path", o.data_path,
                      "Text file, or a directory holding <dataset>.train.txt / <dataset>.valid.txt "
                      "(default data/tinyshakespeare.txt or data/ptb)");
  if (with_variant) {
    ov.add_custom<std::string>(
        app, "--variant", std::string(variant_name(o.model.variant)),
        [&o](const std::string& v) { o.model.variant = parse_variant(v); },
        "Gate variant: " + valid_variant_names());
  }
  ov.add_custom<std::uint64_t>(
      app, "--seed", o.train.seed,
      [&o](const std::uint64_t& s) {
        o.train.seed = s;
        o.model.seed = s;
      },
      "Seed for initialization, batches and dropout");
  ov.add<std::size_t>(app, "--steps", o.train.steps, "Optimizer steps");
  ov.add_custom<std::size_t>(
      app, "--context", o.train.context,
      [&o](const std::size_t& t) {
        o.train.context = t;
        o.model.context = t;
      },
      "Sequence length (also the model's positional table size)");
  ov.add<std::size_t>(app, "--batch", o.train.batch, "Sequences per optimizer step");
  ov.add<std::size_t>(app, "--micro-batch", o.train.micro_batch,
                      "Sequences per forward pass (0 = whole batch); bounds peak memory");
  ov.add_custom<std::string>(
      app, "--znorm", std::string(znorm_name(o.model.znorm)),
      [&o](const std::string& z) { o.model.znorm = parse_znorm(z); }, "Energy statistics: paper or causal");
  ov.add<double>(app, "--lr", o.train.lr_max, "Peak learning rate");
  ov.add<std::size_t>(app, "--warmup", o.train.warmup, "Linear warmup steps");
  ov.add<double>(app, "--weight-decay", o.train.weight_decay, "AdamW decoupled weight decay");
  ov.add<double>(app, "--clip", o.train.clip_norm, "Global gradient-norm clip");
  ov.add<std::size_t>(app, "--eval-every", o.train.eval_every, "Steps between validation evaluations");
  ov.add<std::size_t>(app, "--eval-batches", o.train.eval_batches, "Fixed validation batches per evaluation");
  ov.add<std::size_t>(app, "--snapshot-every", o.train.snapshot_every, "Steps between gate snapshots");
  ov.add<std::size_t>(app, "--checkpoint-every", o.train.checkpoint_every,
                      "Steps between checkpoints (0 = final only)");
  ov.add<std::size_t>(app, "--layers", o.model.n_layers, "Transformer blocks");
  ov.add<std::size_t>(app, "--heads", o.model.n_heads, "Attention heads");
  ov.add<std::size_t>(app, "--d-model", o.model.d_model, "Embedding width");
  ov.add<double>(app, "--dropout", o.model.dropout, "Dropout rate");
  ov.add<double>(app, "--tau-init", o.model.tau_init, "Initial gate threshold");
  ov.add<double>(app, "--alpha-init", o.model.alpha_init, "Initial gate sharpness");
  app.add_flag("--wall-time", o.wall_time, "Record per-step wall time in metrics.csv (otherwise 0.0, keeping reruns identical)");
  app.add_flag("--resume", o.resume, "Continue from the checkpoint in the output directory");
  app.add_flag("--force", o.force, "Write into a non-empty output directory");
  app.add_option("--stop-after", o.stop_after,
                 "Checkpoint and stop once this many steps are done (0 = run to the end); continue with --resume");
}

// defaults < --config < flags
void finalize(RunOptions& o, const Overrides& ov) {
  if (!o.config_file.empty()) {
    json j;
    try {
      j = json::parse(read_text(o.config_file));
      if (j.contains("dataset")) o.dataset = j["dataset"].get<std::string>();
      if (j.contains("data_path")) o.data_path = j["data_path"].get<std::string>();
      if (j.contains("model")) o.model = model_config_from_json(j["model"].dump());
      if (j.contains("train")) o.train = train_config_from_json(j["train"].dump());
    } catch (const json::exception& e) {
      throw UsageError("malformed config " + o.config_file + ": " + e.what());
    }
  }
  ov.apply();
  if (o.dataset != "shakespeare" && o.dataset != "ptb") throw UsageError("unknown dataset '" + o.dataset + "'");
  if (o.data_path.empty()) o.data_path = default_data_path(o.dataset);
  if (o.model.context < o.train.context) o.model.context = o.train.context;
}

Corpus load_dataset(const std::string& dataset, const std::string& path) {
  return load_corpus(path, dataset);
}

// ---- train ----

struct RunOutcome {
  int code = kExitOk;
  RunSummary summary;
};

template <typename F>
void rewrite_lines(const fs::path& p, bool keep_header, F keep) {
  if (!fs::exists(p)) return;
  std::istringstream in(read_text(p));
  std::string line, out;
  bool first = true;
  while (std::getline(in, line)) {
    if ((first && keep_header) || (!line.empty() && keep(line))) out += line + '\n';
    first = false;
  }
  write_text(p, out);
}

std::size_t leading_step(const std::string& csv_line) { return std::stoul(csv_line.substr(0, csv_line.find(','))); }

RunOutcome run_training(RunOptions o, std::ostream& log, std::mutex* log_mutex = nullptr) {
  auto say = [&](const std::string& s) {
    if (log_mutex) {
      std::lock_guard<std::mutex> lock(*log_mutex);
      log << s << '\n' << std::flush;
    } else {
      log << s << '\n' << std::flush;
    }
  };
  const std::string vname(variant_name(o.model.variant));
  const fs::path dir = o.out.empty() ? fs::path("runs") / run_tag(vname, o.dataset, o.train.seed) : fs::path(o.out);
  const fs::path ckpt = dir / "checkpoint.bin";

  if (o.resume && fs::exists(dir / "summary.json")) {
    RunOutcome done;
    done.summary = summary_from_json(read_text(dir / "summary.json"));
    if (done.summary.steps == o.train.steps) {
      say("[" + vname + "] already complete in " + dir.string());
      return done;
    }
  }
  const bool resuming = o.resume && fs::exists(ckpt);
  if (!resuming && fs::exists(dir) && !fs::is_empty(dir) && !o.force) {
    throw UsageError("output directory " + dir.string() + " is not empty (pass --force to overwrite or --resume)");
  }

  const Corpus corpus = load_dataset(o.dataset, o.data_path);
  o.model.vocab = corpus.vocab.size();
  o.model.validate();
  o.train.validate();
  fs::create_directories(dir);

  TransformerModel<float> model(o.model);
  OptimState<float> state = OptimState<float>::zeros_like(model.parameters());
  TrainProgress progress;
  if (resuming) {
    const CheckpointInfo info = read_checkpoint_info(ckpt);
    if (model_config_json(info.model) != model_config_json(o.model) ||
        train_config_json(info.train) != train_config_json(o.train)) {
      throw UsageError("checkpoint " + ckpt.string() + " was written with a different configuration");
    }
    load_checkpoint(ckpt, model, &state);
    progress = info.progress;
    const std::size_t done = progress.step;
    rewrite_lines(dir / "metrics.csv", true, [&](const std::string& l) { return leading_step(l) <= done; });
    rewrite_lines(dir / "train_raw.csv", true, [&](const std::string& l) { return leading_step(l) <= done; });
    rewrite_lines(dir / "gates.jsonl", false,
                  [&](const std::string& l) { return json::parse(l).at("step").get<std::size_t>() <= done; });
    say("[" + vname + "] resuming at step " + std::to_string(done));
  } else {
    write_text(dir / "config.json", run_config_json(o.dataset, o.data_path, o.model, o.train));
    write_text(dir / "metrics.csv", metrics_csv_header() + "\n");
    write_text(dir / "train_raw.csv", "step,loss\n");
    write_text(dir / "gates.jsonl", "");
  }

  say("[" + vname + "] " + std::to_string(model.count_params()) + " parameters (" +
      std::to_string(model.count_gate_params()) + " in gates), vocabulary " + std::to_string(corpus.vocab.size()) +
      ", " + std::to_string(corpus.train.size()) + " train / " + std::to_string(corpus.val.size()) + " val chars");

  std::ofstream metrics(dir / "metrics.csv", std::ios::app);
  std::ofstream raw(dir / "train_raw.csv", std::ios::app);
  std::ofstream gates(dir / "gates.jsonl", std::ios::app);
  if (!metrics || !raw || !gates) throw IoError("cannot open logs in " + dir.string());

  TrainCallbacks cb;
  cb.record_wall_time = o.wall_time;
  cb.on_metrics = [&](const MetricsRow& r) {
    metrics << metrics_csv_row(r) << '\n' << std::flush;
    std::ostringstream line;
    line << r.step << ',' << std::setprecision(8) << r.train_loss_raw;
    raw << line.str() << '\n' << std::flush;
    if (r.val_loss) {
      say("[" + vname + "] step " + std::to_string(r.step) + "  train " + fixed(r.train_loss, 4) + "  val " +
          fixed(*r.val_loss, 4) + "  lr " + sci(r.lr) + "  |g| " + fixed(r.grad_norm, 3));
    }
  };
  cb.on_gates = [&](const std::vector<GateRecord>& g) {
    for (const auto& r : g) gates << gate_record_json(r) << '\n';
    gates << std::flush;
  };
  cb.on_checkpoint = [&](const TrainProgress& p) { save_checkpoint(ckpt, model, o.train, p, &state); };
  if (o.stop_after > 0) {
    cb.should_stop = [&](const TrainProgress& p) { return p.step >= o.stop_after; };
  }

  TrainResult result;
  try {
    result = train(model, corpus, o.train, cb, &state, &progress);
  } catch (const TrainingDiverged& e) {
    say(std::string("[") + vname + "] aborted: " + e.what());
    return {kExitDiverged, {}};
  } catch (const NonFiniteError& e) {
    say(std::string("[") + vname + "] aborted: " + e.what());
    return {kExitDiverged, {}};
  }
  if (progress.step < o.train.steps) {
    say("[" + vname + "] stopped after step " + std::to_string(progress.step) + " of " +
        std::to_string(o.train.steps) + "; continue with --resume");
    return {kExitOk, {}};
  }
  if (result.metrics.empty()) result.final_val = evaluate(model, corpus, Split::kVal, o.train);

  RunSummary s{vname,
               o.dataset,
               o.train.seed,
               o.train.steps,
               progress.ema,
               result.final_val,
               progress.has_val ? progress.best_val : result.final_val,
               result.batch_fingerprint,
               model.count_params(),
               model.count_gate_params()};
  write_text(dir / "summary.json", summary_json(s) + "\n");
  say("[" + vname + "] done: train " + fixed(s.final_train, 4) + "  val " + fixed(s.final_val, 4) + "  -> " +
      dir.string());
  return {kExitOk, s};
}

// ---- ablate ----

int run_ablation(const RunOptions& base_opts, std::vector<std::string> names, std::size_t jobs, std::ostream& out,
                 std::ostream& err) {
  std::vector<GateVariant> variants;
  std::set<GateVariant> seen;
  for (const auto& n : names) {
    const GateVariant v = parse_variant(n);
    if (!seen.insert(v).second) {
      err << "warning: variant " << variant_name(v) << " listed more than once; running it once\n";
      continue;
    }
    variants.push_back(v);
  }
  if (variants.empty()) throw UsageError("--variants is empty");
  const fs::path root = base_opts.out.empty() ? fs::path("runs") / ("ablation_" + base_opts.dataset) : fs::path(base_opts.out);

  std::vector<RunOutcome> outcomes(variants.size());
  std::mutex log_mutex;
  std::vector<std::exception_ptr> errors(variants.size());
  auto run_one = [&](std::size_t i) {
    try {
      RunOptions o = base_opts;
      o.model.variant = variants[i];
      o.out = (root / std::string(variant_name(variants[i]))).string();
      outcomes[i] = run_training(o, err, &log_mutex);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  if (jobs <= 1) {
    for (std::size_t i = 0; i < variants.size(); ++i) {
      run_one(i);
      if (errors[i] || outcomes[i].code != kExitOk) break;
    }
  } else {
    std::size_t next = 0;
    std::mutex next_mutex;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < std::min(jobs, variants.size()); ++w) {
      pool.emplace_back([&] {
        for (;;) {
          std::size_t i;
          {
            std::lock_guard<std::mutex> lock(next_mutex);
            if (next == variants.size()) return;
            i = next++;
          }
          run_one(i);
        }
      });
    }
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  for (const auto& o : outcomes)
    if (o.code != kExitOk) return o.code;

  for (std::size_t i = 0; i < variants.size(); ++i) {
    if (outcomes[i].summary.steps != base_opts.train.steps) {
      out << "ablation incomplete (" << variant_name(variants[i]) << " stopped early); rerun with --resume\n";
      return kExitOk;
    }
  }
  const std::uint64_t fp = outcomes.front().summary.batch_fingerprint;
  for (std::size_t i = 0; i < variants.size(); ++i) {
    if (outcomes[i].summary.batch_fingerprint != fp) {
      err << "error: batch fingerprint of " << variant_name(variants[i])
          << " differs from the first run; the ablation is invalid\n";
      return kExitUsage;
    }
  }
  const RunSummary* base = nullptr;
  std::size_t base_params = 0;
  for (std::size_t i = 0; i < variants.size(); ++i) {
    if (variants[i] == GateVariant::kBase) base = &outcomes[i].summary;
  }
  if (base) {
    base_params = base->params;
  } else {
    err << "warning: base is not in --variants; the delta column stays empty\n";
    ModelConfig m = base_opts.model;
    m.variant = GateVariant::kBase;
    m.vocab = load_dataset(base_opts.dataset, base_opts.data_path).vocab.size();
    base_params = TransformerModel<float>(m).count_params();
  }
  std::ostringstream csv;
  csv << "variant,val,delta,gap,extra_params\n";
  out << std::left << std::setw(9) << "variant" << std::setw(9) << "val" << std::setw(10) << "delta" << std::setw(8)
      << "gap"
      << "extra_params\n";
  for (std::size_t i = 0; i < variants.size(); ++i) {
    const RunSummary& s = outcomes[i].summary;
    const std::string label(variant_label(variants[i]));
    const double gap = s.final_val - s.final_train;
    const std::string delta = base ? signed_fixed(compare_runs(*base, s).delta, 4) : "";
    const long extra = static_cast<long>(s.params) - static_cast<long>(base_params);
    csv << label << ',' << fixed(s.final_val, 4) << ',' << delta << ',' << fixed(gap, 4) << ',' << extra << '\n';
    out << std::left << std::setw(9) << label << std::setw(9) << fixed(s.final_val, 4) << std::setw(10)
        << (delta.empty() ? "-" : delta) << std::setw(8) << fixed(gap, 4) << extra << '\n';
  }
  const fs::path table = root / ("ablation_" + base_opts.dataset + "_s" + std::to_string(base_opts.train.seed) + ".csv");
  write_text(table, csv.str());
  out << "batch fingerprint " << std::hex << std::setw(16) << std::setfill('0') << fp << std::dec << std::setfill(' ')
      << " shared by all runs\nwrote " << table.string() << '\n';
  return kExitOk;
}

// ---- analyze ----

struct LoadedRun {
  RunRecord record;
  Corpus corpus;
  std::unique_ptr<TransformerModel<float>> model;
};

LoadedRun load_trained(const std::string& dir, const std::string& data_path_override) {
  LoadedRun r;
  r.record = load_run(dir);
  if (r.record.checkpoint.empty()) throw IoError("no checkpoint.bin in " + dir);
  const std::string path = data_path_override.empty() ? r.record.data_path : data_path_override;
  r.corpus = load_dataset(r.record.dataset, path);
  r.model = std::make_unique<TransformerModel<float>>(r.record.model);
  load_checkpoint(r.record.checkpoint, *r.model);
  return r;
}

std::string tag_of(const RunRecord& r) { return run_tag(r.summary.variant, r.dataset, r.summary.seed); }

int analyze_tau(const std::string& run, const std::string& out_dir, const std::string& data_path, std::size_t batches,
                std::ostream& out, std::ostream& err) {
  const RunRecord rec = load_run(run);
  if (rec.gates.empty()) {
    err << "error: " << run << " has no gate snapshots (variant " << rec.summary.variant << ")\n";
    return kExitUsage;
  }
  const TauStatistics t = tau_statistics(rec.gates);
  const fs::path dir = out_dir.empty() ? fs::path(run) : fs::path(out_dir);
  fs::create_directories(dir);
  const std::string tag = tag_of(rec);
  write_text(dir / ("tau_trajectory_" + tag + ".csv"), tau_trajectory_csv(t));
  write_text(dir / ("tau_finals_" + tag + ".csv"), tau_finals_csv(t));

  json report{{"variant", rec.summary.variant},
              {"dataset", rec.dataset},
              {"seed", rec.summary.seed},
              {"final_step", t.trajectory.back().step},
              {"initial_mean_tau", t.trajectory.front().mean_tau},
              {"mean_tau", t.mean},
              {"deviation_from_0.35", t.deviation}};
  ThresholdFraction frac = above_threshold_fraction(t.mean);
  if (batches > 0 && !rec.checkpoint.empty()) {
    try {
      LoadedRun lr = load_trained(run, data_path);
      const std::vector<double> e = collect_normalized_energy(*lr.model, lr.corpus, lr.record.train, batches);
      frac = above_threshold_fraction(t.mean, e);
    } catch (const IoError& e) {
      err << "warning: empirical fraction skipped: " << e.what() << '\n';
    }
  }
  report["above_threshold_analytic"] = frac.analytic;
  report["above_threshold_empirical"] = frac.empirical ? json(*frac.empirical) : json(nullptr);
  std::size_t with_os = 0, near = 0;
  for (const auto& r : t.finals) {
    if (!r.omega_sigma) continue;
    ++with_os;
    if (*r.omega_sigma < 5.05) ++near;
  }
  if (with_os > 0) report["omega_sigma_below_5.05_fraction"] = static_cast<double>(near) / static_cast<double>(with_os);
  write_text(dir / ("tau_report_" + tag + ".json"), report.dump(2) + "\n");

  out << "tau over " << t.finals.size() << " gate scalars at step " << t.trajectory.back().step << ": mean "
      << fixed(t.mean, 4) << " (started at " << fixed(t.trajectory.front().mean_tau, 4) << ", "
      << signed_fixed(t.deviation, 4) << " from 0.35)\n";
  out << "tokens above threshold: analytic " << fixed(frac.analytic, 4);
  if (frac.empirical) out << ", empirical " << fixed(*frac.empirical, 4) << " (" << signed_fixed(*frac.difference, 4) << ")";
  out << '\n';
  if (with_os > 0) {
    out << "omega*sigma < 5.05 on " << near << " of " << with_os << " scales\n";
  }
  out << "wrote " << (dir / ("tau_trajectory_" + tag + ".csv")).string() << '\n';
  return kExitOk;
}

int analyze_scalogram(const std::string& run, const std::string& out_dir, const std::string& data_path,
                      const std::string& probe, std::size_t layer, bool spectrum, std::ostream& out,
                      std::ostream& err) {
  LoadedRun lr = load_trained(run, data_path);
  const ScalogramReport rep = scalogram_report(*lr.model, lr.corpus.vocab, probe, layer);
  if (rep.warning) err << "warning: " << *rep.warning << '\n';
  const fs::path dir = out_dir.empty() ? fs::path(run) : fs::path(out_dir);
  fs::create_directories(dir);
  const std::string tag = tag_of(lr.record) + "_L" + std::to_string(layer);
  const std::size_t T = rep.scalogram.power.dim(1);
  if (!spectrum) {
    write_text(dir / ("scalogram_" + tag + ".csv"), scalogram_csv(rep.scalogram));
    write_text(dir / ("scalogram_" + tag + ".svg"),
               svg::heatmap({"Mean Morlet scalogram, block " + std::to_string(layer) + " output", "position", "scale", false},
                            rep.scalogram.power, rep.scalogram.scales));
    out << "scalogram [" << rep.scalogram.scales.size() << " scales x " << T << " positions] of \"" << rep.probe
        << "\"\nwrote " << (dir / ("scalogram_" + tag + ".svg")).string() << '\n';
    return kExitOk;
  }
  const EnergySpectrum es = energy_spectrum(rep.scalogram);
  write_text(dir / ("spectrum_" + tag + ".csv"), spectrum_csv(es));
  std::vector<svg::Marker> markers;
  for (double m : es.markers) markers.push_back({m, "k=" + fixed(m, 0)});
  write_text(dir / ("spectrum_" + tag + ".svg"),
             svg::line_plot({"Energy per scale", "scale", "energy", true},
                            {{std::string(variant_label(lr.record.model.variant)), es.scales, es.energy}}, markers));
  // fine scales against the coarsest decile, reported only
  double fine = 0.0, coarse = 0.0;
  std::size_t nf = 0, nc = 0;
  const std::size_t decile = std::max<std::size_t>(1, es.scales.size() / 10);
  for (std::size_t i = 0; i < es.scales.size(); ++i) {
    if (es.scales[i] <= 3.0) fine += es.energy[i], ++nf;
    if (i + decile >= es.scales.size()) coarse += es.energy[i], ++nc;
  }
  out << "mean energy at scales <= 3: " << (nf ? fine / nf : 0.0) << ", coarsest decile: " << (nc ? coarse / nc : 0.0)
      << "\nwrote " << (dir / ("spectrum_" + tag + ".svg")).string() << '\n';
  return kExitOk;
}

int analyze_compare(const std::string& base_dir, const std::string& other_dir, std::ostream& out) {
  const RunRecord a = load_run(base_dir), b = load_run(other_dir);
  const Comparison c = compare_runs(a, b);
  out << "delta " << signed_fixed(c.delta, 4) << "  (" << a.summary.variant << " val " << fixed(a.summary.final_val, 4)
      << ", " << b.summary.variant << " val " << fixed(b.summary.final_val, 4) << ")\n"
      << "gap   " << a.summary.variant << ' ' << fixed(c.gap_base, 4) << ", " << b.summary.variant << ' '
      << fixed(c.gap_other, 4) << '\n';
  return kExitOk;
}

// ---- plot ----

int plot_runs(const std::vector<std::string>& runs, const std::string& out_file, std::ostream& out, std::ostream& err) {
  std::vector<RunRecord> recs;
  for (const auto& r : runs) recs.push_back(load_run(r));
  std::map<std::string, int> label_count;
  for (const auto& r : recs) ++label_count[std::string(variant_label(r.model.variant))];
  std::vector<svg::Series> val, gap;
  std::vector<std::string> labels;
  std::vector<double> finals;
  for (const auto& r : recs) {
    std::string label(variant_label(r.model.variant));
    if (label_count[label] > 1) label += " " + fs::path(r.dir).filename().string();
    svg::Series v{label, {}, {}}, g{label, {}, {}};
    for (const auto& m : r.metrics) {
      if (!m.val_loss) continue;
      v.x.push_back(static_cast<double>(m.step));
      v.y.push_back(*m.val_loss);
      g.x.push_back(static_cast<double>(m.step));
      g.y.push_back(*m.val_loss - m.train_loss);
    }
    if (v.x.empty()) {
      err << "error: no validation rows in " << (r.dir / "metrics.csv").string() << '\n';
      return kExitUsage;
    }
    labels.push_back(label);
    finals.push_back(r.summary.final_val);
    val.push_back(std::move(v));
    gap.push_back(std::move(g));
  }
  const fs::path target = out_file.empty() ? fs::path("training_curves.svg") : fs::path(out_file);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  write_text(target, svg::training_figure(val, labels, finals, gap));
  out << "wrote " << target.string() << " (" << recs.size() << " runs)\n";
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Energy-gated attention lab: train character-level transformers, run ablations and analyses", "ega"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every command");

  // train
  RunOptions train_opts;
  Overrides train_ov;
  CLI::App* train_cmd = app.add_subcommand("train", "Train one model and write a run directory");
  add_run_flags(*train_cmd, train_opts, train_ov, true);
  train_cmd->add_option("--out", train_opts.out, "Run directory (default runs/<variant>_<dataset>_s<seed>)");

  // ablate
  RunOptions abl_opts;
  Overrides abl_ov;
  std::vector<std::string> abl_variants{"base", "ega1", "ega2", "ega4", "egac", "egam", "egadb2", "egadb4"};
  std::size_t abl_jobs = 1;
  CLI::App* abl_cmd = app.add_subcommand("ablate", "Train several variants on identical batches and tabulate them");
  add_run_flags(*abl_cmd, abl_opts, abl_ov, false);
  abl_cmd->add_option("--variants", abl_variants, "Comma-separated variants")->delimiter(',');
  abl_cmd->add_option("--jobs", abl_jobs, "Variants trained concurrently (runs stay independent)");
  abl_cmd->add_option("--out", abl_opts.out, "Ablation directory (default runs/ablation_<dataset>)");

  // analyze
  CLI::App* an_cmd = app.add_subcommand("analyze", "Post-hoc analyses of finished runs");
  an_cmd->require_subcommand(1);
  std::string an_run, an_out, an_data, probe = kDefaultProbe, cmp_base, cmp_other;
  std::size_t layer = 3, batches = 50;
  CLI::App* tau_cmd = an_cmd->add_subcommand("tau", "Threshold trajectories, final values and above-threshold share");
  tau_cmd->add_option("--run", an_run, "Run directory")->required();
  tau_cmd->add_option("--out", an_out, "Output directory (default: the run directory)");
  tau_cmd->add_option("--data-path", an_data, "Override the run's data path");
  tau_cmd->add_option("--batches", batches, "Validation batches for the empirical share (0 skips it)");
  CLI::App* sc_cmd = an_cmd->add_subcommand("scalogram", "Mean Morlet scalogram of a block's output on a probe");
  CLI::App* sp_cmd = an_cmd->add_subcommand("spectrum", "Energy per scale of the probe scalogram");
  for (CLI::App* c : {sc_cmd, sp_cmd}) {
    c->add_option("--run", an_run, "Run directory")->required();
    c->add_option("--probe", probe, "Probe text");
    c->add_option("--layer", layer, "Block whose output is analysed (1-indexed)");
    c->add_option("--out", an_out, "Output directory (default: the run directory)");
    c->add_option("--data-path", an_data, "Override the run's data path");
  }
  RunOptions sl_opts;
  Overrides sl_ov;
  std::vector<std::size_t> lengths{64, 128, 256};
  std::size_t tokens = kAblationTokensPerBatch;
  CLI::App* sl_cmd = an_cmd->add_subcommand("seqlen", "BASE vs EGA-1 at several sequence lengths, constant tokens per batch");
  add_run_flags(*sl_cmd, sl_opts, sl_ov, false);
  sl_cmd->add_option("--lengths", lengths, "Comma-separated sequence lengths")->delimiter(',');
  sl_cmd->add_option("--tokens", tokens, "Tokens per batch (B = tokens / T)");
  sl_cmd->add_option("--out", sl_opts.out, "Output directory");
  CLI::App* cmp_cmd = an_cmd->add_subcommand("compare", "Delta and generalisation gaps of two runs");
  cmp_cmd->add_option("--base", cmp_base, "Reference run directory")->required();
  cmp_cmd->add_option("--other", cmp_other, "Run compared against the reference")->required();

  // plot
  std::vector<std::string> plot_runs_dirs;
  std::string plot_out = "training_curves.svg";
  CLI::App* plot_cmd = app.add_subcommand("plot", "Validation curves, final losses and gap traces of several runs");
  plot_cmd->add_option("runs", plot_runs_dirs, "Run directories")->required();
  plot_cmd->add_option("--out", plot_out, "SVG file");

  std::vector<std::string> rest(args.begin() + (args.empty() ? 0 : 1), args.end());
  std::reverse(rest.begin(), rest.end());
  try {
    app.parse(rest);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*train_cmd) {
      finalize(train_opts, train_ov);
      return run_training(train_opts, err).code;
    }
    if (*abl_cmd) {
      finalize(abl_opts, abl_ov);
      return run_ablation(abl_opts, abl_variants, abl_jobs, out, err);
    }
    if (*plot_cmd) return plot_runs(plot_runs_dirs, plot_out, out, err);
    if (*tau_cmd) return analyze_tau(an_run, an_out, an_data, batches, out, err);
    if (*sc_cmd) return analyze_scalogram(an_run, an_out, an_data, probe, layer, false, out, err);
    if (*sp_cmd) return analyze_scalogram(an_run, an_out, an_data, probe, layer, true, out, err);
    if (*cmp_cmd) return analyze_compare(cmp_base, cmp_other, out);
    if (*sl_cmd) {
      finalize(sl_opts, sl_ov);
      const Corpus corpus = load_dataset(sl_opts.dataset, sl_opts.data_path);
      sl_opts.model.vocab = corpus.vocab.size();
      const std::size_t longest = *std::max_element(lengths.begin(), lengths.end());
      if (longest > sl_opts.model.context) {
        throw ContractError("sequence length " + std::to_string(longest) + " exceeds the model context " +
                            std::to_string(sl_opts.model.context));
      }
      std::vector<SeqlenRow> rows;
      for (std::size_t T : lengths) {
        err << "[seqlen] T=" << T << " B=" << tokens / T << '\n';
        rows.push_back(seqlen_row(sl_opts.model, sl_opts.train, corpus, T, tokens));
        const SeqlenRow& r = rows.back();
        out << "T=" << r.context << " B=" << r.batch << "  base " << fixed(r.val_base, 4) << "  ega1 "
            << fixed(r.val_ega1, 4) << "  delta " << signed_fixed(r.delta, 4) << '\n';
      }
      const fs::path dir = sl_opts.out.empty() ? fs::path("runs") : fs::path(sl_opts.out);
      fs::create_directories(dir);
      const fs::path file = dir / ("seqlen_" + sl_opts.dataset + "_s" + std::to_string(sl_opts.train.seed) + ".csv");
      write_text(file, seqlen_csv(rows));
      out << "wrote " << file.string() << '\n';
      return kExitOk;
    }
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const IoError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const CheckpointError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ContractError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::out_of_range& e) {  // unknown characters in a probe
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  return kExitUsage;
}

}  // namespace ega::cli
