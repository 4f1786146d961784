// Slow acceptance suite: reads the run directories left by tools/run_reproduction.sh and
// prints one PASS/FAIL line per reproduction criterion.
//
// Exit status: 0 when every criterion passes, 1 when a measured criterion fails, 77 when
// nothing measured failed but some runs are missing (ctest reports this as skipped).

#include "ega/analysis.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>

using namespace ega;
namespace fs = std::filesystem;

namespace {

enum class Status { kPass, kFail, kBlocked };

struct Outcome {
  Status status;
  std::string detail;
};

struct Blocked : std::runtime_error {
  using std::runtime_error::runtime_error;
};

fs::path root;

RunRecord run(const fs::path& rel, std::size_t steps) {
  const fs::path dir = root / rel;
  if (!fs::exists(dir / "summary.json")) throw Blocked("no finished run at " + dir.string());
  RunRecord r = load_run(dir);
  if (r.summary.steps != steps)
    throw std::runtime_error(dir.string() + " trained " + std::to_string(r.summary.steps) + " steps, expected " +
                             std::to_string(steps));
  return r;
}

std::string f4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

std::string s4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%+.4f", v);
  return buf;
}

Outcome reduced_run() {
  const RunRecord base = run("reduced/base", 1500), ega1 = run("reduced/ega1", 1500);
  const Comparison c = compare_runs(base, ega1);
  return {c.delta >= 0.03 ? Status::kPass : Status::kFail,
          "1500 steps: BASE " + f4(base.summary.final_val) + ", EGA-1 " + f4(ega1.summary.final_val) + ", delta " +
              s4(c.delta) + " (need >= 0.03)"};
}

Outcome full_run() {
  const RunRecord base = run("ablation_shakespeare/base", 5000), ega1 = run("ablation_shakespeare/ega1", 5000);
  const Comparison c = compare_runs(base, ega1);
  const double vb = base.summary.final_val, ve = ega1.summary.final_val;
  const bool pass = std::abs(vb - 1.4742) <= 0.06 && std::abs(ve - 1.3712) <= 0.06 && c.delta >= 0.07 &&
                    c.gap_other <= c.gap_base;
  return {pass ? Status::kPass : Status::kFail,
          "BASE " + f4(vb) + " (1.4742 +- 0.06), EGA-1 " + f4(ve) + " (1.3712 +- 0.06), delta " + s4(c.delta) +
              " (need >= 0.07), gaps " + f4(c.gap_base) + " / " + f4(c.gap_other)};
}

Outcome ablation_ordering() {
  std::map<std::string, double> val;
  const RunRecord base = run("ablation_shakespeare/base", 5000);
  for (GateVariant v : kAllVariants) {
    const std::string name(variant_name(v));
    const RunRecord r = run("ablation_shakespeare/" + name, 5000);
    compare_runs(base, r);
    val[name] = r.summary.final_val;
  }
  const double b = val["base"];
  const bool ordered = val["ega1"] < val["ega2"] && val["ega2"] < val["ega4"] && val["ega4"] < b + 0.01;
  bool fixed_close = true;
  for (const char* name : {"egadb2", "egadb4", "egam"}) fixed_close = fixed_close && std::abs(val[name] - b) <= 0.03;
  std::string detail;
  for (GateVariant v : kAllVariants) {
    if (!detail.empty()) detail += ", ";
    detail += std::string(variant_label(v)) + " " + f4(val[std::string(variant_name(v))]);
  }
  return {ordered && fixed_close ? Status::kPass : Status::kFail, detail};
}

Outcome cross_dataset() {
  const RunRecord base = run("ablation_ptb/base", 5000), ega1 = run("ablation_ptb/ega1", 5000);
  const Comparison c = compare_runs(base, ega1);
  return {c.delta >= 0.07 ? Status::kPass : Status::kFail,
          "PTB: BASE " + f4(base.summary.final_val) + ", EGA-1 " + f4(ega1.summary.final_val) + ", delta " +
              s4(c.delta) + " (need >= 0.07)"};
}

Outcome tau_convergence() {
  const TauStatistics zero = tau_statistics(run("ablation_shakespeare/ega1", 5000).gates);
  const TauStatistics neg = tau_statistics(run("tau_neg/ega1", 5000).gates);
  const auto inside = [](double m) { return m >= 0.15 && m <= 0.55; };
  return {inside(zero.mean) && inside(neg.mean) ? Status::kPass : Status::kFail,
          "mean final tau " + f4(zero.mean) + " from tau0 = 0, " + f4(neg.mean) +
              " from tau0 = -0.5 (need [0.15, 0.55])"};
}

Outcome morlet_boundary() {
  const TauStatistics t = tau_statistics(run("ablation_shakespeare/egam", 5000).gates);
  std::size_t with = 0, near = 0;
  for (const GateRecord& r : t.finals) {
    if (!r.omega_sigma) continue;
    ++with;
    near += *r.omega_sigma < 5.05 ? 1 : 0;
  }
  if (with == 0) return {Status::kFail, "EGA-M gate log has no omega*sigma values"};
  return {Status::kPass, "reported: omega*sigma < 5.05 on " + std::to_string(near) + " of " + std::to_string(with) +
                             " scales at step " + std::to_string(t.trajectory.back().step)};
}

Outcome scalogram_artifacts() {
  const RunRecord ega1 = run("ablation_shakespeare/ega1", 5000);
  const std::string tag = "ega1_" + ega1.dataset + "_s" + std::to_string(ega1.summary.seed);
  const fs::path dir = root / "analysis";
  const fs::path csv = dir / ("scalogram_" + tag + "_L3.csv");
  for (const fs::path& p : {csv, dir / ("scalogram_" + tag + "_L3.svg"), dir / ("spectrum_" + tag + "_L3.svg")})
    if (!fs::exists(p)) throw Blocked("missing " + p.string());
  std::ifstream in(csv);
  std::string line;
  std::getline(in, line);
  std::size_t rows = 0, cols = 0;
  bool non_negative = true, rectangular = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::getline(ss, cell, ',');  // scale
    std::size_t n = 0;
    while (std::getline(ss, cell, ',')) {
      non_negative = non_negative && std::stod(cell) >= 0.0;
      ++n;
    }
    if (rows == 0) cols = n;
    rectangular = rectangular && n == cols;
    ++rows;
  }
  const bool pass = rows == 64 && cols == 64 && rectangular && non_negative;
  return {pass ? Status::kPass : Status::kFail,
          "layer-3 scalogram [" + std::to_string(rows) + ", " + std::to_string(cols) + "]" +
              (non_negative ? ", non-negative" : ", NEGATIVE entries") + ", heatmap and spectrum written"};
}

}  // namespace

int main(int argc, char** argv) {
  const char* env = std::getenv("EGA_RUNS_DIR");
  root = argc > 1 ? fs::path(argv[1]) : env ? fs::path(env) : fs::path("runs");

  struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> run;
  };
  const Criterion criteria[] = {
      {9, "reduced run", reduced_run},
      {10, "full run", full_run},
      {11, "ablation ordering", ablation_ordering},
      {12, "cross-dataset", cross_dataset},
      {13, "tau convergence", tau_convergence},
      {14, "Morlet admissibility boundary", morlet_boundary},
      {15, "scalogram report", scalogram_artifacts},
  };
  int failed = 0, blocked = 0;
  std::printf("runs root: %s\n", root.string().c_str());
  for (const auto& c : criteria) {
    Outcome o;
    try {
      o = c.run();
    } catch (const Blocked& e) {
      o = {Status::kBlocked, std::string("blocked: ") + e.what()};
    } catch (const std::exception& e) {
      o = {Status::kFail, e.what()};
    }
    failed += o.status == Status::kFail ? 1 : 0;
    blocked += o.status == Status::kBlocked ? 1 : 0;
    std::printf("%s  [%d] %s: %s\n", o.status == Status::kPass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str());
  }
  std::printf("%d of 7 reproduction criteria passed, %d failed, %d blocked on missing runs\n", 7 - failed - blocked,
              failed, blocked);
  if (failed > 0) return 1;
  return blocked > 0 ? 77 : 0;
}
