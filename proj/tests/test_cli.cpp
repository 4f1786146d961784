#include "cli.hpp"

#include "ega/analysis.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace fs = std::filesystem;
using ega::cli::run;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result ega_cmd(std::vector<std::string> args) {
  args.insert(args.begin(), "ega");
  std::ostringstream out, err;
  const int code = run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    root_ = fs::temp_directory_path() / ("ega_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(root_);
    fs::create_directories(root_);
    std::ofstream(root_ / "toy.txt") << corpus_text();
  }
  void TearDown() override { fs::remove_all(root_); }

  static std::string corpus_text() {
    const char* lines[] = {"To be or not to be that is the question\n", "Whether tis nobler in the mind to suffer\n",
                           "The slings and arrows of outrageous fortune\n", "Or to take arms against a sea of troubles\n"};
    std::string t;
    for (int i = 0; i < 120; ++i) t += lines[(i * 7) % 4];
    return t;
  }

  std::vector<std::string> small(std::vector<std::string> extra) const {
    std::vector<std::string> a = {"--data-path", (root_ / "toy.txt").string(), "--steps", "6", "--warmup", "1",
                                  "--context", "16", "--batch", "4", "--layers", "2", "--heads", "2", "--d-model", "8",
                                  "--eval-every", "3", "--eval-batches", "2", "--snapshot-every", "3"};
    a.insert(a.end(), extra.begin(), extra.end());
    return a;
  }

  Result train(const std::string& variant, const std::string& out, std::vector<std::string> extra = {}) const {
    std::vector<std::string> a = {"train", "--variant", variant, "--out", (root_ / out).string()};
    for (auto& s : small(std::move(extra))) a.push_back(s);
    return ega_cmd(a);
  }

  fs::path root_;
};

}  // namespace

TEST(CliHelp, EveryCommandListsItsFlagsWithDefaults) {
  struct Case {
    std::vector<std::string> cmd;
    std::vector<std::string> expect;
  };
  const std::vector<Case> cases = {
      {{"train"}, {"--dataset", "[shakespeare]", "--variant", "[base]", "--seed", "[1337]", "--steps", "[5000]",
                   "--context", "[256]", "--batch", "[64]", "--znorm", "[paper]", "--out", "--data-path", "--config"}},
      {{"ablate"}, {"--variants", "base,ega1,ega2,ega4,egac,egam,egadb2,egadb4", "--jobs", "[1]", "--steps", "[5000]"}},
      {{"analyze", "tau"}, {"--run", "--batches", "[50]"}},
      {{"analyze", "scalogram"}, {"--probe", "To be or not to be", "--layer", "[3]"}},
      {{"analyze", "spectrum"}, {"--probe", "--layer", "[3]"}},
      {{"analyze", "seqlen"}, {"--lengths", "64,128,256", "--tokens", "[16384]"}},
      {{"analyze", "compare"}, {"--base", "--other"}},
      {{"plot"}, {"runs", "--out", "[training_curves.svg]"}},
  };
  for (const auto& c : cases) {
    std::vector<std::string> args = c.cmd;
    args.push_back("--help");
    const Result r = ega_cmd(args);
    EXPECT_EQ(r.code, 0);
    for (const auto& e : c.expect) EXPECT_NE(r.out.find(e), std::string::npos) << c.cmd.back() << " lacks " << e;
  }
  EXPECT_EQ(ega_cmd({"--help"}).code, 0);
}

TEST(CliUsage, BadInvocationsExitOne) {
  const Result bogus = ega_cmd({"train", "--variant", "bogus"});
  EXPECT_EQ(bogus.code, 1);
  EXPECT_NE(bogus.err.find("base, ega1, ega2, ega4, egac, egam, egadb2, egadb4"), std::string::npos);
  EXPECT_EQ(ega_cmd({}).code, 1);
  EXPECT_EQ(ega_cmd({"train", "--no-such-flag"}).code, 1);
  EXPECT_EQ(ega_cmd({"train", "--znorm", "sideways"}).code, 1);
  EXPECT_EQ(ega_cmd({"train", "--dataset", "wikitext"}).code, 1);
  const Result missing = ega_cmd({"train", "--data-path", "/no/such/corpus.txt", "--out", "/tmp/ega_never"});
  EXPECT_EQ(missing.code, 1);
  EXPECT_NE(missing.err.find("/no/such/corpus.txt"), std::string::npos);
}

TEST_F(Cli, TrainWritesARunDirectoryAndRerunsAreIdentical) {
  const Result a = train("ega1", "a");
  ASSERT_EQ(a.code, 0) << a.err;
  for (const char* f : {"config.json", "metrics.csv", "train_raw.csv", "gates.jsonl", "checkpoint.bin", "summary.json"}) {
    EXPECT_TRUE(fs::exists(root_ / "a" / f)) << f;
  }
  const ega::RunRecord rec = ega::load_run(root_ / "a");
  EXPECT_EQ(rec.metrics.size(), 6u);
  EXPECT_EQ(rec.summary.variant, "ega1");
  EXPECT_EQ(rec.model.variant, ega::GateVariant::kEga1);

  ASSERT_EQ(train("ega1", "b").code, 0);
  for (const char* f : {"metrics.csv", "train_raw.csv", "gates.jsonl", "summary.json"}) {
    EXPECT_EQ(slurp(root_ / "a" / f), slurp(root_ / "b" / f)) << f;
  }
  EXPECT_EQ(slurp(root_ / "a" / "checkpoint.bin"), slurp(root_ / "b" / "checkpoint.bin"));
}

TEST_F(Cli, RefusesANonEmptyOutputWithoutForce) {
  ASSERT_EQ(train("base", "a").code, 0);
  const Result again = train("base", "a");
  EXPECT_EQ(again.code, 1);
  EXPECT_NE(again.err.find("not empty"), std::string::npos);
  EXPECT_EQ(train("base", "a", {"--force"}).code, 0);
  const Result resumed = train("base", "a", {"--resume"});
  EXPECT_EQ(resumed.code, 0);
  EXPECT_NE(resumed.err.find("already complete"), std::string::npos);
}

TEST_F(Cli, StoppedRunResumesToTheSameArtifacts) {
  ASSERT_EQ(train("ega1", "whole", {"--checkpoint-every", "2"}).code, 0);
  const Result first = train("ega1", "split", {"--checkpoint-every", "2", "--stop-after", "3"});
  ASSERT_EQ(first.code, 0) << first.err;
  EXPECT_NE(first.err.find("stopped after step 3"), std::string::npos);
  EXPECT_FALSE(fs::exists(root_ / "split" / "summary.json"));
  EXPECT_EQ(ega::read_checkpoint_info(root_ / "split" / "checkpoint.bin").progress.step, 3u);

  const Result changed = train("ega1", "split", {"--checkpoint-every", "2", "--resume", "--lr", "1e-3"});
  EXPECT_EQ(changed.code, 1);
  EXPECT_NE(changed.err.find("different configuration"), std::string::npos);

  const Result rest = train("ega1", "split", {"--checkpoint-every", "2", "--resume"});
  ASSERT_EQ(rest.code, 0) << rest.err;
  for (const char* f : {"metrics.csv", "train_raw.csv", "gates.jsonl", "summary.json", "checkpoint.bin"}) {
    EXPECT_EQ(slurp(root_ / "whole" / f), slurp(root_ / "split" / f)) << f;
  }
}

TEST_F(Cli, ConfigFileSitsBetweenDefaultsAndFlags) {
  ASSERT_EQ(train("ega2", "a").code, 0);
  const std::string cfg = (root_ / "a" / "config.json").string();

  const Result from_cfg = ega_cmd({"train", "--config", cfg, "--out", (root_ / "b").string()});
  ASSERT_EQ(from_cfg.code, 0) << from_cfg.err;
  EXPECT_EQ(slurp(root_ / "a" / "metrics.csv"), slurp(root_ / "b" / "metrics.csv"));
  EXPECT_EQ(ega::load_run(root_ / "b").model.variant, ega::GateVariant::kEga2);

  const Result overridden = ega_cmd({"train", "--config", cfg, "--steps", "3", "--out", (root_ / "c").string()});
  ASSERT_EQ(overridden.code, 0) << overridden.err;
  const ega::RunRecord c = ega::load_run(root_ / "c");
  EXPECT_EQ(c.summary.steps, 3u);
  EXPECT_EQ(c.model.variant, ega::GateVariant::kEga2);
  EXPECT_EQ(c.model.d_model, 8u);
}

TEST_F(Cli, DivergenceExitsTwo) {
  const Result r = train("ega1", "nan", {"--lr", "1e30", "--clip", "1e30"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("non-finite"), std::string::npos);
}

TEST_F(Cli, AblateDeduplicatesAndSharesBatches) {
  std::vector<std::string> args = {"ablate", "--variants", "base,ega1,base", "--out", (root_ / "abl").string()};
  for (auto& s : small({})) args.push_back(s);
  const Result r = ega_cmd(args);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.err.find("more than once"), std::string::npos);
  const std::string csv = slurp(root_ / "abl" / "ablation_shakespeare_s1337.csv");
  std::istringstream lines(csv);
  std::vector<std::string> rows;
  for (std::string l; std::getline(lines, l);) rows.push_back(l);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0], "variant,val,delta,gap,extra_params");
  EXPECT_EQ(rows[1].rfind("BASE,", 0), 0u);
  EXPECT_NE(rows[1].find(",+0.0000,"), std::string::npos);
  EXPECT_EQ(rows[2].rfind("EGA-1,", 0), 0u);
  EXPECT_EQ(rows[2].substr(rows[2].rfind(',') + 1), "40");  // 2 layers x 2 heads x (d + 2)
  EXPECT_EQ(ega::load_run(root_ / "abl" / "base").summary.batch_fingerprint,
            ega::load_run(root_ / "abl" / "ega1").summary.batch_fingerprint);

  const Result cmp = ega_cmd({"analyze", "compare", "--base", (root_ / "abl" / "base").string(), "--other",
                              (root_ / "abl" / "ega1").string()});
  ASSERT_EQ(cmp.code, 0);
  const ega::RunRecord b = ega::load_run(root_ / "abl" / "base"), e = ega::load_run(root_ / "abl" / "ega1");
  std::ostringstream want;
  const double d = b.summary.final_val - e.summary.final_val;
  want << "delta " << (d >= 0 ? "+" : "") << std::fixed << std::setprecision(4) << d;
  EXPECT_EQ(cmp.out.rfind(want.str(), 0), 0u) << cmp.out;
}

TEST_F(Cli, CompareRefusesDifferentProtocols) {
  ASSERT_EQ(train("base", "a").code, 0);
  ASSERT_EQ(train("ega1", "b", {"--seed", "7"}).code, 0);
  const Result r = ega_cmd({"analyze", "compare", "--base", (root_ / "a").string(), "--other", (root_ / "b").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("seeds differ"), std::string::npos);
  const Result missing = ega_cmd({"analyze", "compare", "--base", (root_ / "a").string(), "--other", "/no/run"});
  EXPECT_EQ(missing.code, 1);
  EXPECT_NE(missing.err.find("/no/run"), std::string::npos);
}

TEST_F(Cli, AnalysesWriteTheirArtifacts) {
  ASSERT_EQ(train("egam", "m").code, 0);
  const fs::path m = root_ / "m";
  const Result tau = ega_cmd({"analyze", "tau", "--run", m.string(), "--batches", "2"});
  ASSERT_EQ(tau.code, 0) << tau.err;
  EXPECT_TRUE(fs::exists(m / "tau_trajectory_egam_shakespeare_s1337.csv"));
  EXPECT_TRUE(fs::exists(m / "tau_finals_egam_shakespeare_s1337.csv"));
  const std::string report = slurp(m / "tau_report_egam_shakespeare_s1337.json");
  EXPECT_NE(report.find("\"above_threshold_empirical\""), std::string::npos);
  EXPECT_NE(report.find("omega_sigma_below_5.05_fraction"), std::string::npos);

  const Result sc = ega_cmd({"analyze", "scalogram", "--run", m.string(), "--layer", "2"});
  ASSERT_EQ(sc.code, 0) << sc.err;
  EXPECT_NE(sc.err.find("truncated"), std::string::npos);  // the default probe exceeds a 16-token context
  EXPECT_TRUE(fs::exists(m / "scalogram_egam_shakespeare_s1337_L2.svg"));
  const std::string csv = slurp(m / "scalogram_egam_shakespeare_s1337_L2.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 65);

  const Result sp = ega_cmd({"analyze", "spectrum", "--run", m.string(), "--layer", "1", "--probe", "To be or not"});
  ASSERT_EQ(sp.code, 0) << sp.err;
  EXPECT_TRUE(fs::exists(m / "spectrum_egam_shakespeare_s1337_L1.svg"));
  EXPECT_EQ(ega_cmd({"analyze", "scalogram", "--run", m.string(), "--layer", "9"}).code, 1);
  EXPECT_EQ(ega_cmd({"analyze", "scalogram", "--run", m.string(), "--probe", "zzz#"}).code, 1);

  const Result base_tau = [&] {
    EXPECT_EQ(train("base", "b").code, 0);
    return ega_cmd({"analyze", "tau", "--run", (root_ / "b").string()});
  }();
  EXPECT_EQ(base_tau.code, 1);
}

TEST_F(Cli, SeqlenTabulatesEachLength) {
  std::vector<std::string> args = {"analyze", "seqlen", "--lengths", "8,16", "--tokens", "32", "--out",
                                   (root_ / "sl").string()};
  for (auto& s : small({})) args.push_back(s);
  const Result r = ega_cmd(args);
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string csv = slurp(root_ / "sl" / "seqlen_shakespeare_s1337.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  EXPECT_NE(csv.find("\n8,4,"), std::string::npos);
  EXPECT_NE(csv.find("\n16,2,"), std::string::npos);

  args[3] = "8,64";
  EXPECT_EQ(ega_cmd(args).code, 1);
}

TEST_F(Cli, PlotDrawsThreePanels) {
  ASSERT_EQ(train("base", "a").code, 0);
  ASSERT_EQ(train("ega1", "b").code, 0);
  const fs::path svg = root_ / "fig" / "curves.svg";
  const Result r = ega_cmd({"plot", (root_ / "a").string(), (root_ / "b").string(), "--out", svg.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string doc = slurp(svg);
  for (const char* t : {"Validation loss", "Final validation loss", "Generalisation gap", "BASE", "EGA-1"})
    EXPECT_NE(doc.find(t), std::string::npos) << t;
  ASSERT_EQ(ega_cmd({"plot", (root_ / "a").string(), (root_ / "b").string(), "--out", svg.string() + "2"}).code, 0);
  EXPECT_EQ(doc, slurp(svg.string() + "2"));

  // strip every validation value from one run
  std::istringstream in(slurp(root_ / "a" / "metrics.csv"));
  std::string line, stripped;
  for (bool first = true; std::getline(in, line); first = false) {
    if (!first) {
      auto c1 = line.find(','), c2 = line.find(',', c1 + 1), c3 = line.find(',', c2 + 1);
      line = line.substr(0, c2 + 1) + line.substr(c3);
    }
    stripped += line + '\n';
  }
  std::ofstream(root_ / "a" / "metrics.csv") << stripped;
  const Result bad = ega_cmd({"plot", (root_ / "a").string(), "--out", svg.string()});
  EXPECT_EQ(bad.code, 1);
  EXPECT_NE(bad.err.find("no validation rows"), std::string::npos);
}
