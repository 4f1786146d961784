#include "ega/grad_check.hpp"
#include "ega/trainer.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>

using namespace ega;
namespace fs = std::filesystem;

namespace {

const Corpus& toy_corpus() {
  static const Corpus c = [] {
    std::string text;
    const char* lines[] = {"To be, or not to be, that is the question:\n",
                           "Whether 'tis nobler in the mind to suffer\n",
                           "The slings and arrows of outrageous fortune,\n",
                           "Or to take arms against a sea of troubles\n"};
    for (int i = 0; i < 60; ++i) text += lines[i % 4];
    return corpus_from_text(text, "toy");
  }();
  return c;
}

ModelConfig toy_model(GateVariant v) {
  ModelConfig m;
  m.n_layers = 2;
  m.n_heads = 2;
  m.d_model = 16;
  m.context = 16;
  m.vocab = toy_corpus().vocab.size();
  m.variant = v;
  m.znorm = ZNormMode::kCausalPrefix;
  m.seed = 11;
  return m;
}

TrainConfig toy_train(std::size_t steps = 40) {
  TrainConfig t;
  t.steps = steps;
  t.batch = 4;
  t.context = 16;
  t.lr_max = 3e-3;
  t.warmup = 5;
  t.eval_every = 10;
  t.eval_batches = 4;
  t.snapshot_every = 10;
  t.seed = 5;
  return t;
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "ega_trainer_tests";
  fs::create_directories(dir);
  return dir / name;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST(LrSchedule, Examples) {
  const TrainConfig c;
  EXPECT_EQ(lr_at(0, c), 0.0);
  EXPECT_NEAR(lr_at(300, c), 3.0e-4, 1e-15);
  EXPECT_NEAR(lr_at(2650, c), 1.5e-4, 1e-9);
  EXPECT_NEAR(lr_at(5000, c), 0.0, 1e-15);
  EXPECT_NEAR(lr_at(150, c), 1.5e-4, 1e-15);
  EXPECT_THROW(lr_at(5001, c), ContractError);
}

TEST(LrSchedule, ContinuousAndMonotoneAfterWarmup) {
  const TrainConfig c;
  EXPECT_NEAR(lr_at(299, c), lr_at(300, c), 1.01e-6);
  EXPECT_NEAR(lr_at(301, c), lr_at(300, c), 1e-9);
  for (std::size_t s = 300; s < 5000; ++s) EXPECT_LE(lr_at(s + 1, c), lr_at(s, c));
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  c.warmup = c.steps;
  EXPECT_THROW(c.validate(), ContractError);
  c = TrainConfig{};
  c.batch = 0;
  EXPECT_THROW(c.validate(), ContractError);
  EXPECT_NO_THROW(TrainConfig{}.validate());
}

TEST(AdamW, ZeroGradZeroDecayLeavesParameters) {
  Parameter<double> w("w", NdArray<double>({3}, 0.7), ParamRole::kWeight);
  std::vector<Parameter<double>*> ps{&w};
  OptimState<double> st;
  TrainConfig c;
  c.weight_decay = 0.0;
  adamw_step(ps, st, 3e-4, c);
  for (double v : w.value->values()) EXPECT_EQ(v, 0.7);
}

TEST(AdamW, SingleStepOnScalar) {
  Parameter<double> w("w", NdArray<double>({1}, 2.0), ParamRole::kGateScalar);
  w.grad[0] = 1.0;
  std::vector<Parameter<double>*> ps{&w};
  OptimState<double> st;
  adamw_step(ps, st, 3e-4, TrainConfig{});
  // bias-corrected m = v = 1, so the step is lr / (1 + eps)
  EXPECT_NEAR((*w.value)[0], 2.0 - 3e-4 / (1.0 + 1e-8), 1e-15);
  EXPECT_EQ(st.step, 1u);
}

TEST(AdamW, DecayOnlyTouchesWeights) {
  Parameter<double> w("w", NdArray<double>({1}, 1.0), ParamRole::kWeight);
  Parameter<double> b("b", NdArray<double>({1}, 1.0), ParamRole::kBias);
  Parameter<double> n("n", NdArray<double>({1}, 1.0), ParamRole::kNorm);
  Parameter<double> e("e", NdArray<double>({1}, 1.0), ParamRole::kEmbedding);
  Parameter<double> g("tau", NdArray<double>({1}, 1.0), ParamRole::kGateScalar);
  std::vector<Parameter<double>*> ps{&w, &b, &n, &e, &g};
  OptimState<double> st;
  adamw_step(ps, st, 3e-4, TrainConfig{});
  EXPECT_NEAR((*w.value)[0], 1.0 - 3e-5, 1e-15);
  for (auto* p : {&b, &n, &e, &g}) EXPECT_EQ((*p->value)[0], 1.0) << p->name;
}

TEST(AdamW, NonFiniteGradientNamesParameter) {
  Parameter<double> w("blocks.0.attn.wq", NdArray<double>({2}, 1.0), ParamRole::kWeight);
  w.grad[1] = std::nan("");
  std::vector<Parameter<double>*> ps{&w};
  OptimState<double> st;
  try {
    adamw_step(ps, st, 1e-3, TrainConfig{});
    FAIL();
  } catch (const NonFiniteError& err) {
    EXPECT_NE(std::string(err.what()).find("blocks.0.attn.wq"), std::string::npos);
  }
  EXPECT_EQ((*w.value)[0], 1.0);
}

TEST(ClipGlobalNorm, Examples) {
  Parameter<double> a("a", NdArray<double>({2}), ParamRole::kWeight);
  std::vector<Parameter<double>*> ps{&a};
  a.grad[0] = 0.3;
  a.grad[1] = 0.4;
  EXPECT_NEAR(clip_global_norm(ps, 1.0), 0.5, 1e-15);
  EXPECT_EQ(a.grad[0], 0.3);
  a.grad[0] = 3.0;
  a.grad[1] = 4.0;
  EXPECT_NEAR(clip_global_norm(ps, 1.0), 5.0, 1e-15);
  EXPECT_NEAR(a.grad[0], 0.6, 1e-15);
  EXPECT_NEAR(a.grad[1], 0.8, 1e-15);
}

TEST(ClipGlobalNorm, PostClipNormBounded) {
  Parameter<double> a("a", NdArray<double>({5}), ParamRole::kWeight);
  Parameter<double> b("b", NdArray<double>({3, 2}), ParamRole::kBias);
  std::vector<Parameter<double>*> ps{&a, &b};
  Rng rng(3, Stream::kTest);
  for (int trial = 0; trial < 200; ++trial) {
    const double spread = std::exp(6.0 * rng.uniform() - 3.0);
    for (auto* p : ps)
      for (double& g : p->grad.values()) g = spread * rng.normal();
    clip_global_norm(ps, 1.0);
    double sq = 0.0;
    for (auto* p : ps)
      for (double g : p->grad.values()) sq += g * g;
    EXPECT_LE(std::sqrt(sq), 1.0 + 1e-9);
  }
}

TEST(Evaluate, UntrainedIsNearUniformAndRepeatable) {
  const TransformerModel<float> m(toy_model(GateVariant::kEga1));
  const TrainConfig c = toy_train();
  const double a = evaluate(m, toy_corpus(), Split::kVal, c);
  EXPECT_EQ(a, evaluate(m, toy_corpus(), Split::kVal, c));
  EXPECT_NEAR(a, std::log(static_cast<double>(toy_corpus().vocab.size())), 0.3);
}

TEST(Train, SmokeRunLearns) {
  TransformerModel<float> m(toy_model(GateVariant::kEga1));
  const TrainResult r = train(m, toy_corpus(), toy_train(60));
  ASSERT_EQ(r.metrics.size(), 60u);
  const double uniform = std::log(static_cast<double>(toy_corpus().vocab.size()));
  EXPECT_LT(r.metrics.back().train_loss_raw, uniform - 0.5);
  EXPECT_LT(r.final_val, uniform - 0.5);
  EXPECT_TRUE(r.metrics[9].val_loss.has_value());
  EXPECT_FALSE(r.metrics[10].val_loss.has_value());
  // one snapshot at step 0 plus one per 10 steps, 2 layers x 2 heads each
  EXPECT_EQ(r.gates.size(), 7u * 4u);
  for (const auto& row : r.metrics) {
    EXPECT_TRUE(std::isfinite(row.train_loss));
    EXPECT_TRUE(std::isfinite(row.grad_norm));
  }
}

TEST(Train, SameSeedSameMetrics) {
  TransformerModel<float> a(toy_model(GateVariant::kEgaC));
  TransformerModel<float> b(toy_model(GateVariant::kEgaC));
  TrainCallbacks cb;
  cb.record_wall_time = false;
  const TrainResult ra = train(a, toy_corpus(), toy_train(20), cb);
  const TrainResult rb = train(b, toy_corpus(), toy_train(20), cb);
  ASSERT_EQ(ra.metrics.size(), rb.metrics.size());
  for (std::size_t i = 0; i < ra.metrics.size(); ++i) {
    EXPECT_EQ(metrics_csv_row(ra.metrics[i]), metrics_csv_row(rb.metrics[i]));
  }
  EXPECT_EQ(parameter_fingerprint(a), parameter_fingerprint(b));
}

TEST(Train, EveryVariantSharesTheBatchStream) {
  std::uint64_t first = 0;
  for (GateVariant v : kAllVariants) {
    TransformerModel<float> m(toy_model(v));
    const TrainResult r = train(m, toy_corpus(), toy_train(6));
    if (v == GateVariant::kBase) first = r.batch_fingerprint;
    EXPECT_EQ(r.batch_fingerprint, first) << variant_name(v);
  }
  EXPECT_EQ(first, batch_fingerprint(toy_corpus(), 5, 6, 16, 4));
}

TEST(Train, MorletAdmissibilityHoldsAfterEveryStep) {
  TransformerModel<double> m(toy_model(GateVariant::kEgaM));
  TrainConfig c = toy_train(30);
  c.lr_max = 0.3;  // large steps push sigma against the bound
  double worst = 1e9;
  const std::uint64_t clamps_before = admissibility_clamp_count();
  TrainCallbacks cb;
  cb.on_metrics = [&](const MetricsRow&) {
    for (const auto& b : m.blocks())
      for (std::size_t i = 0; i < b.gate.omega->numel(); ++i)
        worst = std::min(worst, (*b.gate.omega->value)[i] * (*b.gate.sigma->value)[i]);
  };
  try {
    train(m, toy_corpus(), c, cb);
  } catch (const TrainingDiverged&) {
    // a huge learning rate may blow up; the bound must still hold for every completed step
  }
  EXPECT_GE(worst, 5.0 - 1e-9);
  EXPECT_GT(admissibility_clamp_count(), clamps_before);
}

TEST(Train, NanLossAbortsWithStep) {
  TransformerModel<float> m(toy_model(GateVariant::kBase));
  (*m.at("wte").value)[0] = std::nanf("");
  try {
    train(m, toy_corpus(), toy_train(10));
    FAIL();
  } catch (const TrainingDiverged& e) {
    EXPECT_EQ(e.step, 1u);
    EXPECT_NE(std::string(e.what()).find("step 1"), std::string::npos);
  }
}

TEST(Train, MicroBatchesMatchTheFullBatchWithoutDropout) {
  ModelConfig mc = toy_model(GateVariant::kEga2);
  mc.dropout = 0.0;
  TransformerModel<double> a(mc), b(mc);
  TrainConfig c = toy_train(8);
  const TrainResult ra = train(a, toy_corpus(), c);
  c.micro_batch = 1;
  const TrainResult rb = train(b, toy_corpus(), c);
  for (std::size_t i = 0; i < ra.metrics.size(); ++i) {
    EXPECT_NEAR(ra.metrics[i].train_loss_raw, rb.metrics[i].train_loss_raw, 1e-10);
  }
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  TransformerModel<float> m(toy_model(GateVariant::kEgaM));
  OptimState<float> st;
  TrainProgress prog;
  train(m, toy_corpus(), toy_train(6), {}, &st, &prog);
  const fs::path p1 = scratch("a.ckpt"), p2 = scratch("b.ckpt");
  save_checkpoint(p1, m, toy_train(6), prog, &st);

  TransformerModel<float> n(toy_model(GateVariant::kEgaM));
  OptimState<float> st2;
  const CheckpointInfo info = load_checkpoint(p1, n, &st2);
  EXPECT_EQ(info.progress.step, 6u);
  EXPECT_EQ(info.model.variant, GateVariant::kEgaM);
  EXPECT_EQ(parameter_fingerprint(n), parameter_fingerprint(m));
  save_checkpoint(p2, n, info.train, info.progress, &st2);
  EXPECT_EQ(slurp(p1), slurp(p2));
  EXPECT_FALSE(fs::exists(scratch("a.ckpt.tmp")));
}

TEST(Checkpoint, DistinctDiagnostics) {
  TransformerModel<float> m(toy_model(GateVariant::kEga1));
  const fs::path p = scratch("diag.ckpt");
  save_checkpoint(p, m, toy_train(), TrainProgress{});
  const std::string good = slurp(p);

  TransformerModel<float> other(toy_model(GateVariant::kEga2));
  try {
    load_checkpoint(p, other);
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.kind, CheckpointError::Kind::kShapeMismatch);
  }

  auto expect_kind = [&](const std::string& bytes, CheckpointError::Kind kind) {
    const fs::path q = scratch("broken.ckpt");
    std::ofstream(q, std::ios::binary | std::ios::trunc).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    try {
      load_checkpoint(q, m);
      FAIL() << "no error";
    } catch (const CheckpointError& e) {
      EXPECT_EQ(e.kind, kind) << e.what();
    }
  };
  expect_kind(good.substr(0, good.size() - 10), CheckpointError::Kind::kTruncated);
  std::string versioned = good;
  const auto at = versioned.find("\"version\":1");
  ASSERT_NE(at, std::string::npos);
  versioned[at + 10] = '7';
  expect_kind(versioned, CheckpointError::Kind::kVersion);
  expect_kind("not a checkpoint at all", CheckpointError::Kind::kFormat);
  try {
    load_checkpoint(scratch("missing.ckpt"), m);
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.kind, CheckpointError::Kind::kIo);
  }
}

TEST(Checkpoint, ResumedRunMatchesUninterruptedRun) {
  TrainCallbacks cb;
  cb.record_wall_time = false;
  const TrainConfig c = toy_train(30);

  TransformerModel<float> full(toy_model(GateVariant::kEga1));
  const TrainResult whole = train(full, toy_corpus(), c, cb);

  const fs::path p = scratch("resume.ckpt");
  TransformerModel<float> first(toy_model(GateVariant::kEga1));
  OptimState<float> st;
  TrainCallbacks saving = cb;
  saving.on_checkpoint = [&](const TrainProgress& pr) {
    if (pr.step == 15) save_checkpoint(p, first, c, pr, &st);
  };
  TrainConfig with_ckpt = c;
  with_ckpt.checkpoint_every = 15;
  train(first, toy_corpus(), with_ckpt, saving, &st);

  TransformerModel<float> resumed(toy_model(GateVariant::kEga1));
  OptimState<float> st2;
  CheckpointInfo info = load_checkpoint(p, resumed, &st2);
  const TrainResult tail = train(resumed, toy_corpus(), c, cb, &st2, &info.progress);
  ASSERT_EQ(tail.metrics.size(), 15u);
  for (std::size_t i = 0; i < 15; ++i) {
    EXPECT_EQ(metrics_csv_row(tail.metrics[i]), metrics_csv_row(whole.metrics[15 + i]));
  }
  EXPECT_EQ(parameter_fingerprint(resumed), parameter_fingerprint(full));
}

TEST(Artifacts, MetricsAndGateFormats) {
  EXPECT_EQ(metrics_csv_header(), "step,train_loss,val_loss,lr,grad_norm,wall_ms");
  MetricsRow r;
  r.step = 100;
  r.train_loss = 1.25;
  r.lr = 3e-4;
  r.grad_norm = 0.5;
  EXPECT_EQ(metrics_csv_row(r), "100,1.25,,0.0003,0.5,0.0");
  r.val_loss = 1.5;
  EXPECT_EQ(metrics_csv_row(r), "100,1.25,1.5,0.0003,0.5,0.0");
  GateRecord g{100, 2, 3, 1, 0.35, 2.0, 5.0, std::nullopt};
  EXPECT_EQ(gate_record_json(g),
            R"({"alpha":2.0,"head":3,"layer":2,"omega_sigma":5.0,"scale":1,"scale_weight":null,"step":100,"tau":0.35})");
}

TEST(Artifacts, ConfigJsonRoundTrip) {
  ModelConfig m = toy_model(GateVariant::kEgaDb4);
  m.tau_init = -0.5;
  const ModelConfig back = model_config_from_json(model_config_json(m));
  EXPECT_EQ(back.variant, GateVariant::kEgaDb4);
  EXPECT_EQ(back.tau_init, -0.5);
  EXPECT_EQ(back.znorm, ZNormMode::kCausalPrefix);
  const TrainConfig t = train_config_from_json(R"({"steps": 1500, "micro_batch": 8})");
  EXPECT_EQ(t.steps, 1500u);
  EXPECT_EQ(t.micro_batch, 8u);
  EXPECT_EQ(t.batch, 64u);
}
