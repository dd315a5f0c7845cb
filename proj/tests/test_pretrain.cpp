#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "chronoformer/pretrain.hpp"
#include "chronoformer/synthetic.hpp"
#include "support.hpp"

using namespace chronoformer;
using testing_support::make_sequence;
using testing_support::tiny_config;

namespace {

std::vector<TokenInput> tokens_with_codes(const std::vector<std::size_t>& codes) {
  std::vector<TokenInput> out;
  for (std::size_t i = 0; i < codes.size(); ++i) out.push_back({codes[i], static_cast<double>(i), 1.0, {}, false});
  return out;
}

ModelInput sample_input() {
  return make_input(make_sequence({{2, 0.5}, {3, 4.0, 0.75}, {4, 30.0}, {2, 33.0}, {5, 40.0, -1.0}, {3, 80.0}}));
}

MaskPlan keep_plan(const ModelInput& in, const std::vector<bool>& chosen, const std::vector<double>& q) {
  MaskPlan p;
  p.q = q;
  const auto flat = in.flat_tokens();
  for (std::size_t j = 0; j < flat.size(); ++j) {
    p.outcome.push_back(chosen[j] ? Replacement::keep : Replacement::none);
    p.replacement.push_back(flat[j].code);
  }
  return p;
}

/// Log-softmax cross-entropy of one row, written out directly.
double row_ce(const std::vector<double>& logits, std::size_t target) {
  double z = 0.0;
  for (double x : logits) z += std::exp(x);
  return std::log(z) - logits[target];
}

}  // namespace

TEST(MaskProbabilities, UniformUtilitiesGiveRho) {
  const auto toks = tokens_with_codes({2, 3, 4, 5, 2});
  const std::vector<double> u(6, 0.4);
  for (double q : mask_probabilities(toks, u, 0.15)) EXPECT_DOUBLE_EQ(q, 0.15);
  const std::vector<double> skew{0, 0, 1, 0.1, 0.1, 0.1};
  for (double q : mask_probabilities(toks, skew, 0.15, false)) EXPECT_EQ(q, 0.15);
}

TEST(MaskProbabilities, SingleSalientCodeTakesTheMass) {
  const auto toks = tokens_with_codes({2, 3, 4, 5, 3, 4});
  const std::vector<double> u{0, 0, 1, 0, 0, 0};
  const auto q = mask_probabilities(toks, u, 0.15);
  EXPECT_DOUBLE_EQ(q[0], 0.9);  // 0.15 * 6 clipped
  for (std::size_t j = 1; j < q.size(); ++j) EXPECT_EQ(q[j], kMinMaskProbability);
}

TEST(MaskProbabilities, ScalesByRelativeUtility) {
  const auto toks = tokens_with_codes({2, 3});
  const std::vector<double> u{0, 0, 0.2, 0.6};
  const auto q = mask_probabilities(toks, u, 0.2);
  EXPECT_DOUBLE_EQ(q[0], 0.2 * 0.2 / 0.4);
  EXPECT_DOUBLE_EQ(q[1], 0.2 * 0.6 / 0.4);
}

TEST(MaskProbabilities, AllZeroUtilitiesFallBackToRho) {
  const auto toks = tokens_with_codes({2, 3});
  const std::vector<double> u(4, 0.0);
  for (double q : mask_probabilities(toks, u, 0.3)) EXPECT_EQ(q, 0.3);
}

TEST(MaskProbabilities, RejectsBadRate) {
  const auto toks = tokens_with_codes({2});
  const std::vector<double> u(3, 1.0);
  EXPECT_THROW(mask_probabilities(toks, u, 0.0), ConfigError);
  EXPECT_THROW(mask_probabilities(toks, u, 0.6), ConfigError);
  EXPECT_THROW(mask_probabilities({}, u, 0.1), ValidationError);
}

TEST(SampleMask, EmpiricalFrequencyAndReplacementSplit) {
  const auto toks = tokens_with_codes({2, 3, 4, 5, 6, 7, 8, 9, 2, 3});
  const std::vector<double> q(toks.size(), 0.3);
  Rng root(77);
  std::size_t masked = 0, mask = 0, random = 0, keep = 0, draws = 0;
  for (int i = 0; i < 10000; ++i) {
    Rng rng = root.derive(static_cast<std::uint64_t>(i));
    const auto plan = sample_mask(toks, q, 12, rng);
    for (std::size_t j = 0; j < toks.size(); ++j) {
      ++draws;
      switch (plan.outcome[j]) {
        case Replacement::none: break;
        case Replacement::mask:
          ++mask;
          EXPECT_EQ(plan.replacement[j], Vocabulary::kMask);
          break;
        case Replacement::random:
          ++random;
          EXPECT_GE(plan.replacement[j], Vocabulary::kReserved);
          EXPECT_LT(plan.replacement[j], 12u);
          break;
        case Replacement::keep:
          ++keep;
          EXPECT_EQ(plan.replacement[j], toks[j].code);
          break;
      }
    }
  }
  masked = mask + random + keep;
  const double n = static_cast<double>(draws);
  EXPECT_NEAR(static_cast<double>(masked), 0.3 * n, 3 * std::sqrt(n * 0.3 * 0.7));
  const double m = static_cast<double>(masked);
  EXPECT_NEAR(static_cast<double>(mask), 0.8 * m, 3 * std::sqrt(m * 0.8 * 0.2));
  EXPECT_NEAR(static_cast<double>(random), 0.1 * m, 3 * std::sqrt(m * 0.1 * 0.9));
  EXPECT_NEAR(static_cast<double>(keep), 0.1 * m, 3 * std::sqrt(m * 0.1 * 0.9));
}

TEST(SampleMask, SameSeedSamePlan) {
  const auto toks = tokens_with_codes({2, 3, 4, 5, 6, 7, 8});
  const std::vector<double> u(10, 0.5);
  const auto a = salience_mask(toks, u, 0.3, 5), b = salience_mask(toks, u, 0.3, 5);
  EXPECT_EQ(a.outcome, b.outcome);
  EXPECT_EQ(a.replacement, b.replacement);
}

TEST(ApplyMask, ReplacedPositionsLoseValueAndDelta) {
  const auto in = sample_input();
  MaskPlan plan;
  plan.q.assign(6, 0.5);
  plan.outcome = {Replacement::none, Replacement::mask, Replacement::random, Replacement::keep, Replacement::none,
                  Replacement::none};
  plan.replacement = {2, Vocabulary::kMask, 5, 2, 5, 3};
  const auto out = apply_mask(in, plan).flat_tokens();
  const auto orig = in.flat_tokens();
  EXPECT_EQ(out[0], orig[0]);
  EXPECT_EQ(out[1].code, Vocabulary::kMask);
  EXPECT_FALSE(out[1].value.has_value());
  EXPECT_TRUE(out[1].hide_delta);
  EXPECT_EQ(out[1].time, orig[1].time);
  EXPECT_EQ(out[2].code, 5u);
  EXPECT_TRUE(out[2].hide_delta);
  EXPECT_EQ(out[3], orig[3]);
  EXPECT_EQ(out[4], orig[4]);
}

TEST(ApplyMask, MaskedContentDoesNotReachTheEncoder) {
  const auto cfg = tiny_config(6);
  auto p = init_params(cfg);
  testing_support::jitter(p, 1);
  auto a = sample_input();
  auto b = a;
  b.bins[0][1].code = 5;
  b.bins[0][1].value = 99.0;
  b.bins[0][1].delta = 1.5;
  MaskPlan plan;
  plan.q.assign(6, 0.15);
  plan.outcome.assign(6, Replacement::none);
  plan.outcome[1] = Replacement::mask;
  plan.replacement = {2, Vocabulary::kMask, 4, 2, 5, 3};
  const auto fa = forward(apply_mask(a, plan), p, cfg), fb = forward(apply_mask(b, plan), p, cfg);
  EXPECT_EQ(std::vector<double>(fa.token_states.values().begin(), fa.token_states.values().end()),
            std::vector<double>(fb.token_states.values().begin(), fb.token_states.values().end()));
}

TEST(MemLoss, ConfidentCorrectHeadGivesZero) {
  const auto cfg = tiny_config(6);
  auto p = init_params(cfg);
  std::fill(p.mem_w.mutable_values().begin(), p.mem_w.mutable_values().end(), 0.0);
  p.mem_b.mutable_values()[2] = 1000.0;
  const std::vector<ModelInput> ins{make_input(make_sequence({{2, 1.0}, {2, 5.0}, {2, 30.0}}))};
  const std::vector<MaskPlan> plans{keep_plan(ins[0], {true, false, true}, {0.5, 0.5, 0.5})};
  EXPECT_LT(mem_loss(ins, plans, p, cfg).item(), 1e-12);
}

TEST(MemLoss, UniformLogitsGiveLogVocab) {
  const auto cfg = tiny_config(6);
  auto p = init_params(cfg);
  std::fill(p.mem_w.mutable_values().begin(), p.mem_w.mutable_values().end(), 0.0);
  const std::vector<ModelInput> ins{sample_input()};
  Rng rng(3);
  const std::vector<double> u(6, 1.0);
  const std::vector<MaskPlan> plans{nonempty_mask(ins[0], u, 0.3, false, rng)};
  EXPECT_NEAR(mem_loss(ins, plans, p, cfg).item(), std::log(6.0), 1e-12);
}

TEST(MemLoss, MatchesScalarCrossEntropyOracle) {
  const auto cfg = tiny_config(6);
  auto p = init_params(cfg);
  testing_support::jitter(p, 2);
  const auto in = make_input(make_sequence({{2, 1.0}, {4, 5.0}, {3, 9.0}}));
  MaskPlan plan;
  plan.q = {0.2, 0.4, 0.5};
  plan.outcome = {Replacement::mask, Replacement::none, Replacement::random};
  plan.replacement = {Vocabulary::kMask, 4, 5};
  const auto f = forward(apply_mask(in, plan), p, cfg);
  const std::vector<std::size_t> codes{2, 4, 3};
  std::vector<double> l(3);
  for (std::size_t j : {0u, 2u}) {
    std::vector<double> logits(6);
    for (std::size_t v = 0; v < 6; ++v) {
      double s = p.mem_b.at(0, v);
      for (std::size_t k = 0; k < 8; ++k) s += f.token_states.at(j, k) * p.mem_w.at(k, v);
      logits[v] = s;
    }
    l[j] = row_ce(logits, codes[j]);
  }
  const std::vector<ModelInput> ins{in};
  const std::vector<MaskPlan> plans{plan};
  EXPECT_NEAR(mem_loss(ins, plans, p, cfg).item(), (l[0] + l[2]) / 2.0, 1e-12);
  EXPECT_NEAR(reweighted_mem_loss(ins, plans, p, cfg).item(), (l[0] / 0.2 + l[2] / 0.5) / 3.0, 1e-12);
}

TEST(MemLoss, EmptyMaskIsAnError) {
  const auto cfg = tiny_config(6);
  const auto p = init_params(cfg);
  const std::vector<ModelInput> ins{sample_input()};
  const std::vector<MaskPlan> plans{keep_plan(ins[0], std::vector<bool>(6, false), std::vector<double>(6, 0.15))};
  EXPECT_THROW(mem_loss(ins, plans, p, cfg), ValidationError);
  EXPECT_EQ(reweighted_mem_loss(ins, plans, p, cfg).item(), 0.0);
}

TEST(ReweightedLoss, FullMaskAtUnitProbabilityIsTheFullLoss) {
  const auto cfg = tiny_config(6);
  auto p = init_params(cfg);
  testing_support::jitter(p, 4);
  const std::vector<ModelInput> ins{sample_input(), make_input(make_sequence({{5, 3.0}, {2, 50.0}}))};
  const std::vector<MaskPlan> plans{keep_plan(ins[0], std::vector<bool>(6, true), std::vector<double>(6, 1.0)),
                                    keep_plan(ins[1], {true, true}, {1.0, 1.0})};
  EXPECT_NEAR(reweighted_mem_loss(ins, plans, p, cfg).item(), full_position_loss(ins, p, cfg), 1e-12);
}

TEST(ReweightedLoss, SinglePositionAtHalfProbability) {
  const auto cfg = tiny_config(6);
  auto p = init_params(cfg);
  testing_support::jitter(p, 5);
  const std::vector<ModelInput> ins{make_input(make_sequence({{3, 2.0}}))};
  const double l = position_losses(ins[0], p, cfg)[0];
  EXPECT_NEAR(reweighted_mem_loss(ins, std::vector<MaskPlan>{keep_plan(ins[0], {true}, {0.5})}, p, cfg).item(), 2 * l,
              1e-12);
  EXPECT_EQ(reweighted_mem_loss(ins, std::vector<MaskPlan>{keep_plan(ins[0], {false}, {0.5})}, p, cfg).item(), 0.0);
}

TEST(ReweightedLoss, EstimatorIsUnbiasedWhenInputsAreKept) {
  const auto cfg = tiny_config(6);
  auto p = init_params(cfg);
  testing_support::jitter(p, 6);
  const std::vector<ModelInput> ins{sample_input()};
  const auto l = position_losses(ins[0], p, cfg);
  const std::vector<double> q{0.05, 0.2, 0.6, 0.3, 0.9, 0.1};
  double full = 0.0, var = 0.0;
  for (std::size_t j = 0; j < l.size(); ++j) {
    full += l[j] / 6.0;
    var += l[j] * l[j] * (1 - q[j]) / q[j] / 36.0;
  }
  Rng rng(7);
  const int draws = 4000;
  double acc = 0.0;
  for (int i = 0; i < draws; ++i) {
    std::vector<bool> chosen(6);
    for (std::size_t j = 0; j < 6; ++j) chosen[j] = rng.bernoulli(q[j]);
    acc += reweighted_mem_loss(ins, std::vector<MaskPlan>{keep_plan(ins[0], chosen, q)}, p, cfg).item();
  }
  EXPECT_NEAR(acc / draws, full, 4.0 * std::sqrt(var / draws));
}

TEST(TimeGapLoss, MatchesHandComputedMse) {
  const auto cfg = tiny_config(6);
  auto p = init_params(cfg);
  std::fill(p.gap_w.mutable_values().begin(), p.gap_w.mutable_values().end(), 0.0);
  p.gap_b.mutable_values()[0] = 1.0;
  const auto in = make_input(make_sequence({{2, 0.0}, {3, 2.0}, {4, 9.0}}));
  const std::vector<ModelInput> ins{in};
  const std::vector<MaskPlan> plans{keep_plan(in, {false, true, true}, {0.5, 0.5, 0.5})};
  const double a = 1.0 - std::log1p(2.0), b = 1.0 - std::log1p(7.0);
  EXPECT_NEAR(time_gap_loss(ins, plans, p, cfg).item(), (a * a + b * b) / 2.0, 1e-14);
}

TEST(MaskedLosses, GradientCheck) {
  const auto cfg = tiny_config(6);
  auto p = init_params(cfg);
  testing_support::jitter(p, 8);
  const std::vector<ModelInput> ins{sample_input()};
  MaskPlan plan;
  plan.q = {0.2, 0.4, 0.5, 0.1, 0.3, 0.3};
  plan.outcome = {Replacement::mask, Replacement::none, Replacement::random, Replacement::keep, Replacement::none,
                  Replacement::mask};
  plan.replacement = {Vocabulary::kMask, 3, 5, 2, 5, Vocabulary::kMask};
  const std::vector<MaskPlan> plans{plan};
  const auto report = grad_check(
      [&] { return add(mem_loss(ins, plans, p, cfg), scale(time_gap_loss(ins, plans, p, cfg), 0.1)); }, p.tensors(),
      1e-6, 1e-4);
  EXPECT_TRUE(report.passed) << report.max_error << " at " << p.named()[report.worst_param].name;
}

TEST(Adam, FirstStepMovesByLearningRate) {
  auto w = Tensor::parameter(1, 2, {1.0, -1.0});
  Adam opt({w}, {0.1, 0.9, 0.999, 1e-8});
  sum(mul(w, Tensor::constant(1, 2, {3.0, -0.5}))).backward();
  opt.step();
  EXPECT_NEAR(w.values()[0], 0.9, 1e-7);
  EXPECT_NEAR(w.values()[1], -0.9, 1e-7);
}

TEST(Adam, UnreachedParametersAreSkipped) {
  auto w = Tensor::parameter(1, 1, {2.0});
  auto unused = Tensor::parameter(1, 1, {5.0});
  Adam opt({w, unused}, {});
  square(w).backward();
  opt.step();
  EXPECT_EQ(unused.values()[0], 5.0);
  EXPECT_LT(w.values()[0], 2.0);
}

class Training : public ::testing::Test {
 protected:
  static TrainData small_corpus(std::size_t n, std::uint64_t seed) {
    GenConfig g;
    g.patients = n;
    const auto c = generate_synthetic(g, seed);
    auto vocab = c.vocab;
    auto seqs = c.sequences;
    assign_inverse_frequency_utilities(seqs, vocab);
    return make_train_data(seqs, vocab, "gap");
  }
};

TEST_F(Training, ZeroLearningRateLeavesParametersBitIdentical) {
  const auto data = small_corpus(10, 1);
  auto cfg = tiny_config(data.utilities.size());
  auto p = init_params(cfg);
  const auto before = encode_checkpoint(cfg, p);
  TrainConfig t;
  t.adam.lr = 0.0;
  t.steps = 20;
  t.batch = 2;
  train(data, p, cfg, t);
  EXPECT_EQ(encode_checkpoint(cfg, p), before);
}

TEST_F(Training, SameSeedSameLog) {
  const auto data = small_corpus(10, 2);
  const auto cfg = tiny_config(data.utilities.size());
  TrainConfig t;
  t.steps = 15;
  t.batch = 2;
  t.seed = 9;
  auto p1 = init_params(cfg), p2 = init_params(cfg);
  const auto a = train(data, p1, cfg, t), b = train(data, p2, cfg, t);
  EXPECT_EQ(metrics_csv(a, t), metrics_csv(b, t));
  EXPECT_EQ(encode_checkpoint(cfg, p1), encode_checkpoint(cfg, p2));
  EXPECT_EQ(metrics_csv(a, t).substr(0, 30), "step,loss,objective,lr,seconds");
}

TEST_F(Training, DivergenceReportsStepAndLastFiniteLoss) {
  const auto data = small_corpus(6, 3);
  const auto cfg = tiny_config(data.utilities.size());
  auto p = init_params(cfg);
  TrainConfig t;
  t.adam.lr = 1e250;
  t.steps = 10;
  t.batch = 2;
  try {
    train(data, p, cfg, t);
    FAIL() << "expected divergence";
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("diverged at step"), std::string::npos) << msg;
    EXPECT_NE(msg.find("last finite loss"), std::string::npos) << msg;
  }
}

TEST_F(Training, ClassificationNeedsTargets) {
  auto data = small_corpus(4, 4);
  const auto cfg = tiny_config(data.utilities.size());
  auto p = init_params(cfg);
  TrainConfig t;
  t.objective = Objective::classification;
  EXPECT_THROW(train(data, p, cfg, t), ConfigError);
  t.task = "gap";
  data.targets.pop_back();
  EXPECT_THROW(train(data, p, cfg, t), ValidationError);
}

TEST_F(Training, MemorizesFiveSequences) {
  const auto data = small_corpus(5, 5);
  ModelConfig cfg;
  cfg.vocab_size = data.utilities.size();
  cfg.seed = 1;
  auto p = init_params(cfg);
  TrainConfig t;
  t.steps = 2000;
  t.batch = 5;
  t.adam.lr = 1e-3;
  t.seed = 2;
  const auto r = train(data, p, cfg, t);
  std::vector<double> losses;
  for (const auto& row : r.log) losses.push_back(row.loss);
  const auto s = smooth(losses, 50);
  EXPECT_LT(s.back(), 0.1) << "smoothed MEM loss after 2000 steps";
}

TEST_F(Training, SmoothedLossTrendsDownward) {
  const auto data = small_corpus(200, 1);
  ModelConfig cfg;
  cfg.vocab_size = data.utilities.size();
  cfg.seed = 1;
  auto p = init_params(cfg);
  TrainConfig t;
  t.steps = 1000;
  t.seed = 3;
  const auto r = train(data, p, cfg, t);
  std::vector<double> losses;
  for (const auto& row : r.log) losses.push_back(row.loss);
  // non-overlapping windows of 50; a rise must stay within 3 standard errors of the difference
  const std::size_t w = 50;
  std::vector<double> means, ses;
  for (std::size_t b = 0; b + w <= losses.size(); b += w) {
    double m = 0.0, v = 0.0;
    for (std::size_t i = b; i < b + w; ++i) m += losses[i] / w;
    for (std::size_t i = b; i < b + w; ++i) v += (losses[i] - m) * (losses[i] - m) / (w - 1);
    means.push_back(m);
    ses.push_back(std::sqrt(v / w));
  }
  for (std::size_t k = 1; k < means.size(); ++k) {
    const double tol = 3.0 * std::hypot(ses[k], ses[k - 1]);
    EXPECT_LE(means[k], means[k - 1] + tol) << "window " << k;
  }
  EXPECT_LT(means.back(), means.front() - 3.0 * std::hypot(ses.back(), ses.front()));
  const auto s = smooth(losses, w);
  EXPECT_LT(s.back(), s[w - 1]);
}

TEST(Smooth, MovingAverage) {
  const std::vector<double> xs{1, 2, 3, 4, 5};
  EXPECT_EQ(smooth(xs, 2), (std::vector<double>{1, 1.5, 2.5, 3.5, 4.5}));
  EXPECT_EQ(smooth(xs, 10), (std::vector<double>{1, 1.5, 2, 2.5, 3}));
}

TEST(TrainConfigJson, RoundTrip) {
  TrainConfig t;
  t.objective = Objective::reweighted_mem;
  t.time_gap = true;
  t.adam.lr = 0.002;
  t.steps = 17;
  t.task = "gap";
  EXPECT_EQ(to_json(train_config_from_json(to_json(t))), to_json(t));
  EXPECT_THROW(objective_from_string("contrastive"), ConfigError);
}
