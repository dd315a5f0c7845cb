#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "chronoformer/analysis.hpp"
#include "chronoformer/synthetic.hpp"
#include "support.hpp"

using namespace chronoformer;
using testing_support::make_sequence;

namespace {

double pairwise_auroc(const std::vector<double>& s, const std::vector<double>& y) {
  double wins = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (y[i] == 1.0 && y[j] == 0.0) {
        pairs += 1.0;
        if (s[i] > s[j]) wins += 1.0;
        if (s[i] == s[j]) wins += 0.5;
      }
  return wins / pairs;
}

/// Precision/recall at every distinct threshold, counted from scratch each time.
double exhaustive_ap(const std::vector<double>& s, const std::vector<double>& y) {
  std::set<double, std::greater<>> thresholds(s.begin(), s.end());
  const double pos = static_cast<double>(std::count(y.begin(), y.end(), 1.0));
  double ap = 0.0, prev_r = 0.0;
  for (double t : thresholds) {
    double tp = 0, fp = 0;
    for (std::size_t i = 0; i < s.size(); ++i)
      if (s[i] >= t) (y[i] == 1.0 ? tp : fp) += 1;
    const double r = tp / pos, p = tp / (tp + fp);
    ap += (r - prev_r) * p;
    prev_r = r;
  }
  return ap;
}

double harmonic_f1(const std::vector<double>& s, const std::vector<double>& y, double t) {
  double tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] >= t && y[i] == 1.0) ++tp;
    if (s[i] >= t && y[i] == 0.0) ++fp;
    if (s[i] < t && y[i] == 1.0) ++fn;
  }
  if (tp == 0) return 0.0;
  const double p = tp / (tp + fp), r = tp / (tp + fn);
  return 2 * p * r / (p + r);
}

struct Instance {
  std::vector<double> scores, labels;
};

Instance random_instance(Rng& rng, std::size_t n, bool ties) {
  Instance in;
  for (std::size_t i = 0; i < n; ++i) {
    in.scores.push_back(ties ? std::floor(rng.uniform() * 5) / 4 : rng.uniform());
    in.labels.push_back(rng.bernoulli(0.4) ? 1.0 : 0.0);
  }
  in.labels[0] = 1.0;
  in.labels[1] = 0.0;
  return in;
}

AttentionMatrix matrix_of(std::size_t n, std::vector<double> w) {
  AttentionMatrix m;
  m.level = AttentionLevel::inter;
  m.rows = m.cols = n;
  m.weights = std::move(w);
  return m;
}

}  // namespace

TEST(Auroc, Examples) {
  EXPECT_EQ(auroc(std::vector<double>{0.9, 0.1}, std::vector<double>{1, 0}), 1.0);
  EXPECT_EQ(auroc(std::vector<double>{0.3, 0.3, 0.3}, std::vector<double>{1, 0, 1}), 0.5);
  EXPECT_THROW(auroc(std::vector<double>{0.3, 0.4}, std::vector<double>{1, 1}), UndefinedMetricError);
  EXPECT_THROW(auroc(std::vector<double>{0.3}, std::vector<double>{1, 0}), DimensionError);
}

TEST(Auroc, MatchesPairwiseOracleExactly) {
  Rng rng(1);
  for (int k = 0; k < 200; ++k) {
    const auto in = random_instance(rng, 2 + rng.below(49), k % 2 == 0);
    EXPECT_EQ(auroc(in.scores, in.labels), pairwise_auroc(in.scores, in.labels)) << k;
  }
}

TEST(Auprc, ExamplesAndOracle) {
  EXPECT_EQ(auprc(std::vector<double>{0.9, 0.8, 0.2}, std::vector<double>{1, 1, 0}), 1.0);
  EXPECT_DOUBLE_EQ(auprc(std::vector<double>{0.9, 0.8, 0.2}, std::vector<double>{0, 1, 1}), 0.5 * 0.5 + 0.5 * 2.0 / 3.0);
  EXPECT_THROW(auprc(std::vector<double>{0.5, 0.4}, std::vector<double>{0, 0}), UndefinedMetricError);
  Rng rng(2);
  for (int k = 0; k < 200; ++k) {
    const auto in = random_instance(rng, 2 + rng.below(29), k % 3 == 0);
    EXPECT_EQ(auprc(in.scores, in.labels), exhaustive_ap(in.scores, in.labels)) << k;
  }
}

TEST(F1, ExamplesAndOracle) {
  EXPECT_EQ(f1_at_threshold(std::vector<double>{0.9, 0.1}, std::vector<double>{1, 0}), 1.0);
  EXPECT_EQ(f1_at_threshold(std::vector<double>{0.2, 0.1}, std::vector<double>{1, 0}), 0.0);
  EXPECT_EQ(f1_at_threshold(std::vector<double>{0.5}, std::vector<double>{1}), 1.0);
  Rng rng(3);
  for (int k = 0; k < 200; ++k) {
    const auto in = random_instance(rng, 2 + rng.below(49), k % 2 == 0);
    const double t = rng.uniform();
    EXPECT_NEAR(f1_at_threshold(in.scores, in.labels, t), harmonic_f1(in.scores, in.labels, t), 1e-15);
  }
}

TEST(MacroMetrics, AveragePerClass) {
  const std::vector<std::vector<double>> s{{0.9, 0.2}, {0.1, 0.8}, {0.7, 0.3}};
  const std::vector<std::vector<double>> y{{1, 0}, {0, 1}, {0, 1}};
  const double a0 = auroc(std::vector<double>{0.9, 0.1, 0.7}, std::vector<double>{1, 0, 0});
  const double a1 = auroc(std::vector<double>{0.2, 0.8, 0.3}, std::vector<double>{0, 1, 1});
  EXPECT_DOUBLE_EQ(macro_auroc(s, y), (a0 + a1) / 2);
  EXPECT_NO_THROW(macro_auprc(s, y));
  EXPECT_NO_THROW(macro_f1(s, y));
}

TEST(Spectrum, RbfMatchesDenseEigensolver) {
  const std::vector<double> times{0, 1, 2, 3};
  const auto k = rbf_kernel(times, 1.0);
  const auto r = spectrum(k);
  Eigen::MatrixXd m(4, 4);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) m(i, j) = k(i, j);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  auto ev = es.eigenvalues();
  std::vector<double> oracle(ev.data(), ev.data() + ev.size());
  std::sort(oracle.begin(), oracle.end(), std::greater<>());
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(r.eigenvalues[i], oracle[i], 1e-7);
}

TEST(Spectrum, RandomAsymmetricMatricesMatchEigenAfterSymmetrizing) {
  Rng rng(4);
  for (int k = 0; k < 25; ++k) {
    const std::size_t n = 2 + rng.below(12);
    SquareMatrix a(n);
    for (auto& v : a.data) v = rng.uniform(-1.0, 1.0);
    const auto r = spectrum(a);
    Eigen::MatrixXd m(n, n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) m(i, j) = 0.5 * (a(i, j) + a(j, i));
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
    std::vector<double> oracle(es.eigenvalues().data(), es.eigenvalues().data() + n);
    std::sort(oracle.begin(), oracle.end(), std::greater<>());
    for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(r.eigenvalues[i], oracle[i], 1e-9);
  }
}

TEST(Spectrum, ZeroGammaIsRankOne) {
  const std::vector<double> times{0, 3, 7, 12, 20};
  const auto r = spectrum(rbf_kernel(times, 0.0));
  EXPECT_NEAR(r.eigenvalues[0], 5.0, 1e-12);
  for (std::size_t i = 1; i < 5; ++i) EXPECT_NEAR(r.eigenvalues[i], 0.0, 1e-12);
  EXPECT_NEAR(r.effective_rank, 1.0, 1e-9);
  EXPECT_EQ(r.k_star, 1u);
}

TEST(Spectrum, LargeGammaIsIdentity) {
  const std::vector<double> times{0, 3, 7, 12, 20};
  const auto r = spectrum(rbf_kernel(times, 1e6));
  for (double l : r.eigenvalues) EXPECT_NEAR(l, 1.0, 1e-12);
  EXPECT_NEAR(r.effective_rank, 5.0, 1e-9);
  EXPECT_EQ(r.k_star, 5u);
}

TEST(Spectrum, ErrorsAndSerialization) {
  SquareMatrix bad(2, std::vector<double>{1, std::nan(""), 0, 1});
  EXPECT_THROW(spectrum(bad), NumericError);
  EXPECT_THROW(spectrum(SquareMatrix(3, 0.0)), UndefinedMetricError);
  EXPECT_THROW(SquareMatrix(3, std::vector<double>(8, 0.0)), DimensionError);
  const auto r = spectrum(rbf_kernel(std::vector<double>{0, 1}, 1.0));
  const auto csv = decay_csv(r);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "k,lambda,cumulative_fraction");
  EXPECT_EQ(to_json(r).at("k_star"), r.k_star);
}

TEST(DecayCompare, IdenticalTracesGiveEqualKStar) {
  AttentionTrace t;
  t.matrices.push_back(matrix_of(3, {0.5, 0.25, 0.25, 0.2, 0.6, 0.2, 0.1, 0.1, 0.8}));
  const auto r = decay_compare(t, t);
  ASSERT_EQ(r.entries.size(), 1u);
  EXPECT_EQ(r.entries[0].k_model, r.entries[0].k_baseline);
  EXPECT_TRUE(r.model_le_everywhere);
  EXPECT_FALSE(r.layers[0].model_faster());
}

TEST(DecayCompare, RankOneVersusIdentity) {
  for (std::size_t n = 2; n <= 9; ++n) {
    AttentionTrace uniform, eye;
    uniform.matrices.push_back(matrix_of(n, std::vector<double>(n * n, 1.0 / n)));
    std::vector<double> id(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) id[i * n + i] = 1.0;
    eye.matrices.push_back(matrix_of(n, id));
    const auto r = decay_compare(uniform, eye);
    EXPECT_EQ(r.entries[0].k_model, 1u);
    EXPECT_EQ(r.entries[0].k_baseline, n);
    EXPECT_TRUE(r.layers[0].model_faster());
    const auto j = to_json(r);
    EXPECT_EQ(j.at("layers")[0].at("mean_k_star_baseline"), static_cast<double>(n));
  }
}

TEST(DecayCompare, ShapeMismatchRejected) {
  AttentionTrace a, b;
  a.matrices.push_back(matrix_of(2, {1, 0, 0, 1}));
  b.matrices.push_back(matrix_of(3, std::vector<double>(9, 1.0 / 3)));
  EXPECT_THROW(decay_compare(a, b), DimensionError);
}

TEST(CorpusStats, EntropyExamples) {
  const std::vector<PatientSequence> uniform{make_sequence({{2, 0}, {3, 1}, {4, 2}, {5, 3}})};
  EXPECT_NEAR(token_entropy(uniform), std::log(4.0), 1e-15);
  const std::vector<PatientSequence> single{make_sequence({{2, 0}, {2, 1}, {2, 30}})};
  EXPECT_EQ(token_entropy(single), 0.0);
  EXPECT_THROW(token_entropy({}), ValidationError);
}

TEST(CorpusStats, EntropyMatchesCountsOfGeneratedCorpus) {
  GenConfig g;
  g.patients = 200;
  const auto c = generate_synthetic(g, 9);
  std::map<std::string, double> counts;
  double total = 0.0;
  for (const auto& s : c.sequences)
    for (const auto& e : s.events()) {
      counts[c.vocab.token(e.code)] += 1.0;
      total += 1.0;
    }
  double h = 0.0;
  for (const auto& [tok, n] : counts) h -= n / total * std::log(n / total);
  EXPECT_NEAR(token_entropy(c.sequences), h, 1e-12);
}

TEST(CorpusStats, CooccurrenceDensity) {
  // codes 2 and 3 share a bin; 4 is alone in its bin. Vocabulary of 3 codes -> 9 cells, 2 nonzero.
  const std::vector<PatientSequence> corpus{make_sequence({{2, 0}, {3, 1}, {4, 30}})};
  EXPECT_DOUBLE_EQ(cooccurrence_density(corpus, 5), 2.0 / 9.0);
  const std::vector<PatientSequence> repeated{make_sequence({{2, 0}, {2, 1}})};
  EXPECT_DOUBLE_EQ(cooccurrence_density(repeated, 4), 1.0 / 4.0);
}

TEST(ExportAttention, SingleTokenTrace) {
  const auto dir = testing_support::temp_dir("export_single");
  AttentionTrace t;
  auto m = matrix_of(1, {1.0});
  m.level = AttentionLevel::intra;
  m.bin = 0;
  m.times = {3.5};
  t.matrices.push_back(m);
  ModelInput in;
  in.bins = {{{2, 3.5, 0.0, std::nullopt, false}}};
  in.reference_times = {3.5};
  const auto paths = export_attention(t, in, dir.string());
  ASSERT_EQ(paths.size(), 1u);
  EXPECT_EQ(read_file(paths[0]), "query,key,weight\n0,0,1\n");
  const auto side = nlohmann::json::parse(read_file(dir / "attn_intra_L0_H0_B0.json"));
  EXPECT_EQ(side.at("tokens")[0], 2);
  EXPECT_EQ(side.at("times")[0], 3.5);
}

TEST(ExportAttention, ModelTraceRoundTripsExactly) {
  const auto dir = testing_support::temp_dir("export_model");
  auto cfg = testing_support::tiny_config(6);
  auto p = init_params(cfg);
  testing_support::jitter(p, 3);
  const auto in = make_input(make_sequence({{2, 1}, {3, 4}, {4, 30}, {5, 31}, {2, 60}}));
  const auto f = forward(in, p, cfg, {true, true});
  Vocabulary v;
  for (const char* s : {"A", "B", "C", "D"}) v.add(s);
  const auto paths = export_attention(f.trace, in, dir.string(), &v);
  ASSERT_EQ(paths.size(), f.trace.matrices.size());
  for (std::size_t i = 0; i < paths.size(); ++i) {
    const auto back = parse_attention_csv(read_file(paths[i]));
    EXPECT_EQ(back.weights, f.trace.matrices[i].weights);
    for (std::size_t r = 0; r < back.rows; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < back.cols; ++c) s += back.at(r, c);
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
  const auto side = nlohmann::json::parse(read_file(dir / "attn_intra_L0_H1_B1.json"));
  EXPECT_EQ(side.at("tokens"), nlohmann::json({"C", "D"}));
  EXPECT_THROW(export_attention(AttentionTrace{}, in, dir.string()), ValidationError);
}
