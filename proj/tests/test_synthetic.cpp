#include <gtest/gtest.h>

#include <cmath>

#include "chronoformer/synthetic.hpp"
#include "support.hpp"

using namespace chronoformer;

namespace {

GenConfig config_for(TaskFamily t, std::size_t n = 300) {
  GenConfig g;
  g.task = t;
  g.patients = n;
  return g;
}

}  // namespace

class PlantedRule : public ::testing::TestWithParam<TaskFamily> {};

TEST_P(PlantedRule, NoiseFreeLabelsFollowTheRule) {
  const auto g = config_for(GetParam());
  const auto c = generate_synthetic(g, 12);
  std::size_t correct = 0;
  for (const auto& s : c.sequences) {
    const double rule = planted_label(g, c.vocab, s.events(), s.anchor_time);
    if (rule == s.binary_label(to_string(g.task))) ++correct;
  }
  EXPECT_EQ(correct, c.sequences.size());
}

TEST_P(PlantedRule, PrevalenceWithinBinomialBounds) {
  const auto g = config_for(GetParam(), 1000);
  const auto c = generate_synthetic(g, 5);
  double pos = 0.0;
  for (const auto& s : c.sequences) pos += s.binary_label(to_string(g.task));
  const double sd = std::sqrt(1000.0 * g.prevalence * (1.0 - g.prevalence));
  EXPECT_NEAR(pos, 1000.0 * g.prevalence, 3.0 * sd);
}

TEST_P(PlantedRule, SequencesAreValid) {
  const auto g = config_for(GetParam(), 100);
  const auto c = generate_synthetic(g, 8);
  for (const auto& s : c.sequences) {
    EXPECT_NO_THROW(validate_sequence(s, c.vocab.size()));
    EXPECT_EQ(s.anchor_time, g.horizon());
  }
}

INSTANTIATE_TEST_SUITE_P(Tasks, PlantedRule,
                         ::testing::Values(TaskFamily::gap, TaskFamily::recency, TaskFamily::longrange),
                         [](const auto& info) { return to_string(info.param); });

TEST(Generator, SameSeedSameBytes) {
  const auto g = config_for(TaskFamily::recency, 50);
  const auto a = generate_synthetic(g, 99), b = generate_synthetic(g, 99);
  EXPECT_EQ(serialize_corpus(a.sequences, a.vocab), serialize_corpus(b.sequences, b.vocab));
  EXPECT_EQ(a.manifest.dump(), b.manifest.dump());
  const auto c = generate_synthetic(g, 100);
  EXPECT_NE(serialize_corpus(a.sequences, a.vocab), serialize_corpus(c.sequences, c.vocab));
}

TEST(Generator, GapMarkersAreAdjacent) {
  const auto g = config_for(TaskFamily::gap, 200);
  const auto c = generate_synthetic(g, 1);
  const auto a = c.vocab.id("GAP_A"), b = c.vocab.id("GAP_B");
  for (const auto& s : c.sequences) {
    const auto ev = s.events();
    const auto deltas = compute_deltas(s);
    std::size_t ia = ev.size(), ib = ev.size();
    for (std::size_t i = 0; i < ev.size(); ++i) {
      if (ev[i].code == a) ia = i;
      if (ev[i].code == b) ib = i;
    }
    ASSERT_LT(ia, ev.size());
    ASSERT_EQ(ib, ia + 1) << s.id;
    EXPECT_DOUBLE_EQ(deltas[ib], ev[ib].time - ev[ia].time);
  }
}

TEST(Generator, NoiseFlipsRoughlyTheConfiguredFraction) {
  auto g = config_for(TaskFamily::gap, 2000);
  g.noise = 0.1;
  const auto c = generate_synthetic(g, 2);
  std::size_t flips = 0;
  for (const auto& s : c.sequences)
    if (planted_label(g, c.vocab, s.events(), s.anchor_time) != s.binary_label("gap")) ++flips;
  EXPECT_EQ(flips, c.manifest.at("label_flips").get<std::size_t>());
  EXPECT_NEAR(static_cast<double>(flips), 200.0, 3.0 * std::sqrt(2000 * 0.1 * 0.9));
}

TEST(Generator, InfeasibleConfigsRejected) {
  auto g = config_for(TaskFamily::gap);
  g.gap_threshold = 100.0;  // 3G exceeds the 192 h horizon
  EXPECT_THROW(generate_synthetic(g, 0), ConfigError);
  g = config_for(TaskFamily::gap);
  g.patients = 0;
  try {
    generate_synthetic(g, 0);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("patients"), std::string::npos);
  }
  g = config_for(TaskFamily::longrange);
  g.longrange_distance = 500.0;
  EXPECT_THROW(generate_synthetic(g, 0), ConfigError);
}

TEST(Generator, SharedVocabularyAcrossConfigs) {
  auto a = config_for(TaskFamily::recency);
  auto b = a;
  b.zipf_exponent = 0.5;
  b.occupancy = 0.5;
  b.noise = 0.05;
  EXPECT_EQ(synthetic_vocabulary(a).to_json()["tokens"], synthetic_vocabulary(b).to_json()["tokens"]);
}

TEST(Generator, ConfigJsonRoundTrip) {
  auto g = config_for(TaskFamily::longrange, 77);
  g.noise = 0.125;
  g.zipf_exponent = 0.75;
  const auto back = gen_config_from_json(to_json(g));
  EXPECT_EQ(to_json(back), to_json(g));
}

TEST(Generator, WritesThreeFiles) {
  const auto dir = testing_support::temp_dir("synthetic_write");
  const auto c = generate_synthetic(config_for(TaskFamily::gap, 20), 4);
  const auto p = write_generated(c, dir.string());
  EXPECT_TRUE(std::filesystem::exists(p.corpus));
  EXPECT_TRUE(std::filesystem::exists(p.vocab));
  EXPECT_TRUE(std::filesystem::exists(p.manifest));
  const auto back = parse_corpus(p.corpus, SchemaConfig{}, Vocabulary::load(p.vocab));
  EXPECT_EQ(back.vocab, c.vocab);
  EXPECT_EQ(back.sequences.size(), 20u);
}
