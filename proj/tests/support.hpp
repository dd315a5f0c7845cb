#pragma once

#include <cmath>
#include <filesystem>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "chronoformer/chronoformer.hpp"

namespace testing_support {

using namespace chronoformer;

struct Ev {
  std::size_t code;
  double time;
  std::optional<double> value = std::nullopt;
};

inline PatientSequence make_sequence(const std::vector<Ev>& evs, double bin_width = 24.0, std::string id = "p") {
  std::vector<EventRecord> events;
  double anchor = 0.0;
  for (const auto& e : evs) {
    events.push_back({e.code, e.time, e.value});
    anchor = std::max(anchor, e.time + 1.0);
  }
  PatientSequence s;
  s.id = std::move(id);
  s.anchor_time = anchor;
  s.bins = bin_events(std::move(events), bin_width);
  return s;
}

/// Small network for gradient checks and fast unit tests.
inline ModelConfig tiny_config(std::size_t vocab, std::uint64_t seed = 7) {
  ModelConfig c;
  c.width = 8;
  c.heads = 2;
  c.local_layers = 1;
  c.global_layers = 1;
  c.delta_buckets = 8;
  c.vocab_size = vocab;
  c.num_classes = 3;
  c.ffn_mult = 2;
  c.sigma_init = 6.0;
  c.seed = seed;
  return c;
}

/// Perturbs every parameter so zero-initialized tables (delta, biases) carry signal.
inline void jitter(ModelParams& p, std::uint64_t seed, double scale = 0.1) {
  Rng rng(seed);
  for (auto& nt : p.named()) {
    auto t = nt.tensor;
    for (auto& v : t.mutable_values()) v += rng.uniform(-scale, scale);
  }
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("chronoformer_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testing_support
