#pragma once

// Synthetic event corpora with planted, recomputable labels.
//
// Filler events are Zipf-distributed codes scattered over T bins. On top of
// them each task family plants marker codes whose timing alone decides the
// label:
//   gap        1 iff GAP_A and GAP_B occur less than G hours apart
//   recency    1 iff RISK occurs within W hours before the anchor
//   longrange  1 iff EARLY precedes LATE by at least D hours
// Labels equal the planted rule exactly unless label noise is configured,
// in which case each label is flipped independently with that probability.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "chronoformer/errors.hpp"
#include "chronoformer/events.hpp"
#include "chronoformer/rng.hpp"

namespace chronoformer {

enum class TaskFamily { gap, recency, longrange };

inline std::string to_string(TaskFamily t) {
  switch (t) {
    case TaskFamily::gap: return "gap";
    case TaskFamily::recency: return "recency";
    case TaskFamily::longrange: return "longrange";
  }
  return "?";
}

inline TaskFamily task_family_from_string(const std::string& s) {
  if (s == "gap") return TaskFamily::gap;
  if (s == "recency") return TaskFamily::recency;
  if (s == "longrange") return TaskFamily::longrange;
  throw ConfigError("task: unknown task family '" + s + "' (expected gap, recency or longrange)");
}

struct GenConfig {
  TaskFamily task = TaskFamily::gap;
  std::size_t vocab_size = 40;    ///< filler codes (markers come on top)
  std::size_t patients = 500;
  std::size_t bins = 8;           ///< history length in bins; anchor = bins * bin_width
  double events_per_bin = 3.0;    ///< mean filler events in an occupied bin
  double bin_width = 24.0;
  double occupancy = 0.8;         ///< probability that a bin holds filler events
  double zipf_exponent = 1.0;
  double noise = 0.0;             ///< label flip probability
  double prevalence = 0.5;
  double value_rate = 0.3;        ///< fraction of events carrying a scalar value
  double gap_threshold = 8.0;     ///< G (gap)
  double recency_window = 24.0;   ///< W (recency)
  double decoy_rate = 0.5;        ///< recency negatives that still carry an early RISK
  double longrange_distance = 72.0;  ///< D (longrange)
  std::string id_prefix = "p";

  [[nodiscard]] double horizon() const { return static_cast<double>(bins) * bin_width; }

  void validate() const {
    if (patients == 0) throw ConfigError("patients: must be at least 1");
    if (vocab_size == 0) throw ConfigError("vocab_size: must be at least 1");
    if (bins == 0) throw ConfigError("bins: must be at least 1");
    if (!(events_per_bin >= 1.0)) throw ConfigError("events_per_bin: must be >= 1");
    if (!(bin_width > 0.0)) throw ConfigError("bin_width: must be positive");
    if (!(occupancy > 0.0 && occupancy <= 1.0)) throw ConfigError("occupancy: must lie in (0, 1]");
    if (!(zipf_exponent >= 0.0)) throw ConfigError("zipf_exponent: must be >= 0");
    if (!(noise >= 0.0 && noise <= 0.5)) throw ConfigError("noise: must lie in [0, 0.5]");
    if (!(prevalence > 0.0 && prevalence < 1.0)) throw ConfigError("prevalence: must lie in (0, 1)");
    if (!(value_rate >= 0.0 && value_rate <= 1.0)) throw ConfigError("value_rate: must lie in [0, 1]");
    if (!(decoy_rate >= 0.0 && decoy_rate <= 1.0)) throw ConfigError("decoy_rate: must lie in [0, 1]");
    const double h = horizon();
    switch (task) {
      case TaskFamily::gap:
        if (!(gap_threshold > 0.0)) throw ConfigError("gap_threshold: must be positive");
        // negatives need gaps up to 3G inside the history
        if (3.0 * gap_threshold >= h) {
          throw ConfigError("gap_threshold: 3*G = " + std::to_string(3.0 * gap_threshold) +
                            " h does not fit in the history of " + std::to_string(h) + " h");
        }
        break;
      case TaskFamily::recency:
        if (!(recency_window > 0.0)) throw ConfigError("recency_window: must be positive");
        if (recency_window * 1.25 >= h) {
          throw ConfigError("recency_window: W = " + std::to_string(recency_window) + " h leaves no room for early events");
        }
        break;
      case TaskFamily::longrange:
        if (!(longrange_distance > 0.0)) throw ConfigError("longrange_distance: must be positive");
        if (longrange_distance * 1.25 >= h) {
          throw ConfigError("longrange_distance: D = " + std::to_string(longrange_distance) +
                            " h does not fit in the history of " + std::to_string(h) + " h");
        }
        break;
    }
  }
};

inline nlohmann::json to_json(const GenConfig& c) {
  return {{"task", to_string(c.task)},
          {"vocab_size", c.vocab_size},
          {"patients", c.patients},
          {"bins", c.bins},
          {"events_per_bin", c.events_per_bin},
          {"bin_width", c.bin_width},
          {"occupancy", c.occupancy},
          {"zipf_exponent", c.zipf_exponent},
          {"noise", c.noise},
          {"prevalence", c.prevalence},
          {"value_rate", c.value_rate},
          {"gap_threshold", c.gap_threshold},
          {"recency_window", c.recency_window},
          {"decoy_rate", c.decoy_rate},
          {"longrange_distance", c.longrange_distance},
          {"id_prefix", c.id_prefix}};
}

inline GenConfig gen_config_from_json(const nlohmann::json& j, GenConfig c = {}) {
  if (j.contains("task")) c.task = task_family_from_string(j.at("task").get<std::string>());
  auto get = [&j](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  get("vocab_size", c.vocab_size);
  get("patients", c.patients);
  get("bins", c.bins);
  get("events_per_bin", c.events_per_bin);
  get("bin_width", c.bin_width);
  get("occupancy", c.occupancy);
  get("zipf_exponent", c.zipf_exponent);
  get("noise", c.noise);
  get("prevalence", c.prevalence);
  get("value_rate", c.value_rate);
  get("gap_threshold", c.gap_threshold);
  get("recency_window", c.recency_window);
  get("decoy_rate", c.decoy_rate);
  get("longrange_distance", c.longrange_distance);
  get("id_prefix", c.id_prefix);
  return c;
}

inline std::vector<std::string> marker_tokens(TaskFamily task) {
  switch (task) {
    case TaskFamily::gap: return {"GAP_A", "GAP_B"};
    case TaskFamily::recency: return {"RISK"};
    case TaskFamily::longrange: return {"EARLY", "LATE"};
  }
  return {};
}

inline std::string filler_token(std::size_t k) {
  std::ostringstream os;
  os << "C" << std::setw(3) << std::setfill('0') << k;
  return os.str();
}

/// Markers first, then fillers C000.., so two configs with the same task and
/// vocab_size share ids.
inline Vocabulary synthetic_vocabulary(const GenConfig& c) {
  Vocabulary v;
  for (const auto& m : marker_tokens(c.task)) v.add(m);
  for (std::size_t k = 0; k < c.vocab_size; ++k) v.add(filler_token(k));
  return v;
}

/// Recomputes a task label from raw events.
inline double planted_label(const GenConfig& c, const Vocabulary& vocab, const std::vector<EventRecord>& events,
                            double anchor) {
  auto times_of = [&](const std::string& tok) {
    std::vector<double> t;
    const auto id = vocab.find(tok);
    if (!id) return t;
    for (const auto& e : events)
      if (e.code == *id) t.push_back(e.time);
    return t;
  };
  switch (c.task) {
    case TaskFamily::gap: {
      const auto a = times_of("GAP_A");
      const auto b = times_of("GAP_B");
      for (double ta : a)
        for (double tb : b)
          if (std::abs(tb - ta) < c.gap_threshold) return 1.0;
      return 0.0;
    }
    case TaskFamily::recency: {
      for (double t : times_of("RISK"))
        if (anchor - t <= c.recency_window) return 1.0;
      return 0.0;
    }
    case TaskFamily::longrange: {
      const auto early = times_of("EARLY");
      const auto late = times_of("LATE");
      for (double te : early)
        for (double tl : late)
          if (tl - te >= c.longrange_distance) return 1.0;
      return 0.0;
    }
  }
  return 0.0;
}

struct GeneratedCorpus {
  GenConfig config;
  std::uint64_t seed = 0;
  std::vector<PatientSequence> sequences;
  Vocabulary vocab;
  nlohmann::json manifest;
};

namespace detail {

class ZipfSampler {
 public:
  ZipfSampler(std::size_t n, double exponent) : cdf_(n) {
    double total = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      total += 1.0 / std::pow(static_cast<double>(k + 1), exponent);
      cdf_[k] = total;
    }
    for (auto& x : cdf_) x /= total;
  }
  std::size_t operator()(Rng& rng) const {
    const double u = rng.uniform();
    auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
    return std::min<std::size_t>(static_cast<std::size_t>(it - cdf_.begin()), cdf_.size() - 1);
  }

 private:
  std::vector<double> cdf_;
};

inline double round_time(double t) {
  // quarter-minute resolution keeps the JSON compact and exactly round-trippable
  return std::floor(t * 240.0) / 240.0;
}

}  // namespace detail

/// Builds the corpus in memory; write_generated() puts it on disk.
inline GeneratedCorpus generate_synthetic(const GenConfig& config, std::uint64_t seed) {
  config.validate();
  GeneratedCorpus out;
  out.config = config;
  out.seed = seed;
  out.vocab = synthetic_vocabulary(config);
  const auto markers = marker_tokens(config.task);
  const std::size_t first_filler = Vocabulary::kReserved + markers.size();
  const detail::ZipfSampler zipf(config.vocab_size, config.zipf_exponent);
  const double horizon = config.horizon();
  const double w = config.bin_width;
  const Rng root = Rng(seed).derive("generate");
  const auto max_extra = static_cast<std::uint64_t>(std::llround(2.0 * config.events_per_bin - 2.0));

  std::size_t flips = 0;
  for (std::size_t p = 0; p < config.patients; ++p) {
    Rng rng = root.derive(p);
    const bool positive = rng.bernoulli(config.prevalence);
    std::vector<EventRecord> events;

    // filler events
    std::vector<bool> occupied(config.bins);
    bool any = false;
    for (std::size_t b = 0; b < config.bins; ++b) {
      occupied[b] = rng.bernoulli(config.occupancy);
      any = any || occupied[b];
    }
    if (!any) occupied[rng.below(config.bins)] = true;
    for (std::size_t b = 0; b < config.bins; ++b) {
      if (!occupied[b]) continue;
      const std::size_t count = 1 + rng.below(max_extra + 1);
      for (std::size_t i = 0; i < count; ++i) {
        EventRecord e;
        e.code = first_filler + zipf(rng);
        e.time = detail::round_time(rng.uniform(static_cast<double>(b) * w, static_cast<double>(b + 1) * w));
        if (rng.bernoulli(config.value_rate)) e.value = std::round(rng.normal() * 1000.0) / 1000.0;
        events.push_back(e);
      }
    }

    auto marker = [&](std::size_t k, double t) {
      EventRecord e;
      e.code = Vocabulary::kReserved + k;
      e.time = detail::round_time(t);
      return e;
    };
    switch (config.task) {
      case TaskFamily::gap: {
        const double g = config.gap_threshold;
        const double gap = positive ? rng.uniform(0.1 * g, 0.9 * g) : rng.uniform(1.25 * g, 3.0 * g);
        const double ta = rng.uniform(0.0, horizon - gap - 0.5);
        const auto a = marker(0, ta);
        auto b = marker(1, ta + gap);
        // markers are consecutive: the planted gap is B's relative delta
        std::erase_if(events, [&](const EventRecord& e) { return e.time >= a.time && e.time <= b.time; });
        events.push_back(a);
        events.push_back(b);
        break;
      }
      case TaskFamily::recency: {
        const double W = config.recency_window;
        if (positive) {
          events.push_back(marker(0, rng.uniform(horizon - W + 0.5, horizon - 0.5)));
        } else if (rng.bernoulli(config.decoy_rate)) {
          events.push_back(marker(0, rng.uniform(0.0, horizon - 1.25 * W)));
        }
        break;
      }
      case TaskFamily::longrange: {
        const double D = config.longrange_distance;
        if (positive) {
          const double te = rng.uniform(0.0, horizon - D - 1.0);
          const double tl = rng.uniform(te + D + 0.5, horizon - 0.5);
          events.push_back(marker(0, te));
          events.push_back(marker(1, tl));
        } else {
          switch (rng.below(3)) {
            case 0:
              events.push_back(marker(0, rng.uniform(0.0, horizon - 0.5)));
              break;
            case 1:
              events.push_back(marker(1, rng.uniform(0.0, horizon - 0.5)));
              break;
            default: {
              const double te = rng.uniform(0.0, horizon - 0.5 * D - 1.0);
              const double tl = te + rng.uniform(0.5, 0.5 * D);
              events.push_back(marker(0, te));
              events.push_back(marker(1, tl));
              break;
            }
          }
        }
        break;
      }
    }

    PatientSequence s;
    {
      std::ostringstream id;
      id << config.id_prefix << std::setw(5) << std::setfill('0') << p;
      s.id = id.str();
    }
    s.anchor_time = horizon;
    s.bins = bin_events(std::move(events), w);
    double label = planted_label(config, out.vocab, s.events(), s.anchor_time);
    if (config.noise > 0.0 && rng.bernoulli(config.noise)) {
      label = 1.0 - label;
      ++flips;
    }
    s.labels.emplace(to_string(config.task), label);
    out.sequences.push_back(std::move(s));
  }

  assign_inverse_frequency_utilities(out.sequences, out.vocab);
  out.manifest = {{"generator", to_json(config)},
                  {"seed", seed},
                  {"label_key", to_string(config.task)},
                  {"markers", markers},
                  {"label_flips", flips},
                  {"files", {{"corpus", "corpus.jsonl"}, {"vocab", "vocab.json"}}}};
  return out;
}

struct GeneratedPaths {
  std::string corpus;
  std::string vocab;
  std::string manifest;
};

inline GeneratedPaths write_generated(const GeneratedCorpus& g, const std::string& dir) {
  std::filesystem::create_directories(dir);
  const std::filesystem::path base(dir);
  GeneratedPaths paths{(base / "corpus.jsonl").string(), (base / "vocab.json").string(), (base / "manifest.json").string()};
  write_file(paths.corpus, serialize_corpus(g.sequences, g.vocab));
  g.vocab.save(paths.vocab);
  write_file(paths.manifest, g.manifest.dump(2) + "\n");
  return paths;
}

}  // namespace chronoformer
