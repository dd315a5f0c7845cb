#pragma once

// Train / evaluate protocols on planted synthetic tasks and the four-way
// ablation (full, no hierarchy, no temporal embeddings, no salience masking).

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "chronoformer/analysis.hpp"
#include "chronoformer/errors.hpp"
#include "chronoformer/model.hpp"
#include "chronoformer/pretrain.hpp"
#include "chronoformer/synthetic.hpp"

namespace chronoformer {

enum class Variant { full, no_hierarchical, no_temporal, no_conditional_masking };

inline const std::vector<Variant>& all_variants() {
  static const std::vector<Variant> v{Variant::full, Variant::no_hierarchical, Variant::no_temporal,
                                      Variant::no_conditional_masking};
  return v;
}

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::no_hierarchical: return "no_hierarchical";
    case Variant::no_temporal: return "no_temporal";
    case Variant::no_conditional_masking: return "no_conditional_masking";
  }
  return "?";
}

inline ModelConfig apply_variant(ModelConfig c, Variant v) {
  if (v == Variant::no_hierarchical) c.use_hierarchical = false;
  if (v == Variant::no_temporal) c.use_temporal_embeddings = false;
  if (v == Variant::no_conditional_masking) c.use_conditional_masking = false;
  return c;
}

struct ProtocolConfig {
  GenConfig data;                       ///< training distribution
  std::size_t test_patients = 200;
  std::optional<GenConfig> test_shift;  ///< evaluate on this distribution instead
  ModelConfig model;                    ///< vocab_size and seed are filled per run
  TrainConfig finetune;                 ///< classification stage
  std::size_t pretrain_steps = 0;       ///< MEM stage before fine-tuning; 0 skips it
  TrainConfig pretrain;
  std::size_t finetune_patients = 0;    ///< labelled subset for fine-tuning; 0 = all

  ProtocolConfig() {
    finetune.objective = Objective::classification;
    finetune.steps = 2000;
    finetune.adam.lr = 1e-3;
  }
};

inline nlohmann::json to_json(const ProtocolConfig& p) {
  nlohmann::json j{{"data", to_json(p.data)},
                   {"test_patients", p.test_patients},
                   {"model", to_json(p.model)},
                   {"finetune", to_json(p.finetune)},
                   {"pretrain_steps", p.pretrain_steps},
                   {"pretrain", to_json(p.pretrain)},
                   {"finetune_patients", p.finetune_patients}};
  if (p.test_shift) j["test_shift"] = to_json(*p.test_shift);
  return j;
}

inline ProtocolConfig protocol_from_json(const nlohmann::json& j, ProtocolConfig p = {}) {
  if (j.contains("data")) p.data = gen_config_from_json(j.at("data"), p.data);
  if (j.contains("test_patients")) p.test_patients = j.at("test_patients").get<std::size_t>();
  if (j.contains("test_shift")) p.test_shift = gen_config_from_json(j.at("test_shift"), p.data);
  if (j.contains("model")) p.model = model_config_from_json(j.at("model"), p.model);
  if (j.contains("finetune")) p.finetune = train_config_from_json(j.at("finetune"), p.finetune);
  if (j.contains("pretrain_steps")) p.pretrain_steps = j.at("pretrain_steps").get<std::size_t>();
  if (j.contains("pretrain")) p.pretrain = train_config_from_json(j.at("pretrain"), p.pretrain);
  if (j.contains("finetune_patients")) p.finetune_patients = j.at("finetune_patients").get<std::size_t>();
  return p;
}

struct Metrics {
  double auroc = 0.0;
  double auprc = 0.0;
  double f1 = 0.0;
  std::size_t n = 0;
};

inline nlohmann::json to_json(const Metrics& m) {
  return {{"auroc", m.auroc}, {"auprc", m.auprc}, {"f1", m.f1}, {"n", m.n}};
}

struct TrainedModel {
  ModelConfig config;
  ModelParams params;
  Vocabulary vocab;
  std::string task;
};

/// Sequence-level scores of the binary head.
inline std::vector<double> score_sequences(const TrainedModel& m, const std::vector<PatientSequence>& sequences) {
  std::vector<double> out;
  out.reserve(sequences.size());
  for (const auto& s : sequences) out.push_back(predict(make_input(s), m.params, m.config, PredictTask::binary).front());
  return out;
}

inline Metrics binary_metrics(std::span<const double> scores, std::span<const double> labels) {
  return {auroc(scores, labels), auprc(scores, labels), f1_at_threshold(scores, labels, 0.5), scores.size()};
}

inline Metrics evaluate(const TrainedModel& m, const std::vector<PatientSequence>& sequences) {
  const auto scores = score_sequences(m, sequences);
  std::vector<double> labels;
  for (const auto& s : sequences) labels.push_back(s.binary_label(m.task));
  return binary_metrics(scores, labels);
}

namespace detail {

inline std::uint64_t stream_seed(std::uint64_t seed, std::string_view label) {
  Rng r = Rng(seed).derive(label);
  return r.next_u64();
}

}  // namespace detail

/// Training corpus of one replicate.
inline GeneratedCorpus protocol_train_corpus(const ProtocolConfig& p, std::uint64_t seed) {
  return generate_synthetic(p.data, detail::stream_seed(seed, "train-data"));
}

/// Held-out corpus of one replicate (the shifted distribution when configured).
inline GeneratedCorpus protocol_test_corpus(const ProtocolConfig& p, std::uint64_t seed) {
  GenConfig g = p.test_shift.value_or(p.data);
  g.patients = p.test_patients;
  g.id_prefix = "t";
  return generate_synthetic(g, detail::stream_seed(seed, "test-data"));
}

/// Optional MEM pretraining, then classification fine-tuning.
inline TrainedModel fit(const ProtocolConfig& p, Variant variant, std::uint64_t seed, const GeneratedCorpus& corpus) {
  TrainedModel m;
  m.task = to_string(p.data.task);
  m.vocab = corpus.vocab;
  m.config = apply_variant(p.model, variant);
  m.config.vocab_size = corpus.vocab.size();
  m.config.seed = seed;
  m.params = init_params(m.config);
  if (p.pretrain_steps > 0) {
    TrainConfig pc = p.pretrain;
    if (pc.objective == Objective::classification) pc.objective = Objective::mem;
    pc.steps = p.pretrain_steps;
    pc.seed = detail::stream_seed(seed, "pretrain");
    train(make_train_data(corpus.sequences, corpus.vocab), m.params, m.config, pc);
  }
  std::vector<PatientSequence> labelled = corpus.sequences;
  if (p.finetune_patients > 0 && p.finetune_patients < labelled.size()) labelled.resize(p.finetune_patients);
  TrainConfig fc = p.finetune;
  fc.task = m.task;
  fc.seed = detail::stream_seed(seed, "finetune");
  finetune(make_train_data(labelled, corpus.vocab, m.task), m.params, m.config, fc);
  return m;
}

inline Metrics run_protocol(const ProtocolConfig& p, Variant variant, std::uint64_t seed) {
  const auto train_corpus = protocol_train_corpus(p, seed);
  const auto model = fit(p, variant, seed, train_corpus);
  return evaluate(model, protocol_test_corpus(p, seed).sequences);
}

struct MeanSd {
  double mean = 0.0;
  double sd = 0.0;  ///< sample standard deviation; 0 for a single value
};

inline MeanSd mean_sd(std::span<const double> xs) {
  MeanSd r;
  if (xs.empty()) return r;
  for (double x : xs) r.mean += x;
  r.mean /= static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - r.mean) * (x - r.mean);
    r.sd = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  }
  return r;
}

struct AblationRow {
  Variant variant = Variant::full;
  std::vector<Metrics> runs;  ///< one per seed
  MeanSd auroc, auprc, f1;
  double delta = 0.0;  ///< mean AUROC minus the full model's
};

struct AblationTable {
  std::vector<std::uint64_t> seeds;
  std::vector<AblationRow> rows;
};

/// Runs each variant on each seed. Rows follow the order of variants; the
/// full model is always included and is the reference for delta.
inline AblationTable run_ablation(const ProtocolConfig& p, std::vector<Variant> variants,
                                  const std::vector<std::uint64_t>& seeds) {
  if (seeds.empty()) throw ConfigError("ablate: need at least one seed");
  if (std::find(variants.begin(), variants.end(), Variant::full) == variants.end()) variants.insert(variants.begin(), Variant::full);
  AblationTable table;
  table.seeds = seeds;
  for (Variant v : variants) {
    AblationRow row;
    row.variant = v;
    std::vector<double> a, b, f;
    for (auto s : seeds) {
      row.runs.push_back(run_protocol(p, v, s));
      a.push_back(row.runs.back().auroc);
      b.push_back(row.runs.back().auprc);
      f.push_back(row.runs.back().f1);
    }
    row.auroc = mean_sd(a);
    row.auprc = mean_sd(b);
    row.f1 = mean_sd(f);
    table.rows.push_back(std::move(row));
  }
  double full = 0.0;
  for (const auto& r : table.rows)
    if (r.variant == Variant::full) full = r.auroc.mean;
  for (auto& r : table.rows) r.delta = r.variant == Variant::full ? 0.0 : r.auroc.mean - full;
  return table;
}

inline nlohmann::json to_json(const AblationTable& t) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : t.rows) {
    nlohmann::json per_seed = nlohmann::json::array();
    for (const auto& m : r.runs) per_seed.push_back(to_json(m));
    rows.push_back({{"config", to_string(r.variant)},
                    {"auroc", r.auroc.mean},
                    {"auroc_sd", r.auroc.sd},
                    {"auprc", r.auprc.mean},
                    {"auprc_sd", r.auprc.sd},
                    {"f1", r.f1.mean},
                    {"f1_sd", r.f1.sd},
                    {"delta", r.delta},
                    {"runs", per_seed}});
  }
  return {{"seeds", t.seeds}, {"rows", rows}};
}

}  // namespace chronoformer
