// chronoformer: generate / train / finetune / eval / ablate / analyze.
//
// Exit codes: 0 ok, 2 configuration, 3 numeric failure, 4 undefined metric, 1 other.

#include <cmath>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "chronoformer/chronoformer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace chronoformer;

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
  std::string corpus;
  std::string vocab;
  std::string checkpoint;
  std::string baseline;
  std::string manifest;
  std::string task;
  std::string kernel;
  bool no_hierarchical = false;
  bool no_temporal = false;
  bool no_conditional_masking = false;
  std::optional<std::size_t> patients;
  std::optional<std::size_t> vocab_size;
  std::optional<double> noise;
  std::optional<std::size_t> steps;
  std::optional<double> lr;
  std::string objective;
  bool time_gap = false;
  std::size_t seeds = 1;
  std::size_t sample = 20;
  bool oracle = false;
};

json load_config(const Options& o) {
  if (o.config.empty()) return json::object();
  try {
    return json::parse(read_file(o.config));
  } catch (const json::exception& e) {
    throw ConfigError("config " + o.config + ": " + e.what());
  }
}

json section(const json& cfg, const char* key) { return cfg.contains(key) ? cfg.at(key) : json::object(); }

void prepare_out(const Options& o) {
  std::error_code ec;
  fs::create_directories(o.out, ec);
  if (ec) throw IoError("cannot create output directory " + o.out + ": " + ec.message());
}

std::string out_path(const Options& o, const std::string& name) { return (fs::path(o.out) / name).string(); }

void write_resolved(const Options& o, const std::string& command, json body) {
  body["command"] = command;
  write_file(out_path(o, "resolved_config.json"), body.dump(2) + "\n");
}

void apply_model_flags(const Options& o, ModelConfig& mc) {
  if (!o.kernel.empty()) mc.kernel = kernel_from_string(o.kernel);
  if (o.no_hierarchical) mc.use_hierarchical = false;
  if (o.no_temporal) mc.use_temporal_embeddings = false;
  if (o.no_conditional_masking) mc.use_conditional_masking = false;
  if (o.seed) mc.seed = *o.seed;
}

void apply_train_flags(const Options& o, TrainConfig& tc) {
  if (o.seed) tc.seed = *o.seed;
  if (o.steps) tc.steps = *o.steps;
  if (o.lr) tc.adam.lr = *o.lr;
  if (!o.objective.empty()) tc.objective = objective_from_string(o.objective);
  if (o.time_gap) tc.time_gap = true;
  if (!o.task.empty()) tc.task = o.task;
}

Corpus load_corpus(const Options& o, double bin_width, std::optional<Vocabulary> vocab = std::nullopt) {
  if (o.corpus.empty()) throw ConfigError("--corpus is required");
  if (!o.vocab.empty()) vocab = Vocabulary::load(o.vocab);
  auto corpus = parse_corpus(o.corpus, SchemaConfig{bin_width}, std::move(vocab));
  if (corpus.sequences.empty()) throw ValidationError("corpus " + o.corpus + " holds no patients");
  return corpus;
}

json checkpoint_extra(const Vocabulary& vocab, const TrainConfig& tc) {
  return {{"vocab", vocab.to_json()}, {"training", to_json(tc)}};
}

Checkpoint load_checkpoint_for(const Options& o) {
  if (o.checkpoint.empty()) throw ConfigError("--checkpoint is required");
  return load_checkpoint(o.checkpoint);
}

std::optional<Vocabulary> checkpoint_vocab(const Checkpoint& ck) {
  if (!ck.extra.contains("vocab")) return std::nullopt;
  return Vocabulary::from_json(ck.extra.at("vocab"));
}

void require_vocab_size(const Checkpoint& ck, const Vocabulary& vocab) {
  if (vocab.size() != ck.config.vocab_size) {
    throw IncompatibleError("corpus vocabulary has " + std::to_string(vocab.size()) + " tokens, checkpoint expects " +
                            std::to_string(ck.config.vocab_size));
  }
}

// ----------------------------------------------------------------------------

int cmd_generate(const Options& o) {
  const json cfg = load_config(o);
  GenConfig g = gen_config_from_json(cfg.contains("generator") ? cfg.at("generator") : cfg);
  if (!o.task.empty()) g.task = task_family_from_string(o.task);
  if (o.patients) g.patients = *o.patients;
  if (o.vocab_size) g.vocab_size = *o.vocab_size;
  if (o.noise) g.noise = *o.noise;
  const std::uint64_t seed = o.seed.value_or(0);
  g.validate();
  prepare_out(o);
  const auto generated = generate_synthetic(g, seed);
  const auto paths = write_generated(generated, o.out);
  write_resolved(o, "generate", {{"generator", to_json(g)}, {"seed", seed}});
  std::cout << paths.manifest << "\n";
  return 0;
}

int cmd_train(const Options& o) {
  const json cfg = load_config(o);
  ModelConfig mc = model_config_from_json(section(cfg, "model"));
  TrainConfig tc = train_config_from_json(section(cfg, "train"));
  apply_model_flags(o, mc);
  apply_train_flags(o, tc);
  if (tc.objective == Objective::classification) throw ConfigError("objective: use finetune for classification");
  tc.validate();
  const auto corpus = load_corpus(o, mc.bin_width);
  mc.vocab_size = corpus.vocab.size();
  prepare_out(o);
  auto params = init_params(mc);
  const auto result = train(make_train_data(corpus.sequences, corpus.vocab), params, mc, tc);
  save_checkpoint(out_path(o, "checkpoint.chrf"), mc, params, checkpoint_extra(corpus.vocab, tc));
  write_file(out_path(o, "metrics.csv"), metrics_csv(result, tc));
  write_resolved(o, "train", {{"model", to_json(mc)}, {"train", to_json(tc)}, {"corpus", o.corpus}, {"vocab", o.vocab}});
  std::cout << out_path(o, "checkpoint.chrf") << "\n";
  return 0;
}

int cmd_finetune(const Options& o) {
  const json cfg = load_config(o);
  TrainConfig tc = train_config_from_json(section(cfg, "train"));
  tc.objective = Objective::classification;
  ModelConfig mc;
  ModelParams params;
  std::optional<Vocabulary> vocab;
  if (!o.checkpoint.empty()) {
    auto ck = load_checkpoint_for(o);
    mc = ck.config;
    params = std::move(ck.params);
    vocab = checkpoint_vocab(ck);
  } else {
    mc = model_config_from_json(section(cfg, "model"));
  }
  apply_model_flags(o, mc);
  apply_train_flags(o, tc);
  tc.objective = Objective::classification;
  if (tc.task.empty()) throw ConfigError("task: --task is required for finetune");
  tc.validate();
  const auto corpus = load_corpus(o, mc.bin_width, vocab);
  if (o.checkpoint.empty()) {
    mc.vocab_size = corpus.vocab.size();
    params = init_params(mc);
  } else if (corpus.vocab.size() != mc.vocab_size) {
    throw IncompatibleError("corpus vocabulary has " + std::to_string(corpus.vocab.size()) +
                            " tokens, checkpoint expects " + std::to_string(mc.vocab_size));
  }
  prepare_out(o);
  const auto result = finetune(make_train_data(corpus.sequences, corpus.vocab, tc.task), params, mc, tc);
  save_checkpoint(out_path(o, "checkpoint.chrf"), mc, params, checkpoint_extra(corpus.vocab, tc));
  write_file(out_path(o, "metrics.csv"), metrics_csv(result, tc));
  write_resolved(o, "finetune",
                 {{"model", to_json(mc)}, {"train", to_json(tc)}, {"corpus", o.corpus}, {"checkpoint", o.checkpoint}});
  std::cout << out_path(o, "checkpoint.chrf") << "\n";
  return 0;
}

int cmd_eval(const Options& o) {
  std::vector<double> scores, labels;
  std::string task = o.task;
  json resolved{{"corpus", o.corpus}, {"oracle", o.oracle}};
  if (o.oracle) {
    // scores from the generator's planted rule
    const std::string manifest_path =
        o.manifest.empty() ? (fs::path(o.corpus).parent_path() / "manifest.json").string() : o.manifest;
    const auto manifest = json::parse(read_file(manifest_path));
    const GenConfig g = gen_config_from_json(manifest.at("generator"));
    const auto corpus = load_corpus(o, g.bin_width);
    if (task.empty()) task = to_string(g.task);
    for (const auto& s : corpus.sequences) {
      scores.push_back(planted_label(g, corpus.vocab, s.events(), s.anchor_time));
      labels.push_back(s.binary_label(task));
    }
    resolved["manifest"] = manifest_path;
  } else {
    const auto ck = load_checkpoint_for(o);
    const auto corpus = load_corpus(o, ck.config.bin_width, checkpoint_vocab(ck));
    require_vocab_size(ck, corpus.vocab);
    if (task.empty() && ck.extra.contains("training")) task = ck.extra.at("training").value("task", "");
    if (task.empty()) throw ConfigError("task: --task is required (checkpoint records none)");
    for (const auto& s : corpus.sequences) {
      scores.push_back(predict(make_input(s), ck.params, ck.config, PredictTask::binary).front());
      labels.push_back(s.binary_label(task));
    }
    resolved["checkpoint"] = o.checkpoint;
  }
  const auto m = binary_metrics(scores, labels);
  prepare_out(o);
  const std::string text = to_json(m).dump(2) + "\n";
  write_file(out_path(o, "metrics.json"), text);
  resolved["task"] = task;
  write_resolved(o, "eval", resolved);
  std::cout << text;
  return 0;
}

int cmd_ablate(const Options& o) {
  const json cfg = load_config(o);
  ProtocolConfig p = protocol_from_json(cfg);
  if (!o.task.empty()) p.data.task = task_family_from_string(o.task);
  if (o.patients) p.data.patients = *o.patients;
  if (o.steps) p.finetune.steps = *o.steps;
  if (o.lr) p.finetune.adam.lr = *o.lr;
  if (!o.kernel.empty()) p.model.kernel = kernel_from_string(o.kernel);
  if (o.seeds == 0) throw ConfigError("seeds: must be at least 1");
  p.data.validate();
  const std::uint64_t base = o.seed.value_or(0);
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < o.seeds; ++i) seeds.push_back(base + i);
  const auto table = run_ablation(p, all_variants(), seeds);
  prepare_out(o);
  const std::string text = to_json(table).dump(2) + "\n";
  write_file(out_path(o, "ablation.json"), text);
  write_resolved(o, "ablate", {{"protocol", to_json(p)}, {"seeds", seeds}});
  for (const auto& r : table.rows) {
    std::cout << to_string(r.variant) << " auroc " << r.auroc.mean << " +- " << r.auroc.sd << " delta " << r.delta << "\n";
  }
  return 0;
}

int cmd_analyze(const Options& o) {
  const auto ck = load_checkpoint_for(o);
  const auto corpus = load_corpus(o, ck.config.bin_width, checkpoint_vocab(ck));
  require_vocab_size(ck, corpus.vocab);
  ModelConfig base_config = ck.config;
  ModelParams base_params = ck.params;
  std::string baseline_desc = "same weights, kernel none";
  if (!o.baseline.empty()) {
    auto b = load_checkpoint(o.baseline);
    require_vocab_size(b, corpus.vocab);
    base_config = b.config;
    base_params = std::move(b.params);
    baseline_desc = o.baseline;
  } else {
    base_config.kernel = KernelKind::none;
  }
  prepare_out(o);

  const std::size_t n = std::min(o.sample, corpus.sequences.size());
  std::vector<AttentionTrace> model_traces, base_traces;
  std::uint64_t hier_ops = 0, flat_ops = 0;
  ModelConfig flat_config = ck.config;
  flat_config.use_hierarchical = false;
  ModelConfig hier_config = ck.config;
  hier_config.use_hierarchical = true;
  for (std::size_t i = 0; i < n; ++i) {
    const auto input = make_input(corpus.sequences[i]);
    model_traces.push_back(forward(input, ck.params, ck.config, {true, true}).trace);
    base_traces.push_back(forward(input, base_params, base_config, {true, true}).trace);
    hier_ops += forward(input, ck.params, hier_config, {true, false}).trace.op_counter;
    flat_ops += forward(input, ck.params, flat_config, {true, false}).trace.op_counter;
  }
  export_attention(model_traces.front(), make_input(corpus.sequences.front()), out_path(o, "attention"), &corpus.vocab);

  const auto decay = decay_compare(model_traces, base_traces);
  json decay_json = to_json(decay);
  decay_json["model_kernel"] = to_string(ck.config.kernel);
  decay_json["baseline"] = baseline_desc;
  decay_json["baseline_kernel"] = to_string(base_config.kernel);
  decay_json["sequences"] = n;
  write_file(out_path(o, "decay_report.json"), decay_json.dump(2) + "\n");
  for (const auto& m : model_traces.front().matrices) {
    if (m.level == AttentionLevel::intra || m.rows < 2) continue;
    write_file(out_path(o, "decay_model.csv"), decay_csv(spectrum(to_square(m))));
    break;
  }
  for (const auto& m : base_traces.front().matrices) {
    if (m.level == AttentionLevel::intra || m.rows < 2) continue;
    write_file(out_path(o, "decay_baseline.csv"), decay_csv(spectrum(to_square(m))));
    break;
  }

  const double entropy = token_entropy(corpus.sequences);
  json stats{{"token_entropy_nats", entropy},
             {"uniform_reference_nats", std::log(static_cast<double>(corpus.vocab.size() - Vocabulary::kReserved))},
             {"cooccurrence_density", cooccurrence_density(corpus.sequences, corpus.vocab.size())},
             {"patients", corpus.sequences.size()}};
  write_file(out_path(o, "corpus_stats.json"), stats.dump(2) + "\n");

  // closed-form counts at the sample's average shape
  std::size_t bins = 0, events = 0;
  for (std::size_t i = 0; i < n; ++i) {
    bins += corpus.sequences[i].bins.size();
    events += corpus.sequences[i].num_events();
  }
  const auto T = static_cast<std::uint64_t>(std::llround(static_cast<double>(bins) / static_cast<double>(n)));
  const auto E = static_cast<std::uint64_t>(std::llround(static_cast<double>(events) / static_cast<double>(std::max<std::size_t>(bins, 1))));
  const auto formula = count_ops(std::max<std::uint64_t>(T, 1), std::max<std::uint64_t>(E, 1), ck.config.width);
  json ops{{"measured", {{"hierarchical", hier_ops}, {"flat", flat_ops}, {"sequences", n},
                         {"layers", ck.config.local_layers + ck.config.global_layers}}},
           {"formula", {{"T", T}, {"E", E}, {"d", ck.config.width}, {"hierarchical", formula.hierarchical},
                        {"flat", formula.flat}}},
           {"hierarchical_below_flat", hier_ops < flat_ops && formula.hierarchical < formula.flat}};
  write_file(out_path(o, "ops_report.json"), ops.dump(2) + "\n");

  write_resolved(o, "analyze", {{"checkpoint", o.checkpoint}, {"baseline", baseline_desc}, {"corpus", o.corpus},
                                {"sample", n}});
  std::cout << out_path(o, "decay_report.json") << "\n";
  return 0;
}

void add_common(CLI::App* c, Options& o) {
  c->add_option("--config", o.config, "JSON config file (flags override it)");
  c->add_option("--seed", o.seed, "Root seed");
  c->add_option("-o,--out", o.out, "Output directory");
}

void add_model_switches(CLI::App* c, Options& o) {
  c->add_option("--kernel", o.kernel, "Temporal bias kernel")->check(CLI::IsMember({"none", "gaussian", "rotary"}));
  c->add_flag("--no-hierarchical", o.no_hierarchical, "Flat attention over all events");
  c->add_flag("--no-temporal", o.no_temporal, "Drop absolute and relative time embeddings");
  c->add_flag("--no-conditional-masking", o.no_conditional_masking, "Uniform instead of salience-weighted masking");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Temporally biased hierarchical transformer for clinical event sequences"};
  app.require_subcommand(1);
  Options o;

  auto* gen = app.add_subcommand("generate", "Write a synthetic planted-task corpus");
  add_common(gen, o);
  gen->add_option("--task", o.task, "gap, recency or longrange");
  gen->add_option("--patients", o.patients, "Number of patients");
  gen->add_option("--vocab", o.vocab_size, "Number of filler codes");
  gen->add_option("--noise", o.noise, "Label flip probability");

  auto* tr = app.add_subcommand("train", "Masked event pretraining");
  add_common(tr, o);
  add_model_switches(tr, o);
  tr->add_option("--corpus", o.corpus, "Corpus (JSON Lines)")->required();
  tr->add_option("--vocab", o.vocab, "Vocabulary JSON");
  tr->add_option("--steps", o.steps, "Optimizer steps");
  tr->add_option("--lr", o.lr, "Learning rate");
  tr->add_option("--objective", o.objective, "mem or reweighted_mem")->check(CLI::IsMember({"mem", "reweighted_mem"}));
  tr->add_flag("--time-gap", o.time_gap, "Add the time-gap auxiliary loss");

  auto* ft = app.add_subcommand("finetune", "Supervised fine-tuning on a label");
  add_common(ft, o);
  add_model_switches(ft, o);
  ft->add_option("--corpus", o.corpus, "Corpus (JSON Lines)")->required();
  ft->add_option("--vocab", o.vocab, "Vocabulary JSON");
  ft->add_option("--checkpoint", o.checkpoint, "Start from this checkpoint");
  ft->add_option("--task", o.task, "Label name");
  ft->add_option("--steps", o.steps, "Optimizer steps");
  ft->add_option("--lr", o.lr, "Learning rate");

  auto* ev = app.add_subcommand("eval", "AUROC / AUPRC / F1 of a checkpoint on a corpus");
  add_common(ev, o);
  ev->add_option("--corpus", o.corpus, "Corpus (JSON Lines)")->required();
  ev->add_option("--vocab", o.vocab, "Vocabulary JSON");
  ev->add_option("--checkpoint", o.checkpoint, "Checkpoint to score with");
  ev->add_option("--task", o.task, "Label name");
  ev->add_flag("--oracle", o.oracle, "Score with the generator's planted rule instead of a model");
  ev->add_option("--manifest", o.manifest, "Generator manifest for --oracle (default: next to the corpus)");

  auto* ab = app.add_subcommand("ablate", "Four-way ablation over seeds");
  add_common(ab, o);
  ab->add_option("--task", o.task, "gap, recency or longrange");
  ab->add_option("--kernel", o.kernel, "Temporal bias kernel")->check(CLI::IsMember({"none", "gaussian", "rotary"}));
  ab->add_option("--patients", o.patients, "Training patients per replicate");
  ab->add_option("--steps", o.steps, "Fine-tuning steps");
  ab->add_option("--lr", o.lr, "Fine-tuning learning rate");
  ab->add_option("--seeds", o.seeds, "Number of replicates (seeds seed, seed+1, ...)");

  auto* an = app.add_subcommand("analyze", "Attention export, spectral decay, corpus and op-count reports");
  add_common(an, o);
  an->add_option("--corpus", o.corpus, "Corpus (JSON Lines)")->required();
  an->add_option("--vocab", o.vocab, "Vocabulary JSON");
  an->add_option("--checkpoint", o.checkpoint, "Model checkpoint")->required();
  an->add_option("--baseline", o.baseline, "Baseline checkpoint (default: same weights without temporal bias)");
  an->add_option("--sample", o.sample, "Sequences used for the spectral comparison");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*gen) return cmd_generate(o);
    if (*tr) return cmd_train(o);
    if (*ft) return cmd_finetune(o);
    if (*ev) return cmd_eval(o);
    if (*ab) return cmd_ablate(o);
    if (*an) return cmd_analyze(o);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const UndefinedMetricError& e) {
    std::cerr << "undefined metric: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
