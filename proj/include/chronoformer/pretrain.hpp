#pragma once

// Masked event modeling, the importance-reweighted estimator
//   L~ = (1/n) sum_j (1/q_j) I[j in M] l_j
// the log(1 + dt) time-gap auxiliary, Adam and the train / fine-tune loop.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "chronoformer/errors.hpp"
#include "chronoformer/events.hpp"
#include "chronoformer/model.hpp"
#include "chronoformer/numeric.hpp"
#include "chronoformer/rng.hpp"

namespace chronoformer {

inline constexpr double kMinMaskProbability = 0.01;
inline constexpr double kMaxMaskProbability = 0.9;

enum class Replacement : std::uint8_t { none, mask, random, keep };

struct MaskPlan {
  std::vector<double> q;                 ///< Pr[j in M]
  std::vector<Replacement> outcome;      ///< none for unmasked positions
  std::vector<std::size_t> replacement;  ///< token fed to the encoder (original code unless replaced)

  [[nodiscard]] std::size_t size() const { return q.size(); }
  [[nodiscard]] bool masked(std::size_t j) const { return outcome[j] != Replacement::none; }
  [[nodiscard]] std::vector<std::size_t> positions() const {
    std::vector<std::size_t> out;
    for (std::size_t j = 0; j < outcome.size(); ++j)
      if (masked(j)) out.push_back(j);
    return out;
  }
  [[nodiscard]] std::size_t num_masked() const { return positions().size(); }
};

/// q_j = clip(rho * u_j / mean(u), 0.01, 0.9); exactly rho when salience is off.
/// All-zero utilities carry no preference and fall back to rho.
inline std::vector<double> mask_probabilities(std::span<const TokenInput> tokens, std::span<const double> utilities,
                                              double rho, bool conditional = true) {
  if (tokens.empty()) throw ValidationError("salience_mask: sequence has no events");
  if (!(rho > 0.0 && rho <= 0.5)) throw ConfigError("mask_rate: must lie in (0, 0.5], got " + std::to_string(rho));
  std::vector<double> q(tokens.size(), rho);
  if (!conditional) return q;
  std::vector<double> u(tokens.size());
  for (std::size_t j = 0; j < tokens.size(); ++j) {
    if (tokens[j].code >= utilities.size()) throw ValidationError("salience_mask: code outside the utility table");
    u[j] = utilities[tokens[j].code];
    if (!(u[j] >= 0.0 && u[j] <= 1.0)) throw ValidationError("salience_mask: utility outside [0, 1]");
  }
  const double mean_u = std::accumulate(u.begin(), u.end(), 0.0) / static_cast<double>(u.size());
  if (mean_u <= 0.0) return q;
  for (std::size_t j = 0; j < q.size(); ++j)
    q[j] = std::clamp(rho * u[j] / mean_u, kMinMaskProbability, kMaxMaskProbability);
  return q;
}

/// Independent Bernoulli(q_j) draws, then 80% MASK / 10% random code / 10% keep.
inline MaskPlan sample_mask(std::span<const TokenInput> tokens, std::vector<double> q, std::size_t vocab_size, Rng& rng) {
  if (q.size() != tokens.size()) throw DimensionError("sample_mask: probability count differs from sequence length");
  if (vocab_size <= Vocabulary::kReserved) throw ConfigError("sample_mask: vocabulary has no codes");
  MaskPlan plan;
  plan.q = std::move(q);
  plan.outcome.assign(tokens.size(), Replacement::none);
  plan.replacement.resize(tokens.size());
  for (std::size_t j = 0; j < tokens.size(); ++j) {
    plan.replacement[j] = tokens[j].code;
    if (!(plan.q[j] > 0.0)) throw NumericError("sample_mask: q_j = 0 makes the reweighted estimator undefined");
    if (!rng.bernoulli(plan.q[j])) continue;
    const double r = rng.uniform();
    if (r < 0.8) {
      plan.outcome[j] = Replacement::mask;
      plan.replacement[j] = Vocabulary::kMask;
    } else if (r < 0.9) {
      plan.outcome[j] = Replacement::random;
      plan.replacement[j] = Vocabulary::kReserved + rng.below(vocab_size - Vocabulary::kReserved);
    } else {
      plan.outcome[j] = Replacement::keep;
    }
  }
  return plan;
}

inline MaskPlan salience_mask(std::span<const TokenInput> tokens, std::span<const double> utilities, double rho,
                              std::uint64_t seed, bool conditional = true) {
  Rng rng(seed);
  return sample_mask(tokens, mask_probabilities(tokens, utilities, rho, conditional), utilities.size(), rng);
}

/// Encoder input with the plan's corruption applied. Replaced positions lose
/// their value and their relative-delta term; kept and unmasked positions are untouched.
inline ModelInput apply_mask(const ModelInput& input, const MaskPlan& plan) {
  if (plan.size() != input.num_tokens()) throw DimensionError("apply_mask: plan does not match the sequence");
  ModelInput out = input;
  std::size_t j = 0;
  for (auto& bin : out.bins) {
    for (auto& tok : bin) {
      const auto o = plan.outcome[j];
      if (o == Replacement::mask || o == Replacement::random) {
        tok.code = plan.replacement[j];
        tok.value.reset();
        tok.hide_delta = true;
      }
      ++j;
    }
  }
  return out;
}

// ----------------------------------------------------------------------------
// Losses

/// Per-sequence pieces shared by every masked objective.
struct MaskedTerms {
  Tensor ce_sum;        ///< sum over masked positions of l_j
  Tensor weighted_sum;  ///< sum over masked positions of l_j / q_j
  Tensor gap_sq_sum;    ///< sum over masked positions of (head_j - log(1 + dt_j))^2
  std::size_t masked = 0;
  std::size_t positions = 0;
};

inline MaskedTerms masked_terms(const ModelInput& input, const MaskPlan& plan, const ModelParams& params,
                                const ModelConfig& config, bool with_gap = true) {
  MaskedTerms t;
  t.positions = input.num_tokens();
  const auto idx = plan.positions();
  t.masked = idx.size();
  if (idx.empty()) {
    t.ce_sum = t.weighted_sum = t.gap_sq_sum = Tensor::scalar(0.0);
    return t;
  }
  const auto flat = input.flat_tokens();
  const auto f = forward(apply_mask(input, plan), params, config);
  const Tensor h = select_rows(f.token_states, idx);
  const Tensor logits = add_row(matmul(h, params.mem_w), params.mem_b);
  std::vector<std::size_t> target(idx.size());
  std::vector<double> ones(idx.size(), 1.0), inv_q(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    target[i] = flat[idx[i]].code;
    inv_q[i] = 1.0 / plan.q[idx[i]];
  }
  t.ce_sum = cross_entropy_rows(logits, target, ones);
  t.weighted_sum = cross_entropy_rows(logits, target, inv_q);
  if (with_gap) {
    std::vector<double> y(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) y[i] = std::log1p(flat[idx[i]].delta);
    const Tensor pred = add_row(matmul(h, params.gap_w), params.gap_b);
    t.gap_sq_sum = sum(square(sub(pred, Tensor::constant(idx.size(), 1, std::move(y)))));
  } else {
    t.gap_sq_sum = Tensor::scalar(0.0);
  }
  return t;
}

namespace detail {

inline void check_batch(std::span<const ModelInput> inputs, std::span<const MaskPlan> plans) {
  if (inputs.size() != plans.size()) throw DimensionError("batch holds " + std::to_string(inputs.size()) +
                                                          " sequences but " + std::to_string(plans.size()) + " plans");
  if (inputs.empty()) throw ValidationError("empty batch");
}

inline Tensor sum_all(const std::vector<Tensor>& parts) {
  Tensor acc = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) acc = add(acc, parts[i]);
  return acc;
}

}  // namespace detail

/// Cross-entropy averaged over every masked position in the batch.
inline Tensor mem_loss(std::span<const ModelInput> inputs, std::span<const MaskPlan> plans, const ModelParams& params,
                       const ModelConfig& config) {
  detail::check_batch(inputs, plans);
  std::vector<Tensor> parts;
  std::size_t masked = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto t = masked_terms(inputs[i], plans[i], params, config, false);
    masked += t.masked;
    parts.push_back(t.ce_sum);
  }
  if (masked == 0) throw ValidationError("mem_loss: no masked positions in batch");
  return scale(detail::sum_all(parts), 1.0 / static_cast<double>(masked));
}

/// (1/n) sum_j I[j in M] l_j / q_j with n the total position count. An empty
/// mask is a legitimate draw of the estimator and yields 0.
inline Tensor reweighted_mem_loss(std::span<const ModelInput> inputs, std::span<const MaskPlan> plans,
                                  const ModelParams& params, const ModelConfig& config) {
  detail::check_batch(inputs, plans);
  std::vector<Tensor> parts;
  std::size_t n = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (double q : plans[i].q)
      if (!(q > 0.0)) throw NumericError("reweighted_mem_loss: q_j = 0, estimator undefined");
    auto t = masked_terms(inputs[i], plans[i], params, config, false);
    n += t.positions;
    parts.push_back(t.weighted_sum);
  }
  return scale(detail::sum_all(parts), 1.0 / static_cast<double>(n));
}

/// Mean squared error of the time-gap head against log(1 + dt) at masked positions.
inline Tensor time_gap_loss(std::span<const ModelInput> inputs, std::span<const MaskPlan> plans,
                            const ModelParams& params, const ModelConfig& config) {
  detail::check_batch(inputs, plans);
  std::vector<Tensor> parts;
  std::size_t masked = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto t = masked_terms(inputs[i], plans[i], params, config, true);
    masked += t.masked;
    parts.push_back(t.gap_sq_sum);
  }
  if (masked == 0) throw ValidationError("time_gap_loss: no masked positions in batch");
  return scale(detail::sum_all(parts), 1.0 / static_cast<double>(masked));
}

/// Per-position l_j on the uncorrupted input.
inline std::vector<double> position_losses(const ModelInput& input, const ModelParams& params, const ModelConfig& config) {
  const auto f = forward(input, params, config);
  const Tensor logits = add_row(matmul(f.token_states, params.mem_w), params.mem_b);
  const auto flat = input.flat_tokens();
  std::vector<double> out(flat.size());
  for (std::size_t j = 0; j < flat.size(); ++j) {
    const auto row = logits.row(j);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double x : row) z += std::exp(x - mx);
    out[j] = std::log(z) + mx - row[flat[j].code];
  }
  return out;
}

/// Mean of l_j over every position of every sequence (the full-supervision loss).
inline double full_position_loss(std::span<const ModelInput> inputs, const ModelParams& params,
                                 const ModelConfig& config) {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& in : inputs) {
    for (double l : position_losses(in, params, config)) total += l;
    n += in.num_tokens();
  }
  if (n == 0) throw ValidationError("full_position_loss: no positions");
  return total / static_cast<double>(n);
}

// ----------------------------------------------------------------------------
// Optimizer

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamConfig config) : params_(std::move(params)), config_(config) {
    for (const auto& p : params_) {
      m_.emplace_back(p.size(), 0.0);
      v_.emplace_back(p.size(), 0.0);
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& w = params_[k].mutable_values();
      const auto g = params_[k].grad();
      if (g.empty()) continue;  // never reached by a backward pass
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g[i];
        v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g[i] * g[i];
        w[i] -= config_.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + config_.eps);
      }
    }
  }

  [[nodiscard]] std::uint64_t steps() const { return t_; }

 private:
  std::vector<Tensor> params_;
  AdamConfig config_;
  std::vector<std::vector<double>> m_, v_;
  std::uint64_t t_ = 0;
};

// ----------------------------------------------------------------------------
// Training

enum class Objective { mem, reweighted_mem, classification };

inline std::string to_string(Objective o) {
  switch (o) {
    case Objective::mem: return "mem";
    case Objective::reweighted_mem: return "reweighted_mem";
    case Objective::classification: return "classification";
  }
  return "?";
}

inline Objective objective_from_string(const std::string& s) {
  if (s == "mem") return Objective::mem;
  if (s == "reweighted_mem") return Objective::reweighted_mem;
  if (s == "classification") return Objective::classification;
  throw ConfigError("objective: expected mem, reweighted_mem or classification, got '" + s + "'");
}

struct TrainConfig {
  Objective objective = Objective::mem;
  bool time_gap = false;
  double time_gap_weight = 0.1;  ///< lambda
  AdamConfig adam;
  std::size_t batch = 8;
  std::size_t steps = 1000;
  double mask_rate = 0.15;
  std::uint64_t seed = 0;
  std::size_t patience = 0;  ///< stop after this many steps without a new best smoothed loss; 0 = never
  std::string task;          ///< label name for classification
  bool wall_clock = false;   ///< fill the seconds column (makes logs run-dependent)

  void validate() const {
    if (batch == 0) throw ConfigError("batch: must be >= 1");
    if (!(adam.lr >= 0.0)) throw ConfigError("lr: must be >= 0");
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0)) throw ConfigError("beta1: must lie in [0, 1)");
    if (!(adam.beta2 >= 0.0 && adam.beta2 < 1.0)) throw ConfigError("beta2: must lie in [0, 1)");
    if (!(adam.eps > 0.0)) throw ConfigError("eps: must be positive");
    if (!(time_gap_weight >= 0.0)) throw ConfigError("time_gap_weight: must be >= 0");
    if (objective != Objective::classification && !(mask_rate > 0.0 && mask_rate <= 0.5))
      throw ConfigError("mask_rate: must lie in (0, 0.5]");
    if (objective == Objective::classification && task.empty()) throw ConfigError("task: classification needs a label name");
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"objective", to_string(c.objective)},
          {"time_gap", c.time_gap},
          {"time_gap_weight", c.time_gap_weight},
          {"lr", c.adam.lr},
          {"beta1", c.adam.beta1},
          {"beta2", c.adam.beta2},
          {"eps", c.adam.eps},
          {"batch", c.batch},
          {"steps", c.steps},
          {"mask_rate", c.mask_rate},
          {"seed", c.seed},
          {"patience", c.patience},
          {"task", c.task}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c = {}) {
  if (j.contains("objective")) c.objective = objective_from_string(j.at("objective").get<std::string>());
  auto get = [&j](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  get("time_gap", c.time_gap);
  get("time_gap_weight", c.time_gap_weight);
  get("lr", c.adam.lr);
  get("beta1", c.adam.beta1);
  get("beta2", c.adam.beta2);
  get("eps", c.adam.eps);
  get("batch", c.batch);
  get("steps", c.steps);
  get("mask_rate", c.mask_rate);
  get("seed", c.seed);
  get("patience", c.patience);
  get("task", c.task);
  return c;
}

/// Encoder inputs plus, for fine-tuning, one target vector per sequence.
struct TrainData {
  std::vector<ModelInput> inputs;
  std::vector<std::vector<double>> targets;  ///< size 1 (binary) or C (multi-label)
  std::vector<double> utilities;             ///< per vocabulary id
};

inline TrainData make_train_data(const std::vector<PatientSequence>& sequences, const Vocabulary& vocab,
                                 const std::string& task = {}) {
  TrainData d;
  d.utilities = vocab.utilities();
  for (const auto& s : sequences) {
    d.inputs.push_back(make_input(s));
    if (task.empty()) continue;
    auto it = s.labels.find(task);
    if (it == s.labels.end()) throw ValidationError("patient '" + s.id + "' has no label '" + task + "'");
    if (const double* b = std::get_if<double>(&it->second)) {
      d.targets.push_back({*b});
    } else {
      d.targets.push_back(std::get<std::vector<double>>(it->second));
    }
  }
  return d;
}

struct LogRow {
  std::size_t step = 0;
  double loss = 0.0;
  std::optional<double> seconds;
};

struct TrainResult {
  std::vector<LogRow> log;
  std::size_t steps_run = 0;
  bool early_stopped = false;
};

inline std::string metrics_csv(const TrainResult& r, const TrainConfig& c) {
  std::ostringstream os;
  os.precision(17);
  os << "step,loss,objective,lr,seconds\n";
  for (const auto& row : r.log) {
    os << row.step << ',' << row.loss << ',' << to_string(c.objective) << ',' << c.adam.lr << ',';
    if (row.seconds) os << *row.seconds;
    os << '\n';
  }
  return os.str();
}

/// Mask plan with at least one masked position, redrawing from the same stream as needed.
inline MaskPlan nonempty_mask(const ModelInput& input, std::span<const double> utilities, double rho, bool conditional,
                              Rng& rng) {
  const auto flat = input.flat_tokens();
  const auto q = mask_probabilities(flat, utilities, rho, conditional);
  for (;;) {
    auto plan = sample_mask(flat, q, utilities.size(), rng);
    if (plan.num_masked() > 0) return plan;
  }
}

/// Loss of one batch under the configured objective.
inline Tensor batch_objective(const TrainData& data, std::span<const std::size_t> batch, const ModelParams& params,
                              const ModelConfig& model, const TrainConfig& train, Rng& mask_rng) {
  if (train.objective == Objective::classification) {
    const bool multi = data.targets.at(batch.front()).size() > 1;
    std::vector<Tensor> logits;
    std::vector<double> y;
    for (std::size_t i : batch) {
      const auto f = forward(data.inputs[i], params, model);
      logits.push_back(task_logits(f, params, multi ? PredictTask::multilabel : PredictTask::binary));
      const auto& t = data.targets.at(i);
      y.insert(y.end(), t.begin(), t.end());
    }
    return bce_with_logits(concat_rows(logits), y);
  }
  std::vector<Tensor> main_parts, gap_parts;
  std::size_t masked = 0, positions = 0;
  for (std::size_t i : batch) {
    const auto plan = nonempty_mask(data.inputs[i], data.utilities, train.mask_rate, model.use_conditional_masking, mask_rng);
    auto t = masked_terms(data.inputs[i], plan, params, model, train.time_gap);
    masked += t.masked;
    positions += t.positions;
    main_parts.push_back(train.objective == Objective::mem ? t.ce_sum : t.weighted_sum);
    gap_parts.push_back(t.gap_sq_sum);
  }
  const double denom = train.objective == Objective::mem ? static_cast<double>(masked) : static_cast<double>(positions);
  Tensor loss = scale(detail::sum_all(main_parts), 1.0 / denom);
  if (train.time_gap && train.time_gap_weight > 0.0) {
    loss = add(loss, scale(detail::sum_all(gap_parts), train.time_gap_weight / static_cast<double>(masked)));
  }
  return loss;
}

/// Optimizes params in place. Batches are drawn uniformly with replacement;
/// every random choice comes from streams derived from train.seed.
inline TrainResult train(const TrainData& data, ModelParams& params, const ModelConfig& model, const TrainConfig& train) {
  train.validate();
  model.validate();
  if (data.inputs.empty()) throw ValidationError("train: corpus is empty");
  if (train.objective == Objective::classification && data.targets.size() != data.inputs.size())
    throw ValidationError("train: classification needs one target per sequence");
  if (train.objective != Objective::classification && data.utilities.size() != model.vocab_size)
    throw IncompatibleError("train: utility table covers " + std::to_string(data.utilities.size()) +
                            " tokens, model vocabulary is " + std::to_string(model.vocab_size));

  const Rng root(train.seed);
  const Rng batch_root = root.derive("batch");
  const Rng mask_root = root.derive("mask");
  Adam opt(params.tensors(), train.adam);
  TrainResult result;
  std::optional<double> last_finite;
  double smoothed = 0.0, best = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<std::size_t> batch(train.batch);

  for (std::size_t step = 0; step < train.steps; ++step) {
    Rng brng = batch_root.derive(step);
    for (auto& b : batch) b = brng.below(data.inputs.size());
    Rng mrng = mask_root.derive(step);
    opt.zero_grad();
    auto diverged = [&](const std::string& detail) {
      std::string msg = "training diverged at step " + std::to_string(step) + " (" + detail + ")";
      msg += last_finite ? "; last finite loss " + std::to_string(*last_finite) : "; no finite loss was recorded";
      return NumericError(msg);
    };
    Tensor loss;
    try {
      loss = batch_objective(data, batch, params, model, train, mrng);
    } catch (const NumericError& e) {
      throw diverged(e.what());
    }
    const double value = loss.item();
    if (!std::isfinite(value)) {
      const auto op = first_nonfinite_op(loss);
      throw diverged(op.empty() ? "non-finite loss" : "first non-finite op: " + op);
    }
    last_finite = value;
    loss.backward();
    opt.step();

    LogRow row{step, value, std::nullopt};
    if (train.wall_clock) row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.log.push_back(row);
    result.steps_run = step + 1;

    if (train.patience > 0) {
      smoothed = step == 0 ? value : 0.95 * smoothed + 0.05 * value;
      if (smoothed < best - 1e-6) {
        best = smoothed;
        since_best = 0;
      } else if (++since_best >= train.patience) {
        result.early_stopped = true;
        break;
      }
    }
  }
  return result;
}

/// Classification fine-tuning on labelled sequences (objective forced to classification).
inline TrainResult finetune(const TrainData& data, ModelParams& params, const ModelConfig& model, TrainConfig config) {
  config.objective = Objective::classification;
  return train(data, params, model, config);
}

/// Moving average over a window (shorter at the start).
inline std::vector<double> smooth(std::span<const double> xs, std::size_t window) {
  std::vector<double> out(xs.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    acc += xs[i];
    if (i >= window) acc -= xs[i - window];
    out[i] = acc / static_cast<double>(std::min(i + 1, window));
  }
  return out;
}

}  // namespace chronoformer
