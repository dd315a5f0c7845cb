#pragma once

// Hybrid event embedding:
//   embed(c, t, dt, m) = E_c[c] + PE(t) + E_delta[bucket(dt)] + (m ? m * w_m + b_m : 0)
// PE is the parameter-free sinusoid over hours; the relative delta uses a
// learnable table over log2-spaced buckets.

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "chronoformer/errors.hpp"
#include "chronoformer/events.hpp"
#include "chronoformer/numeric.hpp"
#include "chronoformer/rng.hpp"

namespace chronoformer {

/// Interleaved [sin(w_0 t), cos(w_0 t), sin(w_1 t), ...] with w_k = 10000^(-2k/d).
inline std::vector<double> sinusoidal_time(double t, std::size_t d) {
  if (d == 0 || d % 2 != 0) throw ConfigError("sinusoidal_time: width d must be even and positive, got " + std::to_string(d));
  if (!std::isfinite(t)) throw ValidationError("sinusoidal_time: time is not finite");
  std::vector<double> out(d);
  for (std::size_t k = 0; k < d / 2; ++k) {
    const double omega = std::pow(10000.0, -2.0 * static_cast<double>(k) / static_cast<double>(d));
    out[2 * k] = std::sin(omega * t);
    out[2 * k + 1] = std::cos(omega * t);
  }
  return out;
}

/// min(B - 1, floor(log2(1 + dt))).
inline std::size_t delta_bucket(double dt, std::size_t buckets) {
  if (buckets < 2) throw ConfigError("delta_bucket: need at least 2 buckets");
  if (!(dt >= 0.0)) throw ValidationError("delta_bucket: relative time must be non-negative, got " + std::to_string(dt));
  const double b = std::floor(std::log2(1.0 + dt));
  if (b >= static_cast<double>(buckets - 1)) return buckets - 1;
  return static_cast<std::size_t>(b);
}

struct EmbeddingParams {
  std::size_t width = 0;
  Tensor concept_table;  ///< V x d
  Tensor delta_table;    ///< B x d, zero-initialized
  Tensor meta_weight;    ///< 1 x d
  Tensor meta_bias;      ///< 1 x d

  [[nodiscard]] std::size_t vocab_size() const { return concept_table.rows(); }
  [[nodiscard]] std::size_t buckets() const { return delta_table.rows(); }

  static EmbeddingParams init(std::size_t vocab_size, std::size_t width, std::size_t buckets, Rng& rng) {
    if (width == 0 || width % 2 != 0) throw ConfigError("embedding width must be even, got " + std::to_string(width));
    if (buckets < 2) throw ConfigError("delta buckets must be >= 2");
    EmbeddingParams p;
    p.width = width;
    const double a = 1.0 / std::sqrt(static_cast<double>(width));
    std::vector<double> c(vocab_size * width);
    for (auto& x : c) x = rng.uniform(-a, a);
    p.concept_table = Tensor::parameter(vocab_size, width, std::move(c));
    p.delta_table = Tensor::parameter(buckets, width, std::vector<double>(buckets * width, 0.0));
    std::vector<double> mw(width);
    for (auto& x : mw) x = rng.uniform(-a, a);
    p.meta_weight = Tensor::parameter(1, width, std::move(mw));
    p.meta_bias = Tensor::parameter(1, width, std::vector<double>(width, 0.0));
    return p;
  }
};

/// One event as seen by the encoder.
struct TokenInput {
  std::size_t code = 0;
  double time = 0.0;
  double delta = 0.0;
  std::optional<double> value;
  bool hide_delta = false;  ///< masked-out events contribute no relative-delta term

  friend bool operator==(const TokenInput&, const TokenInput&) = default;
};

/// Embeds a block of tokens (n x d). With use_temporal = false the absolute
/// sinusoid and the relative-delta table are both left out.
inline Tensor embed_tokens(std::span<const TokenInput> tokens, const EmbeddingParams& params, bool use_temporal = true) {
  const std::size_t n = tokens.size();
  const std::size_t d = params.width;
  std::vector<std::size_t> codes(n);
  std::vector<double> values(n, 0.0), present(n, 0.0);
  bool any_value = false;
  for (std::size_t i = 0; i < n; ++i) {
    if (tokens[i].code >= params.vocab_size()) {
      throw ValidationError("embed: code id " + std::to_string(tokens[i].code) + " outside vocabulary of size " +
                            std::to_string(params.vocab_size()));
    }
    codes[i] = tokens[i].code;
    if (tokens[i].value) {
      values[i] = *tokens[i].value;
      present[i] = 1.0;
      any_value = true;
    }
  }
  Tensor x = select_rows(params.concept_table, codes);
  if (use_temporal) {
    std::vector<double> pe(n * d);
    for (std::size_t i = 0; i < n; ++i) {
      const auto s = sinusoidal_time(tokens[i].time, d);
      std::copy(s.begin(), s.end(), pe.begin() + static_cast<std::ptrdiff_t>(i * d));
    }
    x = add(x, Tensor::constant(n, d, std::move(pe)));
    std::vector<double> keep(n * d, 0.0);
    std::vector<std::size_t> bucket(n);
    bool any_hidden = false;
    for (std::size_t i = 0; i < n; ++i) {
      bucket[i] = delta_bucket(tokens[i].delta, params.buckets());
      if (tokens[i].hide_delta) {
        any_hidden = true;
      } else {
        std::fill_n(keep.begin() + static_cast<std::ptrdiff_t>(i * d), d, 1.0);
      }
    }
    Tensor delta = select_rows(params.delta_table, bucket);
    if (any_hidden) delta = mul(delta, Tensor::constant(n, d, std::move(keep)));
    x = add(x, delta);
  }
  if (any_value) {
    x = add(x, matmul(Tensor::constant(n, 1, std::move(values)), params.meta_weight));
    x = add(x, matmul(Tensor::constant(n, 1, std::move(present)), params.meta_bias));
  }
  return x;
}

/// Single-event embedding (1 x d).
inline Tensor embed_event(const EventRecord& e, double delta, const EmbeddingParams& params, bool use_temporal = true) {
  const TokenInput tok{e.code, e.time, delta, e.value, false};
  return embed_tokens(std::span<const TokenInput>(&tok, 1), params, use_temporal);
}

}  // namespace chronoformer
