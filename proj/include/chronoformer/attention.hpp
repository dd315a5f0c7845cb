#pragma once

// Temporally biased attention.
//
//   A = softmax((Q K^T + Phi) / sqrt(d_k)),  Phi_ij = phi(t_i, t_j)
//
// with phi one of
//   none      0
//   gaussian  -(t_i - t_j)^2 / (2 sigma^2), sigma = softplus(raw) > 0, learnable
//   rotary    <R(t_i), R(t_j)> = sum_k cos(w_k (t_i - t_j)), R the unit sin/cos
//             pairs of width d_r, w_k = 10000^(-2k/d_r)
//
// The same block serves both levels of the hierarchy: events inside one bin
// (times = event times) and bin summaries across the timeline (times = bin
// reference times).

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "chronoformer/errors.hpp"
#include "chronoformer/numeric.hpp"
#include "chronoformer/rng.hpp"

namespace chronoformer {

enum class KernelKind { none, gaussian, rotary };

inline std::string to_string(KernelKind k) {
  switch (k) {
    case KernelKind::none: return "none";
    case KernelKind::gaussian: return "gaussian";
    case KernelKind::rotary: return "rotary";
  }
  return "?";
}

inline KernelKind kernel_from_string(const std::string& s) {
  if (s == "none") return KernelKind::none;
  if (s == "gaussian") return KernelKind::gaussian;
  if (s == "rotary") return KernelKind::rotary;
  throw ConfigError("kernel: unknown kind '" + s + "' (expected none, gaussian or rotary)");
}

struct BiasKernel {
  KernelKind kind = KernelKind::none;
  double sigma = 24.0;             ///< gaussian temporal scale, hours
  std::size_t rotary_width = 8;    ///< d_r, even
};

inline double softplus_inverse(double y) {
  if (!(y > 0.0)) throw ConfigError("softplus_inverse: argument must be positive");
  return y > 30.0 ? y : std::log(std::expm1(y));
}

inline double rotary_bias(double delta, std::size_t width) {
  if (width == 0 || width % 2 != 0) throw ConfigError("rotary width must be even and positive");
  double s = 0.0;
  for (std::size_t k = 0; k < width / 2; ++k) {
    const double omega = std::pow(10000.0, -2.0 * static_cast<double>(k) / static_cast<double>(width));
    s += std::cos(omega * delta);
  }
  return s;
}

inline double temporal_bias(double ti, double tj, const BiasKernel& kernel) {
  switch (kernel.kind) {
    case KernelKind::none: return 0.0;
    case KernelKind::gaussian: {
      if (!(kernel.sigma > 0.0)) throw ConfigError("gaussian kernel needs sigma > 0");
      const double delta = ti - tj;
      return -(delta * delta) / (2.0 * kernel.sigma * kernel.sigma);
    }
    case KernelKind::rotary: return rotary_bias(ti - tj, kernel.rotary_width);
  }
  return 0.0;
}

/// Projections for one attention head. sigma_raw is the pre-softplus
/// gaussian scale (1 x 1); it is ignored by the other kernels.
struct HeadParams {
  Tensor wq;  ///< d x d_k
  Tensor wk;  ///< d x d_k
  Tensor wv;  ///< d x d_v
  Tensor sigma_raw;
};

/// Phi for a query/key time pair list; differentiable in sigma_raw for the gaussian kernel.
inline Tensor bias_matrix(std::span<const double> tq, std::span<const double> tk, KernelKind kind,
                          const Tensor& sigma_raw, std::size_t rotary_width) {
  const std::size_t m = tq.size(), n = tk.size();
  switch (kind) {
    case KernelKind::none: return Tensor::zeros(m, n);
    case KernelKind::gaussian: {
      std::vector<double> d2(m * n);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) d2[i * n + j] = (tq[i] - tk[j]) * (tq[i] - tk[j]);
      const Tensor sigma = softplus(sigma_raw);
      return scale_by(Tensor::constant(m, n, std::move(d2)), scale(reciprocal(square(sigma)), -0.5));
    }
    case KernelKind::rotary: {
      std::vector<double> b(m * n);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) b[i * n + j] = rotary_bias(tq[i] - tk[j], rotary_width);
      return Tensor::constant(m, n, std::move(b));
    }
  }
  return Tensor::zeros(m, n);
}

struct AttentionResult {
  Tensor output;   ///< n x d_v
  Tensor weights;  ///< n x n, rows sum to 1 over unmasked keys
};

/// Single-head self-attention with additive temporal bias. key_masked[j] removes
/// key j from every row. macs, when given, accumulates the n * n * d_k
/// multiply-accumulates of the score product.
inline AttentionResult biased_attention(const Tensor& x, std::span<const double> times, const HeadParams& head,
                                        KernelKind kind, std::size_t rotary_width = 8,
                                        const std::vector<bool>* key_masked = nullptr, std::uint64_t* macs = nullptr) {
  const std::size_t n = x.rows();
  if (times.size() != n) {
    throw DimensionError("biased_attention: " + std::to_string(times.size()) + " times for " + std::to_string(n) + " tokens");
  }
  if (n == 0) throw NumericError("empty attention row: no tokens");
  const Tensor q = matmul(x, head.wq);
  const Tensor k = matmul(x, head.wk);
  const Tensor v = matmul(x, head.wv);
  const std::size_t dk = q.cols();
  if (macs) *macs += static_cast<std::uint64_t>(n) * n * dk;
  Tensor scores = matmul(q, transpose(k));
  if (kind != KernelKind::none) scores = add(scores, bias_matrix(times, times, kind, head.sigma_raw, rotary_width));
  scores = scale(scores, 1.0 / std::sqrt(static_cast<double>(dk)));
  if (key_masked) {
    if (key_masked->size() != n) throw DimensionError("biased_attention: mask length differs from token count");
    std::vector<double> m(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if ((*key_masked)[j]) m[i * n + j] = kMaskScore;
    scores = add(scores, Tensor::constant(n, n, std::move(m)));
  }
  Tensor weights = softmax_rows(scores);
  return {matmul(weights, v), weights};
}

struct MultiHeadParams {
  std::vector<HeadParams> heads;
  Tensor wo;  ///< d x d
  Tensor bo;  ///< 1 x d
};

struct EncoderLayerParams {
  Tensor ln1_gamma, ln1_beta;
  MultiHeadParams attention;
  Tensor ln2_gamma, ln2_beta;
  Tensor ff_w1, ff_b1;  ///< d x 4d, 1 x 4d
  Tensor ff_w2, ff_b2;  ///< 4d x d, 1 x d
};

namespace detail {

inline Tensor uniform_param(std::size_t r, std::size_t c, double a, Rng& rng) {
  std::vector<double> v(r * c);
  for (auto& x : v) x = rng.uniform(-a, a);
  return Tensor::parameter(r, c, std::move(v));
}

inline Tensor filled_param(std::size_t r, std::size_t c, double value) {
  return Tensor::parameter(r, c, std::vector<double>(r * c, value));
}

}  // namespace detail

inline EncoderLayerParams init_encoder_layer(std::size_t d, std::size_t heads, std::size_t ffn_mult, double sigma_init,
                                             Rng& rng) {
  if (heads == 0 || d % heads != 0) throw ConfigError("width must be divisible by the head count");
  const std::size_t dh = d / heads;
  const double a = 1.0 / std::sqrt(static_cast<double>(d));
  EncoderLayerParams p;
  p.ln1_gamma = detail::filled_param(1, d, 1.0);
  p.ln1_beta = detail::filled_param(1, d, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    HeadParams hp;
    hp.wq = detail::uniform_param(d, dh, a, rng);
    hp.wk = detail::uniform_param(d, dh, a, rng);
    hp.wv = detail::uniform_param(d, dh, a, rng);
    hp.sigma_raw = detail::filled_param(1, 1, softplus_inverse(sigma_init));
    p.attention.heads.push_back(std::move(hp));
  }
  p.attention.wo = detail::uniform_param(d, d, a, rng);
  p.attention.bo = detail::filled_param(1, d, 0.0);
  p.ln2_gamma = detail::filled_param(1, d, 1.0);
  p.ln2_beta = detail::filled_param(1, d, 0.0);
  const std::size_t hidden = ffn_mult * d;
  p.ff_w1 = detail::uniform_param(d, hidden, a, rng);
  p.ff_b1 = detail::filled_param(1, hidden, 0.0);
  p.ff_w2 = detail::uniform_param(hidden, d, 1.0 / std::sqrt(static_cast<double>(hidden)), rng);
  p.ff_b2 = detail::filled_param(1, d, 0.0);
  return p;
}

enum class AttentionLevel { intra, inter, flat };

inline std::string to_string(AttentionLevel l) {
  switch (l) {
    case AttentionLevel::intra: return "intra";
    case AttentionLevel::inter: return "inter";
    case AttentionLevel::flat: return "flat";
  }
  return "?";
}

inline AttentionLevel level_from_string(const std::string& s) {
  if (s == "intra") return AttentionLevel::intra;
  if (s == "inter") return AttentionLevel::inter;
  if (s == "flat") return AttentionLevel::flat;
  throw ValidationError("unknown attention level '" + s + "'");
}

/// One recorded attention matrix (row = query, column = key).
struct AttentionMatrix {
  AttentionLevel level = AttentionLevel::intra;
  std::size_t layer = 0;
  std::size_t head = 0;
  std::optional<std::size_t> bin;  ///< position of the bin in the sequence (intra only)
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> weights;
  std::vector<double> times;  ///< query/key times (self-attention)

  [[nodiscard]] double at(std::size_t r, std::size_t c) const { return weights[r * cols + c]; }
};

struct AttentionTrace {
  std::vector<AttentionMatrix> matrices;
  std::uint64_t op_counter = 0;          ///< score multiply-accumulates over the whole forward pass
  std::vector<std::uint64_t> layer_macs;  ///< same, per layer in execution order (local stack, then global)
};

/// Where encoder_layer records its attention, if anywhere.
struct TraceContext {
  AttentionTrace* trace = nullptr;
  bool record_matrices = false;
  AttentionLevel level = AttentionLevel::intra;
  std::size_t layer = 0;  ///< index within the level
  std::size_t layer_slot = 0;  ///< index into layer_macs
  std::optional<std::size_t> bin;
};

/// Pre-norm transformer block:
///   x1 = x + MHA(LN1(x));  out = x1 + W2 gelu(W1 LN2(x1) + b1) + b2
inline Tensor encoder_layer(const Tensor& x, std::span<const double> times, const EncoderLayerParams& p, KernelKind kind,
                            std::size_t rotary_width, const TraceContext& ctx = {}) {
  const Tensor h = layer_norm_rows(x, p.ln1_gamma, p.ln1_beta);
  std::vector<Tensor> head_out;
  head_out.reserve(p.attention.heads.size());
  std::uint64_t macs = 0;
  for (std::size_t hi = 0; hi < p.attention.heads.size(); ++hi) {
    auto r = biased_attention(h, times, p.attention.heads[hi], kind, rotary_width, nullptr, &macs);
    if (ctx.trace && ctx.record_matrices) {
      AttentionMatrix m;
      m.level = ctx.level;
      m.layer = ctx.layer;
      m.head = hi;
      m.bin = ctx.bin;
      m.rows = r.weights.rows();
      m.cols = r.weights.cols();
      m.weights.assign(r.weights.values().begin(), r.weights.values().end());
      m.times.assign(times.begin(), times.end());
      ctx.trace->matrices.push_back(std::move(m));
    }
    head_out.push_back(std::move(r.output));
  }
  if (ctx.trace) {
    ctx.trace->op_counter += macs;
    if (ctx.trace->layer_macs.size() <= ctx.layer_slot) ctx.trace->layer_macs.resize(ctx.layer_slot + 1, 0);
    ctx.trace->layer_macs[ctx.layer_slot] += macs;
  }
  const Tensor attn = head_out.size() == 1 ? head_out.front() : concat_cols(head_out);
  const Tensor x1 = add(x, add_row(matmul(attn, p.attention.wo), p.attention.bo));
  const Tensor h2 = layer_norm_rows(x1, p.ln2_gamma, p.ln2_beta);
  const Tensor ff = add_row(matmul(gelu(add_row(matmul(h2, p.ff_w1), p.ff_b1)), p.ff_w2), p.ff_b2);
  return add(x1, ff);
}

struct OpCounts {
  std::uint64_t hierarchical = 0;
  std::uint64_t flat = 0;
};

/// Score-space multiply-accumulates for one local + one global layer versus
/// one flat layer over all T*E tokens.
inline OpCounts count_ops(std::uint64_t bins, std::uint64_t events_per_bin, std::uint64_t width) {
  if (bins == 0 || events_per_bin == 0 || width == 0) throw ConfigError("count_ops: arguments must be positive");
  const std::uint64_t T = bins, E = events_per_bin, d = width;
  return {T * E * E * d + T * T * d, (T * E) * (T * E) * d};
}

// ----------------------------------------------------------------------------
// Export: one CSV per matrix ("query,key,weight") plus a JSON sidecar.

inline std::string attention_csv(const AttentionMatrix& m) {
  std::ostringstream os;
  os.precision(17);
  os << "query,key,weight\n";
  for (std::size_t r = 0; r < m.rows; ++r)
    for (std::size_t c = 0; c < m.cols; ++c) os << r << ',' << c << ',' << m.at(r, c) << '\n';
  return os.str();
}

inline nlohmann::json attention_sidecar(const AttentionMatrix& m) {
  nlohmann::json j{{"layer", m.layer}, {"head", m.head}, {"level", to_string(m.level)}};
  if (m.bin) j["bin"] = *m.bin;
  return j;
}

/// Reads a "query,key,weight" CSV back into a dense rows x cols matrix.
inline AttentionMatrix parse_attention_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != "query,key,weight") throw ValidationError("attention CSV: missing header");
  std::vector<std::tuple<std::size_t, std::size_t, double>> entries;
  std::size_t rows = 0, cols = 0;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string a, b, c;
    if (!std::getline(ls, a, ',') || !std::getline(ls, b, ',') || !std::getline(ls, c)) {
      throw ValidationError("attention CSV: malformed line '" + line + "'");
    }
    const auto r = static_cast<std::size_t>(std::stoull(a));
    const auto k = static_cast<std::size_t>(std::stoull(b));
    entries.emplace_back(r, k, std::stod(c));
    rows = std::max(rows, r + 1);
    cols = std::max(cols, k + 1);
  }
  AttentionMatrix m;
  m.rows = rows;
  m.cols = cols;
  m.weights.assign(rows * cols, 0.0);
  for (auto [r, k, w] : entries) m.weights[r * cols + k] = w;
  return m;
}

}  // namespace chronoformer
