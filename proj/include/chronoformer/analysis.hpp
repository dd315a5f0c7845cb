#pragma once

// Evaluation metrics, spectral analysis of attention / kernel matrices,
// corpus statistics and attention-map export.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "chronoformer/attention.hpp"
#include "chronoformer/errors.hpp"
#include "chronoformer/events.hpp"
#include "chronoformer/model.hpp"

namespace chronoformer {

// ----------------------------------------------------------------------------
// Classification metrics

namespace detail {

inline void check_binary(std::span<const double> scores, std::span<const double> labels, const char* metric) {
  if (scores.size() != labels.size()) {
    throw DimensionError(std::string(metric) + ": " + std::to_string(scores.size()) + " scores for " +
                         std::to_string(labels.size()) + " labels");
  }
  for (double s : scores)
    if (!std::isfinite(s)) throw NumericError(std::string(metric) + ": non-finite score");
  for (double y : labels)
    if (y != 0.0 && y != 1.0) throw ValidationError(std::string(metric) + ": labels must be 0 or 1");
}

/// Indices sorted by descending score.
inline std::vector<std::size_t> rank_desc(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

}  // namespace detail

/// Pr[score(pos) > score(neg)] with ties counted as one half.
inline double auroc(std::span<const double> scores, std::span<const double> labels) {
  detail::check_binary(scores, labels, "auroc");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::uint64_t pos = 0, neg = 0, twice = 0, neg_below = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    std::uint64_t gp = 0, gn = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] == 1.0 ? gp : gn) += 1;
      ++j;
    }
    twice += 2 * gp * neg_below + gp * gn;
    neg_below += gn;
    pos += gp;
    neg += gn;
    i = j;
  }
  if (pos == 0 || neg == 0) throw UndefinedMetricError("auroc: undefined with a single class present");
  return static_cast<double>(twice) / (2.0 * static_cast<double>(pos) * static_cast<double>(neg));
}

/// Average precision: sum over distinct thresholds of (R_k - R_{k-1}) * P_k.
inline double auprc(std::span<const double> scores, std::span<const double> labels) {
  detail::check_binary(scores, labels, "auprc");
  const auto total_pos = static_cast<std::uint64_t>(std::count(labels.begin(), labels.end(), 1.0));
  if (total_pos == 0) throw UndefinedMetricError("auprc: undefined without positive labels");
  const auto order = detail::rank_desc(scores);
  std::uint64_t tp = 0, fp = 0;
  double ap = 0.0, prev_recall = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] == 1.0 ? tp : fp) += 1;
      ++j;
    }
    const double recall = static_cast<double>(tp) / static_cast<double>(total_pos);
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
    i = j;
  }
  return ap;
}

/// 2TP / (2TP + FP + FN) with prediction score >= threshold.
inline double f1_at_threshold(std::span<const double> scores, std::span<const double> labels, double threshold = 0.5) {
  detail::check_binary(scores, labels, "f1");
  std::uint64_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool pred = scores[i] >= threshold;
    const bool pos = labels[i] == 1.0;
    if (pred && pos) ++tp;
    if (pred && !pos) ++fp;
    if (!pred && pos) ++fn;
  }
  if (tp + fn == 0) throw UndefinedMetricError("f1: undefined without positive labels");
  return 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
}

namespace detail {

template <class Metric>
double macro(const std::vector<std::vector<double>>& scores, const std::vector<std::vector<double>>& labels,
             Metric metric) {
  if (scores.size() != labels.size() || scores.empty()) throw DimensionError("macro metric: row count mismatch");
  const std::size_t c = scores.front().size();
  if (c == 0) throw DimensionError("macro metric: no classes");
  double total = 0.0;
  for (std::size_t k = 0; k < c; ++k) {
    std::vector<double> s, y;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (scores[i].size() != c || labels[i].size() != c) throw DimensionError("macro metric: ragged class count");
      s.push_back(scores[i][k]);
      y.push_back(labels[i][k]);
    }
    total += metric(s, y);
  }
  return total / static_cast<double>(c);
}

}  // namespace detail

inline double macro_auroc(const std::vector<std::vector<double>>& scores, const std::vector<std::vector<double>>& labels) {
  return detail::macro(scores, labels, [](const auto& s, const auto& y) { return auroc(s, y); });
}
inline double macro_auprc(const std::vector<std::vector<double>>& scores, const std::vector<std::vector<double>>& labels) {
  return detail::macro(scores, labels, [](const auto& s, const auto& y) { return auprc(s, y); });
}
inline double macro_f1(const std::vector<std::vector<double>>& scores, const std::vector<std::vector<double>>& labels,
                       double threshold = 0.5) {
  return detail::macro(scores, labels, [threshold](const auto& s, const auto& y) { return f1_at_threshold(s, y, threshold); });
}

// ----------------------------------------------------------------------------
// Spectra

struct SquareMatrix {
  std::size_t n = 0;
  std::vector<double> data;  ///< row-major

  SquareMatrix() = default;
  explicit SquareMatrix(std::size_t size, double fill = 0.0) : n(size), data(size * size, fill) {}
  SquareMatrix(std::size_t size, std::vector<double> values) : n(size), data(std::move(values)) {
    if (data.size() != n * n) throw DimensionError("matrix is not square: " + std::to_string(data.size()) + " entries for n = " + std::to_string(n));
  }
  double& operator()(std::size_t i, std::size_t j) { return data[i * n + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * n + j]; }
};

/// K_ij = exp(-gamma (t_i - t_j)^2).
inline SquareMatrix rbf_kernel(std::span<const double> times, double gamma) {
  if (!(gamma >= 0.0) || !std::isfinite(gamma)) throw ConfigError("rbf_kernel: gamma must be finite and >= 0");
  SquareMatrix k(times.size());
  for (std::size_t i = 0; i < times.size(); ++i)
    for (std::size_t j = 0; j < times.size(); ++j) k(i, j) = std::exp(-gamma * (times[i] - times[j]) * (times[i] - times[j]));
  return k;
}

inline SquareMatrix symmetrize(const SquareMatrix& a) {
  SquareMatrix s(a.n);
  for (std::size_t i = 0; i < a.n; ++i)
    for (std::size_t j = 0; j < a.n; ++j) s(i, j) = 0.5 * (a(i, j) + a(j, i));
  return s;
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, sorted descending.
inline std::vector<double> symmetric_eigenvalues(SquareMatrix a, double tol = 1e-12, std::size_t max_sweeps = 100) {
  const std::size_t n = a.n;
  for (double x : a.data)
    if (!std::isfinite(x)) throw NumericError("spectrum: matrix has non-finite entries");
  double scale = 0.0;
  for (double x : a.data) scale += x * x;
  scale = std::sqrt(scale);
  for (std::size_t sweep = 0; sweep < max_sweeps; ++sweep) {
    double off = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) off += a(i, j) * a(i, j);
    if (std::sqrt(off) <= tol * std::max(scale, 1e-300)) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
      }
    }
  }
  std::vector<double> eig(n);
  for (std::size_t i = 0; i < n; ++i) eig[i] = a(i, i);
  std::sort(eig.begin(), eig.end(), std::greater<>());
  return eig;
}

struct SpectrumReport {
  std::vector<double> eigenvalues;  ///< descending
  double trace = 0.0;               ///< of the symmetrized matrix
  double effective_rank = 0.0;      ///< exp(entropy of clamped, normalized eigenvalues)
  std::size_t k_star = 0;           ///< smallest k with cumulative mass >= 90%
  std::vector<double> cumulative;   ///< cumulative fraction of clamped mass
};

inline constexpr double kDecayMass = 0.9;

/// Spectrum of (A + A^T) / 2. Negative eigenvalues (possible for raw
/// attention) are clamped to zero for the mass-based summaries.
inline SpectrumReport spectrum(const SquareMatrix& a) {
  if (a.n == 0) throw DimensionError("spectrum: empty matrix");
  const auto s = symmetrize(a);
  SpectrumReport r;
  r.eigenvalues = symmetric_eigenvalues(s);
  for (std::size_t i = 0; i < s.n; ++i) r.trace += s(i, i);
  double mass = 0.0;
  for (double l : r.eigenvalues) mass += std::max(l, 0.0);
  if (!(mass > 0.0)) throw UndefinedMetricError("spectrum: no positive eigenvalue mass");
  double h = 0.0, acc = 0.0;
  r.k_star = 0;
  for (std::size_t k = 0; k < r.eigenvalues.size(); ++k) {
    const double p = std::max(r.eigenvalues[k], 0.0) / mass;
    if (p > 0.0) h -= p * std::log(p);
    acc += p;
    r.cumulative.push_back(acc);
    if (r.k_star == 0 && acc >= kDecayMass - 1e-12) r.k_star = k + 1;
  }
  r.effective_rank = std::exp(h);
  return r;
}

inline SquareMatrix to_square(const AttentionMatrix& m) {
  if (m.rows != m.cols) throw DimensionError("attention matrix is " + detail::shape_string(m.rows, m.cols) + ", not square");
  return SquareMatrix(m.rows, m.weights);
}

/// "k,lambda,cumulative_fraction", k from 1.
inline std::string decay_csv(const SpectrumReport& r) {
  std::ostringstream os;
  os.precision(17);
  os << "k,lambda,cumulative_fraction\n";
  for (std::size_t k = 0; k < r.eigenvalues.size(); ++k) os << k + 1 << ',' << r.eigenvalues[k] << ',' << r.cumulative[k] << '\n';
  return os.str();
}

inline nlohmann::json to_json(const SpectrumReport& r) {
  return {{"eigenvalues", r.eigenvalues}, {"trace", r.trace}, {"effective_rank", r.effective_rank}, {"k_star", r.k_star}};
}

// ----------------------------------------------------------------------------
// Decay comparison between two traces of the same inputs

struct DecayEntry {
  AttentionLevel level = AttentionLevel::inter;
  std::size_t layer = 0;
  std::size_t head = 0;
  std::optional<std::size_t> bin;
  std::size_t size = 0;
  std::size_t k_model = 0;
  std::size_t k_baseline = 0;
  double rank_model = 0.0;
  double rank_baseline = 0.0;
};

struct DecayLayerSummary {
  AttentionLevel level = AttentionLevel::inter;
  std::size_t layer = 0;
  std::size_t count = 0;
  double mean_k_model = 0.0;
  double mean_k_baseline = 0.0;
  [[nodiscard]] bool model_faster() const { return mean_k_model < mean_k_baseline; }
};

struct DecayReport {
  std::vector<DecayEntry> entries;
  std::vector<DecayLayerSummary> layers;
  bool model_le_everywhere = true;  ///< k_model <= k_baseline for every matrix

  /// Per-layer means; entries with 1x1 matrices carry no spectral information and are skipped.
  void summarize() {
    std::map<std::pair<int, std::size_t>, DecayLayerSummary> acc;
    model_le_everywhere = true;
    for (const auto& e : entries) {
      if (e.k_model > e.k_baseline) model_le_everywhere = false;
      if (e.size < 2) continue;
      auto& s = acc[{static_cast<int>(e.level), e.layer}];
      s.level = e.level;
      s.layer = e.layer;
      s.count += 1;
      s.mean_k_model += static_cast<double>(e.k_model);
      s.mean_k_baseline += static_cast<double>(e.k_baseline);
    }
    layers.clear();
    for (auto& [key, s] : acc) {
      s.mean_k_model /= static_cast<double>(s.count);
      s.mean_k_baseline /= static_cast<double>(s.count);
      layers.push_back(s);
    }
  }
};

/// Pairs matrices recorded in the same order from the same inputs.
inline DecayReport decay_compare(std::span<const AttentionTrace> model, std::span<const AttentionTrace> baseline) {
  if (model.size() != baseline.size()) throw DimensionError("decay_compare: trace counts differ");
  DecayReport report;
  for (std::size_t t = 0; t < model.size(); ++t) {
    const auto& a = model[t].matrices;
    const auto& b = baseline[t].matrices;
    if (a.size() != b.size()) throw DimensionError("decay_compare: traces hold different numbers of matrices");
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (a[i].rows != b[i].rows || a[i].cols != b[i].cols || a[i].level != b[i].level || a[i].layer != b[i].layer ||
          a[i].head != b[i].head || a[i].bin != b[i].bin) {
        throw DimensionError("decay_compare: matrix " + std::to_string(i) + " differs in shape or position");
      }
      const auto sa = spectrum(to_square(a[i]));
      const auto sb = spectrum(to_square(b[i]));
      report.entries.push_back({a[i].level, a[i].layer, a[i].head, a[i].bin, a[i].rows, sa.k_star, sb.k_star,
                                sa.effective_rank, sb.effective_rank});
    }
  }
  report.summarize();
  return report;
}

inline DecayReport decay_compare(const AttentionTrace& model, const AttentionTrace& baseline) {
  return decay_compare(std::span<const AttentionTrace>(&model, 1), std::span<const AttentionTrace>(&baseline, 1));
}

inline nlohmann::json to_json(const DecayReport& r) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& s : r.layers) {
    layers.push_back({{"level", to_string(s.level)},
                      {"layer", s.layer},
                      {"matrices", s.count},
                      {"mean_k_star_model", s.mean_k_model},
                      {"mean_k_star_baseline", s.mean_k_baseline},
                      {"model_faster_decay", s.model_faster()}});
  }
  return {{"layers", layers}, {"matrices", r.entries.size()}, {"model_le_baseline_everywhere", r.model_le_everywhere}};
}

// ----------------------------------------------------------------------------
// Corpus statistics

/// Shannon entropy (nats) of the empirical code distribution.
inline double token_entropy(const std::vector<PatientSequence>& corpus) {
  std::map<std::size_t, std::uint64_t> counts;
  std::uint64_t total = 0;
  for (const auto& s : corpus)
    for (const auto& b : s.bins)
      for (const auto& e : b.events) {
        ++counts[e.code];
        ++total;
      }
  if (total == 0) throw ValidationError("token_entropy: corpus has no events");
  double h = 0.0;
  for (const auto& [code, c] : counts) {
    const double p = static_cast<double>(c) / static_cast<double>(total);
    h -= p * std::log(p);
  }
  return h;
}

/// Fraction of nonzero cells in the code x code matrix counting pairs of
/// distinct events that share a bin. Reserved ids are excluded.
inline double cooccurrence_density(const std::vector<PatientSequence>& corpus, std::size_t vocab_size) {
  if (vocab_size <= Vocabulary::kReserved) throw ValidationError("cooccurrence_density: vocabulary has no codes");
  if (corpus.empty()) throw ValidationError("cooccurrence_density: empty corpus");
  const std::size_t v = vocab_size - Vocabulary::kReserved;
  std::set<std::pair<std::size_t, std::size_t>> nonzero;
  for (const auto& s : corpus) {
    for (const auto& b : s.bins) {
      for (std::size_t i = 0; i < b.events.size(); ++i) {
        for (std::size_t j = 0; j < b.events.size(); ++j) {
          if (i == j) continue;
          const std::size_t a = b.events[i].code, c = b.events[j].code;
          if (a < Vocabulary::kReserved || c < Vocabulary::kReserved || a >= vocab_size || c >= vocab_size)
            throw ValidationError("cooccurrence_density: code outside the vocabulary");
          nonzero.emplace(a - Vocabulary::kReserved, c - Vocabulary::kReserved);
        }
      }
    }
  }
  return static_cast<double>(nonzero.size()) / static_cast<double>(v * v);
}

// ----------------------------------------------------------------------------
// Attention export

inline std::string attention_file_stem(const AttentionMatrix& m) {
  std::string stem = "attn_" + to_string(m.level) + "_L" + std::to_string(m.layer) + "_H" + std::to_string(m.head);
  if (m.bin) stem += "_B" + std::to_string(*m.bin);
  return stem;
}

/// Writes <stem>.csv and <stem>.json per recorded matrix. The sidecar is
/// annotated with the query/key codes and times (bin reference times and bin
/// indices at the inter-bin level). Returns the CSV paths in trace order.
inline std::vector<std::string> export_attention(const AttentionTrace& trace, const ModelInput& input,
                                                 const std::string& dir, const Vocabulary* vocab = nullptr) {
  if (trace.matrices.empty()) throw ValidationError("export_attention: trace holds no matrices");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());
  const auto flat = input.flat_tokens();
  std::vector<std::string> paths;
  for (const auto& m : trace.matrices) {
    auto side = attention_sidecar(m);
    side["times"] = m.times;
    nlohmann::json labels = nlohmann::json::array();
    if (m.level == AttentionLevel::inter) {
      for (std::size_t b = 0; b < m.rows; ++b) labels.push_back("bin" + std::to_string(b));
    } else {
      std::size_t offset = 0;
      if (m.level == AttentionLevel::intra && m.bin) {
        for (std::size_t b = 0; b < *m.bin; ++b) offset += input.bins.at(b).size();
      }
      for (std::size_t i = 0; i < m.rows; ++i) {
        const auto code = flat.at(offset + i).code;
        if (vocab) {
          labels.push_back(vocab->token(code));
        } else {
          labels.push_back(code);
        }
      }
    }
    side["tokens"] = labels;
    const auto stem = (std::filesystem::path(dir) / attention_file_stem(m)).string();
    write_file(stem + ".csv", attention_csv(m));
    write_file(stem + ".json", side.dump(2) + "\n");
    paths.push_back(stem + ".csv");
  }
  return paths;
}

}  // namespace chronoformer
