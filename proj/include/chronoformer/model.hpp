#pragma once

// Full network:
//   embed -> intra-bin encoder (per bin) -> mean pool -> inter-bin encoder
//   token state  h_j = local_j + global[bin(j)]
//   sequence     mean over contextualized bin summaries
// followed by a shared final layer norm and the task heads.
//
// With use_hierarchical = false the local and global stacks run back to back
// over the flattened event sequence instead ("flat" ablation, same weights).

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <zlib.h>

#include <json.hpp>

#include "chronoformer/attention.hpp"
#include "chronoformer/embeddings.hpp"
#include "chronoformer/errors.hpp"
#include "chronoformer/events.hpp"
#include "chronoformer/numeric.hpp"
#include "chronoformer/rng.hpp"

namespace chronoformer {

struct ModelConfig {
  std::size_t width = 32;
  std::size_t heads = 4;
  std::size_t local_layers = 1;
  std::size_t global_layers = 1;
  std::size_t delta_buckets = 32;
  double bin_width = 24.0;
  KernelKind kernel = KernelKind::gaussian;
  std::size_t rotary_width = 8;
  double sigma_init = 24.0;
  bool use_temporal_embeddings = true;
  bool use_hierarchical = true;
  bool use_conditional_masking = true;
  std::size_t vocab_size = 0;
  std::size_t num_classes = 0;  ///< multi-label head width; 0 disables the head
  std::size_t ffn_mult = 4;
  std::uint64_t seed = 0;

  void validate() const {
    if (width == 0 || width % 2 != 0) throw ConfigError("width: must be even and positive");
    if (heads == 0 || width % heads != 0) throw ConfigError("heads: width must be divisible by heads");
    if (local_layers == 0) throw ConfigError("local_layers: must be >= 1");
    if (global_layers == 0) throw ConfigError("global_layers: must be >= 1");
    if (delta_buckets < 2) throw ConfigError("delta_buckets: must be >= 2");
    if (!(bin_width > 0.0)) throw ConfigError("bin_width: must be positive");
    if (rotary_width == 0 || rotary_width % 2 != 0) throw ConfigError("rotary_width: must be even and positive");
    if (!(sigma_init > 0.0)) throw ConfigError("sigma_init: must be positive");
    if (vocab_size < 3) throw ConfigError("vocab_size: must cover PAD, MASK and at least one code");
    if (ffn_mult == 0) throw ConfigError("ffn_mult: must be >= 1");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"width", c.width},
          {"heads", c.heads},
          {"local_layers", c.local_layers},
          {"global_layers", c.global_layers},
          {"delta_buckets", c.delta_buckets},
          {"bin_width", c.bin_width},
          {"kernel", to_string(c.kernel)},
          {"rotary_width", c.rotary_width},
          {"sigma_init", c.sigma_init},
          {"use_temporal_embeddings", c.use_temporal_embeddings},
          {"use_hierarchical", c.use_hierarchical},
          {"use_conditional_masking", c.use_conditional_masking},
          {"vocab_size", c.vocab_size},
          {"num_classes", c.num_classes},
          {"ffn_mult", c.ffn_mult},
          {"seed", c.seed}};
}

/// Overlays the keys present in j onto base.
inline ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig c = {}) {
  auto get = [&j](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  get("width", c.width);
  get("heads", c.heads);
  get("local_layers", c.local_layers);
  get("global_layers", c.global_layers);
  get("delta_buckets", c.delta_buckets);
  get("bin_width", c.bin_width);
  if (j.contains("kernel")) c.kernel = kernel_from_string(j.at("kernel").get<std::string>());
  get("rotary_width", c.rotary_width);
  get("sigma_init", c.sigma_init);
  get("use_temporal_embeddings", c.use_temporal_embeddings);
  get("use_hierarchical", c.use_hierarchical);
  get("use_conditional_masking", c.use_conditional_masking);
  get("vocab_size", c.vocab_size);
  get("num_classes", c.num_classes);
  get("ffn_mult", c.ffn_mult);
  get("seed", c.seed);
  return c;
}

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct ModelParams {
  EmbeddingParams embedding;
  std::vector<EncoderLayerParams> local;
  std::vector<EncoderLayerParams> global;
  Tensor final_gamma, final_beta;
  Tensor binary_w, binary_b;  ///< d x 1, 1 x 1
  Tensor multi_w, multi_b;    ///< d x C, 1 x C
  Tensor mem_w, mem_b;        ///< d x V, 1 x V
  Tensor gap_w, gap_b;        ///< d x 1, 1 x 1

  /// Every learnable tensor under a stable name, in a fixed order.
  [[nodiscard]] std::vector<NamedTensor> named() const {
    std::vector<NamedTensor> out;
    out.push_back({"embed.concept", embedding.concept_table});
    out.push_back({"embed.delta", embedding.delta_table});
    out.push_back({"embed.meta_w", embedding.meta_weight});
    out.push_back({"embed.meta_b", embedding.meta_bias});
    auto layers = [&out](const std::vector<EncoderLayerParams>& stack, const std::string& prefix) {
      for (std::size_t l = 0; l < stack.size(); ++l) {
        const auto& p = stack[l];
        const std::string base = prefix + "." + std::to_string(l) + ".";
        out.push_back({base + "ln1.gamma", p.ln1_gamma});
        out.push_back({base + "ln1.beta", p.ln1_beta});
        for (std::size_t h = 0; h < p.attention.heads.size(); ++h) {
          const auto& hp = p.attention.heads[h];
          const std::string hb = base + "head" + std::to_string(h) + ".";
          out.push_back({hb + "wq", hp.wq});
          out.push_back({hb + "wk", hp.wk});
          out.push_back({hb + "wv", hp.wv});
          out.push_back({hb + "sigma_raw", hp.sigma_raw});
        }
        out.push_back({base + "wo", p.attention.wo});
        out.push_back({base + "bo", p.attention.bo});
        out.push_back({base + "ln2.gamma", p.ln2_gamma});
        out.push_back({base + "ln2.beta", p.ln2_beta});
        out.push_back({base + "ff.w1", p.ff_w1});
        out.push_back({base + "ff.b1", p.ff_b1});
        out.push_back({base + "ff.w2", p.ff_w2});
        out.push_back({base + "ff.b2", p.ff_b2});
      }
    };
    layers(local, "local");
    layers(global, "global");
    out.push_back({"final.gamma", final_gamma});
    out.push_back({"final.beta", final_beta});
    out.push_back({"head.binary.w", binary_w});
    out.push_back({"head.binary.b", binary_b});
    out.push_back({"head.multi.w", multi_w});
    out.push_back({"head.multi.b", multi_b});
    out.push_back({"head.mem.w", mem_w});
    out.push_back({"head.mem.b", mem_b});
    out.push_back({"head.gap.w", gap_w});
    out.push_back({"head.gap.b", gap_b});
    return out;
  }

  [[nodiscard]] std::vector<Tensor> tensors() const {
    std::vector<Tensor> out;
    for (auto& n : named()) out.push_back(n.tensor);
    return out;
  }

  [[nodiscard]] std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : named()) n += t.tensor.size();
    return n;
  }
};

inline ModelParams init_params(const ModelConfig& config) {
  config.validate();
  Rng rng = Rng(config.seed).derive("init");
  const std::size_t d = config.width;
  ModelParams p;
  p.embedding = EmbeddingParams::init(config.vocab_size, d, config.delta_buckets, rng);
  for (std::size_t l = 0; l < config.local_layers; ++l)
    p.local.push_back(init_encoder_layer(d, config.heads, config.ffn_mult, config.sigma_init, rng));
  for (std::size_t l = 0; l < config.global_layers; ++l)
    p.global.push_back(init_encoder_layer(d, config.heads, config.ffn_mult, config.sigma_init, rng));
  p.final_gamma = detail::filled_param(1, d, 1.0);
  p.final_beta = detail::filled_param(1, d, 0.0);
  const double a = 1.0 / std::sqrt(static_cast<double>(d));
  p.binary_w = detail::uniform_param(d, 1, a, rng);
  p.binary_b = detail::filled_param(1, 1, 0.0);
  p.multi_w = detail::uniform_param(d, config.num_classes, a, rng);
  p.multi_b = detail::filled_param(1, config.num_classes, 0.0);
  p.mem_w = detail::uniform_param(d, config.vocab_size, a, rng);
  p.mem_b = detail::filled_param(1, config.vocab_size, 0.0);
  p.gap_w = detail::uniform_param(d, 1, a, rng);
  p.gap_b = detail::filled_param(1, 1, 0.0);
  return p;
}

/// Encoder input: tokens grouped per non-empty bin plus bin reference times.
struct ModelInput {
  std::vector<std::vector<TokenInput>> bins;
  std::vector<double> reference_times;

  [[nodiscard]] std::size_t num_tokens() const {
    std::size_t n = 0;
    for (const auto& b : bins) n += b.size();
    return n;
  }

  /// Tokens in chronological order (the row order of token_states).
  [[nodiscard]] std::vector<TokenInput> flat_tokens() const {
    std::vector<TokenInput> out;
    out.reserve(num_tokens());
    for (const auto& b : bins) out.insert(out.end(), b.begin(), b.end());
    return out;
  }
};

inline ModelInput make_input(const PatientSequence& sequence) {
  if (sequence.bins.empty()) throw ValidationError("patient '" + sequence.id + "' is empty");
  const auto deltas = compute_deltas(sequence);
  ModelInput in;
  std::size_t k = 0;
  for (const auto& b : sequence.bins) {
    std::vector<TokenInput> tokens;
    tokens.reserve(b.events.size());
    for (const auto& e : b.events) tokens.push_back({e.code, e.time, deltas[k++], e.value, false});
    in.bins.push_back(std::move(tokens));
    in.reference_times.push_back(b.reference_time);
  }
  return in;
}

struct ForwardOptions {
  bool record_trace = false;     ///< op counters
  bool record_matrices = false;  ///< attention matrices (implies record_trace)
};

struct ForwardResult {
  Tensor token_states;     ///< N x d, after the final layer norm
  Tensor bin_summaries;    ///< T x d, contextualized by the inter-bin encoder
  Tensor sequence_vector;  ///< 1 x d, after the final layer norm
  AttentionTrace trace;
};

inline ForwardResult forward(const ModelInput& input, const ModelParams& params, const ModelConfig& config,
                             const ForwardOptions& options = {}) {
  if (input.bins.empty() || input.num_tokens() == 0) throw ValidationError("forward: empty sequence");
  if (params.embedding.vocab_size() != config.vocab_size) {
    throw IncompatibleError("forward: parameters cover " + std::to_string(params.embedding.vocab_size()) +
                            " tokens but the config expects " + std::to_string(config.vocab_size));
  }
  for (const auto& b : input.bins)
    if (b.empty()) throw ValidationError("forward: empty bin");
  ForwardResult out;
  const bool tracing = options.record_trace || options.record_matrices;
  AttentionTrace* trace = tracing ? &out.trace : nullptr;
  const std::size_t n_local = params.local.size();

  std::vector<Tensor> bin_states;
  bin_states.reserve(input.bins.size());
  if (config.use_hierarchical) {
    for (std::size_t b = 0; b < input.bins.size(); ++b) {
      const auto& tokens = input.bins[b];
      std::vector<double> times(tokens.size());
      for (std::size_t i = 0; i < tokens.size(); ++i) times[i] = tokens[i].time;
      Tensor x = embed_tokens(tokens, params.embedding, config.use_temporal_embeddings);
      for (std::size_t l = 0; l < n_local; ++l) {
        TraceContext ctx{trace, options.record_matrices, AttentionLevel::intra, l, l, b};
        x = encoder_layer(x, times, params.local[l], config.kernel, config.rotary_width, ctx);
      }
      bin_states.push_back(std::move(x));
    }
    std::vector<Tensor> pooled;
    pooled.reserve(bin_states.size());
    for (const auto& s : bin_states) pooled.push_back(mean_rows(s));
    Tensor g = concat_rows(pooled);
    for (std::size_t l = 0; l < params.global.size(); ++l) {
      TraceContext ctx{trace, options.record_matrices, AttentionLevel::inter, l, n_local + l, std::nullopt};
      g = encoder_layer(g, input.reference_times, params.global[l], config.kernel, config.rotary_width, ctx);
    }
    std::vector<Tensor> tokens;
    tokens.reserve(bin_states.size());
    for (std::size_t b = 0; b < bin_states.size(); ++b) tokens.push_back(add_row(bin_states[b], slice_rows(g, b, 1)));
    out.token_states = layer_norm_rows(concat_rows(tokens), params.final_gamma, params.final_beta);
    out.bin_summaries = g;
  } else {
    const auto flat = input.flat_tokens();
    std::vector<double> times(flat.size());
    for (std::size_t i = 0; i < flat.size(); ++i) times[i] = flat[i].time;
    Tensor x = embed_tokens(flat, params.embedding, config.use_temporal_embeddings);
    std::size_t slot = 0;
    for (const auto* stack : {&params.local, &params.global}) {
      for (const auto& layer : *stack) {
        TraceContext ctx{trace, options.record_matrices, AttentionLevel::flat, slot, slot, std::nullopt};
        x = encoder_layer(x, times, layer, config.kernel, config.rotary_width, ctx);
        ++slot;
      }
    }
    std::vector<Tensor> pooled;
    std::size_t offset = 0;
    for (const auto& b : input.bins) {
      pooled.push_back(mean_rows(slice_rows(x, offset, b.size())));
      offset += b.size();
    }
    out.bin_summaries = concat_rows(pooled);
    out.token_states = layer_norm_rows(x, params.final_gamma, params.final_beta);
  }
  out.sequence_vector = layer_norm_rows(mean_rows(out.bin_summaries), params.final_gamma, params.final_beta);
  return out;
}

enum class PredictTask { binary, multilabel };

/// Head pre-activation for the sequence readout (1 x 1 or 1 x C).
inline Tensor task_logits(const ForwardResult& f, const ModelParams& params, PredictTask task) {
  if (task == PredictTask::binary) return add(matmul(f.sequence_vector, params.binary_w), params.binary_b);
  if (params.multi_w.cols() == 0) throw ConfigError("predict: model has no multi-label head (num_classes = 0)");
  return add_row(matmul(f.sequence_vector, params.multi_w), params.multi_b);
}

inline std::vector<double> predict(const ModelInput& input, const ModelParams& params, const ModelConfig& config,
                                   PredictTask task) {
  const auto f = forward(input, params, config);
  const Tensor p = sigmoid(task_logits(f, params, task));
  return {p.values().begin(), p.values().end()};
}

// ----------------------------------------------------------------------------
// Checkpoint: little-endian
//   "CHRF" | u32 version | u32 json_len | json | u32 count |
//   count x (u32 name_len | name | u32 rank | u64 dims[rank] | f64 values[]) | u32 crc32

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig config;
  ModelParams params;
  nlohmann::json extra = nlohmann::json::object();  ///< vocabulary, training config, ...
};

namespace detail {

class ByteWriter {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void bytes(std::string_view s) { buf_.append(s); }
  [[nodiscard]] const std::string& data() const { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  ByteReader(std::string_view data, std::string path) : data_(data), path_(std::move(path)) {}
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string_view bytes(std::size_t n) {
    need(n);
    auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  [[nodiscard]] std::size_t remaining() const { return data_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > data_.size()) throw ValidationError("checkpoint " + path_ + ": truncated payload");
  }
  std::string_view data_;
  std::string path_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc32_of(std::string_view data) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  crc = ::crc32(crc, reinterpret_cast<const Bytef*>(data.data()), static_cast<uInt>(data.size()));
  return static_cast<std::uint32_t>(crc);
}

}  // namespace detail

inline std::string encode_checkpoint(const ModelConfig& config, const ModelParams& params,
                                     const nlohmann::json& extra = nlohmann::json::object()) {
  detail::ByteWriter w;
  w.bytes("CHRF");
  w.u32(kCheckpointVersion);
  nlohmann::json header{{"config", to_json(config)}, {"extra", extra}};
  const std::string js = header.dump();
  w.u32(static_cast<std::uint32_t>(js.size()));
  w.bytes(js);
  const auto named = params.named();
  w.u32(static_cast<std::uint32_t>(named.size()));
  for (const auto& [name, t] : named) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name);
    w.u32(2);
    w.u64(t.rows());
    w.u64(t.cols());
    for (double v : t.values()) w.f64(v);
  }
  std::string out = w.data();
  const std::uint32_t crc = detail::crc32_of(out);
  detail::ByteWriter trailer;
  trailer.u32(crc);
  out += trailer.data();
  return out;
}

inline void save_checkpoint(const std::string& path, const ModelConfig& config, const ModelParams& params,
                            const nlohmann::json& extra = nlohmann::json::object()) {
  write_file(path, encode_checkpoint(config, params, extra));
}

inline Checkpoint decode_checkpoint(std::string_view data, const std::string& path = "<memory>") {
  if (data.size() < 12 || data.substr(0, 4) != "CHRF") throw ValidationError("checkpoint " + path + ": bad magic");
  const auto payload = data.substr(0, data.size() - 4);
  detail::ByteReader tail(data.substr(data.size() - 4), path);
  if (tail.u32() != detail::crc32_of(payload)) throw ChecksumError("checkpoint " + path + ": CRC32 mismatch, file is corrupt");
  detail::ByteReader r(payload, path);
  r.bytes(4);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw IncompatibleError("checkpoint " + path + ": format version " + std::to_string(version) +
                            " is not supported (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  const std::uint32_t jlen = r.u32();
  const auto header = nlohmann::json::parse(r.bytes(jlen));
  Checkpoint ck;
  ck.config = model_config_from_json(header.at("config"));
  ck.extra = header.value("extra", nlohmann::json::object());
  ck.params = init_params(ck.config);
  auto named = ck.params.named();
  const std::uint32_t count = r.u32();
  if (count != named.size()) {
    throw IncompatibleError("checkpoint " + path + ": holds " + std::to_string(count) + " tensors, config implies " +
                            std::to_string(named.size()));
  }
  for (auto& [name, t] : named) {
    const std::string stored(r.bytes(r.u32()));
    if (stored != name) throw IncompatibleError("checkpoint " + path + ": expected tensor '" + name + "', found '" + stored + "'");
    const std::uint32_t rank = r.u32();
    if (rank != 2) throw IncompatibleError("checkpoint " + path + ": tensor '" + name + "' has rank " + std::to_string(rank));
    const std::uint64_t rows = r.u64(), cols = r.u64();
    if (rows != t.rows() || cols != t.cols()) {
      throw IncompatibleError("checkpoint " + path + ": tensor '" + name + "' is " + detail::shape_string(rows, cols) +
                              ", config implies " + t.shape_string());
    }
    auto& values = t.mutable_values();
    for (auto& v : values) v = r.f64();
  }
  if (r.remaining() != 0) throw ValidationError("checkpoint " + path + ": trailing bytes");
  return ck;
}

inline Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(read_file(path), path); }

/// Loads and checks that the checkpoint was trained on a vocabulary of the same size.
inline Checkpoint load_checkpoint(const std::string& path, const Vocabulary& expected) {
  auto ck = load_checkpoint(path);
  if (ck.config.vocab_size != expected.size()) {
    throw IncompatibleError("checkpoint " + path + ": vocabulary size mismatch (checkpoint " +
                            std::to_string(ck.config.vocab_size) + ", corpus " + std::to_string(expected.size()) + ")");
  }
  return ck;
}

}  // namespace chronoformer
