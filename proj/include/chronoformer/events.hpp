#pragma once

// Event-stream data model: patients are chronologically ordered fixed-width
// time bins of coded events. Times are hours since the patient origin.
//
// Corpus files are JSON Lines, one patient per line:
//   {"id": str, "events": [{"code": str, "t": float, "v": float?}],
//    "anchor": float, "labels": {str: float | [float]}}

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <variant>
#include <vector>

#include <json.hpp>

#include "chronoformer/errors.hpp"

namespace chronoformer {

struct EventRecord {
  std::size_t code = 0;
  double time = 0.0;             ///< hours since sequence origin
  std::optional<double> value;   ///< lab value, dosage, ...

  friend bool operator==(const EventRecord&, const EventRecord&) = default;
};

struct TimeBin {
  std::size_t index = 0;
  double start = 0.0;
  double end = 0.0;
  std::vector<EventRecord> events;  ///< ascending time, ties in input order
  double reference_time = 0.0;      ///< mean event time, used for inter-bin bias

  friend bool operator==(const TimeBin&, const TimeBin&) = default;
};

/// Binary label or multi-hot vector.
using Label = std::variant<double, std::vector<double>>;

struct PatientSequence {
  std::string id;
  std::vector<TimeBin> bins;  ///< non-empty bins only, strictly increasing index
  std::map<std::string, Label> labels;
  double anchor_time = 0.0;

  [[nodiscard]] std::size_t num_events() const {
    std::size_t n = 0;
    for (const auto& b : bins) n += b.events.size();
    return n;
  }

  /// All events in chronological order.
  [[nodiscard]] std::vector<EventRecord> events() const {
    std::vector<EventRecord> out;
    out.reserve(num_events());
    for (const auto& b : bins) out.insert(out.end(), b.events.begin(), b.events.end());
    return out;
  }

  [[nodiscard]] double binary_label(const std::string& task) const {
    auto it = labels.find(task);
    if (it == labels.end()) throw ValidationError("patient '" + id + "' has no label '" + task + "'");
    if (const auto* v = std::get_if<double>(&it->second)) return *v;
    throw ValidationError("label '" + task + "' of patient '" + id + "' is multi-hot, expected binary");
  }

  friend bool operator==(const PatientSequence&, const PatientSequence&) = default;
};

/// Token <-> id mapping with reserved ids PAD = 0 and MASK = 1, plus a
/// per-token salience utility in [0, 1] that steers masked pretraining.
class Vocabulary {
 public:
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kMask = 1;
  static constexpr std::size_t kReserved = 2;

  Vocabulary() : tokens_{"[PAD]", "[MASK]"}, utility_{0.0, 0.0} {}

  /// Id of token, registering it (utility 1.0) on first sight.
  std::size_t add(const std::string& token, double utility = 1.0) {
    auto it = ids_.find(token);
    if (it != ids_.end()) return it->second;
    if (token == tokens_[kPad] || token == tokens_[kMask]) {
      throw ValidationError("token '" + token + "' is reserved");
    }
    const std::size_t id = tokens_.size();
    tokens_.push_back(token);
    utility_.push_back(utility);
    ids_.emplace(token, id);
    return id;
  }

  [[nodiscard]] std::optional<std::size_t> find(const std::string& token) const {
    auto it = ids_.find(token);
    if (it == ids_.end()) return std::nullopt;
    return it->second;
  }
  [[nodiscard]] std::size_t id(const std::string& token) const {
    if (auto id = find(token)) return *id;
    throw ValidationError("unknown token '" + token + "'");
  }
  [[nodiscard]] const std::string& token(std::size_t id) const {
    if (id >= tokens_.size()) throw ValidationError("token id " + std::to_string(id) + " out of vocabulary");
    return tokens_[id];
  }
  [[nodiscard]] std::size_t size() const noexcept { return tokens_.size(); }
  [[nodiscard]] double utility(std::size_t id) const { return utility_.at(id); }
  [[nodiscard]] const std::vector<double>& utilities() const noexcept { return utility_; }
  void set_utility(std::size_t id, double u) {
    if (id < kReserved || id >= tokens_.size()) throw ValidationError("cannot set utility of id " + std::to_string(id));
    if (!(u >= 0.0 && u <= 1.0)) throw ValidationError("utility must lie in [0, 1]");
    utility_[id] = u;
  }

  /// {"tokens": [...], "utility": [...]}; ids are position + 2.
  [[nodiscard]] nlohmann::json to_json() const {
    nlohmann::json j;
    j["tokens"] = std::vector<std::string>(tokens_.begin() + kReserved, tokens_.end());
    j["utility"] = std::vector<double>(utility_.begin() + kReserved, utility_.end());
    return j;
  }

  static Vocabulary from_json(const nlohmann::json& j) {
    Vocabulary v;
    const auto& toks = j.at("tokens");
    std::vector<double> util;
    if (j.contains("utility")) util = j.at("utility").get<std::vector<double>>();
    if (!util.empty() && util.size() != toks.size()) {
      throw ValidationError("vocabulary: " + std::to_string(util.size()) + " utilities for " +
                            std::to_string(toks.size()) + " tokens");
    }
    for (std::size_t i = 0; i < toks.size(); ++i) {
      const auto tok = toks[i].get<std::string>();
      if (v.find(tok)) throw ValidationError("vocabulary: duplicate token '" + tok + "'");
      const std::size_t id = v.add(tok);
      if (!util.empty()) v.set_utility(id, util[i]);
    }
    return v;
  }

  void save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write vocabulary to " + path);
    os << to_json().dump() << '\n';
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot read vocabulary " + path);
    try {
      return from_json(nlohmann::json::parse(is));
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("vocabulary " + path + ": " + e.what());
    }
  }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) {
    return a.tokens_ == b.tokens_ && a.utility_ == b.utility_;
  }

 private:
  std::vector<std::string> tokens_;
  std::vector<double> utility_;
  std::unordered_map<std::string, std::size_t> ids_;
};

struct SchemaConfig {
  double bin_width = 24.0;  ///< hours
};

struct Corpus {
  std::vector<PatientSequence> sequences;
  Vocabulary vocab;
};

/// Groups events into half-open windows [k w, (k+1) w); empty windows are
/// omitted and each bin's reference time is the mean of its event times.
inline std::vector<TimeBin> bin_events(std::vector<EventRecord> events, double bin_width) {
  if (!(bin_width > 0.0) || !std::isfinite(bin_width)) throw ConfigError("bin_width must be a positive finite number");
  for (const auto& e : events) {
    if (!std::isfinite(e.time)) throw ValidationError("event time is not finite");
    if (e.time < 0.0) throw ValidationError("event time " + std::to_string(e.time) + " is negative");
  }
  std::stable_sort(events.begin(), events.end(),
                   [](const EventRecord& a, const EventRecord& b) { return a.time < b.time; });
  std::vector<TimeBin> bins;
  for (auto& e : events) {
    const auto index = static_cast<std::size_t>(std::floor(e.time / bin_width));
    if (bins.empty() || bins.back().index != index) {
      TimeBin b;
      b.index = index;
      b.start = static_cast<double>(index) * bin_width;
      b.end = b.start + bin_width;
      bins.push_back(std::move(b));
    }
    bins.back().events.push_back(std::move(e));
  }
  for (auto& b : bins) {
    double s = 0.0;
    for (const auto& e : b.events) s += e.time;
    b.reference_time = s / static_cast<double>(b.events.size());
  }
  return bins;
}

/// Time since the chronologically preceding event (across bins); 0 for the first event.
inline std::vector<double> compute_deltas(const PatientSequence& sequence) {
  std::vector<double> out;
  out.reserve(sequence.num_events());
  double prev = 0.0;
  bool first = true;
  for (const auto& b : sequence.bins) {
    for (const auto& e : b.events) {
      out.push_back(first ? 0.0 : e.time - prev);
      prev = e.time;
      first = false;
    }
  }
  return out;
}

/// Checks every PatientSequence invariant; vocab_size 0 skips the code range check.
inline void validate_sequence(const PatientSequence& s, std::size_t vocab_size = 0) {
  if (s.bins.empty()) throw ValidationError("patient '" + s.id + "' has no events");
  if (!std::isfinite(s.anchor_time)) throw ValidationError("patient '" + s.id + "' anchor is not finite");
  std::optional<std::size_t> last_index;
  for (const auto& b : s.bins) {
    if (b.events.empty()) throw ValidationError("patient '" + s.id + "' has an empty bin");
    if (last_index && b.index <= *last_index) throw ValidationError("patient '" + s.id + "' bins are not increasing");
    last_index = b.index;
    double prev = b.start;
    for (const auto& e : b.events) {
      if (!std::isfinite(e.time) || e.time < 0.0) throw ValidationError("patient '" + s.id + "' has an invalid event time");
      if (e.time < b.start || e.time >= b.end) throw ValidationError("patient '" + s.id + "' event outside its bin");
      if (e.time < prev) throw ValidationError("patient '" + s.id + "' events are not sorted");
      if (e.time >= s.anchor_time) {
        throw ValidationError("patient '" + s.id + "' has an event at t=" + std::to_string(e.time) +
                              " at or after its anchor " + std::to_string(s.anchor_time));
      }
      if (vocab_size != 0 && e.code >= vocab_size) {
        throw ValidationError("patient '" + s.id + "' code id " + std::to_string(e.code) + " outside vocabulary of size " +
                              std::to_string(vocab_size));
      }
      prev = e.time;
    }
  }
}

namespace detail {

inline Label parse_label(const nlohmann::json& j) {
  if (j.is_number()) return j.get<double>();
  if (j.is_array()) return j.get<std::vector<double>>();
  throw ValidationError("label must be a number or an array of numbers");
}

inline nlohmann::json label_json(const Label& l) {
  if (const auto* v = std::get_if<double>(&l)) return *v;
  return std::get<std::vector<double>>(l);
}

}  // namespace detail

/// Parses one JSON Lines record, registering unknown codes in vocab.
inline PatientSequence parse_patient(std::string_view line, const SchemaConfig& schema, Vocabulary& vocab) {
  const auto j = nlohmann::json::parse(line);
  PatientSequence s;
  s.id = j.at("id").get<std::string>();
  s.anchor_time = j.at("anchor").get<double>();
  std::vector<EventRecord> events;
  for (const auto& ev : j.at("events")) {
    EventRecord e;
    e.code = vocab.add(ev.at("code").get<std::string>());
    e.time = ev.at("t").get<double>();
    if (!std::isfinite(e.time)) throw ValidationError("patient '" + s.id + "': event time is not finite");
    if (e.time < 0.0) throw ValidationError("patient '" + s.id + "': negative event time " + std::to_string(e.time));
    if (e.time >= s.anchor_time) {
      throw ValidationError("patient '" + s.id + "': event at t=" + std::to_string(e.time) + " is not before anchor " +
                            std::to_string(s.anchor_time));
    }
    if (auto it = ev.find("v"); it != ev.end() && !it->is_null()) e.value = it->get<double>();
    events.push_back(e);
  }
  if (auto it = j.find("labels"); it != j.end()) {
    for (const auto& [k, v] : it->items()) s.labels.emplace(k, detail::parse_label(v));
  }
  s.bins = bin_events(std::move(events), schema.bin_width);
  validate_sequence(s);
  return s;
}

/// Parses a JSON Lines corpus. When seed is given its ids are kept and new
/// codes are appended; otherwise ids follow first appearance.
inline Corpus parse_corpus_text(std::string_view text, const SchemaConfig& schema,
                                std::optional<Vocabulary> seed = std::nullopt) {
  Corpus corpus;
  if (seed) corpus.vocab = std::move(*seed);
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    std::string_view line = text.substr(pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.find_first_not_of(" \t") == std::string_view::npos) continue;
    try {
      corpus.sequences.push_back(parse_patient(line, schema, corpus.vocab));
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("corpus line " + std::to_string(line_no) + ": malformed record: " + e.what());
    } catch (const ValidationError& e) {
      throw ValidationError("corpus line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return corpus;
}

inline std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, std::string_view content) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path);
  os.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!os) throw IoError("write failed for " + path);
}

inline Corpus parse_corpus(const std::string& path, const SchemaConfig& schema,
                           std::optional<Vocabulary> seed = std::nullopt) {
  return parse_corpus_text(read_file(path), schema, std::move(seed));
}

inline nlohmann::json patient_json(const PatientSequence& s, const Vocabulary& vocab) {
  nlohmann::json j;
  j["id"] = s.id;
  auto events = nlohmann::json::array();
  for (const auto& e : s.events()) {
    nlohmann::json ev;
    ev["code"] = vocab.token(e.code);
    ev["t"] = e.time;
    if (e.value) ev["v"] = *e.value;
    events.push_back(std::move(ev));
  }
  j["events"] = std::move(events);
  j["anchor"] = s.anchor_time;
  auto labels = nlohmann::json::object();
  for (const auto& [k, v] : s.labels) labels[k] = detail::label_json(v);
  j["labels"] = std::move(labels);
  return j;
}

inline std::string serialize_corpus(const std::vector<PatientSequence>& sequences, const Vocabulary& vocab) {
  std::string out;
  for (const auto& s : sequences) {
    out += patient_json(s, vocab).dump();
    out += '\n';
  }
  return out;
}

/// Default salience: inverse token frequency scaled so the rarest observed
/// code gets 1, clipped to [0.05, 1]. Codes never observed get 1.
inline void assign_inverse_frequency_utilities(const std::vector<PatientSequence>& sequences, Vocabulary& vocab) {
  std::vector<std::size_t> counts(vocab.size(), 0);
  for (const auto& s : sequences)
    for (const auto& b : s.bins)
      for (const auto& e : b.events) ++counts.at(e.code);
  std::size_t min_count = 0;
  for (std::size_t id = Vocabulary::kReserved; id < counts.size(); ++id) {
    if (counts[id] > 0 && (min_count == 0 || counts[id] < min_count)) min_count = counts[id];
  }
  for (std::size_t id = Vocabulary::kReserved; id < counts.size(); ++id) {
    const double u = counts[id] == 0 ? 1.0 : static_cast<double>(min_count) / static_cast<double>(counts[id]);
    vocab.set_utility(id, std::clamp(u, 0.05, 1.0));
  }
}

}  // namespace chronoformer
