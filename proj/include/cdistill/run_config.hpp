#pragma once

// JSON run configuration shared by the command-line subcommands, dotted-path
// overrides, config hashing and dataset loading.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "cdistill/alignment.hpp"
#include "cdistill/data.hpp"
#include "cdistill/distiller.hpp"
#include "cdistill/encoder.hpp"
#include "cdistill/error.hpp"
#include "cdistill/losses.hpp"

namespace cdistill {

struct RunConfig {
  std::string corpus = "data/corpus.txt";
  std::string vocab = "runs/vocab.txt";
  std::string teacher_checkpoint = "runs/teacher.ckpt";
  std::string output_dir = "runs";
  std::size_t seq_len = 64;
  double heldout_fraction = 0.05;
  double data_fraction = 1.0;
  std::uint64_t eval_seed = 20221;
  std::size_t vocab_min_freq = 1;
  std::size_t vocab_max_size = 0;
  std::size_t student_layers = 3;
  EncoderConfig teacher;
  TrainSchedule teacher_schedule;
  DistillConfig distill;

  void validate() const {
    if (corpus.empty()) throw ConfigError("config: corpus path is empty");
    if (seq_len < 3) throw ConfigError("config: seq_len must be at least 3");
    if (seq_len > teacher.max_seq_len) throw ConfigError("config: seq_len exceeds teacher.max_seq_len");
    if (!(heldout_fraction > 0.0 && heldout_fraction < 1.0)) throw ConfigError("config: heldout_fraction must lie in (0, 1)");
    if (!(data_fraction > 0.0 && data_fraction <= 1.0)) throw ConfigError("config: data_fraction must lie in (0, 1]");
    if (student_layers == 0) throw ConfigError("config: student_layers must be positive");
    EncoderConfig t = teacher;
    if (t.vocab_size == 0) t.vocab_size = 1;
    t.validate();
    teacher_schedule.validate();
    distill.validate();
  }
};

namespace detail {

inline void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) throw ConfigError("config: " + where + " must be an object");
  for (const auto& [key, _] : j.items()) {
    bool known = false;
    for (const char* k : keys) known = known || key == k;
    if (!known) throw ConfigError("config: unknown key '" + (where.empty() ? key : where + "." + key) + "'");
  }
}

template <typename U>
void read_opt(const nlohmann::json& j, const char* key, U& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    j.at(key).get_to(out);
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config: bad value for '" + (where.empty() ? std::string(key) : where + "." + key) + "': " +
                      j.at(key).dump());
  }
}

inline TrainSchedule schedule_from_json(const nlohmann::json& j, TrainSchedule s, const std::string& where) {
  reject_unknown(j,
                 {"epochs", "micro_batch", "grad_accum", "lr", "weight_decay", "beta1", "beta2", "eps", "warmup_fraction",
                  "seed", "eval_every", "max_steps"},
                 where);
  read_opt(j, "epochs", s.epochs, where);
  read_opt(j, "micro_batch", s.micro_batch, where);
  read_opt(j, "grad_accum", s.grad_accum, where);
  read_opt(j, "lr", s.lr, where);
  read_opt(j, "weight_decay", s.weight_decay, where);
  read_opt(j, "beta1", s.beta1, where);
  read_opt(j, "beta2", s.beta2, where);
  read_opt(j, "eps", s.eps, where);
  read_opt(j, "warmup_fraction", s.warmup_fraction, where);
  read_opt(j, "seed", s.seed, where);
  read_opt(j, "eval_every", s.eval_every, where);
  read_opt(j, "max_steps", s.max_steps, where);
  return s;
}

inline LossWeights weights_from_json(const nlohmann::json& j) {
  if (j.is_string()) return parse_loss_weights(j.get<std::string>());
  reject_unknown(j, {"mlm", "ce", "cos", "diito_ce", "diito_cos"}, "distill.weights");
  LossWeights w;
  read_opt(j, "mlm", w.mlm, "distill.weights");
  read_opt(j, "ce", w.ce, "distill.weights");
  read_opt(j, "cos", w.cos, "distill.weights");
  read_opt(j, "diito_ce", w.diito_ce, "distill.weights");
  read_opt(j, "diito_cos", w.diito_cos, "distill.weights");
  return w;
}

}  // namespace detail

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  detail::reject_unknown(j,
                         {"corpus", "vocab", "teacher_checkpoint", "output_dir", "seq_len", "heldout_fraction",
                          "data_fraction", "eval_seed", "vocab_min_freq", "vocab_max_size", "student_layers", "teacher",
                          "teacher_schedule", "distill"},
                         "");
  RunConfig c;
  detail::read_opt(j, "corpus", c.corpus, "");
  detail::read_opt(j, "vocab", c.vocab, "");
  detail::read_opt(j, "teacher_checkpoint", c.teacher_checkpoint, "");
  detail::read_opt(j, "output_dir", c.output_dir, "");
  detail::read_opt(j, "seq_len", c.seq_len, "");
  detail::read_opt(j, "heldout_fraction", c.heldout_fraction, "");
  detail::read_opt(j, "data_fraction", c.data_fraction, "");
  detail::read_opt(j, "eval_seed", c.eval_seed, "");
  detail::read_opt(j, "vocab_min_freq", c.vocab_min_freq, "");
  detail::read_opt(j, "vocab_max_size", c.vocab_max_size, "");
  detail::read_opt(j, "student_layers", c.student_layers, "");
  if (j.contains("teacher")) from_json(j.at("teacher"), c.teacher);
  if (j.contains("teacher_schedule")) c.teacher_schedule = detail::schedule_from_json(j.at("teacher_schedule"), c.teacher_schedule, "teacher_schedule");
  if (j.contains("distill")) {
    const auto& d = j.at("distill");
    detail::reject_unknown(d, {"alignment", "strategy", "ratio", "weights", "temperature", "schedule"}, "distill");
    std::string s;
    if (d.contains("alignment")) {
      detail::read_opt(d, "alignment", s, "distill");
      c.distill.alignment = parse_alignment_scheme(s);
    }
    if (d.contains("strategy")) {
      detail::read_opt(d, "strategy", s, "distill");
      c.distill.selection.strategy = parse_selection_strategy(s);
    }
    detail::read_opt(d, "ratio", c.distill.selection.ratio, "distill");
    if (d.contains("weights")) c.distill.weights = detail::weights_from_json(d.at("weights"));
    detail::read_opt(d, "temperature", c.distill.temperature, "distill");
    if (d.contains("schedule")) c.distill.schedule = detail::schedule_from_json(d.at("schedule"), c.distill.schedule, "distill.schedule");
  }
  return c;
}

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json teacher = c.teacher;
  return {{"corpus", c.corpus},
          {"vocab", c.vocab},
          {"teacher_checkpoint", c.teacher_checkpoint},
          {"output_dir", c.output_dir},
          {"seq_len", c.seq_len},
          {"heldout_fraction", c.heldout_fraction},
          {"data_fraction", c.data_fraction},
          {"eval_seed", c.eval_seed},
          {"vocab_min_freq", c.vocab_min_freq},
          {"vocab_max_size", c.vocab_max_size},
          {"student_layers", c.student_layers},
          {"teacher", teacher},
          {"teacher_schedule", c.teacher_schedule},
          {"distill", c.distill}};
}

/// Applies "a.b.c=value" to a JSON document. The value is parsed as JSON when
/// possible and taken as a string otherwise. Intermediate objects are created.
inline void apply_override(nlohmann::json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  nlohmann::json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override '" + assignment + "' has an empty key segment");
    if (!node->is_object()) {
      if (!node->is_null()) throw ConfigError("override '" + assignment + "' descends into a non-object");
      *node = nlohmann::json::object();
    }
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  *node = std::move(value);
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
}

/// File config (or defaults), then overrides, then validation.
inline RunConfig resolve_run_config(const std::optional<std::filesystem::path>& file,
                                    const std::vector<std::string>& overrides) {
  nlohmann::json doc = file ? read_json_file(*file) : nlohmann::json::object();
  for (const auto& o : overrides) apply_override(doc, o);
  RunConfig c = run_config_from_json(doc);
  c.validate();
  return c;
}

/// 64-bit FNV-1a, hex encoded.
inline std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

/// Hash of a resolved config with the run seed removed, so seeds of one
/// condition share a hash.
inline std::string config_hash(const RunConfig& c) {
  nlohmann::json j = to_json(c);
  j["distill"]["schedule"].erase("seed");
  j.erase("output_dir");
  return fnv1a_hex(j.dump()).substr(0, 12);
}

inline std::string file_hash(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return fnv1a_hex(ss.str());
}

/// Encodes the corpus, splits off the held-out tail and keeps the leading
/// data_fraction of the training lines.
inline Dataset load_dataset(const RunConfig& c, const Vocab& vocab) {
  const auto lines = read_lines(c.corpus);
  if (lines.empty()) throw DataError("corpus " + c.corpus + " has no lines");
  std::vector<TokenIds> docs;
  docs.reserve(lines.size());
  for (const auto& l : lines) docs.push_back(encode(l, vocab, c.seq_len));
  Corpus split = split_corpus(std::move(docs), c.heldout_fraction);
  Dataset d;
  d.train = take_fraction(split.train, c.data_fraction);
  d.heldout = std::move(split.heldout);
  d.vocab_size = vocab.size();
  d.seq_len = c.seq_len;
  d.eval_seed = c.eval_seed;
  return d;
}

/// Named experimental conditions of the sweep.
inline const std::vector<std::string>& known_conditions() {
  static const std::vector<std::string> names = {"baseline",          "diito_full",        "diito_middle", "diito_late",
                                                 "diito_full_random", "diito_full_masked", "diito_full_cos"};
  return names;
}

inline void apply_condition(DistillConfig& d, const std::string& name) {
  if (name == "baseline") {
    d.weights = {1, 1, 1, 0, 0};
    return;
  }
  if (name.rfind("diito_", 0) != 0) throw ConfigError("unknown condition '" + name + "'");
  d.weights = {1, 1, 1, 1, 0};
  d.selection.strategy = SelectionStrategy::kConsecutive;
  if (name == "diito_full") {
    d.alignment = AlignmentScheme::kFull;
  } else if (name == "diito_middle") {
    d.alignment = AlignmentScheme::kMiddle;
  } else if (name == "diito_late") {
    d.alignment = AlignmentScheme::kLate;
  } else if (name == "diito_full_random") {
    d.alignment = AlignmentScheme::kFull;
    d.selection.strategy = SelectionStrategy::kRandom;
  } else if (name == "diito_full_masked") {
    d.alignment = AlignmentScheme::kFull;
    d.selection.strategy = SelectionStrategy::kMasked;
  } else if (name == "diito_full_cos") {
    d.alignment = AlignmentScheme::kFull;
    d.weights.diito_cos = 1;
  } else {
    throw ConfigError("unknown condition '" + name + "'");
  }
}

}  // namespace cdistill
