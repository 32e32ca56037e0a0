#include <Eigen/Core>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "cdistill/cdistill.hpp"

namespace fs = std::filesystem;
using namespace cdistill;
using Real = float;

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kData = 3, kNumeric = 4, kAlignment = 5 };

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  bool force = false;

  RunConfig resolve(std::vector<std::string> extra = {}) const {
    std::vector<std::string> all = sets;
    all.insert(all.end(), extra.begin(), extra.end());
    return resolve_run_config(config.empty() ? std::nullopt : std::optional<fs::path>(config), all);
  }
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "JSON run configuration");
  cmd->add_option("--set", c.sets, "Override a config key, e.g. distill.schedule.lr=1e-3")->take_all();
  cmd->add_option("--seed", c.seed, "Training seed");
  cmd->add_flag("--force", c.force, "Rerun even if the run directory is complete");
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

Vocab load_or_build_vocab(const RunConfig& c, bool allow_build) {
  if (fs::exists(c.vocab)) return Vocab::load(c.vocab);
  if (!allow_build) throw DataError("vocabulary " + c.vocab + " not found (run build-vocab first)");
  Vocab v = build_vocab(fs::path(c.corpus), c.vocab_min_freq, c.vocab_max_size);
  v.save(c.vocab);
  return v;
}

/// Writes metrics.jsonl and timing.jsonl as records arrive.
struct RunLog {
  std::ofstream metrics, timing;
  explicit RunLog(const fs::path& dir)
      : metrics(dir / "metrics.jsonl", std::ios::trunc), timing(dir / "timing.jsonl", std::ios::trunc) {
    if (!metrics || !timing) throw DataError("cannot open log files in " + dir.string());
  }
  void operator()(const MetricsRecord& r) {
    metrics << metrics_json(r).dump() << '\n';
    timing << timing_json(r).dump() << '\n';
    metrics.flush();
    timing.flush();
  }
};

fs::path prepare_run_dir(const RunConfig& c, const std::string& kind, std::uint64_t seed, bool force, bool& done) {
  const fs::path dir = fs::path(c.output_dir) / (kind + "-" + config_hash(c) + "-s" + std::to_string(seed));
  done = !force && fs::exists(dir / "done.json");
  if (done) return dir;
  fs::create_directories(dir);
  fs::remove(dir / "done.json");
  nlohmann::json resolved = to_json(c);
  resolved["config_hash"] = config_hash(c);
  write_json(dir / "resolved_config.json", resolved);
  return dir;
}

int cmd_build_vocab(const std::string& corpus, const std::string& out, std::size_t min_freq, std::size_t max_size) {
  const auto lines = read_lines(corpus);
  if (lines.empty()) throw DataError("corpus " + corpus + " is empty");
  const Vocab v = build_vocab(lines, min_freq, max_size);
  v.save(out);
  std::cout << nlohmann::json{{"vocab", out}, {"size", v.size()}}.dump() << '\n';
  return kOk;
}

int cmd_pretrain(const Common& opt) {
  std::vector<std::string> extra;
  if (opt.seed) extra.push_back("teacher_schedule.seed=" + std::to_string(*opt.seed));
  const RunConfig c = opt.resolve(extra);
  const Vocab vocab = load_or_build_vocab(c, true);
  const Dataset data = load_dataset(c, vocab);
  EncoderConfig ec = c.teacher;
  ec.vocab_size = vocab.size();

  bool done = false;
  const fs::path dir = prepare_run_dir(c, "teacher", c.teacher_schedule.seed, opt.force, done);
  if (done && fs::exists(c.teacher_checkpoint)) {
    std::cout << nlohmann::json{{"run_dir", dir.string()}, {"status", "complete"}}.dump() << '\n';
    return kOk;
  }
  RunLog log(dir);
  TrainHooks<Real> hooks;
  hooks.config_hash = config_hash(c);
  hooks.on_record = [&](const MetricsRecord& r) { log(r); };
  hooks.on_epoch_end = [&](std::size_t, const EncoderParams<Real>& p) { save_checkpoint(p, dir / "last.ckpt"); };
  RunStats stats;
  const auto t0 = std::chrono::steady_clock::now();
  const auto teacher = pretrain_teacher<Real>(ec, data, c.teacher_schedule, hooks, &stats);
  save_checkpoint(teacher, dir / "teacher.ckpt");
  if (fs::path(c.teacher_checkpoint).has_parent_path()) fs::create_directories(fs::path(c.teacher_checkpoint).parent_path());
  save_checkpoint(teacher, c.teacher_checkpoint);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  nlohmann::json summary = {{"run_dir", dir.string()},
                            {"checkpoint", c.teacher_checkpoint},
                            {"steps", stats.optimizer_steps},
                            {"perplexity", *stats.final_perplexity},
                            {"vocab_size", vocab.size()},
                            {"wall_seconds", secs}};
  write_json(dir / "done.json", summary);
  std::cout << summary.dump() << '\n';
  return kOk;
}

struct DistillOutcome {
  fs::path dir;
  double perplexity = 0.0;
  bool skipped = false;
};

DistillOutcome run_distill(const RunConfig& c, bool force) {
  const Vocab vocab = load_or_build_vocab(c, false);
  if (!fs::exists(c.teacher_checkpoint)) {
    throw DataError("teacher checkpoint " + c.teacher_checkpoint + " not found (run pretrain-teacher first)");
  }
  const auto teacher = load_checkpoint<Real>(c.teacher_checkpoint, vocab.size());
  if (c.distill.weights.uses_interchange()) build_alignment(c.distill.alignment, c.student_layers, teacher.config.num_layers);
  const Dataset data = load_dataset(c, vocab);

  DistillOutcome out;
  bool done = false;
  out.dir = prepare_run_dir(c, "distill", c.distill.schedule.seed, force, done);
  if (done) {
    const auto ppl = final_perplexity(out.dir / "metrics.jsonl");
    if (!ppl) throw DataError("completed run " + out.dir.string() + " has no perplexity record");
    out.perplexity = *ppl;
    out.skipped = true;
    return out;
  }
  const std::string teacher_hash = file_hash(c.teacher_checkpoint);
  RunLog log(out.dir);
  TrainHooks<Real> hooks;
  hooks.config_hash = config_hash(c);
  hooks.on_record = [&](const MetricsRecord& r) { log(r); };
  hooks.on_epoch_end = [&](std::size_t, const EncoderParams<Real>& p) { save_checkpoint(p, out.dir / "student.ckpt"); };
  RunStats stats;
  const auto t0 = std::chrono::steady_clock::now();
  distill(teacher, c.student_layers, c.distill, data, hooks, &stats);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (file_hash(c.teacher_checkpoint) != teacher_hash) throw DataError("teacher checkpoint changed during distillation");
  out.perplexity = *stats.final_perplexity;
  write_json(out.dir / "done.json", {{"perplexity", out.perplexity},
                                     {"steps", stats.optimizer_steps},
                                     {"interchange_calls", stats.interchange_calls},
                                     {"empty_mask_warnings", stats.warnings.empty_masks},
                                     {"zero_norm_warnings", stats.warnings.zero_norms},
                                     {"teacher_hash", teacher_hash},
                                     {"wall_seconds", secs}});
  return out;
}

struct DistillFlags {
  std::string alignment, strategy, weights;
  std::optional<std::size_t> student_layers;
  std::optional<double> data_fraction;

  std::vector<std::string> overrides() const {
    std::vector<std::string> o;
    if (!alignment.empty()) o.push_back("distill.alignment=\"" + alignment + "\"");
    if (!strategy.empty()) o.push_back("distill.strategy=\"" + strategy + "\"");
    if (!weights.empty()) o.push_back("distill.weights=\"" + weights + "\"");
    if (student_layers) o.push_back("student_layers=" + std::to_string(*student_layers));
    if (data_fraction) o.push_back("data_fraction=" + nlohmann::json(*data_fraction).dump());
    return o;
  }
};

int cmd_distill(const Common& opt, const DistillFlags& flags) {
  auto extra = flags.overrides();
  if (opt.seed) extra.push_back("distill.schedule.seed=" + std::to_string(*opt.seed));
  const RunConfig c = opt.resolve(extra);
  const auto out = run_distill(c, opt.force);
  std::cout << nlohmann::json{{"run_dir", out.dir.string()},
                              {"perplexity", out.perplexity},
                              {"status", out.skipped ? "complete" : "ok"}}
                   .dump()
            << '\n';
  return kOk;
}

int cmd_eval(const Common& opt, const std::string& checkpoint) {
  const RunConfig c = opt.resolve();
  const Vocab vocab = load_or_build_vocab(c, false);
  const auto params = load_checkpoint<Real>(checkpoint, vocab.size());
  const Dataset data = load_dataset(c, vocab);
  const double ppl = evaluate_perplexity(params, data.heldout, data.seq_len, data.eval_seed, data.masking);
  std::cout << nlohmann::json{{"checkpoint", checkpoint}, {"perplexity", ppl}, {"heldout_lines", data.heldout.size()}}.dump()
            << '\n';
  return kOk;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string part; std::getline(ss, part, ',');)
    if (!part.empty()) out.push_back(part);
  return out;
}

template <typename U>
std::vector<U> parse_numbers(const std::string& s, const char* what) {
  std::vector<U> out;
  for (const auto& part : split_list(s)) {
    try {
      std::size_t used = 0;
      const auto v = std::stoull(part, &used);
      if (used != part.size()) throw std::invalid_argument(part);
      out.push_back(static_cast<U>(v));
    } catch (const std::exception&) {
      throw ConfigError(std::string("sweep: bad ") + what + " '" + part + "'");
    }
  }
  if (out.empty()) throw ConfigError(std::string("sweep: no ") + what + " given");
  return out;
}

int cmd_sweep(const Common& opt, const std::string& conditions_arg, const std::string& seeds_arg,
              const std::string& layers_arg, std::optional<double> data_fraction, std::string out_dir) {
  const auto conditions = split_list(conditions_arg);
  if (conditions.empty()) throw ConfigError("sweep: no conditions given");
  const auto seeds = parse_numbers<std::uint64_t>(seeds_arg, "seeds");
  std::vector<std::string> extra;
  if (data_fraction) extra.push_back("data_fraction=" + nlohmann::json(*data_fraction).dump());
  const RunConfig base = opt.resolve(extra);
  const auto layers = layers_arg.empty() ? std::vector<std::size_t>{base.student_layers}
                                         : parse_numbers<std::size_t>(layers_arg, "student layers");
  for (const auto& name : conditions) {
    DistillConfig probe;
    apply_condition(probe, name);
  }
  if (!fs::exists(base.teacher_checkpoint)) {
    throw DataError("teacher checkpoint " + base.teacher_checkpoint + " not found (run pretrain-teacher first)");
  }
  if (out_dir.empty()) out_dir = (fs::path(base.output_dir) / ("sweep-" + config_hash(base))).string();
  fs::create_directories(out_dir);

  std::vector<SweepCell> cells;
  for (auto l : layers) {
    for (const auto& name : conditions) {
      for (auto seed : seeds) {
        RunConfig c = base;
        c.student_layers = l;
        apply_condition(c.distill, name);
        c.distill.schedule.seed = seed;
        SweepCell cell{name, l, seed, "failed", std::nullopt, "", ""};
        try {
          c.validate();
          const auto r = run_distill(c, opt.force);
          cell.status = "ok";
          cell.perplexity = r.perplexity;
          cell.run_dir = r.dir.string();
        } catch (const std::exception& e) {
          cell.error = e.what();
        }
        std::cerr << "sweep: " << name << " layers=" << l << " seed=" << seed << " -> " << cell.status
                  << (cell.perplexity ? " ppl=" + std::to_string(*cell.perplexity) : " " + cell.error) << '\n';
        cells.push_back(cell);
      }
    }
  }
  const auto summary = summarize(cells);
  write_grid_csv(cells, fs::path(out_dir) / "grid.csv");
  write_summary_csv(summary, fs::path(out_dir) / "summary.csv");
  const auto report = sweep_report_json(cells, summary);
  write_json(fs::path(out_dir) / "report.json", report);
  std::cout << report["summary"].dump() << '\n';
  return kOk;
}

void configure_threads() {
  int threads = 1;
  if (const char* env = std::getenv("CDISTILL_THREADS")) {
    try {
      threads = std::stoi(env);
    } catch (const std::exception&) {
      threads = 0;
    }
    if (threads <= 0) throw ConfigError(std::string("CDISTILL_THREADS must be a positive integer, got '") + env + "'");
  }
  Eigen::setNbThreads(threads);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Causal distillation of masked language models"};
  app.require_subcommand(1);

  std::string corpus = "data/corpus.txt", vocab_out = "runs/vocab.txt";
  std::size_t min_freq = 1, max_size = 0;
  auto* bv = app.add_subcommand("build-vocab", "Build a word-level vocabulary from a corpus");
  bv->add_option("--corpus", corpus, "Corpus, one document per line")->capture_default_str();
  bv->add_option("--out", vocab_out, "Vocabulary file to write")->capture_default_str();
  bv->add_option("--min-freq", min_freq, "Drop words rarer than this")->capture_default_str();
  bv->add_option("--max-size", max_size, "Cap on vocabulary size including specials (0: none)")->capture_default_str();

  Common pre_opt, dis_opt, eval_opt, sweep_opt;
  auto* pre = app.add_subcommand("pretrain-teacher", "Train the teacher encoder with masked language modelling");
  add_common(pre, pre_opt);

  DistillFlags dflags;
  auto* dis = app.add_subcommand("distill", "Distill a student from the teacher");
  add_common(dis, dis_opt);
  dis->add_option("--alignment", dflags.alignment, "full|middle|late");
  dis->add_option("--strategy", dflags.strategy, "consecutive|random|masked");
  dis->add_option("--weights", dflags.weights, "mlm,ce,cos,diito_ce,diito_cos");
  dis->add_option("--student-layers", dflags.student_layers, "Number of student blocks");
  dis->add_option("--data-fraction", dflags.data_fraction, "Use only the leading fraction of training lines");

  std::string checkpoint;
  auto* ev = app.add_subcommand("eval", "Held-out perplexity of a checkpoint");
  add_common(ev, eval_opt);
  ev->add_option("--checkpoint", checkpoint, "Checkpoint to evaluate")->required();

  std::string conditions = "baseline,diito_full", seeds = "1,2,3", layer_list, sweep_out;
  std::optional<double> sweep_fraction;
  auto* sw = app.add_subcommand("sweep", "Distill every (condition, seed) cell and summarise perplexity");
  add_common(sw, sweep_opt);
  sw->add_option("--conditions", conditions,
                 "Comma list of baseline, diito_full, diito_middle, diito_late, diito_full_random, diito_full_masked, "
                 "diito_full_cos")
      ->capture_default_str();
  sw->add_option("--seeds", seeds, "Comma list of seeds")->capture_default_str();
  sw->add_option("--student-layers", layer_list, "Comma list of student depths");
  sw->add_option("--data-fraction", sweep_fraction, "Use only the leading fraction of training lines");
  sw->add_option("--out", sweep_out, "Report directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }

  try {
    configure_threads();
    if (*bv) return cmd_build_vocab(corpus, vocab_out, min_freq, max_size);
    if (*pre) return cmd_pretrain(pre_opt);
    if (*dis) return cmd_distill(dis_opt, dflags);
    if (*ev) return cmd_eval(eval_opt, checkpoint);
    if (*sw) return cmd_sweep(sweep_opt, conditions, seeds, layer_list, sweep_fraction, sweep_out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const AlignmentError& e) {
    std::cerr << "alignment error: " << e.what() << '\n';
    return kAlignment;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kFailure;
}
