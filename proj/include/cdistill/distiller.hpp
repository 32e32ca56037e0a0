#pragma once

// Teacher pretraining, causal distillation, and held-out perplexity.
//
// Training proceeds in optimizer windows of `grad_accum` micro-batches. One
// interchange site (student row, teacher rows, token columns) is drawn per
// window and shared by its micro-batches, and every loss in the window is
// normalised by the window's total masked count. A window therefore produces
// the same update whether it is fed as several micro-batches or as one batch.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "cdistill/alignment.hpp"
#include "cdistill/data.hpp"
#include "cdistill/encoder.hpp"
#include "cdistill/error.hpp"
#include "cdistill/intervention.hpp"
#include "cdistill/losses.hpp"
#include "cdistill/optim.hpp"
#include "cdistill/rng.hpp"

namespace cdistill {

struct TrainSchedule {
  std::size_t epochs = 3;
  std::size_t micro_batch = 8;
  std::size_t grad_accum = 4;
  double lr = 5e-4;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double warmup_fraction = 0.05;
  std::uint64_t seed = 0;
  std::size_t eval_every = 0;  // 0: evaluate at epoch ends only
  std::size_t max_steps = 0;   // 0: no cap

  std::size_t effective_batch() const noexcept { return micro_batch * grad_accum; }

  void validate() const {
    if (epochs == 0) throw ConfigError("schedule: epochs must be positive");
    if (micro_batch == 0) throw ConfigError("schedule: micro_batch must be positive");
    if (grad_accum == 0) throw ConfigError("schedule: grad_accum must be positive");
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("schedule: lr must be positive");
    if (!(weight_decay >= 0.0)) throw ConfigError("schedule: weight_decay must be non-negative");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
      throw ConfigError("schedule: betas must lie in [0, 1)");
    }
    if (!(eps > 0.0)) throw ConfigError("schedule: eps must be positive");
    if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) throw ConfigError("schedule: warmup_fraction must lie in [0, 1)");
  }

  friend bool operator==(const TrainSchedule&, const TrainSchedule&) = default;
};

/// Linear warmup over the first warmup_fraction of steps, then constant. `step` is 1-based.
inline double scheduled_lr(const TrainSchedule& s, std::size_t step, std::size_t total_steps) {
  const auto warmup = static_cast<std::size_t>(std::ceil(s.warmup_fraction * static_cast<double>(total_steps)));
  if (warmup == 0 || step >= warmup) return s.lr;
  return s.lr * static_cast<double>(step) / static_cast<double>(warmup);
}

struct DistillConfig {
  AlignmentScheme alignment = AlignmentScheme::kFull;
  TokenSelection selection;
  LossWeights weights;
  double temperature = 2.0;
  TrainSchedule schedule;

  void validate() const {
    selection.validate();
    weights.validate();
    schedule.validate();
    if (!(temperature > 0.0) || !std::isfinite(temperature)) throw ConfigError("distill config: temperature must be positive");
  }
};

inline void to_json(nlohmann::json& j, const TrainSchedule& s) {
  j = {{"epochs", s.epochs},   {"micro_batch", s.micro_batch},         {"grad_accum", s.grad_accum},
       {"lr", s.lr},           {"weight_decay", s.weight_decay},       {"beta1", s.beta1},
       {"beta2", s.beta2},     {"eps", s.eps},                         {"warmup_fraction", s.warmup_fraction},
       {"seed", s.seed},       {"eval_every", s.eval_every},           {"max_steps", s.max_steps}};
}

inline void to_json(nlohmann::json& j, const DistillConfig& c) {
  j = {{"alignment", to_string(c.alignment)},
       {"strategy", to_string(c.selection.strategy)},
       {"ratio", c.selection.ratio},
       {"weights", c.weights},
       {"temperature", c.temperature},
       {"schedule", c.schedule}};
}

/// Encoded training and held-out documents.
struct Dataset {
  std::vector<TokenIds> train;
  std::vector<TokenIds> heldout;
  std::size_t vocab_size = 0;
  std::size_t seq_len = 64;
  MaskingRule masking;
  std::uint64_t eval_seed = 20221;
};

struct MetricsRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  LossBreakdown losses;
  std::optional<double> perplexity;
  double wall_seconds = 0.0;
  std::uint64_t seed = 0;
  std::string config_hash;
};

/// Deterministic part of a record; wall-clock time is kept out so equal-seed runs log identical lines.
inline nlohmann::json metrics_json(const MetricsRecord& r) {
  nlohmann::json j = {{"step", r.step},
                      {"epoch", r.epoch},
                      {"mlm", r.losses.mlm},
                      {"ce", r.losses.ce},
                      {"cos", r.losses.cos},
                      {"diito_ce", r.losses.diito_ce},
                      {"diito_cos", r.losses.diito_cos},
                      {"total", r.losses.total}};
  if (r.perplexity) j["perplexity"] = *r.perplexity;
  j["seed"] = r.seed;
  j["config_hash"] = r.config_hash;
  return j;
}

inline nlohmann::json timing_json(const MetricsRecord& r) {
  return {{"step", r.step}, {"wall_seconds", r.wall_seconds}};
}

template <typename T>
struct TrainHooks {
  std::function<void(const MetricsRecord&)> on_record;
  std::function<void(std::size_t epoch, const EncoderParams<T>&)> on_epoch_end;
  std::string config_hash;
};

struct RunStats {
  std::size_t optimizer_steps = 0;
  std::uint64_t interchange_calls = 0;
  LossWarnings warnings;
  std::optional<double> final_perplexity;
};

/// exp of the mean cross-entropy over every masked position of the batches.
template <typename T>
double evaluate_perplexity(const EncoderParams<T>& params, const std::vector<MaskedBatch>& batches) {
  double nll = 0.0;
  std::size_t count = 0;
  for (const auto& b : batches) {
    Tape<T> tape(false);
    const auto res = forward(tape, params, b);
    const auto& logits = res.logits_value();
    for (std::size_t i = 0; i < b.tokens(); ++i) {
      if (!b.masked_flags[i]) continue;
      const auto row = logits.row(i);
      double mx = -std::numeric_limits<double>::infinity();
      for (T x : row) mx = std::max(mx, static_cast<double>(x));
      double z = 0.0;
      for (T x : row) z += std::exp(static_cast<double>(x) - mx);
      nll += std::log(z) + mx - static_cast<double>(row[static_cast<std::size_t>(b.labels[i])]);
      ++count;
    }
  }
  if (count == 0) throw DataError("evaluate_perplexity: held-out set has no masked positions");
  const double ppl = std::exp(nll / static_cast<double>(count));
  if (!std::isfinite(ppl)) throw NumericError("evaluate_perplexity: perplexity is not finite");
  return ppl;
}

template <typename T>
double evaluate_perplexity(const EncoderParams<T>& params, const std::vector<TokenIds>& heldout, std::size_t seq_len,
                           std::uint64_t eval_seed, const MaskingRule& rule = {}) {
  if (heldout.empty()) throw DataError("evaluate_perplexity: empty held-out set");
  return evaluate_perplexity(params, evaluation_batches(heldout, seq_len, params.config.vocab_size, eval_seed, 16, rule));
}

inline double evaluate_perplexity_on(const auto& params, const Dataset& data) {
  return evaluate_perplexity(params, data.heldout, data.seq_len, data.eval_seed, data.masking);
}

/// Interchange site shared by the micro-batches of one optimizer window.
struct WindowSite {
  NeuronSelector student;
  std::vector<NeuronSelector> teacher;
};

/// Draws the site for a window: one aligned student row, its teacher rows, and
/// token columns within the shortest sequence of the window.
inline WindowSite sample_window_site(const AlignmentMap& map, const TokenSelection& selection,
                                     std::span<const BatchPair> window, Rng& rng) {
  std::size_t usable = std::numeric_limits<std::size_t>::max();
  std::vector<std::size_t> masked;
  for (const auto& p : window) {
    for (const MaskedBatch* b : {&p.base, &p.source}) {
      for (std::size_t s = 0; s < b->batch_size; ++s) usable = std::min(usable, b->real_length(s));
    }
    for (std::size_t i = 0; i < p.base.tokens(); ++i)
      if (p.base.masked_flags[i]) masked.push_back(i % p.base.seq_len + 1);
  }
  if (usable == std::numeric_limits<std::size_t>::max() || usable == 0) throw DataError("interchange window without tokens");
  const AlignmentSite site = sample_site(map, rng);
  WindowSite w;
  w.student = {site.student_row, select_columns(selection, usable, masked, rng)};
  for (auto r : site.teacher_rows) w.teacher.push_back({r, w.student.cols});
  return w;
}

template <typename T>
class DistillTrainer {
 public:
  /// `teacher` may be null when no loss term needs it.
  DistillTrainer(const EncoderParams<T>* teacher, EncoderParams<T>& student, DistillConfig config)
      : teacher_(teacher), student_(&student), config_(std::move(config)) {
    config_.validate();
    if (config_.weights.uses_teacher() && !teacher_) throw ConfigError("distill: teacher required by the loss weights");
    if (config_.weights.uses_interchange()) {
      alignment_ = build_alignment(config_.alignment, student.config.num_layers, teacher_->config.num_layers);
    }
    if (teacher_ && (teacher_->config.vocab_size != student.config.vocab_size ||
                     teacher_->config.hidden_dim != student.config.hidden_dim)) {
      throw ConfigError("distill: teacher and student differ in vocabulary or hidden size");
    }
    student.for_each([&](Parameter<T>& p) { params_.push_back(&p); });
  }

  const DistillConfig& config() const noexcept { return config_; }
  const AlignmentMap& alignment() const noexcept { return alignment_; }
  EncoderParams<T>& student() noexcept { return *student_; }
  OptimizerState<T>& optimizer() noexcept { return optim_; }
  const LossWarnings& warnings() const noexcept { return warnings_; }

  /// Zeroes gradients and accumulates those of one window. Returns the window-mean losses.
  LossBreakdown accumulate_window(std::span<const BatchPair> window, Rng& site_rng) {
    if (window.empty()) throw DataError("distill: empty optimizer window");
    student_->zero_grad();
    std::optional<WindowSite> site;
    if (config_.weights.uses_interchange()) site = sample_window_site(alignment_, config_.selection, window, site_rng);
    std::size_t masked = 0;
    for (const auto& p : window) masked += p.base.masked_count();
    if (masked == 0) ++warnings_.empty_masks;
    const double denom = static_cast<double>(std::max<std::size_t>(masked, 1));
    LossBreakdown total;
    for (const auto& p : window) total += micro_step(p, site ? &*site : nullptr, denom);
    return total;
  }

  void apply_update(double lr) {
    const auto& s = config_.schedule;
    optimizer_step(params_, optim_, lr, s.weight_decay, s.beta1, s.beta2, s.eps);
  }

 private:
  LossBreakdown micro_step(const BatchPair& pair, const WindowSite* site, double denom) {
    const LossWeights& w = config_.weights;
    const MaskedBatch& base = pair.base;
    const std::span<const std::uint8_t> flags(base.masked_flags);
    const T tau = static_cast<T>(config_.temperature);

    std::optional<Tensor<T>> teacher_logits, teacher_states;
    if (w.ce > 0.0 || w.cos > 0.0) {
      Tape<T> tt(false);
      const auto tr = forward(tt, *teacher_, base);
      if (w.ce > 0.0) teacher_logits = tr.logits_value();
      if (w.cos > 0.0) teacher_states = tr.final_states().value();
    }
    std::optional<Tape<T>> teacher_tape;
    std::optional<ForwardResult<T>> teacher_ii;
    if (site) {
      teacher_tape.emplace(false);
      teacher_ii = interchange(*teacher_tape, *teacher_, std::span<const NeuronSelector>(site->teacher), pair.source, base);
    }

    Tape<T> tape;
    LossTerms<T> terms;
    const auto plain = forward(tape, *student_, base);
    if (w.mlm > 0.0) terms.mlm = mlm_loss(*plain.logits, base, denom, &warnings_);
    if (teacher_logits) terms.ce = soft_ce_loss(*plain.logits, *teacher_logits, flags, tau, denom, &warnings_);
    if (teacher_states) terms.cos = cosine_loss(plain.final_states(), *teacher_states, flags, denom, &warnings_);
    if (site) {
      const auto si = interchange(tape, *student_, site->student, pair.source, base);
      if (w.diito_ce > 0.0) terms.diito_ce = diito_ce_loss(si, *teacher_ii, flags, tau, denom, &warnings_);
      if (w.diito_cos > 0.0) terms.diito_cos = diito_cos_loss(si, *teacher_ii, flags, denom, &warnings_);
    }
    auto [loss, breakdown] = combine(tape, terms, w);
    if (tape.requires_grad(loss)) tape.backward(loss);
    return breakdown;
  }

  const EncoderParams<T>* teacher_;
  EncoderParams<T>* student_;
  DistillConfig config_;
  AlignmentMap alignment_;
  std::vector<Parameter<T>*> params_;
  OptimizerState<T> optim_;
  LossWarnings warnings_;
};

namespace detail {

inline std::size_t planned_steps(const TrainSchedule& s, std::size_t train_size) {
  if (s.micro_batch > train_size) {
    throw ConfigError("schedule: micro_batch " + std::to_string(s.micro_batch) + " exceeds training set size " +
                      std::to_string(train_size));
  }
  const std::size_t per_epoch = (train_size / s.micro_batch) / s.grad_accum;
  if (per_epoch == 0) {
    throw ConfigError("schedule: training set of " + std::to_string(train_size) + " lines is smaller than one effective batch of " +
                      std::to_string(s.effective_batch()));
  }
  const std::size_t total = per_epoch * s.epochs;
  return s.max_steps ? std::min(total, s.max_steps) : total;
}

template <typename T>
RunStats run_training(DistillTrainer<T>& trainer, const Dataset& data, const TrainHooks<T>& hooks) {
  const DistillConfig& cfg = trainer.config();
  const TrainSchedule& s = cfg.schedule;
  const std::size_t total_steps = planned_steps(s, data.train.size());
  const std::uint64_t calls_before = interchange_counter().load();
  const auto t0 = std::chrono::steady_clock::now();

  PairStream stream(data.train, s.micro_batch, data.seq_len, data.vocab_size, s.seed, s.epochs, data.masking,
                    cfg.weights.uses_interchange());
  Rng site_rng = make_rng(s.seed, 0x517E);
  RunStats stats;
  std::vector<BatchPair> window;
  std::size_t epoch = 0;
  std::optional<double> last_ppl;

  std::optional<std::size_t> finished;
  auto finish_epoch = [&](std::size_t e) {
    if (finished == e) return;
    finished = e;
    if (hooks.on_epoch_end) hooks.on_epoch_end(e, trainer.student());
  };

  while (stats.optimizer_steps < total_steps) {
    auto pair = stream.next();
    if (!pair) break;
    if (pair->epoch != epoch) {
      window.clear();
      epoch = pair->epoch;
    }
    window.push_back(std::move(*pair));
    if (window.size() < s.grad_accum) continue;

    MetricsRecord rec;
    rec.losses = trainer.accumulate_window(window, site_rng);
    const bool epoch_done = window.back().index + 1 + s.grad_accum > stream.batches_per_epoch();
    window.clear();
    ++stats.optimizer_steps;
    trainer.apply_update(scheduled_lr(s, stats.optimizer_steps, total_steps));

    rec.step = stats.optimizer_steps;
    rec.epoch = epoch;
    rec.seed = s.seed;
    rec.config_hash = hooks.config_hash;
    const bool last = stats.optimizer_steps == total_steps;
    if ((s.eval_every && rec.step % s.eval_every == 0) || epoch_done || last) {
      last_ppl = evaluate_perplexity(std::as_const(trainer.student()), data.heldout, data.seq_len, data.eval_seed,
                                     data.masking);
      rec.perplexity = last_ppl;
    }
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (hooks.on_record) hooks.on_record(rec);
    if (epoch_done) finish_epoch(epoch);
  }
  finish_epoch(epoch);
  stats.final_perplexity = last_ppl;
  stats.interchange_calls = interchange_counter().load() - calls_before;
  stats.warnings = trainer.warnings();
  return stats;
}

}  // namespace detail

/// Masked-language-model pretraining of a fresh encoder.
template <typename T>
EncoderParams<T> pretrain_teacher(const EncoderConfig& config, const Dataset& data, const TrainSchedule& schedule,
                                  const TrainHooks<T>& hooks = {}, RunStats* stats = nullptr) {
  config.validate();
  if (config.vocab_size != data.vocab_size) throw ConfigError("pretrain: encoder vocab size differs from the data");
  if (data.seq_len > config.max_seq_len) throw ConfigError("pretrain: seq_len exceeds max_seq_len");
  EncoderParams<T> params = init_encoder<T>(config, schedule.seed);
  DistillConfig dc;
  dc.weights = {1.0, 0.0, 0.0, 0.0, 0.0};
  dc.schedule = schedule;
  DistillTrainer<T> trainer(nullptr, params, dc);
  auto st = detail::run_training(trainer, data, hooks);
  if (stats) *stats = st;
  return params;
}

/// Causal distillation of a student with `student_layers` blocks initialised from the teacher.
template <typename T>
EncoderParams<T> distill(const EncoderParams<T>& teacher, std::size_t student_layers, const DistillConfig& config,
                         const Dataset& data, const TrainHooks<T>& hooks = {}, RunStats* stats = nullptr) {
  config.validate();
  if (teacher.config.vocab_size != data.vocab_size) throw ConfigError("distill: teacher vocab size differs from the data");
  if (config.weights.uses_interchange()) build_alignment(config.alignment, student_layers, teacher.config.num_layers);
  EncoderParams<T> student = init_student_from_teacher(teacher, student_layers);
  DistillTrainer<T> trainer(&teacher, student, config);
  auto st = detail::run_training(trainer, data, hooks);
  if (stats) *stats = st;
  return student;
}

}  // namespace cdistill
