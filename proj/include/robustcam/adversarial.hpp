#pragma once

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "robustcam/data.hpp"
#include "robustcam/errors.hpp"
#include "robustcam/model.hpp"
#include "robustcam/objective.hpp"
#include "robustcam/random.hpp"
#include "robustcam/tape.hpp"

namespace robustcam {

// l-infinity FGSM budget, in pixel units of images scaled to [0,1].
struct AttackConfig {
  double epsilon = 0.005;
  bool clamp_to_valid_range = true;

  void validate() const {
    if (!(epsilon >= 0.0)) throw ConfigError("attack: epsilon must be >= 0");
    if (epsilon > 1.0) throw ConfigError("attack: epsilon must be <= 1");
  }
};

struct RobustTrainConfig {
  double lr = 0.01;
  double momentum = 0.9;
  std::size_t batch_size = 32;
  double perturb_fraction = 0.5;
  bool warm_start = true;
  std::size_t patience = 5;
  std::size_t max_epochs = 40;  // per phase
  std::uint64_t seed = 0;
  BetaPolicy beta;

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("train: lr must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train: momentum must be in [0,1)");
    if (batch_size == 0) throw ConfigError("train: batch_size must be >= 1");
    if (!(perturb_fraction >= 0.0 && perturb_fraction <= 1.0)) {
      throw ConfigError("train: perturb_fraction must be in [0,1]");
    }
    if (patience == 0) throw ConfigError("train: patience must be >= 1");
    if (max_epochs == 0) throw ConfigError("train: max_epochs must be >= 1");
    beta.validate();
  }
};

// Gradient of the weighted loss with respect to the input batch, with the
// model held fixed. Optionally reports the per-sample clean losses.
template <typename T>
BasicTensor<T> loss_input_gradient(const BasicCamModel<T>& model, const BasicTensor<T>& x,
                                   const LabelBatch& labels, const Beta& beta,
                                   std::vector<double>* per_sample = nullptr) {
  Tape<T> tape;
  std::vector<Var<T>> params;
  for (const auto& p : model.parameters()) params.push_back(tape.constant(p));
  const Var<T> input = tape.variable(x);
  const auto out = model.forward(params, input);
  const Var<T> loss = weighted_bce(out.probs, labels, beta);
  if (per_sample) *per_sample = weighted_bce_per_sample(out.probs.value(), labels, beta);
  return tape.gradient(loss, input);
}

template <typename T>
T sign_of(T v) {
  return v > T{} ? T{1} : (v < T{} ? T{-1} : T{});
}

// x + eps * sign(grad), optionally clipped to [0,1]. Rounding (of eps to T
// and of the sum) can land a value just outside the budget; such values are
// pulled back toward x ulp by ulp so the l-infinity bound holds exactly.
template <typename T>
BasicTensor<T> fgsm_step(const BasicTensor<T>& x, const BasicTensor<T>& grad, const AttackConfig& attack) {
  attack.validate();
  x.require_same_shape(grad, "fgsm_step");
  if (attack.epsilon == 0.0) return x;
  const T eps = static_cast<T>(attack.epsilon);
  BasicTensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    T v = x[i] + eps * sign_of(grad[i]);
    while (std::abs(static_cast<double>(v) - static_cast<double>(x[i])) > attack.epsilon) {
      v = std::nextafter(v, x[i]);
    }
    if (attack.clamp_to_valid_range) v = std::clamp(v, T{0}, T{1});
    out[i] = v;
  }
  return out;
}

template <typename T>
BasicTensor<T> fgsm_perturb(const BasicCamModel<T>& model, const BasicTensor<T>& x,
                            const LabelBatch& labels, const AttackConfig& attack, const Beta& beta) {
  attack.validate();
  if (attack.epsilon == 0.0) return x;
  return fgsm_step(x, loss_input_gradient(model, x, labels, beta), attack);
}

// Heavy-ball SGD: v <- momentum * v + g; p <- p - lr * v.
template <typename T>
class SgdMomentum {
 public:
  SgdMomentum(double lr, double momentum) : lr_(static_cast<T>(lr)), momentum_(static_cast<T>(momentum)) {}

  void step(std::span<BasicTensor<T>> params, std::span<const BasicTensor<T>> grads) {
    if (velocity_.empty()) {
      for (const auto& p : params) velocity_.emplace_back(p.shape(), T{});
    }
    if (params.size() != grads.size() || params.size() != velocity_.size()) {
      throw ShapeError("sgd: parameter/gradient count mismatch");
    }
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto& p = params[k];
      auto& v = velocity_[k];
      const auto& g = grads[k];
      p.require_same_shape(g, "sgd");
      for (std::size_t i = 0; i < p.size(); ++i) {
        v[i] = momentum_ * v[i] + g[i];
        p[i] -= lr_ * v[i];
      }
    }
  }

 private:
  T lr_;
  T momentum_;
  std::vector<BasicTensor<T>> velocity_;
};

struct StepStats {
  double clean_loss = 0.0;      // whole batch, unperturbed
  double adv_loss = std::numeric_limits<double>::quiet_NaN();        // perturbed rows after attack
  double adv_clean_loss = std::numeric_limits<double>::quiet_NaN();  // same rows before attack
  double mixed_loss = 0.0;      // the loss that was minimized
  std::size_t perturbed = 0;
};

namespace detail {

inline double mean_of(std::span<const double> v, std::span<const std::size_t> rows) {
  double acc = 0.0;
  for (auto r : rows) acc += v[r];
  return acc / static_cast<double>(rows.size());
}

// One forward/backward on x and an SGD update. Returns per-sample losses.
template <typename T>
std::vector<double> descend(BasicCamModel<T>& model, SgdMomentum<T>& opt, const BasicTensor<T>& x,
                            const LabelBatch& labels, const Beta& beta) {
  Tape<T> tape;
  const auto params = model.bind(tape);
  const auto out = model.forward(params, tape.constant(x));
  const Var<T> loss = weighted_bce(out.probs, labels, beta);
  auto per_sample = weighted_bce_per_sample(out.probs.value(), labels, beta);
  const auto grads = tape.backward(loss, params);
  opt.step(model.parameters(), grads);
  return per_sample;
}

}  // namespace detail

template <typename T>
StepStats train_step(BasicCamModel<T>& model, SgdMomentum<T>& opt, const BasicTensor<T>& x,
                     const LabelBatch& labels, const RobustTrainConfig& cfg) {
  if (labels.rows() == 0) throw DataError("train_step: empty batch");
  const Beta beta = compute_beta(labels, cfg.beta);
  const auto per_sample = detail::descend(model, opt, x, labels, beta);
  StepStats stats;
  double acc = 0.0;
  for (double v : per_sample) acc += v;
  stats.clean_loss = stats.mixed_loss = acc / static_cast<double>(per_sample.size());
  return stats;
}

// Rows chosen for perturbation: floor(fraction * N) of them, by seeded
// shuffle, returned in ascending order.
inline std::vector<std::size_t> select_perturbed_rows(std::size_t n, double fraction, std::uint64_t seed) {
  const auto k = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n)));
  if (k == 0) return {};
  Rng rng(derive_seed(seed, 0x61647673ULL));
  auto order = rng.permutation(n);
  order.resize(k);
  std::sort(order.begin(), order.end());
  return order;
}

// One step of the min-max objective: FGSM replaces the selected rows, then the
// weighted loss on the mixed batch is minimized. beta comes from the labels,
// which perturbation never changes.
template <typename T>
StepStats robust_train_step(BasicCamModel<T>& model, SgdMomentum<T>& opt, const BasicTensor<T>& x,
                            const LabelBatch& labels, const RobustTrainConfig& cfg,
                            const AttackConfig& attack, std::uint64_t selection_seed) {
  if (labels.rows() == 0) throw DataError("robust_train_step: empty batch");
  attack.validate();
  const auto rows = select_perturbed_rows(labels.rows(), cfg.perturb_fraction, selection_seed);
  if (rows.empty()) return train_step(model, opt, x, labels, cfg);

  const Beta beta = compute_beta(labels, cfg.beta);
  const std::size_t stride = x.size() / labels.rows();
  BasicTensor<T> sub(Shape{rows.size(), x.dim(1), x.dim(2), x.dim(3)});
  for (std::size_t k = 0; k < rows.size(); ++k) {
    std::copy_n(x.data().begin() + rows[k] * stride, stride, sub.data().begin() + k * stride);
  }
  const LabelBatch sub_labels = labels.select(rows);
  std::vector<double> sub_clean;
  const auto grad = loss_input_gradient(model, sub, sub_labels, beta, &sub_clean);
  const auto adv = fgsm_step(sub, grad, attack);

  BasicTensor<T> mixed = x;
  for (std::size_t k = 0; k < rows.size(); ++k) {
    std::copy_n(adv.data().begin() + k * stride, stride, mixed.data().begin() + rows[k] * stride);
  }
  const auto per_sample = detail::descend(model, opt, mixed, labels, beta);

  StepStats stats;
  stats.perturbed = rows.size();
  std::vector<double> clean = per_sample;
  for (std::size_t k = 0; k < rows.size(); ++k) clean[rows[k]] = sub_clean[k];
  double mixed_acc = 0.0, clean_acc = 0.0;
  for (std::size_t i = 0; i < per_sample.size(); ++i) {
    mixed_acc += per_sample[i];
    clean_acc += clean[i];
  }
  stats.mixed_loss = mixed_acc / static_cast<double>(per_sample.size());
  stats.clean_loss = clean_acc / static_cast<double>(per_sample.size());
  stats.adv_loss = detail::mean_of(per_sample, rows);
  double sub_acc = 0.0;
  for (double v : sub_clean) sub_acc += v;
  stats.adv_clean_loss = sub_acc / static_cast<double>(sub_clean.size());
  return stats;
}

// Mean per-sample weighted loss over a split, evaluated in fixed-order chunks
// of batch_size with beta recomputed per chunk.
template <typename T>
double evaluate_loss(const BasicCamModel<T>& model, const Dataset& ds, std::span<const std::size_t> indices,
                     std::size_t batch_size, const BetaPolicy& policy) {
  if (indices.empty()) throw DataError("evaluate_loss: empty split");
  double total = 0.0;
  for (std::size_t i = 0; i < indices.size(); i += batch_size) {
    const auto chunk = indices.subspan(i, std::min(batch_size, indices.size() - i));
    const Batch b = make_batch(ds, chunk);
    const auto out = model.predict(b.images.template cast<T>());
    for (double v : weighted_bce_per_sample(out.probs, b.labels, compute_beta(b.labels, policy))) total += v;
  }
  return total / static_cast<double>(indices.size());
}

struct EpochRecord {
  std::size_t epoch = 0;  // global, across phases
  int phase = 1;          // 1 clean warm start, 2 robust
  double clean_loss = 0.0;
  std::optional<double> adv_loss;
  double val_loss = 0.0;
  double wallclock_seconds = 0.0;
};

struct TrainingLog {
  std::vector<EpochRecord> epochs;
  std::vector<double> initial_val_loss;  // one entry per phase that ran
  std::size_t best_epoch = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();

  void write_csv(std::ostream& out) const {
    out << "epoch,clean_loss,adv_loss,val_loss,wallclock_seconds\n";
    char buf[256];
    for (const auto& e : epochs) {
      std::string adv;
      if (e.adv_loss) {
        char a[64];
        std::snprintf(a, sizeof a, "%.9g", *e.adv_loss);
        adv = a;
      }
      std::snprintf(buf, sizeof buf, "%zu,%.9g,%s,%.9g,%.3f\n", e.epoch, e.clean_loss, adv.c_str(),
                    e.val_loss, e.wallclock_seconds);
      out << buf;
    }
  }
};

struct TrainResult {
  CamModel model;
  TrainingLog log;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

inline bool robust_phase_active(const RobustTrainConfig& cfg, const AttackConfig& attack) {
  return attack.epsilon > 0.0 && std::floor(cfg.perturb_fraction * double(cfg.batch_size)) >= 1.0;
}

namespace detail {

inline CamModel run_phase(CamModel model, const Dataset& ds, const DatasetSplits& splits,
                          const RobustTrainConfig& cfg, const AttackConfig& attack, bool robust,
                          int phase, TrainingLog& log, std::size_t& global_epoch,
                          std::chrono::steady_clock::time_point start, const EpochCallback& on_epoch) {
  SgdMomentum<float> opt(cfg.lr, cfg.momentum);
  log.initial_val_loss.push_back(evaluate_loss(model, ds, splits.validation, cfg.batch_size, cfg.beta));
  std::optional<CamModel> best;
  double best_val = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;
  for (std::size_t e = 0; e < cfg.max_epochs; ++e, ++global_epoch) {
    const auto batches = make_batches(splits.train, cfg.batch_size, cfg.seed, global_epoch);
    double clean = 0.0, adv = 0.0;
    std::size_t clean_n = 0, adv_n = 0;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      const Batch batch = make_batch(ds, batches[b]);
      const StepStats s =
          robust ? robust_train_step(model, opt, batch.images, batch.labels, cfg, attack,
                                     derive_seed(cfg.seed, global_epoch, b))
                 : train_step(model, opt, batch.images, batch.labels, cfg);
      if (!std::isfinite(s.mixed_loss)) {
        throw DivergenceError("training loss became non-finite in epoch " + std::to_string(global_epoch) +
                              " batch " + std::to_string(b));
      }
      clean += s.clean_loss * double(batch.labels.rows());
      clean_n += batch.labels.rows();
      if (s.perturbed) {
        adv += s.adv_loss * double(s.perturbed);
        adv_n += s.perturbed;
      }
    }
    EpochRecord rec;
    rec.epoch = global_epoch;
    rec.phase = phase;
    rec.clean_loss = clean / double(clean_n);
    if (adv_n) rec.adv_loss = adv / double(adv_n);
    rec.val_loss = evaluate_loss(model, ds, splits.validation, cfg.batch_size, cfg.beta);
    rec.wallclock_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    log.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (!std::isfinite(rec.val_loss)) {
      throw DivergenceError("validation loss became non-finite in epoch " + std::to_string(global_epoch));
    }
    if (rec.val_loss < best_val) {
      best_val = rec.val_loss;
      best = model;
      log.best_epoch = global_epoch;
      log.best_val_loss = best_val;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      ++global_epoch;
      break;
    }
  }
  return std::move(*best);
}

}  // namespace detail

// Phase 1 (when warm_start): clean training with early stopping on the
// validation loss. Phase 2: min-max training from the best phase-1 weights
// under the same stopping rule. Each phase restarts the momentum buffer and
// the returned model is the best checkpoint of the last phase. A degenerate
// attack (epsilon 0 or no perturbed rows) makes phase 2 identical to clean
// training, so it is skipped.
inline TrainResult train(CamModel model, const Dataset& ds, const DatasetSplits& splits,
                         const RobustTrainConfig& cfg, const AttackConfig& attack,
                         const EpochCallback& on_epoch = {}) {
  cfg.validate();
  attack.validate();
  if (splits.train.empty() || splits.validation.empty()) throw DataError("train: empty train or validation split");
  const auto start = std::chrono::steady_clock::now();
  TrainingLog log;
  std::size_t global_epoch = 0;
  const bool robust = robust_phase_active(cfg, attack);
  if (cfg.warm_start || !robust) {
    model = detail::run_phase(std::move(model), ds, splits, cfg, attack, false, 1, log, global_epoch, start,
                              on_epoch);
  }
  if (robust) {
    model = detail::run_phase(std::move(model), ds, splits, cfg, attack, true, 2, log, global_epoch, start,
                              on_epoch);
  }
  return TrainResult{std::move(model), std::move(log)};
}

}  // namespace robustcam
