#pragma once

// Loss, optimizers, the training loop, sweep driver, and the
// finite-difference gradient checker.

#ifdef LOPA_SERVER_BUILD
#error "training code must not be compiled into a server build"
#endif

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <future>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "lopa/bundle.hpp"
#include "lopa/bytes.hpp"
#include "lopa/task.hpp"

namespace lopa {

// ---------------------------------------------------------------------------
// Cross-entropy on logits, with its gradient.
// ---------------------------------------------------------------------------
template <typename T>
struct LossGrad {
  T loss;
  MatrixT<T> d_logits;  // softmax(logits) - onehot(label)
};

template <typename T>
LossGrad<T> cross_entropy(const MatrixT<T>& logits, std::size_t label) {
  if (logits.cols() != 1) throw ShapeError("cross_entropy expects a column of logits, got " + logits.shape_str());
  if (label >= logits.rows())
    throw ConfigError("label " + std::to_string(label) + " out of range for " + std::to_string(logits.rows()) +
                      " classes");
  T mx = logits(0, 0);
  for (std::size_t i = 1; i < logits.rows(); ++i) mx = std::max(mx, logits(i, 0));
  T sum = T{0};
  for (std::size_t i = 0; i < logits.rows(); ++i) sum += std::exp(logits(i, 0) - mx);
  const T lse = mx + std::log(sum);

  LossGrad<T> out;
  out.loss = lse - logits(label, 0);
  out.d_logits = MatrixT<T>(logits.rows(), 1);
  for (std::size_t i = 0; i < logits.rows(); ++i)
    out.d_logits(i, 0) = std::exp(logits(i, 0) - lse) - (i == label ? T{1} : T{0});
  return out;
}

// ---------------------------------------------------------------------------
// Optimizers.
// ---------------------------------------------------------------------------
enum class OptKind { kSgd, kAdam };

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 32;
  double lr = 3e-3;
  OptKind optimizer = OptKind::kAdam;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  std::string task = "mixed";
  std::size_t train_size = 1024;
  std::size_t test_size = 256;
  std::size_t seq_len = 12;
  BundleConfig bundle;

  void validate() const {
    if (lr < 0) throw ConfigError("learning rate must be nonnegative");
    if (batch_size == 0) throw ConfigError("batch size must be positive");
    if (bundle.method != Method::kNone && bundle.m < 1)
      throw ConfigError("prompt methods need prompt length m >= 1");
  }
};

class Optimizer {
 public:
  Optimizer(const TrainConfig& cfg, const std::vector<ParamRef<double>>& refs) : cfg_(cfg) {
    if (cfg.optimizer == OptKind::kAdam) {
      for (const auto& ref : refs) {
        m_.emplace_back(ref.value->rows(), ref.value->cols());
        v_.emplace_back(ref.value->rows(), ref.value->cols());
      }
    }
  }

  void step(std::vector<ParamRef<double>>& refs, const std::vector<Matrix>& grads) {
    ++t_;
    if (cfg_.optimizer == OptKind::kSgd) {
      for (std::size_t p = 0; p < refs.size(); ++p) {
        auto& w = refs[p].value->data();
        const auto& g = grads[p].data();
        for (std::size_t i = 0; i < w.size(); ++i) w[i] -= cfg_.lr * g[i];
      }
      return;
    }
    const double b1 = cfg_.adam_beta1, b2 = cfg_.adam_beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t p = 0; p < refs.size(); ++p) {
      auto& w = refs[p].value->data();
      const auto& g = grads[p].data();
      auto& m = m_[p].data();
      auto& v = v_[p].data();
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        w[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.adam_eps);
      }
    }
  }

 private:
  TrainConfig cfg_;
  std::vector<Matrix> m_, v_;
  std::uint64_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Reports.
// ---------------------------------------------------------------------------
struct RunReport {
  std::vector<double> epoch_loss;
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  std::size_t composer_params = 0;
  double wall_ms = 0.0;
  std::uint64_t seed = 0;
  std::string frozen_digest_before;
  std::string frozen_digest_after;
  std::string config_json;  // provenance echo, attached by the caller

  /// Every deterministic field, byte for byte; wall-clock excluded because
  /// it is the one field a reproduction cannot reproduce.
  std::vector<std::uint8_t> deterministic_bytes() const {
    ByteWriter w;
    w.u64(seed);
    w.u64(composer_params);
    w.u64(std::bit_cast<std::uint64_t>(train_accuracy));
    w.u64(std::bit_cast<std::uint64_t>(test_accuracy));
    w.u32(static_cast<std::uint32_t>(epoch_loss.size()));
    for (double l : epoch_loss) w.u64(std::bit_cast<std::uint64_t>(l));
    w.str(frozen_digest_before);
    w.str(frozen_digest_after);
    w.str(config_json);
    return w.take();
  }

  /// One row per epoch: "epoch,train_loss".
  std::string epochs_csv() const {
    std::ostringstream out;
    out << "epoch,train_loss\n";
    out.precision(17);
    for (std::size_t e = 0; e < epoch_loss.size(); ++e) out << e << "," << epoch_loss[e] << "\n";
    return out.str();
  }
};

// ---------------------------------------------------------------------------
// Evaluation and training.
// ---------------------------------------------------------------------------
template <typename T>
std::size_t predict(const ModelBundleT<T>& bundle, const TokenSeq& tokens) {
  const MatrixT<T> logits = forward(bundle, tokens);
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.rows(); ++i)
    if (logits(i, 0) > logits(best, 0)) best = i;
  return best;
}

template <typename T>
double evaluate_accuracy(const ModelBundleT<T>& bundle, const Task& task, Split split) {
  std::size_t correct = 0;
  const std::size_t n = task.size(split);
  for (std::size_t i = 0; i < n; ++i) {
    const Instance inst = task.sample(split, i);
    if (predict(bundle, inst.tokens) == inst.label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

namespace detail {
inline void check_finite_params(const std::vector<ParamRef<double>>& refs, std::size_t step) {
  for (const auto& ref : refs) {
    if (!ref.value->all_finite())
      throw NumericError("training diverged at step " + std::to_string(step) + ": parameter " + ref.name +
                         " is not finite");
  }
}
}  // namespace detail

/// Full training run. Deterministic given (cfg, seed); the frozen backbone
/// digest is verified unchanged; non-finite losses or parameters abort with
/// the step index and the offending parameter.
inline RunReport train(ModelBundle& bundle, const Task& task, const TrainConfig& cfg) {
  cfg.validate();
  StopWatch watch;
  RunReport report;
  report.seed = cfg.seed;
  report.composer_params = param_count(bundle.cfg.method, bundle.cfg.count_dims());

  // The registry must account for exactly the composer scalars the method
  // advertises.
  const std::size_t instrumented = composer_scalar_count(bundle);
  if (instrumented != report.composer_params)
    throw NumericError("composer registry holds " + std::to_string(instrumented) + " scalars but param_count says " +
                       std::to_string(report.composer_params));

  report.frozen_digest_before = frozen_digest(bundle.fm);

  auto refs = collect_trainables(bundle);
  Optimizer opt(cfg, refs);

  std::vector<std::size_t> order(task.train_size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    // Deterministic Fisher-Yates reshuffle per epoch.
    Rng shuffle_rng(Rng::mix(cfg.seed, 0x5000 + epoch));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.below(i)]);

    // Per-sample losses keyed by dataset index, reduced in index order, so
    // the epoch mean does not depend on the shuffle.
    std::vector<double> sample_loss(order.size(), 0.0);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      auto grads = zero_grads(refs);
      for (std::size_t i = start; i < end; ++i) {
        const Instance inst = task.sample(Split::kTrain, order[i]);
        BundleStepCacheT<double> cache;
        const Matrix logits = forward(bundle, inst.tokens, nullptr, &cache);
        const auto lg = cross_entropy(logits, inst.label);
        if (!std::isfinite(lg.loss))
          throw NumericError("training diverged at step " + std::to_string(step) + ": loss is not finite");
        sample_loss[order[i]] = lg.loss;
        backward(bundle, cache, lg.d_logits, grads);
      }
      const double inv = 1.0 / static_cast<double>(end - start);
      for (auto& g : grads)
        for (auto& x : g.data()) x *= inv;
      if (cfg.lr != 0.0) {
        opt.step(refs, grads);
        detail::check_finite_params(refs, step);
      }
      ++step;
    }
    double loss_sum = 0.0;
    for (double l : sample_loss) loss_sum += l;
    report.epoch_loss.push_back(loss_sum / static_cast<double>(order.size()));
  }

  report.train_accuracy = evaluate_accuracy(bundle, task, Split::kTrain);
  report.test_accuracy = evaluate_accuracy(bundle, task, Split::kTest);

  report.frozen_digest_after = frozen_digest(bundle.fm);
  if (report.frozen_digest_after != report.frozen_digest_before)
    throw NumericError("frozen backbone digest changed during training");

  report.wall_ms = watch.elapsed_ms();
  return report;
}

/// Convenience: build the bundle and the task from the config, then train.
inline std::pair<ModelBundle, RunReport> train_from_config(const TrainConfig& cfg) {
  cfg.validate();
  ModelBundle bundle = make_bundle<double>(cfg.bundle, cfg.seed);
  const Task task = make_task(cfg.task, Rng::mix(cfg.seed, 0x7A5C), cfg.train_size, cfg.test_size, cfg.seq_len);
  RunReport report = train(bundle, task, cfg);
  return {std::move(bundle), std::move(report)};
}

// ---------------------------------------------------------------------------
// Gradient check: every trainable scalar against central finite differences
// of the cross-entropy loss. Error convention: |a - fd| / max(|a|, |fd|,
// 1e-4), i.e. relative above the 1e-4 floor and absolute (at tol * 1e-4)
// below it, keeping honest margin over f64 finite-difference noise.
// ---------------------------------------------------------------------------
struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t samples = 0;
  std::vector<GradCheckEntry> per_param;
};

inline GradCheckReport gradcheck(ModelBundle& bundle, const Task& task, std::size_t samples,
                                 double fd_step = 1e-5) {
  GradCheckReport report;
  report.samples = samples;
  auto refs = collect_trainables(bundle);
  report.per_param.resize(refs.size());
  for (std::size_t p = 0; p < refs.size(); ++p) report.per_param[p].name = refs[p].name;

  for (std::size_t s = 0; s < samples; ++s) {
    const Instance inst = task.sample(Split::kTrain, s);

    auto grads = zero_grads(refs);
    BundleStepCacheT<double> cache;
    const Matrix logits = forward(bundle, inst.tokens, nullptr, &cache);
    backward(bundle, cache, cross_entropy(logits, inst.label).d_logits, grads);

    const auto loss_at = [&] { return cross_entropy(forward(bundle, inst.tokens), inst.label).loss; };
    for (std::size_t p = 0; p < refs.size(); ++p) {
      Matrix& param = *refs[p].value;
      for (std::size_t i = 0; i < param.size(); ++i) {
        const double saved = param.data()[i];
        param.data()[i] = saved + fd_step;
        const double up = loss_at();
        param.data()[i] = saved - fd_step;
        const double down = loss_at();
        param.data()[i] = saved;
        const double fd = (up - down) / (2.0 * fd_step);
        const double a = grads[p].data()[i];
        const double err = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-4});
        report.per_param[p].max_rel_error = std::max(report.per_param[p].max_rel_error, err);
        if (err > report.max_rel_error) {
          report.max_rel_error = err;
          report.worst_param = refs[p].name;
        }
      }
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Sweeps. Cells are independent (own bundle, own stream: base seed + index)
// and may run concurrently.
// ---------------------------------------------------------------------------
struct SweepSpec {
  std::vector<std::size_t> m_values;
  std::vector<std::size_t> r_values;
  std::vector<Combine> combine_values;
};

struct AblateCell {
  std::size_t m = 0;
  std::size_t r = 0;
  Combine combine = Combine::kGate;
  RunReport report;
};

inline std::vector<AblateCell> ablate(const TrainConfig& base, const SweepSpec& sweep, bool parallel = true) {
  std::vector<std::size_t> ms = sweep.m_values.empty() ? std::vector<std::size_t>{base.bundle.m} : sweep.m_values;
  std::vector<std::size_t> rs = sweep.r_values.empty() ? std::vector<std::size_t>{base.bundle.r} : sweep.r_values;
  std::vector<Combine> combines =
      sweep.combine_values.empty() ? std::vector<Combine>{base.bundle.combine} : sweep.combine_values;

  std::vector<AblateCell> cells;
  for (std::size_t m : ms)
    for (std::size_t r : rs)
      for (Combine c : combines) cells.push_back(AblateCell{m, r, c, {}});

  auto run_cell = [&](std::size_t index) {
    TrainConfig cfg = base;
    cfg.bundle.m = cells[index].m;
    cfg.bundle.r = cells[index].r;
    cfg.bundle.combine = cells[index].combine;
    cfg.seed = base.seed + index;  // own stream per cell
    cells[index].report = train_from_config(cfg).second;
  };

  if (parallel) {
    std::vector<std::future<void>> futures;
    for (std::size_t i = 0; i < cells.size(); ++i)
      futures.push_back(std::async(std::launch::async, run_cell, i));
    for (auto& f : futures) f.get();
  } else {
    for (std::size_t i = 0; i < cells.size(); ++i) run_cell(i);
  }
  return cells;
}

inline std::string ablate_csv(const TrainConfig& base, const std::vector<AblateCell>& cells) {
  std::ostringstream out;
  out.precision(17);
  out << "method,combine,m,r,h,seed,epochs,lr,train_acc,test_acc,composer_params,final_loss,wall_ms\n";
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const auto& c = cells[i];
    out << method_name(base.bundle.method) << "," << combine_name(c.combine) << "," << c.m << "," << c.r << ","
        << base.bundle.h << "," << base.seed + i << "," << base.epochs << "," << base.lr << ","
        << c.report.train_accuracy << "," << c.report.test_accuracy << "," << c.report.composer_params << ","
        << (c.report.epoch_loss.empty() ? 0.0 : c.report.epoch_loss.back()) << "," << c.report.wall_ms << "\n";
  }
  return out.str();
}

}  // namespace lopa
