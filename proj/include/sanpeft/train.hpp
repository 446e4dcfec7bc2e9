// Copyright 2026 The sanpeft Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef SANPEFT_TRAIN_HPP
#define SANPEFT_TRAIN_HPP

#include <sanpeft/adapters.hpp>
#include <sanpeft/config.hpp>
#include <sanpeft/data.hpp>
#include <sanpeft/gradcheck.hpp>
#include <sanpeft/model.hpp>
#include <sanpeft/optim.hpp>
#include <sanpeft/reparam.hpp>
#include <sanpeft/serialize.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <mutex>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

namespace sanpeft {

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;

  bool operator==(const EvalResult&) const = default;
};

/// Index of the largest value in each row; exact ties go to the lowest index.
template <std::floating_point T>
std::vector<std::size_t> argmax_rows(const NDArray<T>& logits) {
  std::vector<std::size_t> out(logits.rows());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < logits.cols(); ++c) {
      if (logits(r, c) > logits(r, best)) best = c;
    }
    out[r] = best;
  }
  return out;
}

template <std::floating_point T>
EvalResult evaluate(const ModelState<T>& model, const AdapterSet<T>* adapters, const NDArray<T>& x,
                    const std::vector<std::size_t>& y) {
  if (y.empty()) throw DataError("cannot evaluate on an empty split");
  const Tensor<T> logits = adapted_forward<T>(model, adapters, Tensor<T>(x));
  const auto pred = argmax_rows(logits.value());
  std::size_t hits = 0;
  for (std::size_t i = 0; i < y.size(); ++i) hits += pred[i] == y[i];
  return {static_cast<double>(cross_entropy(logits, std::span<const std::size_t>(y)).item()),
          static_cast<double>(hits) / static_cast<double>(y.size())};
}

struct EpochMetrics {
  std::size_t epoch = 0;
  double lr = 0.0;  // rate of the epoch's last step
  double train_loss = 0.0;
  EvalResult train;
  EvalResult eval;
  std::optional<double> gamma_deviation;
};

struct RunMetrics {
  std::string method;
  std::string dataset;
  ParamCount params;
  std::size_t adapter_params = 0;
  EvalResult base_train, base_eval;  // frozen base without adapters
  EvalResult init_train, init_eval;  // adapted model before the first step (epoch 0)
  std::vector<EpochMetrics> epochs;
  std::vector<double> gamma_trajectory;  // Σ‖γ−1‖², entry 0 at initialization
  std::string base_hash_before, base_hash_after;
  bool frozen_base_intact = true;
  double wall_clock_seconds = 0.0;  // not part of the metrics document

  [[nodiscard]] double final_eval_accuracy() const { return epochs.empty() ? init_eval.accuracy : epochs.back().eval.accuracy; }
  [[nodiscard]] double final_train_accuracy() const {
    return epochs.empty() ? init_train.accuracy : epochs.back().train.accuracy;
  }
};

template <std::floating_point T>
struct RunResult {
  TrainConfig config;
  RunMetrics metrics;
  ModelState<T> model;
  AdapterSet<T> adapters;
};

namespace detail {

template <std::floating_point T>
NDArray<T> gather_rows(const NDArray<T>& x, std::span<const std::size_t> rows) {
  NDArray<T> out(Shape{rows.size(), x.cols()});
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t c = 0; c < x.cols(); ++c) out(i, c) = x(rows[i], c);
  return out;
}

// Shared minibatch loop. `step_fn` runs after backward with the scheduled rate.
template <std::floating_point T, class LossFn, class StepFn, class EpochFn>
void run_epochs(const NDArray<T>& x, const std::vector<std::size_t>& y, std::size_t epochs, std::size_t batch_size,
                double base_lr, double warmup, std::uint64_t seed, LossFn&& loss_fn, StepFn&& step_fn,
                EpochFn&& epoch_fn) {
  const std::size_t n = y.size();
  if (n == 0) throw DataError("empty training split");
  const std::size_t batch = batch_size == 0 || batch_size >= n ? n : batch_size;
  const std::size_t per_epoch = (n + batch - 1) / batch;
  const double total = static_cast<double>(epochs * per_epoch);
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(n);
  std::size_t step = 0;
  for (std::size_t e = 1; e <= epochs; ++e) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    if (batch < n) std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0, lr = 0.0;
    for (std::size_t start = 0; start < n; start += batch) {
      const std::size_t len = std::min(batch, n - start);
      const std::span<const std::size_t> rows(order.data() + start, len);
      std::vector<std::size_t> yb;
      for (auto r : rows) yb.push_back(y[r]);
      const Tensor<T> xb(batch == n ? x : gather_rows(x, rows));
      Tape<T> tape;
      Tensor<T> data_loss, objective;
      try {
        {
          auto rec = tape.record();
          std::tie(data_loss, objective) = loss_fn(xb, yb);
        }
        backward(objective);
        // Offset by one so neither the first nor the last step has rate 0.
        lr = lr_at(static_cast<double>(step + 1), total + 1, base_lr, warmup);
        step_fn(lr);
      } catch (const NumericError& err) {
        throw NumericError("training diverged at epoch " + std::to_string(e) + ", step " + std::to_string(step) +
                           ": " + err.what());
      }
      loss_sum += static_cast<double>(data_loss.item()) * static_cast<double>(len);
      ++step;
    }
    epoch_fn(e, loss_sum / static_cast<double>(n), lr);
  }
}

inline std::vector<std::string> frozen_names(const ModelSpec& spec, const MethodSpec& method) {
  ModelState<double> probe(spec);
  configure_trainable(probe, method);
  std::vector<std::string> out;
  for (const auto& [name, t] : probe.params()) {
    if (!t.requires_grad()) out.push_back(name);
  }
  return out;
}

inline void check_compatible(const ModelSpec& spec, const DatasetHandle& d) {
  if (spec.input_dim() != d.features()) {
    throw ConfigError("'model' expects " + std::to_string(spec.input_dim()) + " input features, dataset has " +
                      std::to_string(d.features()));
  }
  if (spec.num_classes() != d.classes) {
    throw ConfigError("'model' has " + std::to_string(spec.num_classes()) + " outputs, dataset has " +
                      std::to_string(d.classes) + " classes");
  }
}

}  // namespace detail

/// Supervised training of every base parameter, used to produce the frozen
/// base before adaptation.
template <std::floating_point T>
void pretrain(ModelState<T>& model, const DatasetHandle& data, const PretrainConfig& cfg, std::uint64_t seed) {
  for (auto& [name, t] : model.params()) t.set_requires_grad(true);
  Optimizer<T> opt(OptimizerKind::adam, model.trainable());
  const NDArray<T> x = data.train_x.template cast<T>();
  detail::run_epochs<T>(
      x, data.train_y, cfg.epochs, cfg.batch_size, cfg.lr, 0.1, seed,
      [&](const Tensor<T>& xb, const std::vector<std::size_t>& yb) {
        Tensor<T> loss = cross_entropy(forward(model, xb), std::span<const std::size_t>(yb));
        return std::pair{loss, loss};
      },
      [&](double lr) {
        opt.step(lr);
        opt.zero_grad();
      },
      [](std::size_t, double, double) {});
  model.freeze_all();
}

/// Builds (and optionally pretrains) the frozen base for `config`.
template <std::floating_point T>
ModelState<T> build_base(const TrainConfig& config) {
  ModelState<T> base = init_model<T>(config.model, config.seed);
  if (config.pretrain.enabled) {
    const DatasetHandle source = build_dataset(config, false, 0x70726574ULL);
    detail::check_compatible(config.model, source);
    pretrain(base, source, config.pretrain, config.seed);
  }
  base.freeze_all();
  return base;
}

/// One deterministic fine-tuning run.
template <std::floating_point T>
RunResult<T> train(const TrainConfig& config, const DatasetHandle& data) {
  const auto started = std::chrono::steady_clock::now();
  detail::check_compatible(config.model, data);
  if (data.eval_y.empty()) throw ConfigError("'data.eval_fraction' leaves no evaluation samples");

  RunResult<T> run{config, {}, build_base<T>(config), {}};
  auto& model = run.model;
  auto& m = run.metrics;
  m.method = config.method.label();
  m.dataset = data.descriptor;

  const NDArray<T> train_x = data.train_x.template cast<T>();
  const NDArray<T> eval_x = data.eval_x.template cast<T>();
  m.base_train = evaluate<T>(model, nullptr, train_x, data.train_y);
  m.base_eval = evaluate<T>(model, nullptr, eval_x, data.eval_y);

  configure_trainable(model, config.method);
  run.adapters = AdapterSet<T>::create(config.model, config.method, config.seed);
  auto& adapters = run.adapters;
  adapters.validate(config.model);

  m.params = count_params(config.model, config.method);
  m.adapter_params = adapters.parameter_count();
  std::size_t live = m.adapter_params;
  for (const auto& t : model.trainable()) live += t.numel();
  if (live != m.params.trainable) {
    throw ContractError("trainable tensors hold " + std::to_string(live) + " values but count_params reports " +
                        std::to_string(m.params.trainable));
  }

  const auto frozen = detail::frozen_names(config.model, config.method);
  m.base_hash_before = frozen.empty() ? "none-frozen" : hex64(model.fingerprint(frozen));

  m.init_train = evaluate<T>(model, &adapters, train_x, data.train_y);
  m.init_eval = evaluate<T>(model, &adapters, eval_x, data.eval_y);
  const auto gammas = adapters.gammas();
  if (!gammas.empty()) m.gamma_trajectory.push_back(gamma_deviation(gammas));

  std::vector<Tensor<T>> params = model.trainable();
  std::vector<bool> decay(params.size(), false);
  for (const auto& [name, t] : adapters.named_parameters()) {
    params.push_back(t);
    decay.push_back(name.starts_with("lora.") || name.starts_with("vpt."));
  }
  Optimizer<T> opt(config.optimizer, params, decay);
  const T lambda = static_cast<T>(config.method.lambda);

  detail::run_epochs<T>(
      train_x, data.train_y, config.epochs, config.batch_size, config.base_lr(), config.warmup, config.seed,
      [&](const Tensor<T>& xb, const std::vector<std::size_t>& yb) {
        Tensor<T> loss = cross_entropy(adapted_forward<T>(model, &adapters, xb), std::span<const std::size_t>(yb));
        if (lambda > 0 && !gammas.empty()) return std::pair{loss, add(loss, san_regularizer(gammas, lambda))};
        return std::pair{loss, loss};
      },
      [&](double lr) {
        opt.step(lr);
        opt.zero_grad();
      },
      [&](std::size_t epoch, double loss, double lr) {
        EpochMetrics e;
        e.epoch = epoch;
        e.lr = lr;
        e.train_loss = loss;
        e.train = evaluate<T>(model, &adapters, train_x, data.train_y);
        e.eval = evaluate<T>(model, &adapters, eval_x, data.eval_y);
        if (!gammas.empty()) {
          e.gamma_deviation = gamma_deviation(gammas);
          m.gamma_trajectory.push_back(*e.gamma_deviation);
        }
        m.epochs.push_back(e);
      });

  m.base_hash_after = frozen.empty() ? "none-frozen" : hex64(model.fingerprint(frozen));
  m.frozen_base_intact = m.base_hash_before == m.base_hash_after;
  if (!m.frozen_base_intact) throw VerificationError("frozen base weights changed during training");
  model.freeze_all();
  m.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return run;
}

template <std::floating_point T>
RunResult<T> train(const TrainConfig& config) {
  return train<T>(config, build_dataset(config));
}

// ---------------------------------------------------------------------------
// Gradient audit

struct GradientAudit {
  GradCheckReport report;
  std::size_t parameters = 0;  // adapter values checked
};

/// Compares backward() against central differences for every adapter tensor
/// of `method` on a freshly initialized `spec`. Adapters are moved away from
/// identity first so that no gradient vanishes by symmetry, and base weights
/// are drawn wider than the training init so gradients are well above the
/// relative-error floor.
inline GradientAudit gradient_audit(const ModelSpec& spec, const MethodSpec& method, std::uint64_t seed,
                                    std::size_t samples = 2, double eps = 1e-5, double perturbation = 0.1,
                                    double weight_std = 0.3) {
  ModelState<double> model = init_model<double>(spec, seed);
  std::mt19937_64 rng(seed + 0x6772616463686bULL);
  for (const auto& info : spec.parameters()) {
    if (info.role == ParamRole::weight || info.role == ParamRole::token || info.role == ParamRole::position) {
      model.set(info.name, NDArray<double>::randn(info.shape, rng, weight_std));
    }
  }
  AdapterSet<double> adapters = AdapterSet<double>::create(spec, method, seed);
  for (auto& t : adapters.parameters()) {
    NDArray<double> v = t.value();
    const NDArray<double> noise = NDArray<double>::randn(v.shape(), rng, perturbation);
    for (std::size_t i = 0; i < v.numel(); ++i) v[i] += noise[i];
    t.assign(std::move(v));
  }
  const Tensor<double> x(probe_batch<double>(spec, seed + 1, samples));
  std::vector<std::size_t> labels(samples);
  for (std::size_t i = 0; i < samples; ++i) labels[i] = static_cast<std::size_t>(rng() % spec.num_classes());
  auto loss = [&] {
    return cross_entropy(adapted_forward<double>(model, &adapters, x), std::span<const std::size_t>(labels));
  };
  GradientAudit audit;
  audit.parameters = adapters.parameter_count();
  audit.report = check_gradients<double>(loss, adapters.parameters(), eps);
  return audit;
}

// ---------------------------------------------------------------------------
// Metrics documents

inline Json to_json(const EvalResult& r) { return Json{{"loss", r.loss}, {"accuracy", r.accuracy}}; }

/// Deterministic metrics document (schema "sanpeft-metrics" v1). Wall-clock
/// time is written separately so repeated runs produce identical bytes.
inline Json metrics_document(const TrainConfig& config, const RunMetrics& m) {
  Json epochs = Json::array();
  for (const auto& e : m.epochs) {
    Json j{{"epoch", e.epoch},
           {"lr", e.lr},
           {"train_loss", e.train_loss},
           {"train_accuracy", e.train.accuracy},
           {"eval_loss", e.eval.loss},
           {"eval_accuracy", e.eval.accuracy}};
    if (e.gamma_deviation) j["gamma_deviation"] = *e.gamma_deviation;
    epochs.push_back(j);
  }
  return Json{{"header", artifact_header("metrics", config_hash(config), config.seed, to_json(config))},
              {"method", m.method},
              {"dataset", m.dataset},
              {"params", to_json(m.params)},
              {"adapter_params", m.adapter_params},
              {"base", {{"train", to_json(m.base_train)}, {"eval", to_json(m.base_eval)}}},
              {"epoch0", {{"train", to_json(m.init_train)}, {"eval", to_json(m.init_eval)}}},
              {"epochs", epochs},
              {"final", {{"train_accuracy", m.final_train_accuracy()}, {"eval_accuracy", m.final_eval_accuracy()}}},
              {"gamma_trajectory", m.gamma_trajectory},
              {"frozen_base", {{"before", m.base_hash_before}, {"after", m.base_hash_after}, {"intact", m.frozen_base_intact}}}};
}

// ---------------------------------------------------------------------------
// Comparison runs

struct CompareRow {
  std::string label;
  MethodSpec method;
  std::vector<double> accuracies;  // per seed, in seed order
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation
  ParamCount params;
};

struct CompareReport {
  std::vector<std::uint64_t> seeds;
  std::string dataset;
  std::vector<CompareRow> rows;
};

inline constexpr std::size_t kMinCompareSeeds = 3;

/// Methods of a named comparison preset. "ablation-san" holds the three SAN
/// arms followed by the baselines.
inline std::vector<MethodSpec> compare_preset(const std::string& name) {
  if (name == "ablation-san") {
    return {MethodSpec::san(true, false), MethodSpec::san(false, true), MethodSpec::san(true, true),
            MethodSpec::linear_probe(), MethodSpec::ssf()};
  }
  throw ConfigError("unknown compare preset '" + name + "'");
}

/// Runs every config under every seed. Configs must share model and data;
/// runs may execute concurrently but rows come back in config order.
inline CompareReport compare(const std::vector<TrainConfig>& configs, const std::vector<std::uint64_t>& seeds,
                             std::size_t workers = 0) {
  if (configs.empty()) throw ConfigError("compare needs at least one config");
  if (seeds.size() < kMinCompareSeeds) {
    throw ConfigError("compare needs at least " + std::to_string(kMinCompareSeeds) + " seeds, got " +
                      std::to_string(seeds.size()));
  }
  for (std::size_t i = 1; i < configs.size(); ++i) {
    if (!(configs[i].data == configs[0].data)) {
      throw ConfigError("config " + std::to_string(i) + " uses a different dataset than config 0");
    }
    if (!(configs[i].model == configs[0].model)) {
      throw ConfigError("config " + std::to_string(i) + " uses a different model than config 0");
    }
  }

  const std::size_t jobs = configs.size() * seeds.size();
  std::vector<double> acc(jobs);
  std::vector<std::string> datasets(jobs);
  std::vector<std::exception_ptr> errors(jobs);
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t j = next++; j < jobs; j = next++) {
      try {
        TrainConfig c = configs[j / seeds.size()];
        c.seed = seeds[j % seeds.size()];
        if (c.dtype == DType::f32) {
          auto r = train<float>(c);
          acc[j] = r.metrics.final_eval_accuracy();
          datasets[j] = r.metrics.dataset;
        } else {
          auto r = train<double>(c);
          acc[j] = r.metrics.final_eval_accuracy();
          datasets[j] = r.metrics.dataset;
        }
      } catch (...) {
        errors[j] = std::current_exception();
      }
    }
  };
  if (workers == 0) workers = std::max(1u, std::thread::hardware_concurrency());
  workers = std::min(workers, jobs);
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  CompareReport report;
  report.seeds = seeds;
  report.dataset = datasets[0];
  for (std::size_t i = 0; i < configs.size(); ++i) {
    CompareRow row;
    row.method = configs[i].method;
    row.label = configs[i].method.label();
    row.params = count_params(configs[i].model, configs[i].method);
    for (std::size_t s = 0; s < seeds.size(); ++s) row.accuracies.push_back(acc[i * seeds.size() + s]);
    const double n = static_cast<double>(seeds.size());
    row.mean = std::accumulate(row.accuracies.begin(), row.accuracies.end(), 0.0) / n;
    double ss = 0.0;
    for (double a : row.accuracies) ss += (a - row.mean) * (a - row.mean);
    row.stddev = std::sqrt(ss / (n - 1));
    report.rows.push_back(row);
  }
  return report;
}

inline Json to_json(const CompareReport& r) {
  Json rows = Json::array();
  for (const auto& row : r.rows) {
    rows.push_back(Json{{"label", row.label},
                        {"method", to_json(row.method)},
                        {"mean_accuracy", row.mean},
                        {"std_accuracy", row.stddev},
                        {"accuracies", row.accuracies},
                        {"params", to_json(row.params)}});
  }
  return Json{{"seeds", r.seeds}, {"dataset", r.dataset}, {"rows", rows}};
}

}  // namespace sanpeft

#endif  // SANPEFT_TRAIN_HPP
