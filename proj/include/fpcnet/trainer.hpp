#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fpcnet/network.hpp"
#include "fpcnet/parallel.hpp"
#include "fpcnet/rng.hpp"

namespace fpcnet {

struct LossResult {
  double value = 0.0;
  std::vector<double> grad;  // d(loss)/d(pred)
};

/// Mean squared error and its gradient 2 (pred - target) / n.
inline LossResult mse_loss(std::span<const double> pred, std::span<const double> target) {
  if (pred.size() != target.size())
    throw dimension_error("mse: prediction has " + std::to_string(pred.size()) + " entries, target has " +
                          std::to_string(target.size()));
  if (pred.empty()) throw dimension_error("mse of empty vectors");
  LossResult r{0.0, std::vector<double>(pred.size())};
  const auto n = static_cast<double>(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - target[i];
    r.value += d * d / n;
    r.grad[i] = 2.0 * d / n;
  }
  return r;
}

/// Classical momentum: v <- mu v - lr g; w <- w + v.
inline void sgd_step(ParamStore& params, const ParamStore& grads, ParamStore& velocity, double lr, double momentum) {
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    auto update = [&](std::vector<double>& w, const std::vector<double>& g, std::vector<double>& v) {
      if (g.size() != w.size() || v.size() != w.size()) throw dimension_error("sgd: gradient layout mismatch");
      for (std::size_t j = 0; j < w.size(); ++j) {
        v[j] = momentum * v[j] - lr * g[j];
        w[j] += v[j];
      }
    };
    update(params.layers[i].weights, grads.layers[i].weights, velocity.layers[i].weights);
    update(params.layers[i].bias, grads.layers[i].bias, velocity.layers[i].bias);
  }
}

struct Sample {
  Tensor input;
  std::vector<double> target;
};

/// Random-access training data. get() must be a pure function of the index
/// so that runs are reproducible and samples can be built concurrently.
class Dataset {
 public:
  virtual ~Dataset() = default;
  virtual std::size_t size() const = 0;
  virtual Sample get(std::size_t index) const = 0;
};

struct TrainConfig {
  std::size_t batch_size = 128;
  std::size_t iterations = 1000;
  double learning_rate = 0.005;
  double momentum = 0.9;
  double lr_decay_factor = 0.5;
  std::size_t lr_decay_interval = 0;  // 0: a quarter of the iterations
  std::uint64_t seed = 1;
  std::size_t eval_interval = 0;      // 0: evaluate only at the end
  std::size_t log_interval = 100;
  std::size_t threads = 1;

  void validate() const {
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
      throw std::invalid_argument("learning_rate must be finite and non-negative");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("momentum must be in [0, 1)");
    if (!(lr_decay_factor > 0.0 && lr_decay_factor <= 1.0))
      throw std::invalid_argument("lr_decay_factor must be in (0, 1]");
    if (threads < 1) throw std::invalid_argument("threads must be >= 1");
  }

  double lr_at(std::size_t iteration) const {
    const std::size_t interval = lr_decay_interval ? lr_decay_interval : std::max<std::size_t>(1, iterations / 4);
    return learning_rate * std::pow(lr_decay_factor, static_cast<double>(iteration / interval));
  }

  nlohmann::ordered_json to_json() const {
    return {{"batch_size", batch_size},         {"iterations", iterations},
            {"learning_rate", learning_rate},   {"momentum", momentum},
            {"lr_decay_factor", lr_decay_factor}, {"lr_decay_interval", lr_decay_interval},
            {"seed", seed},                     {"eval_interval", eval_interval},
            {"log_interval", log_interval}};
  }
};

struct LossPoint {
  std::size_t iteration = 0;
  double loss = 0.0;
};

struct EvalPoint {
  std::size_t iteration = 0;
  double metric = 0.0;
};

struct TrainReport {
  std::vector<LossPoint> loss_curve;  // window-averaged training loss
  std::vector<EvalPoint> evals;
  ParamStore params;
  double wall_seconds = 0.0;
};

using EvalFn = std::function<double(const ParamStore&)>;
using ProgressFn = std::function<void(std::size_t iteration, double loss)>;

namespace detail {

// Batches are split into this many fixed chunks whatever the thread count, and
// chunk gradients are summed in chunk order, so results do not depend on
// --threads.
inline constexpr std::size_t kGradientChunks = 8;

struct BatchResult {
  double loss = 0.0;
  ParamStore grads;
};

inline BatchResult batch_gradient(const NetworkSpec& spec, const ParamStore& params, const Dataset& data,
                                  std::span<const std::size_t> indices, std::size_t threads) {
  const std::size_t B = indices.size();
  const std::size_t chunks = std::min(kGradientChunks, B);
  std::vector<ParamStore> chunk_grads(chunks);
  std::vector<double> chunk_loss(chunks, 0.0);
  parallel_for(chunks, threads, [&](std::size_t c) {
    ParamStore g = params.zeros_like();
    ForwardState st;
    double loss = 0.0;
    for (std::size_t i = c * B / chunks; i < (c + 1) * B / chunks; ++i) {
      const Sample s = data.get(indices[i]);
      const auto pred = forward(spec, params, s.input, &st);
      auto l = mse_loss(pred, s.target);
      loss += l.value;
      for (double& v : l.grad) v /= static_cast<double>(B);
      backward(spec, params, st, l.grad, g);
    }
    chunk_grads[c] = std::move(g);
    chunk_loss[c] = loss;
  });
  BatchResult r{0.0, std::move(chunk_grads[0])};
  r.loss = chunk_loss[0];
  for (std::size_t c = 1; c < chunks; ++c) {
    r.grads.add(chunk_grads[c]);
    r.loss += chunk_loss[c];
  }
  r.loss /= static_cast<double>(B);
  return r;
}

}  // namespace detail

/// Mini-batch SGD with momentum on the MSE loss. The sample order is a fresh
/// permutation of the dataset per epoch, drawn from (seed, epoch).
/// Throws numeric_error on a non-finite loss.
inline TrainReport train(const NetworkSpec& spec, ParamStore params, const Dataset& data, const TrainConfig& cfg,
                         const EvalFn& eval = {}, const ProgressFn& progress = {}) {
  cfg.validate();
  check_params(spec, params);
  if (data.size() == 0) throw data_error("training set is empty");
  const auto start = std::chrono::steady_clock::now();

  TrainReport report;
  ParamStore velocity = params.zeros_like();
  std::vector<std::size_t> order(data.size());
  std::size_t epoch = 0, cursor = order.size();
  std::vector<std::size_t> batch(cfg.batch_size);
  double window_loss = 0.0;
  std::size_t window_count = 0;

  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      if (cursor == order.size()) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng rng(cfg.seed, {0x0e0c, epoch++});
        rng.shuffle(std::span<std::size_t>(order));
        cursor = 0;
      }
      batch[b] = order[cursor++];
    }
    const double lr = cfg.lr_at(it);
    auto r = detail::batch_gradient(spec, params, data, batch, cfg.threads);
    if (!std::isfinite(r.loss)) {
      std::ostringstream msg;
      msg << "non-finite training loss at iteration " << it << " (learning rate " << lr << ")";
      throw numeric_error(msg.str());
    }
    sgd_step(params, r.grads, velocity, lr, cfg.momentum);

    window_loss += r.loss;
    ++window_count;
    const bool last = it + 1 == cfg.iterations;
    if ((cfg.log_interval && (it + 1) % cfg.log_interval == 0) || last) {
      report.loss_curve.push_back({it + 1, window_loss / static_cast<double>(window_count)});
      if (progress) progress(it + 1, report.loss_curve.back().loss);
      window_loss = 0.0;
      window_count = 0;
    }
    if (eval && ((cfg.eval_interval && (it + 1) % cfg.eval_interval == 0) || last))
      report.evals.push_back({it + 1, eval(params)});
  }
  if (!params.all_finite()) throw numeric_error("parameters became non-finite during training");
  report.params = std::move(params);
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

/// iteration,loss,eval rows; eval is empty where no evaluation ran.
inline void write_report_csv(std::ostream& os, const TrainReport& r) {
  os << "iteration,loss,eval\n";
  const auto old = os.precision(12);
  std::size_t e = 0;
  for (const auto& p : r.loss_curve) {
    os << p.iteration << ',' << p.loss << ',';
    while (e < r.evals.size() && r.evals[e].iteration < p.iteration) ++e;
    if (e < r.evals.size() && r.evals[e].iteration == p.iteration) os << r.evals[e].metric;
    os << '\n';
  }
  os.precision(old);
}

// ---------------------------------------------------------------- gradient check

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;  // perturbations that changed a max/ReLU routing decision
};

namespace detail {

// Which branch every piecewise layer took: argmax records plus activation
// regions. Finite differences are only meaningful when this is unchanged.
inline std::vector<std::uint32_t> routing_signature(const NetworkSpec& spec, const ForwardState& st) {
  std::vector<std::uint32_t> sig;
  for (std::size_t i = 0; i < spec.nodes.size(); ++i) {
    sig.insert(sig.end(), st.argmax[i].begin(), st.argmax[i].end());
    const Node& n = spec.nodes[i];
    if (n.layer.kind != LayerKind::ReLU && n.layer.kind != LayerKind::BReLU) continue;
    const int src = n.inputs[0];
    const Tensor& x = src == kNetworkInput ? st.input : st.outputs[static_cast<std::size_t>(src)];
    for (double v : x.data()) sig.push_back(v <= 0.0 ? 0u : (v >= 1.0 && n.layer.kind == LayerKind::BReLU ? 2u : 1u));
  }
  return sig;
}

}  // namespace detail

/// Central-difference check of backward() on `samples` randomly chosen
/// weights. Relative error is |a - n| / max(|a|, |n|, abs_floor).
/// Perturbations that cross a non-differentiable point are skipped and
/// replaced by another draw.
inline GradCheckReport grad_check(const NetworkSpec& spec, ParamStore params, const Tensor& input,
                                  std::span<const double> target, std::size_t samples = 200, double step = 1e-4,
                                  std::uint64_t seed = 0, double abs_floor = 1e-6) {
  ForwardState st;
  const auto pred = forward(spec, params, input, &st);
  const auto base_sig = detail::routing_signature(spec, st);
  const auto loss = mse_loss(pred, target);
  ParamStore grads = params.zeros_like();
  backward(spec, params, st, loss.grad, grads);

  struct Ref {
    std::size_t layer, index;
  };
  std::vector<Ref> refs;
  for (std::size_t l = 0; l < params.layers.size(); ++l)
    for (std::size_t j = 0; j < params.layers[l].weights.size(); ++j) refs.push_back({l, j});
  if (refs.empty()) return {};
  Rng rng(seed, {0x9c4e});
  rng.shuffle(std::span<Ref>(refs));

  auto eval_loss = [&](std::vector<std::uint32_t>& sig) {
    ForwardState s;
    const auto p = forward(spec, params, input, &s);
    sig = detail::routing_signature(spec, s);
    return mse_loss(p, target).value;
  };

  GradCheckReport r;
  std::vector<std::uint32_t> sig_plus, sig_minus;
  for (const Ref& ref : refs) {
    if (r.checked >= samples) break;
    double& w = params.layers[ref.layer].weights[ref.index];
    const double saved = w;
    w = saved + step;
    const double lp = eval_loss(sig_plus);
    w = saved - step;
    const double lm = eval_loss(sig_minus);
    w = saved;
    if (sig_plus != base_sig || sig_minus != base_sig) {
      ++r.skipped;
      continue;
    }
    const double numeric = (lp - lm) / (2.0 * step);
    const double analytic = grads.layers[ref.layer].weights[ref.index];
    const double denom = std::max({std::abs(analytic), std::abs(numeric), abs_floor});
    r.max_rel_error = std::max(r.max_rel_error, std::abs(analytic - numeric) / denom);
    ++r.checked;
  }
  return r;
}

}  // namespace fpcnet
