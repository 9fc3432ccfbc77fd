#pragma once

// Adam, gradient clipping, and the epoch loop with validation-driven early
// stopping.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "redan/data.hpp"
#include "redan/model.hpp"
#include "redan/ranking.hpp"

namespace redan {

struct TrainConfig {
  std::size_t batch_size = 4;  // turns per batch
  std::size_t max_epochs = 20;
  double lr = 4e-4;
  std::size_t lr_halving_period = 10;
  double dropout = 0.2;
  std::size_t steps = 2;
  std::size_t factors = 2;
  std::uint64_t seed = 0;
  std::size_t patience = 5;
  double grad_clip = 5.0;
  std::size_t min_count = 1;
  TruncationLimits limits = TruncationLimits::desk();
  std::size_t eval_threads = 1;

  static TrainConfig desk() { return {}; }

  static TrainConfig paper() {
    TrainConfig c;
    c.batch_size = 100;
    c.steps = 3;
    c.factors = 5;
    c.min_count = 5;
    c.limits = TruncationLimits::paper();
    return c;
  }

  // lr * 0.5^floor((epoch - 1) / period), epochs counted from 1.
  double lr_at(std::size_t epoch) const {
    if (epoch == 0) throw PreconditionError("lr_at: epochs are 1-based");
    return lr * std::pow(0.5, static_cast<double>((epoch - 1) / lr_halving_period));
  }

  void validate() const {
    if (batch_size == 0 || max_epochs == 0 || lr_halving_period == 0 || steps == 0 ||
        factors == 0 || min_count == 0 || !(lr > 0.0) || !(grad_clip > 0.0))
      throw PreconditionError("train config: sizes, lr and clip norm must be positive");
    if (dropout < 0.0 || dropout >= 1.0)
      throw PreconditionError("train config: dropout must be in [0, 1)");
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"batch_size", c.batch_size},
          {"max_epochs", c.max_epochs},
          {"lr", c.lr},
          {"lr_halving_period", c.lr_halving_period},
          {"dropout", c.dropout},
          {"steps", c.steps},
          {"factors", c.factors},
          {"seed", c.seed},
          {"patience", c.patience},
          {"grad_clip", c.grad_clip},
          {"min_count", c.min_count},
          {"limits",
           {{"question", c.limits.question},
            {"answer", c.limits.answer},
            {"caption", c.limits.caption}}}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.batch_size = j.at("batch_size").get<std::size_t>();
  c.max_epochs = j.at("max_epochs").get<std::size_t>();
  c.lr = j.at("lr").get<double>();
  c.lr_halving_period = j.at("lr_halving_period").get<std::size_t>();
  c.dropout = j.at("dropout").get<double>();
  c.steps = j.at("steps").get<std::size_t>();
  c.factors = j.at("factors").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.patience = j.at("patience").get<std::size_t>();
  c.grad_clip = j.at("grad_clip").get<double>();
  c.min_count = j.at("min_count").get<std::size_t>();
  const auto& l = j.at("limits");
  c.limits.caption = l.at("caption").get<std::size_t>();
  c.limits.question = l.at("question").get<std::size_t>();
  c.limits.answer = l.at("answer").get<std::size_t>();
  return c;
}

// ------------------------------------------------------------------- optimizer

struct NamedTensor {
  std::string name;
  Tensor* tensor;
};

inline std::vector<NamedTensor> trainable_parameters(Model& model) {
  std::vector<NamedTensor> out;
  model.for_each_parameter([&](const std::string& name, Tensor& t) {
    if (t.requires_grad()) out.push_back({name, &t});
  });
  return out;
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::size_t t = 0;
  std::vector<std::vector<double>> m, v;
};

// A parameter without an accumulated gradient is treated as having gradient 0.
inline void adam_step(std::span<const NamedTensor> params, AdamState& state, double lr,
                      const AdamConfig& cfg = {}) {
  if (state.t == 0 && state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.tensor->size(), 0.0);
      state.v.emplace_back(p.tensor->size(), 0.0);
    }
  }
  if (state.m.size() != params.size())
    throw PreconditionError("adam_step: parameter count changed between steps");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.m[i].size() != params[i].tensor->size())
      throw ShapeError("adam_step: parameter '" + params[i].name + "' changed size");
    if (params[i].tensor->has_grad())
      for (double g : params[i].tensor->grad())
        if (!std::isfinite(g))
          throw NumericError("adam_step: non-finite gradient in parameter '" + params[i].name +
                             "'");
  }
  ++state.t;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i].tensor;
    auto& m = state.m[i];
    auto& v = state.v[i];
    const bool has = p.has_grad();
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double g = has ? p.grad()[j] : 0.0;
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
      p[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg.eps);
    }
  }
}

// Rescales all gradients so their joint l2 norm is at most max_norm; returns
// the norm before clipping.
inline double clip_grad_norm(std::span<const NamedTensor> params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    if (p.tensor->has_grad())
      for (double g : p.tensor->grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double scale = max_norm / norm;
    for (const auto& p : params)
      if (p.tensor->has_grad())
        for (double& g : p.tensor->grad()) g *= scale;
  }
  return norm;
}

// -------------------------------------------------------------------- training

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;  // mean over batches
  std::string metric;       // "ndcg" or "mrr"
  double val_metric = 0.0;
  Metrics val;
  bool improved = false;
  double seconds = 0.0;
};

inline nlohmann::json to_json(const EpochRecord& r) {
  return {{"epoch", r.epoch},           {"lr", r.lr},
          {"train_loss", r.train_loss}, {"metric", r.metric},
          {"val_metric", r.val_metric}, {"val", metrics_to_json(r.val)},
          {"improved", r.improved},     {"seconds", r.seconds}};
}

struct TrainResult {
  Model best;
  std::size_t best_epoch = 0;
  double best_metric = 0.0;
  std::vector<EpochRecord> history;
  std::vector<double> batch_losses;
  bool stopped_early = false;
};

// The early-stopping metric: NDCG when the split carries relevance, else MRR.
inline std::pair<std::string, double> selection_metric(const Metrics& m) {
  if (m.ndcg) return {"ndcg", *m.ndcg};
  return {"mrr", m.mrr};
}

namespace detail {

struct TurnRef {
  std::size_t dialog;
  std::size_t turn;
};

inline double train_batch(Model& model, const Dataset& data, std::span<const TurnRef> batch,
                          Dropout& drop, std::span<const NamedTensor> params,
                          AdamState& adam, double lr, double clip) {
  Graph g;
  std::map<std::size_t, std::unique_ptr<DialogEncoding>> encodings;
  std::vector<Var> losses;
  losses.reserve(batch.size());
  for (const auto& ref : batch) {
    auto& enc = encodings[ref.dialog];
    if (!enc) enc = std::make_unique<DialogEncoding>(model, g, data[ref.dialog]);
    losses.push_back(forward_turn(g, model, *enc, ref.turn, ForwardMode::kLoss, &drop).loss);
  }
  Var loss = affine(sum(concat(losses, 0)), 1.0 / static_cast<double>(losses.size()));
  model.zero_grad();
  g.backward(loss);
  clip_grad_norm(params, clip);
  adam_step(params, adam, lr);
  return loss.item();
}

}  // namespace detail

// Returns the parameters of the best validation epoch. An empty validation
// split falls back to the training split.
inline TrainResult train(Model& model, const Dataset& train_data, const Dataset& val_data,
                         const TrainConfig& cfg,
                         const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  cfg.validate();
  if (train_data.empty()) throw PreconditionError("train: empty training set");
  const Dataset& val = val_data.empty() ? train_data : val_data;

  std::vector<detail::TurnRef> turns;
  for (std::size_t d = 0; d < train_data.size(); ++d)
    for (std::size_t t = 0; t < train_data[d].turns.size(); ++t) turns.push_back({d, t});
  if (turns.empty()) throw PreconditionError("train: training set has no turns");

  std::mt19937_64 shuffle_rng(cfg.seed);
  Dropout drop(cfg.dropout, cfg.seed ^ 0x5DEECE66DULL);
  AdamState adam;
  const auto params = trainable_parameters(model);

  TrainResult result{model, 0, -1.0, {}, {}, false};
  std::size_t bad_epochs = 0;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    std::shuffle(turns.begin(), turns.end(), shuffle_rng);
    const double lr = cfg.lr_at(epoch);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < turns.size(); b += cfg.batch_size) {
      const std::size_t e = std::min(turns.size(), b + cfg.batch_size);
      double loss;
      try {
        loss = detail::train_batch(model, train_data,
                                   std::span<const detail::TurnRef>(turns).subspan(b, e - b),
                                   drop, params, adam, lr, cfg.grad_clip);
      } catch (const NumericError& err) {
        throw NumericError("training diverged at epoch " + std::to_string(epoch) + " batch " +
                           std::to_string(batches + 1) + ": " + err.what());
      }
      result.batch_losses.push_back(loss);
      loss_sum += loss;
      ++batches;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_loss = loss_sum / static_cast<double>(batches);
    rec.val = compute_metrics(evaluate(model, val, cfg.eval_threads));
    std::tie(rec.metric, rec.val_metric) = selection_metric(rec.val);
    rec.improved = result.best_epoch == 0 || rec.val_metric > result.best_metric;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (rec.improved) {
      result.best = model;
      result.best_epoch = epoch;
      result.best_metric = rec.val_metric;
      bad_epochs = 0;
    } else {
      ++bad_epochs;
    }
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (!rec.improved && bad_epochs > cfg.patience) {
      result.stopped_early = true;
      break;
    }
  }
  return result;
}

}  // namespace redan
