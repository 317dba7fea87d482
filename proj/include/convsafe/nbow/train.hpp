#pragma once

// Mini-batch Adam training with per-epoch dev evaluation and best-checkpoint selection.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <istream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "convsafe/error.hpp"
#include "convsafe/eval/metrics.hpp"
#include "convsafe/nbow/loss.hpp"
#include "convsafe/nbow/model.hpp"
#include "convsafe/rng.hpp"

namespace convsafe::nbow {

// Tokenized instance; `second` holds the earlier utterance u_j for stance pairs.
struct TextExample {
  std::vector<std::string> first;
  std::vector<std::string> second;
  std::size_t label = 0;
};

enum class CheckpointMetric { OffensiveAllUtteranceF1, StanceAllPairsMacroF1 };

struct TrainConfig {
  double learning_rate = 2e-5;
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  bool train_embeddings = true;
  std::optional<CheckpointMetric> checkpoint_metric;  // defaults from the task

  void validate() const {
    if (!(learning_rate > 0.0)) throw UsageError("learning_rate must be positive");
    if (epochs < 1) throw UsageError("epochs must be >= 1");
    if (batch_size < 1) throw UsageError("batch_size must be >= 1");
  }
};

class Adam {
 public:
  Adam(const TrainConfig& cfg) : lr_(cfg.learning_rate), b1_(cfg.beta1), b2_(cfg.beta2), eps_(cfg.epsilon) {}

  void step(NbowModel& m, Gradients& g, bool include_embeddings) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    std::size_t slot = 0;
    for_each_tensor(
        m, g,
        [&](std::span<double> p, std::span<double> grad, const std::string&) {
          if (slot == m1_.size()) {
            m1_.emplace_back(p.size(), 0.0);
            m2_.emplace_back(p.size(), 0.0);
          }
          auto& mm = m1_[slot];
          auto& vv = m2_[slot];
          for (std::size_t i = 0; i < p.size(); ++i) {
            mm[i] = b1_ * mm[i] + (1.0 - b1_) * grad[i];
            vv[i] = b2_ * vv[i] + (1.0 - b2_) * grad[i] * grad[i];
            p[i] -= lr_ * (mm[i] / c1) / (std::sqrt(vv[i] / c2) + eps_);
          }
          ++slot;
        },
        include_embeddings);
  }

 private:
  double lr_, b1_, b2_, eps_;
  std::uint64_t t_ = 0;
  std::vector<Vector> m1_, m2_;
};

struct EpochStats {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double dev_metric = 0.0;
};

struct TrainResult {
  NbowModel best;
  std::size_t best_epoch = 0;
  double best_dev_metric = 0.0;
  std::vector<EpochStats> history;
};

inline std::vector<std::string> build_vocab(const std::vector<TextExample>& examples) {
  std::set<std::string> v;
  for (const auto& ex : examples) {
    v.insert(ex.first.begin(), ex.first.end());
    v.insert(ex.second.begin(), ex.second.end());
  }
  v.erase(kUnknownToken);
  return {v.begin(), v.end()};
}

inline EncodedExample encode(const TextExample& ex, const EmbeddingTable& emb) {
  return {emb.ids(ex.first), emb.ids(ex.second), ex.label};
}

inline std::vector<EncodedExample> encode_all(const std::vector<TextExample>& xs, const EmbeddingTable& emb) {
  std::vector<EncodedExample> out;
  out.reserve(xs.size());
  for (const auto& ex : xs) out.push_back(encode(ex, emb));
  return out;
}

inline std::vector<double> class_counts(const std::vector<TextExample>& xs, std::size_t n_classes) {
  std::vector<double> c(n_classes, 0.0);
  for (const auto& ex : xs) c.at(ex.label) += 1.0;
  for (double& x : c) x = std::max(x, 1.0);
  return c;
}

inline std::vector<std::size_t> predict_labels(const std::vector<EncodedExample>& xs, const NbowModel& m) {
  std::vector<std::size_t> out;
  out.reserve(xs.size());
  for (const auto& ex : xs) out.push_back(argmax(forward_example(ex, m).mlp.z));
  return out;
}

inline double dev_metric(const std::vector<EncodedExample>& dev, const NbowModel& m, CheckpointMetric metric) {
  const auto preds = predict_labels(dev, m);
  std::vector<std::size_t> golds;
  golds.reserve(dev.size());
  for (const auto& ex : dev) golds.push_back(ex.label);
  if (metric == CheckpointMetric::OffensiveAllUtteranceF1) return eval::f1(preds, golds, std::size_t{1}).f1;
  return eval::macro_f1(eval::per_class_f1(preds, golds, std::vector<std::size_t>{0, 1, 2}));
}

struct TrainHooks {
  std::istream* pretrained = nullptr;  // "token v1..vd" embedding file
  OovPolicy oov;
  std::function<void(const EpochStats&)> on_epoch;
};

inline TrainResult train(Task task, const std::vector<TextExample>& train_set,
                         const std::vector<TextExample>& dev_set, const ModelConfig& mcfg,
                         const TrainConfig& tcfg, LossConfig loss, const TrainHooks& hooks = {}) {
  tcfg.validate();
  if (train_set.empty() || dev_set.empty()) throw NotEnoughData("train and dev splits must be non-empty");
  const std::size_t n_classes = num_classes(task);
  if (loss.kind == LossKind::CBFocal && loss.class_counts.empty())
    loss.class_counts = class_counts(train_set, n_classes);
  loss.validate(n_classes);

  Rng rng(tcfg.seed);
  NbowModel model = make_model(task, build_vocab(train_set), mcfg, rng);
  if (hooks.pretrained) model.embeddings.load_pretrained(*hooks.pretrained, hooks.oov, mcfg.init_sigma);

  const auto train_enc = encode_all(train_set, model.embeddings);
  const auto dev_enc = encode_all(dev_set, model.embeddings);
  const CheckpointMetric metric = tcfg.checkpoint_metric.value_or(
      task == Task::Offensive ? CheckpointMetric::OffensiveAllUtteranceF1 : CheckpointMetric::StanceAllPairsMacroF1);

  Adam adam(tcfg);
  Gradients grads = Gradients::zeros_like(model);
  std::vector<std::size_t> order(train_enc.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::vector<EncodedExample> batch;

  TrainResult result;
  for (std::size_t epoch = 1; epoch <= tcfg.epochs; ++epoch) {
    rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t n_batches = 0;
    for (std::size_t start = 0; start < order.size(); start += tcfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + tcfg.batch_size);
      batch.clear();
      for (std::size_t i = start; i < end; ++i) batch.push_back(train_enc[order[i]]);
      grads = Gradients::zeros_like(model);
      const double value = batch_gradients(batch, model, loss, grads, tcfg.train_embeddings);
      if (!std::isfinite(value))
        throw DivergenceDetected("non-finite training loss at epoch " + std::to_string(epoch));
      adam.step(model, grads, tcfg.train_embeddings);
      loss_sum += value;
      ++n_batches;
    }
    EpochStats stats{epoch, loss_sum / static_cast<double>(n_batches), dev_metric(dev_enc, model, metric)};
    result.history.push_back(stats);
    if (hooks.on_epoch) hooks.on_epoch(stats);
    if (epoch == 1 || stats.dev_metric > result.best_dev_metric) {
      result.best = model;
      result.best_epoch = epoch;
      result.best_dev_metric = stats.dev_metric;
    }
  }
  return result;
}

}  // namespace convsafe::nbow
