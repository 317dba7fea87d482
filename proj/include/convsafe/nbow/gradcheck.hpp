#pragma once

// Central finite-difference verification of the analytic gradients on random
// small networks. Networks with a ReLU pre-activation within kink_margin of zero
// are resampled, since the difference quotient would straddle the kink.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "convsafe/nbow/loss.hpp"
#include "convsafe/nbow/model.hpp"
#include "convsafe/rng.hpp"

namespace convsafe::nbow {

struct GradCheckConfig {
  std::uint64_t seed = 1;
  std::size_t networks = 100;
  std::size_t max_dim = 8;
  std::size_t max_hidden = 8;
  std::size_t vocab = 12;
  std::size_t batch = 4;
  double step = 1e-4;
  double kink_margin = 1e-3;
  Task task = Task::Stance;
  bool weighted_pooling = false;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst;  // "<loss>/<tensor>[index]"
  std::size_t entries = 0;
  std::size_t networks = 0;
  std::size_t resampled = 0;
};

// |a - n| / max(|a|, |n|, floor)
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

inline bool near_kink(const std::vector<EncodedExample>& batch, const NbowModel& m, double margin) {
  for (const auto& ex : batch) {
    const auto t = forward_example(ex, m);
    for (double a : t.mlp.a1)
      if (std::abs(a) < margin) return true;
    for (double a : t.mlp.a2)
      if (std::abs(a) < margin) return true;
  }
  return false;
}

inline std::vector<LossConfig> gradcheck_losses(std::size_t n_classes, Rng& rng) {
  LossConfig ce;
  ce.kind = LossKind::CE;
  LossConfig wce;
  wce.kind = LossKind::WeightedCE;
  wce.weights.assign(n_classes, 100.0);
  wce.weights[0] = 1.0;
  LossConfig cb;
  cb.kind = LossKind::CBFocal;
  cb.beta = 0.9999;
  cb.gamma = 1.0;
  for (std::size_t c = 0; c < n_classes; ++c) cb.class_counts.push_back(static_cast<double>(1 + rng.below(50)));
  return {ce, wce, cb};
}

inline GradCheckResult run_gradcheck(const GradCheckConfig& cfg) {
  Rng rng(cfg.seed);
  GradCheckResult res;
  const std::size_t n_classes = num_classes(cfg.task);
  for (std::size_t net = 0; net < cfg.networks; ++net) {
    NbowModel m;
    std::vector<EncodedExample> batch;
    for (;;) {
      ModelConfig mc;
      mc.dim = 1 + rng.below(cfg.max_dim);
      mc.hidden1 = 2 + rng.below(cfg.max_hidden - 1);
      mc.hidden2 = 2 + rng.below(cfg.max_hidden - 1);
      mc.weighted_pooling = cfg.weighted_pooling;
      mc.init_sigma = 1.0;
      std::vector<std::string> vocab;
      for (std::size_t v = 1; v < cfg.vocab; ++v) vocab.push_back("w" + std::to_string(v));
      m = make_model(cfg.task, vocab, mc, rng);
      for (auto& layer : m.mlp.layers)
        for (double& b : layer.b) b = rng.normal(0.0, 0.5);
      for (double& w : m.token_weights) w = rng.normal(0.0, 1.0);
      batch.clear();
      for (std::size_t b = 0; b < cfg.batch; ++b) {
        EncodedExample ex;
        const std::size_t len_i = 1 + rng.below(5), len_j = 1 + rng.below(5);
        for (std::size_t k = 0; k < len_i; ++k) ex.first.push_back(rng.below(cfg.vocab));
        if (cfg.task == Task::Stance)
          for (std::size_t k = 0; k < len_j; ++k) ex.second.push_back(rng.below(cfg.vocab));
        ex.label = rng.below(n_classes);
        batch.push_back(std::move(ex));
      }
      if (!near_kink(batch, m, cfg.kink_margin)) break;
      ++res.resampled;
    }
    ++res.networks;

    for (const auto& loss : gradcheck_losses(n_classes, rng)) {
      Gradients g = Gradients::zeros_like(m);
      batch_gradients(batch, m, loss, g, true);
      NbowModel probe = m;
      // Walk the probe's parameters alongside the analytic gradients.
      std::vector<std::pair<std::span<double>, std::string>> params;
      std::vector<std::span<double>> grads;
      for_each_tensor(probe, g, [&](std::span<double> p, std::span<double> gr, const std::string& name) {
        params.emplace_back(p, name);
        grads.push_back(gr);
      });
      for (std::size_t t = 0; t < params.size(); ++t) {
        auto [p, name] = params[t];
        for (std::size_t i = 0; i < p.size(); ++i) {
          const double orig = p[i];
          p[i] = orig + cfg.step;
          const double up = batch_loss(batch, probe, loss);
          p[i] = orig - cfg.step;
          const double down = batch_loss(batch, probe, loss);
          p[i] = orig;
          const double numeric = (up - down) / (2.0 * cfg.step);
          const double err = relative_error(grads[t][i], numeric);
          ++res.entries;
          if (err > res.max_rel_error) {
            res.max_rel_error = err;
            res.worst = to_string(loss.kind) + "/" + name + "[" + std::to_string(i) + "]";
          }
        }
      }
    }
  }
  return res;
}

}  // namespace convsafe::nbow
