#pragma once

// Cross-entropy, weighted cross-entropy and class-balanced focal loss, each with
// its analytic gradient with respect to the logits.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "convsafe/error.hpp"
#include "convsafe/nbow/tensor.hpp"

namespace convsafe::nbow {

inline constexpr double kFocalEps = 1e-12;

enum class LossKind { CE, WeightedCE, CBFocal };

inline std::string to_string(LossKind k) {
  switch (k) {
    case LossKind::CE: return "ce";
    case LossKind::WeightedCE: return "wce";
    case LossKind::CBFocal: return "cbfocal";
  }
  return "?";
}

inline LossKind loss_kind_from_string(const std::string& s) {
  if (s == "ce") return LossKind::CE;
  if (s == "wce") return LossKind::WeightedCE;
  if (s == "cbfocal") return LossKind::CBFocal;
  throw UsageError("unknown loss \"" + s + "\" (expected ce|wce|cbfocal)");
}

struct LossConfig {
  LossKind kind = LossKind::CE;
  std::vector<double> weights = {1.0, 100.0, 100.0};  // wCE, per class
  double beta = 0.9999;
  double gamma = 1.0;
  std::vector<double> class_counts;  // n_y for CB_foc, from the training split

  void validate(std::size_t n_classes) const {
    if (kind == LossKind::WeightedCE) {
      if (weights.size() != n_classes) throw DimensionMismatch(n_classes, weights.size());
      for (double w : weights)
        if (!(w > 0.0)) throw UsageError("class weights must be positive");
    }
    if (kind == LossKind::CBFocal) {
      if (!(beta >= 0.0 && beta < 1.0)) throw UsageError("beta must lie in [0, 1)");
      if (!(gamma >= 0.0)) throw UsageError("gamma must be non-negative");
      if (class_counts.size() != n_classes) throw DimensionMismatch(n_classes, class_counts.size());
      for (double n : class_counts)
        if (!(n >= 1.0)) throw UsageError("class counts must be >= 1");
    }
  }
};

inline Vector softmax(std::span<const double> z) {
  const double mx = *std::max_element(z.begin(), z.end());
  Vector p(z.size());
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) s += (p[i] = std::exp(z[i] - mx));
  for (double& x : p) x /= s;
  return p;
}

inline double log_sum_exp(std::span<const double> z) {
  const double mx = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (double x : z) s += std::exp(x - mx);
  return mx + std::log(s);
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline void check_label(std::span<const double> z, std::size_t y) {
  if (y >= z.size()) throw UsageError("label " + std::to_string(y) + " out of range");
}

inline double loss_ce(std::span<const double> z, std::size_t y) {
  check_label(z, y);
  return log_sum_exp(z) - z[y];
}

inline double loss_wce(std::span<const double> z, std::size_t y, std::span<const double> weights) {
  if (weights.size() != z.size()) throw DimensionMismatch(z.size(), weights.size());
  return weights[y] * loss_ce(z, y);
}

// (1 - beta) / (1 - beta^n): inverse effective number of samples.
inline double cb_reweight(double beta, double n_y) {
  if (beta == 0.0) return 1.0;
  return (1.0 - beta) / (1.0 - std::pow(beta, n_y));
}

// Per-class sigmoid probability of the "correct side": sigmoid(z_m) for m = y, sigmoid(-z_m) otherwise.
inline double focal_p(std::span<const double> z, std::size_t y, std::size_t m) {
  const double zp = m == y ? z[m] : -z[m];
  return std::clamp(sigmoid(zp), kFocalEps, 1.0 - kFocalEps);
}

inline double focal_term(std::span<const double> z, std::size_t y, double gamma) {
  check_label(z, y);
  double s = 0.0;
  for (std::size_t m = 0; m < z.size(); ++m) {
    const double p = focal_p(z, y, m);
    s += std::pow(1.0 - p, gamma) * std::log(p);
  }
  return -s;
}

inline double loss_cb_focal(std::span<const double> z, std::size_t y, double beta, double gamma,
                            std::span<const double> class_counts) {
  if (class_counts.size() != z.size()) throw DimensionMismatch(z.size(), class_counts.size());
  check_label(z, y);
  return cb_reweight(beta, class_counts[y]) * focal_term(z, y, gamma);
}

inline double loss_value(std::span<const double> z, std::size_t y, const LossConfig& cfg) {
  switch (cfg.kind) {
    case LossKind::CE: return loss_ce(z, y);
    case LossKind::WeightedCE: return loss_wce(z, y, cfg.weights);
    case LossKind::CBFocal: return loss_cb_focal(z, y, cfg.beta, cfg.gamma, cfg.class_counts);
  }
  return 0.0;
}

// dLoss/dz for one example.
inline Vector loss_grad(std::span<const double> z, std::size_t y, const LossConfig& cfg) {
  check_label(z, y);
  Vector g(z.size());
  switch (cfg.kind) {
    case LossKind::CE:
    case LossKind::WeightedCE: {
      g = softmax(z);
      g[y] -= 1.0;
      if (cfg.kind == LossKind::WeightedCE)
        for (double& x : g) x *= cfg.weights[y];
      break;
    }
    case LossKind::CBFocal: {
      // L = -r * sum_m f(p_m), f(p) = (1-p)^g log p, p_m = sigmoid(s_m z_m), s_m = +-1.
      // df/dx = (1-p)^(g+1) - g p (1-p)^g log p.
      const double r = cb_reweight(cfg.beta, cfg.class_counts[y]);
      const double gam = cfg.gamma;
      for (std::size_t m = 0; m < z.size(); ++m) {
        const double sign = m == y ? 1.0 : -1.0;
        const double p = focal_p(z, y, m);
        const double q = 1.0 - p;
        const double dfdx = std::pow(q, gam + 1.0) - gam * p * std::pow(q, gam) * std::log(p);
        g[m] = -r * sign * dfdx;
      }
      break;
    }
  }
  return g;
}

}  // namespace convsafe::nbow
