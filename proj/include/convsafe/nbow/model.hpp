#pragma once

// Neural bag-of-words: pooled word embeddings -> 3-layer ReLU perceptron.
// The offensive head reads one utterance vector h; the stance head reads the
// pair feature h_i (+) h_j (+) (h_i - h_j) (+) (h_i * h_j).

#include <array>
#include <cmath>
#include <fstream>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "convsafe/error.hpp"
#include "convsafe/nbow/loss.hpp"
#include "convsafe/nbow/tensor.hpp"
#include "convsafe/rng.hpp"
#include "convsafe/text.hpp"

namespace convsafe::nbow {

enum class Task { Offensive, Stance };

inline std::string to_string(Task t) { return t == Task::Offensive ? "offensive" : "stance"; }
inline Task task_from_string(const std::string& s) {
  if (s == "offensive") return Task::Offensive;
  if (s == "stance") return Task::Stance;
  throw UsageError("unknown task \"" + s + "\" (expected offensive|stance)");
}
inline std::size_t num_classes(Task t) { return t == Task::Offensive ? 2 : 3; }

inline const std::string kUnknownToken = "<unk>";

struct OovPolicy {
  enum class Kind { RandomVector, ZeroVector };
  Kind kind = Kind::RandomVector;
  std::uint64_t seed = 0;
};

// Row 0 is always <unk>; unseen tokens at inference map there.
class EmbeddingTable {
 public:
  EmbeddingTable() = default;
  EmbeddingTable(std::vector<std::string> tokens, std::size_t dim) { reset(std::move(tokens), dim); }

  void reset(std::vector<std::string> tokens, std::size_t dim) {
    if (dim == 0) throw UsageError("embedding dimension must be positive");
    tokens_.clear();
    index_.clear();
    tokens_.push_back(kUnknownToken);
    index_[kUnknownToken] = 0;
    for (auto& t : tokens)
      if (index_.try_emplace(t, tokens_.size()).second) tokens_.push_back(std::move(t));
    vectors = Matrix(tokens_.size(), dim);
  }

  std::size_t size() const { return tokens_.size(); }
  std::size_t dim() const { return vectors.cols; }
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::size_t lookup(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? 0 : it->second;
  }
  std::optional<std::size_t> find(const std::string& token) const {
    auto it = index_.find(token);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  std::vector<std::size_t> ids(const std::vector<std::string>& tokens) const {
    std::vector<std::size_t> out;
    out.reserve(tokens.size());
    for (const auto& t : tokens) out.push_back(lookup(t));
    return out;
  }

  void init_random(Rng& rng, double sigma) {
    for (double& x : vectors.data) x = rng.normal(0.0, sigma);
  }

  // "token v1 ... vd" lines; rows for tokens absent from the file follow the OOV policy.
  // Returns the number of rows that were found in the file.
  std::size_t load_pretrained(std::istream& in, const OovPolicy& oov, double sigma = 0.1) {
    std::vector<bool> found(size(), false);
    std::string line;
    std::size_t hits = 0, lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      auto w = text::words(line);
      if (w.empty()) continue;
      if (w.size() != dim() + 1)
        throw DataError("embedding line " + std::to_string(lineno) + ": expected " +
                        std::to_string(dim()) + " values, got " + std::to_string(w.size() - 1));
      auto id = find(std::string(w[0]));
      if (!id || found[*id]) continue;
      auto r = vectors.row(*id);
      for (std::size_t c = 0; c < dim(); ++c) r[c] = std::stod(std::string(w[c + 1]));
      found[*id] = true;
      ++hits;
    }
    Rng rng(oov.seed);
    for (std::size_t i = 0; i < size(); ++i) {
      if (found[i]) continue;
      for (double& x : vectors.row(i))
        x = oov.kind == OovPolicy::Kind::ZeroVector ? 0.0 : rng.normal(0.0, sigma);
    }
    return hits;
  }

  Matrix vectors;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct Dense {
  Matrix w;  // out x in
  Vector b;
};

struct MlpParams {
  std::array<Dense, 3> layers;

  std::size_t input_dim() const { return layers[0].w.cols; }
  std::size_t output_dim() const { return layers[2].w.rows; }

  static MlpParams zeros(std::size_t in, std::size_t h1, std::size_t h2, std::size_t out) {
    MlpParams p;
    const std::array<std::size_t, 4> dims = {in, h1, h2, out};
    for (std::size_t l = 0; l < 3; ++l) {
      p.layers[l].w = Matrix(dims[l + 1], dims[l]);
      p.layers[l].b = Vector(dims[l + 1], 0.0);
    }
    return p;
  }

  void check_chain() const {
    for (std::size_t l = 0; l < 3; ++l) {
      if (layers[l].b.size() != layers[l].w.rows) throw DimensionMismatch(layers[l].w.rows, layers[l].b.size());
      if (l > 0 && layers[l].w.cols != layers[l - 1].w.rows)
        throw DimensionMismatch(layers[l - 1].w.rows, layers[l].w.cols);
    }
  }
};

struct NbowModel {
  Task task = Task::Offensive;
  EmbeddingTable embeddings;
  bool weighted_pooling = false;
  Vector token_weights;  // one scalar per vocab row when weighted_pooling
  MlpParams mlp;

  std::size_t n_classes() const { return mlp.output_dim(); }
};

struct ModelConfig {
  std::size_t dim = 300;
  std::size_t hidden1 = 256;
  std::size_t hidden2 = 128;
  bool weighted_pooling = false;
  double init_sigma = 0.1;
};

// Random-normal embeddings (sigma), He-scaled normal MLP weights, zero biases.
inline NbowModel make_model(Task task, std::vector<std::string> vocab, const ModelConfig& cfg, Rng& rng) {
  NbowModel m;
  m.task = task;
  m.embeddings.reset(std::move(vocab), cfg.dim);
  m.embeddings.init_random(rng, cfg.init_sigma);
  m.weighted_pooling = cfg.weighted_pooling;
  if (cfg.weighted_pooling) m.token_weights.assign(m.embeddings.size(), 0.0);
  const std::size_t in = task == Task::Offensive ? cfg.dim : 4 * cfg.dim;
  m.mlp = MlpParams::zeros(in, cfg.hidden1, cfg.hidden2, num_classes(task));
  for (auto& layer : m.mlp.layers) {
    const double sd = std::sqrt(2.0 / static_cast<double>(layer.w.cols));
    for (double& x : layer.w.data) x = rng.normal(0.0, sd);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

struct Pooled {
  Vector h;
  Vector alpha;  // per-position weights (weighted pooling only)
  bool empty = false;
};

// Arithmetic mean of token vectors, or a softmax(token_weights)-weighted mean.
// Empty input yields the zero vector with empty = true.
inline Pooled pool(std::span<const std::size_t> ids, const EmbeddingTable& emb,
                   const Vector* token_weights = nullptr) {
  Pooled out;
  out.h.assign(emb.dim(), 0.0);
  if (ids.empty()) {
    out.empty = true;
    return out;
  }
  if (token_weights) {
    double mx = -INFINITY;
    for (auto id : ids) mx = std::max(mx, (*token_weights)[id]);
    out.alpha.resize(ids.size());
    double s = 0.0;
    for (std::size_t t = 0; t < ids.size(); ++t) s += (out.alpha[t] = std::exp((*token_weights)[ids[t]] - mx));
    for (double& a : out.alpha) a /= s;
  }
  const double inv = 1.0 / static_cast<double>(ids.size());
  for (std::size_t t = 0; t < ids.size(); ++t) {
    const double w = token_weights ? out.alpha[t] : inv;
    auto r = emb.vectors.row(ids[t]);
    for (std::size_t c = 0; c < r.size(); ++c) out.h[c] += w * r[c];
  }
  return out;
}

inline Vector encode_utterance(const std::vector<std::string>& tokens, const EmbeddingTable& emb) {
  const auto ids = emb.ids(tokens);
  return pool(ids, emb).h;
}

// h_i (+) h_j (+) (h_i - h_j) (+) (h_i * h_j)
inline Vector stance_features(std::span<const double> h_i, std::span<const double> h_j) {
  if (h_i.size() != h_j.size()) throw DimensionMismatch(h_i.size(), h_j.size());
  const std::size_t d = h_i.size();
  Vector x(4 * d);
  for (std::size_t c = 0; c < d; ++c) {
    x[c] = h_i[c];
    x[d + c] = h_j[c];
    x[2 * d + c] = h_i[c] - h_j[c];
    x[3 * d + c] = h_i[c] * h_j[c];
  }
  return x;
}

struct MlpTrace {
  Vector x, a1, r1, a2, r2, z;
};

inline MlpTrace forward_trace(std::span<const double> x, const MlpParams& p) {
  if (x.size() != p.input_dim()) throw DimensionMismatch(p.input_dim(), x.size());
  MlpTrace t;
  t.x.assign(x.begin(), x.end());
  t.a1 = affine(p.layers[0].w, t.x, p.layers[0].b);
  t.r1 = t.a1;
  relu_inplace(t.r1);
  t.a2 = affine(p.layers[1].w, t.r1, p.layers[1].b);
  t.r2 = t.a2;
  relu_inplace(t.r2);
  t.z = affine(p.layers[2].w, t.r2, p.layers[2].b);
  return t;
}

// z = W3 relu(W2 relu(W1 x + b1) + b2) + b3
inline Vector forward(std::span<const double> x, const MlpParams& p) { return forward_trace(x, p).z; }

// One training/inference instance as vocabulary ids. `second` is the earlier
// utterance u_j for stance pairs and empty for the offensive task.
struct EncodedExample {
  std::vector<std::size_t> first;
  std::vector<std::size_t> second;
  std::size_t label = 0;
};

struct ExampleTrace {
  Pooled hi, hj;
  MlpTrace mlp;
};

inline ExampleTrace forward_example(const EncodedExample& ex, const NbowModel& m) {
  ExampleTrace t;
  const Vector* tw = m.weighted_pooling ? &m.token_weights : nullptr;
  t.hi = pool(ex.first, m.embeddings, tw);
  if (m.task == Task::Stance) {
    t.hj = pool(ex.second, m.embeddings, tw);
    t.mlp = forward_trace(stance_features(t.hi.h, t.hj.h), m.mlp);
  } else {
    t.mlp = forward_trace(t.hi.h, m.mlp);
  }
  return t;
}

inline Vector predict_proba(const EncodedExample& ex, const NbowModel& m) {
  return softmax(forward_example(ex, m).mlp.z);
}

inline std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

// Same shapes as the trainable parameters of an NbowModel.
struct Gradients {
  Matrix embeddings;
  Vector token_weights;
  MlpParams mlp;

  static Gradients zeros_like(const NbowModel& m) {
    Gradients g;
    g.embeddings = Matrix(m.embeddings.size(), m.embeddings.dim());
    g.token_weights.assign(m.token_weights.size(), 0.0);
    g.mlp = MlpParams::zeros(m.mlp.input_dim(), m.mlp.layers[0].w.rows, m.mlp.layers[1].w.rows,
                             m.mlp.output_dim());
    return g;
  }
};

namespace detail {

inline void backprop_pool(std::span<const std::size_t> ids, const Pooled& pooled,
                          std::span<const double> dh, const NbowModel& m, Gradients& g,
                          bool train_embeddings) {
  if (ids.empty()) return;
  const std::size_t d = dh.size();
  if (m.weighted_pooling) {
    double h_dot = 0.0;
    for (std::size_t c = 0; c < d; ++c) h_dot += pooled.h[c] * dh[c];
    for (std::size_t t = 0; t < ids.size(); ++t) {
      auto e = m.embeddings.vectors.row(ids[t]);
      double e_dot = 0.0;
      for (std::size_t c = 0; c < d; ++c) e_dot += e[c] * dh[c];
      g.token_weights[ids[t]] += pooled.alpha[t] * (e_dot - h_dot);
      if (train_embeddings) {
        auto ge = g.embeddings.row(ids[t]);
        for (std::size_t c = 0; c < d; ++c) ge[c] += pooled.alpha[t] * dh[c];
      }
    }
  } else if (train_embeddings) {
    const double inv = 1.0 / static_cast<double>(ids.size());
    for (auto id : ids) {
      auto ge = g.embeddings.row(id);
      for (std::size_t c = 0; c < d; ++c) ge[c] += inv * dh[c];
    }
  }
}

}  // namespace detail

// Accumulates scale * dLoss/dparams for one example into g and returns its loss.
inline double accumulate_gradients(const EncodedExample& ex, const NbowModel& m, const LossConfig& loss,
                                   Gradients& g, double scale = 1.0, bool train_embeddings = true) {
  const ExampleTrace t = forward_example(ex, m);
  const double value = loss_value(t.mlp.z, ex.label, loss);
  Vector dz = loss_grad(t.mlp.z, ex.label, loss);
  for (double& x : dz) x *= scale;

  auto& L = m.mlp.layers;
  auto& G = g.mlp.layers;
  add_outer(G[2].w, dz, t.mlp.r2);
  for (std::size_t i = 0; i < dz.size(); ++i) G[2].b[i] += dz[i];

  Vector da2(t.mlp.a2.size(), 0.0);
  add_transpose_times(L[2].w, dz, da2);
  for (std::size_t i = 0; i < da2.size(); ++i)
    if (t.mlp.a2[i] <= 0.0) da2[i] = 0.0;
  add_outer(G[1].w, da2, t.mlp.r1);
  for (std::size_t i = 0; i < da2.size(); ++i) G[1].b[i] += da2[i];

  Vector da1(t.mlp.a1.size(), 0.0);
  add_transpose_times(L[1].w, da2, da1);
  for (std::size_t i = 0; i < da1.size(); ++i)
    if (t.mlp.a1[i] <= 0.0) da1[i] = 0.0;
  add_outer(G[0].w, da1, t.mlp.x);
  for (std::size_t i = 0; i < da1.size(); ++i) G[0].b[i] += da1[i];

  const bool need_input_grad = train_embeddings || m.weighted_pooling;
  if (!need_input_grad) return value;
  Vector dx(t.mlp.x.size(), 0.0);
  add_transpose_times(L[0].w, da1, dx);

  if (m.task == Task::Offensive) {
    detail::backprop_pool(ex.first, t.hi, dx, m, g, train_embeddings);
  } else {
    const std::size_t d = t.hi.h.size();
    Vector dhi(d), dhj(d);
    for (std::size_t c = 0; c < d; ++c) {
      dhi[c] = dx[c] + dx[2 * d + c] + dx[3 * d + c] * t.hj.h[c];
      dhj[c] = dx[d + c] - dx[2 * d + c] + dx[3 * d + c] * t.hi.h[c];
    }
    detail::backprop_pool(ex.first, t.hi, dhi, m, g, train_embeddings);
    detail::backprop_pool(ex.second, t.hj, dhj, m, g, train_embeddings);
  }
  return value;
}

// Mean loss over the batch and its exact gradient.
inline double batch_gradients(std::span<const EncodedExample> batch, const NbowModel& m,
                              const LossConfig& loss, Gradients& g, bool train_embeddings = true) {
  if (batch.empty()) return 0.0;
  const double scale = 1.0 / static_cast<double>(batch.size());
  double total = 0.0;
  for (const auto& ex : batch) total += accumulate_gradients(ex, m, loss, g, scale, train_embeddings);
  return total * scale;
}

inline double batch_loss(std::span<const EncodedExample> batch, const NbowModel& m, const LossConfig& loss) {
  if (batch.empty()) return 0.0;
  double total = 0.0;
  for (const auto& ex : batch) total += loss_value(forward_example(ex, m).mlp.z, ex.label, loss);
  return total / static_cast<double>(batch.size());
}

// Visits (parameter, gradient, name) tensor pairs in a fixed order.
template <typename Fn>
void for_each_tensor(NbowModel& m, Gradients& g, Fn&& fn, bool include_embeddings = true) {
  if (include_embeddings) fn(std::span<double>(m.embeddings.vectors.data), std::span<double>(g.embeddings.data), "embeddings");
  if (m.weighted_pooling) fn(std::span<double>(m.token_weights), std::span<double>(g.token_weights), "token_weights");
  for (std::size_t l = 0; l < 3; ++l) {
    const std::string n = std::to_string(l + 1);
    fn(std::span<double>(m.mlp.layers[l].w.data), std::span<double>(g.mlp.layers[l].w.data), "W" + n);
    fn(std::span<double>(m.mlp.layers[l].b), std::span<double>(g.mlp.layers[l].b), "b" + n);
  }
}

}  // namespace convsafe::nbow
