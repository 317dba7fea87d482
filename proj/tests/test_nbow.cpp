#include <catch_amalgamated.hpp>

#include <cmath>
#include <numbers>
#include <sstream>

#include "convsafe/nbow/checkpoint.hpp"
#include "convsafe/nbow/dataset.hpp"
#include "convsafe/nbow/gradcheck.hpp"
#include "convsafe/nbow/loss.hpp"
#include "convsafe/nbow/model.hpp"
#include "convsafe/nbow/train.hpp"

using namespace convsafe;
using namespace convsafe::nbow;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

// Straight-line oracles, written independently of the library code paths.

long double oracle_ce(const std::vector<double>& z, std::size_t y) {
  long double s = 0.0L;
  for (double v : z) s += std::exp(static_cast<long double>(v));
  return -std::log(std::exp(static_cast<long double>(z[y])) / s);
}

long double oracle_cb_focal(const std::vector<double>& z, std::size_t y, long double beta, long double gamma,
                            const std::vector<double>& n) {
  long double reweight = (1.0L - beta) / (1.0L - std::pow(beta, static_cast<long double>(n[y])));
  long double sum = 0.0L;
  for (std::size_t m = 0; m < z.size(); ++m) {
    long double zp = m == y ? z[m] : -z[m];
    long double p = 1.0L / (1.0L + std::exp(-zp));
    sum += std::pow(1.0L - p, gamma) * std::log(p);
  }
  return -reweight * sum;
}

std::vector<double> oracle_mlp(const std::vector<double>& x, const MlpParams& p) {
  std::vector<double> cur = x;
  for (std::size_t l = 0; l < 3; ++l) {
    const auto& L = p.layers[l];
    std::vector<double> next(L.w.rows);
    for (std::size_t r = 0; r < L.w.rows; ++r) {
      double s = L.b[r];
      for (std::size_t c = 0; c < L.w.cols; ++c) s += L.w.data[r * L.w.cols + c] * cur[c];
      next[r] = (l < 2 && s < 0.0) ? 0.0 : s;
    }
    cur = next;
  }
  return cur;
}

NbowModel random_model(Task task, std::size_t d, std::size_t h1, std::size_t h2, Rng& rng, bool weighted = false) {
  ModelConfig mc;
  mc.dim = d;
  mc.hidden1 = h1;
  mc.hidden2 = h2;
  mc.init_sigma = 1.0;
  mc.weighted_pooling = weighted;
  std::vector<std::string> vocab = {"a", "b", "c", "d", "e", "f"};
  auto m = make_model(task, vocab, mc, rng);
  for (auto& l : m.mlp.layers)
    for (double& b : l.b) b = rng.normal(0.0, 0.5);
  for (double& w : m.token_weights) w = rng.normal(0.0, 1.0);
  return m;
}

std::vector<EncodedExample> random_batch(Task task, std::size_t n, std::size_t vocab, Rng& rng) {
  std::vector<EncodedExample> out;
  for (std::size_t i = 0; i < n; ++i) {
    EncodedExample ex;
    for (std::size_t k = 0, len = 1 + rng.below(4); k < len; ++k) ex.first.push_back(rng.below(vocab));
    if (task == Task::Stance)
      for (std::size_t k = 0, len = 1 + rng.below(4); k < len; ++k) ex.second.push_back(rng.below(vocab));
    ex.label = rng.below(num_classes(task));
    out.push_back(ex);
  }
  return out;
}

// Max relative error between the analytic gradient and central differences (test-local).
double fd_max_error(NbowModel m, const std::vector<EncodedExample>& batch, const LossConfig& loss, double h = 1e-4) {
  Gradients g = Gradients::zeros_like(m);
  batch_gradients(batch, m, loss, g);
  double worst = 0.0;
  std::vector<std::span<double>> ps, gs;
  for_each_tensor(m, g, [&](std::span<double> p, std::span<double> gr, const std::string&) {
    ps.push_back(p);
    gs.push_back(gr);
  });
  for (std::size_t t = 0; t < ps.size(); ++t)
    for (std::size_t i = 0; i < ps[t].size(); ++i) {
      const double o = ps[t][i];
      ps[t][i] = o + h;
      const double up = batch_loss(batch, m, loss);
      ps[t][i] = o - h;
      const double dn = batch_loss(batch, m, loss);
      ps[t][i] = o;
      const double num = (up - dn) / (2 * h);
      const double a = gs[t][i];
      worst = std::max(worst, std::abs(a - num) / std::max({std::abs(a), std::abs(num), 1e-6}));
    }
  return worst;
}

LossConfig make_loss(LossKind kind, std::size_t n_classes) {
  LossConfig c;
  c.kind = kind;
  c.weights.assign(n_classes, 100.0);
  c.weights[0] = 1.0;
  c.beta = 0.9999;
  c.gamma = 1.0;
  for (std::size_t k = 0; k < n_classes; ++k) c.class_counts.push_back(3.0 + 7.0 * static_cast<double>(k));
  return c;
}

}  // namespace

TEST_CASE("encode_utterance averages token vectors", "[nbow][encode]") {
  EmbeddingTable emb({"x", "y"}, 3);
  emb.vectors.row(1)[0] = 1.0, emb.vectors.row(1)[1] = 2.0, emb.vectors.row(1)[2] = 3.0;
  emb.vectors.row(2)[0] = -1.0, emb.vectors.row(2)[1] = 4.0, emb.vectors.row(2)[2] = 0.5;

  SECTION("two tokens give (e1+e2)/2") {
    auto h = encode_utterance({"x", "y"}, emb);
    CHECK(h == Vector{0.0, 3.0, 1.75});
  }
  SECTION("single token is its own vector") {
    auto h = encode_utterance({"y"}, emb);
    CHECK(h == Vector{-1.0, 4.0, 0.5});
  }
  SECTION("empty input is the flagged zero vector") {
    std::vector<std::size_t> none;
    auto p = pool(none, emb);
    CHECK(p.empty);
    CHECK(p.h == Vector(3, 0.0));
  }
  SECTION("unknown tokens map to the <unk> row") {
    CHECK(emb.lookup("never-seen") == 0);
  }
  SECTION("random tokens match a straight-line mean") {
    Rng rng(7);
    EmbeddingTable big({"t1", "t2", "t3", "t4", "t5", "t6", "t7"}, 9);
    big.init_random(rng, 1.0);
    std::vector<std::string> toks;
    for (int i = 0; i < 5; ++i) toks.push_back("t" + std::to_string(1 + rng.below(7)));
    auto h = encode_utterance(toks, big);
    for (std::size_t c = 0; c < 9; ++c) {
      double s = 0.0;
      for (const auto& t : toks) s += big.vectors(big.lookup(t), c);
      CHECK_THAT(h[c], WithinAbs(s / 5.0, 1e-12));
    }
  }
}

TEST_CASE("stance_features block layout", "[nbow][stance]") {
  SECTION("hand-computed d=2 example") {
    auto x = stance_features(Vector{1, 2}, Vector{3, -1});
    CHECK(x == Vector{1, 2, 3, -1, -2, 3, 3, -2});
  }
  SECTION("h_i == h_j gives (v, v, 0, v*v)") {
    Vector v{0.5, -2.0, 3.0};
    auto x = stance_features(v, v);
    CHECK(x == Vector{0.5, -2.0, 3.0, 0.5, -2.0, 3.0, 0.0, 0.0, 0.0, 0.25, 4.0, 9.0});
  }
  SECTION("output is 4d for d in 1..16") {
    for (std::size_t d = 1; d <= 16; ++d) CHECK(stance_features(Vector(d, 1.0), Vector(d, 2.0)).size() == 4 * d);
  }
  SECTION("dimension mismatch throws") {
    CHECK_THROWS_AS(stance_features(Vector(2), Vector(3)), DimensionMismatch);
  }
}

TEST_CASE("forward pass", "[nbow][forward]") {
  SECTION("zero parameters give zero logits") {
    auto p = MlpParams::zeros(4, 3, 3, 2);
    CHECK(forward(Vector{1, 2, 3, 4}, p) == Vector{0.0, 0.0});
  }
  SECTION("identity 1x1 layers pass x through") {
    auto p = MlpParams::zeros(1, 1, 1, 1);
    for (auto& l : p.layers) l.w.data[0] = 1.0;
    CHECK(forward(Vector{2.5}, p) == Vector{2.5});
  }
  SECTION("random parameters match a matrix-arithmetic oracle") {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
      auto m = random_model(Task::Stance, 1 + rng.below(6), 2 + rng.below(6), 2 + rng.below(6), rng);
      Vector x(m.mlp.input_dim());
      for (double& v : x) v = rng.normal();
      auto z = forward(x, m.mlp);
      auto o = oracle_mlp(x, m.mlp);
      REQUIRE(z.size() == o.size());
      for (std::size_t i = 0; i < z.size(); ++i) CHECK_THAT(z[i], WithinAbs(o[i], 1e-10));
    }
  }
  SECTION("wrong input dimension throws") {
    auto p = MlpParams::zeros(4, 3, 3, 2);
    CHECK_THROWS_AS(forward(Vector{1, 2}, p), DimensionMismatch);
  }
  SECTION("argmax is invariant under a constant logit shift") {
    Rng rng(3);
    for (int i = 0; i < 50; ++i) {
      Vector z{rng.normal(), rng.normal(), rng.normal()};
      Vector shifted = z;
      const double c = rng.normal(0.0, 10.0);
      for (double& v : shifted) v += c;
      CHECK(argmax(softmax(z)) == argmax(softmax(shifted)));
    }
  }
}

TEST_CASE("cross-entropy losses", "[nbow][loss]") {
  SECTION("uniform two-class logits give ln 2") {
    CHECK_THAT(loss_ce(Vector{0, 0}, 0), WithinAbs(std::numbers::ln2, 1e-15));
  }
  SECTION("wCE (1,100,100) at uniform logits gives 100 ln 3") {
    CHECK_THAT(loss_wce(Vector{0, 0, 0}, 1, Vector{1, 100, 100}), WithinAbs(100.0 * std::log(3.0), 1e-12));
    CHECK_THAT(loss_wce(Vector{0, 0, 0}, 1, Vector{1, 100, 100}), WithinAbs(109.861, 1e-3));
  }
  SECTION("random logits match the extended-precision oracle") {
    Rng rng(5);
    for (int i = 0; i < 200; ++i) {
      Vector z{rng.normal(0, 3), rng.normal(0, 3), rng.normal(0, 3)};
      const auto y = rng.below(3);
      CHECK_THAT(loss_ce(z, y), WithinAbs(static_cast<double>(oracle_ce(z, y)), 1e-10));
    }
  }
  SECTION("log-sum-exp keeps huge logits finite") {
    CHECK(std::isfinite(loss_ce(Vector{1000.0, -1000.0}, 1)));
    CHECK_THAT(loss_ce(Vector{1000.0, -1000.0}, 1), WithinAbs(2000.0, 1e-9));
  }
  SECTION("wCE with unit weights is CE exactly") {
    Rng rng(9);
    for (int i = 0; i < 100; ++i) {
      Vector z{rng.normal(), rng.normal(), rng.normal()};
      const auto y = rng.below(3);
      CHECK(loss_wce(z, y, Vector{1, 1, 1}) == loss_ce(z, y));
    }
  }
  SECTION("CE gradient at uniform logits is softmax - onehot") {
    LossConfig c;
    CHECK(loss_grad(Vector{0, 0}, 0, c) == Vector{-0.5, 0.5});
  }
  SECTION("label out of range throws") {
    CHECK_THROWS_AS(loss_ce(Vector{0, 0}, 2), UsageError);
  }
}

TEST_CASE("class-balanced focal loss", "[nbow][loss][cbfocal]") {
  SECTION("zero-logit symmetry with beta=0, gamma=0 is 2 ln 2") {
    CHECK_THAT(loss_cb_focal(Vector{0, 0}, 0, 0.0, 0.0, Vector{1, 1}), WithinAbs(2.0 * std::numbers::ln2, 1e-12));
  }
  SECTION("reweighting factor at beta=0.5, n=2 is exactly 2/3") {
    CHECK(cb_reweight(0.5, 2.0) == 2.0 / 3.0);
  }
  SECTION("paper defaults on random logits match the straight-line oracle") {
    Rng rng(13);
    for (int i = 0; i < 200; ++i) {
      Vector z{rng.normal(0, 2), rng.normal(0, 2), rng.normal(0, 2)};
      Vector n{1.0 + static_cast<double>(rng.below(5000)), 1.0 + static_cast<double>(rng.below(500)),
               1.0 + static_cast<double>(rng.below(100))};
      const auto y = rng.below(3);
      const double got = loss_cb_focal(z, y, 0.9999, 1.0, n);
      CHECK_THAT(got, WithinAbs(static_cast<double>(oracle_cb_focal(z, y, 0.9999L, 1.0L, n)), 1e-10));
    }
  }
  SECTION("beta=0 leaves the pure focal term") {
    Rng rng(17);
    for (int i = 0; i < 50; ++i) {
      Vector z{rng.normal(), rng.normal(), rng.normal()};
      const auto y = rng.below(3);
      CHECK(loss_cb_focal(z, y, 0.0, 1.7, Vector{4, 9, 30}) == focal_term(z, y, 1.7));
    }
  }
  SECTION("beta=0, gamma=0 is per-class sigmoid cross-entropy") {
    Rng rng(19);
    for (int i = 0; i < 50; ++i) {
      Vector z{rng.normal(), rng.normal(), rng.normal()};
      const auto y = rng.below(3);
      double bce = 0.0;
      for (std::size_t m = 0; m < 3; ++m) {
        const double p = 1.0 / (1.0 + std::exp(-z[m]));
        bce -= m == y ? std::log(p) : std::log(1.0 - p);
      }
      CHECK_THAT(loss_cb_focal(z, y, 0.0, 0.0, Vector{1, 1, 1}), WithinAbs(bce, 1e-12));
    }
  }
  SECTION("reweighting strictly decreases with class count") {
    // n kept small enough that beta^n is not absorbed by 1 - beta^n in double precision
    for (double beta : {0.5, 0.9, 0.999, 0.9999})
      for (double n = 1; n < 40; ++n) CHECK(cb_reweight(beta, n + 1) < cb_reweight(beta, n));
  }
  SECTION("zero-gamma gradient equals the sigmoid cross-entropy gradient") {
    Rng rng(23);
    LossConfig c;
    c.kind = LossKind::CBFocal;
    c.beta = 0.0;
    c.gamma = 0.0;
    c.class_counts = {1, 1, 1};
    for (int i = 0; i < 100; ++i) {
      Vector z{rng.normal(), rng.normal(), rng.normal()};
      const auto y = rng.below(3);
      auto g = loss_grad(z, y, c);
      for (std::size_t m = 0; m < 3; ++m) {
        const double s = 1.0 / (1.0 + std::exp(-z[m]));
        CHECK_THAT(g[m], WithinAbs(m == y ? s - 1.0 : s, 1e-10));
      }
    }
  }
  SECTION("invalid configurations are rejected") {
    LossConfig c;
    c.kind = LossKind::CBFocal;
    c.class_counts = {1, 2, 3};
    c.beta = 1.0;
    CHECK_THROWS_AS(c.validate(3), UsageError);
    c.beta = 0.5;
    c.gamma = -1;
    CHECK_THROWS_AS(c.validate(3), UsageError);
    c.gamma = 1;
    c.class_counts = {0, 2, 3};
    CHECK_THROWS_AS(c.validate(3), UsageError);
  }
}

TEST_CASE("analytic gradients match central differences", "[nbow][backward]") {
  Rng rng(31);
  for (Task task : {Task::Offensive, Task::Stance}) {
    for (bool weighted : {false, true}) {
      for (LossKind kind : {LossKind::CE, LossKind::WeightedCE, LossKind::CBFocal}) {
        DYNAMIC_SECTION(to_string(task) << (weighted ? " weighted" : " mean") << " " << to_string(kind)) {
          int checked = 0;
          while (checked < 5) {
            auto m = random_model(task, 5, 7, 6, rng, weighted);
            auto batch = random_batch(task, 4, m.embeddings.size(), rng);
            if (near_kink(batch, m, 1e-3)) continue;
            CHECK(fd_max_error(m, batch, make_loss(kind, num_classes(task))) < 1e-4);
            ++checked;
          }
        }
      }
    }
  }
}

TEST_CASE("library gradcheck over random stance networks", "[nbow][gradcheck]") {
  GradCheckConfig cfg;
  cfg.networks = 20;
  auto r = run_gradcheck(cfg);
  INFO("worst entry " << r.worst);
  CHECK(r.networks == 20);
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("70-15-15 split", "[nbow][split]") {
  auto ids = [](std::size_t n) {
    std::vector<std::string> v;
    for (std::size_t i = 0; i < n; ++i) v.push_back("t" + std::to_string(i));
    return v;
  };
  SECTION("n=100") {
    auto s = split_70_15_15(ids(100), 1);
    CHECK(s.train.size() == 70);
    CHECK(s.dev.size() == 15);
    CHECK(s.test.size() == 15);
  }
  SECTION("n=10") {
    auto s = split_70_15_15(ids(10), 1);
    CHECK(s.train.size() == 7);
    CHECK(s.dev.size() == 1);
    CHECK(s.test.size() == 2);
  }
  SECTION("partition: no id in two splits, none lost") {
    auto s = split_70_15_15(ids(57), 4);
    std::set<std::string> all;
    for (const auto* part : {&s.train, &s.dev, &s.test})
      for (const auto& x : *part) CHECK(all.insert(x).second);
    CHECK(all.size() == 57);
  }
  SECTION("fewer than 10 items is rejected") {
    CHECK_THROWS_AS(split_70_15_15(ids(9), 1), NotEnoughData);
  }
}

namespace {

std::vector<TextExample> trigger_set(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  const std::vector<std::string> filler = {"the", "a", "cat", "dog", "runs", "blue", "sky", "tree", "idea", "red"};
  std::vector<TextExample> out;
  for (std::size_t i = 0; i < n; ++i) {
    TextExample ex;
    for (std::size_t k = 0, len = 3 + rng.below(5); k < len; ++k) ex.first.push_back(filler[rng.below(filler.size())]);
    ex.label = rng.below(2);
    if (ex.label) ex.first.insert(ex.first.begin() + static_cast<long>(rng.below(ex.first.size())), "vile");
    out.push_back(ex);
  }
  return out;
}

}  // namespace

TEST_CASE("training loop", "[nbow][train]") {
  ModelConfig mc;
  mc.dim = 16;
  mc.hidden1 = 16;
  mc.hidden2 = 8;
  TrainConfig tc;
  tc.learning_rate = 1e-2;
  tc.epochs = 10;
  tc.batch_size = 16;
  tc.seed = 42;
  const auto tr = trigger_set(300, 1), dev = trigger_set(80, 2);

  SECTION("learns a trigger-token rule") {
    auto r = train(Task::Offensive, tr, dev, mc, tc, LossConfig{});
    CHECK(r.best_dev_metric >= 0.95);
    CHECK(r.history.size() == 10);
  }
  SECTION("same seed gives identical parameters and trajectory") {
    auto a = train(Task::Offensive, tr, dev, mc, tc, LossConfig{});
    auto b = train(Task::Offensive, tr, dev, mc, tc, LossConfig{});
    CHECK(a.best.mlp.layers[0].w == b.best.mlp.layers[0].w);
    CHECK(a.best.embeddings.vectors == b.best.embeddings.vectors);
    for (std::size_t i = 0; i < a.history.size(); ++i) {
      CHECK(a.history[i].train_loss == b.history[i].train_loss);
      CHECK(a.history[i].dev_metric == b.history[i].dev_metric);
    }
  }
  SECTION("epochs = 0 is rejected") {
    tc.epochs = 0;
    CHECK_THROWS_AS(train(Task::Offensive, tr, dev, mc, tc, LossConfig{}), UsageError);
  }
  SECTION("non-finite loss is reported as divergence") {
    tc.learning_rate = 1e300;
    tc.epochs = 3;
    LossConfig wce;
    wce.kind = LossKind::WeightedCE;
    wce.weights = {1e300, 1e300};
    CHECK_THROWS_AS(train(Task::Offensive, tr, dev, mc, tc, wce), DivergenceDetected);
  }
}

TEST_CASE("checkpoint round-trips bit-exactly", "[nbow][checkpoint]") {
  Rng rng(77);
  for (bool weighted : {false, true}) {
    auto m = random_model(Task::Stance, 4, 5, 3, rng, weighted);
    std::stringstream ss;
    save_model(m, ss);
    auto back = load_model(ss);
    CHECK(back.task == m.task);
    CHECK(back.embeddings.tokens() == m.embeddings.tokens());
    CHECK(back.embeddings.vectors == m.embeddings.vectors);
    CHECK(back.token_weights == m.token_weights);
    for (std::size_t l = 0; l < 3; ++l) {
      CHECK(back.mlp.layers[l].w == m.mlp.layers[l].w);
      CHECK(back.mlp.layers[l].b == m.mlp.layers[l].b);
    }
    std::stringstream again;
    save_model(back, again);
    std::stringstream first;
    save_model(m, first);
    CHECK(again.str() == first.str());
  }
  SECTION("garbage is a schema error") {
    std::stringstream bad("{\"format\": \"something-else\"}");
    CHECK_THROWS_AS(load_model(bad), SchemaError);
  }
}

TEST_CASE("pretrained embeddings and OOV policy", "[nbow][embeddings]") {
  EmbeddingTable emb({"hello", "world", "missing"}, 2);
  std::stringstream file("hello 1 2\nworld -0.5 0.25\nunrelated 9 9\n");
  SECTION("zero policy") {
    CHECK(emb.load_pretrained(file, {OovPolicy::Kind::ZeroVector, 0}) == 2);
    CHECK(emb.vectors.row(emb.lookup("hello"))[1] == 2.0);
    CHECK(emb.vectors.row(emb.lookup("missing"))[0] == 0.0);
  }
  SECTION("random policy is seeded") {
    EmbeddingTable other({"hello", "world", "missing"}, 2);
    std::stringstream file2(file.str());
    emb.load_pretrained(file, {OovPolicy::Kind::RandomVector, 5});
    other.load_pretrained(file2, {OovPolicy::Kind::RandomVector, 5});
    CHECK(emb.vectors == other.vectors);
    CHECK(emb.vectors.row(emb.lookup("missing"))[0] != 0.0);
  }
  SECTION("wrong width is a data error") {
    std::stringstream bad("hello 1 2 3\n");
    CHECK_THROWS_AS(emb.load_pretrained(bad, {}), DataError);
  }
}
