#pragma once

// Uniform scoring over the builtin NBOW models and remote HTTP scorers,
// precision-targeted threshold calibration, and high-precision pseudo-labelling.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <semaphore>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "convsafe/corpus.hpp"
#include "convsafe/error.hpp"
#include "convsafe/nbow/checkpoint.hpp"
#include "convsafe/nbow/model.hpp"
#include "convsafe/nbow/train.hpp"

namespace convsafe {

using nbow::Task;

inline const std::vector<std::string>& class_names(Task task) {
  static const std::vector<std::string> off = {"safe", "offensive"};
  static const std::vector<std::string> st = {"neutral", "agree", "disagree"};
  return task == Task::Offensive ? off : st;
}

struct ScoreVector {
  Task task = Task::Offensive;
  std::vector<double> probs;

  std::size_t argmax() const { return nbow::argmax(probs); }
};

inline void check_score_vector(const ScoreVector& s) {
  if (s.probs.size() != nbow::num_classes(s.task))
    throw SchemaError("expected " + std::to_string(nbow::num_classes(s.task)) + " probabilities, got " +
                      std::to_string(s.probs.size()));
  double sum = 0.0;
  for (double p : s.probs) {
    if (!std::isfinite(p) || p < 0.0 || p > 1.0) throw SchemaError("probability outside [0, 1]");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-6) throw SchemaError("probabilities sum to " + std::to_string(sum));
}

// Offensive input: the utterance text, optionally with its flattened thread context.
struct OffensiveInput {
  std::string text;
  std::string context;
};

// Stance input: a = earlier utterance, b = later utterance (stance of b toward a).
struct StanceInput {
  std::string a;
  std::string b;
};

class Scorer {
 public:
  virtual ~Scorer() = default;
  virtual std::vector<ScoreVector> score_offensive(std::span<const OffensiveInput> items) = 0;
  virtual std::vector<ScoreVector> score_stance(std::span<const StanceInput> items) = 0;
};

// Builtin NBOW backend. The bag-of-words model has no thread context, so
// OffensiveInput::context is ignored.
class BuiltinScorer : public Scorer {
 public:
  BuiltinScorer(std::shared_ptr<const nbow::NbowModel> offensive, std::shared_ptr<const nbow::NbowModel> stance,
                PreprocessConfig cfg = {})
      : offensive_(std::move(offensive)), stance_(std::move(stance)), cfg_(std::move(cfg)) {
    if (offensive_ && offensive_->task != Task::Offensive) throw UsageError("offensive scorer needs an offensive model");
    if (stance_ && stance_->task != Task::Stance) throw UsageError("stance scorer needs a stance model");
  }

  std::vector<ScoreVector> score_offensive(std::span<const OffensiveInput> items) override {
    if (!offensive_) throw UsageError("no offensive model loaded");
    std::vector<ScoreVector> out;
    out.reserve(items.size());
    for (const auto& it : items) {
      nbow::EncodedExample ex{offensive_->embeddings.ids(utterance_tokens(it.text, cfg_)), {}, 0};
      out.push_back({Task::Offensive, nbow::predict_proba(ex, *offensive_)});
    }
    return out;
  }

  std::vector<ScoreVector> score_stance(std::span<const StanceInput> items) override {
    if (!stance_) throw UsageError("no stance model loaded");
    std::vector<ScoreVector> out;
    out.reserve(items.size());
    for (const auto& it : items) {
      nbow::EncodedExample ex{stance_->embeddings.ids(utterance_tokens(it.b, cfg_)),
                              stance_->embeddings.ids(utterance_tokens(it.a, cfg_)), 0};
      out.push_back({Task::Stance, nbow::predict_proba(ex, *stance_)});
    }
    return out;
  }

 private:
  std::shared_ptr<const nbow::NbowModel> offensive_;
  std::shared_ptr<const nbow::NbowModel> stance_;
  PreprocessConfig cfg_;
};

struct RemoteConfig {
  std::string url;  // http://host:port[/prefix]; requests go to <prefix>/score
  std::size_t batch_size = 64;
  int max_retries = 3;
  std::chrono::milliseconds backoff{200};  // doubled after every failed attempt
  std::size_t max_in_flight = 4;
  std::chrono::seconds timeout{30};
};

// Client for the POST /score protocol:
//   request  {"task": "offensive"|"stance", "items": [{"text": s} | {"a": s, "b": s}]}
//   response {"probs": [[p, ...], ...]}
class RemoteScorer : public Scorer {
 public:
  explicit RemoteScorer(RemoteConfig cfg)
      : cfg_(std::move(cfg)), budget_(static_cast<std::ptrdiff_t>(std::max<std::size_t>(1, cfg_.max_in_flight))) {
    if (cfg_.batch_size == 0) throw UsageError("remote batch size must be positive");
    if (cfg_.max_in_flight > 1024) throw UsageError("max_in_flight must be <= 1024");
    auto scheme = cfg_.url.find("://");
    const std::size_t host_start = scheme == std::string::npos ? 0 : scheme + 3;
    auto slash = cfg_.url.find('/', host_start);
    base_ = cfg_.url.substr(0, slash);
    prefix_ = slash == std::string::npos ? "" : cfg_.url.substr(slash);
    while (!prefix_.empty() && prefix_.back() == '/') prefix_.pop_back();
  }

  std::vector<ScoreVector> score_offensive(std::span<const OffensiveInput> items) override {
    std::vector<nlohmann::json> payload;
    payload.reserve(items.size());
    for (const auto& it : items) payload.push_back({{"text", it.context.empty() ? it.text : it.context + it.text}});
    return score(Task::Offensive, payload);
  }

  std::vector<ScoreVector> score_stance(std::span<const StanceInput> items) override {
    std::vector<nlohmann::json> payload;
    payload.reserve(items.size());
    for (const auto& it : items) payload.push_back({{"a", it.a}, {"b", it.b}});
    return score(Task::Stance, payload);
  }

  std::size_t requests_sent() const { return requests_.load(); }

 private:
  std::vector<ScoreVector> score(Task task, const std::vector<nlohmann::json>& items) {
    std::vector<ScoreVector> out(items.size());
    const std::size_t n_batches = (items.size() + cfg_.batch_size - 1) / cfg_.batch_size;
    if (n_batches == 0) return out;
    std::atomic<std::size_t> next{0};
    std::mutex err_mu;
    std::exception_ptr error;
    auto worker = [&] {
      for (;;) {
        const std::size_t b = next.fetch_add(1);
        if (b >= n_batches) return;
        {
          std::lock_guard lk(err_mu);
          if (error) return;
        }
        const std::size_t lo = b * cfg_.batch_size, hi = std::min(items.size(), lo + cfg_.batch_size);
        try {
          auto probs = send_batch(task, items, lo, hi);
          for (std::size_t i = lo; i < hi; ++i) out[i] = {task, std::move(probs[i - lo])};
        } catch (...) {
          std::lock_guard lk(err_mu);
          if (!error) error = std::current_exception();
        }
      }
    };
    const std::size_t n_workers = std::min(n_batches, std::max<std::size_t>(1, cfg_.max_in_flight));
    if (n_workers == 1) {
      worker();
    } else {
      std::vector<std::jthread> pool;
      for (std::size_t w = 0; w < n_workers; ++w) pool.emplace_back(worker);
    }
    if (error) std::rethrow_exception(error);
    return out;
  }

  std::vector<std::vector<double>> send_batch(Task task, const std::vector<nlohmann::json>& items, std::size_t lo,
                                              std::size_t hi) {
    nlohmann::json req = {{"task", nbow::to_string(task)}, {"items", nlohmann::json::array()}};
    for (std::size_t i = lo; i < hi; ++i) req["items"].push_back(items[i]);
    const std::string body = req.dump();

    std::string last_error;
    auto delay = cfg_.backoff;
    for (int attempt = 0; attempt <= cfg_.max_retries; ++attempt) {
      if (attempt > 0) {
        std::this_thread::sleep_for(delay);
        delay *= 2;
      }
      httplib::Result res;
      {
        budget_.acquire();
        httplib::Client cli(base_);
        cli.set_connection_timeout(cfg_.timeout);
        cli.set_read_timeout(cfg_.timeout);
        ++requests_;
        res = cli.Post(prefix_ + "/score", body, "application/json");
        budget_.release();
      }
      if (!res) {
        last_error = httplib::to_string(res.error());
        continue;
      }
      if (res->status >= 500 || res->status == 429) {
        last_error = "HTTP " + std::to_string(res->status);
        continue;
      }
      if (res->status != 200) throw SchemaError("remote scorer replied HTTP " + std::to_string(res->status));
      return parse_reply(task, res->body, hi - lo);
    }
    throw RemoteUnavailable("remote scorer " + cfg_.url + " unavailable after " + std::to_string(cfg_.max_retries) +
                            " retries: " + last_error);
  }

  static std::vector<std::vector<double>> parse_reply(Task task, const std::string& body, std::size_t expected) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(body);
    } catch (const nlohmann::json::exception& e) {
      throw SchemaError(std::string("remote reply is not JSON: ") + e.what());
    }
    auto probs = j.find("probs");
    if (probs == j.end() || !probs->is_array()) throw SchemaError("remote reply lacks a 'probs' array");
    if (probs->size() != expected)
      throw SchemaError("remote reply has " + std::to_string(probs->size()) + " rows, expected " +
                        std::to_string(expected));
    std::vector<std::vector<double>> out;
    for (const auto& row : *probs) {
      if (!row.is_array()) throw SchemaError("remote probs row is not an array");
      ScoreVector sv{task, {}};
      for (const auto& p : row) {
        if (!p.is_number()) throw SchemaError("remote probability is not a number");
        sv.probs.push_back(p.get<double>());
      }
      check_score_vector(sv);
      out.push_back(std::move(sv.probs));
    }
    return out;
  }

  RemoteConfig cfg_;
  std::string base_, prefix_;
  std::counting_semaphore<1024> budget_;
  std::atomic<std::size_t> requests_{0};
};

// "builtin:PATH" or "remote:URL". A builtin spec loads one checkpoint; its task
// decides which slot it fills.
inline std::shared_ptr<Scorer> make_scorer(const std::string& offensive_spec, const std::string& stance_spec = "",
                                           const RemoteConfig& remote_defaults = {}) {
  auto kind = [](const std::string& s) { return s.substr(0, s.find(':')); };
  auto rest = [](const std::string& s) { return s.substr(s.find(':') + 1); };
  const std::string& first = offensive_spec.empty() ? stance_spec : offensive_spec;
  if (first.empty()) throw UsageError("no scorer given (expected builtin:PATH or remote:URL)");
  if (kind(first) == "remote") {
    RemoteConfig rc = remote_defaults;
    rc.url = rest(first);
    return std::make_shared<RemoteScorer>(rc);
  }
  std::shared_ptr<const nbow::NbowModel> off, st;
  for (const auto* spec : {&offensive_spec, &stance_spec}) {
    if (spec->empty()) continue;
    if (kind(*spec) != "builtin") throw UsageError("scorer spec must be builtin:PATH or remote:URL, got " + *spec);
    auto m = std::make_shared<const nbow::NbowModel>(nbow::load_model(rest(*spec)));
    (m->task == Task::Offensive ? off : st) = m;
  }
  return std::make_shared<BuiltinScorer>(off, st);
}

// P(offensive) of a thread's last comment, for two-stage sampling.
inline ThreadScorer last_comment_scorer(Scorer& scorer) {
  return [&scorer](const Thread& t) {
    OffensiveInput in{last_comment(t).text, {}};
    return scorer.score_offensive(std::span<const OffensiveInput>(&in, 1)).at(0).probs.at(1);
  };
}

// ---------------------------------------------------------------------------
// Threshold calibration
// ---------------------------------------------------------------------------

struct ClassThreshold {
  double threshold = 0.5;
  double achieved_precision = 0.0;
  bool attainable = false;
};

struct ThresholdGrid {
  int lo = 50;  // in hundredths
  int hi = 99;

  double at(int k) const { return static_cast<double>(k) / 100.0; }
};

struct ThresholdTable {
  Task task = Task::Offensive;
  ThresholdGrid grid;
  double target_precision = 0.75;
  std::vector<ClassThreshold> classes;
};

// Precision of "predict c when prob_c >= t"; nullopt when nothing is predicted.
inline std::optional<double> precision_at(const std::vector<ScoreVector>& scores, const std::vector<std::size_t>& golds,
                                          std::size_t c, double t) {
  std::size_t predicted = 0, correct = 0;
  for (std::size_t i = 0; i < scores.size(); ++i)
    if (scores[i].probs[c] >= t) {
      ++predicted;
      correct += golds[i] == c;
    }
  if (predicted == 0) return std::nullopt;
  return static_cast<double>(correct) / static_cast<double>(predicted);
}

// Per class, the smallest grid threshold whose dev precision reaches the target.
inline ThresholdTable calibrate_thresholds(Task task, const std::vector<ScoreVector>& scores,
                                           const std::vector<std::size_t>& golds, double target_precision = 0.75,
                                           ThresholdGrid grid = {}) {
  if (scores.size() != golds.size()) throw LengthMismatch(scores.size(), golds.size());
  if (grid.lo < 0 || grid.hi > 99 || grid.lo > grid.hi) throw UsageError("threshold grid must lie within [0, 0.99]");
  const std::size_t n_classes = nbow::num_classes(task);
  for (const auto& s : scores)
    if (s.probs.size() != n_classes) throw DimensionMismatch(n_classes, s.probs.size());
  ThresholdTable table;
  table.task = task;
  table.grid = grid;
  table.target_precision = target_precision;
  for (std::size_t c = 0; c < n_classes; ++c) {
    if (std::find(golds.begin(), golds.end(), c) == golds.end()) throw NoPositives(c);
    ClassThreshold ct;
    ct.threshold = grid.at(grid.hi);
    for (int k = grid.lo; k <= grid.hi; ++k) {
      const auto p = precision_at(scores, golds, c, grid.at(k));
      if (p && *p >= target_precision) {
        ct.threshold = grid.at(k);
        ct.achieved_precision = *p;
        ct.attainable = true;
        break;
      }
    }
    if (!ct.attainable) ct.achieved_precision = precision_at(scores, golds, c, ct.threshold).value_or(0.0);
    table.classes.push_back(ct);
  }
  return table;
}

inline nlohmann::json to_json(const ThresholdTable& t) {
  nlohmann::json classes = nlohmann::json::array();
  const auto& names = class_names(t.task);
  for (std::size_t c = 0; c < t.classes.size(); ++c)
    classes.push_back({{"label", names[c]},
                       {"threshold", t.classes[c].threshold},
                       {"precision", t.classes[c].achieved_precision},
                       {"attainable", t.classes[c].attainable}});
  return {{"task", nbow::to_string(t.task)},
          {"grid", {{"lo", t.grid.at(t.grid.lo)}, {"hi", t.grid.at(t.grid.hi)}, {"step", 0.01}}},
          {"target", t.target_precision},
          {"classes", std::move(classes)}};
}

inline ThresholdTable threshold_table_from_json(const nlohmann::json& j) {
  try {
    ThresholdTable t;
    t.task = nbow::task_from_string(j.at("task").get<std::string>());
    t.grid.lo = static_cast<int>(std::lround(j.at("grid").at("lo").get<double>() * 100.0));
    t.grid.hi = static_cast<int>(std::lround(j.at("grid").at("hi").get<double>() * 100.0));
    t.target_precision = j.at("target").get<double>();
    for (const auto& c : j.at("classes"))
      t.classes.push_back({c.at("threshold").get<double>(), c.at("precision").get<double>(), c.at("attainable").get<bool>()});
    if (t.classes.size() != nbow::num_classes(t.task)) throw SchemaError("threshold table has wrong class count");
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("malformed threshold table: ") + e.what());
  }
}

inline ThresholdTable load_threshold_table(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open threshold table " + path);
  try {
    return threshold_table_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw SchemaError(std::string("threshold table is not JSON: ") + e.what());
  }
}

// nullopt = Ambiguous.
struct HighPrecisionLabel {
  std::optional<std::size_t> label;
  bool ambiguous() const { return !label; }
};

// Among attainable classes whose probability clears the threshold, the one with
// the largest margin prob - threshold; none qualify -> Ambiguous.
inline HighPrecisionLabel high_precision_label(const ScoreVector& s, const ThresholdTable& table) {
  if (s.probs.size() != table.classes.size()) throw DimensionMismatch(table.classes.size(), s.probs.size());
  HighPrecisionLabel out;
  double best_margin = -1.0;
  for (std::size_t c = 0; c < s.probs.size(); ++c) {
    const auto& ct = table.classes[c];
    if (!ct.attainable || s.probs[c] < ct.threshold) continue;
    const double margin = s.probs[c] - ct.threshold;
    if (margin > best_margin) {
      best_margin = margin;
      out.label = c;
    }
  }
  return out;
}

inline std::string label_name(Task task, const HighPrecisionLabel& l) {
  return l.label ? class_names(task).at(*l.label) : "ambiguous";
}

inline HighPrecisionLabel label_from_name(Task task, const std::string& name) {
  if (name == "ambiguous") return {};
  const auto& names = class_names(task);
  auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) throw SchemaError("unknown " + nbow::to_string(task) + " label \"" + name + "\"");
  return {static_cast<std::size_t>(it - names.begin())};
}

// ---------------------------------------------------------------------------
// Pseudo-labelling
// ---------------------------------------------------------------------------

struct PseudoLabeled {
  Thread thread;
  HighPrecisionLabel offensive;           // of u_k
  HighPrecisionLabel stance;              // of u_k toward u_{k-1}
  std::vector<HighPrecisionLabel> context_offensive;  // of u_1..u_{k-1}; empty when not scored
  std::vector<double> p_offensive;
  std::vector<double> p_stance;

  const HighPrecisionLabel* predecessor_offensive() const {
    return context_offensive.empty() ? nullptr : &context_offensive.back();
  }
  bool context_all_safe() const {
    if (context_offensive.size() + 1 != thread.size()) return false;
    for (const auto& l : context_offensive)
      if (l.label != 0u) return false;
    return true;
  }
};

struct PseudoLabelOptions {
  std::size_t chunk = 512;  // threads scored per round trip
  bool label_context = true;  // also label every context utterance u_1..u_{k-1}
};

struct PseudoLabelStats {
  std::size_t labeled = 0;
  std::size_t skipped_short = 0;
};

inline nlohmann::json to_json(const PseudoLabeled& p) {
  nlohmann::json j = {{"thread", thread_to_json(p.thread)},
                      {"off", label_name(Task::Offensive, p.offensive)},
                      {"stance", label_name(Task::Stance, p.stance)},
                      {"p_off", p.p_offensive},
                      {"p_stance", p.p_stance}};
  if (!p.context_offensive.empty()) {
    auto& ctx = j["context_off"] = nlohmann::json::array();
    for (const auto& l : p.context_offensive) ctx.push_back(label_name(Task::Offensive, l));
  }
  return j;
}

inline PseudoLabeled pseudo_labeled_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw SchemaError("pseudo-label record is not an object");
  PseudoLabeled p;
  auto t = j.find("thread");
  if (t == j.end()) throw SchemaError("pseudo-label record lacks 'thread'");
  p.thread = thread_from_json(*t);
  p.offensive = label_from_name(Task::Offensive, detail::require_string(j, "off"));
  p.stance = label_from_name(Task::Stance, detail::require_string(j, "stance"));
  if (auto c = j.find("context_off"); c != j.end() && !c->is_null()) {
    if (!c->is_array()) throw SchemaError("'context_off' must be an array");
    for (const auto& l : *c) {
      if (!l.is_string()) throw SchemaError("'context_off' entries must be strings");
      p.context_offensive.push_back(label_from_name(Task::Offensive, l.get<std::string>()));
    }
    if (p.context_offensive.size() + 1 != p.thread.size())
      throw SchemaError("'context_off' must label every context utterance");
  }
  if (auto it = j.find("p_off"); it != j.end()) p.p_offensive = it->get<std::vector<double>>();
  if (auto it = j.find("p_stance"); it != j.end()) p.p_stance = it->get<std::vector<double>>();
  return p;
}

inline ParseResult<PseudoLabeled> parse_pseudo_labeled(std::istream& in) {
  return parse_jsonl<PseudoLabeled>(in, [](const nlohmann::json& j) { return pseudo_labeled_from_json(j); });
}

// Labels one chunk of threads (k >= 2); sink receives results in input order.
inline void pseudo_label_chunk(std::vector<Thread>& chunk, Scorer& scorer, const ThresholdTable& off_table,
                               const ThresholdTable& stance_table, const PseudoLabelOptions& opt,
                               const std::function<void(PseudoLabeled&&)>& sink) {
  if (chunk.empty()) return;
  std::vector<OffensiveInput> off_in;
  std::vector<StanceInput> st_in;
  for (const auto& t : chunk) {
    const auto& prev = t.utterances[t.size() - 2];
    off_in.push_back({t.last().text, {}});
    if (opt.label_context)
      for (std::size_t c = 0; c + 1 < t.size(); ++c) off_in.push_back({t.utterances[c].text, {}});
    st_in.push_back({prev.text, t.last().text});
  }
  std::vector<ScoreVector> off, st;
  try {
    off = scorer.score_offensive(off_in);
    st = scorer.score_stance(st_in);
  } catch (const DataError& e) {
    throw DataError("scoring threads " + chunk.front().id + " .. " + chunk.back().id + ": " + e.what());
  }
  std::size_t at = 0;
  for (std::size_t i = 0; i < chunk.size(); ++i) {
    PseudoLabeled p;
    p.offensive = high_precision_label(off[at], off_table);
    p.p_offensive = off[at].probs;
    ++at;
    if (opt.label_context)
      for (std::size_t c = 0; c + 1 < chunk[i].size(); ++c) p.context_offensive.push_back(high_precision_label(off[at++], off_table));
    p.stance = high_precision_label(st[i], stance_table);
    p.p_stance = st[i].probs;
    p.thread = std::move(chunk[i]);
    sink(std::move(p));
  }
  chunk.clear();
}

// Streams threads through the scorer in fixed-size chunks; memory is bounded by the chunk size.
template <typename NextThread>
PseudoLabelStats pseudo_label_stream(NextThread&& next, Scorer& scorer, const ThresholdTable& off_table,
                                     const ThresholdTable& stance_table, const PseudoLabelOptions& opt,
                                     const std::function<void(PseudoLabeled&&)>& sink) {
  if (off_table.task != Task::Offensive || stance_table.task != Task::Stance)
    throw UsageError("pseudo-labelling needs an offensive and a stance threshold table");
  PseudoLabelStats stats;
  std::vector<Thread> chunk;
  chunk.reserve(opt.chunk);
  auto counting_sink = [&](PseudoLabeled&& p) {
    ++stats.labeled;
    sink(std::move(p));
  };
  while (std::optional<Thread> t = next()) {
    if (t->size() < 2) {
      ++stats.skipped_short;
      continue;
    }
    chunk.push_back(std::move(*t));
    if (chunk.size() >= opt.chunk) pseudo_label_chunk(chunk, scorer, off_table, stance_table, opt, counting_sink);
  }
  pseudo_label_chunk(chunk, scorer, off_table, stance_table, opt, counting_sink);
  return stats;
}

inline std::vector<PseudoLabeled> pseudo_label_corpus(const std::vector<Thread>& threads, Scorer& scorer,
                                                      const ThresholdTable& off_table,
                                                      const ThresholdTable& stance_table,
                                                      const PseudoLabelOptions& opt = {}) {
  std::vector<PseudoLabeled> out;
  std::size_t i = 0;
  pseudo_label_stream(
      [&]() -> std::optional<Thread> {
        if (i == threads.size()) return std::nullopt;
        return threads[i++];
      },
      scorer, off_table, stance_table, opt, [&](PseudoLabeled&& p) { out.push_back(std::move(p)); });
  return out;
}

}  // namespace convsafe
