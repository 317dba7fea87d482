#pragma once

// Worker judgments, >=k-of-n gold aggregation, and agreement statistics.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <json.hpp>

#include "convsafe/corpus.hpp"
#include "convsafe/error.hpp"

namespace convsafe {

enum class Offense4 { Yes, Maybe, No, NotSure };

// Class order is the classifier's output order: (neutral, agree, disagree).
enum class Stance { Neutral = 0, Agree = 1, Disagree = 2 };

inline constexpr bool map_offense_4to2(Offense4 v) {
  return v == Offense4::Yes || v == Offense4::Maybe;
}

inline std::string to_string(Offense4 v) {
  switch (v) {
    case Offense4::Yes: return "yes";
    case Offense4::Maybe: return "maybe";
    case Offense4::No: return "no";
    case Offense4::NotSure: return "notsure";
  }
  return "?";
}

inline Offense4 offense4_from_string(const std::string& s) {
  if (s == "yes") return Offense4::Yes;
  if (s == "maybe") return Offense4::Maybe;
  if (s == "no") return Offense4::No;
  if (s == "notsure") return Offense4::NotSure;
  throw SchemaError("unknown offensiveness value \"" + s + "\"");
}

inline std::string to_string(Stance s) {
  switch (s) {
    case Stance::Neutral: return "neutral";
    case Stance::Agree: return "agree";
    case Stance::Disagree: return "disagree";
  }
  return "?";
}

inline Stance stance_from_string(const std::string& s) {
  if (s == "neutral") return Stance::Neutral;
  if (s == "agree") return Stance::Agree;
  if (s == "disagree") return Stance::Disagree;
  throw SchemaError("unknown stance value \"" + s + "\"");
}

// Judgments for utterance idx (1-based) by one worker.
struct UtteranceJudgment {
  std::size_t idx = 1;
  Offense4 offensive = Offense4::No;
  std::set<std::string> targets;
  std::map<std::size_t, Stance> stance;  // earlier index j -> stance of u_idx toward u_j
  std::optional<bool> plausible;
  bool operator==(const UtteranceJudgment&) const = default;
};

struct WorkerAnnotation {
  std::string worker_id;
  std::string thread_id;
  std::vector<UtteranceJudgment> items;
  bool operator==(const WorkerAnnotation&) const = default;
};

// Predefined target-group list; "none" and "other" are always present.
class TargetVocabulary {
 public:
  TargetVocabulary() : names_{"none", "other"} {}
  explicit TargetVocabulary(std::vector<std::string> names) : TargetVocabulary() {
    for (auto& n : names) names_.insert(std::move(n));
  }

  static TargetVocabulary load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open target vocabulary " + path);
    std::vector<std::string> names;
    std::string line;
    while (std::getline(in, line)) {
      auto t = text::trim(line);
      if (t.empty() || t.front() == '#') continue;
      names.emplace_back(t);
    }
    return TargetVocabulary(std::move(names));
  }

  bool contains(const std::string& name) const { return names_.count(name) != 0; }
  const std::set<std::string>& names() const { return names_; }

 private:
  std::set<std::string> names_;
};

inline void validate(const WorkerAnnotation& a, const TargetVocabulary* vocab = nullptr) {
  for (const auto& it : a.items) {
    if (it.idx == 0) throw SchemaError("item index must be >= 1");
    for (const auto& [j, _] : it.stance)
      if (j == 0 || j >= it.idx)
        throw SchemaError("stance key " + std::to_string(j) + " not earlier than utterance " +
                          std::to_string(it.idx));
    const bool off = map_offense_4to2(it.offensive);
    for (const auto& g : it.targets) {
      if (!off)
        throw SchemaError("target groups given for non-offensive utterance " +
                          std::to_string(it.idx));
      if (vocab && !vocab->contains(g)) throw SchemaError("unknown target group \"" + g + "\"");
    }
  }
}

inline json to_json(const WorkerAnnotation& a) {
  json items = json::array();
  for (const auto& it : a.items) {
    json st = json::object();
    for (const auto& [j, s] : it.stance) st[std::to_string(j)] = to_string(s);
    json o = {{"idx", it.idx},
              {"off", to_string(it.offensive)},
              {"targets", std::vector<std::string>(it.targets.begin(), it.targets.end())},
              {"stance", std::move(st)}};
    if (it.plausible) o["plausible"] = *it.plausible;
    items.push_back(std::move(o));
  }
  return {{"worker", a.worker_id}, {"thread", a.thread_id}, {"items", std::move(items)}};
}

inline WorkerAnnotation worker_annotation_from_json(const json& j) {
  if (!j.is_object()) throw SchemaError("annotation record is not an object");
  WorkerAnnotation a;
  a.worker_id = detail::require_string(j, "worker");
  a.thread_id = detail::require_string(j, "thread");
  if (a.worker_id.empty()) throw SchemaError("empty worker id");
  auto items = j.find("items");
  if (items == j.end() || !items->is_array()) throw SchemaError("missing 'items' array");
  std::set<std::size_t> seen;
  for (const auto& o : *items) {
    if (!o.is_object()) throw SchemaError("item is not an object");
    UtteranceJudgment it;
    auto idx = o.find("idx");
    if (idx == o.end() || !idx->is_number_integer() || idx->get<std::int64_t>() < 1)
      throw SchemaError("item 'idx' must be a positive integer");
    it.idx = idx->get<std::size_t>();
    if (!seen.insert(it.idx).second)
      throw SchemaError("duplicate item idx " + std::to_string(it.idx));
    it.offensive = offense4_from_string(detail::require_string(o, "off"));
    if (auto t = o.find("targets"); t != o.end() && !t->is_null()) {
      if (!t->is_array()) throw SchemaError("targets must be an array");
      for (const auto& g : *t) {
        if (!g.is_string()) throw SchemaError("target group must be a string");
        it.targets.insert(g.get<std::string>());
      }
    }
    if (auto s = o.find("stance"); s != o.end() && !s->is_null()) {
      if (!s->is_object()) throw SchemaError("stance must be an object");
      for (auto kv = s->begin(); kv != s->end(); ++kv) {
        std::size_t jdx = 0;
        try {
          jdx = std::stoul(kv.key());
        } catch (const std::exception&) {
          throw SchemaError("stance key \"" + kv.key() + "\" is not an index");
        }
        if (!kv.value().is_string()) throw SchemaError("stance value must be a string");
        it.stance[jdx] = stance_from_string(kv.value().get<std::string>());
      }
    }
    if (auto p = o.find("plausible"); p != o.end() && !p->is_null()) {
      if (!p->is_boolean()) throw SchemaError("plausible must be a boolean");
      it.plausible = p->get<bool>();
    }
    a.items.push_back(std::move(it));
  }
  std::sort(a.items.begin(), a.items.end(),
            [](const UtteranceJudgment& x, const UtteranceJudgment& y) { return x.idx < y.idx; });
  validate(a);
  return a;
}

inline ParseResult<WorkerAnnotation> parse_worker_annotations(std::istream& in) {
  return parse_jsonl<WorkerAnnotation>(in,
                                       [](const json& j) { return worker_annotation_from_json(j); });
}

// ---------------------------------------------------------------------------
// Gold aggregation
// ---------------------------------------------------------------------------

struct GoldUtterance {
  std::size_t idx = 1;
  bool offensive = false;
  std::map<std::string, int> targets;  // group -> number of workers who chose it
  std::optional<bool> plausible;
  bool operator==(const GoldUtterance&) const = default;
};

// Key (i, j): stance of later utterance i toward earlier utterance j.
using StancePair = std::pair<std::size_t, std::size_t>;

struct AggregatedLabels {
  std::string thread_id;
  std::vector<GoldUtterance> per_utterance;  // index idx-1
  std::map<StancePair, Stance> stance_pairs;

  const GoldUtterance& at(std::size_t idx) const { return per_utterance.at(idx - 1); }
  bool operator==(const AggregatedLabels&) const = default;
};

inline bool gold_offensive(const std::vector<Offense4>& votes, int min_votes = 2) {
  int n = 0;
  for (auto v : votes) n += map_offense_4to2(v) ? 1 : 0;
  return n >= min_votes;
}

// Agree/Disagree needs min_votes; when both qualify the larger count wins, ties are Neutral.
inline Stance gold_stance(const std::vector<Stance>& votes, int min_votes = 2) {
  int agree = 0, disagree = 0;
  for (auto v : votes) {
    agree += v == Stance::Agree;
    disagree += v == Stance::Disagree;
  }
  const bool a = agree >= min_votes, d = disagree >= min_votes;
  if (a && d) {
    if (agree > disagree) return Stance::Agree;
    if (disagree > agree) return Stance::Disagree;
    return Stance::Neutral;
  }
  if (a) return Stance::Agree;
  if (d) return Stance::Disagree;
  return Stance::Neutral;
}

// Majority of non-null votes, ties resolve to plausible.
inline std::optional<bool> gold_plausible(const std::vector<bool>& votes) {
  if (votes.empty()) return std::nullopt;
  std::size_t yes = 0;
  for (bool v : votes) yes += v;
  return yes * 2 >= votes.size();
}

// n_utterances = 0 infers the thread length from the highest annotated index.
inline AggregatedLabels aggregate_gold(const std::vector<WorkerAnnotation>& annos, int min_votes = 2,
                                       std::size_t n_utterances = 0) {
  if (annos.empty()) throw MissingCoverage("no annotations to aggregate");
  AggregatedLabels out;
  out.thread_id = annos.front().thread_id;
  std::size_t k = n_utterances;
  for (const auto& a : annos) {
    if (a.thread_id != out.thread_id)
      throw UsageError("aggregate_gold mixes threads " + out.thread_id + " and " + a.thread_id);
    for (const auto& it : a.items) k = std::max(k, it.idx);
  }

  std::vector<std::vector<Offense4>> off(k);
  std::vector<std::vector<bool>> plaus(k);
  std::vector<std::map<std::string, int>> targets(k);
  std::map<StancePair, std::vector<Stance>> stance;
  for (const auto& a : annos) {
    for (const auto& it : a.items) {
      if (n_utterances && it.idx > n_utterances)
        throw SchemaError("thread " + out.thread_id + ": item " + std::to_string(it.idx) +
                          " beyond thread length");
      off[it.idx - 1].push_back(it.offensive);
      if (it.plausible) plaus[it.idx - 1].push_back(*it.plausible);
      for (const auto& g : it.targets) ++targets[it.idx - 1][g];
      for (const auto& [j, s] : it.stance) stance[{it.idx, j}].push_back(s);
    }
  }

  for (std::size_t i = 1; i <= k; ++i) {
    if (off[i - 1].empty())
      throw MissingCoverage("thread " + out.thread_id + ": utterance " + std::to_string(i) +
                            " has no judgments");
    GoldUtterance g;
    g.idx = i;
    g.offensive = gold_offensive(off[i - 1], min_votes);
    g.targets = std::move(targets[i - 1]);
    g.plausible = gold_plausible(plaus[i - 1]);
    out.per_utterance.push_back(std::move(g));
    for (std::size_t j = 1; j < i; ++j) {
      auto it = stance.find({i, j});
      if (it == stance.end())
        throw MissingCoverage("thread " + out.thread_id + ": stance pair (" + std::to_string(j) +
                              "<-" + std::to_string(i) + ") has no judgments");
      out.stance_pairs[{i, j}] = gold_stance(it->second, min_votes);
    }
  }
  return out;
}

// Groups annotations by thread (in first-seen order) and aggregates each.
inline std::vector<AggregatedLabels> aggregate_all(const std::vector<WorkerAnnotation>& annos,
                                                   int min_votes = 2,
                                                   const std::map<std::string, std::size_t>& lengths = {}) {
  std::vector<std::string> order;
  std::map<std::string, std::vector<WorkerAnnotation>> by_thread;
  for (const auto& a : annos) {
    auto [it, fresh] = by_thread.try_emplace(a.thread_id);
    if (fresh) order.push_back(a.thread_id);
    it->second.push_back(a);
  }
  std::vector<AggregatedLabels> out;
  out.reserve(order.size());
  for (const auto& id : order) {
    auto len = lengths.find(id);
    out.push_back(aggregate_gold(by_thread[id], min_votes, len == lengths.end() ? 0 : len->second));
  }
  return out;
}

inline json to_json(const AggregatedLabels& g) {
  json items = json::array();
  for (const auto& u : g.per_utterance) {
    json st = json::object();
    for (std::size_t j = 1; j < u.idx; ++j)
      if (auto it = g.stance_pairs.find({u.idx, j}); it != g.stance_pairs.end())
        st[std::to_string(j)] = to_string(it->second);
    json o = {{"idx", u.idx}, {"off", u.offensive}, {"targets", u.targets}, {"stance", std::move(st)}};
    if (u.plausible) o["plausible"] = *u.plausible;
    items.push_back(std::move(o));
  }
  return {{"thread", g.thread_id}, {"items", std::move(items)}};
}

inline AggregatedLabels aggregated_from_json(const json& j) {
  if (!j.is_object()) throw SchemaError("gold record is not an object");
  AggregatedLabels g;
  g.thread_id = detail::require_string(j, "thread");
  auto items = j.find("items");
  if (items == j.end() || !items->is_array()) throw SchemaError("missing 'items' array");
  for (const auto& o : *items) {
    GoldUtterance u;
    u.idx = o.at("idx").get<std::size_t>();
    if (u.idx != g.per_utterance.size() + 1) throw SchemaError("gold items must be 1..k in order");
    auto off = o.find("off");
    if (off == o.end() || !off->is_boolean()) throw SchemaError("gold 'off' must be a boolean");
    u.offensive = off->get<bool>();
    if (auto t = o.find("targets"); t != o.end() && t->is_object())
      for (auto kv = t->begin(); kv != t->end(); ++kv) u.targets[kv.key()] = kv.value().get<int>();
    if (auto p = o.find("plausible"); p != o.end() && p->is_boolean()) u.plausible = p->get<bool>();
    if (auto s = o.find("stance"); s != o.end() && s->is_object())
      for (auto kv = s->begin(); kv != s->end(); ++kv)
        g.stance_pairs[{u.idx, std::stoul(kv.key())}] = stance_from_string(kv.value().get<std::string>());
    g.per_utterance.push_back(std::move(u));
  }
  return g;
}

inline ParseResult<AggregatedLabels> parse_gold(std::istream& in) {
  return parse_jsonl<AggregatedLabels>(in, [](const json& j) { return aggregated_from_json(j); });
}

// ---------------------------------------------------------------------------
// Agreement
// ---------------------------------------------------------------------------

// items x coders, nominal labels; nullopt = not coded.
using LabelMatrix = std::vector<std::vector<std::optional<int>>>;

struct AgreementReport {
  double krippendorff_alpha = 0.0;
  double pairwise_agreement = 0.0;
  std::size_t n_items = 0;
  std::size_t n_coders = 0;
};

// Nominal alpha from the coincidence matrix: 1 - (n-1) * sum_{c!=k} o_ck / sum_{c!=k} n_c n_k.
inline double krippendorff_alpha(const LabelMatrix& m) {
  std::map<int, std::size_t> index;
  for (const auto& row : m)
    for (const auto& v : row)
      if (v) index.try_emplace(*v, 0);
  std::size_t next = 0;
  for (auto& [_, i] : index) i = next++;
  const std::size_t c = index.size();
  std::vector<double> o(c * c, 0.0);
  std::size_t pairable_units = 0;
  for (const auto& row : m) {
    std::vector<std::size_t> vals;
    for (const auto& v : row)
      if (v) vals.push_back(index[*v]);
    if (vals.size() < 2) continue;
    ++pairable_units;
    const double w = 1.0 / static_cast<double>(vals.size() - 1);
    for (std::size_t a = 0; a < vals.size(); ++a)
      for (std::size_t b = 0; b < vals.size(); ++b)
        if (a != b) o[vals[a] * c + vals[b]] += w;
  }
  if (pairable_units == 0) throw NotEnoughData("no unit has two or more codings");
  std::vector<double> n_c(c, 0.0);
  double n = 0.0;
  for (std::size_t a = 0; a < c; ++a)
    for (std::size_t b = 0; b < c; ++b) n_c[a] += o[a * c + b];
  for (double x : n_c) n += x;
  double observed = 0.0, expected = 0.0;
  for (std::size_t a = 0; a < c; ++a)
    for (std::size_t b = 0; b < c; ++b)
      if (a != b) {
        observed += o[a * c + b];
        expected += n_c[a] * n_c[b];
      }
  if (expected == 0.0) {
    if (observed == 0.0) return 1.0;
    throw NotEnoughData("expected disagreement is zero");
  }
  return 1.0 - (n - 1.0) * observed / expected;
}

// Mean over items of agreeing coder pairs / coder pairs.
inline double pairwise_agreement(const LabelMatrix& m) {
  double sum = 0.0;
  std::size_t items = 0;
  for (const auto& row : m) {
    std::map<int, std::size_t> counts;
    std::size_t total = 0;
    for (const auto& v : row)
      if (v) {
        ++counts[*v];
        ++total;
      }
    if (total < 2) continue;
    double agree = 0.0;
    for (const auto& [_, cnt] : counts) agree += static_cast<double>(cnt * (cnt - 1) / 2);
    sum += agree / static_cast<double>(total * (total - 1) / 2);
    ++items;
  }
  if (items == 0) throw NotEnoughData("no item has two or more codings");
  return sum / static_cast<double>(items);
}

template <typename T>
double cohens_kappa(const std::vector<T>& a, const std::vector<T>& b) {
  if (a.size() != b.size()) throw LengthMismatch(a.size(), b.size());
  if (a.empty()) throw NotEnoughData("cohens_kappa needs at least one pair");
  std::map<T, double> pa, pb;
  double agree = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    pa[a[i]] += 1.0;
    pb[b[i]] += 1.0;
    agree += a[i] == b[i];
  }
  const double n = static_cast<double>(a.size());
  const double p_o = agree / n;
  double p_e = 0.0;
  for (const auto& [label, ca] : pa)
    if (auto it = pb.find(label); it != pb.end()) p_e += (ca / n) * (it->second / n);
  if (p_e == 1.0) return p_o == 1.0 ? 1.0 : 0.0;
  return (p_o - p_e) / (1.0 - p_e);
}

struct AgreementMatrices {
  LabelMatrix offensive;  // rows: (thread, utterance)
  LabelMatrix stance;     // rows: (thread, i, j)
  std::size_t n_coders = 0;
};

// One column per worker id, rows in thread/utterance order.
inline AgreementMatrices build_agreement_matrices(const std::vector<WorkerAnnotation>& annos) {
  std::map<std::string, std::size_t> coder;
  for (const auto& a : annos) coder.try_emplace(a.worker_id, 0);
  std::size_t next = 0;
  for (auto& [_, i] : coder) i = next++;

  std::map<std::pair<std::string, std::size_t>, std::vector<std::optional<int>>> off;
  std::map<std::tuple<std::string, std::size_t, std::size_t>, std::vector<std::optional<int>>> st;
  for (const auto& a : annos) {
    const std::size_t col = coder[a.worker_id];
    for (const auto& it : a.items) {
      auto& row = off[{a.thread_id, it.idx}];
      row.resize(next);
      row[col] = map_offense_4to2(it.offensive) ? 1 : 0;
      for (const auto& [j, s] : it.stance) {
        auto& srow = st[{a.thread_id, it.idx, j}];
        srow.resize(next);
        srow[col] = static_cast<int>(s);
      }
    }
  }
  AgreementMatrices out;
  out.n_coders = next;
  for (auto& [_, row] : off) out.offensive.push_back(std::move(row));
  for (auto& [_, row] : st) out.stance.push_back(std::move(row));
  return out;
}

inline AgreementReport agreement_report(const LabelMatrix& m, std::size_t n_coders) {
  AgreementReport r;
  r.krippendorff_alpha = krippendorff_alpha(m);
  r.pairwise_agreement = pairwise_agreement(m);
  r.n_items = m.size();
  r.n_coders = n_coders;
  return r;
}

}  // namespace convsafe
