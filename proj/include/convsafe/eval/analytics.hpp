#pragma once

// Corpus analyses over gold (or pseudo) labels: agreement with offensive
// context, direct vs contextual offense, target groups, profanity, and the
// monthly stance distribution.

#include <algorithm>
#include <array>
#include <chrono>
#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "convsafe/annotation.hpp"
#include "convsafe/corpus.hpp"
#include "convsafe/eval/metrics.hpp"
#include "convsafe/eval/report.hpp"
#include "convsafe/scoring.hpp"

namespace convsafe::eval {

// "human" or the bot's model name.
inline std::string responder_category(const Utterance& u) { return u.speaker.is_bot() ? u.speaker.name : "human"; }

struct LabeledThread {
  const Thread* thread;
  const AggregatedLabels* gold;
};

// Pairs threads with their gold labels by id; threads without gold are skipped.
inline std::vector<LabeledThread> join_gold(const std::vector<Thread>& threads,
                                            const std::vector<AggregatedLabels>& gold) {
  std::map<std::string, const AggregatedLabels*> idx;
  for (const auto& g : gold) idx[g.thread_id] = &g;
  std::vector<LabeledThread> out;
  for (const auto& t : threads) {
    auto it = idx.find(t.id);
    if (it == idx.end()) continue;
    if (it->second->per_utterance.size() != t.size())
      throw SchemaError("thread " + t.id + ": gold covers " + std::to_string(it->second->per_utterance.size()) +
                        " utterances, thread has " + std::to_string(t.size()));
    out.push_back({&t, it->second});
  }
  return out;
}

inline std::optional<double> ratio(std::size_t num, std::size_t den) {
  if (den == 0) return std::nullopt;
  return static_cast<double>(num) / static_cast<double>(den);
}

// ---------------------------------------------------------------------------

struct AgreeRate {
  std::size_t agree_after_offensive = 0, after_offensive = 0;
  std::size_t agree_after_safe = 0, after_safe = 0;
  std::optional<double> given_offensive() const { return ratio(agree_after_offensive, after_offensive); }
  std::optional<double> given_safe() const { return ratio(agree_after_safe, after_safe); }
};

// Over every gold pair (i <- j), bucketed by the gold offensiveness of u_j and
// the responder category of u_i.
inline std::map<std::string, AgreeRate> agree_rate_by_context(const std::vector<LabeledThread>& data) {
  std::map<std::string, AgreeRate> out;
  for (const auto& [t, g] : data)
    for (const auto& [pair, s] : g->stance_pairs) {
      auto& r = out[responder_category(t->at(pair.first))];
      const bool agree = s == Stance::Agree;
      if (g->at(pair.second).offensive) {
        ++r.after_offensive;
        r.agree_after_offensive += agree;
      } else {
        ++r.after_safe;
        r.agree_after_safe += agree;
      }
    }
  return out;
}

struct DirectContextual {
  std::size_t direct = 0;
  std::size_t contextual = 0;
  std::size_t agreeing_replies = 0;            // replies agreeing with >= 1 offensive earlier utterance
  std::size_t agreeing_replies_offensive = 0;  // ... that are themselves offensive
  std::optional<double> agreeing_offensive_share() const {
    return ratio(agreeing_replies_offensive, agreeing_replies);
  }
};

// An offensive reply u_i (i >= 2) is contextual when it agrees with an
// offensive earlier utterance, otherwise direct.
inline std::map<std::string, DirectContextual> direct_vs_contextual(const std::vector<LabeledThread>& data) {
  std::map<std::string, DirectContextual> out;
  for (const auto& [t, g] : data)
    for (std::size_t i = 2; i <= t->size(); ++i) {
      bool agrees_with_offensive = false;
      for (std::size_t j = 1; j < i; ++j) {
        auto it = g->stance_pairs.find({i, j});
        if (it != g->stance_pairs.end() && it->second == Stance::Agree && g->at(j).offensive)
          agrees_with_offensive = true;
      }
      auto& r = out[responder_category(t->at(i))];
      const bool off = g->at(i).offensive;
      if (agrees_with_offensive) {
        ++r.agreeing_replies;
        r.agreeing_replies_offensive += off;
      }
      if (off) ++(agrees_with_offensive ? r.contextual : r.direct);
    }
  return out;
}

enum class TargetGrouping { Source, Responder };

// Target groups of gold-offensive utterances chosen by at least min_votes
// workers ("none" excluded), ranked by count then name.
inline std::map<std::string, std::vector<std::pair<std::string, std::size_t>>> target_group_top_k(
    const std::vector<LabeledThread>& data, std::size_t k = 10, int min_votes = 2,
    TargetGrouping by = TargetGrouping::Source) {
  std::map<std::string, std::map<std::string, std::size_t>> counts;
  for (const auto& [t, g] : data)
    for (std::size_t i = 1; i <= t->size(); ++i) {
      const auto& u = g->at(i);
      if (!u.offensive) continue;
      const std::string key = by == TargetGrouping::Source ? to_string(t->source) : responder_category(t->at(i));
      for (const auto& [group, votes] : u.targets)
        if (group != "none" && votes >= min_votes) ++counts[key][group];
    }
  std::map<std::string, std::vector<std::pair<std::string, std::size_t>>> out;
  for (auto& [key, m] : counts) {
    std::vector<std::pair<std::string, std::size_t>> v(m.begin(), m.end());
    std::stable_sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    if (v.size() > k) v.resize(k);
    out[key] = std::move(v);
  }
  return out;
}

// Fraction of gold-offensive replies (i >= 2) with a lexicon hit, per responder category.
inline std::map<std::string, std::optional<double>> profanity_share(const std::vector<LabeledThread>& data,
                                                                    const Lexicon& lex) {
  std::map<std::string, std::vector<std::string>> offensive;
  std::set<std::string> categories;
  for (const auto& [t, g] : data)
    for (std::size_t i = 2; i <= t->size(); ++i) {
      const auto cat = responder_category(t->at(i));
      categories.insert(cat);
      if (g->at(i).offensive) offensive[cat].push_back(t->at(i).text);
    }
  std::map<std::string, std::optional<double>> out;
  for (const auto& c : categories) out[c] = percent_bad(offensive[c], lex);
  return out;
}

// ---------------------------------------------------------------------------
// Temporal stance distribution over pseudo-labelled threads
// ---------------------------------------------------------------------------

inline std::string month_of(std::int64_t unix_seconds) {
  using namespace std::chrono;
  const year_month_day ymd{floor<days>(sys_seconds{seconds{unix_seconds}})};
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d-%02u", static_cast<int>(ymd.year()), static_cast<unsigned>(ymd.month()));
  return buf;
}

struct StanceBuckets {
  // neutral, agree, disagree, ambiguous
  std::array<std::size_t, 4> counts{};
  std::size_t total() const { return counts[0] + counts[1] + counts[2] + counts[3]; }
  double fraction(std::size_t b) const { return total() ? static_cast<double>(counts[b]) / total() : 0.0; }
};

struct TemporalDistribution {
  // month -> context ("offensive" | "safe") -> buckets
  std::map<std::string, std::map<std::string, StanceBuckets>> months;
  std::size_t missing_timestamp = 0;
  std::size_t ambiguous_context = 0;
};

inline TemporalDistribution temporal_stance_distribution(const std::vector<PseudoLabeled>& records) {
  TemporalDistribution out;
  for (const auto& r : records) {
    const auto& ts = r.thread.last().created_at;
    if (!ts) {
      ++out.missing_timestamp;
      continue;
    }
    const HighPrecisionLabel* pred = r.predecessor_offensive();
    if (!pred || pred->ambiguous()) {
      ++out.ambiguous_context;
      continue;
    }
    const std::string ctx = *pred->label == 1 ? "offensive" : "safe";
    const std::size_t bucket = r.stance.label ? *r.stance.label : 3;
    ++out.months[month_of(*ts)][ctx].counts[bucket];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Report adapters
// ---------------------------------------------------------------------------

inline EvalReport agree_rate_report(const std::map<std::string, AgreeRate>& m) {
  EvalReport r;
  r.key_name = "responder";
  r.columns = {"agree_given_offensive_pct", "n_offensive_context", "agree_given_safe_pct", "n_safe_context"};
  for (const auto& [k, v] : m)
    r.add(k, {percent(v.given_offensive()), static_cast<double>(v.after_offensive), percent(v.given_safe()),
              static_cast<double>(v.after_safe)});
  return r;
}

inline EvalReport direct_contextual_report(const std::map<std::string, DirectContextual>& m) {
  EvalReport r;
  r.key_name = "responder";
  r.columns = {"direct", "contextual", "agreeing_replies", "agreeing_offensive_pct"};
  for (const auto& [k, v] : m)
    r.add(k, {static_cast<double>(v.direct), static_cast<double>(v.contextual), static_cast<double>(v.agreeing_replies),
              percent(v.agreeing_offensive_share())});
  return r;
}

inline EvalReport target_report(const std::map<std::string, std::vector<std::pair<std::string, std::size_t>>>& m) {
  EvalReport r;
  r.key_name = "group";
  r.columns = {"rank", "count"};
  for (const auto& [k, v] : m)
    for (std::size_t i = 0; i < v.size(); ++i)
      r.add(k + ":" + v[i].first, {static_cast<double>(i + 1), static_cast<double>(v[i].second)});
  return r;
}

inline EvalReport profanity_report(const std::map<std::string, std::optional<double>>& m) {
  EvalReport r;
  r.key_name = "responder";
  r.columns = {"profanity_pct"};
  for (const auto& [k, v] : m) r.add(k, {percent(v)});
  return r;
}

inline EvalReport temporal_report(const TemporalDistribution& d) {
  EvalReport r;
  r.key_name = "month:context";
  r.columns = {"n", "neutral", "agree", "disagree", "ambiguous"};
  for (const auto& [month, ctxs] : d.months)
    for (const auto& [ctx, b] : ctxs)
      r.add(month + ":" + ctx, {static_cast<double>(b.total()), b.fraction(0), b.fraction(1), b.fraction(2),
                                b.fraction(3)});
  return r;
}

}  // namespace convsafe::eval
