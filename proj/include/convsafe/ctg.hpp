#pragma once

// Label-controlled fine-tuning corpora built from pseudo-labelled threads:
// AtCon (control tokens before the response) and DAPT (fixed attributes, no tokens).

#include <algorithm>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "convsafe/annotation.hpp"
#include "convsafe/corpus.hpp"
#include "convsafe/error.hpp"
#include "convsafe/rng.hpp"
#include "convsafe/scoring.hpp"

namespace convsafe::ctg {

enum class ControlToken { Safe, Off, Neu, Agr };

inline std::string_view render(ControlToken t) {
  switch (t) {
    case ControlToken::Safe: return "[SAFE]";
    case ControlToken::Off: return "[OFF]";
    case ControlToken::Neu: return "[NEU]";
    case ControlToken::Agr: return "[AGR]";
  }
  return "";
}

inline constexpr ControlToken kAllTokens[] = {ControlToken::Safe, ControlToken::Off, ControlToken::Neu,
                                              ControlToken::Agr};

inline ControlToken control_token_from_string(std::string_view s) {
  for (auto t : kAllTokens)
    if (render(t) == s) return t;
  throw UsageError("unknown control token " + std::string(s));
}

struct LabelControlledExample {
  std::vector<std::string> x;  // context u_1..u_{k-1}
  std::vector<ControlToken> ct;
  std::string y;  // response u_k
  bool operator==(const LabelControlledExample&) const = default;
};

enum class Experiment { OffenseOnly, StanceOnly, Both };

inline Experiment experiment_from_string(const std::string& s) {
  if (s == "offense") return Experiment::OffenseOnly;
  if (s == "stance") return Experiment::StanceOnly;
  if (s == "both") return Experiment::Both;
  throw UsageError("experiment must be offense|stance|both, got " + s);
}

struct BuildResult {
  std::vector<LabelControlledExample> examples;
  std::size_t qualifying = 0;
  std::optional<std::string> warning;  // set when fewer than L examples qualify
};

// One line per example: newlines fold to spaces so the corpus stays line-oriented.
inline std::string single_line(std::string s) {
  for (char& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

// Drops Ambiguous and Disagree examples, maps labels to tokens (offense then
// stance), and caps at L by seeded sampling with largest-remainder quotas per
// token combination. Surviving examples keep input order.
inline BuildResult build_label_controlled(const std::vector<PseudoLabeled>& records, Experiment exp,
                                          std::size_t target_size, std::uint64_t seed) {
  BuildResult out;
  std::vector<LabelControlledExample> pool;
  for (const auto& r : records) {
    if (r.thread.size() < 2) continue;
    if (r.offensive.ambiguous() || r.stance.ambiguous()) continue;
    if (*r.stance.label == static_cast<std::size_t>(Stance::Disagree)) continue;
    if (exp == Experiment::StanceOnly && !r.context_all_safe()) continue;
    LabelControlledExample e;
    for (std::size_t i = 0; i + 1 < r.thread.size(); ++i) e.x.push_back(single_line(r.thread.utterances[i].text));
    e.y = single_line(r.thread.last().text);
    const ControlToken off = *r.offensive.label == 1 ? ControlToken::Off : ControlToken::Safe;
    const ControlToken st = *r.stance.label == static_cast<std::size_t>(Stance::Agree) ? ControlToken::Agr
                                                                                        : ControlToken::Neu;
    if (exp != Experiment::StanceOnly) e.ct.push_back(off);
    if (exp != Experiment::OffenseOnly) e.ct.push_back(st);
    pool.push_back(std::move(e));
  }
  out.qualifying = pool.size();
  if (pool.size() <= target_size) {
    if (pool.size() < target_size)
      out.warning = "InsufficientData: found " + std::to_string(pool.size()) + " qualifying examples, wanted " +
                    std::to_string(target_size);
    out.examples = std::move(pool);
    return out;
  }

  std::map<std::vector<ControlToken>, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < pool.size(); ++i) groups[pool[i].ct].push_back(i);
  struct Quota {
    const std::vector<ControlToken>* key;
    std::size_t n;
    std::size_t take;
    std::size_t remainder;  // numerator of the fractional part
  };
  std::vector<Quota> quotas;
  std::size_t assigned = 0;
  for (const auto& [key, idx] : groups) {
    const std::size_t exact_num = target_size * idx.size();
    quotas.push_back({&key, idx.size(), exact_num / pool.size(), exact_num % pool.size()});
    assigned += quotas.back().take;
  }
  std::vector<std::size_t> order(quotas.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return quotas[a].remainder > quotas[b].remainder; });
  for (std::size_t k = 0; assigned < target_size; ++k, ++assigned) ++quotas[order[k % order.size()]].take;

  Rng rng(seed);
  std::vector<bool> keep(pool.size(), false);
  for (const auto& q : quotas) {
    const auto& idx = groups[*q.key];
    for (auto k : sample_indices(rng, idx.size(), q.take)) keep[idx[k]] = true;
  }
  for (std::size_t i = 0; i < pool.size(); ++i)
    if (keep[i]) out.examples.push_back(std::move(pool[i]));
  return out;
}

template <typename T>
struct TrainDev {
  std::vector<T> train, dev;
};

// Seeded shuffle, floor(0.95 n) to train.
template <typename T>
TrainDev<T> split_95_5(const std::vector<T>& items, std::uint64_t seed) {
  std::vector<std::size_t> order(items.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  const std::size_t n_train = items.size() * 95 / 100;
  TrainDev<T> out;
  for (std::size_t k = 0; k < order.size(); ++k) (k < n_train ? out.train : out.dev).push_back(items[order[k]]);
  return out;
}

// Texts must be non-empty, single-line, and free of the separator and control tokens.
inline void check_emittable(const LabelControlledExample& e, std::string_view eou) {
  auto check = [&](const std::string& s, const char* what) {
    if (s.empty()) throw UsageError(std::string(what) + " is empty");
    if (s.find_first_of("\r\n") != std::string::npos) throw UsageError(std::string(what) + " contains a newline");
    if (s.find(eou) != std::string::npos) throw UsageError(std::string(what) + " contains the EOU token");
    for (auto t : kAllTokens)
      if (s.find(render(t)) != std::string::npos) throw UsageError(std::string(what) + " contains a control token");
  };
  if (e.x.empty()) throw UsageError("example has no context");
  if (e.ct.empty()) throw UsageError("example has no control tokens");
  for (const auto& u : e.x) check(u, "context utterance");
  check(e.y, "response");
}

// <ctx>([EOU]<ctx>)*[EOU](<TOKEN>)+<SPACE><response>
inline std::string atcon_line(const LabelControlledExample& e, std::string_view eou = "[EOU]") {
  check_emittable(e, eou);
  std::string line = flatten_with_eou(e.x, eou);
  for (auto t : e.ct) line += render(t);
  line += ' ';
  line += e.y;
  return line;
}

inline LabelControlledExample parse_atcon_line(std::string_view line, std::string_view eou = "[EOU]") {
  const auto last = line.rfind(eou);
  if (last == std::string_view::npos) throw SchemaError("AtCon line has no EOU separator");
  LabelControlledExample e;
  e.x = split_eou(line.substr(0, last + eou.size()), eou);
  std::string_view rest = line.substr(last + eou.size());
  for (bool more = true; more;) {
    more = false;
    for (auto t : kAllTokens)
      if (rest.substr(0, render(t).size()) == render(t)) {
        e.ct.push_back(t);
        rest.remove_prefix(render(t).size());
        more = true;
        break;
      }
  }
  if (e.ct.empty()) throw SchemaError("AtCon line has no control token");
  if (rest.empty() || rest.front() != ' ') throw SchemaError("AtCon line lacks the space before the response");
  rest.remove_prefix(1);
  e.y = std::string(rest);
  if (e.y.empty()) throw SchemaError("AtCon line has an empty response");
  return e;
}

inline std::string emit_atcon(const std::vector<LabelControlledExample>& examples, std::string_view eou = "[EOU]") {
  std::string out;
  for (const auto& e : examples) {
    out += atcon_line(e, eou);
    out += '\n';
  }
  return out;
}

// Keeps examples whose control tokens equal the fixed set; emits them without tokens.
inline std::string emit_dapt(const std::vector<LabelControlledExample>& examples,
                             const std::vector<ControlToken>& control, std::string_view eou = "[EOU]") {
  std::string out;
  for (const auto& e : examples) {
    if (e.ct != control) continue;
    check_emittable(e, eou);
    out += flatten_with_eou(e.x, eou);
    out += ' ';
    out += e.y;
    out += '\n';
  }
  return out;
}

inline nlohmann::json to_json(const LabelControlledExample& e) {
  std::vector<std::string> ct;
  for (auto t : e.ct) ct.emplace_back(render(t));
  return {{"x", e.x}, {"ct", ct}, {"y", e.y}};
}

}  // namespace convsafe::ctg
