#pragma once

// Thread-level splits and conversion of gold-labelled threads into classifier instances.

#include <map>
#include <string>
#include <vector>

#include "convsafe/annotation.hpp"
#include "convsafe/corpus.hpp"
#include "convsafe/error.hpp"
#include "convsafe/nbow/train.hpp"
#include "convsafe/rng.hpp"

namespace convsafe::nbow {

template <typename T>
struct ThreeWaySplit {
  std::vector<T> train, dev, test;
};

// floor(0.7n) / floor(0.15n) / remainder after a seeded shuffle.
template <typename T>
ThreeWaySplit<T> split_70_15_15(const std::vector<T>& items, std::uint64_t seed) {
  if (items.size() < 10) throw NotEnoughData("split_70_15_15 needs at least 10 items, got " + std::to_string(items.size()));
  std::vector<std::size_t> order(items.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  const std::size_t n = items.size();
  const std::size_t n_train = n * 70 / 100;
  const std::size_t n_dev = n * 15 / 100;
  ThreeWaySplit<T> out;
  for (std::size_t k = 0; k < n; ++k) {
    const auto& item = items[order[k]];
    if (k < n_train)
      out.train.push_back(item);
    else if (k < n_train + n_dev)
      out.dev.push_back(item);
    else
      out.test.push_back(item);
  }
  return out;
}

inline std::map<std::string, const AggregatedLabels*> index_gold(const std::vector<AggregatedLabels>& gold) {
  std::map<std::string, const AggregatedLabels*> out;
  for (const auto& g : gold) out[g.thread_id] = &g;
  return out;
}

// One instance per utterance (offensive) or per gold pair (i, j), j < i (stance).
// Threads without gold labels are skipped.
inline std::vector<TextExample> make_examples(Task task, const std::vector<Thread>& threads,
                                              const std::vector<AggregatedLabels>& gold,
                                              const PreprocessConfig& cfg = {}) {
  const auto idx = index_gold(gold);
  std::vector<TextExample> out;
  for (const auto& t : threads) {
    auto it = idx.find(t.id);
    if (it == idx.end()) continue;
    const AggregatedLabels& g = *it->second;
    if (g.per_utterance.size() != t.size())
      throw SchemaError("thread " + t.id + ": gold covers " + std::to_string(g.per_utterance.size()) +
                        " utterances, thread has " + std::to_string(t.size()));
    std::vector<std::vector<std::string>> toks;
    for (const auto& u : t.utterances) toks.push_back(utterance_tokens(u.text, cfg));
    if (task == Task::Offensive) {
      for (std::size_t i = 1; i <= t.size(); ++i)
        out.push_back({toks[i - 1], {}, g.at(i).offensive ? 1u : 0u});
    } else {
      for (const auto& [pair, s] : g.stance_pairs)
        out.push_back({toks[pair.first - 1], toks[pair.second - 1], static_cast<std::size_t>(s)});
    }
  }
  return out;
}

}  // namespace convsafe::nbow
