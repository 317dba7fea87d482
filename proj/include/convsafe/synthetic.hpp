#pragma once

// Seeded synthetic corpus: threads whose offensiveness and stance are marked by
// fixed trigger words, five-worker annotations whose gold equals the truth,
// and generated responses for the automatic CTG metrics.

#include <algorithm>
#include <string>
#include <vector>

#include "convsafe/annotation.hpp"
#include "convsafe/corpus.hpp"
#include "convsafe/eval/autoeval.hpp"
#include "convsafe/rng.hpp"

namespace convsafe::synthetic {

inline const std::vector<std::string>& filler_words() {
  static const std::vector<std::string> w = {
      "the",   "game",  "last",   "night",  "was",    "about", "people", "really", "think", "city",
      "new",   "post",  "thread", "points", "mostly", "time",  "work",   "music",  "movie", "should",
      "maybe", "never", "always", "vote",   "news",   "price", "market", "team",   "coach", "season",
      "phone", "app",   "update", "policy", "law",    "book",  "story",  "school", "food",  "weather"};
  return w;
}
inline const std::vector<std::string>& offensive_words() {
  static const std::vector<std::string> w = {"idiot", "moron", "stupid", "trash", "loser", "pathetic", "clown",
                                             "garbage"};
  return w;
}
inline const std::vector<std::string>& agree_words() {
  static const std::vector<std::string> w = {"agree", "exactly", "true", "yes", "indeed"};
  return w;
}
inline const std::vector<std::string>& disagree_words() {
  static const std::vector<std::string> w = {"wrong", "nonsense", "false", "nope", "ridiculous"};
  return w;
}
inline const std::vector<std::string>& profane_words() {
  static const std::vector<std::string> w = {"damn", "hell", "crap"};
  return w;
}
inline const std::vector<std::string>& offensive_subreddits() {
  static const std::vector<std::string> s = {"AskThe_Donald", "Braincels", "MensRights", "MGTOW", "TwoXChromosomes",
                                             "Libertarian",   "atheism",   "islam",      "lgbt",  "unpopularopinion"};
  return s;
}
inline const std::vector<std::string>& other_subreddits() {
  static const std::vector<std::string> s = {"AskReddit", "news", "gaming", "movies", "sports", "science"};
  return s;
}
inline const std::vector<std::string>& target_groups() {
  static const std::vector<std::string> s = {"women", "feminists", "religious folks", "LGBTQ folks", "celebrity",
                                             "reddit user", "individual", "black folks", "liberals",
                                             "people from a region"};
  return s;
}

struct Truth {
  std::vector<bool> offensive;      // per utterance
  std::vector<Stance> stance;       // per utterance; u_i's stance toward every earlier u_j (index 0 unused)
  std::vector<std::string> target;  // per utterance, set when offensive
};

struct Spec {
  std::size_t n_threads = 200;
  std::size_t workers = 5;
  std::size_t worker_pool = 12;
  double noisy_flip = 0.3;  // one worker per thread answers at random this often
  std::size_t n_responses_per_model = 60;
  std::uint64_t seed = 20210901;
};

struct Corpus {
  std::vector<Thread> threads;
  std::vector<Truth> truth;
  std::vector<WorkerAnnotation> annotations;
  std::vector<eval::GeneratedResponse> responses;
};

template <typename T>
const T& pick(Rng& rng, const std::vector<T>& v) {
  return v[rng.below(v.size())];
}

// Filler words with the markers spliced in at random positions.
inline std::string utterance(Rng& rng, std::size_t min_words, std::size_t max_words, bool offensive, Stance stance,
                             bool profane = false) {
  std::vector<std::string> w;
  const std::size_t n = min_words + rng.below(max_words - min_words + 1);
  for (std::size_t i = 0; i < n; ++i) w.push_back(pick(rng, filler_words()));
  auto insert = [&](const std::string& s) { w.insert(w.begin() + static_cast<std::ptrdiff_t>(rng.below(w.size() + 1)), s); };
  if (offensive) insert(pick(rng, offensive_words()));
  if (stance == Stance::Agree) insert(pick(rng, agree_words()));
  if (stance == Stance::Disagree) insert(pick(rng, disagree_words()));
  if (profane) insert(pick(rng, profane_words()));
  return text::join(w, " ");
}

inline Stance draw_stance(Rng& rng) {
  const double u = rng.uniform();
  return u < 0.55 ? Stance::Neutral : u < 0.82 ? Stance::Agree : Stance::Disagree;
}

inline Corpus make_corpus(const Spec& spec = {}) {
  Rng rng(spec.seed);
  Corpus c;
  std::vector<std::string> pool;
  for (std::size_t w = 1; w <= spec.worker_pool; ++w) pool.push_back((w < 10 ? "w0" : "w") + std::to_string(w));
  const std::int64_t t0 = 1546300800;  // 2019-01-01
  const std::int64_t span = 730LL * 86400;

  for (std::size_t n = 0; n < spec.n_threads; ++n) {
    Thread t;
    t.id = "syn" + std::string(n < 9 ? "00" : n < 99 ? "0" : "") + std::to_string(n + 1);
    t.source = n % 2 ? Source::OffensiveSub : Source::AnySub;
    t.subreddit = t.source == Source::OffensiveSub ? pick(rng, offensive_subreddits()) : pick(rng, other_subreddits());
    const double off_rate = t.source == Source::OffensiveSub ? 0.45 : 0.25;
    Truth tr;
    const std::size_t n_comments = 1 + rng.below(3);
    const bool with_bot = rng.uniform() < 0.25;
    const std::size_t k = 1 + n_comments + (with_bot ? 1 : 0);
    std::int64_t ts = t0 + static_cast<std::int64_t>(rng.below(static_cast<std::size_t>(span)));
    for (std::size_t i = 1; i <= k; ++i) {
      const bool off = rng.uniform() < (i == 1 ? off_rate / 2 : off_rate);
      const Stance st = i == 1 ? Stance::Neutral : draw_stance(rng);
      const bool profane = off && rng.uniform() < 0.4;
      tr.offensive.push_back(off);
      tr.stance.push_back(st);
      tr.target.push_back(off ? pick(rng, target_groups()) : "");
      Utterance u;
      if (i == 1) {
        u.kind = UtteranceKind::Title;
        u.speaker = Speaker::human("OP");
        u.text = utterance(rng, 5, 10, off, st, profane);
        if (rng.uniform() < 0.2) u.text += " https://example.com/p/" + std::to_string(n);
      } else if (with_bot && i == k) {
        u.kind = UtteranceKind::BotResponse;
        u.speaker = Speaker::bot(rng.uniform() < 0.5 ? "dgpt" : "gpt3");
        u.text = utterance(rng, 6, 14, off, st, profane);
      } else {
        u.kind = UtteranceKind::Comment;
        u.speaker = Speaker::human("user" + std::to_string(rng.below(400)));
        ts += static_cast<std::int64_t>(60 + rng.below(7200));
        u.created_at = ts;
        u.text = utterance(rng, 6, 14, off, st, profane);
      }
      t.utterances.push_back(std::move(u));
    }

    // five distinct workers, one of them noisy
    const auto chosen = sample_indices(rng, pool.size(), spec.workers);
    const std::size_t noisy = rng.below(spec.workers);
    for (std::size_t w = 0; w < chosen.size(); ++w) {
      WorkerAnnotation a{pool[chosen[w]], t.id, {}};
      const bool is_noisy = w == noisy;
      for (std::size_t i = 1; i <= k; ++i) {
        UtteranceJudgment j;
        j.idx = i;
        bool off = tr.offensive[i - 1];
        if (is_noisy && rng.uniform() < spec.noisy_flip) off = !off;
        j.offensive = off ? (rng.uniform() < 0.8 ? Offense4::Yes : Offense4::Maybe)
                          : (rng.uniform() < 0.9 ? Offense4::No : Offense4::NotSure);
        if (off) j.targets = {tr.target[i - 1].empty() ? "other" : tr.target[i - 1]};
        for (std::size_t p = 1; p < i; ++p) {
          Stance s = tr.stance[i - 1];
          if (is_noisy && rng.uniform() < spec.noisy_flip) s = static_cast<Stance>(rng.below(3));
          j.stance[p] = s;
        }
        if (t.at(i).speaker.is_bot()) j.plausible = !(is_noisy && rng.uniform() < spec.noisy_flip);
        a.items.push_back(std::move(j));
      }
      c.annotations.push_back(std::move(a));
    }
    c.threads.push_back(std::move(t));
    c.truth.push_back(std::move(tr));
  }

  // Responses from a baseline and a safety-controlled generator.
  struct Gen {
    const char* model;
    double off, agree, disagree;
  };
  for (const Gen g : {Gen{"baseline", 0.35, 0.35, 0.1}, Gen{"ctg-safe-neu", 0.05, 0.1, 0.05}}) {
    for (std::size_t r = 0; r < spec.n_responses_per_model; ++r) {
      const Thread& t = c.threads[rng.below(c.threads.size())];
      eval::GeneratedResponse out;
      out.model = g.model;
      out.thread_id = t.id;
      out.context = t.texts();
      const double u = rng.uniform();
      const Stance st = u < g.agree ? Stance::Agree : u < g.agree + g.disagree ? Stance::Disagree : Stance::Neutral;
      const bool off = rng.uniform() < g.off;
      out.response = utterance(rng, 4, 12, off, st, off && rng.uniform() < 0.4);
      c.responses.push_back(std::move(out));
    }
  }
  return c;
}

}  // namespace convsafe::synthetic
