#pragma once

// Threaded conversations: ingestion, cleaning, flattening and annotation sampling.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <istream>
#include <optional>
#include <ostream>
#include <regex>
#include <set>
#include <string>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "convsafe/error.hpp"
#include "convsafe/rng.hpp"
#include "convsafe/text.hpp"

namespace convsafe {

using json = nlohmann::json;

enum class UtteranceKind { Title, Post, Comment, BotResponse };

struct Speaker {
  enum class Type { Human, Bot };
  Type type = Type::Human;
  std::string name;  // author id for humans, model name for bots

  static Speaker human(std::string id) { return {Type::Human, std::move(id)}; }
  static Speaker bot(std::string model) { return {Type::Bot, std::move(model)}; }
  bool is_bot() const { return type == Type::Bot; }
  bool operator==(const Speaker&) const = default;
};

struct Utterance {
  std::string text;
  Speaker speaker;
  UtteranceKind kind = UtteranceKind::Comment;
  std::optional<std::int64_t> created_at;  // UTC seconds

  bool operator==(const Utterance&) const = default;
};

enum class Source { AnySub, OffensiveSub };

inline std::string to_string(Source s) { return s == Source::AnySub ? "any" : "offensive"; }

// u_1..u_k in conversation order. Index i in the annotation schema is 1-based.
struct Thread {
  std::string id;
  std::string subreddit;
  Source source = Source::AnySub;
  std::vector<Utterance> utterances;

  std::size_t size() const { return utterances.size(); }
  const Utterance& at(std::size_t one_based) const { return utterances.at(one_based - 1); }
  const Utterance& last() const { return utterances.back(); }
  std::vector<std::string> texts() const {
    std::vector<std::string> out;
    out.reserve(utterances.size());
    for (const auto& u : utterances) out.push_back(u.text);
    return out;
  }
  bool operator==(const Thread&) const = default;
};

inline const std::vector<std::string>& default_reserved_tokens() {
  static const std::vector<std::string> tokens = {"[EOU]", "[SAFE]", "[OFF]", "[NEU]", "[AGR]"};
  return tokens;
}

struct PreprocessConfig {
  std::string url_token = "<URL>";
  std::size_t max_post_words = 70;
  std::size_t max_comment_words = 50;
  bool lowercase_for_tokens = true;
  // Stripped from user text so that [EOU] flattening and control-token corpora stay reversible.
  std::vector<std::string> reserved_tokens = default_reserved_tokens();

  void validate() const {
    if (max_post_words == 0 || max_comment_words == 0)
      throw UsageError("max_post_words and max_comment_words must be positive");
  }
};

// ---------------------------------------------------------------------------
// JSON-lines schema
// ---------------------------------------------------------------------------

struct LineError {
  std::size_t line = 0;  // 1-based
  std::string message;
};

template <typename T>
struct ParseResult {
  std::vector<T> items;
  std::vector<LineError> errors;
};

namespace detail {

inline std::string require_string(const json& obj, const char* key) {
  auto it = obj.find(key);
  if (it == obj.end() || !it->is_string())
    throw SchemaError(std::string("missing or non-string field '") + key + "'");
  return it->get<std::string>();
}

inline std::optional<std::string> optional_string(const json& obj, const char* key) {
  auto it = obj.find(key);
  if (it == obj.end() || it->is_null()) return std::nullopt;
  if (!it->is_string()) throw SchemaError(std::string("field '") + key + "' must be a string");
  return it->get<std::string>();
}

inline void require_text(const std::string& s, const std::string& what) {
  if (text::trim(s).empty()) throw SchemaError(what + " has empty text");
}

}  // namespace detail

inline Thread thread_from_json(const json& j) {
  if (!j.is_object()) throw SchemaError("record is not a JSON object");
  Thread t;
  t.id = detail::require_string(j, "id");
  if (t.id.empty()) throw SchemaError("empty thread id");
  t.subreddit = detail::require_string(j, "subreddit");
  const auto src = detail::require_string(j, "source");
  if (src == "any")
    t.source = Source::AnySub;
  else if (src == "offensive")
    t.source = Source::OffensiveSub;
  else
    throw SchemaError("source must be \"any\" or \"offensive\", got \"" + src + "\"");

  const auto title = detail::optional_string(j, "title");
  const auto post = detail::optional_string(j, "post");
  const bool has_title = title && !text::trim(*title).empty();
  const bool has_post = post && !text::trim(*post).empty();
  if (title && !has_title) throw SchemaError("title has empty text");
  if (post && !has_post) throw SchemaError("post has empty text");
  if (has_title || has_post) {
    Utterance head;
    head.speaker = Speaker::human("OP");
    if (has_title && has_post) {
      head.text = *title + "\n\n" + *post;
      head.kind = UtteranceKind::Post;
    } else if (has_title) {
      head.text = *title;
      head.kind = UtteranceKind::Title;
    } else {
      head.text = *post;
      head.kind = UtteranceKind::Post;
    }
    t.utterances.push_back(std::move(head));
  }

  if (auto it = j.find("comments"); it != j.end()) {
    if (!it->is_array()) throw SchemaError("comments must be an array");
    for (std::size_t i = 0; i < it->size(); ++i) {
      const auto& c = (*it)[i];
      if (!c.is_object()) throw SchemaError("comment " + std::to_string(i) + " is not an object");
      Utterance u;
      u.kind = UtteranceKind::Comment;
      u.speaker = Speaker::human(detail::require_string(c, "author"));
      u.text = detail::require_string(c, "text");
      detail::require_text(u.text, "comment " + std::to_string(i));
      if (auto ts = c.find("ts"); ts != c.end() && !ts->is_null()) {
        if (!ts->is_number_integer()) throw SchemaError("comment ts must be an integer");
        u.created_at = ts->get<std::int64_t>();
      }
      t.utterances.push_back(std::move(u));
    }
  } else {
    throw SchemaError("missing field 'comments'");
  }

  if (auto it = j.find("bot_responses"); it != j.end() && !it->is_null()) {
    if (!it->is_array()) throw SchemaError("bot_responses must be an array");
    for (std::size_t i = 0; i < it->size(); ++i) {
      const auto& b = (*it)[i];
      if (!b.is_object()) throw SchemaError("bot response " + std::to_string(i) + " is not an object");
      Utterance u;
      u.kind = UtteranceKind::BotResponse;
      u.speaker = Speaker::bot(detail::require_string(b, "model"));
      u.text = detail::require_string(b, "text");
      detail::require_text(u.text, "bot response " + std::to_string(i));
      t.utterances.push_back(std::move(u));
    }
  }
  if (t.utterances.empty()) throw SchemaError("thread has no utterances");
  return t;
}

// Inverse of thread_from_json for threads whose head is a title/post.
inline json thread_to_json(const Thread& t) {
  json j;
  j["id"] = t.id;
  j["subreddit"] = t.subreddit;
  j["source"] = to_string(t.source);
  json comments = json::array();
  json bots = json::array();
  for (const auto& u : t.utterances) {
    switch (u.kind) {
      case UtteranceKind::Title:
        j["title"] = u.text;
        break;
      case UtteranceKind::Post:
        j["post"] = u.text;
        break;
      case UtteranceKind::Comment: {
        json c = {{"author", u.speaker.name}, {"text", u.text}};
        if (u.created_at) c["ts"] = *u.created_at;
        comments.push_back(std::move(c));
        break;
      }
      case UtteranceKind::BotResponse:
        bots.push_back({{"model", u.speaker.name}, {"text", u.text}});
        break;
    }
  }
  j["comments"] = std::move(comments);
  if (!bots.empty()) j["bot_responses"] = std::move(bots);
  return j;
}

// Reads JSON lines; malformed lines are reported and skipped.
template <typename T, typename FromJson>
ParseResult<T> parse_jsonl(std::istream& in, FromJson&& from_json) {
  ParseResult<T> result;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (text::trim(line).empty()) continue;
    try {
      result.items.push_back(from_json(json::parse(line)));
    } catch (const json::exception& e) {
      result.errors.push_back({lineno, std::string("invalid JSON: ") + e.what()});
    } catch (const DataError& e) {
      result.errors.push_back({lineno, e.what()});
    }
  }
  if (in.bad()) throw DataError("I/O failure while reading input at line " + std::to_string(lineno));
  return result;
}

inline ParseResult<Thread> parse_threads(std::istream& in) {
  return parse_jsonl<Thread>(in, [](const json& j) { return thread_from_json(j); });
}

inline void write_threads(std::ostream& out, const std::vector<Thread>& threads) {
  for (const auto& t : threads) out << thread_to_json(t).dump() << '\n';
}

// ---------------------------------------------------------------------------
// Cleaning
// ---------------------------------------------------------------------------

inline const std::regex& url_regex() {
  static const std::regex re(R"((https?://[^\s]+)|(www\.[^\s]+))",
                             std::regex::ECMAScript | std::regex::icase);
  return re;
}

inline std::string clean_text(std::string s, const PreprocessConfig& cfg, std::size_t max_words) {
  for (const auto& tok : cfg.reserved_tokens) s = text::replace_all(std::move(s), tok, " ");
  s = std::regex_replace(s, url_regex(), cfg.url_token);
  return text::truncate_words(s, max_words);
}

// Strips reserved tokens, replaces URLs, truncates by word count.
// Idempotent: preprocess(preprocess(t)) == preprocess(t).
inline Thread preprocess(const Thread& thread, const PreprocessConfig& cfg = {}) {
  cfg.validate();
  Thread out = thread;
  for (std::size_t i = 0; i < out.utterances.size(); ++i) {
    auto& u = out.utterances[i];
    const bool head = u.kind == UtteranceKind::Post || u.kind == UtteranceKind::Title;
    u.text = clean_text(std::move(u.text), cfg, head ? cfg.max_post_words : cfg.max_comment_words);
    if (u.text.empty())
      throw EmptyAfterCleaning(thread.id, head ? "post" : "utterance " + std::to_string(i + 1));
  }
  return out;
}

// Tokens the classifier sees for one utterance.
inline std::vector<std::string> utterance_tokens(std::string_view s, const PreprocessConfig& cfg = {}) {
  if (cfg.lowercase_for_tokens) return text::tokenize(s);
  auto toks = text::words(s);
  return {toks.begin(), toks.end()};
}

// ---------------------------------------------------------------------------
// Export formats
// ---------------------------------------------------------------------------

inline std::string flatten_with_eou(const std::vector<std::string>& utterances,
                                    std::string_view eou = "[EOU]") {
  std::string out;
  for (const auto& u : utterances) {
    out += u;
    out += eou;
  }
  return out;
}

inline std::string flatten_with_eou(const Thread& thread, std::string_view eou = "[EOU]") {
  return flatten_with_eou(thread.texts(), eou);
}

// Inverse of flatten_with_eou (the trailing separator yields no extra element).
inline std::vector<std::string> split_eou(std::string_view flat, std::string_view eou = "[EOU]") {
  auto parts = text::split(flat, eou);
  if (!parts.empty() && parts.back().empty()) parts.pop_back();
  return parts;
}

inline std::string gpt3_prompt(const std::vector<std::string>& utterances) {
  std::string out = "The following is a conversation thread between multiple people on Reddit.";
  for (std::size_t i = 0; i < utterances.size(); ++i) {
    out += " U" + std::to_string(i + 1) + ":" + utterances[i];
  }
  out += " U" + std::to_string(utterances.size() + 1) + ":";
  return out;
}

inline std::string gpt3_prompt(const Thread& thread) { return gpt3_prompt(thread.texts()); }

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

// Text of the last human comment (falls back to the last utterance).
inline const Utterance& last_comment(const Thread& t) {
  for (auto it = t.utterances.rbegin(); it != t.utterances.rend(); ++it)
    if (it->kind == UtteranceKind::Comment) return *it;
  return t.last();
}

using ThreadScorer = std::function<double(const Thread&)>;

struct SampleConfig {
  std::size_t n_random_per_source = 500;
  std::size_t n_offensive_per_source = 500;
  double threshold = 0.7;
  std::uint64_t seed = 0;
};

namespace detail {

// Canonical order: by id, first occurrence wins on duplicate ids.
inline std::vector<const Thread*> canonical_pool(const std::vector<Thread>& threads) {
  std::vector<const Thread*> pool;
  pool.reserve(threads.size());
  std::unordered_set<std::string> seen;
  for (const auto& t : threads)
    if (seen.insert(t.id).second) pool.push_back(&t);
  std::stable_sort(pool.begin(), pool.end(),
                   [](const Thread* a, const Thread* b) { return a->id < b->id; });
  return pool;
}

}  // namespace detail

// Two-stage sampling: per source, n_random uniformly, then n_offensive from
// the remaining threads whose last comment scores >= threshold.
inline std::vector<Thread> stratified_sample(const std::vector<Thread>& threads,
                                             const ThreadScorer& scorer,
                                             const SampleConfig& cfg) {
  const auto pool = detail::canonical_pool(threads);
  Rng rng(cfg.seed);
  std::vector<Thread> out;
  for (Source src : {Source::AnySub, Source::OffensiveSub}) {
    std::vector<const Thread*> group;
    for (const Thread* t : pool)
      if (t->source == src) group.push_back(t);
    if (cfg.n_random_per_source > group.size())
      throw NotEnoughData("source '" + to_string(src) + "' has " + std::to_string(group.size()) +
                          " threads, wanted " + std::to_string(cfg.n_random_per_source) +
                          " random picks");
    const auto picked = sample_indices(rng, group.size(), cfg.n_random_per_source);
    std::vector<bool> taken(group.size(), false);
    for (auto i : picked) {
      taken[i] = true;
      out.push_back(*group[i]);
    }
    std::vector<const Thread*> qualifying;
    for (std::size_t i = 0; i < group.size(); ++i)
      if (!taken[i] && scorer(*group[i]) >= cfg.threshold) qualifying.push_back(group[i]);
    if (qualifying.size() < cfg.n_offensive_per_source)
      throw InsufficientOffensive(to_string(src), qualifying.size(), cfg.n_offensive_per_source);
    for (auto i : sample_indices(rng, qualifying.size(), cfg.n_offensive_per_source))
      out.push_back(*qualifying[i]);
  }
  return out;
}

// n threads whose last utterance is offensive, in input order.
inline std::vector<Thread> select_offensive_contexts(
    const std::vector<Thread>& threads, const std::function<bool(const Thread&)>& last_is_offensive,
    std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> qualifying;
  for (std::size_t i = 0; i < threads.size(); ++i)
    if (last_is_offensive(threads[i])) qualifying.push_back(i);
  if (qualifying.size() < n) throw InsufficientOffensive("corpus", qualifying.size(), n);
  std::vector<Thread> out;
  out.reserve(n);
  if (qualifying.size() == n) {
    for (auto i : qualifying) out.push_back(threads[i]);
    return out;
  }
  Rng rng(seed);
  for (auto k : sample_indices(rng, qualifying.size(), n)) out.push_back(threads[qualifying[k]]);
  return out;
}

}  // namespace convsafe
