#pragma once

// Annotation service: hands out threads to workers under leases, records
// finished annotations in an append-only JSON-lines store.

#include <fcntl.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <chrono>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "convsafe/annotation.hpp"
#include "convsafe/corpus.hpp"
#include "convsafe/error.hpp"
#include "convsafe/text.hpp"

namespace convsafe::service {

class LeaseExpired : public DataError {
 public:
  using DataError::DataError;
};

class SchemaInvalid : public DataError {
 public:
  using DataError::DataError;
};

class Duplicate : public DataError {
 public:
  using DataError::DataError;
};

using Clock = std::chrono::system_clock;

// "90", "90s", "30m", "2h", "250ms"
inline std::chrono::milliseconds parse_duration(const std::string& s) {
  std::size_t pos = 0;
  long long v = 0;
  try {
    v = std::stoll(s, &pos);
  } catch (const std::exception&) {
    throw UsageError("bad duration \"" + s + "\"");
  }
  const std::string unit = s.substr(pos);
  if (v < 0) throw UsageError("negative duration \"" + s + "\"");
  if (unit == "ms") return std::chrono::milliseconds(v);
  if (unit.empty() || unit == "s") return std::chrono::seconds(v);
  if (unit == "m") return std::chrono::minutes(v);
  if (unit == "h") return std::chrono::hours(v);
  throw UsageError("bad duration unit in \"" + s + "\"");
}

// Append-only log of committed annotations. A line is acknowledged only after
// write + fsync; on open the log is replayed and a torn final line (no
// trailing newline, so never acknowledged) is cut off.
class AnnotationStore {
 public:
  explicit AnnotationStore(std::string path) : path_(std::move(path)) {
    replay();
    fd_ = ::open(path_.c_str(), O_WRONLY | O_APPEND | O_CREAT | O_CLOEXEC, 0644);
    if (fd_ < 0) throw DataError("cannot open store " + path_ + ": " + std::strerror(errno));
  }
  AnnotationStore(const AnnotationStore&) = delete;
  AnnotationStore& operator=(const AnnotationStore&) = delete;
  ~AnnotationStore() {
    if (fd_ >= 0) ::close(fd_);
  }

  const std::string& path() const { return path_; }
  const std::vector<WorkerAnnotation>& records() const { return records_; }
  std::size_t size() const { return records_.size(); }

  // Caller serializes commits.
  void append(const WorkerAnnotation& a) {
    std::string line = to_json(a).dump();
    line += '\n';
    const char* p = line.data();
    std::size_t left = line.size();
    while (left > 0) {
      const ssize_t n = ::write(fd_, p, left);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw DataError("write to store failed: " + std::string(std::strerror(errno)));
      }
      p += n;
      left -= static_cast<std::size_t>(n);
    }
    if (::fsync(fd_) != 0) throw DataError("fsync on store failed: " + std::string(std::strerror(errno)));
    records_.push_back(a);
    lines_.push_back(std::move(line));
  }

  // Committed records in commit order, byte for byte as stored.
  void export_jsonl(std::ostream& out) const {
    for (const auto& l : lines_) out << l;
  }
  std::string export_jsonl() const {
    std::ostringstream os;
    export_jsonl(os);
    return os.str();
  }

 private:
  void replay() {
    std::ifstream in(path_, std::ios::binary);
    if (!in) return;
    std::string all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::size_t start = 0, lineno = 0;
    while (start < all.size()) {
      const auto nl = all.find('\n', start);
      if (nl == std::string::npos) {
        // torn tail from a crash mid-append
        if (::truncate(path_.c_str(), static_cast<off_t>(start)) != 0)
          throw DataError("cannot truncate torn store tail: " + std::string(std::strerror(errno)));
        break;
      }
      ++lineno;
      std::string line = all.substr(start, nl - start + 1);
      start = nl + 1;
      if (text::trim(line).empty()) continue;
      try {
        records_.push_back(worker_annotation_from_json(json::parse(line)));
      } catch (const std::exception& e) {
        throw DataError("store " + path_ + " line " + std::to_string(lineno) + ": " + e.what());
      }
      lines_.push_back(std::move(line));
    }
  }

  std::string path_;
  int fd_ = -1;
  std::vector<WorkerAnnotation> records_;
  std::vector<std::string> lines_;
};

struct ServiceConfig {
  int workers_per_thread = 5;
  std::chrono::milliseconds lease_ttl = std::chrono::minutes(30);
  std::function<Clock::time_point()> now = [] { return Clock::now(); };
};

struct TaskAssignment {
  const Thread* thread = nullptr;
  int remaining_slots = 0;
  std::string assignment_id;
  Clock::time_point lease_expiry;
};

inline std::int64_t unix_ms(Clock::time_point t) {
  return std::chrono::duration_cast<std::chrono::milliseconds>(t.time_since_epoch()).count();
}

inline json to_json(const TaskAssignment& t) {
  return {{"assignment_id", t.assignment_id},
          {"remaining_slots", t.remaining_slots},
          {"lease_expiry", unix_ms(t.lease_expiry)},
          {"thread", thread_to_json(*t.thread)}};
}

struct Progress {
  std::size_t threads = 0;
  int workers_per_thread = 5;
  std::size_t annotations = 0;
  std::size_t complete = 0;
  std::vector<std::size_t> coverage_histogram;  // [c] = threads with c committed annotations
};

inline json to_json(const Progress& p) {
  return {{"threads", p.threads},
          {"workers_per_thread", p.workers_per_thread},
          {"annotations", p.annotations},
          {"complete", p.complete},
          {"coverage", p.coverage_histogram}};
}

// Full-form check for a submission against its thread: idx 1..k each once,
// every pair j<i has a stance, bot responses (and only they) carry plausible.
inline void check_complete(const WorkerAnnotation& a, const Thread& t, const TargetVocabulary* vocab) {
  try {
    validate(a, vocab);
  } catch (const SchemaError& e) {
    throw SchemaInvalid(e.what());
  }
  const std::size_t k = t.size();
  if (a.items.size() != k)
    throw SchemaInvalid("expected " + std::to_string(k) + " items, got " + std::to_string(a.items.size()));
  for (std::size_t i = 1; i <= k; ++i) {
    const auto& it = a.items[i - 1];
    if (it.idx != i) throw SchemaInvalid("missing item for utterance " + std::to_string(i));
    for (std::size_t j = 1; j < i; ++j)
      if (!it.stance.count(j))
        throw SchemaInvalid("missing stance for pair (" + std::to_string(j) + "<-" + std::to_string(i) + ")");
    const bool bot = t.at(i).speaker.is_bot();
    if (bot && !it.plausible) throw SchemaInvalid("missing plausible for bot response " + std::to_string(i));
    if (!bot && it.plausible)
      throw SchemaInvalid("plausible given for non-bot utterance " + std::to_string(i));
  }
}

class AnnotationService {
 public:
  AnnotationService(std::vector<Thread> threads, AnnotationStore& store, ServiceConfig cfg = {},
                    TargetVocabulary vocab = {})
      : threads_(std::move(threads)), store_(store), cfg_(std::move(cfg)), vocab_(std::move(vocab)) {
    if (cfg_.workers_per_thread < 1) throw UsageError("workers_per_thread must be >= 1");
    for (std::size_t i = 0; i < threads_.size(); ++i)
      if (!by_id_.emplace(threads_[i].id, i).second) throw DataError("duplicate thread id " + threads_[i].id);
    committed_.resize(threads_.size());
    for (const auto& a : store_.records()) {
      auto it = by_id_.find(a.thread_id);
      if (it == by_id_.end()) throw DataError("store references unknown thread " + a.thread_id);
      auto& done = committed_[it->second];
      if (!done.insert(a.worker_id).second)
        throw DataError("store has two annotations by " + a.worker_id + " for thread " + a.thread_id);
      if (static_cast<int>(done.size()) > cfg_.workers_per_thread)
        throw DataError("store exceeds workers_per_thread for thread " + a.thread_id);
    }
    std::random_device rd;
    id_salt_ = (static_cast<std::uint64_t>(rd()) << 32) ^ rd();
    publish_progress();
  }

  const std::vector<Thread>& threads() const { return threads_; }
  const TargetVocabulary& vocab() const { return vocab_; }
  const ServiceConfig& config() const { return cfg_; }

  // Immutable after construction, so no lock.
  const Thread* find_thread(const std::string& id) const {
    auto it = by_id_.find(id);
    return it == by_id_.end() ? nullptr : &threads_[it->second];
  }

  // Least-covered thread (committed + live leases) that the worker has not
  // annotated; an existing live lease of this worker is handed back as is.
  std::optional<TaskAssignment> next_task(const std::string& worker) {
    if (worker.empty()) throw UsageError("worker id must be non-empty");
    std::lock_guard lock(mu_);
    const auto now = cfg_.now();
    expire(now);
    for (const auto& [id, l] : leases_)
      if (l.worker == worker) return assignment(id, l);
    std::optional<std::size_t> best;
    std::size_t best_load = 0;
    for (std::size_t i = 0; i < threads_.size(); ++i) {
      if (committed_[i].count(worker)) continue;
      const std::size_t load = committed_[i].size() + leased_[i];
      if (load >= static_cast<std::size_t>(cfg_.workers_per_thread)) continue;
      if (!best || load < best_load) {
        best = i;
        best_load = load;
      }
    }
    if (!best) return std::nullopt;
    const std::string id = new_id();
    Lease l{worker, *best, now + cfg_.lease_ttl};
    ++leased_[*best];
    auto [it, _] = leases_.emplace(id, l);
    return assignment(id, it->second);
  }

  // Returns remaining slots on the thread after this commit.
  int submit(const std::string& assignment_id, const WorkerAnnotation& a) {
    std::lock_guard lock(mu_);
    if (submitted_.count(assignment_id)) throw Duplicate("assignment " + assignment_id + " already submitted");
    auto it = leases_.find(assignment_id);
    if (it == leases_.end()) throw LeaseExpired("assignment " + assignment_id + " is unknown or its lease expired");
    if (it->second.expiry <= cfg_.now()) {
      release(it);
      throw LeaseExpired("lease for assignment " + assignment_id + " expired");
    }
    const Lease& l = it->second;
    const Thread& t = threads_[l.thread];
    if (a.worker_id != l.worker)
      throw SchemaInvalid("annotation worker " + a.worker_id + " does not hold this lease");
    if (a.thread_id != t.id) throw SchemaInvalid("annotation is for thread " + a.thread_id + ", lease is for " + t.id);
    check_complete(a, t, &vocab_);
    auto& done = committed_[l.thread];
    if (done.count(a.worker_id)) throw Duplicate("worker " + a.worker_id + " already annotated thread " + t.id);
    store_.append(a);  // durable before ack
    done.insert(a.worker_id);
    submitted_.insert(assignment_id);
    release(it);
    publish_progress();
    return cfg_.workers_per_thread - static_cast<int>(done.size());
  }

  std::shared_ptr<const Progress> progress() const { return std::atomic_load(&progress_); }

  std::size_t active_leases() {
    std::lock_guard lock(mu_);
    expire(cfg_.now());
    return leases_.size();
  }

 private:
  struct Lease {
    std::string worker;
    std::size_t thread;
    Clock::time_point expiry;
  };

  TaskAssignment assignment(const std::string& id, const Lease& l) const {
    return {&threads_[l.thread], cfg_.workers_per_thread - static_cast<int>(committed_[l.thread].size()), id,
            l.expiry};
  }

  void release(std::map<std::string, Lease>::iterator it) {
    --leased_[it->second.thread];
    leases_.erase(it);
  }

  void expire(Clock::time_point now) {
    for (auto it = leases_.begin(); it != leases_.end();) {
      if (it->second.expiry <= now) {
        auto dead = it++;
        release(dead);
      } else {
        ++it;
      }
    }
  }

  std::string new_id() {
    const std::uint64_t n = ++id_counter_;
    return text::hex64(n) + "-" + text::hex64(text::fnv1a(std::to_string(n), id_salt_));
  }

  void publish_progress() {
    auto p = std::make_shared<Progress>();
    p->threads = threads_.size();
    p->workers_per_thread = cfg_.workers_per_thread;
    p->coverage_histogram.assign(static_cast<std::size_t>(cfg_.workers_per_thread) + 1, 0);
    for (const auto& done : committed_) {
      p->annotations += done.size();
      p->complete += done.size() >= static_cast<std::size_t>(cfg_.workers_per_thread);
      ++p->coverage_histogram[done.size()];
    }
    std::atomic_store(&progress_, std::shared_ptr<const Progress>(std::move(p)));
  }

  std::vector<Thread> threads_;
  std::unordered_map<std::string, std::size_t> by_id_;
  AnnotationStore& store_;
  ServiceConfig cfg_;
  TargetVocabulary vocab_;

  std::mutex mu_;
  std::vector<std::set<std::string>> committed_;
  std::unordered_map<std::size_t, std::size_t> leased_;
  std::map<std::string, Lease> leases_;
  std::set<std::string> submitted_;
  std::uint64_t id_counter_ = 0;
  std::uint64_t id_salt_ = 0;
  std::shared_ptr<const Progress> progress_;
};

inline void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

inline void send_error(httplib::Response& res, int status, const std::string& kind, const std::string& detail) {
  send_json(res, status, {{"error", kind}, {"detail", detail}});
}

// GET  /api/task?worker=W   -> {"status":"assigned", ...TaskAssignment} | {"status":"none"}
// POST /api/submit          {"assignment_id", "annotation": WorkerAnnotation} -> {"ok":true, "remaining_slots"}
// GET  /api/thread/{id}, /api/progress, /api/vocab/targets
inline void install_routes(httplib::Server& srv, AnnotationService& svc, const std::string& ui_dir = "") {
  srv.Get("/api/task", [&svc](const httplib::Request& req, httplib::Response& res) {
    const std::string worker = req.get_param_value("worker");
    if (worker.empty()) return send_error(res, 400, "UsageError", "missing worker parameter");
    auto t = svc.next_task(worker);
    if (!t) return send_json(res, 200, {{"status", "none"}});
    json j = to_json(*t);
    j["status"] = "assigned";
    send_json(res, 200, j);
  });
  srv.Post("/api/submit", [&svc](const httplib::Request& req, httplib::Response& res) {
    try {
      const json body = json::parse(req.body);
      if (!body.is_object() || !body.contains("assignment_id") || !body["assignment_id"].is_string() ||
          !body.contains("annotation"))
        return send_error(res, 400, "SchemaInvalid", "body needs assignment_id and annotation");
      WorkerAnnotation a;
      try {
        a = worker_annotation_from_json(body["annotation"]);
      } catch (const SchemaError& e) {
        throw SchemaInvalid(e.what());
      }
      const int remaining = svc.submit(body["assignment_id"].get<std::string>(), a);
      send_json(res, 200, {{"ok", true}, {"remaining_slots", remaining}});
    } catch (const json::exception& e) {
      send_error(res, 400, "SchemaInvalid", std::string("invalid JSON: ") + e.what());
    } catch (const LeaseExpired& e) {
      send_error(res, 410, "LeaseExpired", e.what());
    } catch (const Duplicate& e) {
      send_error(res, 409, "Duplicate", e.what());
    } catch (const SchemaInvalid& e) {
      send_error(res, 422, "SchemaInvalid", e.what());
    } catch (const std::exception& e) {
      send_error(res, 500, "InternalError", e.what());
    }
  });
  srv.Get(R"(/api/thread/([^/]+))", [&svc](const httplib::Request& req, httplib::Response& res) {
    const Thread* t = svc.find_thread(req.matches[1]);
    if (!t) return send_error(res, 404, "NotFound", "no thread " + std::string(req.matches[1]));
    send_json(res, 200, thread_to_json(*t));
  });
  srv.Get("/api/progress",
          [&svc](const httplib::Request&, httplib::Response& res) { send_json(res, 200, to_json(*svc.progress())); });
  srv.Get("/api/vocab/targets", [&svc](const httplib::Request&, httplib::Response& res) {
    const auto& n = svc.vocab().names();
    send_json(res, 200, {{"targets", std::vector<std::string>(n.begin(), n.end())}});
  });
  if (!ui_dir.empty() && !srv.set_mount_point("/", ui_dir)) throw UsageError("UI directory not found: " + ui_dir);
}

}  // namespace convsafe::service
