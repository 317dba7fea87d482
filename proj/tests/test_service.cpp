#include <catch_amalgamated.hpp>

#include <signal.h>
#include <sys/wait.h>

#include <filesystem>
#include <thread>

#include "convsafe/service.hpp"

using namespace convsafe;
using namespace convsafe::service;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("convsafe_svc_" + std::to_string(::getpid()) + "_" +
                                        std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

std::vector<Thread> corpus(std::size_t n) {
  std::vector<Thread> out;
  for (std::size_t i = 0; i < n; ++i) {
    Thread t;
    t.id = "t" + std::to_string(i);
    t.subreddit = "s";
    t.utterances.push_back({"title " + std::to_string(i), Speaker::human("OP"), UtteranceKind::Title, {}});
    t.utterances.push_back({"comment", Speaker::human("c1"), UtteranceKind::Comment, {}});
    if (i % 2) t.utterances.push_back({"bot says", Speaker::bot("dgpt"), UtteranceKind::BotResponse, {}});
    else t.utterances.push_back({"another", Speaker::human("c2"), UtteranceKind::Comment, {}});
    out.push_back(std::move(t));
  }
  return out;
}

WorkerAnnotation complete(const Thread& t, const std::string& worker) {
  WorkerAnnotation a{worker, t.id, {}};
  for (std::size_t i = 1; i <= t.size(); ++i) {
    UtteranceJudgment u;
    u.idx = i;
    u.offensive = i == 2 ? Offense4::Yes : Offense4::No;
    if (i == 2) u.targets = {"women"};
    for (std::size_t j = 1; j < i; ++j) u.stance[j] = j == 1 ? Stance::Agree : Stance::Neutral;
    if (t.at(i).speaker.is_bot()) u.plausible = true;
    a.items.push_back(u);
  }
  return a;
}

TargetVocabulary vocab() { return TargetVocabulary({"women"}); }

struct ManualClock {
  std::shared_ptr<std::atomic<std::int64_t>> ms = std::make_shared<std::atomic<std::int64_t>>(1'600'000'000'000);
  std::function<Clock::time_point()> fn() const {
    auto p = ms;
    return [p] { return Clock::time_point(std::chrono::milliseconds(p->load())); };
  }
  void advance(std::chrono::milliseconds d) { *ms += d.count(); }
};

struct Running {
  httplib::Server srv;
  std::thread th;
  int port = 0;
  Running(AnnotationService& svc) {
    srv.new_task_queue = [] { return new httplib::ThreadPool(16); };
    install_routes(srv, svc);
    port = srv.bind_to_any_port("127.0.0.1");
    th = std::thread([this] { srv.listen_after_bind(); });
    srv.wait_until_ready();
  }
  ~Running() {
    srv.stop();
    th.join();
  }
};

json get(httplib::Client& c, const std::string& path, int want = 200) {
  auto r = c.Get(path);
  REQUIRE(r);
  CHECK(r->status == want);
  return json::parse(r->body);
}

httplib::Result post_submit(httplib::Client& c, const std::string& id, const WorkerAnnotation& a) {
  return c.Post("/api/submit", json{{"assignment_id", id}, {"annotation", to_json(a)}}.dump(), "application/json");
}

}  // namespace

TEST_CASE("next_task assignment rules", "[service]") {
  TempDir dir;
  AnnotationStore store(dir.file("store.jsonl"));
  ManualClock clock;
  auto threads = corpus(3);
  AnnotationService svc(threads, store, {5, std::chrono::minutes(30), clock.fn()}, vocab());

  auto a = svc.next_task("w1");
  REQUIRE(a);
  CHECK(a->remaining_slots == 5);
  CHECK(a->thread->id == "t0");
  CHECK(svc.next_task("w1")->assignment_id == a->assignment_id);  // re-poll returns the live lease
  auto b = svc.next_task("w2");
  CHECK(b->thread->id == "t1");  // least covered first
  CHECK(b->assignment_id != a->assignment_id);

  CHECK(svc.submit(a->assignment_id, complete(threads[0], "w1")) == 4);
  CHECK(store.size() == 1);
  CHECK_THROWS_AS(svc.submit(a->assignment_id, complete(threads[0], "w1")), Duplicate);

  SECTION("a worker who annotated everything gets nothing") {
    for (int i = 0; i < 2; ++i) {
      auto t = svc.next_task("w1");
      REQUIRE(t);
      svc.submit(t->assignment_id, complete(*t->thread, "w1"));
    }
    CHECK_FALSE(svc.next_task("w1"));
    CHECK(svc.next_task("w3"));
  }
  SECTION("leases expire after the TTL") {
    clock.advance(std::chrono::minutes(31));
    CHECK_THROWS_AS(svc.submit(b->assignment_id, complete(threads[1], "w2")), LeaseExpired);
    CHECK(svc.active_leases() == 0);
    auto again = svc.next_task("w2");
    CHECK(again->assignment_id != b->assignment_id);
  }
  SECTION("cap counts live leases") {
    std::set<std::string> got;
    for (int w = 0; w < 20; ++w)
      if (auto t = svc.next_task("x" + std::to_string(w))) got.insert(t->assignment_id);
    // 3 threads x 5 slots, minus one commit and one live lease (w2)
    CHECK(got.size() == 13);
  }
  SECTION("unknown assignment") { CHECK_THROWS_AS(svc.submit("nope", complete(threads[1], "w2")), LeaseExpired); }
}

TEST_CASE("submission schema walk", "[service]") {
  TempDir dir;
  AnnotationStore store(dir.file("store.jsonl"));
  auto threads = corpus(2);
  AnnotationService svc(threads, store, {}, TargetVocabulary({"women"}));
  auto t = svc.next_task("w");
  REQUIRE(t->thread->id == "t0");

  auto a = complete(threads[0], "w");
  a.items[2].stance.erase(1);
  try {
    svc.submit(t->assignment_id, a);
    FAIL("expected SchemaInvalid");
  } catch (const SchemaInvalid& e) {
    CHECK(std::string(e.what()).find("(1<-3)") != std::string::npos);
  }
  a = complete(threads[0], "w");
  a.items.pop_back();
  CHECK_THROWS_AS(svc.submit(t->assignment_id, a), SchemaInvalid);
  a = complete(threads[0], "w");
  a.items[0].plausible = false;
  CHECK_THROWS_AS(svc.submit(t->assignment_id, a), SchemaInvalid);
  a = complete(threads[0], "w");
  a.items[1].targets = {"martians"};
  CHECK_THROWS_AS(svc.submit(t->assignment_id, a), SchemaInvalid);
  CHECK_THROWS_AS(svc.submit(t->assignment_id, complete(threads[0], "someone-else")), SchemaInvalid);
  CHECK_THROWS_AS(svc.submit(t->assignment_id, complete(threads[1], "w")), SchemaInvalid);
  CHECK(store.size() == 0);
  CHECK(svc.submit(t->assignment_id, complete(threads[0], "w")) == 4);

  auto bot = svc.next_task("w");
  REQUIRE(bot->thread->id == "t1");
  a = complete(threads[1], "w");
  a.items[2].plausible.reset();
  CHECK_THROWS_AS(svc.submit(bot->assignment_id, a), SchemaInvalid);
  CHECK(svc.submit(bot->assignment_id, complete(threads[1], "w")) == 4);
}

TEST_CASE("store replay, export and restart", "[service]") {
  TempDir dir;
  const auto path = dir.file("store.jsonl");
  auto threads = corpus(4);
  std::vector<WorkerAnnotation> expected;
  {
    AnnotationStore store(path);
    CHECK(store.export_jsonl().empty());
    AnnotationService svc(threads, store, {}, vocab());
    for (int w = 0; w < 3; ++w) {
      auto t = svc.next_task("w" + std::to_string(w));
      expected.push_back(complete(*t->thread, "w" + std::to_string(w)));
      svc.submit(t->assignment_id, expected.back());
    }
    std::istringstream in(store.export_jsonl());
    auto parsed = parse_worker_annotations(in);
    CHECK(parsed.errors.empty());
    CHECK(parsed.items == expected);
    CHECK(aggregate_all(parsed.items) == aggregate_all(store.records()));
  }
  // torn tail from an unacknowledged write
  {
    std::ofstream out(path, std::ios::app);
    out << R"({"worker":"w9","thread":"t0","ite)";
  }
  AnnotationStore store(path);
  CHECK(store.records() == expected);
  CHECK(fs::file_size(path) == store.export_jsonl().size());
  AnnotationService svc(threads, store, {}, vocab());
  CHECK(svc.progress()->annotations == 3);
  // workers keep their history across restarts
  for (int i = 0; i < 3; ++i) {
    auto t = svc.next_task("w0");
    REQUIRE(t);
    CHECK(t->thread->id != expected[0].thread_id);
    svc.submit(t->assignment_id, complete(*t->thread, "w0"));
  }
  CHECK_FALSE(svc.next_task("w0"));

  SECTION("corrupt middle line is a data error") {
    std::ofstream out(path, std::ios::app);
    out << "not json\n";
    out.close();
    CHECK_THROWS_AS(AnnotationStore(path), DataError);
  }
  SECTION("store and corpus must agree") {
    CHECK_THROWS_AS(AnnotationService(corpus(0), store), DataError);
  }
}

TEST_CASE("HTTP API", "[service]") {
  TempDir dir;
  AnnotationStore store(dir.file("store.jsonl"));
  auto threads = corpus(2);
  AnnotationService svc(threads, store, {}, TargetVocabulary({"women", "liberals"}));
  Running server(svc);
  httplib::Client c("127.0.0.1", server.port);

  auto task = get(c, "/api/task?worker=w1");
  CHECK(task["status"] == "assigned");
  CHECK(task["remaining_slots"] == 5);
  CHECK(thread_from_json(task["thread"]) == threads[0]);
  get(c, "/api/task", 400);

  auto a = complete(threads[0], "w1");
  a.items[2].stance.erase(1);
  auto r = post_submit(c, task["assignment_id"], a);
  REQUIRE(r);
  CHECK(r->status == 422);
  CHECK(json::parse(r->body)["error"] == "SchemaInvalid");
  CHECK(json::parse(r->body)["detail"].get<std::string>().find("1<-3") != std::string::npos);

  r = post_submit(c, task["assignment_id"], complete(threads[0], "w1"));
  CHECK(r->status == 200);
  CHECK(json::parse(r->body) == json{{"ok", true}, {"remaining_slots", 4}});
  r = post_submit(c, task["assignment_id"], complete(threads[0], "w1"));
  CHECK(r->status == 409);
  r = post_submit(c, "missing", complete(threads[0], "w1"));
  CHECK(r->status == 410);
  r = c.Post("/api/submit", "{", "application/json");
  CHECK(r->status == 400);

  CHECK(thread_from_json(get(c, "/api/thread/t1")) == threads[1]);
  get(c, "/api/thread/zzz", 404);
  auto p = get(c, "/api/progress");
  CHECK(p["annotations"] == 1);
  CHECK(p["coverage"] == json::array({1, 1, 0, 0, 0, 0}));
  CHECK(get(c, "/api/vocab/targets")["targets"] == json::array({"liberals", "none", "other", "women"}));
}

TEST_CASE("serves UI assets", "[service]") {
  TempDir dir;
  fs::create_directories(dir.path / "ui");
  std::ofstream(dir.path / "ui" / "index.html") << "<html>ok</html>";
  AnnotationStore store(dir.file("store.jsonl"));
  AnnotationService svc(corpus(1), store, {}, vocab());
  httplib::Server srv;
  install_routes(srv, svc, (dir.path / "ui").string());
  const int port = srv.bind_to_any_port("127.0.0.1");
  std::thread th([&] { srv.listen_after_bind(); });
  srv.wait_until_ready();
  httplib::Client c("127.0.0.1", port);
  auto r = c.Get("/index.html");
  CHECK(r->status == 200);
  CHECK(r->body == "<html>ok</html>");
  srv.stop();
  th.join();
  httplib::Server other;
  CHECK_THROWS_AS(install_routes(other, svc, (dir.path / "missing").string()), UsageError);
}

TEST_CASE("16 concurrent workers", "[service][concurrency]") {
  TempDir dir;
  AnnotationStore store(dir.file("store.jsonl"));
  auto threads = corpus(12);
  AnnotationService svc(threads, store, {}, vocab());
  Running server(svc);

  std::mutex mu;
  std::vector<std::string> first_poll_ids;
  std::multiset<std::string> all_ids;
  std::atomic<int> errors{0};
  std::atomic<int> ready{0}, polled{0};
  std::map<std::string, int> first_poll_threads;
  std::vector<std::thread> workers;
  for (int w = 0; w < 16; ++w)
    workers.emplace_back([&, w] {
      httplib::Client c("127.0.0.1", server.port);
      const std::string name = "w" + std::to_string(w);
      ++ready;
      while (ready.load() < 16) std::this_thread::yield();
      for (bool first = true;; first = false) {
        auto r = c.Get("/api/task?worker=" + name);
        if (!r || r->status != 200) {
          ++errors;
          return;
        }
        auto j = json::parse(r->body);
        const bool none = j["status"] == "none";
        if (!none) {
          std::lock_guard lock(mu);
          all_ids.insert(j["assignment_id"]);
          if (first) {
            first_poll_ids.push_back(j["assignment_id"]);
            ++first_poll_threads[j["thread"]["id"]];
          }
        }
        if (first) {
          // everyone holds a lease before anyone submits
          ++polled;
          while (polled.load() < 16) std::this_thread::yield();
        }
        if (none) return;
        auto s = post_submit(c, j["assignment_id"], complete(thread_from_json(j["thread"]), name));
        if (!s || s->status != 200) {
          ++errors;
          return;
        }
      }
    });
  for (auto& t : workers) t.join();

  CHECK(errors == 0);
  CHECK(std::set<std::string>(first_poll_ids.begin(), first_poll_ids.end()).size() == 16);
  for (const auto& [id, n] : first_poll_threads) CHECK(n <= 2);  // least covered first over 12 threads
  CHECK(std::set<std::string>(all_ids.begin(), all_ids.end()).size() == all_ids.size());
  CHECK(store.size() == 12 * 5);
  std::map<std::string, std::set<std::string>> per_thread;
  for (const auto& a : store.records()) CHECK(per_thread[a.thread_id].insert(a.worker_id).second);
  for (const auto& [id, ws] : per_thread) CHECK(ws.size() == 5);
  CHECK(svc.progress()->complete == 12);
}

TEST_CASE("kill after ack keeps committed records", "[service][durability]") {
  TempDir dir;
  const auto path = dir.file("store.jsonl");
  auto threads = corpus(5);
  int fds[2];
  REQUIRE(::pipe(fds) == 0);
  const pid_t pid = ::fork();
  REQUIRE(pid >= 0);
  if (pid == 0) {
    ::close(fds[0]);
    AnnotationStore store(path);
    AnnotationService svc(threads, store, {}, vocab());
    httplib::Server srv;
    install_routes(srv, svc);
    const int port = srv.bind_to_any_port("127.0.0.1");
    if (::write(fds[1], &port, sizeof port) != sizeof port) ::_exit(3);
    srv.listen_after_bind();
    ::_exit(0);
  }
  ::close(fds[1]);
  int port = 0;
  REQUIRE(::read(fds[0], &port, sizeof port) == sizeof port);
  ::close(fds[0]);

  std::vector<WorkerAnnotation> acked;
  {
    httplib::Client c("127.0.0.1", port);
    for (int i = 0; i < 8; ++i) {
      httplib::Result r;
      for (int tries = 0; tries < 50 && !(r = c.Get("/api/task?worker=w" + std::to_string(i % 3))); ++tries)
        std::this_thread::sleep_for(std::chrono::milliseconds(20));
      REQUIRE(r);
      auto j = json::parse(r->body);
      REQUIRE(j["status"] == "assigned");
      auto a = complete(thread_from_json(j["thread"]), "w" + std::to_string(i % 3));
      auto s = post_submit(c, j["assignment_id"], a);
      REQUIRE(s);
      REQUIRE(s->status == 200);
      acked.push_back(a);
    }
  }
  ::kill(pid, SIGKILL);
  int status = 0;
  ::waitpid(pid, &status, 0);
  CHECK(WIFSIGNALED(status));

  AnnotationStore store(path);
  CHECK(store.records() == acked);
  AnnotationService svc(threads, store, {}, vocab());
  CHECK(svc.progress()->annotations == 8);
}
