#pragma once

// In-process HTTP scorer speaking the POST /score protocol, for tests.

#include <atomic>
#include <chrono>
#include <string>
#include <thread>

#include <httplib.h>
#include <json.hpp>

namespace convsafe::testing {

// Offensive: P(off) = 0.95 when the text contains "idiot", else 0.05.
// Stance: agree when b contains "agree", disagree when b contains "wrong", else neutral.
inline std::vector<double> stub_probs(const std::string& task, const nlohmann::json& item) {
  if (task == "offensive") {
    const bool off = item.at("text").get<std::string>().find("idiot") != std::string::npos;
    return off ? std::vector<double>{0.05, 0.95} : std::vector<double>{0.95, 0.05};
  }
  const auto b = item.at("b").get<std::string>();
  if (b.find("wrong") != std::string::npos) return {0.05, 0.05, 0.9};
  if (b.find("agree") != std::string::npos) return {0.05, 0.9, 0.05};
  return {0.9, 0.05, 0.05};
}

class StubScorerServer {
 public:
  std::atomic<int> fail_first{0};        // reply 503 to this many requests
  std::atomic<bool> malformed{false};    // reply with a body that is not JSON
  std::atomic<bool> wrong_arity{false};  // reply with one probability per row
  std::atomic<int> delay_ms{0};
  std::atomic<int> requests{0};
  std::atomic<int> in_flight{0};
  std::atomic<int> max_in_flight{0};
  std::atomic<std::size_t> items{0};

  StubScorerServer() {
    srv_.new_task_queue = [] { return new httplib::ThreadPool(16); };
    srv_.Post("/score", [this](const httplib::Request& req, httplib::Response& res) {
      const int now = ++in_flight;
      int prev = max_in_flight.load();
      while (now > prev && !max_in_flight.compare_exchange_weak(prev, now)) {
      }
      ++requests;
      if (delay_ms > 0) std::this_thread::sleep_for(std::chrono::milliseconds(delay_ms.load()));
      respond(req, res);
      --in_flight;
    });
    port_ = srv_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { srv_.listen_after_bind(); });
    srv_.wait_until_ready();
  }

  ~StubScorerServer() {
    srv_.stop();
    thread_.join();
  }

  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }

 private:
  void respond(const httplib::Request& req, httplib::Response& res) {
    if (fail_first > 0) {
      --fail_first;
      res.status = 503;
      return;
    }
    if (malformed) {
      res.set_content("{not json", "application/json");
      return;
    }
    auto j = nlohmann::json::parse(req.body);
    const auto task = j.at("task").get<std::string>();
    nlohmann::json probs = nlohmann::json::array();
    for (const auto& it : j.at("items")) {
      ++items;
      probs.push_back(wrong_arity ? nlohmann::json::array({1.0}) : nlohmann::json(stub_probs(task, it)));
    }
    res.set_content(nlohmann::json{{"probs", probs}}.dump(), "application/json");
  }

  httplib::Server srv_;
  int port_ = 0;
  std::thread thread_;
};

}  // namespace convsafe::testing
