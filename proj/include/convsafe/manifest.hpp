#pragma once

// Run manifest written next to every CLI output artifact.

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "convsafe/error.hpp"
#include "convsafe/text.hpp"

namespace convsafe {

#ifndef CONVSAFE_VERSION
#define CONVSAFE_VERSION "0.0.0"
#endif

struct FileFingerprint {
  std::string path;
  std::string fnv1a64;
  std::size_t bytes = 0;
};

inline FileFingerprint fingerprint_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path + " for the manifest");
  std::uint64_t h = 0xcbf29ce484222325ULL;
  std::size_t bytes = 0;
  char buf[1 << 16];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) {
    h = text::fnv1a(std::string_view(buf, static_cast<std::size_t>(in.gcount())), h);
    bytes += static_cast<std::size_t>(in.gcount());
  }
  return {path, text::hex64(h), bytes};
}

// SOURCE_DATE_EPOCH when set (reproducible reruns), wall clock otherwise.
inline std::int64_t manifest_time() {
  if (const char* s = std::getenv("SOURCE_DATE_EPOCH"); s && *s) {
    try {
      return std::stoll(s);
    } catch (const std::exception&) {
      throw UsageError("SOURCE_DATE_EPOCH is not an integer: " + std::string(s));
    }
  }
  return std::chrono::duration_cast<std::chrono::seconds>(std::chrono::system_clock::now().time_since_epoch())
      .count();
}

inline std::string iso8601(std::int64_t unix_seconds) {
  const std::time_t t = static_cast<std::time_t>(unix_seconds);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct RunManifest {
  std::string command;
  std::string config_hash;  // over the effective configuration (file + flags + defaults)
  std::uint64_t seed = 0;
  std::vector<FileFingerprint> inputs;
  std::vector<FileFingerprint> outputs;
  std::int64_t started = 0;
  std::int64_t finished = 0;
  std::string version = CONVSAFE_VERSION;
};

inline nlohmann::json to_json(const FileFingerprint& f) {
  return {{"path", f.path}, {"fnv1a64", f.fnv1a64}, {"bytes", f.bytes}};
}

inline nlohmann::json to_json(const RunManifest& m) {
  nlohmann::json in = nlohmann::json::array(), out = nlohmann::json::array();
  for (const auto& f : m.inputs) in.push_back(to_json(f));
  for (const auto& f : m.outputs) out.push_back(to_json(f));
  return {{"tool", "convsafe"},
          {"version", m.version},
          {"command", m.command},
          {"config_hash", m.config_hash},
          {"seed", m.seed},
          {"inputs", std::move(in)},
          {"outputs", std::move(out)},
          {"started", iso8601(m.started)},
          {"finished", iso8601(m.finished)}};
}

inline void write_manifest(const RunManifest& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write manifest " + path);
  out << to_json(m).dump(2) << '\n';
  if (!out) throw DataError("failed writing manifest " + path);
}

}  // namespace convsafe
