// Writes the bundled synthetic corpus: threads, worker annotations, generated responses.

#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "convsafe/synthetic.hpp"

namespace fs = std::filesystem;
using namespace convsafe;

int main(int argc, char** argv) {
  CLI::App app{"generate the synthetic demo corpus"};
  synthetic::Spec spec;
  std::string out_dir = "data/synthetic";
  app.add_option("--output", out_dir)->capture_default_str();
  app.add_option("--seed", spec.seed)->capture_default_str();
  app.add_option("--threads", spec.n_threads, "number of threads")->capture_default_str();
  CLI11_PARSE(app, argc, argv);

  const auto c = synthetic::make_corpus(spec);
  fs::create_directories(out_dir);
  auto open = [&](const char* name) {
    std::ofstream f(fs::path(out_dir) / name, std::ios::binary | std::ios::trunc);
    if (!f) {
      std::cerr << "cannot write " << name << "\n";
      std::exit(2);
    }
    return f;
  };
  {
    auto f = open("threads.jsonl");
    write_threads(f, c.threads);
  }
  {
    auto f = open("annotations.jsonl");
    for (const auto& a : c.annotations) f << to_json(a).dump() << '\n';
  }
  {
    auto f = open("responses.jsonl");
    for (const auto& r : c.responses) f << eval::to_json(r).dump() << '\n';
  }
  std::cerr << c.threads.size() << " threads, " << c.annotations.size() << " annotations, " << c.responses.size()
            << " responses -> " << out_dir << "\n";
  return 0;
}
