// convsafe: command-line entry point for the conversation-safety toolkit.

#include <signal.h>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "convsafe/annotation.hpp"
#include "convsafe/corpus.hpp"
#include "convsafe/ctg.hpp"
#include "convsafe/error.hpp"
#include "convsafe/eval/analytics.hpp"
#include "convsafe/eval/autoeval.hpp"
#include "convsafe/eval/metrics.hpp"
#include "convsafe/eval/report.hpp"
#include "convsafe/manifest.hpp"
#include "convsafe/nbow/checkpoint.hpp"
#include "convsafe/nbow/dataset.hpp"
#include "convsafe/nbow/gradcheck.hpp"
#include "convsafe/nbow/train.hpp"
#include "convsafe/scoring.hpp"
#include "convsafe/service.hpp"

namespace fs = std::filesystem;
using namespace convsafe;
using nbow::LossConfig;
using nbow::loss_kind_from_string;
using nbow::task_from_string;

namespace {

// ---------------------------------------------------------------------------
// I/O helpers

std::ifstream open_input(const std::string& path) {
  if (path.empty()) throw UsageError("missing --input");
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  return in;
}

// Writes to <path>.tmp and renames on commit so a failed run leaves no partial output.
class AtomicFile {
 public:
  explicit AtomicFile(std::string path) : path_(std::move(path)), tmp_(path_ + ".tmp") {
    if (auto parent = fs::path(path_).parent_path(); !parent.empty()) fs::create_directories(parent);
    out_.open(tmp_, std::ios::binary | std::ios::trunc);
    if (!out_) throw DataError("cannot write " + path_);
  }
  ~AtomicFile() {
    if (!committed_) {
      out_.close();
      std::error_code ec;
      fs::remove(tmp_, ec);
    }
  }
  std::ostream& stream() { return out_; }
  void commit() {
    out_.close();
    if (!out_) throw DataError("failed writing " + path_);
    fs::rename(tmp_, path_);
    committed_ = true;
  }

 private:
  std::string path_, tmp_;
  std::ofstream out_;
  bool committed_ = false;
};

void write_text(const std::string& path, const std::string& body) {
  if (path.empty() || path == "-") {
    std::cout << body;
    return;
  }
  AtomicFile f(path);
  f.stream() << body;
  f.commit();
}

void report_line_errors(const std::string& path, const std::vector<LineError>& errors) {
  for (const auto& e : errors) std::cerr << path << ":" << e.line << ": " << e.message << "\n";
}

template <typename T>
std::vector<T> strict(const std::string& path, ParseResult<T> r) {
  if (!r.errors.empty()) {
    report_line_errors(path, r.errors);
    throw SchemaError(path + ": " + std::to_string(r.errors.size()) + " malformed line(s), first at line " +
                      std::to_string(r.errors.front().line));
  }
  return std::move(r.items);
}

std::vector<Thread> load_threads(const std::string& path) {
  auto in = open_input(path);
  return strict(path, parse_threads(in));
}

std::vector<AggregatedLabels> load_gold(const std::string& path) {
  auto in = open_input(path);
  return strict(path, parse_gold(in));
}

// ---------------------------------------------------------------------------
// Shared run state: manifest bookkeeping

struct Globals {
  std::string config;
  std::uint64_t seed = 0;
  unsigned threads = std::max(1u, std::thread::hardware_concurrency());
  std::string eou = "[EOU]";
  CLI::App* app = nullptr;
};

class Run {
 public:
  Run(std::string command, const Globals& g) : g_(g) {
    m_.command = std::move(command);
    m_.seed = g.seed;
    m_.started = manifest_time();
    m_.config_hash = text::hex64(text::fnv1a(g.app->config_to_str(true, false)));
  }
  void input(const std::string& path) {
    if (path.empty() || path == "-") return;
    if (!fs::is_regular_file(path)) throw DataError("cannot open input " + path);
    m_.inputs.push_back(fingerprint_file(path));
  }
  void output(const std::string& path) { outputs_.push_back(path); }
  // Manifest goes to <file>.manifest.json, or <dir>/manifest.json for directory outputs.
  void finish(const std::string& manifest_anchor, bool anchor_is_dir = false) {
    for (const auto& p : outputs_)
      if (!p.empty() && p != "-") m_.outputs.push_back(fingerprint_file(p));
    m_.finished = manifest_time();
    if (manifest_anchor.empty() || manifest_anchor == "-") return;
    write_manifest(m_, anchor_is_dir ? (fs::path(manifest_anchor) / "manifest.json").string()
                                     : manifest_anchor + ".manifest.json");
  }
  // Declares an output path before writing it (checked against inputs).
  const std::string& declare(const std::string& path) {
    for (const auto& in : m_.inputs)
      if (!path.empty() && path != "-" && fs::exists(path) && fs::equivalent(in.path, path))
        throw UsageError("output " + path + " would overwrite input");
    return path;
  }

 private:
  const Globals& g_;
  RunManifest m_;
  std::vector<std::string> outputs_;
};

// ---------------------------------------------------------------------------
// Scorers

struct ScorerOpts {
  std::string scorer;
  std::string stance_scorer;
  std::size_t remote_batch = 64;
  int remote_retries = 3;
  int remote_timeout = 30;

  void add(CLI::App* sub, bool stance_too) {
    sub->add_option("--scorer", scorer, "builtin:PATH or remote:URL (offensive model)");
    if (stance_too) sub->add_option("--stance-scorer", stance_scorer, "builtin:PATH or remote:URL (stance model)");
    sub->add_option("--remote-batch", remote_batch, "items per remote request")->capture_default_str();
    sub->add_option("--remote-retries", remote_retries, "retries on 5xx/429/connection errors")->capture_default_str();
    sub->add_option("--remote-timeout", remote_timeout, "remote request timeout in seconds")->capture_default_str();
  }

  std::shared_ptr<Scorer> make(Run& run, const Globals& g, bool need_offensive, bool need_stance) const {
    if (need_offensive && scorer.empty()) throw UsageError("missing --scorer");
    std::string st = stance_scorer;
    if (need_stance && st.empty()) {
      if (scorer.rfind("remote:", 0) == 0) st = scorer;  // one endpoint serving both tasks
      else if (!need_offensive) st = scorer;
      else throw UsageError("missing --stance-scorer");
    }
    for (const std::string* s : {&scorer, static_cast<const std::string*>(&st)})
      if (s->rfind("builtin:", 0) == 0) run.input(s->substr(8));
    RemoteConfig rc;
    rc.batch_size = remote_batch;
    rc.max_retries = remote_retries;
    rc.timeout = std::chrono::seconds(remote_timeout);
    rc.max_in_flight = std::min<std::size_t>(g.threads, 1024);
    if (!need_offensive) return make_scorer("", st, rc);
    if (!need_stance || st == scorer) return make_scorer(scorer, "", rc);
    const bool remote = scorer.rfind("remote:", 0) == 0 || st.rfind("remote:", 0) == 0;
    if (!remote) return make_scorer(scorer, st, rc);
    return std::make_shared<RoutedScorer>(make_scorer(scorer, "", rc), make_scorer("", st, rc));
  }

  // Offensive and stance requests go to different backends.
  struct RoutedScorer : Scorer {
    RoutedScorer(std::shared_ptr<Scorer> off, std::shared_ptr<Scorer> st) : off_(std::move(off)), st_(std::move(st)) {}
    std::vector<ScoreVector> score_offensive(std::span<const OffensiveInput> items) override {
      return off_->score_offensive(items);
    }
    std::vector<ScoreVector> score_stance(std::span<const StanceInput> items) override {
      return st_->score_stance(items);
    }
    std::shared_ptr<Scorer> off_, st_;
  };
};

// Gold instances for classifier evaluation and calibration.
struct OffensiveGold {
  std::vector<OffensiveInput> inputs;
  std::vector<std::size_t> golds;
  std::vector<std::size_t> thread_len;  // to regroup per thread
};

OffensiveGold offensive_gold(const std::vector<Thread>& threads, const std::vector<AggregatedLabels>& gold) {
  OffensiveGold out;
  for (const auto& [t, g] : eval::join_gold(threads, gold)) {
    for (std::size_t i = 1; i <= t->size(); ++i) {
      out.inputs.push_back({t->at(i).text, {}});
      out.golds.push_back(g->at(i).offensive ? 1 : 0);
    }
    out.thread_len.push_back(t->size());
  }
  return out;
}

struct StanceGold {
  std::vector<StanceInput> inputs;
  std::vector<std::size_t> golds;
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (i, j)
};

StanceGold stance_gold(const std::vector<Thread>& threads, const std::vector<AggregatedLabels>& gold) {
  StanceGold out;
  for (const auto& [t, g] : eval::join_gold(threads, gold))
    for (const auto& [pair, s] : g->stance_pairs) {
      out.inputs.push_back({t->at(pair.second).text, t->at(pair.first).text});
      out.golds.push_back(static_cast<std::size_t>(s));
      out.pairs.push_back(pair);
    }
  return out;
}

std::vector<std::size_t> argmaxes(const std::vector<ScoreVector>& s) {
  std::vector<std::size_t> out;
  out.reserve(s.size());
  for (const auto& v : s) out.push_back(v.argmax());
  return out;
}

eval::ReportFormat report_format(const std::string& f) {
  if (f == "md" || f == "markdown") return eval::ReportFormat::Markdown;
  if (f == "csv") return eval::ReportFormat::CSV;
  throw UsageError("--format must be md or csv, got " + f);
}

// ---------------------------------------------------------------------------
// Subcommands

struct Io {
  std::string input, output;
  void add(CLI::App* sub, const char* in_desc, const char* out_desc, bool input_required = true) {
    auto* o = sub->add_option("--input", input, in_desc);
    if (input_required) o->required();
    sub->add_option("--output", output, out_desc);
  }
};

int cmd_ingest(const Globals& g, const Io& io, PreprocessConfig cfg) {
  Run run("ingest", g);
  run.input(io.input);
  cfg.validate();
  auto in = open_input(io.input);
  auto parsed = parse_threads(in);
  report_line_errors(io.input, parsed.errors);
  std::vector<Thread> cleaned;
  std::size_t dropped = 0;
  for (const auto& t : parsed.items) {
    try {
      cleaned.push_back(preprocess(t, cfg));
    } catch (const EmptyAfterCleaning& e) {
      std::cerr << io.input << ": " << e.what() << "\n";
      ++dropped;
    }
  }
  std::ostringstream os;
  write_threads(os, cleaned);
  run.output(run.declare(io.output));
  write_text(io.output, os.str());
  run.finish(io.output);
  std::cerr << "ingest: " << cleaned.size() << " threads, " << parsed.errors.size() << " errors, " << dropped
            << " dropped\n";
  return 0;
}

int cmd_sample(const Globals& g, const Io& io, const ScorerOpts& so, SampleConfig cfg) {
  Run run("sample", g);
  run.input(io.input);
  auto threads = load_threads(io.input);
  auto scorer = so.make(run, g, true, false);
  cfg.seed = g.seed;
  auto picked = stratified_sample(threads, last_comment_scorer(*scorer), cfg);
  std::ostringstream os;
  write_threads(os, picked);
  run.output(run.declare(io.output));
  write_text(io.output, os.str());
  run.finish(io.output);
  std::cerr << "sample: " << picked.size() << " threads\n";
  return 0;
}

struct ServeOpts {
  std::string store = "annotations.jsonl";
  std::string host = "127.0.0.1";
  int port = 8080;
  int workers_per_thread = 5;
  std::string lease_ttl = "30m";
  std::string targets;
  std::string ui_dir;
};

int cmd_serve(const Globals& g, const Io& io, const ServeOpts& so) {
  auto threads = load_threads(io.input);
  TargetVocabulary vocab = so.targets.empty() ? TargetVocabulary{} : TargetVocabulary::load(so.targets);
  service::ServiceConfig cfg;
  cfg.workers_per_thread = so.workers_per_thread;
  cfg.lease_ttl = service::parse_duration(so.lease_ttl);
  service::AnnotationStore store(so.store);
  service::AnnotationService svc(std::move(threads), store, cfg, std::move(vocab));

  // SIGINT/SIGTERM stop the server from a dedicated thread.
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);

  httplib::Server srv;
  const unsigned pool = std::max(4u, g.threads);
  srv.new_task_queue = [pool] { return new httplib::ThreadPool(pool); };
  service::install_routes(srv, svc, so.ui_dir);
  const int port = so.port == 0 ? srv.bind_to_any_port(so.host) : (srv.bind_to_port(so.host, so.port) ? so.port : -1);
  if (port < 0) throw UsageError("cannot bind " + so.host + ":" + std::to_string(so.port));
  std::thread waiter([&] {
    int sig = 0;
    sigwait(&set, &sig);
    srv.stop();
  });
  std::cerr << "serve: " << svc.threads().size() << " threads, " << store.size() << " committed annotations, listening on "
            << so.host << ":" << port << std::endl;
  srv.listen_after_bind();
  if (waiter.joinable()) {
    pthread_kill(waiter.native_handle(), SIGTERM);
    waiter.join();
  }
  return 0;
}

struct AggregateOpts {
  int min_votes = 2;
  std::string corpus;
  std::string report;
  std::string format = "md";
};

int cmd_aggregate(const Globals& g, const Io& io, const AggregateOpts& ao) {
  Run run("aggregate", g);
  run.input(io.input);
  auto in = open_input(io.input);
  auto annos = strict(io.input, parse_worker_annotations(in));
  std::map<std::string, std::size_t> lengths;
  if (!ao.corpus.empty()) {
    run.input(ao.corpus);
    for (const auto& t : load_threads(ao.corpus)) lengths[t.id] = t.size();
  }
  const auto gold = aggregate_all(annos, ao.min_votes, lengths);
  std::ostringstream os;
  for (const auto& a : gold) os << to_json(a).dump() << '\n';
  run.output(run.declare(io.output));
  write_text(io.output, os.str());

  const auto m = build_agreement_matrices(annos);
  eval::EvalReport r;
  r.key_name = "task";
  r.columns = {"items", "coders", "krippendorff_alpha", "pairwise_agreement"};
  for (const auto& [name, mat] : {std::pair{"offensive", &m.offensive}, std::pair{"stance", &m.stance}}) {
    if (mat->empty()) continue;
    const auto rep = agreement_report(*mat, m.n_coders);
    r.add(name, {static_cast<double>(rep.n_items), static_cast<double>(rep.n_coders), rep.krippendorff_alpha,
                 rep.pairwise_agreement});
  }
  const std::string body = eval::emit_report(r, report_format(ao.format));
  if (ao.report.empty()) {
    std::cerr << body;
  } else {
    run.output(run.declare(ao.report));
    write_text(ao.report, body);
  }
  run.finish(io.output);
  std::cerr << "aggregate: " << annos.size() << " annotations, " << gold.size() << " threads\n";
  return 0;
}

int cmd_split(const Globals& g, const Io& io) {
  Run run("split", g);
  run.input(io.input);
  if (io.output.empty()) throw UsageError("split needs --output DIR");
  auto in = open_input(io.input);
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);)
    if (!text::trim(line).empty()) lines.push_back(line);
  const auto s = nbow::split_70_15_15(lines, g.seed);
  fs::create_directories(io.output);
  for (const auto& [name, part] : {std::pair{"train.jsonl", &s.train}, std::pair{"dev.jsonl", &s.dev},
                                   std::pair{"test.jsonl", &s.test}}) {
    const auto path = (fs::path(io.output) / name).string();
    std::string body;
    for (const auto& l : *part) body += l + "\n";
    run.output(run.declare(path));
    write_text(path, body);
  }
  run.finish(io.output, true);
  std::cerr << "split: " << s.train.size() << "/" << s.dev.size() << "/" << s.test.size() << "\n";
  return 0;
}

struct TrainOpts {
  std::string task = "offensive";
  std::string loss = "ce";
  std::string dev;
  std::string gold;
  std::string embeddings;
  std::string oov = "random";
  std::vector<double> wce_weights;
  double beta = 0.9999;
  double gamma = 1.0;
  nbow::ModelConfig model;
  nbow::TrainConfig train;
};

int cmd_train(const Globals& g, const Io& io, TrainOpts to) {
  Run run("train", g);
  if (to.dev.empty() || to.gold.empty()) throw UsageError("train needs --dev and --gold");
  if (io.output.empty()) throw UsageError("train needs --output MODEL");
  run.input(io.input);
  run.input(to.dev);
  run.input(to.gold);
  const Task task = task_from_string(to.task);
  const auto gold = load_gold(to.gold);
  const auto tr = nbow::make_examples(task, load_threads(io.input), gold);
  const auto dev = nbow::make_examples(task, load_threads(to.dev), gold);

  LossConfig loss;
  loss.kind = loss_kind_from_string(to.loss);
  if (!to.wce_weights.empty()) loss.weights = to.wce_weights;
  else if (task == Task::Offensive) loss.weights = {1.0, 100.0};
  loss.beta = to.beta;
  loss.gamma = to.gamma;
  to.train.seed = g.seed;

  std::ifstream emb;
  nbow::TrainHooks hooks;
  if (!to.embeddings.empty()) {
    run.input(to.embeddings);
    emb.open(to.embeddings);
    if (!emb) throw DataError("cannot open " + to.embeddings);
    hooks.pretrained = &emb;
    if (to.oov == "zero") hooks.oov.kind = nbow::OovPolicy::Kind::ZeroVector;
    else if (to.oov != "random") throw UsageError("--oov must be random or zero");
    hooks.oov.seed = g.seed;
  }
  hooks.on_epoch = [](const nbow::EpochStats& s) {
    std::cerr << "epoch " << s.epoch << " loss " << eval::format_cell(s.train_loss) << " dev "
              << eval::format_cell(s.dev_metric) << "\n";
  };
  const auto r = nbow::train(task, tr, dev, to.model, to.train, loss, hooks);
  run.output(run.declare(io.output));
  AtomicFile f(io.output);
  nbow::save_model(r.best, f.stream());
  f.commit();
  run.finish(io.output);
  std::cerr << "train: best epoch " << r.best_epoch << ", dev metric " << eval::format_cell(r.best_dev_metric) << "\n";
  return 0;
}

int cmd_gradcheck(const Globals& g, nbow::GradCheckConfig cfg, const std::string& task) {
  cfg.seed = g.seed;
  cfg.task = task_from_string(task);
  const auto r = nbow::run_gradcheck(cfg);
  std::cout << "max relative error: " << eval::format_exact(r.max_rel_error) << " (" << r.networks << " networks, "
            << r.entries << " entries, " << r.resampled << " resampled)\n";
  if (r.max_rel_error >= 1e-4) {
    std::cerr << "gradcheck: FAILED, max relative error >= 1e-4\n";
    return 2;
  }
  return 0;
}

struct EvalOpts {
  std::string task = "offensive";
  std::string gold;
  std::string format = "md";
};

int cmd_eval(const Globals& g, const Io& io, const ScorerOpts& so, const EvalOpts& eo) {
  Run run("eval", g);
  if (eo.gold.empty()) throw UsageError("eval needs --gold");
  run.input(io.input);
  run.input(eo.gold);
  const Task task = task_from_string(eo.task);
  const auto threads = load_threads(io.input);
  const auto gold = load_gold(eo.gold);
  auto scorer = so.make(run, g, task == Task::Offensive, task == Task::Stance);
  eval::EvalReport r;
  if (task == Task::Offensive) {
    const auto data = offensive_gold(threads, gold);
    const auto pred = argmaxes(scorer->score_offensive(data.inputs));
    std::vector<eval::ThreadPredictions> per;
    std::size_t at = 0;
    for (auto len : data.thread_len) {
      eval::ThreadPredictions t;
      for (std::size_t i = 0; i < len; ++i, ++at) {
        t.pred.push_back(pred[at]);
        t.gold.push_back(data.golds[at]);
      }
      per.push_back(std::move(t));
    }
    r = eval::offensive_slices(per);
  } else {
    const auto data = stance_gold(threads, gold);
    const auto pred = argmaxes(scorer->score_stance(data.inputs));
    std::vector<eval::PairPrediction> pairs;
    for (std::size_t k = 0; k < pred.size(); ++k)
      pairs.push_back({data.pairs[k].first, data.pairs[k].second, pred[k], data.golds[k]});
    r = eval::stance_slices(pairs);
  }
  run.output(run.declare(io.output));
  write_text(io.output, eval::emit_report(r, report_format(eo.format)));
  run.finish(io.output);
  return 0;
}

int cmd_calibrate(const Globals& g, const Io& io, const ScorerOpts& so, const EvalOpts& eo, double target) {
  Run run("calibrate", g);
  if (eo.gold.empty()) throw UsageError("calibrate needs --gold");
  if (!(target > 0.0 && target <= 1.0)) throw UsageError("--target-precision must be in (0, 1]");
  run.input(io.input);
  run.input(eo.gold);
  const Task task = task_from_string(eo.task);
  const auto threads = load_threads(io.input);
  const auto gold = load_gold(eo.gold);
  auto scorer = so.make(run, g, task == Task::Offensive, task == Task::Stance);
  ThresholdTable table;
  if (task == Task::Offensive) {
    const auto data = offensive_gold(threads, gold);
    table = calibrate_thresholds(task, scorer->score_offensive(data.inputs), data.golds, target);
  } else {
    const auto data = stance_gold(threads, gold);
    table = calibrate_thresholds(task, scorer->score_stance(data.inputs), data.golds, target);
  }
  for (std::size_t c = 0; c < table.classes.size(); ++c)
    if (!table.classes[c].attainable)
      std::cerr << "calibrate: class " << class_names(task)[c] << " cannot reach precision " << target
                << " on the dev set; its items will be Ambiguous\n";
  run.output(run.declare(io.output));
  write_text(io.output, to_json(table).dump(2) + "\n");
  run.finish(io.output);
  return 0;
}

struct PseudoOpts {
  std::string off_thresholds;
  std::string stance_thresholds;
  std::size_t chunk = 512;
  bool no_context = false;
};

int cmd_pseudolabel(const Globals& g, const Io& io, const ScorerOpts& so, const PseudoOpts& po) {
  Run run("pseudolabel", g);
  if (po.off_thresholds.empty() || po.stance_thresholds.empty())
    throw UsageError("pseudolabel needs --off-thresholds and --stance-thresholds");
  if (io.output.empty()) throw UsageError("pseudolabel needs --output");
  run.input(io.input);
  run.input(po.off_thresholds);
  run.input(po.stance_thresholds);
  const auto off_t = load_threshold_table(po.off_thresholds);
  const auto st_t = load_threshold_table(po.stance_thresholds);
  auto scorer = so.make(run, g, true, true);
  PseudoLabelOptions opt;
  opt.chunk = std::max<std::size_t>(1, po.chunk);
  opt.label_context = !po.no_context;

  auto in = open_input(io.input);
  std::size_t lineno = 0;
  std::size_t bad = 0;
  auto next = [&]() -> std::optional<Thread> {
    for (std::string line; std::getline(in, line);) {
      ++lineno;
      if (text::trim(line).empty()) continue;
      try {
        return thread_from_json(json::parse(line));
      } catch (const std::exception& e) {
        std::cerr << io.input << ":" << lineno << ": " << e.what() << "\n";
        ++bad;
      }
    }
    return std::nullopt;
  };
  run.output(run.declare(io.output));
  AtomicFile f(io.output);
  const auto stats = pseudo_label_stream(next, *scorer, off_t, st_t, opt,
                                         [&](PseudoLabeled&& p) { f.stream() << to_json(p).dump() << '\n'; });
  if (bad) throw SchemaError(io.input + ": " + std::to_string(bad) + " malformed line(s)");
  f.commit();
  run.finish(io.output);
  std::cerr << "pseudolabel: " << stats.labeled << " labelled, " << stats.skipped_short << " skipped (k < 2)\n";
  return 0;
}

struct CtgOpts {
  std::string format = "atcon";
  std::string experiment = "both";
  std::size_t size = 100000;
  std::string control;
};

// "SAFE,NEU" or "[SAFE][NEU]"-style lists, case-insensitive.
std::vector<ctg::ControlToken> parse_control(std::string s) {
  for (char& c : s) {
    c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    if (c == '[' || c == ']') c = ',';
  }
  std::vector<ctg::ControlToken> out;
  for (auto part : text::split(s, ",")) {
    const auto p = text::trim(part);
    if (!p.empty()) out.push_back(ctg::control_token_from_string("[" + std::string(p) + "]"));
  }
  return out;
}

int cmd_ctg_build(const Globals& g, const Io& io, const CtgOpts& co) {
  Run run("ctg-build", g);
  if (io.output.empty()) throw UsageError("ctg-build needs --output DIR");
  if (co.format != "atcon" && co.format != "dapt") throw UsageError("--format must be atcon or dapt");
  run.input(io.input);
  auto in = open_input(io.input);
  const auto records = strict(io.input, parse_pseudo_labeled(in));
  const auto exp = ctg::experiment_from_string(co.experiment);
  std::vector<ctg::ControlToken> control;
  if (co.format == "dapt") {
    if (co.control.empty()) throw UsageError("dapt needs --control (e.g. SAFE,NEU)");
    control = parse_control(co.control);
    const std::size_t want = exp == ctg::Experiment::Both ? 2 : 1;
    if (control.size() != want)
      throw UsageError("--control must name " + std::to_string(want) + " token(s) for experiment " + co.experiment);
  }
  auto built = ctg::build_label_controlled(records, exp, co.size, g.seed);
  if (built.warning) std::cerr << "ctg-build: " << *built.warning << "\n";
  auto examples = std::move(built.examples);
  if (co.format == "dapt")
    std::erase_if(examples, [&](const ctg::LabelControlledExample& e) { return e.ct != control; });
  const auto split = ctg::split_95_5(examples, g.seed);
  fs::create_directories(io.output);
  for (const auto& [name, part] : {std::pair{"train.txt", &split.train}, std::pair{"dev.txt", &split.dev}}) {
    const auto path = (fs::path(io.output) / name).string();
    run.output(run.declare(path));
    write_text(path, co.format == "atcon" ? ctg::emit_atcon(*part, g.eou) : ctg::emit_dapt(*part, control, g.eou));
  }
  run.finish(io.output, true);
  std::cerr << "ctg-build: " << built.qualifying << " qualifying, " << examples.size() << " kept, "
            << split.train.size() << " train / " << split.dev.size() << " dev\n";
  return 0;
}

struct ReportOpts {
  std::string lexicon;
  std::string format = "md";
};

int cmd_autoeval(const Globals& g, const Io& io, const ScorerOpts& so, const ReportOpts& ro) {
  Run run("autoeval", g);
  run.input(io.input);
  auto in = open_input(io.input);
  const auto responses = strict(io.input, eval::parse_generated(in));
  auto scorer = so.make(run, g, true, true);
  std::optional<eval::Lexicon> lex;
  if (!ro.lexicon.empty()) {
    run.input(ro.lexicon);
    lex = eval::Lexicon::load(ro.lexicon);
  }
  eval::AutoEvalOptions opt;
  opt.eou = g.eou;
  opt.lexicon = lex ? &*lex : nullptr;
  const auto r = eval::ctg_auto_eval(responses, *scorer, *scorer, opt);
  run.output(run.declare(io.output));
  write_text(io.output, eval::emit_report(r, report_format(ro.format)));
  run.finish(io.output);
  return 0;
}

struct AnalyzeOpts {
  std::string analysis = "all";
  std::string gold;
  std::string pseudo;
  std::size_t top_k = 10;
  std::string by = "source";
};

int cmd_analyze(const Globals& g, const Io& io, const AnalyzeOpts& ao, const ReportOpts& ro) {
  Run run("analyze", g);
  static const std::vector<std::string> all = {"agree", "direct", "targets", "profanity", "temporal"};
  std::vector<std::string> wanted = ao.analysis == "all" ? all : std::vector<std::string>{ao.analysis};
  if (std::find(all.begin(), all.end(), wanted.front()) == all.end())
    throw UsageError("--analysis must be one of agree|direct|targets|profanity|temporal|all");
  const auto fmt = report_format(ro.format);
  if (wanted.size() > 1 && fmt == eval::ReportFormat::CSV) throw UsageError("csv output needs a single --analysis");
  if (ao.analysis == "all") {
    // without the optional inputs, run what can be run
    std::erase_if(wanted, [&](const std::string& a) {
      return (a == "temporal" && ao.pseudo.empty()) || (a == "profanity" && ro.lexicon.empty()) ||
             (a != "temporal" && (io.input.empty() || ao.gold.empty()));
    });
    if (wanted.empty()) throw UsageError("analyze needs --input/--gold, or --pseudo for temporal");
  }

  std::vector<Thread> threads;
  std::vector<AggregatedLabels> gold;
  std::vector<eval::LabeledThread> data;
  const bool need_gold = std::any_of(wanted.begin(), wanted.end(), [](const auto& a) { return a != "temporal"; });
  if (need_gold) {
    if (io.input.empty() || ao.gold.empty()) throw UsageError("this analysis needs --input threads and --gold");
    run.input(io.input);
    run.input(ao.gold);
    threads = load_threads(io.input);
    gold = load_gold(ao.gold);
    data = eval::join_gold(threads, gold);
  }
  std::optional<eval::Lexicon> lex;
  if (!ro.lexicon.empty()) {
    run.input(ro.lexicon);
    lex = eval::Lexicon::load(ro.lexicon);
  }
  std::string body;
  for (const auto& a : wanted) {
    eval::EvalReport r;
    if (a == "agree") {
      r = eval::agree_rate_report(eval::agree_rate_by_context(data));
    } else if (a == "direct") {
      r = eval::direct_contextual_report(eval::direct_vs_contextual(data));
    } else if (a == "targets") {
      if (ao.by != "source" && ao.by != "responder") throw UsageError("--by must be source or responder");
      r = eval::target_report(eval::target_group_top_k(
          data, ao.top_k, 2, ao.by == "source" ? eval::TargetGrouping::Source : eval::TargetGrouping::Responder));
    } else if (a == "profanity") {
      if (!lex) throw UsageError("profanity analysis needs --lexicon");
      r = eval::profanity_report(eval::profanity_share(data, *lex));
    } else {
      if (ao.pseudo.empty()) throw UsageError("temporal analysis needs --pseudo");
      run.input(ao.pseudo);
      auto in = open_input(ao.pseudo);
      r = eval::temporal_report(eval::temporal_stance_distribution(strict(ao.pseudo, parse_pseudo_labeled(in))));
    }
    if (wanted.size() > 1) body += (body.empty() ? "## " : "\n## ") + a + "\n\n";
    body += eval::emit_report(r, fmt);
  }
  run.output(run.declare(io.output));
  write_text(io.output, body);
  run.finish(io.output);
  return 0;
}

int cmd_export_prompts(const Globals& g, const Io& io) {
  Run run("export-prompts", g);
  run.input(io.input);
  std::ostringstream os;
  for (const auto& t : load_threads(io.input))
    os << json{{"thread", t.id}, {"prompt", gpt3_prompt(t)}}.dump() << '\n';
  run.output(run.declare(io.output));
  write_text(io.output, os.str());
  run.finish(io.output);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"convsafe: offensive-language and stance tooling for conversation threads"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  g.app = &app;
  app.set_config("--config", "", "key = value config file; [subcommand] sections, flags override it");
  app.add_option("--seed", g.seed, "random seed")->capture_default_str();
  app.add_option("--threads", g.threads, "parallelism (remote in-flight requests, server pool)")->capture_default_str();
  app.add_option("--eou-token", g.eou, "end-of-utterance separator")->capture_default_str();

  Io io;
  ScorerOpts so;
  std::function<int()> action;
  auto sub = [&](const char* name, const char* desc) {
    auto* s = app.add_subcommand(name, desc);
    return s;
  };

  // ingest
  PreprocessConfig pre;
  {
    auto* s = sub("ingest", "parse and preprocess a thread JSON-lines file");
    io.add(s, "raw thread JSON-lines", "cleaned thread JSON-lines (default stdout)");
    s->add_option("--max-post-words", pre.max_post_words)->capture_default_str();
    s->add_option("--max-comment-words", pre.max_comment_words)->capture_default_str();
    s->add_option("--url-token", pre.url_token)->capture_default_str();
    s->callback([&] { action = [&] { return cmd_ingest(g, io, pre); }; });
  }
  // sample
  SampleConfig sc;
  {
    auto* s = sub("sample", "two-stage stratified sample for annotation");
    io.add(s, "cleaned thread JSON-lines", "sampled thread JSON-lines");
    so.add(s, false);
    s->add_option("--n-random", sc.n_random_per_source, "uniform picks per source")->capture_default_str();
    s->add_option("--n-offensive", sc.n_offensive_per_source, "offensive picks per source")->capture_default_str();
    s->add_option("--threshold", sc.threshold, "P(offensive) cut for the second stage")->capture_default_str();
    s->callback([&] { action = [&] { return cmd_sample(g, io, so, sc); }; });
  }
  // serve
  ServeOpts sv;
  {
    auto* s = sub("serve", "annotation service (HTTP API and UI assets)");
    io.add(s, "thread JSON-lines to annotate", "unused");
    s->add_option("--store", sv.store, "append-only annotation store")->envname("CONVSAFE_STORE")->capture_default_str();
    s->add_option("--host", sv.host)->envname("CONVSAFE_HOST")->capture_default_str();
    s->add_option("--port", sv.port, "0 picks a free port")->envname("CONVSAFE_PORT")->capture_default_str();
    s->add_option("--workers-per-thread", sv.workers_per_thread)->envname("CONVSAFE_WORKERS_PER_THREAD")->capture_default_str();
    s->add_option("--lease-ttl", sv.lease_ttl, "e.g. 30m, 90s, 250ms")->envname("CONVSAFE_LEASE_TTL")->capture_default_str();
    s->add_option("--targets", sv.targets, "target-group vocabulary file");
    s->add_option("--ui-dir", sv.ui_dir, "directory of static UI assets");
    s->callback([&] { action = [&] { return cmd_serve(g, io, sv); }; });
  }
  // aggregate
  AggregateOpts ag;
  {
    auto* s = sub("aggregate", "gold labels and agreement report from worker annotations");
    io.add(s, "WorkerAnnotation JSON-lines", "gold JSON-lines");
    s->add_option("--min-votes", ag.min_votes)->capture_default_str();
    s->add_option("--corpus", ag.corpus, "threads, to check every utterance is covered");
    s->add_option("--report", ag.report, "agreement report path (default stderr)");
    s->add_option("--format", ag.format, "md or csv")->capture_default_str();
    s->callback([&] { action = [&] { return cmd_aggregate(g, io, ag); }; });
  }
  // split
  {
    auto* s = sub("split", "seeded 70/15/15 split of a JSON-lines file");
    io.add(s, "JSON-lines", "output directory");
    s->callback([&] { action = [&] { return cmd_split(g, io); }; });
  }
  // train
  TrainOpts tr;
  {
    auto* s = sub("train", "train an NBOW classifier");
    io.add(s, "training threads", "model checkpoint");
    s->add_option("--task", tr.task, "offensive or stance")->capture_default_str();
    s->add_option("--loss", tr.loss, "ce, wce or cbfocal")->capture_default_str();
    s->add_option("--dev", tr.dev, "dev threads (checkpoint selection)");
    s->add_option("--gold", tr.gold, "gold JSON-lines covering train and dev");
    s->add_option("--embeddings", tr.embeddings, "pretrained embeddings, 'token v1 .. vd' per line");
    s->add_option("--oov", tr.oov, "random or zero")->capture_default_str();
    s->add_option("--wce-weights", tr.wce_weights, "per-class weights")->delimiter(',');
    s->add_option("--beta", tr.beta)->capture_default_str();
    s->add_option("--gamma", tr.gamma)->capture_default_str();
    s->add_option("--dim", tr.model.dim)->capture_default_str();
    s->add_option("--hidden1", tr.model.hidden1)->capture_default_str();
    s->add_option("--hidden2", tr.model.hidden2)->capture_default_str();
    s->add_flag("--weighted-pooling", tr.model.weighted_pooling);
    s->add_option("--epochs", tr.train.epochs)->capture_default_str();
    s->add_option("--lr", tr.train.learning_rate)->capture_default_str();
    s->add_option("--batch-size", tr.train.batch_size)->capture_default_str();
    s->callback([&] { action = [&] { return cmd_train(g, io, tr); }; });
  }
  // gradcheck
  nbow::GradCheckConfig gc;
  std::string gc_task = "stance";
  {
    auto* s = sub("gradcheck", "compare analytic and finite-difference gradients on random networks");
    s->add_option("--networks", gc.networks)->capture_default_str();
    s->add_option("--task", gc_task)->capture_default_str();
    s->add_flag("--weighted-pooling", gc.weighted_pooling);
    s->callback([&] { action = [&] { return cmd_gradcheck(g, gc, gc_task); }; });
  }
  // eval
  EvalOpts eo;
  {
    auto* s = sub("eval", "classifier report: offensive slices or stance pair slices");
    io.add(s, "test threads", "report (default stdout)");
    so.add(s, false);
    s->add_option("--task", eo.task)->capture_default_str();
    s->add_option("--gold", eo.gold);
    s->add_option("--format", eo.format, "md or csv")->capture_default_str();
    s->callback([&] { action = [&] { return cmd_eval(g, io, so, eo); }; });
  }
  // calibrate
  double target_precision = 0.75;
  {
    auto* s = sub("calibrate", "per-class high-precision thresholds on a dev set");
    io.add(s, "dev threads", "threshold table JSON");
    so.add(s, false);
    s->add_option("--task", eo.task)->capture_default_str();
    s->add_option("--gold", eo.gold);
    s->add_option("--target-precision", target_precision)->capture_default_str();
    s->callback([&] { action = [&] { return cmd_calibrate(g, io, so, eo, target_precision); }; });
  }
  // pseudolabel
  PseudoOpts po;
  {
    auto* s = sub("pseudolabel", "high-precision offensive and stance labels for unlabelled threads");
    io.add(s, "thread JSON-lines", "pseudo-labelled JSON-lines");
    so.add(s, true);
    s->add_option("--off-thresholds", po.off_thresholds);
    s->add_option("--stance-thresholds", po.stance_thresholds);
    s->add_option("--chunk", po.chunk, "threads per scoring chunk")->capture_default_str();
    s->add_flag("--no-context", po.no_context, "skip labelling context utterances");
    s->callback([&] { action = [&] { return cmd_pseudolabel(g, io, so, po); }; });
  }
  // ctg-build
  CtgOpts co;
  {
    auto* s = sub("ctg-build", "label-controlled fine-tuning corpus (atcon or dapt)");
    io.add(s, "pseudo-labelled JSON-lines", "output directory (train.txt, dev.txt)");
    s->add_option("--format", co.format, "atcon or dapt")->capture_default_str();
    s->add_option("--experiment", co.experiment, "offense, stance or both")->capture_default_str();
    s->add_option("--size", co.size, "target corpus size L")->capture_default_str();
    s->add_option("--control", co.control, "dapt control set, e.g. SAFE,NEU");
    s->callback([&] { action = [&] { return cmd_ctg_build(g, io, co); }; });
  }
  // autoeval
  ReportOpts ro;
  {
    auto* s = sub("autoeval", "automatic metrics for generated responses");
    io.add(s, "generated responses JSON-lines", "report (default stdout)");
    so.add(s, true);
    s->add_option("--lexicon", ro.lexicon, "kind,pattern CSV for %Bad");
    s->add_option("--format", ro.format, "md or csv")->capture_default_str();
    s->callback([&] { action = [&] { return cmd_autoeval(g, io, so, ro); }; });
  }
  // analyze
  AnalyzeOpts an;
  {
    auto* s = sub("analyze", "corpus analyses: agree, direct, targets, profanity, temporal");
    io.add(s, "threads", "report (default stdout)", false);
    s->add_option("--analysis", an.analysis)->capture_default_str();
    s->add_option("--gold", an.gold);
    s->add_option("--pseudo", an.pseudo, "pseudo-labelled JSON-lines (temporal)");
    s->add_option("--lexicon", ro.lexicon);
    s->add_option("--top-k", an.top_k)->capture_default_str();
    s->add_option("--by", an.by, "targets grouping: source or responder")->capture_default_str();
    s->add_option("--format", ro.format, "md or csv")->capture_default_str();
    s->callback([&] { action = [&] { return cmd_analyze(g, io, an, ro); }; });
  }
  // export-prompts
  {
    auto* s = sub("export-prompts", "GPT-3 style prompts, one JSON object per thread");
    io.add(s, "thread JSON-lines", "prompts JSON-lines");
    s->callback([&] { action = [&] { return cmd_export_prompts(g, io); }; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }
  try {
    return action ? action() : 1;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const json::exception& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
