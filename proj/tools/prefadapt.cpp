// prefadapt: command-line front end for preference adaptation of query
// embeddings.
//
// Exit codes: 0 success, 1 validation error, 2 I/O or format error,
// 3 internal invariant violation (including a failed gradient check).

#include <csignal>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <httplib.h>
#include <json.hpp>

#include "prefadapt/http_api.hpp"
#include "prefadapt/prefadapt.hpp"

namespace {

using namespace prefadapt;

enum ExitCode : int { kOk = 0, kValidation = 1, kIo = 2, kInternal = 3 };

int exit_code_for(const Error& e) {
  const auto& code = e.code();
  if (code == "validation_error" || code == "domain_error" || code == "not_found" ||
      code == "conflict") {
    return kValidation;
  }
  if (code == "io_error" || code == "format_error" || code == "corruption_error") return kIo;
  return kInternal;
}

struct AdaptFlags {
  AdaptConfig cfg;

  void attach(CLI::App& app) {
    app.add_option("--epsilon", cfg.epsilon, "Learning rate (>= 0)")
        ->check(CLI::NonNegativeNumber)
        ->capture_default_str();
    app.add_option("--steps", cfg.steps, "Gradient steps per adaptation (>= 1)")
        ->check(CLI::Range(1, 1 << 20))
        ->capture_default_str();
    app.add_option("--temperature", cfg.temperature, "Multiplier on similarities (> 0)")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    app.add_option("--renormalize", cfg.renormalize,
                   "Project the embedding back to unit norm after each step (true/false)")
        ->capture_default_str();
  }
};

struct TableFlags {
  std::string embeddings;
  std::string meta;

  void attach(CLI::App& app, bool required = true) {
    auto* e = app.add_option("--embeddings", embeddings, "PEMB matrix file");
    auto* m = app.add_option("--meta", meta, "JSONL metadata sidecar (default: <embeddings>.meta.jsonl)");
    if (required) e->required();
    (void)m;
  }

  std::string meta_path() const {
    if (!meta.empty()) return meta;
    auto p = std::filesystem::path(embeddings);
    p.replace_extension(".meta.jsonl");
    return p.string();
  }

  TablePtr load() const {
    return std::make_shared<const EmbeddingTable>(load_embeddings(embeddings, meta_path()));
  }
};

void write_text(const std::string& path, const std::string& text) { detail::write_file(path, text); }

nlohmann::ordered_json vector_json(std::span<const double> v) {
  return std::vector<double>(v.begin(), v.end());
}

// ---------------------------------------------------------------- gradcheck

struct GradcheckArgs {
  std::size_t dim = 2;
  std::size_t trials = 100;
  std::uint64_t seed = 0;
  double temperature = 1.0;
  double step = 1e-5;
  double tolerance = 1e-6;
};

int cmd_gradcheck(const GradcheckArgs& a, bool quiet) {
  if (a.trials == 0) throw ValidationError("--trials must be >= 1");
  if (a.dim == 0) throw ValidationError("--dim must be >= 1");
  AdaptConfig cfg;
  cfg.temperature = a.temperature;
  cfg.validate();
  Rng rng(a.seed);
  double worst = 0.0;
  for (std::size_t t = 0; t < a.trials; ++t) {
    const auto x = random_unit_vector(a.dim, rng);
    const auto y1 = random_unit_vector(a.dim, rng);
    const auto y2 = random_unit_vector(a.dim, rng);
    const PreferencePair pair{y1.values(), y2.values()};
    const auto xs = x.values();
    const auto analytic = batch_gradient(xs, std::span(&pair, 1), cfg);
    const auto numeric = finite_diff_grad(xs, pair, cfg, a.step);
    worst = std::max(worst, relative_error(analytic, numeric));
  }
  const bool pass = worst < a.tolerance;
  if (quiet) {
    nlohmann::ordered_json j{{"dim", a.dim},       {"trials", a.trials}, {"seed", a.seed},
                             {"max_relative_error", worst}, {"tolerance", a.tolerance}, {"pass", pass}};
    std::cout << j.dump() << "\n";
  } else {
    std::printf("gradcheck d=%zu trials=%zu seed=%llu: max relative error %.3e (%s, tolerance %.0e)\n",
                a.dim, a.trials, static_cast<unsigned long long>(a.seed), worst, pass ? "PASS" : "FAIL",
                a.tolerance);
  }
  return pass ? kOk : kInternal;
}

// ---------------------------------------------------------------- adapt

struct AdaptArgs {
  TableFlags table;
  std::string pairs;
  std::string query_id;
  std::string out;
  std::string out_embedding;
};

int cmd_adapt(const AdaptArgs& a, const AdaptConfig& cfg, bool quiet) {
  cfg.validate();
  const auto table = a.table.load();
  const auto dataset = load_pairs(a.pairs, table);
  if (dataset.empty()) throw ValidationError("no usable preference pairs in '" + a.pairs + "'");
  const auto& query = table->at(a.query_id);
  const auto pairs = dataset.pairs();
  const auto result = adapt(query, pairs, cfg);

  nlohmann::ordered_json j;
  j["query_id"] = a.query_id;
  j["n_pairs"] = dataset.size();
  j["ties_dropped"] = dataset.ties_dropped();
  j["config"] = detail::config_to_json(cfg);
  j["input"] = vector_json(query.values());
  j["adapted"] = vector_json(result.embedding.values());
  j["trace"] = nlohmann::ordered_json::array();
  for (const auto& s : result.trace.steps) {
    j["trace"].push_back({{"loss_before", s.loss_before},
                          {"gradient_norm", s.gradient_norm},
                          {"post_norm", s.post_norm}});
  }
  write_text(a.out, j.dump(2) + "\n");
  if (!a.out_embedding.empty()) {
    EmbeddingTable single(result.embedding.dim());
    single.add(a.query_id, result.embedding);
    auto meta = std::filesystem::path(a.out_embedding);
    meta.replace_extension(".meta.jsonl");
    save_embeddings(single, a.out_embedding, meta.string());
  }
  if (quiet) {
    std::cout << j.dump() << "\n";
  } else {
    std::printf("adapted '%s' on %zu pairs (%zu ties dropped), %d step(s)\n", a.query_id.c_str(),
                dataset.size(), dataset.ties_dropped(), cfg.steps);
    for (std::size_t t = 0; t < result.trace.steps.size(); ++t) {
      const auto& s = result.trace.steps[t];
      std::printf("  step %zu: loss %.6f  |grad| %.6f  |x'| %.6f\n", t + 1, s.loss_before,
                  s.gradient_norm, s.post_norm);
    }
    std::printf("wrote %s\n", a.out.c_str());
  }
  return kOk;
}

// ---------------------------------------------------------------- eval / curve

struct EvalArgs {
  TableFlags table;
  std::string pairs;
  std::string query_id;
  std::string query_file;
  std::vector<std::size_t> sizes;
  std::size_t repeats = 10;
  std::uint64_t seed = 0;
  std::optional<std::size_t> eval_reserve;
  std::string out_json;
  std::string out_csv;
};

Embedding load_query(const EvalArgs& a, const EmbeddingTable& table) {
  if (!a.query_id.empty()) return table.at(a.query_id);
  const auto m = decode_pemb(detail::read_file(a.query_file), a.query_file);
  if (m.rows < 1) throw ValidationError("query file '" + a.query_file + "' has no rows");
  return Embedding(std::vector<double>(m.values.begin(), m.values.begin() + static_cast<std::ptrdiff_t>(m.dim)));
}

void print_report(const EvalReport& r) {
  std::printf("eval set %zu pairs, %zu repeats, seed %llu\n", r.eval_size, r.n_repeats,
              static_cast<unsigned long long>(r.seed));
  std::printf("%-10s %8s %10s %10s\n", "variant", "n_train", "mean", "std");
  for (const auto& row : r.rows) {
    std::printf("%-10s %8zu %10.4f %10.4f\n", std::string(variant_name(row.variant)).c_str(),
                row.n_train, row.mean, row.std);
  }
}

int cmd_eval(const EvalArgs& a, const AdaptConfig& cfg, bool quiet) {
  cfg.validate();
  if (a.repeats < 1) throw ValidationError("--repeats must be >= 1");
  if (a.sizes.empty()) throw ValidationError("at least one training size is required");
  if (a.query_id.empty() == a.query_file.empty()) {
    throw ValidationError("exactly one of --query-id or --query-file is required");
  }
  const auto table = a.table.load();
  const auto pool = load_pairs(a.pairs, table);
  const auto query = load_query(a, *table);
  ProtocolOptions opts;
  opts.sizes = a.sizes;
  opts.n_repeats = a.repeats;
  opts.seed = a.seed;
  opts.eval_reserve = a.eval_reserve;
  const auto report = run_protocol(query, pool, opts, cfg);
  if (!a.out_json.empty()) emit_report(report, a.out_json, ReportFormat::json);
  if (!a.out_csv.empty()) emit_report(report, a.out_csv, ReportFormat::csv);
  if (quiet) {
    std::cout << report_to_json(report).dump() << "\n";
  } else {
    print_report(report);
  }
  return kOk;
}

// ---------------------------------------------------------------- simulate

struct SimulateArgs {
  std::size_t dim = 32;
  std::size_t n = 500;
  std::size_t pairs = 2500;
  double gen_temperature = kDefaultGenTemperature;
  std::uint64_t seed = 0;
  std::string out_dir;
};

int cmd_simulate(const SimulateArgs& a, bool quiet) {
  if (a.dim < 2) throw ValidationError("--dim must be >= 2");
  if (a.n < 2) throw ValidationError("--n must be >= 2");
  if (!(a.gen_temperature > 0.0)) throw ValidationError("--gen-temperature must be > 0");
  std::error_code ec;
  std::filesystem::create_directories(a.out_dir, ec);
  if (ec) throw IoError("cannot create '" + a.out_dir + "': " + ec.message());
  const std::filesystem::path dir(a.out_dir);

  const auto truth = make_ground_truth(a.dim, a.gen_temperature, derived_seed(a.seed, 1));
  const auto table = std::make_shared<const EmbeddingTable>(
      gen_population(a.dim, a.n, derived_seed(a.seed, 2), &truth));
  const auto dataset = sample_preferences(truth, table, a.pairs, derived_seed(a.seed, 3));
  Rng qrng(derived_seed(a.seed, 4));
  EmbeddingTable query(a.dim);
  query.add("query", random_unit_vector(a.dim, qrng));

  save_embeddings(*table, (dir / "corpus.pemb").string(), (dir / "corpus.meta.jsonl").string());
  save_pairs(dataset, (dir / "pairs.jsonl").string());
  save_embeddings(query, (dir / "query.pemb").string(), (dir / "query.meta.jsonl").string());
  nlohmann::ordered_json t;
  t["direction"] = vector_json(truth.direction.values());
  t["temperature_gen"] = truth.temperature_gen;
  t["seed"] = a.seed;
  write_text((dir / "truth.json").string(), t.dump(2) + "\n");

  if (quiet) {
    std::cout << nlohmann::ordered_json{{"out_dir", a.out_dir}, {"n", a.n}, {"pairs", a.pairs}}.dump() << "\n";
  } else {
    std::printf("wrote corpus (%zu x %zu), %zu pairs, query and truth to %s\n", a.n, a.dim, a.pairs,
                a.out_dir.c_str());
  }
  return kOk;
}

// ---------------------------------------------------------------- pairs-from-scores

struct ScorePairsArgs {
  TableFlags table;
  double high = 0.2;
  double low = 0.2;
  std::size_t n = 50;
  std::uint64_t seed = 0;
  std::string out;
};

int cmd_pairs_from_scores(const ScorePairsArgs& a, bool quiet) {
  if (!(a.high > 0.0 && a.high < 1.0 && a.low > 0.0 && a.low < 1.0) || a.high + a.low > 1.0) {
    throw ValidationError("quantiles must lie in (0,1) and sum to at most 1");
  }
  const auto table = a.table.load();
  const auto dataset = pairs_from_scores(table, a.high, a.low, a.n, a.seed);
  save_pairs(dataset, a.out);
  if (quiet) {
    std::cout << nlohmann::ordered_json{{"out", a.out}, {"pairs", dataset.size()}}.dump() << "\n";
  } else {
    std::printf("wrote %zu pairs to %s\n", dataset.size(), a.out.c_str());
  }
  return kOk;
}

// ---------------------------------------------------------------- serve

httplib::Server* g_server = nullptr;

extern "C" void handle_stop_signal(int) {
  if (g_server) g_server->stop();
}

struct ServeArgs {
  std::string config_file;
  std::string listen;
  std::string embeddings;
  std::string meta;
  std::string data_dir;
  std::optional<double> epsilon;
  std::optional<int> steps;
  std::optional<double> temperature;
  std::optional<bool> renormalize;
};

int cmd_serve(const ServeArgs& a) {
  ServiceConfig config;
  if (!a.config_file.empty()) config.apply_file(a.config_file);
  config.apply_env();
  if (!a.listen.empty()) config.set_listen(a.listen);
  if (!a.embeddings.empty()) config.embeddings_path = a.embeddings;
  if (!a.meta.empty()) config.meta_path = a.meta;
  if (!a.data_dir.empty()) config.data_dir = a.data_dir;
  if (a.epsilon) config.adapt.epsilon = *a.epsilon;
  if (a.steps) config.adapt.steps = *a.steps;
  if (a.temperature) config.adapt.temperature = *a.temperature;
  if (a.renormalize) config.adapt.renormalize = *a.renormalize;
  config.adapt.validate();
  if (config.embeddings_path.empty()) throw ValidationError("no corpus: set --embeddings or PREFADAPT_EMBEDDINGS");

  TableFlags tf{config.embeddings_path, config.meta_path};
  const auto table = tf.load();
  StoreOptions opts;
  opts.data_dir = config.data_dir;
  opts.default_config = config.adapt;
  opts.snapshot_every = config.snapshot_every;
  opts.compact_log = config.compact_log;
  ProfileStore store(table, opts);

  httplib::Server server;
  mount_routes(server, store);
  int port = config.port;
  if (port == 0) {
    port = server.bind_to_any_port(config.host);
  } else if (!server.bind_to_port(config.host, port)) {
    port = -1;
  }
  if (port <= 0) throw IoError("cannot listen on " + config.host + ":" + std::to_string(config.port));

  g_server = &server;
  std::signal(SIGINT, handle_stop_signal);
  std::signal(SIGTERM, handle_stop_signal);
  std::printf("listening on %s:%d (corpus %zu x %zu, %zu profiles)\n", config.host.c_str(), port,
              table->size(), table->dim(), store.profile_ids().size());
  std::fflush(stdout);
  const bool ok = server.listen_after_bind();
  g_server = nullptr;
  return ok ? kOk : kIo;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bradley-Terry preference adaptation of query embeddings"};
  app.require_subcommand(1);
  bool quiet = false;
  app.add_flag("--quiet,-q", quiet, "Machine mode: JSON on stdout");

  AdaptFlags adapt_flags;

  GradcheckArgs gc;
  auto* gradcheck = app.add_subcommand("gradcheck", "Compare the closed-form gradient with finite differences");
  gradcheck->add_option("--dim", gc.dim, "Embedding dimension")->capture_default_str();
  gradcheck->add_option("--trials", gc.trials, "Random instances")->capture_default_str();
  gradcheck->add_option("--seed", gc.seed, "RNG seed")->capture_default_str();
  gradcheck->add_option("--temperature", gc.temperature, "Similarity multiplier")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  gradcheck->add_option("--step", gc.step, "Finite-difference step")->check(CLI::PositiveNumber)->capture_default_str();

  AdaptArgs ad;
  auto* adapt_cmd = app.add_subcommand("adapt", "Adapt one query embedding on a pairs file");
  ad.table.attach(*adapt_cmd);
  adapt_cmd->add_option("--pairs", ad.pairs, "Preference pairs JSONL")->required();
  adapt_cmd->add_option("--query-id", ad.query_id, "Row id of the query embedding")->required();
  adapt_cmd->add_option("--out", ad.out, "Output JSON (adapted embedding + trace)")->required();
  adapt_cmd->add_option("--out-embedding", ad.out_embedding, "Also write the adapted embedding as PEMB");
  adapt_flags.attach(*adapt_cmd);

  EvalArgs ev;
  std::size_t eval_size = 50;
  std::size_t eval_reserve = 0;
  auto add_eval_common = [&](CLI::App* cmd) {
    ev.table.attach(*cmd);
    cmd->add_option("--pairs", ev.pairs, "Preference pairs JSONL (pool)")->required();
    auto* qid = cmd->add_option("--query-id", ev.query_id, "Row id of the base query embedding");
    auto* qf = cmd->add_option("--query-file", ev.query_file, "PEMB file whose first row is the base query");
    qid->excludes(qf);
    cmd->add_option("--repeats", ev.repeats, "Random training sets per size")->capture_default_str();
    cmd->add_option("--seed", ev.seed, "Master seed")->capture_default_str();
    cmd->add_option("--eval-reserve", eval_reserve, "Evaluation pairs (default: 2000 or 20% of pool)");
    cmd->add_option("--out-json", ev.out_json, "Write the report as JSON");
    cmd->add_option("--out-csv", ev.out_csv, "Write the report as CSV");
    adapt_flags.attach(*cmd);
  };
  auto* eval_cmd = app.add_subcommand("eval", "Pairwise accuracy of original/positive/bt at one training size");
  add_eval_common(eval_cmd);
  eval_cmd->add_option("--size", eval_size, "Training pairs per repeat")->capture_default_str();
  auto* curve_cmd = app.add_subcommand("curve", "Accuracy versus training-set size");
  add_eval_common(curve_cmd);
  ev.sizes = {0, 1, 5, 10, 25, 50};
  curve_cmd->add_option("--sizes", ev.sizes, "Training sizes")->delimiter(',')->capture_default_str();

  SimulateArgs sim;
  auto* simulate = app.add_subcommand("simulate", "Write a synthetic corpus, pairs, query and ground truth");
  simulate->add_option("--dim", sim.dim, "Embedding dimension")->capture_default_str();
  simulate->add_option("--n", sim.n, "Corpus size")->capture_default_str();
  simulate->add_option("--pairs", sim.pairs, "Preference pairs to sample")->capture_default_str();
  simulate->add_option("--gen-temperature", sim.gen_temperature, "Simulated annotator sharpness")
      ->capture_default_str();
  simulate->add_option("--seed", sim.seed, "RNG seed")->capture_default_str();
  simulate->add_option("--out-dir", sim.out_dir, "Output directory")->required();

  ScorePairsArgs sp;
  auto* score_pairs = app.add_subcommand("pairs-from-scores", "Pair top-scored rows against bottom-scored rows");
  sp.table.attach(*score_pairs);
  score_pairs->add_option("--high", sp.high, "Top fraction used for winners")->capture_default_str();
  score_pairs->add_option("--low", sp.low, "Bottom fraction used for losers")->capture_default_str();
  score_pairs->add_option("--n", sp.n, "Pairs to draw")->capture_default_str();
  score_pairs->add_option("--seed", sp.seed, "RNG seed")->capture_default_str();
  score_pairs->add_option("--out", sp.out, "Output pairs JSONL")->required();

  ServeArgs sv;
  auto* serve = app.add_subcommand("serve", "Run the profile service (HTTP+JSON)");
  serve->add_option("--config", sv.config_file, "JSON config file");
  serve->add_option("--listen", sv.listen, "host:port (port 0 picks a free port)");
  serve->add_option("--embeddings", sv.embeddings, "Corpus PEMB file");
  serve->add_option("--meta", sv.meta, "Corpus metadata JSONL");
  serve->add_option("--data-dir", sv.data_dir, "Profile storage directory");
  serve->add_option("--epsilon", sv.epsilon, "Default learning rate")->check(CLI::NonNegativeNumber);
  serve->add_option("--steps", sv.steps, "Default steps per event")->check(CLI::Range(1, 1 << 20));
  serve->add_option("--temperature", sv.temperature, "Default temperature")->check(CLI::PositiveNumber);
  serve->add_option("--renormalize", sv.renormalize, "Default renormalization (true/false)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kValidation;
  }

  try {
    if (eval_reserve > 0) ev.eval_reserve = eval_reserve;
    if (*gradcheck) return cmd_gradcheck(gc, quiet);
    if (*adapt_cmd) return cmd_adapt(ad, adapt_flags.cfg, quiet);
    if (*eval_cmd) {
      ev.sizes = {eval_size};
      return cmd_eval(ev, adapt_flags.cfg, quiet);
    }
    if (*curve_cmd) return cmd_eval(ev, adapt_flags.cfg, quiet);
    if (*simulate) return cmd_simulate(sim, quiet);
    if (*score_pairs) return cmd_pairs_from_scores(sp, quiet);
    if (*serve) {
      if (sv.embeddings.empty() && sv.config_file.empty() && !std::getenv("PREFADAPT_EMBEDDINGS")) {
        throw ValidationError("serve needs a corpus (--embeddings, --config or PREFADAPT_EMBEDDINGS)");
      }
      return cmd_serve(sv);
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "error [%s]: %s\n", e.code().c_str(), e.what());
    return exit_code_for(e);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "internal error: %s\n", e.what());
    return kInternal;
  }
  return kInternal;
}
