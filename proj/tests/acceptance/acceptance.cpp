// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.

#include <fcntl.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>

#include "oracle.hpp"
#include "prefadapt/prefadapt.hpp"

using namespace prefadapt;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

int g_failures = 0;

void report(const std::string& name, bool pass, const std::string& detail) {
  std::printf("%s  %-28s %s\n", pass ? "PASS" : "FAIL", name.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!pass) ++g_failures;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

fs::path work_dir(const std::string& name) {
  auto p = fs::path(PREFADAPT_TEST_TMP) / "acceptance" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(PREFADAPT_CLI) + " " + args + " >/dev/null 2>&1";
  const int raw = std::system(cmd.c_str());
  return WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

double l2(std::span<const double> v) {
  long double s = 0.0L;
  for (double c : v) s += static_cast<long double>(c) * c;
  return static_cast<double>(std::sqrt(s));
}

// ------------------------------------------------------------------ criteria

void gradient_exactness() {
  const auto t0 = Clock::now();
  const double h = 1e-5;
  double worst = 0.0;
  std::size_t count = 0;
  for (std::size_t d : {2, 16, 64, 768}) {
    std::mt19937_64 rng(1000 + d);
    for (int trial = 0; trial < 100; ++trial) {
      const auto x = oracle::random_unit(d, rng);
      const auto y1 = oracle::random_unit(d, rng);
      const auto y2 = oracle::random_unit(d, rng);
      const PreferencePair pair{y1, y2};
      const auto analytic = batch_gradient(x, std::span(&pair, 1), AdaptConfig{});
      std::vector<double> numeric(d);
      auto probe = x;
      for (std::size_t i = 0; i < d; ++i) {
        probe[i] = x[i] + h;
        const long double up = oracle::loss(probe, y1, y2);
        probe[i] = x[i] - h;
        const long double down = oracle::loss(probe, y1, y2);
        probe[i] = x[i];
        numeric[i] = static_cast<double>((up - down) / (2.0L * h));
      }
      std::vector<double> diff(d);
      for (std::size_t i = 0; i < d; ++i) diff[i] = analytic[i] - numeric[i];
      worst = std::max(worst, l2(diff) / std::max(l2(analytic), l2(numeric)));
      ++count;
    }
  }
  const double secs = seconds_since(t0);
  report("gradient_exactness", worst < 1e-6 && secs < 10.0 && count >= 400,
         fmt("%zu instances, max rel err %.2e (< 1e-6), %.2f s (< 10 s)", count, worst, secs));
}

void worked_example() {
  const std::vector<double> x{1.0, 0.0}, y1{0.0, 1.0}, y2{1.0, 0.0};
  const AdaptConfig cfg{0.1, 1, 1.0, false};
  const PreferencePair pair{y1, y2};
  const auto o = pair_outcome(x, pair, cfg);
  const auto next = adapt_step(Embedding(x), std::span(&pair, 1), cfg);
  const double gain = (dot(next, y1) - dot(next, y2)) - (dot(x, y1) - dot(x, y2));
  // High-precision values evaluated independently at 30 digits.
  const double p1 = 0.2689414213699951207488, loss = 1.3132616875182228340490;
  const double g = 0.7310585786300048792512;
  const double xp0 = 0.9268941421369995120749, xp1 = 0.0731058578630004879251;
  const double margin = 0.1462117157260009758502;
  const double err = std::max({std::abs(o.p1 - p1), std::abs(o.loss - loss), std::abs(o.gradient[0] - g),
                               std::abs(o.gradient[1] + g), std::abs(next[0] - xp0), std::abs(next[1] - xp1),
                               std::abs(gain - margin)});
  report("worked_example_d2", err < 1e-6, fmt("max abs err %.2e (< 1e-6)", err));
}

void margin_identity() {
  std::mt19937_64 rng(77);
  std::uniform_real_distribution<double> eps_dist(0.01, 1.0), tau_dist(0.5, 5.0);
  std::uniform_int_distribution<std::size_t> dim_dist(2, 128);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const std::size_t d = dim_dist(rng);
    const auto x = oracle::random_unit(d, rng);
    const auto y1 = oracle::random_unit(d, rng);
    const auto y2 = oracle::random_unit(d, rng);
    const AdaptConfig cfg{eps_dist(rng), 1, tau_dist(rng), false};
    const PreferencePair pair{y1, y2};
    const auto next = adapt_step(Embedding(x), std::span(&pair, 1), cfg);
    const double gain = static_cast<double>((oracle::dot(next.values(), y1) - oracle::dot(next.values(), y2)) -
                                            (oracle::dot(x, y1) - oracle::dot(x, y2)));
    const long double p = oracle::bt(oracle::dot(x, y1), oracle::dot(x, y2), cfg.temperature);
    long double sq = 0.0L;
    for (std::size_t k = 0; k < d; ++k) sq += (static_cast<long double>(y1[k]) - y2[k]) * (y1[k] - y2[k]);
    const double expect = static_cast<double>(cfg.epsilon * cfg.temperature * (1.0L - p) * sq);
    worst = std::max(worst, std::abs(gain - expect));
  }
  report("margin_identity", worst < 1e-9, fmt("1000 instances, max abs err %.2e (< 1e-9)", worst));
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  auto ranks = [](const std::vector<double>& v) {
    std::vector<std::size_t> order(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](auto i, auto j) { return v[i] < v[j]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < order.size();) {
      std::size_t j = i;
      while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
      for (std::size_t k = i; k <= j; ++k) r[order[k]] = (i + j) / 2.0 + 1.0;
      i = j + 1;
    }
    return r;
  };
  const auto ra = ranks(a), rb = ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

// The simulator pipeline through the CLI: simulate, then curve.
void variant_ordering() {
  const auto dir = work_dir("ordering");
  const auto t0 = Clock::now();
  const int sim = run_cli("simulate --dim 32 --n 500 --pairs 2500 --gen-temperature 10 --seed 1 --out-dir " + q(dir));
  const int curve = run_cli("curve --embeddings " + q(dir / "corpus.pemb") + " --pairs " + q(dir / "pairs.jsonl") +
                            " --query-file " + q(dir / "query.pemb") +
                            " --sizes 1,5,10,25,50 --repeats 10 --eval-reserve 2000 --seed 0"
                            " --epsilon 2 --steps 5 --temperature 1 --renormalize true --out-json " +
                            q(dir / "curve.json"));
  const double secs = seconds_since(t0);
  if (sim != 0 || curve != 0) {
    report("variant_ordering", false, fmt("pipeline exit codes simulate=%d curve=%d", sim, curve));
    return;
  }
  const auto r = report_from_json(nlohmann::json::parse(slurp(dir / "curve.json")));
  std::vector<double> sizes, bt;
  double at50[3] = {0, 0, 0};
  for (const auto& row : r.rows) {
    if (row.variant == Variant::bt) {
      sizes.push_back(static_cast<double>(row.n_train));
      bt.push_back(row.mean);
    }
    if (row.n_train == 50) at50[static_cast<int>(row.variant)] = row.mean;
  }
  const double orig = at50[0], pos = at50[1], btm = at50[2];
  const double rho = spearman(sizes, bt);
  const bool ok = r.eval_size == 2000 && btm >= pos && pos >= orig && btm - orig >= 0.05 && rho >= 0.8 &&
                  secs < 120.0;
  report("variant_ordering", ok,
         fmt("size 50: bt %.4f >= positive %.4f >= original %.4f, bt-orig %.4f (>= 0.05), rho %.3f (>= 0.8), "
             "%.1f s (< 120 s)",
             btm, pos, orig, btm - orig, rho, secs));
}

void size_zero_equality() {
  const auto truth = make_ground_truth(32, 10.0, 5);
  auto table = std::make_shared<const EmbeddingTable>(gen_population(32, 500, 6, &truth));
  const auto pool = sample_preferences(truth, table, 2500, 7);
  Rng rng(8);
  const auto base = random_unit_vector(32, rng);
  ProtocolOptions o;
  o.sizes = {0};
  o.n_repeats = 10;
  const auto r = run_protocol(base, pool, o, AdaptConfig{2.0, 5, 1.0, true});
  bool equal = r.rows.size() == 3;
  for (const auto& row : r.rows) equal = equal && row.accuracies == r.rows[0].accuracies && row.mean == r.rows[0].mean;
  report("size_zero_equality", equal, fmt("original/positive/bt at size 0: %.6f each", r.rows[0].mean));
}

void bt_properties() {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> s(-1e3, 1e3), c(-1e3, 1e3), tau(0.1, 10.0);
  double norm_err = 0.0, shift_err = 0.0;
  bool finite = true;
  for (int i = 0; i < 100000; ++i) {
    const double s1 = s(rng), s2 = s(rng), t = tau(rng), k = c(rng);
    const double p = bt_probability(s1, s2, t), qv = bt_probability(s2, s1, t);
    norm_err = std::max(norm_err, std::abs(p + qv - 1.0));
    if (std::abs(s1 - s2) < 50.0) {
      shift_err = std::max(shift_err, std::abs(bt_probability(s1 + k, s2 + k, t) - p));
    }
    finite = finite && std::isfinite(p) && p > 0.0 && p < 1.0;
  }
  for (double ds : {1e3, -1e3, 7e2, -7e2}) {
    const std::vector<double> x{1.0, 0.0}, y1{ds, 0.0}, y2{0.0, 0.0};
    const PreferencePair pair{y1, y2};
    const auto o = pair_outcome(x, pair, AdaptConfig{});
    finite = finite && std::isfinite(o.p1) && std::isfinite(o.loss) && std::isfinite(o.gradient[0]) &&
             std::isfinite(o.gradient[1]);
  }
  report("bt_probability", norm_err <= 1e-12 && shift_err <= 1e-12 && finite,
         fmt("|p+q-1| %.1e, shift drift %.1e (<= 1e-12), finite at |ds|=1e3: %s", norm_err, shift_err,
             finite ? "yes" : "no"));
}

void pemb_round_trip() {
  const auto dir = work_dir("pemb");
  std::mt19937_64 rng(10);
  std::uniform_int_distribution<std::size_t> dim(1, 64), rows(1, 50);
  std::normal_distribution<float> value(0.0f, 3.0f);
  bool identical = true;
  for (int t = 0; t < 100; ++t) {
    EmbeddingTable table(dim(rng));
    const std::size_t n = rows(rng);
    for (std::size_t r = 0; r < n; ++r) {
      std::vector<double> v(table.dim());
      for (auto& c : v) c = static_cast<double>(value(rng));
      table.add("row-" + std::to_string(t) + "-" + std::to_string(r), Embedding(std::move(v)));
    }
    const auto emb = (dir / "t.pemb").string(), meta = (dir / "t.meta.jsonl").string();
    save_embeddings(table, emb, meta);
    const auto bytes = slurp(emb);
    const auto back = load_embeddings(emb, meta);
    identical = identical && back.size() == n && encode_pemb(back) == bytes;
    for (std::size_t r = 0; identical && r < n; ++r) {
      identical = back.id(r) == table.id(r) && back.row(r) == table.row(r);
    }
  }
  EmbeddingTable small(3);
  small.add("a", Embedding({1, 2, 3}));
  small.add("b", Embedding({4, 5, 6}));
  const auto good = encode_pemb(small);
  auto rejects = [&](std::string bytes, auto tag) {
    try {
      decode_pemb(std::vector<unsigned char>(bytes.begin(), bytes.end()), "fixture");
    } catch (const decltype(tag)&) {
      return true;
    } catch (...) {
      return false;
    }
    return false;
  };
  std::string bad_magic = good, bad_version = good, bad_count = good;
  bad_magic[0] = 'X';
  bad_version[4] = 2;
  bad_count[12] = 3;
  const bool rejected = rejects(good.substr(0, good.size() - 4), CorruptionError("")) &&
                        rejects(good.substr(0, 10), CorruptionError("")) &&
                        rejects(good + "xxxx", CorruptionError("")) && rejects(bad_count, CorruptionError("")) &&
                        rejects(bad_magic, FormatError("")) && rejects(bad_version, FormatError(""));
  report("pemb_round_trip", identical && rejected,
         fmt("100 tables bit-identical: %s; truncated/corrupt -> corruption_error, bad magic/version -> "
             "format_error: %s",
             identical ? "yes" : "no", rejected ? "yes" : "no"));
}

// ---------------------------------------------------------------- replay

class ServeProcess {
 public:
  ServeProcess(const fs::path& corpus, const fs::path& data_dir) {
    int fds[2];
    if (pipe(fds) != 0) return;
    pid_ = fork();
    if (pid_ == 0) {
      dup2(fds[1], STDOUT_FILENO);
      close(fds[0]);
      close(fds[1]);
      const int devnull = open("/dev/null", O_WRONLY);
      dup2(devnull, STDERR_FILENO);
      execl(PREFADAPT_CLI, "prefadapt", "serve", "--listen", "127.0.0.1:0", "--embeddings", corpus.c_str(),
            "--data-dir", data_dir.c_str(), "--epsilon", "0.5", "--steps", "2", "--temperature", "3", nullptr);
      _exit(127);
    }
    close(fds[1]);
    out_ = fdopen(fds[0], "r");
    char line[512];
    if (out_ && std::fgets(line, sizeof(line), out_)) {
      std::string s(line);
      const auto colon = s.find(':', s.find("listening on"));
      if (colon != std::string::npos) port_ = std::atoi(s.c_str() + colon + 1);
    }
  }
  ~ServeProcess() {
    kill_hard();
    if (out_) std::fclose(out_);
  }
  int port() const { return port_; }
  void kill_hard() {
    if (pid_ > 0) {
      ::kill(pid_, SIGKILL);
      waitpid(pid_, nullptr, 0);
      pid_ = -1;
    }
  }

 private:
  pid_t pid_ = -1;
  FILE* out_ = nullptr;
  int port_ = 0;
};

void replay_determinism() {
  // In-process: 20 online events against one-shot replay.
  auto table = std::make_shared<const EmbeddingTable>(gen_population(32, 200, 11));
  const AdaptConfig cfg{0.5, 2, 3.0, true};
  Rng rng(12);
  std::vector<std::pair<std::string, std::string>> events;
  for (int i = 0; i < 20; ++i) {
    const auto ab = sample_without_replacement(table->size(), 2, rng);
    events.emplace_back(table->id(ab[0]), table->id(ab[1]));
  }
  ProfileStore store(table, {});
  const auto id = store.create_profile(std::string("img-00000"), cfg);
  for (const auto& [w, l] : events) store.record_preference(id, w, l);
  const auto one_shot = replay(*table, table->at("img-00000"), store.event_log(id), cfg);
  const auto online = store.get_profile(id).current;
  const bool same = std::equal(online.begin(), online.end(), one_shot.values().begin());

  // Out of process: SIGKILL the server while an event is in flight, restart,
  // finish the stream and compare with the offline fold.
  const auto dir = work_dir("restart");
  save_embeddings(*table, (dir / "corpus.pemb").string(), (dir / "corpus.meta.jsonl").string());
  // The server sees the float32 corpus, so the offline fold must too.
  const auto on_disk = load_embeddings((dir / "corpus.pemb").string(), (dir / "corpus.meta.jsonl").string());
  bool restart_ok = false;
  std::string detail = "server did not start";
  std::uint64_t recovered_seq = 0;
  std::string pid;
  {
    ServeProcess first(dir / "corpus.pemb", dir / "data");
    if (first.port() > 0) {
      httplib::Client c("127.0.0.1", first.port());
      auto created = c.Post("/profiles", R"({"base_id":"img-00000","profile_id":"kr"})", "application/json");
      bool acked = created && created->status == 201;
      for (int i = 0; acked && i < 10; ++i) {
        const nlohmann::json body{{"winner_id", events[i].first}, {"loser_id", events[i].second}};
        auto res = c.Post("/profiles/kr/events", body.dump(), "application/json");
        acked = res && res->status == 200;
      }
      std::thread inflight([&] {
        httplib::Client c2("127.0.0.1", first.port());
        const nlohmann::json body{{"winner_id", events[10].first}, {"loser_id", events[10].second}};
        c2.Post("/profiles/kr/events", body.dump(), "application/json");
      });
      std::this_thread::sleep_for(std::chrono::microseconds(200));
      first.kill_hard();
      inflight.join();
      detail = acked ? "" : "first server rejected events";
    }
  }
  if (detail.empty()) {
    ServeProcess second(dir / "corpus.pemb", dir / "data");
    httplib::Client c("127.0.0.1", second.port());
    auto got = second.port() > 0 ? c.Get("/profiles/kr") : httplib::Result();
    if (got && got->status == 200) {
      const auto j = nlohmann::json::parse(got->body);
      recovered_seq = j["seq"].get<std::uint64_t>();
      const AdaptConfig served{0.5, 2, 3.0, true};
      std::vector<PreferenceEvent> prefix;
      for (std::uint64_t i = 0; i < recovered_seq && i < events.size(); ++i) {
        prefix.push_back({i + 1, events[i].first, events[i].second, 0});
      }
      const auto expect_mid = replay(on_disk, on_disk.at("img-00000"), prefix, served);
      const bool mid_ok = (recovered_seq == 10 || recovered_seq == 11) &&
                          j["current"].get<std::vector<double>>() ==
                              std::vector<double>(expect_mid.values().begin(), expect_mid.values().end());
      for (std::size_t i = recovered_seq; i < events.size(); ++i) {
        const nlohmann::json body{{"winner_id", events[i].first}, {"loser_id", events[i].second}};
        c.Post("/profiles/kr/events", body.dump(), "application/json");
      }
      const auto fin = nlohmann::json::parse(c.Get("/profiles/kr")->body);
      std::vector<PreferenceEvent> all;
      for (std::uint64_t i = 0; i < events.size(); ++i) all.push_back({i + 1, events[i].first, events[i].second, 0});
      const auto expect_end = replay(on_disk, on_disk.at("img-00000"), all, served);
      const bool end_ok = fin["seq"] == 20 && fin["current"].get<std::vector<double>>() ==
                                                  std::vector<double>(expect_end.values().begin(),
                                                                      expect_end.values().end());
      restart_ok = mid_ok && end_ok;
      detail = fmt("recovered seq %llu, current %s, final %s", static_cast<unsigned long long>(recovered_seq),
                   mid_ok ? "bit-identical" : "DIFFERS", end_ok ? "bit-identical" : "DIFFERS");
    } else {
      detail = "restarted server did not serve the profile";
    }
  }
  report("replay_determinism", same && restart_ok,
         fmt("20-event online vs replay %s; kill -9 restart: %s", same ? "bit-identical" : "DIFFERS",
             detail.c_str()));
}

void protocol_determinism() {
  const auto dir = work_dir("curve");
  bool ok = run_cli("simulate --dim 16 --n 200 --pairs 800 --seed 13 --out-dir " + q(dir)) == 0;
  const std::string base = "curve --embeddings " + q(dir / "corpus.pemb") + " --pairs " + q(dir / "pairs.jsonl") +
                           " --query-file " + q(dir / "query.pemb") + " --repeats 5 --seed 42 --epsilon 1 --steps 3";
  ok = ok && run_cli(base + " --out-json " + q(dir / "a.json") + " --out-csv " + q(dir / "a.csv")) == 0;
  ok = ok && run_cli(base + " --out-json " + q(dir / "b.json") + " --out-csv " + q(dir / "b.csv")) == 0;
  const bool same = ok && slurp(dir / "a.json") == slurp(dir / "b.json") &&
                    slurp(dir / "a.csv") == slurp(dir / "b.csv") && !slurp(dir / "a.json").empty();
  report("protocol_determinism", same, same ? "JSON and CSV reports byte-identical" : "reports differ or run failed");
}

void win_rate_fixture() {
  std::vector<std::pair<std::string, std::string>> votes;
  for (int i = 0; i < 4; ++i) votes.push_back({"o" + std::to_string(i), "original"});
  for (int i = 0; i < 4; ++i) votes.push_back({"p" + std::to_string(i), "positive"});
  for (int i = 0; i < 7; ++i) votes.push_back({"b" + std::to_string(i), "bt"});
  const auto w = win_rate(votes);
  const bool ok = std::abs(w[0].second - 0.2667) <= 1e-4 && std::abs(w[1].second - 0.2667) <= 1e-4 &&
                  std::abs(w[2].second - 0.4667) <= 1e-4;
  report("win_rate", ok, fmt("%.4f / %.4f / %.4f", w[0].second, w[1].second, w[2].second));
}

void guarded(const char* name, const std::function<void()>& f) {
  try {
    f();
  } catch (const std::exception& e) {
    report(name, false, std::string("threw: ") + e.what());
  }
}

}  // namespace

int main() {
  guarded("gradient_exactness", gradient_exactness);
  guarded("worked_example_d2", worked_example);
  guarded("margin_identity", margin_identity);
  guarded("variant_ordering", variant_ordering);
  guarded("size_zero_equality", size_zero_equality);
  guarded("bt_probability", bt_properties);
  guarded("pemb_round_trip", pemb_round_trip);
  guarded("replay_determinism", replay_determinism);
  guarded("protocol_determinism", protocol_determinism);
  guarded("win_rate", win_rate_fixture);
  std::printf("%d failure(s)\n", g_failures);
  return g_failures == 0 ? 0 : 1;
}
