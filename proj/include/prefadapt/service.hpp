#pragma once

// Per-user preference profiles. Each profile is a base embedding, its adapted
// current embedding, and the ordered log of preference events that produced
// it; current is always exactly replay(base, log). Profiles are persisted as
//
//   <data_dir>/<profile_id>/profile.json        base vector + config
//   <data_dir>/<profile_id>/events.jsonl        append-only event log
//   <data_dir>/<profile_id>/snapshot.json       exact checkpoint {seq, current}
//   <data_dir>/<profile_id>/snapshot.pemb       float32 copy of the checkpoint
//   <data_dir>/<profile_id>/snapshot.meta.jsonl
//
// Writes to one profile are serialized; different profiles proceed in parallel.

#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <json.hpp>

#include "prefadapt/dataio.hpp"
#include "prefadapt/embedding.hpp"
#include "prefadapt/errors.hpp"
#include "prefadapt/prefcore.hpp"

namespace prefadapt {

struct PreferenceEvent {
  std::uint64_t seq = 0;
  std::string winner_id;
  std::string loser_id;
  std::int64_t timestamp_ms = 0;
};

struct Checkpoint {
  std::uint64_t seq = 0;
  Embedding current;
};

struct ProfileSummary {
  std::string profile_id;
  std::size_t dim = 0;
  std::uint64_t seq = 0;  // events applied so far
  std::vector<double> current;
  double drift_cosine = 1.0;
  AdaptConfig config;
  std::int64_t created_ms = 0;
  std::int64_t updated_ms = 0;
};

struct EventAck {
  std::uint64_t seq = 0;
  double drift_cosine = 1.0;
  std::vector<double> current;
};

using BaseRef = std::variant<std::string, std::vector<double>>;

struct StoreOptions {
  std::optional<std::filesystem::path> data_dir;
  AdaptConfig default_config;
  std::uint64_t snapshot_every = 16;  // 0 disables periodic snapshots
  bool compact_log = false;           // drop log entries covered by a snapshot
};

inline std::int64_t now_ms() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(
             std::chrono::system_clock::now().time_since_epoch())
      .count();
}

inline void validate_profile_id(const std::string& id) {
  const bool ok = !id.empty() && id.size() <= 128 && id.front() != '.' &&
                  std::all_of(id.begin(), id.end(), [](char c) {
                    return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') ||
                           (c >= '0' && c <= '9') || c == '-' || c == '_' || c == '.';
                  });
  if (!ok) throw ValidationError("invalid profile id '" + id + "'");
}

// Folds one adapt() per event over the log, starting from `start` whose seq
// is `start_seq`. Events must continue the sequence without gaps.
inline Embedding replay_from(const EmbeddingTable& table, Embedding start, std::uint64_t start_seq,
                             std::span<const PreferenceEvent> events, const AdaptConfig& cfg) {
  Embedding current = std::move(start);
  std::uint64_t expected = start_seq + 1;
  for (const auto& e : events) {
    if (e.seq != expected) {
      throw IntegrityError("event log out of order: expected seq " + std::to_string(expected) +
                           ", found " + std::to_string(e.seq));
    }
    const PreferencePair pair{table.at(e.winner_id).values(), table.at(e.loser_id).values()};
    current = adapt(current, std::span(&pair, 1), cfg).embedding;
    ++expected;
  }
  return current;
}

inline Embedding replay(const EmbeddingTable& table, const Embedding& base,
                        std::span<const PreferenceEvent> events, const AdaptConfig& cfg) {
  return replay_from(table, normalize(base.values()), 0, events, cfg);
}

namespace detail {

inline nlohmann::ordered_json config_to_json(const AdaptConfig& c) {
  return {{"epsilon", c.epsilon},
          {"steps", c.steps},
          {"temperature", c.temperature},
          {"renormalize", c.renormalize}};
}

// Missing fields fall back to `defaults`.
inline AdaptConfig config_from_json(const nlohmann::json& j, const AdaptConfig& defaults) {
  if (!j.is_object()) throw ValidationError("config must be an object");
  AdaptConfig c = defaults;
  try {
    if (j.contains("epsilon")) c.epsilon = j["epsilon"].get<double>();
    if (j.contains("steps")) c.steps = j["steps"].get<int>();
    if (j.contains("temperature")) c.temperature = j["temperature"].get<double>();
    if (j.contains("renormalize")) c.renormalize = j["renormalize"].get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("bad config field: ") + e.what());
  }
  c.validate();
  return c;
}

inline nlohmann::ordered_json event_to_json(const PreferenceEvent& e) {
  return {{"seq", e.seq},
          {"winner_id", e.winner_id},
          {"loser_id", e.loser_id},
          {"timestamp_ms", e.timestamp_ms}};
}

inline void write_atomically(const std::filesystem::path& path, const std::string& bytes) {
  auto tmp = path;
  tmp += ".tmp";
  write_file(tmp.string(), bytes);
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename '" + tmp.string() + "': " + ec.message());
}

// Appends one line and fsyncs before returning.
inline void append_durably(const std::filesystem::path& path, const std::string& line) {
  std::FILE* f = std::fopen(path.c_str(), "ab");
  if (!f) throw IoError("cannot open '" + path.string() + "' for append");
  const bool ok = std::fwrite(line.data(), 1, line.size(), f) == line.size() &&
                  std::fflush(f) == 0 && ::fsync(::fileno(f)) == 0;
  std::fclose(f);
  if (!ok) throw IoError("append failure on '" + path.string() + "'");
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  const auto bytes = read_file(path.string());
  try {
    return nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

// A torn final line (no trailing newline, unparsable) was never acknowledged
// and is discarded; anything else malformed is an integrity failure.
inline std::vector<PreferenceEvent> read_event_log(const std::filesystem::path& path) {
  std::vector<PreferenceEvent> events;
  if (!std::filesystem::exists(path)) return events;
  const auto bytes = read_file(path.string());
  std::size_t pos = 0;
  std::size_t line_no = 0;
  while (pos < bytes.size()) {
    ++line_no;
    const auto nl = std::find(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.end(),
                              static_cast<unsigned char>('\n'));
    const std::size_t end = static_cast<std::size_t>(nl - bytes.begin());
    const bool terminated = nl != bytes.end();
    std::string line(bytes.begin() + static_cast<std::ptrdiff_t>(pos), nl);
    pos = terminated ? end + 1 : end;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      events.push_back({j.at("seq").get<std::uint64_t>(), j.at("winner_id").get<std::string>(),
                        j.at("loser_id").get<std::string>(), j.at("timestamp_ms").get<std::int64_t>()});
    } catch (const nlohmann::json::exception& e) {
      if (!terminated) break;
      throw IntegrityError(line_context(path.string(), line_no) + ": bad event record: " + e.what());
    }
  }
  return events;
}

}  // namespace detail

class ProfileStore {
 public:
  // Opens (and recovers) every profile found under options.data_dir.
  ProfileStore(TablePtr table, StoreOptions options)
      : table_(std::move(table)), options_(std::move(options)) {
    if (!table_) throw ValidationError("profile store needs a corpus table");
    options_.default_config.validate();
    if (options_.data_dir) {
      std::error_code ec;
      std::filesystem::create_directories(*options_.data_dir, ec);
      if (ec) throw IoError("cannot create data dir '" + options_.data_dir->string() + "': " + ec.message());
      recover_all();
    }
  }

  const EmbeddingTable& table() const noexcept { return *table_; }
  const StoreOptions& options() const noexcept { return options_; }

  std::string create_profile(const BaseRef& base_ref, std::optional<AdaptConfig> cfg = std::nullopt,
                             std::optional<std::string> profile_id = std::nullopt) {
    const AdaptConfig config = cfg.value_or(options_.default_config);
    config.validate();
    Embedding base = resolve_base(base_ref);
    Embedding current = normalize(base.values());

    std::unique_lock lock(map_mutex_);
    std::string id;
    if (profile_id) {
      validate_profile_id(*profile_id);
      if (profiles_.contains(*profile_id)) throw ConflictError("profile '" + *profile_id + "' already exists");
      id = *profile_id;
    } else {
      do {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "p-%06llu", static_cast<unsigned long long>(++id_counter_));
        id = buf;
      } while (profiles_.contains(id));
    }
    auto slot = std::make_unique<Slot>(Profile{id, std::move(base), std::move(current), {}, config,
                                               now_ms(), 0, std::nullopt});
    slot->profile.updated_ms = slot->profile.created_ms;
    if (options_.data_dir) persist_new(slot->profile);
    profiles_.emplace(id, std::move(slot));
    return id;
  }

  EventAck record_preference(const std::string& profile_id, const std::string& winner_id,
                             const std::string& loser_id) {
    Slot& slot = find_slot(profile_id);
    std::vector<std::string> missing;
    for (const auto* id : {&winner_id, &loser_id}) {
      if (!table_->find(*id) && std::find(missing.begin(), missing.end(), *id) == missing.end()) {
        missing.push_back(*id);
      }
    }
    if (!missing.empty()) throw NotFoundError("unknown candidate ids", missing);
    if (winner_id == loser_id) throw ValidationError("self-pair: winner and loser are both '" + winner_id + "'");

    std::lock_guard lock(slot.mutex);
    Profile& p = slot.profile;
    const PreferencePair pair{table_->at(winner_id).values(), table_->at(loser_id).values()};
    Embedding next = adapt(p.current, std::span(&pair, 1), p.config).embedding;
    PreferenceEvent event{last_seq(p) + 1, winner_id, loser_id, now_ms()};
    if (options_.data_dir) {
      detail::append_durably(profile_dir(p.id) / "events.jsonl", detail::event_to_json(event).dump() + "\n");
    }
    p.current = std::move(next);
    p.updated_ms = event.timestamp_ms;
    p.log.push_back(std::move(event));
    if (options_.data_dir && options_.snapshot_every > 0 && last_seq(p) % options_.snapshot_every == 0) {
      write_snapshot(p);
    }
    return {last_seq(p), drift(p), std::vector<double>(p.current.values().begin(), p.current.values().end())};
  }

  ProfileSummary get_profile(const std::string& profile_id) const {
    const Slot& slot = find_slot(profile_id);
    std::lock_guard lock(slot.mutex);
    const Profile& p = slot.profile;
    return {p.id,
            p.current.dim(),
            last_seq(p),
            std::vector<double>(p.current.values().begin(), p.current.values().end()),
            drift(p),
            p.config,
            p.created_ms,
            p.updated_ms};
  }

  // Top-k of the given candidates (whole corpus when absent) under the
  // profile's current embedding.
  std::vector<ScoredId> rank(const std::string& profile_id,
                             const std::optional<std::vector<std::string>>& candidate_ids,
                             std::size_t k) const {
    if (k < 1) throw ValidationError("k must be >= 1");
    std::vector<Candidate> candidates;
    if (candidate_ids) {
      std::vector<std::string> missing;
      for (const auto& id : *candidate_ids) {
        if (!table_->find(id)) missing.push_back(id);
      }
      if (!missing.empty()) throw NotFoundError("unknown candidate ids", missing);
      for (const auto& id : *candidate_ids) candidates.push_back({id, table_->at(id).values()});
    } else {
      for (std::size_t r = 0; r < table_->size(); ++r) {
        candidates.push_back({table_->id(r), table_->row(r).values()});
      }
    }
    const auto current = get_profile(profile_id).current;
    auto ranking = rank_candidates(current, candidates);
    if (ranking.size() > k) ranking.resize(k);
    return ranking;
  }

  std::vector<PreferenceEvent> event_log(const std::string& profile_id) const {
    const Slot& slot = find_slot(profile_id);
    std::lock_guard lock(slot.mutex);
    return slot.profile.log;
  }

  Embedding base(const std::string& profile_id) const {
    const Slot& slot = find_slot(profile_id);
    std::lock_guard lock(slot.mutex);
    return slot.profile.base;
  }

  // Recomputes current from the persisted inputs and compares bit for bit.
  bool verify(const std::string& profile_id) const {
    const Slot& slot = find_slot(profile_id);
    std::lock_guard lock(slot.mutex);
    return rebuild(slot.profile) == slot.profile.current;
  }

  // Writes a snapshot and, with compact_log, drops the events it covers.
  void checkpoint(const std::string& profile_id) {
    Slot& slot = find_slot(profile_id);
    std::lock_guard lock(slot.mutex);
    if (options_.data_dir) write_snapshot(slot.profile);
  }

  std::vector<std::string> profile_ids() const {
    std::shared_lock lock(map_mutex_);
    std::vector<std::string> ids;
    for (const auto& [id, slot] : profiles_) ids.push_back(id);
    return ids;
  }

 private:
  struct Profile {
    std::string id;
    Embedding base;
    Embedding current;
    std::vector<PreferenceEvent> log;  // events after `checkpoint` (all events when none)
    AdaptConfig config;
    std::int64_t created_ms = 0;
    std::int64_t updated_ms = 0;
    std::optional<Checkpoint> checkpoint;
  };

  struct Slot {
    explicit Slot(Profile p) : profile(std::move(p)) {}
    mutable std::mutex mutex;
    Profile profile;
  };

  static std::uint64_t last_seq(const Profile& p) {
    if (!p.log.empty()) return p.log.back().seq;
    return p.checkpoint ? p.checkpoint->seq : 0;
  }

  // cosine(current, base); exactly 1 while current is still the normalized base.
  static double drift(const Profile& p) {
    if (p.log.empty() && !p.checkpoint) return 1.0;
    return cosine(p.current.values(), p.base.values());
  }

  Embedding rebuild(const Profile& p) const {
    if (p.checkpoint && (p.log.empty() || p.log.front().seq > 1)) {
      return replay_from(*table_, p.checkpoint->current, p.checkpoint->seq, p.log, p.config);
    }
    return replay(*table_, p.base, p.log, p.config);
  }

  Embedding resolve_base(const BaseRef& ref) const {
    if (const auto* id = std::get_if<std::string>(&ref)) {
      return table_->at(*id);
    }
    const auto& v = std::get<std::vector<double>>(ref);
    if (v.size() != table_->dim()) {
      throw DomainError("base vector has dimension " + std::to_string(v.size()) + ", corpus has " +
                        std::to_string(table_->dim()));
    }
    Embedding e(v);
    if (!(e.norm() > 0.0)) throw DomainError("zero norm base vector");
    return e;
  }

  Slot& find_slot(const std::string& id) const {
    std::shared_lock lock(map_mutex_);
    auto it = profiles_.find(id);
    if (it == profiles_.end()) throw NotFoundError("unknown profile '" + id + "'", {id});
    return *it->second;
  }

  std::filesystem::path profile_dir(const std::string& id) const { return *options_.data_dir / id; }

  void persist_new(const Profile& p) const {
    const auto dir = profile_dir(p.id);
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
    nlohmann::ordered_json j;
    j["profile_id"] = p.id;
    j["base"] = std::vector<double>(p.base.values().begin(), p.base.values().end());
    j["config"] = detail::config_to_json(p.config);
    j["created_ms"] = p.created_ms;
    detail::write_atomically(dir / "profile.json", j.dump() + "\n");
    detail::write_file((dir / "events.jsonl").string(), "");
  }

  void write_snapshot(Profile& p) const {
    const auto dir = profile_dir(p.id);
    const std::uint64_t seq = last_seq(p);
    nlohmann::ordered_json j;
    j["seq"] = seq;
    j["current"] = std::vector<double>(p.current.values().begin(), p.current.values().end());
    EmbeddingTable single(p.current.dim());
    single.add(p.id, p.current);
    detail::write_atomically(dir / "snapshot.pemb", encode_pemb(single));
    detail::write_atomically(dir / "snapshot.meta.jsonl", encode_meta(single));
    detail::write_atomically(dir / "snapshot.json", j.dump() + "\n");
    p.checkpoint = Checkpoint{seq, p.current};
    if (options_.compact_log) {
      p.log.clear();
      detail::write_atomically(dir / "events.jsonl", "");
    }
  }

  void recover_all() {
    for (const auto& entry : std::filesystem::directory_iterator(*options_.data_dir)) {
      if (!entry.is_directory() || !std::filesystem::exists(entry.path() / "profile.json")) continue;
      auto profile = recover(entry.path());
      const std::string id = profile.id;
      profiles_.emplace(id, std::make_unique<Slot>(std::move(profile)));
    }
  }

  Profile recover(const std::filesystem::path& dir) const {
    const auto meta = detail::read_json_file(dir / "profile.json");
    std::string id;
    std::vector<double> base_values;
    AdaptConfig cfg;
    std::int64_t created = 0;
    try {
      id = meta.at("profile_id").get<std::string>();
      base_values = meta.at("base").get<std::vector<double>>();
      cfg = detail::config_from_json(meta.at("config"), options_.default_config);
      created = meta.at("created_ms").get<std::int64_t>();
    } catch (const nlohmann::json::exception& e) {
      throw IntegrityError(dir.string() + "/profile.json: " + e.what());
    }
    if (base_values.size() != table_->dim()) {
      throw IntegrityError("profile '" + id + "' dimension does not match the corpus");
    }
    Embedding base(std::move(base_values));
    Profile p{id, base, normalize(base.values()), detail::read_event_log(dir / "events.jsonl"), cfg,
              created, created, std::nullopt};

    if (std::filesystem::exists(dir / "snapshot.json")) {
      const auto snap = detail::read_json_file(dir / "snapshot.json");
      try {
        p.checkpoint = Checkpoint{snap.at("seq").get<std::uint64_t>(),
                                  Embedding(snap.at("current").get<std::vector<double>>())};
      } catch (const nlohmann::json::exception& e) {
        throw IntegrityError(dir.string() + "/snapshot.json: " + e.what());
      }
      check_float_snapshot(dir, *p.checkpoint);
    }

    p.current = rebuild(p);
    if (p.checkpoint && !p.log.empty() && p.log.front().seq == 1) {
      // Full log present: the checkpoint must lie on the replayed trajectory.
      if (p.checkpoint->seq > p.log.back().seq) {
        throw IntegrityError("profile '" + id + "' snapshot is ahead of its event log");
      }
      const auto upto = std::span(p.log).first(p.checkpoint->seq);
      if (replay(*table_, p.base, upto, p.config) != p.checkpoint->current) {
        throw IntegrityError("profile '" + id + "' snapshot disagrees with its event log");
      }
    }
    if (!p.log.empty()) p.updated_ms = p.log.back().timestamp_ms;
    return p;
  }

  static void check_float_snapshot(const std::filesystem::path& dir, const Checkpoint& cp) {
    if (!std::filesystem::exists(dir / "snapshot.pemb")) return;
    const auto m = decode_pemb(detail::read_file((dir / "snapshot.pemb").string()),
                               (dir / "snapshot.pemb").string());
    bool same = m.rows == 1 && m.dim == cp.current.dim();
    for (std::size_t i = 0; same && i < m.dim; ++i) {
      same = m.values[i] == static_cast<float>(cp.current[i]);
    }
    if (!same) throw IntegrityError(dir.string() + ": snapshot.pemb does not match snapshot.json");
  }

  TablePtr table_;
  StoreOptions options_;
  mutable std::shared_mutex map_mutex_;
  std::map<std::string, std::unique_ptr<Slot>> profiles_;
  std::uint64_t id_counter_ = 0;
};

}  // namespace prefadapt
