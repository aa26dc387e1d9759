#pragma once

// JSON-over-HTTP front for ProfileStore.
//
//   POST /profiles               {base_id | base_vector, config?, profile_id?} -> 201 {profile_id}
//   GET  /profiles/{id}          -> 200 summary
//   POST /profiles/{id}/events   {winner_id, loser_id} -> 200 {seq, drift_cosine}
//   POST /profiles/{id}/rank     {candidate_ids?, k} -> 200 {ranking: [{id, score}]}
//   GET  /healthz                -> 200
//
// Errors are {error_code, message, details}.

#include <cstdlib>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "prefadapt/errors.hpp"
#include "prefadapt/service.hpp"

namespace prefadapt {

inline int http_status_for(const Error& e) {
  const auto& code = e.code();
  if (code == "not_found") return 404;
  if (code == "conflict") return 409;
  if (code == "domain_error" || code == "validation_error") return 422;
  if (code == "format_error") return 400;
  return 500;
}

namespace detail {

inline void send_json(httplib::Response& res, int status, const nlohmann::ordered_json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

inline void send_error(httplib::Response& res, int status, const std::string& code,
                       const std::string& message, nlohmann::ordered_json details = nlohmann::ordered_json::object()) {
  send_json(res, status, {{"error_code", code}, {"message", message}, {"details", std::move(details)}});
}

inline nlohmann::json parse_body(const httplib::Request& req) {
  try {
    auto j = nlohmann::json::parse(req.body.empty() ? std::string("{}") : req.body);
    if (!j.is_object()) throw FormatError("request body must be a JSON object");
    return j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed JSON body: ") + e.what());
  }
}

template <typename T>
T field(const nlohmann::json& body, const char* name) {
  if (!body.contains(name)) throw ValidationError(std::string("missing field '") + name + "'");
  try {
    return body.at(name).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ValidationError(std::string("field '") + name + "' has the wrong type");
  }
}

template <typename Handler>
httplib::Server::Handler guarded(Handler handler) {
  return [handler](const httplib::Request& req, httplib::Response& res) {
    try {
      handler(req, res);
    } catch (const NotFoundError& e) {
      send_error(res, 404, e.code(), e.what(), {{"missing", e.missing()}});
    } catch (const Error& e) {
      send_error(res, http_status_for(e), e.code(), e.what());
    } catch (const std::exception& e) {
      send_error(res, 500, "internal_error", e.what());
    }
  };
}

inline nlohmann::ordered_json summary_to_json(const ProfileSummary& s) {
  return {{"profile_id", s.profile_id},
          {"d", s.dim},
          {"seq", s.seq},
          {"current", s.current},
          {"drift_cosine", s.drift_cosine},
          {"config", config_to_json(s.config)},
          {"created_ms", s.created_ms},
          {"updated_ms", s.updated_ms}};
}

}  // namespace detail

inline void mount_routes(httplib::Server& server, ProfileStore& store) {
  using detail::guarded;

  server.Get("/healthz", guarded([&store](const httplib::Request&, httplib::Response& res) {
    detail::send_json(res, 200, {{"status", "ok"},
                                 {"corpus_size", store.table().size()},
                                 {"d", store.table().dim()}});
  }));

  server.Post("/profiles", guarded([&store](const httplib::Request& req, httplib::Response& res) {
    const auto body = detail::parse_body(req);
    const bool has_id = body.contains("base_id");
    const bool has_vec = body.contains("base_vector");
    if (has_id == has_vec) throw ValidationError("exactly one of 'base_id' or 'base_vector' is required");
    BaseRef base = has_id ? BaseRef{detail::field<std::string>(body, "base_id")}
                          : BaseRef{detail::field<std::vector<double>>(body, "base_vector")};
    std::optional<AdaptConfig> cfg;
    if (body.contains("config")) cfg = detail::config_from_json(body["config"], store.options().default_config);
    std::optional<std::string> id;
    if (body.contains("profile_id")) id = detail::field<std::string>(body, "profile_id");
    const auto created = store.create_profile(base, cfg, id);
    detail::send_json(res, 201, {{"profile_id", created}});
  }));

  server.Get("/profiles/:id", guarded([&store](const httplib::Request& req, httplib::Response& res) {
    detail::send_json(res, 200, detail::summary_to_json(store.get_profile(req.path_params.at("id"))));
  }));

  server.Post("/profiles/:id/events", guarded([&store](const httplib::Request& req, httplib::Response& res) {
    const auto body = detail::parse_body(req);
    const auto ack = store.record_preference(req.path_params.at("id"),
                                             detail::field<std::string>(body, "winner_id"),
                                             detail::field<std::string>(body, "loser_id"));
    detail::send_json(res, 200, {{"seq", ack.seq}, {"drift_cosine", ack.drift_cosine}});
  }));

  server.Post("/profiles/:id/rank", guarded([&store](const httplib::Request& req, httplib::Response& res) {
    const auto body = detail::parse_body(req);
    const auto k = detail::field<long long>(body, "k");
    if (k < 1) throw ValidationError("k must be >= 1");
    std::optional<std::vector<std::string>> candidates;
    if (body.contains("candidate_ids") && !body["candidate_ids"].is_null()) {
      candidates = detail::field<std::vector<std::string>>(body, "candidate_ids");
    }
    const auto ranking = store.rank(req.path_params.at("id"), candidates, static_cast<std::size_t>(k));
    nlohmann::ordered_json out = nlohmann::ordered_json::array();
    for (const auto& r : ranking) out.push_back({{"id", r.id}, {"score", r.score}});
    detail::send_json(res, 200, {{"ranking", std::move(out)}});
  }));
}

// Service configuration. Precedence, lowest to highest: defaults, JSON config
// file, PREFADAPT_* environment variables, then explicit CLI flags.
struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string embeddings_path;
  std::string meta_path;
  std::string data_dir = "prefadapt-data";
  AdaptConfig adapt;
  std::uint64_t snapshot_every = 16;
  bool compact_log = false;

  void set_listen(const std::string& listen) {
    const auto colon = listen.rfind(':');
    if (colon == std::string::npos) throw ValidationError("listen address must be host:port, got '" + listen + "'");
    host = listen.substr(0, colon);
    try {
      std::size_t used = 0;
      port = std::stoi(listen.substr(colon + 1), &used);
      if (used != listen.size() - colon - 1 || port < 0 || port > 65535) throw std::out_of_range("port");
    } catch (const std::exception&) {
      throw ValidationError("bad port in listen address '" + listen + "'");
    }
  }

  void apply_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ValidationError("service config must be a JSON object");
    try {
      if (j.contains("listen")) set_listen(j["listen"].get<std::string>());
      if (j.contains("embeddings")) embeddings_path = j["embeddings"].get<std::string>();
      if (j.contains("meta")) meta_path = j["meta"].get<std::string>();
      if (j.contains("data_dir")) data_dir = j["data_dir"].get<std::string>();
      if (j.contains("snapshot_every")) snapshot_every = j["snapshot_every"].get<std::uint64_t>();
      if (j.contains("compact_log")) compact_log = j["compact_log"].get<bool>();
      if (j.contains("adapt")) adapt = detail::config_from_json(j["adapt"], adapt);
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(std::string("bad service config: ") + e.what());
    }
  }

  void apply_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file '" + path + "'");
    try {
      apply_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::parse_error& e) {
      throw ValidationError("config file '" + path + "' is not valid JSON: " + e.what());
    }
  }

  // Reads PREFADAPT_LISTEN, _EMBEDDINGS, _META, _DATA_DIR, _EPSILON, _STEPS,
  // _TEMPERATURE, _RENORMALIZE, _SNAPSHOT_EVERY, _COMPACT_LOG.
  template <typename Getenv>
  void apply_env(Getenv getenv_fn) {
    auto get = [&](const char* name) -> std::optional<std::string> {
      const char* v = getenv_fn(name);
      if (!v) return std::nullopt;
      return std::string(v);
    };
    auto to_bool = [](const std::string& s) {
      if (s == "1" || s == "true") return true;
      if (s == "0" || s == "false") return false;
      throw ValidationError("expected a boolean, got '" + s + "'");
    };
    try {
      if (auto v = get("PREFADAPT_LISTEN")) set_listen(*v);
      if (auto v = get("PREFADAPT_EMBEDDINGS")) embeddings_path = *v;
      if (auto v = get("PREFADAPT_META")) meta_path = *v;
      if (auto v = get("PREFADAPT_DATA_DIR")) data_dir = *v;
      if (auto v = get("PREFADAPT_EPSILON")) adapt.epsilon = std::stod(*v);
      if (auto v = get("PREFADAPT_STEPS")) adapt.steps = std::stoi(*v);
      if (auto v = get("PREFADAPT_TEMPERATURE")) adapt.temperature = std::stod(*v);
      if (auto v = get("PREFADAPT_RENORMALIZE")) adapt.renormalize = to_bool(*v);
      if (auto v = get("PREFADAPT_SNAPSHOT_EVERY")) snapshot_every = std::stoull(*v);
      if (auto v = get("PREFADAPT_COMPACT_LOG")) compact_log = to_bool(*v);
    } catch (const std::invalid_argument&) {
      throw ValidationError("unparsable PREFADAPT_* environment value");
    } catch (const std::out_of_range&) {
      throw ValidationError("out-of-range PREFADAPT_* environment value");
    }
    adapt.validate();
  }

  void apply_env() { apply_env([](const char* n) { return std::getenv(n); }); }
};

}  // namespace prefadapt
