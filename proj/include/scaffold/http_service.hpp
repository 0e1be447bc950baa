#pragma once

// HTTP routes over service::Service. Every error response uses the envelope
// {"code", "message", "detail"}.

#include <memory>
#include <string>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "scaffold/service.hpp"
#include "scaffold/text.hpp"

namespace scaffold::service {

namespace http_detail {

inline void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

inline void send_error(httplib::Response& res, int status, const std::string& code, const std::string& message,
                       json detail = nullptr) {
  send_json(res, status, {{"code", code}, {"message", message}, {"detail", std::move(detail)}});
}

inline json parse_body(const httplib::Request& req) {
  try {
    return json::parse(req.body);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("request body is not valid JSON: ") + e.what(), e.byte);
  }
}

template <class T>
T field(const json& body, const char* name) {
  if (!body.contains(name)) throw ValidationError(name, "is required");
  try {
    return body.at(name).get<T>();
  } catch (const json::exception&) {
    throw ValidationError(name, "has the wrong type");
  }
}

inline std::vector<double> parse_bpm_list(const std::string& s) {
  std::vector<double> out;
  for (const auto& part : text::split(s, ',')) {
    if (part.empty()) continue;
    auto v = text::parse_double(part);
    if (!v) throw ValidationError("bpms", "'" + std::string(part) + "' is not a number");
    out.push_back(*v);
  }
  return out;
}

inline bool is_midi(const httplib::Request& req) {
  const auto type = req.get_header_value("Content-Type");
  return type.rfind("audio/midi", 0) == 0 || type.rfind("audio/x-midi", 0) == 0 ||
         type.rfind("application/octet-stream", 0) == 0;
}

/// Runs `fn`, translating library exceptions into error envelopes.
template <class F>
void guarded(httplib::Response& res, F&& fn) {
  try {
    fn();
  } catch (const NotFoundError& e) {
    send_error(res, 404, "not_found", e.what());
  } catch (const ConflictError& e) {
    send_error(res, 409, e.code(), e.what());
  } catch (const ValidationError& e) {
    send_error(res, 400, "invalid_request", e.what(), {{"field", e.field()}});
  } catch (const ParseError& e) {
    send_error(res, 400, "parse_error", e.what(), {{"offset", e.offset()}});
  } catch (const EmptyPerformanceError& e) {
    send_error(res, 400, "empty_performance", e.what());
  } catch (const DataError& e) {
    send_error(res, 422, "data_error", e.what());
  } catch (const NumericalError& e) {
    send_error(res, 500, "numerical_error", e.what());
  } catch (const std::exception& e) {
    send_error(res, 500, "internal_error", e.what());
  }
}

}  // namespace http_detail

/// Registers the API on `server`. `svc` must outlive the server.
inline void install_routes(httplib::Server& server, Service& svc) {
  using namespace http_detail;

  server.Get("/api/health", [&svc](const httplib::Request&, httplib::Response& res) {
    const auto active = svc.models().active();
    send_json(res, 200, {{"status", "ok"}, {"active_model", active ? json(active->model_id) : json(nullptr)}});
  });

  server.Post("/api/sessions", [&svc](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const json body = parse_body(req);
      const auto info = svc.create_session(field<std::string>(body, "learner_id"), field<std::string>(body, "piece_id"),
                                           field<double>(body, "bpm"));
      send_json(res, 201, to_json(info));
    });
  });

  server.Get("/api/sessions", [&svc](const httplib::Request&, httplib::Response& res) {
    guarded(res, [&] {
      json out = json::array();
      for (const auto& info : svc.sessions().list()) out.push_back(to_json(info));
      send_json(res, 200, {{"sessions", std::move(out)}});
    });
  });

  server.Get(R"(/api/sessions/([A-Za-z0-9_-]+))", [&svc](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const std::string id = req.matches[1];
      const auto info = svc.sessions().info(id);
      const auto st = svc.sessions().state(id);
      json events = json::array(), tuples = json::array();
      for (const auto& e : svc.sessions().events(id)) events.push_back(to_json(e));
      for (const auto& t : st.tuples) tuples.push_back(tuple_json(t));
      json out = to_json(info);
      out["phase"] = st.phase();
      out["pre"] = st.pre ? json{{"pitch_error", st.pre->first}, {"timing_error", st.pre->second}} : json(nullptr);
      out["events"] = std::move(events);
      out["tuples"] = std::move(tuples);
      send_json(res, 200, out);
    });
  });

  server.Post(R"(/api/sessions/([A-Za-z0-9_-]+)/performances)",
              [&svc](const httplib::Request& req, httplib::Response& res) {
                guarded(res, [&] {
                  const std::string id = req.matches[1];
                  PerformanceResult r;
                  if (is_midi(req)) {
                    auto phase = parse_phase(req.get_param_value("phase"));
                    if (!phase) throw ValidationError("phase", "query parameter must be PRE or POST");
                    const auto* bytes = reinterpret_cast<const std::uint8_t*>(req.body.data());
                    r = svc.submit_performance(id, *phase, std::span<const std::uint8_t>(bytes, req.body.size()));
                  } else {
                    const json body = parse_body(req);
                    auto phase = parse_phase(field<std::string>(body, "phase"));
                    if (!phase) throw ValidationError("phase", "must be PRE or POST");
                    r = svc.submit_performance(id, *phase, field<double>(body, "pitch_error"),
                                               field<double>(body, "timing_error"));
                  }
                  json out{{"pitch_error", r.pitch_error}, {"timing_error", r.timing_error}};
                  if (r.no_matched_notes) out["no_matched_notes"] = true;
                  out["tuple"] = r.appended ? tuple_json(*r.appended) : json(nullptr);
                  send_json(res, 200, out);
                });
              });

  server.Post(R"(/api/sessions/([A-Za-z0-9_-]+)/practice)", [&svc](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const json body = parse_body(req);
      if (!body.contains("pm")) throw ValidationError("pm", "is required");
      auto pm = parse_mode(body.at("pm"));
      if (!pm) throw ValidationError("pm", "must be PITCH or TIMING");
      svc.record_practice(req.matches[1], *pm, field<double>(body, "bpm"));
      send_json(res, 200, {{"pm", to_string(*pm)}, {"bpm", body.at("bpm")}});
    });
  });

  server.Get(R"(/api/sessions/([A-Za-z0-9_-]+)/recommendation)",
             [&svc](const httplib::Request& req, httplib::Response& res) {
               guarded(res, [&] {
                 std::vector<double> bpms;
                 if (req.has_param("bpms")) bpms = parse_bpm_list(req.get_param_value("bpms"));
                 send_json(res, 200, to_json(svc.recommendation(req.matches[1], bpms)));
               });
             });

  server.Post("/api/train", [&svc](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const json body = req.body.empty() ? json::object() : parse_body(req);
      TrainRequest tr;
      tr.dataset_ref = body.value("dataset", std::string("recorded"));
      tr.family = svc.config().default_family;
      if (body.contains("family")) {
        auto fam = gp::parse_family(field<std::string>(body, "family"));
        if (!fam) throw ValidationError("family", "must be RBF, RATQUAD or MATERN52");
        tr.family = *fam;
      }
      if (body.contains("budget")) tr.budget = field<int>(body, "budget");
      if (body.contains("seed")) tr.seed = field<std::uint64_t>(body, "seed");
      const auto id = svc.start_training(tr);
      send_json(res, 202, to_json(svc.job(id)));
    });
  });

  server.Get(R"(/api/jobs/([A-Za-z0-9_-]+))", [&svc](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { send_json(res, 200, to_json(svc.job(req.matches[1]))); });
  });

  server.Get("/api/policy-map", [&svc](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      if (!req.has_param("bpm")) throw ValidationError("bpm", "query parameter is required");
      auto bpm = text::parse_double(req.get_param_value("bpm"));
      if (!bpm) throw ValidationError("bpm", "is not a number");
      int resolution = 41;
      if (req.has_param("resolution")) {
        auto r = text::parse_int(req.get_param_value("resolution"));
        if (!r || *r > 501) throw ValidationError("resolution", "must be an integer in [2, 501]");
        resolution = static_cast<int>(*r);
      }
      res.status = 200;
      res.set_content(svc.policy_map_csv(*bpm, resolution), "text/csv");
    });
  });

  server.Get("/api/models", [&svc](const httplib::Request&, httplib::Response& res) {
    guarded(res, [&] {
      const auto active = svc.models().active();
      json models = json::array();
      for (const auto& id : svc.models().list()) models.push_back(id);
      json out{{"active", active ? json(active->model_id) : json(nullptr)}, {"models", std::move(models)}};
      if (active) out["params"] = {{"a", active->model.params.a}, {"u_mu", active->model.params.u_mu}};
      send_json(res, 200, out);
    });
  });

  server.set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (res.body.empty()) send_error(res, res.status, res.status == 404 ? "not_found" : "http_error", "no such route");
  });
}

}  // namespace scaffold::service
