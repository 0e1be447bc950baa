#pragma once

// Practice-loop service core: file-backed sessions, the active scaffold model
// and background training jobs. HTTP routing lives in http_service.hpp.
//
// Layout under the data directory:
//   sessions/<id>.jsonl   one header record, then one event per line
//   scores/<piece>.json   score documents used to evaluate MIDI uploads
//   models/<job>.json     every trained model; models/active names the live one
//   <anything>.csv        datasets addressable by relative path

#include <algorithm>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <shared_mutex>
#include <span>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include <json.hpp>

#include "scaffold/dataset.hpp"
#include "scaffold/errors.hpp"
#include "scaffold/gp.hpp"
#include "scaffold/scaffold_policy.hpp"
#include "scaffold/score_perf.hpp"

namespace scaffold::service {

namespace fs = std::filesystem;
using json = nlohmann::json;

/// Lookups of things that do not exist (sessions, jobs, scores).
class NotFoundError : public Error {
 public:
  using Error::Error;
};

/// Requests that are well-formed but not allowed in the current state.
class ConflictError : public Error {
 public:
  ConflictError(std::string code, const std::string& what) : Error(what), code_(std::move(code)) {}
  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

enum class EventKind { kPrePerf, kPractice, kPostPerf, kRecommendation };

inline const char* to_string(EventKind k) {
  switch (k) {
    case EventKind::kPrePerf: return "PRE_PERF";
    case EventKind::kPractice: return "PRACTICE";
    case EventKind::kPostPerf: return "POST_PERF";
    case EventKind::kRecommendation: return "RECOMMENDATION";
  }
  return "?";
}

inline std::optional<EventKind> parse_event_kind(std::string_view s) {
  for (auto k : {EventKind::kPrePerf, EventKind::kPractice, EventKind::kPostPerf, EventKind::kRecommendation})
    if (s == to_string(k)) return k;
  return std::nullopt;
}

enum class Phase { kPre, kPost };

inline std::optional<Phase> parse_phase(std::string_view s) {
  if (s == "PRE" || s == "pre") return Phase::kPre;
  if (s == "POST" || s == "post") return Phase::kPost;
  return std::nullopt;
}

inline std::optional<PracticeMode> parse_mode(const json& v) {
  if (v.is_number_integer()) {
    const int i = v.get<int>();
    if (i == 0) return PracticeMode::kPitch;
    if (i == 1) return PracticeMode::kTiming;
    return std::nullopt;
  }
  if (v.is_string()) {
    const auto s = v.get<std::string>();
    if (s == "PITCH" || s == "pitch") return PracticeMode::kPitch;
    if (s == "TIMING" || s == "timing") return PracticeMode::kTiming;
  }
  return std::nullopt;
}

struct SessionEvent {
  std::int64_t seq = 0;
  std::int64_t timestamp_ms = 0;  // strictly increasing within a session
  EventKind kind = EventKind::kPrePerf;
  json payload;
};

struct SessionInfo {
  std::string session_id;
  std::string learner_id;
  std::string piece_id;
  double bpm = 0.0;
  std::int64_t created_ms = 0;
};

// ---------------------------------------------------------------------------
// Replay
// ---------------------------------------------------------------------------

/// State derived from a session's event log. A POST closes the open unit and
/// its errors become the PRE of the next unit, matching the protocol where
/// the assessment after one practice unit is the starting point of the next.
struct SessionState {
  std::optional<std::pair<double, double>> pre;  // (pitch, timing)
  std::optional<std::pair<PracticeMode, double>> practice;  // (pm, bpm)
  std::vector<PracticeTuple> tuples;
  std::optional<json> last_recommendation;

  std::string phase() const {
    if (!pre) return "AWAITING_PRE";
    if (!practice) return "AWAITING_PRACTICE";
    return "AWAITING_POST";
  }
};

inline std::pair<double, double> error_pair(const json& payload) {
  return {payload.at("pitch_error").get<double>(), payload.at("timing_error").get<double>()};
}

/// Applies one event; throws ConflictError when the event is out of order.
inline void apply(const SessionInfo& info, SessionState& s, const SessionEvent& e) {
  switch (e.kind) {
    case EventKind::kPrePerf:
      s.pre = error_pair(e.payload);
      s.practice.reset();
      break;
    case EventKind::kPractice: {
      if (!s.pre) throw ConflictError("no_open_unit", "practice recorded before a PRE performance");
      auto pm = parse_mode(e.payload.at("pm"));
      if (!pm) throw ValidationError("pm", "must be PITCH or TIMING");
      s.practice = std::pair{*pm, e.payload.at("bpm").get<double>()};
      break;
    }
    case EventKind::kPostPerf: {
      if (!s.pre) throw ConflictError("no_open_unit", "POST performance with no open practice unit");
      if (!s.practice) throw ConflictError("no_practice", "POST performance before the practice unit was recorded");
      const auto [p_post, t_post] = error_pair(e.payload);
      PracticeTuple t{info.learner_id, info.piece_id, s.pre->first, s.pre->second,
                      s.practice->first, s.practice->second, p_post, t_post};
      validate(t, "session " + info.session_id);
      s.tuples.push_back(std::move(t));
      s.pre = std::pair{p_post, t_post};
      s.practice.reset();
      break;
    }
    case EventKind::kRecommendation:
      s.last_recommendation = e.payload;
      break;
  }
}

inline SessionState replay(const SessionInfo& info, const std::vector<SessionEvent>& events) {
  SessionState s;
  for (const auto& e : events) apply(info, s, e);
  return s;
}

inline json to_json(const SessionEvent& e) {
  return {{"seq", e.seq}, {"timestamp_ms", e.timestamp_ms}, {"kind", to_string(e.kind)}, {"payload", e.payload}};
}

inline json to_json(const SessionInfo& i) {
  return {{"session_id", i.session_id},
          {"learner_id", i.learner_id},
          {"piece_id", i.piece_id},
          {"bpm", i.bpm},
          {"created_ms", i.created_ms}};
}

inline json tuple_json(const PracticeTuple& t) {
  return {{"subject_id", t.subject_id}, {"piece_id", t.piece_id}, {"p_pre", t.p_pre},
          {"t_pre", t.t_pre},           {"pm", static_cast<int>(t.pm)}, {"bpm", t.bpm},
          {"p_post", t.p_post},         {"t_post", t.t_post}};
}

// ---------------------------------------------------------------------------
// Session store
// ---------------------------------------------------------------------------

inline std::int64_t now_ms() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::system_clock::now().time_since_epoch())
      .count();
}

inline bool valid_id(std::string_view id) {
  if (id.empty() || id.size() > 128) return false;
  return std::all_of(id.begin(), id.end(), [](char c) {
    return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '-' || c == '_';
  });
}

class SessionStore {
 public:
  explicit SessionStore(fs::path data_dir) : dir_(std::move(data_dir) / "sessions"), rng_(std::random_device{}()) {
    std::error_code ec;
    fs::create_directories(dir_, ec);
    if (ec) throw DataError("cannot create session directory '" + dir_.string() + "': " + ec.message());
    for (const auto& entry : fs::directory_iterator(dir_)) {
      if (entry.path().extension() != ".jsonl") continue;
      auto s = std::make_shared<Session>();
      load(entry.path(), *s);
      sessions_.emplace(s->info.session_id, std::move(s));
    }
  }

  SessionInfo create(const std::string& learner_id, const std::string& piece_id, double bpm) {
    if (learner_id.empty()) throw ValidationError("learner_id", "must not be empty");
    if (piece_id.empty()) throw ValidationError("piece_id", "must not be empty");
    for (const auto* id : {&learner_id, &piece_id})
      if (id->find_first_of(",\n\r\"") != std::string::npos)
        throw ValidationError(id == &learner_id ? "learner_id" : "piece_id", "must not contain commas, quotes or newlines");
    if (!(bpm > 0.0 && bpm <= 400.0)) throw ValidationError("bpm", "must be in (0, 400]");

    std::unique_lock lock(index_mutex_);
    auto s = std::make_shared<Session>();
    do {
      s->info.session_id = "s-" + hex_id();
    } while (sessions_.count(s->info.session_id));
    s->info.learner_id = learner_id;
    s->info.piece_id = piece_id;
    s->info.bpm = bpm;
    s->info.created_ms = now_ms();
    json header = to_json(s->info);
    header["record"] = "session";
    append_line(path_of(s->info.session_id), header.dump());
    sessions_.emplace(s->info.session_id, s);
    return s->info;
  }

  std::vector<SessionInfo> list() const {
    std::shared_lock lock(index_mutex_);
    std::vector<SessionInfo> out;
    for (const auto& [id, s] : sessions_) out.push_back(s->info);
    std::sort(out.begin(), out.end(), [](const SessionInfo& l, const SessionInfo& r) {
      return l.created_ms != r.created_ms ? l.created_ms < r.created_ms : l.session_id < r.session_id;
    });
    return out;
  }

  SessionInfo info(const std::string& id) const { return get(id)->info; }

  std::vector<SessionEvent> events(const std::string& id) const {
    auto s = get(id);
    std::lock_guard lock(s->mutex);
    return s->events;
  }

  SessionState state(const std::string& id) const {
    auto s = get(id);
    std::lock_guard lock(s->mutex);
    return s->state;
  }

  /// Validates the transition against the replayed state, then appends the
  /// event to the log. Appends to one session are serialized.
  std::pair<SessionEvent, SessionState> append(const std::string& id, EventKind kind, json payload) {
    auto s = get(id);
    std::lock_guard lock(s->mutex);
    SessionEvent e;
    e.seq = s->events.empty() ? 1 : s->events.back().seq + 1;
    e.timestamp_ms = std::max(now_ms(), s->events.empty() ? s->info.created_ms : s->events.back().timestamp_ms + 1);
    e.kind = kind;
    e.payload = std::move(payload);
    SessionState next = s->state;
    try {
      apply(s->info, next, e);
    } catch (const nlohmann::json::exception& ex) {
      throw ValidationError("payload", std::string("malformed event payload: ") + ex.what());
    }
    append_line(path_of(id), to_json(e).dump());
    s->events.push_back(e);
    s->state = std::move(next);
    return {e, s->state};
  }

  /// Union of every session's tuples, sessions in creation order.
  Dataset recorded_dataset() const {
    Dataset d;
    d.provenance = Provenance::kRecorded;
    for (const auto& info : list()) {
      auto st = state(info.session_id);
      d.tuples.insert(d.tuples.end(), st.tuples.begin(), st.tuples.end());
    }
    return d;
  }

  const fs::path& directory() const { return dir_; }

 private:
  struct Session {
    SessionInfo info;
    std::vector<SessionEvent> events;
    SessionState state;
    mutable std::mutex mutex;
  };

  std::shared_ptr<Session> get(const std::string& id) const {
    std::shared_lock lock(index_mutex_);
    auto it = sessions_.find(id);
    if (it == sessions_.end()) throw NotFoundError("unknown session '" + id + "'");
    return it->second;
  }

  fs::path path_of(const std::string& id) const { return dir_ / (id + ".jsonl"); }

  std::string hex_id() {
    static constexpr char kHex[] = "0123456789abcdef";
    std::string s;
    auto v = rng_();
    for (int i = 0; i < 16; ++i, v >>= 4) s += kHex[v & 0xF];
    return s;
  }

  static void append_line(const fs::path& p, const std::string& line) {
    std::ofstream out(p, std::ios::binary | std::ios::app);
    if (!out) throw DataError("cannot open '" + p.string() + "' for append");
    out << line << '\n';
    out.flush();
    if (!out) throw DataError("short write to '" + p.string() + "'");
  }

  static void load(const fs::path& p, Session& s) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw DataError("cannot open '" + p.string() + "'");
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      try {
        const json j = json::parse(line);
        if (lineno == 1) {
          if (j.value("record", "") != "session") throw DataError("missing session header");
          s.info = {j.at("session_id").get<std::string>(), j.at("learner_id").get<std::string>(),
                    j.at("piece_id").get<std::string>(), j.at("bpm").get<double>(), j.at("created_ms").get<std::int64_t>()};
          continue;
        }
        auto kind = parse_event_kind(j.at("kind").get<std::string>());
        if (!kind) throw DataError("unknown event kind");
        s.events.push_back({j.at("seq").get<std::int64_t>(), j.at("timestamp_ms").get<std::int64_t>(), *kind,
                            j.at("payload")});
      } catch (const std::exception& e) {
        // A torn final line from a crash mid-append is dropped; anything else is corruption.
        if (in.peek() == std::char_traits<char>::eof() && lineno > 1) break;
        throw DataError(p.string() + ":" + std::to_string(lineno) + ": " + e.what());
      }
    }
    if (s.info.session_id.empty()) throw DataError(p.string() + ": empty session log");
    s.state = replay(s.info, s.events);
  }

  fs::path dir_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  mutable std::shared_mutex index_mutex_;
  std::mt19937_64 rng_;
};

// ---------------------------------------------------------------------------
// Models
// ---------------------------------------------------------------------------

struct ActiveModel {
  std::string model_id;
  ScaffoldModel model;
};

/// Trained models on disk plus the one currently serving. Readers take a
/// shared_ptr snapshot of the active model.
class ModelRegistry {
 public:
  explicit ModelRegistry(fs::path data_dir) : dir_(std::move(data_dir) / "models") {
    fs::create_directories(dir_);
    const fs::path pointer = dir_ / "active";
    if (fs::exists(pointer)) {
      std::string id = read_file(pointer);
      while (!id.empty() && (id.back() == '\n' || id.back() == '\r')) id.pop_back();
      if (!id.empty()) active_ = std::make_shared<const ActiveModel>(ActiveModel{id, load(id)});
    }
  }

  std::shared_ptr<const ActiveModel> active() const {
    std::lock_guard lock(mutex_);
    return active_;
  }

  std::shared_ptr<const ActiveModel> require_active() const {
    auto m = active();
    if (!m) throw ConflictError("model_not_trained", "model not trained: no active model");
    return m;
  }

  void store(const std::string& id, const ScaffoldModel& m) const {
    write_atomically(dir_ / (id + ".json"), dump_model(m));
  }

  void activate(const std::string& id, ScaffoldModel m) {
    auto next = std::make_shared<const ActiveModel>(ActiveModel{id, std::move(m)});
    std::lock_guard lock(mutex_);
    write_atomically(dir_ / "active", id + "\n");
    active_ = std::move(next);
  }

  ScaffoldModel load(const std::string& id) const {
    if (!valid_id(id)) throw ValidationError("model_id", "invalid model id '" + id + "'");
    const fs::path p = dir_ / (id + ".json");
    if (!fs::exists(p)) throw NotFoundError("unknown model '" + id + "'");
    return parse_model(read_file(p));
  }

  std::vector<std::string> list() const {
    std::vector<std::string> ids;
    for (const auto& e : fs::directory_iterator(dir_))
      if (e.path().extension() == ".json") ids.push_back(e.path().stem().string());
    std::sort(ids.begin(), ids.end());
    return ids;
  }

 private:
  static void write_atomically(const fs::path& p, std::string_view content) {
    fs::path tmp = p;
    tmp += ".tmp";
    write_file(tmp, content);
    fs::rename(tmp, p);
  }

  fs::path dir_;
  std::shared_ptr<const ActiveModel> active_;
  mutable std::mutex mutex_;
};

// ---------------------------------------------------------------------------
// Training jobs
// ---------------------------------------------------------------------------

enum class JobState { kQueued, kRunning, kDone, kFailed };

inline const char* to_string(JobState s) {
  switch (s) {
    case JobState::kQueued: return "QUEUED";
    case JobState::kRunning: return "RUNNING";
    case JobState::kDone: return "DONE";
    case JobState::kFailed: return "FAILED";
  }
  return "?";
}

struct TrainRequest {
  std::string dataset_ref = "recorded";
  gp::KernelFamily family = gp::KernelFamily::kRatQuad;
  int budget = 50;
  std::uint64_t seed = 0;
};

struct JobStatus {
  std::string job_id;
  JobState state = JobState::kQueued;
  double progress = 0.0;
  std::string result_ref;  // model id once DONE
  std::string message;     // failure reason
  TrainRequest request;
  std::optional<UtilityParams> params;
  std::optional<double> best_objective;
};

inline json to_json(const JobStatus& j) {
  json out{{"job_id", j.job_id},
           {"state", to_string(j.state)},
           {"progress", j.progress},
           {"result_ref", j.result_ref.empty() ? json(nullptr) : json(j.result_ref)},
           {"dataset", j.request.dataset_ref},
           {"family", gp::to_string(j.request.family)},
           {"budget", j.request.budget},
           {"seed", j.request.seed}};
  if (!j.message.empty()) out["message"] = j.message;
  if (j.params) out["params"] = {{"a", j.params->a}, {"u_mu", j.params->u_mu}};
  if (j.best_objective) out["best_objective"] = *j.best_objective;
  return out;
}

// ---------------------------------------------------------------------------
// Service facade
// ---------------------------------------------------------------------------

struct ServiceConfig {
  fs::path data_dir = "data";
  gp::KernelFamily default_family = gp::KernelFamily::kRatQuad;
  std::vector<double> default_bpms{50.0, 80.0, 100.0};
  ScaffoldOptions scaffold{};
};

struct PerformanceResult {
  double pitch_error = 0.0;
  double timing_error = 0.0;
  bool no_matched_notes = false;
  std::optional<PracticeTuple> appended;
};

struct RankedOption {
  PracticeMode pm = PracticeMode::kPitch;
  double bpm = 0.0;
  double mean = 0.0;
  double sd = 0.0;
};

struct RecommendationResult {
  std::string model_id;
  std::vector<RankedOption> ranked;  // best first
  const RankedOption& best() const { return ranked.front(); }
};

inline json to_json(const RankedOption& o) {
  return {{"pm", to_string(o.pm)}, {"bpm", o.bpm}, {"mean", o.mean}, {"sd", o.sd}};
}

inline json to_json(const RecommendationResult& r) {
  json alts = json::array();
  for (const auto& o : r.ranked) alts.push_back(to_json(o));
  const auto& b = r.best();
  return {{"pm", to_string(b.pm)}, {"bpm", b.bpm},           {"mean", b.mean},
          {"sd", b.sd},            {"model_id", r.model_id}, {"alternatives", std::move(alts)}};
}

/// Ranks every (pm, bpm) pair by predicted utility. Ties keep pitch before
/// timing and candidates in the order given, so a single candidate reduces
/// to plain recommend().
inline std::vector<RankedOption> rank_options(const gp::GPModel& model, double p_pre, double t_pre,
                                              const std::vector<double>& bpms) {
  std::vector<RankedOption> out;
  for (double bpm : bpms) {
    const Recommendation r = recommend(model, p_pre, t_pre, bpm);
    out.push_back({PracticeMode::kPitch, bpm, r.pitch.mean, r.pitch.sd});
    out.push_back({PracticeMode::kTiming, bpm, r.timing.mean, r.timing.sd});
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < out.size(); ++i)
    if (out[i].mean - out[best].mean >= kTieTolerance) best = i;
  std::rotate(out.begin(), out.begin() + static_cast<std::ptrdiff_t>(best), out.begin() + static_cast<std::ptrdiff_t>(best) + 1);
  std::stable_sort(out.begin() + 1, out.end(), [](const RankedOption& l, const RankedOption& r) { return l.mean > r.mean; });
  return out;
}

class Service {
 public:
  explicit Service(ServiceConfig cfg)
      : cfg_(std::move(cfg)), sessions_(cfg_.data_dir), models_(cfg_.data_dir) {
    fs::create_directories(cfg_.data_dir / "scores");
  }

  ~Service() { wait_for_jobs(); }

  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  const ServiceConfig& config() const { return cfg_; }
  SessionStore& sessions() { return sessions_; }
  ModelRegistry& models() { return models_; }

  SessionInfo create_session(const std::string& learner_id, const std::string& piece_id, double bpm) {
    return sessions_.create(learner_id, piece_id, bpm);
  }

  /// Manual error entry, accepted verbatim.
  PerformanceResult submit_performance(const std::string& id, Phase phase, double pitch_error, double timing_error) {
    for (auto [v, name] : {std::pair{pitch_error, "pitch_error"}, std::pair{timing_error, "timing_error"}})
      if (!(v >= 0.0 && v <= 1.0)) throw ValidationError(name, "must be in [0,1]");
    return record(id, phase, pitch_error, timing_error, false, "manual");
  }

  /// MIDI upload, evaluated against the session's piece.
  PerformanceResult submit_performance(const std::string& id, Phase phase, std::span<const std::uint8_t> midi) {
    const SessionInfo info = sessions_.info(id);
    const Score score = load_score(info.piece_id);
    const PerformanceTrack track = parse_smf(midi);
    const PerformanceErrors e = evaluate_performance(score, track);
    return record(id, phase, e.pitch, e.timing, e.no_matched_notes, "midi");
  }

  void record_practice(const std::string& id, PracticeMode pm, double bpm) {
    if (!(bpm > 0.0 && bpm <= 400.0)) throw ValidationError("bpm", "must be in (0, 400]");
    sessions_.append(id, EventKind::kPractice, {{"pm", to_string(pm)}, {"bpm", bpm}});
  }

  RecommendationResult recommendation(const std::string& id, std::vector<double> bpms) {
    if (bpms.empty()) bpms = cfg_.default_bpms;
    for (double b : bpms)
      if (!(b > 0.0 && b <= 400.0)) throw ValidationError("bpms", "every candidate must be in (0, 400]");
    const SessionState st = sessions_.state(id);
    if (!st.pre) throw ConflictError("no_pre_performance", "session has no PRE performance yet");
    const auto active = models_.require_active();
    RecommendationResult r{active->model_id, rank_options(active->model.gp, st.pre->first, st.pre->second, bpms)};
    sessions_.append(id, EventKind::kRecommendation, to_json(r));
    return r;
  }

  std::string policy_map_csv(double bpm, int resolution) const {
    const auto active = models_.require_active();
    return scaffold::policy_map_csv(policy_map(active->model.gp, bpm, resolution));
  }

  /// Resolves a dataset reference: "recorded" is the union of all sessions,
  /// anything else a CSV path relative to the data directory.
  Dataset resolve_dataset(const std::string& ref) const {
    if (ref == "recorded") return sessions_.recorded_dataset();
    const fs::path rel(ref);
    if (ref.empty() || rel.is_absolute() ||
        std::any_of(rel.begin(), rel.end(), [](const fs::path& part) { return part == ".."; }))
      throw ValidationError("dataset", "must be 'recorded' or a path inside the data directory");
    return load_csv(cfg_.data_dir / rel);
  }

  std::string start_training(TrainRequest req) {
    if (req.budget < 1) throw ValidationError("budget", "must be >= 1");
    auto status = std::make_shared<JobRecord>();
    {
      std::lock_guard lock(jobs_mutex_);
      status->status.job_id = "job-" + std::to_string(++job_counter_) + "-" + std::to_string(now_ms());
      status->status.request = req;
      jobs_.emplace(status->status.job_id, status);
      threads_.emplace_back([this, status] { run_job(*status); });
    }
    return status->status.job_id;
  }

  JobStatus job(const std::string& id) const {
    std::lock_guard lock(jobs_mutex_);
    auto it = jobs_.find(id);
    if (it == jobs_.end()) throw NotFoundError("unknown job '" + id + "'");
    std::lock_guard job_lock(it->second->mutex);
    return it->second->status;
  }

  std::vector<JobStatus> jobs() const {
    std::lock_guard lock(jobs_mutex_);
    std::vector<JobStatus> out;
    for (const auto& [id, rec] : jobs_) {
      std::lock_guard job_lock(rec->mutex);
      out.push_back(rec->status);
    }
    return out;
  }

  /// Blocks until the job leaves QUEUED/RUNNING.
  JobStatus wait(const std::string& id) {
    std::shared_ptr<JobRecord> rec;
    {
      std::lock_guard lock(jobs_mutex_);
      auto it = jobs_.find(id);
      if (it == jobs_.end()) throw NotFoundError("unknown job '" + id + "'");
      rec = it->second;
    }
    std::unique_lock lock(rec->mutex);
    rec->cv.wait(lock, [&] { return rec->status.state == JobState::kDone || rec->status.state == JobState::kFailed; });
    return rec->status;
  }

  void wait_for_jobs() {
    std::vector<std::thread> threads;
    {
      std::lock_guard lock(jobs_mutex_);
      threads.swap(threads_);
    }
    for (auto& t : threads)
      if (t.joinable()) t.join();
  }

  Score load_score(const std::string& piece_id) const {
    if (!valid_id(piece_id)) throw NotFoundError("no score for piece '" + piece_id + "'");
    const fs::path p = cfg_.data_dir / "scores" / (piece_id + ".json");
    if (!fs::exists(p)) throw NotFoundError("no score for piece '" + piece_id + "' (expected scores/" + piece_id + ".json)");
    return parse_score(read_file(p));
  }

 private:
  struct JobRecord {
    JobStatus status;
    std::mutex mutex;
    std::condition_variable cv;
  };

  PerformanceResult record(const std::string& id, Phase phase, double pitch, double timing, bool unmatched,
                           const char* source) {
    json payload{{"pitch_error", pitch}, {"timing_error", timing}, {"source", source}};
    if (unmatched) payload["no_matched_notes"] = true;
    const auto [event, st] =
        sessions_.append(id, phase == Phase::kPre ? EventKind::kPrePerf : EventKind::kPostPerf, std::move(payload));
    PerformanceResult r{pitch, timing, unmatched, std::nullopt};
    if (phase == Phase::kPost) r.appended = st.tuples.back();
    return r;
  }

  void run_job(JobRecord& rec) {
    auto update = [&](auto&& fn) {
      {
        std::lock_guard lock(rec.mutex);
        fn(rec.status);
      }
      rec.cv.notify_all();
    };
    update([](JobStatus& s) { s.state = JobState::kRunning; });
    try {
      const TrainRequest req = rec.status.request;
      const Dataset d = resolve_dataset(req.dataset_ref);
      validate(d);
      ScaffoldOptions opts = cfg_.scaffold;
      opts.progress = [&](int done, int budget) {
        update([&](JobStatus& s) { s.progress = static_cast<double>(done) / budget; });
      };
      ScaffoldResult res = optimize_scaffold(d, req.family, req.budget, req.seed, opts);
      ScaffoldModel model{res.params, std::move(res.model),
                          TrainingInfo{req.dataset_ref, fingerprint(d), d.size(), 0.0, req.seed, req.budget,
                                       res.trace.best()}};
      const std::string model_id = rec.status.job_id;
      models_.store(model_id, model);
      write_file(cfg_.data_dir / "models" / (model_id + ".trace.csv"), trace_csv(res.trace));
      models_.activate(model_id, std::move(model));
      update([&](JobStatus& s) {
        s.state = JobState::kDone;
        s.progress = 1.0;
        s.result_ref = model_id;
        s.params = res.params;
        s.best_objective = res.trace.best();
      });
    } catch (const std::exception& e) {
      update([&](JobStatus& s) {
        s.state = JobState::kFailed;
        s.message = e.what();
      });
    }
  }

  ServiceConfig cfg_;
  SessionStore sessions_;
  ModelRegistry models_;

  std::map<std::string, std::shared_ptr<JobRecord>> jobs_;
  std::vector<std::thread> threads_;
  std::uint64_t job_counter_ = 0;
  mutable std::mutex jobs_mutex_;
};

}  // namespace scaffold::service
