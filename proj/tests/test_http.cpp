#include <thread>

#include <gtest/gtest.h>

#include "properties.hpp"
#include "scaffold/http_service.hpp"

using namespace scaffold;
using namespace scaffold::service;
using nlohmann::json;

namespace {

class HttpApi : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = std::make_unique<props::TempDir>("http");
    save_csv(props::sim_data(20, 4), dir_->path() / "small.csv");
    ServiceConfig cfg;
    cfg.data_dir = dir_->path();
    cfg.scaffold = props::quick_options();
    svc_ = std::make_unique<Service>(cfg);
    install_routes(server_, *svc_);
    port_ = server_.bind_to_any_port("127.0.0.1");
    ASSERT_GT(port_, 0);
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    client_ = std::make_unique<httplib::Client>("127.0.0.1", port_);
  }

  void TearDown() override {
    server_.stop();
    if (thread_.joinable()) thread_.join();
    svc_.reset();
  }

  httplib::Result post(const std::string& path, const json& body) {
    return client_->Post(path, body.dump(), "application/json");
  }

  static json body(const httplib::Result& r) { return json::parse(r->body); }

  std::string new_session() {
    auto r = post("/api/sessions", {{"learner_id", "l"}, {"piece_id", "p"}, {"bpm", 60}});
    return body(r)["session_id"];
  }

  std::unique_ptr<props::TempDir> dir_;
  std::unique_ptr<Service> svc_;
  httplib::Server server_;
  std::thread thread_;
  std::unique_ptr<httplib::Client> client_;
  int port_ = 0;
};

}  // namespace

TEST_F(HttpApi, Health) {
  auto r = client_->Get("/api/health");
  ASSERT_TRUE(r);
  EXPECT_EQ(r->status, 200);
  EXPECT_EQ(body(r)["status"], "ok");
  EXPECT_TRUE(body(r)["active_model"].is_null());
}

TEST_F(HttpApi, SessionLifecycle) {
  auto created = post("/api/sessions", {{"learner_id", "l"}, {"piece_id", "p"}, {"bpm", 60}});
  ASSERT_EQ(created->status, 201);
  const std::string id = body(created)["session_id"];

  auto pre = post("/api/sessions/" + id + "/performances", {{"phase", "PRE"}, {"pitch_error", 0.3}, {"timing_error", 0.2}});
  ASSERT_EQ(pre->status, 200);
  EXPECT_EQ(body(pre)["pitch_error"], 0.3);
  EXPECT_EQ(body(pre)["timing_error"], 0.2);
  EXPECT_TRUE(body(pre)["tuple"].is_null());

  auto practice = post("/api/sessions/" + id + "/practice", {{"pm", "TIMING"}, {"bpm", 80}});
  ASSERT_EQ(practice->status, 200);
  auto post_perf =
      post("/api/sessions/" + id + "/performances", {{"phase", "POST"}, {"pitch_error", 0.28}, {"timing_error", 0.1}});
  ASSERT_EQ(post_perf->status, 200);
  EXPECT_EQ(body(post_perf)["tuple"]["pm"], 1);

  auto got = client_->Get("/api/sessions/" + id);
  ASSERT_EQ(got->status, 200);
  const json s = body(got);
  EXPECT_EQ(s["tuples"].size(), 1u);
  EXPECT_EQ(s["events"].size(), 3u);
  EXPECT_EQ(s["phase"], "AWAITING_PRACTICE");

  auto list = client_->Get("/api/sessions");
  EXPECT_EQ(body(list)["sessions"].size(), 1u);
}

TEST_F(HttpApi, ErrorEnvelopes) {
  auto missing = client_->Get("/api/sessions/nope");
  EXPECT_EQ(missing->status, 404);
  EXPECT_EQ(body(missing)["code"], "not_found");
  EXPECT_TRUE(body(missing).contains("message"));
  EXPECT_TRUE(body(missing).contains("detail"));

  auto bad_json = client_->Post("/api/sessions", "{", "application/json");
  EXPECT_EQ(bad_json->status, 400);
  EXPECT_EQ(body(bad_json)["code"], "parse_error");

  auto no_field = post("/api/sessions", {{"learner_id", "l"}, {"bpm", 60}});
  EXPECT_EQ(no_field->status, 400);
  EXPECT_EQ(body(no_field)["code"], "invalid_request");
  EXPECT_EQ(body(no_field)["detail"]["field"], "piece_id");

  const auto id = new_session();
  auto early = post("/api/sessions/" + id + "/performances", {{"phase", "POST"}, {"pitch_error", 0.1}, {"timing_error", 0.1}});
  EXPECT_EQ(early->status, 409);
  EXPECT_EQ(body(early)["code"], "no_open_unit");

  auto no_pre = client_->Get("/api/sessions/" + id + "/recommendation");
  EXPECT_EQ(no_pre->status, 409);
  post("/api/sessions/" + id + "/performances", {{"phase", "PRE"}, {"pitch_error", 0.3}, {"timing_error", 0.2}});
  auto no_model = client_->Get("/api/sessions/" + id + "/recommendation?bpms=50,100");
  EXPECT_EQ(no_model->status, 409);
  EXPECT_EQ(body(no_model)["code"], "model_not_trained");

  auto bad_pm = post("/api/sessions/" + id + "/practice", {{"pm", "LOUDNESS"}, {"bpm", 80}});
  EXPECT_EQ(bad_pm->status, 400);

  auto no_route = client_->Get("/api/nothing");
  EXPECT_EQ(no_route->status, 404);
  EXPECT_EQ(body(no_route)["code"], "not_found");

  auto map = client_->Get("/api/policy-map?bpm=80&resolution=2");
  EXPECT_EQ(map->status, 409);
  auto map_bad = client_->Get("/api/policy-map");
  EXPECT_EQ(map_bad->status, 400);
}

TEST_F(HttpApi, MidiUpload) {
  const Score score = make_score("etude", {{60, 0, 1}, {62, 1, 1}});
  write_file(dir_->path() / "scores" / "etude.json", score_to_json(score).dump());
  auto created = post("/api/sessions", {{"learner_id", "l"}, {"piece_id", "etude"}, {"bpm", 120}});
  const std::string id = body(created)["session_id"];
  PerformanceTrack track;
  track.bpm = 120;
  track.events = {{60, 0.0}, {62, 0.5}};
  const auto bytes = serialize_smf(track);
  const std::string raw(bytes.begin(), bytes.end());
  auto r = client_->Post("/api/sessions/" + id + "/performances?phase=PRE", raw, "audio/midi");
  ASSERT_EQ(r->status, 200);
  EXPECT_EQ(body(r)["pitch_error"], 0.0);

  auto junk = client_->Post("/api/sessions/" + id + "/performances?phase=PRE", "garbage!", "audio/midi");
  EXPECT_EQ(junk->status, 400);
  EXPECT_EQ(body(junk)["code"], "parse_error");
  auto no_phase = client_->Post("/api/sessions/" + id + "/performances", raw, "audio/midi");
  EXPECT_EQ(no_phase->status, 400);
}

TEST_F(HttpApi, TrainPollRecommendAndMap) {
  auto started = post("/api/train", {{"dataset", "small.csv"}, {"family", "RATQUAD"}, {"budget", 1}, {"seed", 0}});
  ASSERT_EQ(started->status, 202);
  const std::string job = body(started)["job_id"];
  svc_->wait(job);
  auto status = client_->Get("/api/jobs/" + job);
  ASSERT_EQ(status->status, 200);
  EXPECT_EQ(body(status)["state"], "DONE");
  EXPECT_EQ(body(status)["progress"], 1.0);
  EXPECT_EQ(body(status)["result_ref"], job);

  auto models = client_->Get("/api/models");
  EXPECT_EQ(body(models)["active"], job);
  EXPECT_TRUE(body(models)["params"].contains("a"));

  const auto id = new_session();
  post("/api/sessions/" + id + "/performances", {{"phase", "PRE"}, {"pitch_error", 0.3}, {"timing_error", 0.2}});
  auto rec = client_->Get("/api/sessions/" + id + "/recommendation?bpms=50,100");
  ASSERT_EQ(rec->status, 200);
  const json rj = body(rec);
  EXPECT_EQ(rj["alternatives"].size(), 4u);
  EXPECT_EQ(rj["model_id"], job);
  EXPECT_EQ(rj["pm"], rj["alternatives"][0]["pm"]);

  auto map = client_->Get("/api/policy-map?bpm=80&resolution=2");
  ASSERT_EQ(map->status, 200);
  EXPECT_EQ(map->body, svc_->policy_map_csv(80, 2));
  EXPECT_EQ(map->get_header_value("Content-Type"), "text/csv");

  auto bad_family = post("/api/train", {{"family", "LINEAR"}});
  EXPECT_EQ(bad_family->status, 400);
  auto bad_job = client_->Get("/api/jobs/job-0");
  EXPECT_EQ(bad_job->status, 404);
  auto failing = post("/api/train", {{"dataset", "missing.csv"}, {"budget", 1}});
  ASSERT_EQ(failing->status, 202);
  const std::string failing_id = body(failing)["job_id"];
  svc_->wait(failing_id);
  EXPECT_EQ(body(client_->Get("/api/jobs/" + failing_id))["state"], "FAILED");
}
