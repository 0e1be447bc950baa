#pragma once

// Subcommands of the `scaffold` binary.

#include <chrono>
#include <csignal>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "scaffold/dataset.hpp"
#include "scaffold/errors.hpp"
#include "scaffold/gp.hpp"
#include "scaffold/http_service.hpp"
#include "scaffold/report.hpp"
#include "scaffold/scaffold_policy.hpp"
#include "scaffold/score_perf.hpp"
#include "scaffold/service.hpp"
#include "scaffold/simulator.hpp"
#include "scaffold/text.hpp"

namespace scaffold::cli {

namespace fs = std::filesystem;

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

inline std::vector<double> parse_list(const std::string& s, const char* what) {
  std::vector<double> out;
  for (auto part : text::split(s, ',')) {
    auto v = text::parse_double(part);
    if (!v) throw ValidationError(what, "'" + std::string(part) + "' is not a number");
    out.push_back(*v);
  }
  if (out.empty()) throw ValidationError(what, "must list at least one value");
  return out;
}

inline sim::TeacherRule parse_rule(const std::string& s) {
  if (s == "published") return sim::TeacherRule::published();
  if (s == "always-pitch") return sim::TeacherRule::constant(PracticeMode::kPitch);
  if (s == "always-timing") return sim::TeacherRule::constant(PracticeMode::kTiming);
  if (s.rfind("logistic:", 0) == 0) {
    const auto b = parse_list(s.substr(9), "rule");
    if (b.size() != 3) throw ValidationError("rule", "logistic rule needs three coefficients");
    return sim::TeacherRule::logistic({b[0], b[1], b[2]});
  }
  throw ValidationError("rule", "unknown rule '" + s + "'");
}

struct Context {
  std::string data_dir = ".";
  fs::path resolve(const std::string& p) const {
    const fs::path path(p);
    return path.is_absolute() ? path : fs::path(data_dir) / path;
  }
};

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Practice-mode scaffolding: features, training, evaluation, policy maps, simulation, service"};
  app.require_subcommand(1);
  Context ctx;
  app.add_option("--data-dir", ctx.data_dir, "Root that relative paths are resolved against")
      ->envname("SCAFFOLD_DATA_DIR");

  const std::vector<std::string> families{"RBF", "RATQUAD", "MATERN52"};

  // features
  auto* features = app.add_subcommand("features", "Pitch and timing error of a MIDI performance against a score");
  std::string score_path, midi_path, anchor = "first";
  double window = 0.5;
  features->add_option("--score", score_path, "Score JSON")->required();
  features->add_option("--midi", midi_path, "Performance MIDI file")->required();
  features->add_option("--anchor", anchor, "Time anchor: first or median")
      ->check(CLI::IsMember({"first", "median"}));
  features->add_option("--window", window, "Alignment window in beats")->check(CLI::PositiveNumber);

  // train
  auto* train = app.add_subcommand("train", "Bayesian-optimize (a, u_mu) and fit the utility GP");
  std::string dataset_path, family_name = "RATQUAD", model_out, trace_out;
  int budget = 50;
  std::uint64_t seed = 0;
  double test_fraction = 0.2;
  bool parallel = false;
  train->add_option("--dataset", dataset_path, "Dataset CSV")->required();
  train->add_option("--family", family_name, "Kernel family")
      ->transform(CLI::IsMember(families, CLI::ignore_case));
  train->add_option("--budget", budget, "BO iterations after the initial design")->check(CLI::PositiveNumber);
  train->add_option("--seed", seed, "Seed for split, design and restarts");
  train->add_option("--test-fraction", test_fraction, "Held-out fraction (0 trains on every row)")
      ->check(CLI::Range(0.0, 0.95));
  train->add_option("--out", model_out, "Model file to write")->required();
  train->add_option("--trace", trace_out, "BO trace CSV (default: <out>.trace.csv)");
  train->add_flag("--parallel-folds", parallel, "Fit CV folds on separate threads");

  // eval
  auto* eval = app.add_subcommand("eval", "Policy accuracy of a model next to the regression baselines");
  std::string eval_model, eval_dataset, eval_json;
  eval->add_option("--model", eval_model, "Model file")->required();
  eval->add_option("--dataset", eval_dataset, "Dataset CSV")->required();
  eval->add_option("--json", eval_json, "Also write the report as JSON");

  // policy-map
  auto* pmap = app.add_subcommand("policy-map", "Recommended mode over a (t_pre, p_pre) grid");
  std::string map_model, map_out;
  double map_bpm = 80.0;
  int resolution = 41;
  pmap->add_option("--model", map_model, "Model file")->required();
  pmap->add_option("--bpm", map_bpm, "Tempo")->check(CLI::Range(1e-9, 400.0));
  pmap->add_option("--resolution", resolution, "Points per axis")->check(CLI::Range(2, 501));
  pmap->add_option("--out", map_out, "CSV file (default: standard output)");

  // simulate
  auto* simulate = app.add_subcommand("simulate", "Synthetic practice tuples from a planted teacher rule");
  std::string rule_name = "published", sim_out, bpm_list = "50,80,100";
  std::size_t n = 200;
  std::uint64_t sim_seed = 0;
  sim::ImprovementModel improvement;
  simulate->add_option("--rule", rule_name, "published, always-pitch, always-timing or logistic:b1,b2,b3");
  simulate->add_option("--n", n, "Number of tuples")->check(CLI::PositiveNumber);
  simulate->add_option("--seed", sim_seed, "Seed");
  simulate->add_option("--out", sim_out, "Dataset CSV to write")->required();
  simulate->add_option("--bpms", bpm_list, "Comma-separated tempo choices");
  simulate->add_option("--direct-gain", improvement.direct_gain, "Error reduction in the practised modality");
  simulate->add_option("--transfer-gain", improvement.transfer_gain, "Error reduction in the other modality");
  simulate->add_option("--noise", improvement.noise_sd, "Noise standard deviation");
  simulate->add_option("--learner-seed", improvement.seed, "Seed of the learner noise stream");

  // serve
  auto* serve = app.add_subcommand("serve", "Run the HTTP practice service");
  std::string host = "127.0.0.1", default_kernel = "RATQUAD", default_bpms = "50,80,100";
  int port = 8080;
  serve->add_option("--host", host, "Bind address")->envname("SCAFFOLD_HOST");
  serve->add_option("--port", port, "Port")->envname("SCAFFOLD_PORT")->check(CLI::Range(0, 65535));
  serve->add_option("--default-kernel", default_kernel, "Kernel for training requests that name none")
      ->envname("SCAFFOLD_KERNEL")
      ->transform(CLI::IsMember(families, CLI::ignore_case));
  serve->add_option("--default-bpms", default_bpms, "Candidate tempos for recommendations")
      ->envname("SCAFFOLD_BPMS");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*features) {
      const Score score = parse_score(read_file(ctx.resolve(score_path)));
      const std::string bytes = read_file(ctx.resolve(midi_path));
      const auto track = parse_smf({reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size()});
      AlignOptions opts;
      opts.window_beats = window;
      opts.anchor = anchor == "median" ? AnchorMode::kMedianOffset : AnchorMode::kFirstEvent;
      const auto e = evaluate_performance(score, track, opts);
      out << "pitch_error,timing_error\n" << text::format_double(e.pitch) << ',' << text::format_double(e.timing) << '\n';
      if (e.no_matched_notes) err << "warning: no performed note matched the score; timing error set to 1\n";
      return kOk;
    }

    if (*train) {
      const auto t0 = std::chrono::steady_clock::now();
      const Dataset all = load_csv(ctx.resolve(dataset_path));
      Dataset fit_on = all;
      if (test_fraction > 0.0) {
        const auto parts = split(all, test_fraction, seed);
        if (!parts.stratified) err << "warning: split could not be stratified by practice mode\n";
        fit_on = parts.train;
      }
      ScaffoldOptions opts;
      opts.parallel_folds = parallel;
      const auto family = *gp::parse_family(family_name);
      auto res = optimize_scaffold(fit_on, family, budget, seed, opts);
      ScaffoldModel model{res.params, std::move(res.model),
                          TrainingInfo{dataset_path, fingerprint(all), all.size(), test_fraction, seed, budget,
                                       res.trace.best()}};
      const fs::path model_path = ctx.resolve(model_out);
      fs::path trace_path = trace_out.empty() ? fs::path(model_path).replace_extension(".trace.csv")
                                              : ctx.resolve(trace_out);
      write_file(model_path, dump_model(model));
      write_file(trace_path, trace_csv(res.trace));
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      out << "trained " << gp::to_string(family) << " on " << fit_on.size() << " of " << all.size() << " rows\n"
          << "a=" << text::format_double(res.params.a) << " u_mu=" << text::format_double(res.params.u_mu)
          << " cv_accuracy=" << text::format_double(res.trace.best()) << '\n'
          << "model: " << model_path.string() << "\ntrace: " << trace_path.string() << '\n'
          << "elapsed " << static_cast<int>(secs + 0.5) << " s\n";
      return kOk;
    }

    if (*eval) {
      const ScaffoldModel model = parse_model(read_file(ctx.resolve(eval_model)));
      const Dataset all = load_csv(ctx.resolve(eval_dataset));
      std::vector<EvalReport> reports;
      const auto& info = model.training;
      if (info && info->test_fraction > 0.0 && info->dataset_fingerprint == fingerprint(all)) {
        const auto parts = split(all, info->test_fraction, info->seed);
        reports.push_back(evaluate(model, parts.train, parts.test, "held-out"));
      }
      reports.push_back(evaluate(model, all, all, "in-sample"));
      if (info && info->test_fraction > 0.0 && reports.size() == 1)
        reports.back().notes.push_back("dataset differs from the one the model was trained on; no held-out rows");
      nlohmann::json j = nlohmann::json::array();
      for (std::size_t i = 0; i < reports.size(); ++i) {
        out << (i ? "\n" : "") << format_table(reports[i]);
        j.push_back(to_json(reports[i]));
      }
      if (!eval_json.empty()) write_file(ctx.resolve(eval_json), j.dump(2) + "\n");
      return kOk;
    }

    if (*pmap) {
      const ScaffoldModel model = parse_model(read_file(ctx.resolve(map_model)));
      const std::string csv = policy_map_csv(policy_map(model.gp, map_bpm, resolution));
      if (map_out.empty()) {
        out << csv;
      } else {
        write_file(ctx.resolve(map_out), csv);
        out << "wrote " << resolution * resolution << " cells to " << ctx.resolve(map_out).string() << '\n';
      }
      return kOk;
    }

    if (*simulate) {
      const auto rule = parse_rule(rule_name);
      const auto d = sim::simulate_dataset(rule, improvement, n, parse_list(bpm_list, "bpms"), sim_seed);
      save_csv(d, ctx.resolve(sim_out));
      out << "wrote " << d.size() << " tuples (" << d.count(PracticeMode::kTiming) << " timing) to "
          << ctx.resolve(sim_out).string() << '\n';
      return kOk;
    }

    if (*serve) {
      service::ServiceConfig cfg;
      cfg.data_dir = ctx.data_dir;
      cfg.default_family = *gp::parse_family(default_kernel);
      cfg.default_bpms = parse_list(default_bpms, "default-bpms");
      service::Service svc(cfg);
      httplib::Server server;
      service::install_routes(server, svc);
      out << "serving " << fs::absolute(cfg.data_dir).string() << " on http://" << host << ':' << port << std::endl;
      if (!server.listen(host, port)) {
        err << "error: cannot listen on " << host << ':' << port << '\n';
        return kData;
      }
      return kOk;
    }
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << '\n';
    return kNumerical;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kData;
  } catch (const nlohmann::json::exception& e) {
    err << "error: " << e.what() << '\n';
    return kData;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return kData;
  }
  return kUsage;
}

}  // namespace scaffold::cli
