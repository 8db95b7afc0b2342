#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>

#include "ecp/repro.hpp"
#include "experiment.hpp"

namespace {

using ecp::Json;
using ecp::cli::Outputs;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitFail = 2;

struct CommonArgs {
  std::string config;
  std::string out;
  std::vector<std::string> overrides;
};

// --set key=value replaces a top-level config field; the value is parsed as JSON, falling back to a string.
Json load_document(const CommonArgs& args) {
  Json doc = ecp::read_json_file(args.config);
  if (!doc.is_object()) throw ecp::ConfigError("config: expected a JSON object");
  for (const auto& kv : args.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) throw ecp::ConfigError("--set expects key=value, got '" + kv + "'");
    const std::string key = kv.substr(0, eq), text = kv.substr(eq + 1);
    Json value = Json::parse(text, nullptr, false);
    doc[key] = value.is_discarded() ? Json(text) : value;
  }
  if (!args.out.empty()) doc["output_dir"] = args.out;
  return doc;
}

int run_repro(const std::string& key, const std::string& out_dir) {
  std::vector<int> ids;
  if (key == "all") {
    for (const auto& c : ecp::criteria()) ids.push_back(c.id);
  } else {
    ids.push_back(ecp::find_criterion(key).id);
  }
  const auto opts = ecp::repro_options_from_env();
  Outputs out;
  out.report = Json{{"command", "repro"}, {"criteria", Json::array()}};
  out.csv_header = {"id", "slug", "verdict", "seconds", "detail"};
  bool failed = false;
  for (int id : ids) {
    const auto r = ecp::run_criterion(id, opts);
    std::cout << ecp::format_result(r) << std::endl;
    failed = failed || r.verdict == ecp::Verdict::Fail;
    out.report["criteria"].push_back(r);
    out.metrics.push_back(r);
    char secs[32];
    std::snprintf(secs, sizeof secs, "%.2f", r.seconds);
    out.csv_rows.push_back({std::to_string(r.id), r.slug, ecp::to_string(r.verdict), secs, r.detail});
  }
  out.report["failed"] = failed;
  ecp::cli::write_outputs(out_dir, out);
  return failed ? kExitFail : kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Conformal prediction with information-theoretic bounds"};
  app.require_subcommand(1);

  using Command = std::function<Outputs(const ecp::cli::ExperimentConfig&)>;
  const std::vector<std::tuple<std::string, std::string, Command>> commands{
      {"gen-data", "Generate or import a dataset and save it as data.ecd", ecp::cli::cmd_gen_data},
      {"calibrate", "Calibrate conformal thresholds per seed and alpha", ecp::cli::cmd_calibrate},
      {"evaluate", "Coverage and inefficiency across seeds", ecp::cli::cmd_evaluate},
      {"bounds", "Upper bounds on H(Y|X) per alpha", ecp::cli::cmd_bounds},
      {"setsize", "Lower bounds on prediction set size from a quantized model", ecp::cli::cmd_setsize},
      {"train", "Train a classifier with a conformal loss", ecp::cli::cmd_train},
      {"sideinfo", "Prediction sets with side information", ecp::cli::cmd_sideinfo},
      {"fed-train", "Simulated federated training", ecp::cli::cmd_fed_train},
  };

  std::map<std::string, CommonArgs> args;
  std::map<std::string, CLI::App*> subs;
  for (const auto& [name, help, fn] : commands) {
    auto* sub = app.add_subcommand(name, help);
    auto& a = args[name];
    sub->add_option("-c,--config", a.config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("-o,--out", a.out, "Override output_dir");
    sub->add_option("--set", a.overrides, "Override a top-level field: key=json");
    subs[name] = sub;
  }
  std::string repro_key, repro_out = "out/repro";
  auto* repro = app.add_subcommand("repro", "Run acceptance criteria (id, slug or 'all')");
  repro->add_option("criterion", repro_key, "Criterion id, slug or 'all'")->required();
  repro->add_option("-o,--out", repro_out, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (repro->parsed()) return run_repro(repro_key, repro_out);
    for (const auto& [name, help, fn] : commands) {
      if (!subs[name]->parsed()) continue;
      const auto cfg = ecp::cli::parse_config(load_document(args[name]));
      const Outputs out = fn(cfg);
      ecp::cli::write_outputs(cfg.output_dir, out);
      std::cout << name << ": wrote " << (std::filesystem::path(cfg.output_dir) / "report.json").string() << "\n";
      return kExitOk;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}
