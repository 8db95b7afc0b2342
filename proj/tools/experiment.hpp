#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ecp/io.hpp"

namespace ecp::cli {

struct TaskSource {
  std::string kind = "gaussian_mixture";  // gaussian_mixture | grouped_mixture | ring_mixture | discrete | dataset | csv | idx
  GaussianMixtureSpec mixture;            // filled for the three mixture kinds
  DiscreteTaskSpec discrete;
  std::string path;         // dataset / csv file, idx images
  std::string labels_path;  // idx labels
  CsvSchema csv;
  std::size_t n = 2000;
  RngSeed seed{0};

  bool is_mixture() const { return kind.ends_with("mixture"); }
  bool is_discrete() const { return kind == "discrete"; }
  bool is_generated() const { return is_mixture() || is_discrete(); }
};

struct ModelSource {
  std::string kind = "bayes";  // bayes | checkpoint
  std::string path;
};

struct SideInfoSettings {
  std::vector<double> availability{0.0, 0.3, 1.0};
  bool mondrian = false;
  double side_fraction = 0.25;  // share of the data reserved for fitting the side head
  SideTrainConfig train;
};

struct ExperimentConfig {
  TaskSource task;
  ScoreSpec score;
  std::vector<double> alphas{0.1};
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  double cal_fraction = 0.5;
  double train_fraction = 0.5;  // train / fed-train: share used for fitting, the rest is evaluated
  std::vector<std::string> bounds{"simple_fano", "mb_fano", "dpi"};
  double delta = 0.05;
  ModelSource model;
  std::optional<ModelSpec> model_spec;
  TrainConfig training;
  FederatedConfig federated;
  SideInfoSettings side_info;
  QuantizedStudyConfig setsize;
  std::string output_dir = "out";
};

/// Parses and validates the whole document; throws ConfigError naming the bad field.
ExperimentConfig parse_config(const Json& doc);

/// Result files of one command.
struct Outputs {
  Json report = Json::object();
  std::vector<std::string> csv_header;
  std::vector<std::vector<std::string>> csv_rows;
  std::vector<Json> metrics;
};

Outputs cmd_gen_data(const ExperimentConfig& cfg);
Outputs cmd_calibrate(const ExperimentConfig& cfg);
Outputs cmd_evaluate(const ExperimentConfig& cfg);
Outputs cmd_bounds(const ExperimentConfig& cfg);
Outputs cmd_setsize(const ExperimentConfig& cfg);
Outputs cmd_train(const ExperimentConfig& cfg);
Outputs cmd_sideinfo(const ExperimentConfig& cfg);
Outputs cmd_fed_train(const ExperimentConfig& cfg);

/// Writes report.json, table.csv and metrics.jsonl into dir.
void write_outputs(const std::string& dir, const Outputs& out);

}  // namespace ecp::cli
