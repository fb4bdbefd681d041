#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "segviz/fed.hpp"
#include "segviz/nn.hpp"
#include "segviz/synthdata.hpp"

namespace segviz::harness {

// Full declarative description of one study: data, model, training,
// federation and evaluation settings. Mirrors the dotted-key config file.
struct ExperimentConfig {
  std::string name = "desk";
  uint64_t seed = 42;
  std::string out_dir = "out";

  synth::PhantomConfig phantom;  // data.*
  size_t liver_samples = 200;
  size_t spleen_samples = 60;
  size_t test_samples = 30;
  double split = 0.8;

  nn::ModelConfig model;  // model.*; tasks default to {liver, spleen}

  struct Train {  // train.*
    int batch_size = 2;
    double base_lr = 1e-4;
    double eta_min = 0.0;
    std::vector<size_t> patch_size = {32, 32};
    int patches_per_volume = 1;
    double pos_ratio = 0.5;
    int baseline_epochs = 80;
  } train;

  struct Fed {  // fed.*
    int rounds = 40;
    int local_epochs = 2;
    fed::Weighting weighting = fed::Weighting::sample_count;
    bool aggregate_running_stats = true;
    fed::TransportKind transport = fed::TransportKind::inproc;
    std::string listen = "127.0.0.1:0";
  } fed;

  double eval_threshold = 0.5;  // eval.*

  void validate() const;

  // Class id a task segments in the phantom labels.
  static int class_of(const std::string& task);
  // Node id is the task's index in model.tasks; sample budget per task.
  size_t samples_for(const std::string& task) const;
  uint64_t id_offset_for(const std::string& task) const;
};

ExperimentConfig default_config();

// Parses a flat "dotted.key = value" file (''#'' comments), then applies the
// overrides in order. Unknown keys are rejected by name with line info.
ExperimentConfig load_config(const std::optional<std::filesystem::path>& path,
                             const std::vector<std::string>& overrides = {});

struct MetricsRecord {
  std::string experiment;
  std::string model;  // baseline_liver | baseline_spleen | segviz
  std::string task;
  uint64_t sample_id = 0;
  double dice = 0.0;
};

struct Datasets {
  std::map<std::string, synth::NodeDataset> nodes;  // keyed by task
  std::vector<synth::Sample> test;
};

// Deterministic in-memory materialization of the configured datasets; when
// data_dir is given the cached export is loaded instead.
Datasets build_datasets(const ExperimentConfig& cfg,
                        const std::optional<std::filesystem::path>& data_dir = std::nullopt);
void export_datasets(const ExperimentConfig& cfg, const std::filesystem::path& dir);

struct RunArtifacts {
  std::vector<MetricsRecord> records;
  nn::ParamSnapshot snapshot;
  std::vector<fed::RoundLog> logs;
};

// Centralized single-head training on one task's node data, evaluated on the
// external test set. Persists the snapshot, logs and per-sample records
// under cfg.out_dir.
RunArtifacts run_baseline(const ExperimentConfig& cfg, const std::string& task,
                          const Datasets& data);

// The federated arm: run_federation over all configured tasks, then evaluate
// the final global model per task on the same external test set.
RunArtifacts run_segviz(const ExperimentConfig& cfg, const Datasets& data);

// Builds a model from the config, applies the snapshot and scores every test
// sample for the task.
std::vector<double> evaluate_snapshot(const nn::ParamSnapshot& snapshot,
                                      const nn::ModelConfig& model_cfg,
                                      const std::vector<synth::Sample>& test,
                                      const std::string& task, double threshold);

// CSV of per-sample records: header experiment,model,task,sample_id,dice.
void write_records_csv(const std::vector<MetricsRecord>& records,
                       const std::filesystem::path& path);
std::vector<MetricsRecord> read_records_csv(const std::filesystem::path& path);

// per_sample.csv + summary.json (mean/std/median/min/max per model,task
// group) + one SVG boxplot per task comparing the models.
void emit_report(const std::vector<MetricsRecord>& records, const std::filesystem::path& out_dir);

// Snapshot container files reuse the wire encoding of a GlobalParams frame.
void save_snapshot(const nn::ParamSnapshot& snapshot, const std::filesystem::path& path);
nn::ParamSnapshot load_snapshot(const std::filesystem::path& path);

void write_round_logs(const std::vector<fed::RoundLog>& logs, const std::filesystem::path& path);

}  // namespace segviz::harness
