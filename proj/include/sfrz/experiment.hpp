// SPDX-License-Identifier: Apache-2.0
//
// Experiment orchestration: declarative config, the two-stage pipeline
// (general training, importance, partition, domain fine-tuning), the
// strategy matrix, and importance cost measurement.
#pragma once

#include "sfrz/checkpoint.hpp"
#include "sfrz/data.hpp"
#include "sfrz/importance.hpp"
#include "sfrz/model.hpp"
#include "sfrz/training.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

namespace sfrz {

enum class ImportanceOver { kBase, kAdapters };

const char* to_string(ImportanceOver over);

struct DataConfig {
  // "synthetic" or "files".
  std::string source = "synthetic";
  std::uint64_t seed = 1;
  std::size_t general_size = 2000;
  std::size_t domain_size = 1000;
  double skew = 0.7;
  SyntheticOptions synthetic;
  // File mode. Relative paths resolve against the config file's directory.
  std::filesystem::path general_path;
  std::filesystem::path domain_path;
  std::filesystem::path vocab_path;
  std::filesystem::path general_items;
  std::filesystem::path domain_items;
  UnknownPolicy unknown = UnknownPolicy::kReject;
};

struct StageConfig {
  std::size_t epochs = 5;
  std::size_t batch_size = 20;
  OptimizerConfig optimizer;
  std::uint64_t shuffle_seed = 0;
};

struct ImportanceConfig {
  Estimator estimator = Estimator::kGrad;
  PartitionCriterion criterion = PartitionCriterion::top_fraction(0.1);
  Granularity granularity = Granularity::kScalar;
  ImportanceOver over = ImportanceOver::kBase;
  std::size_t max_samples = 1000;
  double damping = 1e-3;
};

struct DomainConfig {
  std::optional<Strategy> strategy;
  StageConfig stage;
  LoraSpec lora;
  // Soft penalty strength for selective; anchored importance-weighted.
  double lambda = 0.0;
  // EWC penalty strength for ewclora.
  double ewc_lambda = 100.0;
  // Epochs of adapter training on the general data (lora_nu_mu, and
  // importance over adapters).
  std::size_t nu_epochs = 5;
  // lora_nu_mu: fold the general-stage adapters in before the domain stage.
  bool merge_nu_adapters = false;
};

struct ExperimentConfig {
  std::string run_id = "run";
  std::filesystem::path output_dir = "runs";
  std::uint64_t seed = 1;
  ModelConfig model;
  DataConfig data;
  StageConfig general;
  ImportanceConfig importance;
  DomainConfig domain;
  bool timing = false;
  bool checkpoints = true;
  // Defaults to <run dir>/STOP.
  std::filesystem::path stop_file;

  std::filesystem::path run_dir() const { return output_dir / run_id; }
};

// Parses and validates; throws ConfigError listing every violation.
ExperimentConfig parse_config(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
ExperimentConfig load_config(const std::filesystem::path& path);
// Every violation of `cfg`, empty when valid.
std::vector<std::string> validate_config(const ExperimentConfig& cfg);
// Normalized form with every default filled in.
nlohmann::json to_json(const ExperimentConfig& cfg);

// One config per strategy listed under "matrix": {"strategies": [...],
// "overrides": {strategy: {...merge patch...}}}.
std::vector<ExperimentConfig> expand_matrix(const nlohmann::json& j, const std::filesystem::path& base_dir = {});

struct Datasets {
  Vocab vocab;
  Corpus general;
  Corpus domain;
  std::vector<ChoiceItem> general_items;
  std::vector<ChoiceItem> domain_items;
  std::vector<Example> general_train;
  std::vector<Example> general_eval;
  std::vector<Example> domain_train;
  std::vector<Example> domain_eval;

  std::uint64_t fingerprint() const;
};

Datasets load_datasets(const ExperimentConfig& cfg);
// Writes the vocab sidecar, train/eval text and choice items into `dir`.
void export_datasets(const Datasets& data, const std::filesystem::path& dir);
// Model config with the vocabulary size taken from the data.
ModelConfig resolve_model(const ExperimentConfig& cfg, const Datasets& data);

struct MetricsRecord {
  std::string run_id;
  std::string strategy;
  std::string stage;
  std::size_t epoch = 0;
  double general_ppl = 0.0;
  std::optional<double> general_acc;
  double domain_ppl = 0.0;
  std::optional<double> domain_acc;
  double core_fraction = 0.0;
  double wall_ms = 0.0;
  std::size_t peak_param_bytes = 0;
  std::size_t importance_bytes = 0;
};

std::string metrics_csv_header();
std::string to_csv(const MetricsRecord& r);
nlohmann::json to_json(const MetricsRecord& r);

// Evaluates both tasks.
MetricsRecord evaluate_record(const TinyLM& model, const Datasets& data);

// Append-only CSV + JSONL writer; every row is flushed.
class MetricsSink {
 public:
  MetricsSink() = default;
  explicit MetricsSink(const std::filesystem::path& dir);
  void append(const MetricsRecord& r);
  const std::vector<MetricsRecord>& records() const { return records_; }

 private:
  std::ofstream csv_;
  std::ofstream jsonl_;
  std::vector<MetricsRecord> records_;
};

// Importance over the trainable entries of `model` on the general data.
// The path estimator needs a recorded trajectory and is passed in.
ImportanceMap estimate_importance(TinyLM& model, const ImportanceConfig& cfg, const Datasets& data,
                                  const PathImportance* path = nullptr);

// Shared prefix of every strategy: data, initial model, general stage.
struct Prepared {
  Prepared(Datasets d, const ModelConfig& mc, TinyLM m)
      : data(std::move(d)), model_config(mc), model(std::move(m)) {}

  Datasets data;
  ModelConfig model_config;
  TinyLM model;
  // Path importance recorded over the general stage.
  std::optional<PathImportance> path;
  MetricsRecord reference;
  std::vector<MetricsRecord> general_records;
  std::uint64_t init_hash = 0;
  std::uint64_t general_hash = 0;
  std::uint64_t data_hash = 0;
  bool interrupted = false;
  // Precomputed by earlier CLI stages; selective uses them instead of
  // estimating and partitioning again.
  std::optional<ImportanceMap> importance;
  std::optional<FreezeMask> mask;
};

Prepared prepare(const ExperimentConfig& cfg, MetricsSink* sink = nullptr);
// Starts from a saved general-stage checkpoint instead of training.
Prepared prepare_from_checkpoint(const ExperimentConfig& cfg, const std::filesystem::path& checkpoint);

struct StrategyResult {
  Strategy strategy = Strategy::kBase;
  MetricsRecord reference;
  MetricsRecord pre_domain;
  MetricsRecord final;
  // Forgetting: final general ppl minus the pre_domain row's.
  double delta_general_ppl = 0.0;
  std::uint64_t final_hash = 0;
  std::optional<ImportanceMap> importance;
  std::optional<FreezeMask> mask;
  bool interrupted = false;
};

// Runs every stage after the shared prefix for cfg.domain.strategy.
// `prepared` is not modified.
StrategyResult run_strategy(const ExperimentConfig& cfg, const Prepared& prepared, const std::filesystem::path& dir,
                            MetricsSink& sink);

struct PipelineResult {
  StrategyResult result;
  std::filesystem::path run_dir;
  std::vector<MetricsRecord> records;
  bool interrupted = false;
};

// Writes config.normalized.json, metrics.csv, metrics.jsonl,
// importance_summary.csv and stage checkpoints into cfg.run_dir().
PipelineResult run_pipeline(const ExperimentConfig& cfg);

struct MatrixReport {
  std::string run_id;
  std::vector<StrategyResult> rows;
  std::uint64_t init_hash = 0;
  std::uint64_t general_hash = 0;
  std::uint64_t data_hash = 0;
};

// All configs must share seeds, data, model and general stage; throws
// ConfigError otherwise. Writes matrix.txt and matrix.jsonl.
MatrixReport run_matrix(const std::vector<ExperimentConfig>& configs);
std::string format_matrix(const MatrixReport& report);
std::string matrix_jsonl(const MatrixReport& report);

struct CostReport {
  std::size_t scalars = 0;
  std::size_t samples = 0;
  double grad_ms = 0.0;
  double fisher_ms = 0.0;
  double ratio = 0.0;
  std::size_t importance_bytes = 0;
  std::size_t peak_param_bytes = 0;
};

// Times grad and Fisher estimation over the same samples on the initial
// model. Throws DataError for zero samples.
CostReport measure_importance_cost(const ExperimentConfig& cfg, std::size_t samples);
nlohmann::json to_json(const CostReport& r);

// Shortest round-trip decimal form, locale independent.
std::string format_double(double v);

}  // namespace sfrz
