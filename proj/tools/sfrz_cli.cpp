// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end. Every subcommand reads the same JSON config; the
// stage commands (train-general, estimate-importance, partition, finetune)
// pass state through checkpoints, `pipeline` runs them all in one process.
#include "sfrz/errors.hpp"
#include "sfrz/experiment.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

namespace {

namespace fs = std::filesystem;
using namespace sfrz;

constexpr const char* kConfigKeys = R"(Config keys (JSON; see docs/config.md for details):
  run_id, output_dir, seed, timing, checkpoints, stop_file
  model:      embed_dim, window, hidden, depth, context, vocab_size
  data:       source (synthetic|files), seed, general_size, domain_size, skew,
              alphabet, seq_len, eval_fraction, choice_items, prompt_len,
              continuation_len, min_candidates, max_candidates,
              general_path, domain_path, vocab_path, general_items,
              domain_items, unknown (reject|reserve)
  general:    epochs, batch_size, shuffle_seed, optimizer (adam|sgd), lr,
              beta1, beta2, eps, clip_norm
  importance: estimator (grad|fisher|path), top_fraction | threshold,
              granularity (scalar|tensor), over (base|adapters),
              max_samples, damping
  domain:     strategy (base|full|lora_mu|lora_nu_mu|ewclora|rslora|selective),
              the general keys, lambda, ewc_lambda, nu_epochs,
              merge_nu_adapters, lora: {rank, alpha, targets, seed}
  matrix:     strategies: [...], overrides: {strategy: {...}}
Exit codes: 0 ok, 1 internal, 2 config, 3 data, 4 training, 5 checkpoint.)";

void print_record(const MetricsRecord& r) { std::cout << to_json(r).dump() << '\n'; }

void print_result(const StrategyResult& r) {
  nlohmann::json j = to_json(r.final);
  j["delta_general_ppl"] = r.delta_general_ppl;
  j["interrupted"] = r.interrupted;
  std::cout << j.dump() << '\n';
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config '" + path.string() + "'");
  try {
    return nlohmann::json::parse(in, nullptr, true, true);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("'" + path.string() + "' is not valid JSON: " + e.what());
  }
}

void write_normalized(const ExperimentConfig& cfg) {
  fs::create_directories(cfg.run_dir());
  std::ofstream(cfg.run_dir() / "config.normalized.json", std::ios::binary) << to_json(cfg).dump(2) << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Selective parameter freezing experiments on a tiny language model"};
  app.footer(kConfigKeys);
  app.require_subcommand(1);

  std::string config;
  auto with_config = [&](CLI::App* sub) {
    sub->add_option("-c,--config", config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
    return sub;
  };

  std::string out;
  std::string checkpoint;
  std::size_t samples = 100;
  std::optional<double> top_fraction;
  std::optional<double> threshold;

  auto* validate = with_config(app.add_subcommand("validate", "check a config and print it with defaults filled in"));
  auto* gen = with_config(app.add_subcommand("gen-data", "write the vocabulary, corpora and choice items as text"));
  gen->add_option("-o,--out", out, "output directory (default <run dir>/data)");
  auto* train = with_config(app.add_subcommand("train-general", "train on the general corpus, save general.ckpt"));
  auto* estimate = with_config(app.add_subcommand("estimate-importance", "score parameters on the general data"));
  estimate->add_option("--checkpoint", checkpoint, "model checkpoint")->required()->check(CLI::ExistingFile);
  estimate->add_option("-o,--out", out, "output checkpoint (default <run dir>/importance.ckpt)");
  auto* part = with_config(app.add_subcommand("partition", "split scored parameters into core and non-core"));
  part->add_option("--checkpoint", checkpoint, "checkpoint holding importance scores")
      ->required()
      ->check(CLI::ExistingFile);
  auto* tf = part->add_option("--top-fraction", top_fraction, "override importance.top_fraction");
  part->add_option("--threshold", threshold, "override with an absolute threshold")->excludes(tf);
  part->add_option("-o,--out", out, "output checkpoint (default <run dir>/partition.ckpt)");
  auto* finetune = with_config(app.add_subcommand("finetune", "domain stage for the configured strategy"));
  finetune->add_option("--checkpoint", checkpoint, "general-stage checkpoint, optionally with a mask")
      ->required()
      ->check(CLI::ExistingFile);
  auto* eval = with_config(app.add_subcommand("eval", "evaluate a checkpoint on both tasks"));
  eval->add_option("--checkpoint", checkpoint, "model checkpoint")->required()->check(CLI::ExistingFile);
  auto* pipeline = with_config(app.add_subcommand("pipeline", "run every stage for one strategy"));
  auto* matrix = with_config(app.add_subcommand("matrix", "run every strategy under \"matrix\" on shared stages"));
  auto* cost = with_config(app.add_subcommand("cost", "time grad vs Fisher importance, report storage bytes"));
  cost->add_option("-n,--samples", samples, "samples per estimator");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(ExitCode::kConfig);
  }

  try {
    const fs::path config_path(config);
    if (matrix->parsed()) {
      const MatrixReport report = run_matrix(expand_matrix(read_json(config_path), config_path.parent_path()));
      std::cout << format_matrix(report);
      return 0;
    }

    const ExperimentConfig cfg = load_config(config_path);
    if (validate->parsed()) {
      std::cout << to_json(cfg).dump(2) << '\n';
    } else if (gen->parsed()) {
      const fs::path dir = out.empty() ? cfg.run_dir() / "data" : fs::path(out);
      export_datasets(load_datasets(cfg), dir);
      std::cout << dir.string() << '\n';
    } else if (train->parsed()) {
      write_normalized(cfg);
      MetricsSink sink(cfg.run_dir());
      const Prepared p = prepare(cfg, &sink);
      const fs::path path = cfg.run_dir() / (p.interrupted ? "interrupted.ckpt" : "general.ckpt");
      save_checkpoint(path, p.model);
      print_record(p.general_records.back());
      if (p.interrupted) {
        std::cerr << "interrupted; saved " << path.string() << '\n';
        return static_cast<int>(ExitCode::kTraining);
      }
    } else if (estimate->parsed()) {
      const Datasets data = load_datasets(cfg);
      TinyLM model = load_model(checkpoint, resolve_model(cfg, data));
      if (cfg.importance.estimator == Estimator::kPath) {
        throw ConfigError("the path estimator records a training trajectory; use `pipeline`");
      }
      const ImportanceMap imap = estimate_importance(model, cfg.importance, data);
      const fs::path path = out.empty() ? cfg.run_dir() / "importance.ckpt" : fs::path(out);
      fs::create_directories(path.parent_path());
      save_checkpoint(path, model, &imap);
      std::ofstream csv(path.parent_path() / "importance_summary.csv", std::ios::binary);
      write_summary_csv(csv, importance_summary(imap));
      std::cout << path.string() << '\n';
    } else if (part->parsed()) {
      const Datasets data = load_datasets(cfg);
      CheckpointData rest;
      const TinyLM model = load_model(checkpoint, resolve_model(cfg, data), &rest);
      if (!rest.importance) throw CheckpointError("'" + checkpoint + "' holds no importance scores");
      PartitionCriterion criterion = cfg.importance.criterion;
      if (top_fraction) criterion = PartitionCriterion::top_fraction(*top_fraction);
      if (threshold) criterion = PartitionCriterion::threshold(*threshold);
      if (criterion.kind == PartitionCriterion::Kind::kTopFraction && !(criterion.value >= 0 && criterion.value <= 1)) {
        throw ConfigError("top fraction must lie in [0, 1]");
      }
      const FreezeMask mask = partition(*rest.importance, criterion);
      const fs::path path = out.empty() ? cfg.run_dir() / "partition.ckpt" : fs::path(out);
      fs::create_directories(path.parent_path());
      save_checkpoint(path, model, &*rest.importance, &mask);
      std::cout << nlohmann::json{{"checkpoint", path.string()},
                                  {"threshold", mask.threshold},
                                  {"core_fraction", mask.core_fraction},
                                  {"core_count", mask.core_count},
                                  {"total", mask.total}}
                       .dump()
                << '\n';
    } else if (finetune->parsed()) {
      write_normalized(cfg);
      MetricsSink sink(cfg.run_dir());
      const Prepared p = prepare_from_checkpoint(cfg, checkpoint);
      const StrategyResult r = run_strategy(cfg, p, cfg.run_dir(), sink);
      print_result(r);
      if (r.interrupted) return static_cast<int>(ExitCode::kTraining);
    } else if (eval->parsed()) {
      const Datasets data = load_datasets(cfg);
      MetricsRecord r = evaluate_record(load_model(checkpoint, resolve_model(cfg, data)), data);
      r.run_id = cfg.run_id;
      r.stage = "eval";
      print_record(r);
    } else if (pipeline->parsed()) {
      const PipelineResult r = run_pipeline(cfg);
      if (r.interrupted) {
        std::cerr << "interrupted; partial results in " << r.run_dir.string() << '\n';
        return static_cast<int>(ExitCode::kTraining);
      }
      print_result(r.result);
    } else if (cost->parsed()) {
      std::cout << to_json(measure_importance_cost(cfg, samples)).dump() << '\n';
    }
    return 0;
  } catch (const Error& e) {
    std::cerr << e.what() << '\n';
    return static_cast<int>(e.code());
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::kInternal);
  }
}
