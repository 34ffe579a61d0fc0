// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include "sfrz/errors.hpp"
#include "sfrz/experiment.hpp"

#include <filesystem>
#include <map>
#include <fstream>
#include <sstream>

using namespace sfrz;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "sfrz_test_experiment" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// Small enough that a full pipeline takes well under a second.
json tiny(const std::string& strategy, const fs::path& out) {
  return {{"run_id", "t"},
          {"output_dir", out.string()},
          {"seed", 3},
          {"model", {{"embed_dim", 4}, {"window", 2}, {"hidden", 8}, {"depth", 1}, {"context", 6}}},
          {"data", {{"general_size", 60}, {"domain_size", 40}, {"seq_len", 7}, {"choice_items", 20},
                    {"prompt_len", 3}, {"continuation_len", 2}}},
          {"general", {{"epochs", 2}, {"batch_size", 8}, {"lr", 0.01}}},
          {"importance", {{"max_samples", 40}}},
          {"domain", {{"strategy", strategy}, {"epochs", 2}, {"batch_size", 8}, {"lr", 0.01}, {"nu_epochs", 1},
                      {"lora", {{"rank", 2}, {"alpha", 4.0}}}}}};
}

std::string config_error(const json& j) {
  try {
    parse_config(j);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST_CASE("config errors are collected, not reported one at a time") {
  json j = tiny("selective", "runs");
  j["importance"]["top_fraction"] = 1.3;
  j["general"]["lr"] = -1.0;
  j["model"]["colour"] = "blue";
  j["domain"]["epochs"] = "five";
  const std::string msg = config_error(j);
  CHECK(msg.find("4 problems") != std::string::npos);
  CHECK(msg.find("model.colour is not a recognized key") != std::string::npos);
  CHECK(msg.find("domain.epochs must be a non-negative integer") != std::string::npos);
  CHECK(msg.find("importance.top_fraction must lie in [0, 1], got 1.3") != std::string::npos);
  CHECK(msg.find("general.lr must be > 0") != std::string::npos);
}

TEST_CASE("a missing strategy is named") {
  json j = tiny("full", "runs");
  j["domain"].erase("strategy");
  CHECK(config_error(j).find("domain.strategy is required") != std::string::npos);
  j["domain"]["strategy"] = "everything";
  CHECK(config_error(j).find("unknown value 'everything'") != std::string::npos);
}

TEST_CASE("cross-field checks") {
  json j = tiny("full", "runs");
  j["data"]["seq_len"] = 6;
  CHECK(config_error(j).find("data.seq_len must be at least model.context + 1 (7)") != std::string::npos);

  j = tiny("selective", "runs");
  j["importance"]["threshold"] = 0.5;
  CHECK(config_error(j).find("sets both top_fraction and threshold") == std::string::npos);
  j["importance"]["top_fraction"] = 0.2;
  CHECK(config_error(j).find("sets both top_fraction and threshold") != std::string::npos);

  j = tiny("selective", "runs");
  j["domain"]["lambda"] = 1.0;
  j["importance"]["over"] = "adapters";
  CHECK(config_error(j).find("needs importance.over = 'base'") != std::string::npos);

  j = tiny("full", "runs");
  j["data"]["source"] = "files";
  j["data"]["general_path"] = "/nonexistent/general.txt";
  const std::string msg = config_error(j);
  CHECK(msg.find("data.general_path '/nonexistent/general.txt' does not exist") != std::string::npos);
  CHECK(msg.find("data.domain_path is required") != std::string::npos);
}

TEST_CASE("normalized config echoes every default and parses back to itself") {
  const ExperimentConfig cfg = parse_config(json{{"domain", {{"strategy", "selective"}}}});
  const json n = to_json(cfg);
  CHECK(n["importance"]["top_fraction"] == 0.1);
  CHECK(n["importance"]["estimator"] == "grad");
  CHECK(n["importance"]["over"] == "base");
  CHECK(n["general"]["shuffle_seed"] == 11);
  CHECK(n["domain"]["shuffle_seed"] == 12);
  CHECK(n["domain"]["lora"]["seed"] == 13);
  CHECK(n["domain"]["lambda"] == 0.0);
  CHECK(n["data"]["skew"] == 0.7);
  CHECK(!n["model"].contains("vocab_size"));
  CHECK(to_json(parse_config(n)) == n);
}

TEST_CASE("relative paths resolve against the config directory") {
  const fs::path dir = scratch_dir("relative");
  std::ofstream(dir / "c.json") << R"({"output_dir": "out", "domain": {"strategy": "base"}})";
  CHECK(load_config(dir / "c.json").output_dir == dir / "out");
  std::ofstream(dir / "bad.json") << "{ nope";
  CHECK_THROWS_AS(load_config(dir / "bad.json"), ConfigError);
  CHECK_THROWS_AS(load_config(dir / "missing.json"), ConfigError);
}

TEST_CASE("base strategy leaves the general model untouched") {
  const fs::path out = scratch_dir("base");
  const PipelineResult r = run_pipeline(parse_config(tiny("base", out)));
  CHECK(!r.interrupted);
  CHECK(r.result.delta_general_ppl == 0.0);
  CHECK(r.result.final.general_ppl == r.result.reference.general_ppl);
  const ModelConfig mc = load_checkpoint(r.run_dir / "general.ckpt").config;
  const TinyLM loaded = load_model(r.run_dir / "final.ckpt", mc);
  const TinyLM general = load_model(r.run_dir / "general.ckpt", mc);
  CHECK(fingerprint(loaded.params()) == fingerprint(general.params()));
}

TEST_CASE("selective pipeline writes its artifacts") {
  const fs::path out = scratch_dir("selective");
  const PipelineResult r = run_pipeline(parse_config(tiny("selective", out)));
  REQUIRE(r.result.mask.has_value());
  CHECK(r.result.mask->core_fraction == doctest::Approx(0.1).epsilon(0.02));
  CHECK(r.result.final.core_fraction == r.result.mask->core_fraction);
  for (const char* f : {"config.normalized.json", "metrics.csv", "metrics.jsonl", "importance_summary.csv",
                        "general.ckpt", "partition.ckpt", "final.ckpt"}) {
    CHECK_MESSAGE(fs::exists(r.run_dir / f), f);
  }
  const CheckpointData ck = load_checkpoint(r.run_dir / "final.ckpt");
  REQUIRE(ck.mask.has_value());
  REQUIRE(ck.importance.has_value());
  CHECK(ck.mask->core_fraction == r.result.mask->core_fraction);

  // Stages in order: general epochs 0..2, pre_domain, domain 1..2, final.
  std::vector<std::string> stages;
  for (const auto& rec : r.records) stages.push_back(rec.stage);
  CHECK(stages == std::vector<std::string>{"general", "general", "general", "pre_domain", "domain", "domain", "final"});
  std::istringstream csv(slurp(r.run_dir / "metrics.csv"));
  std::string line;
  std::getline(csv, line);
  CHECK(line == metrics_csv_header());
  std::size_t rows = 0;
  while (std::getline(csv, line)) ++rows;
  CHECK(rows == r.records.size());
  CHECK(r.records.back().importance_bytes == importance_storage_bytes(ck.importance->total_scalars()));
}

TEST_CASE("frozen scalars survive the domain stage bitwise") {
  const fs::path out = scratch_dir("frozen");
  const ExperimentConfig cfg = parse_config(tiny("selective", out));
  const PipelineResult r = run_pipeline(cfg);
  const ModelConfig mc = load_checkpoint(r.run_dir / "general.ckpt").config;
  const TinyLM general = load_model(r.run_dir / "general.ckpt", mc);
  const TinyLM final = load_model(r.run_dir / "final.ckpt", mc);
  std::size_t frozen = 0, moved = 0;
  for (const auto& e : r.result.mask->entries) {
    const VecXd& before = general.params().at(e.param_id).data();
    const VecXd& after = final.params().at(e.param_id).data();
    for (std::size_t i = 0; i < e.frozen.size(); ++i) {
      const auto k = static_cast<Eigen::Index>(i);
      if (e.frozen[i]) {
        ++frozen;
        CHECK(before(k) == after(k));
      } else {
        moved += before(k) != after(k);
      }
    }
  }
  CHECK(frozen > 0);
  CHECK(moved > 0);
}

TEST_CASE("reruns are byte identical and the checkpoint reproduces the metrics") {
  const fs::path a = scratch_dir("rerun_a");
  const fs::path b = scratch_dir("rerun_b");
  const PipelineResult ra = run_pipeline(parse_config(tiny("lora_nu_mu", a)));
  json jb = tiny("lora_nu_mu", b);
  const PipelineResult rb = run_pipeline(parse_config(jb));
  CHECK(slurp(ra.run_dir / "metrics.csv") == slurp(rb.run_dir / "metrics.csv"));
  CHECK(slurp(ra.run_dir / "final.ckpt") == slurp(rb.run_dir / "final.ckpt"));
  CHECK(ra.result.final_hash == rb.result.final_hash);

  const ExperimentConfig cfg = parse_config(tiny("lora_nu_mu", a));
  const Datasets data = load_datasets(cfg);
  const MetricsRecord again = evaluate_record(load_model(ra.run_dir / "final.ckpt", resolve_model(cfg, data)), data);
  CHECK(again.general_ppl == ra.result.final.general_ppl);
  CHECK(again.domain_ppl == ra.result.final.domain_ppl);
  CHECK(again.domain_acc == ra.result.final.domain_acc);
}

TEST_CASE("every strategy runs end to end") {
  for (const char* s : {"full", "lora_mu", "lora_nu_mu", "ewclora", "rslora"}) {
    CAPTURE(s);
    const PipelineResult r = run_pipeline(parse_config(tiny(s, scratch_dir(std::string("all_") + s))));
    CHECK(std::isfinite(r.result.final.general_ppl));
    CHECK(r.result.final.domain_ppl < r.result.pre_domain.domain_ppl);
  }
}

TEST_CASE("path and adapter-space importance") {
  json j = tiny("selective", scratch_dir("path"));
  j["importance"]["estimator"] = "path";
  const PipelineResult p = run_pipeline(parse_config(j));
  REQUIRE(p.result.importance.has_value());
  CHECK(p.result.importance->total_scalars() == load_checkpoint(p.run_dir / "general.ckpt").registry.total_scalars());

  j = tiny("selective", scratch_dir("over_adapters"));
  j["importance"]["over"] = "adapters";
  const PipelineResult a = run_pipeline(parse_config(j));
  REQUIRE(a.result.importance.has_value());
  for (const auto& e : a.result.importance->entries) {
    CHECK(e.param_id.find(".lora_") != std::string::npos);
  }
}

TEST_CASE("stop file interrupts and leaves a checkpoint") {
  const fs::path out = scratch_dir("stop");
  json j = tiny("full", out);
  fs::create_directories(out / "t");
  std::ofstream(out / "t" / "STOP") << "";
  const PipelineResult r = run_pipeline(parse_config(j));
  CHECK(r.interrupted);
  CHECK(fs::exists(r.run_dir / "general.ckpt"));
}

TEST_CASE("matrix shares the general stage and rejects mismatched configs") {
  const fs::path out = scratch_dir("matrix");
  json j = tiny("base", out);
  j["matrix"] = {{"strategies", {"base", "full", "selective"}}};
  const auto configs = expand_matrix(j);
  REQUIRE(configs.size() == 3);
  const MatrixReport rep = run_matrix(configs);
  REQUIRE(rep.rows.size() == 3);
  for (const auto& r : rep.rows) CHECK(r.reference.general_ppl == rep.rows[0].reference.general_ppl);
  CHECK(rep.rows[0].delta_general_ppl == 0.0);
  const std::string txt = slurp(out / "t" / "matrix.txt");
  CHECK(txt.find("selective") != std::string::npos);
  CHECK(slurp(out / "t" / "matrix.jsonl") == matrix_jsonl(rep));

  auto bad = configs;
  bad[1].seed = 99;
  CHECK_THROWS_AS(run_matrix(bad), ConfigError);
  bad = configs;
  bad[2].domain.strategy = Strategy::kBase;
  CHECK_THROWS_AS(run_matrix(bad), ConfigError);
  j["matrix"]["strategies"] = {"full", "full"};
  CHECK_THROWS_AS(expand_matrix(j), ConfigError);
}

TEST_CASE("matrix overrides apply per strategy") {
  json j = tiny("base", "runs");
  j["matrix"] = {{"strategies", {"full", "selective"}},
                 {"overrides", {{"selective", {{"domain", {{"lambda", 2.5}}}}}}}};
  const auto configs = expand_matrix(j);
  CHECK(configs[0].domain.lambda == 0.0);
  CHECK(configs[1].domain.lambda == 2.5);
}

TEST_CASE("importance cost report") {
  const ExperimentConfig cfg = parse_config(tiny("selective", "runs"));
  const CostReport r = measure_importance_cost(cfg, 10);
  CHECK(r.samples == 10);
  CHECK(r.importance_bytes == 8 * r.scalars + 30);
  CHECK(r.grad_ms >= 0.0);
  CHECK_THROWS_AS(measure_importance_cost(cfg, 0), DataError);
}

TEST_CASE("files source reads text and items") {
  const fs::path dir = scratch_dir("files");
  const ExperimentConfig synth = parse_config(tiny("full", dir));
  export_datasets(load_datasets(synth), dir / "data");
  json j = tiny("full", dir);
  j["data"] = {{"source", "files"},
               {"general_path", (dir / "data" / "general_train.txt").string()},
               {"domain_path", (dir / "data" / "domain_train.txt").string()},
               {"domain_items", (dir / "data" / "domain_items.jsonl").string()},
               {"seq_len", 7}};
  const ExperimentConfig cfg = parse_config(j);
  const Datasets d = load_datasets(cfg);
  CHECK(d.vocab.size() <= 16);
  CHECK(d.domain_items.size() == 20);
  CHECK(!d.general_eval.empty());
  CHECK(!d.domain_train.empty());
}

TEST_CASE("metric records satisfy their invariants") {
  const PipelineResult r = run_pipeline(parse_config(tiny("lora_nu_mu", scratch_dir("invariants"))));
  std::map<std::string, std::size_t> last_epoch;
  for (const auto& rec : r.records) {
    CHECK(rec.general_ppl > 0.0);
    CHECK(rec.domain_ppl > 0.0);
    for (const auto& acc : {rec.general_acc, rec.domain_acc}) {
      REQUIRE(acc.has_value());
      CHECK(*acc >= 0.0);
      CHECK(*acc <= 1.0);
    }
    CHECK(rec.wall_ms == 0.0);
    const std::string key = rec.strategy + "/" + rec.stage;
    if (last_epoch.count(key)) CHECK(rec.epoch > last_epoch[key]);
    last_epoch[key] = rec.epoch;
  }
  CHECK(last_epoch.count("lora_nu_mu/general_adapters") == 1);
}

TEST_CASE("a failing stage is named and earlier rows stay on disk") {
  json j = tiny("full", scratch_dir("diverge"));
  j["general"]["optimizer"] = "sgd";
  j["general"]["lr"] = 1e300;
  try {
    run_pipeline(parse_config(j));
    FAIL("expected a training error");
  } catch (const Error& e) {
    CHECK(e.code() == ExitCode::kTraining);
    CHECK(std::string(e.what()).find("stage 'general' failed") != std::string::npos);
  }
  const std::string csv = slurp(fs::path(j["output_dir"].get<std::string>()) / "t" / "metrics.csv");
  CHECK(csv.find("t,shared,general,0,") != std::string::npos);
}
