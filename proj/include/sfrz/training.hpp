// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "sfrz/data.hpp"
#include "sfrz/importance.hpp"
#include "sfrz/model.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace sfrz {

enum class OptimizerKind { kSgd, kAdam };

const char* to_string(OptimizerKind kind);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kAdam;
  double lr = 8e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Global-norm gradient clipping over updatable scalars; 0 disables.
  double clip_norm = 0.0;
};

// Moments are aligned with the registry layout captured at creation.
struct OptimizerState {
  OptimizerConfig config;
  std::size_t t = 0;
  std::vector<std::string> ids;
  std::vector<VecXd> m;
  std::vector<VecXd> v;

  static OptimizerState create(const OptimizerConfig& config, const ParameterRegistry& registry);
};

// One optimizer step over trainable entries. Scalars frozen by `mask` have
// their gradient zeroed and neither their value nor their moments touched.
// Every trainable entry must be covered by the mask when one is given.
void step_masked(ParameterRegistry& registry, OptimizerState& state, const FreezeMask* mask = nullptr);

struct PenaltyTerm {
  std::string param_id;
  VecXd anchor;
  VecXd weight;
};

// (lambda / 2) * sum_i weight_i * (w_i - anchor_i)^2 over the listed terms.
struct PenaltyConfig {
  double lambda = 0.0;
  std::vector<PenaltyTerm> terms;
};

// Anchors every parameter named in `weights` at its current value in `anchor`.
PenaltyConfig make_penalty(const ParameterRegistry& anchor, const ImportanceMap& weights, double lambda);

// `bound` maps parameter ids to their (effective) values on the loss tape.
// Returns task_loss itself when lambda is zero.
Var loss_with_penalty(Var task_loss, const std::map<std::string, Var>& bound, const PenaltyConfig& penalty);

enum class Strategy { kBase, kFull, kLoraMu, kLoraNuMu, kEwcLora, kRsLora, kSelective };

const char* to_string(Strategy s);
std::optional<Strategy> parse_strategy(const std::string& name);
bool uses_lora(Strategy s);

struct EpochStats {
  std::size_t epoch = 0;
  std::size_t steps = 0;
  double task_loss = 0.0;
  double penalty = 0.0;
};

struct TrainLog {
  std::vector<EpochStats> epochs;
  std::size_t steps = 0;
  bool interrupted = false;
};

struct LoopOptions {
  std::size_t batch_size = 20;
  std::uint64_t shuffle_seed = 0;
  const FreezeMask* mask = nullptr;
  const PenaltyConfig* penalty = nullptr;
  StepHook* hook = nullptr;
  // Training stops before the next step once this file exists.
  std::filesystem::path stop_file;
  std::function<void(const EpochStats&)> on_epoch;
};

// Minibatch descent on the mean next-token loss. Throws TrainingError with
// the step index when the loss becomes non-finite.
TrainLog train_epochs(TinyLM& model, std::span<const Example> examples, std::size_t epochs, OptimizerState& opt,
                      const LoopOptions& options);

TrainLog train_general(TinyLM& model, std::span<const Example> examples, std::size_t epochs, OptimizerState& opt,
                       const LoopOptions& options);

struct DomainPlan {
  Strategy strategy = Strategy::kSelective;
  const FreezeMask* mask = nullptr;
  const PenaltyConfig* penalty = nullptr;
};

// Checks strategy prerequisites (mask for selective, adapters for LoRA
// variants, penalty for ewclora) then trains; base is a no-op.
TrainLog train_domain(TinyLM& model, std::span<const Example> examples, std::size_t epochs, OptimizerState& opt,
                      const DomainPlan& plan, LoopOptions options);

struct EvalResult {
  double mean_loss = 0.0;
  double ppl = 0.0;
  std::size_t tokens = 0;
  std::optional<double> accuracy;
  std::size_t items = 0;
};

// Per-token-averaged loss of `continuation` after `prompt`.
double continuation_loss(const TinyLM& model, const TokenSeq& prompt, const TokenSeq& continuation);

// ppl = exp(mean token cross-entropy); accuracy = fraction of items whose
// correct candidate has the lowest continuation loss (first index wins ties).
EvalResult evaluate(const TinyLM& model, std::span<const Example> eval, std::span<const ChoiceItem> items = {});

}  // namespace sfrz
