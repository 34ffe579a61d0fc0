// SPDX-License-Identifier: Apache-2.0
#include "sfrz/training.hpp"

#include "sfrz/errors.hpp"
#include "sfrz/random.hpp"

#include <cmath>
#include <limits>

namespace sfrz {

const char* to_string(OptimizerKind kind) { return kind == OptimizerKind::kSgd ? "sgd" : "adam"; }

// ---------------------------------------------------------------------------
// Optimizer

OptimizerState OptimizerState::create(const OptimizerConfig& config, const ParameterRegistry& registry) {
  if (!(config.lr > 0.0) || !std::isfinite(config.lr)) throw ConfigError("learning rate must be positive");
  OptimizerState s;
  s.config = config;
  for (const auto& e : registry) {
    s.ids.push_back(e.id);
    const auto n = static_cast<Eigen::Index>(e.tensor.size());
    s.m.push_back(VecXd::Zero(n));
    s.v.push_back(VecXd::Zero(n));
  }
  return s;
}

void step_masked(ParameterRegistry& registry, OptimizerState& state, const FreezeMask* mask) {
  if (state.ids.size() != registry.size()) throw ContractError("optimizer state does not match the registry");
  std::vector<const FreezeEntry*> frozen(registry.size(), nullptr);
  for (std::size_t i = 0; i < registry.size(); ++i) {
    const auto& e = registry[i];
    if (state.ids[i] != e.id || state.m[i].size() != static_cast<Eigen::Index>(e.tensor.size())) {
      throw ContractError("optimizer state does not match registry entry '" + e.id + "'");
    }
    if (mask == nullptr || !e.tensor.requires_grad()) continue;
    const FreezeEntry* fe = mask->find(e.id);
    if (fe == nullptr || fe->frozen.size() != e.tensor.size()) {
      throw ContractError("freeze mask does not cover trainable entry '" + e.id + "'");
    }
    frozen[i] = fe;
  }

  // Frozen gradients are zeroed before anything reads them.
  double sq_norm = 0.0;
  for (std::size_t i = 0; i < registry.size(); ++i) {
    Tensor& t = registry[i].tensor;
    if (!t.requires_grad() || !t.has_grad()) continue;
    VecXd& g = t.grad_buffer();
    if (frozen[i]) {
      for (std::size_t k = 0; k < frozen[i]->frozen.size(); ++k) {
        if (frozen[i]->frozen[k]) g[static_cast<Eigen::Index>(k)] = 0.0;
      }
    }
    sq_norm += g.squaredNorm();
  }
  double clip = 1.0;
  const auto& cfg = state.config;
  if (cfg.clip_norm > 0.0) {
    const double norm = std::sqrt(sq_norm);
    if (norm > cfg.clip_norm) clip = cfg.clip_norm / norm;
  }

  state.t += 1;
  const double t = static_cast<double>(state.t);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < registry.size(); ++i) {
    Tensor& tensor = registry[i].tensor;
    if (!tensor.requires_grad()) continue;
    const bool has_grad = tensor.has_grad();
    VecXd& w = tensor.data();
    VecXd& m = state.m[i];
    VecXd& v = state.v[i];
    for (Eigen::Index k = 0; k < w.size(); ++k) {
      if (frozen[i] && frozen[i]->frozen[static_cast<std::size_t>(k)]) continue;
      const double g = has_grad ? tensor.grad()[k] * clip : 0.0;
      if (cfg.kind == OptimizerKind::kSgd) {
        w[k] -= cfg.lr * g;
      } else {
        m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
        v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
        const double mhat = m[k] / bc1;
        const double vhat = v[k] / bc2;
        w[k] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Penalty

PenaltyConfig make_penalty(const ParameterRegistry& anchor, const ImportanceMap& weights, double lambda) {
  PenaltyConfig p;
  p.lambda = lambda;
  for (const auto& e : weights.entries) {
    const Tensor* t = anchor.find(e.param_id);
    if (t == nullptr || t->size() != static_cast<std::size_t>(e.scores.size())) {
      throw ConfigError("penalty weight '" + e.param_id + "' has no matching anchor parameter");
    }
    p.terms.push_back({e.param_id, t->data(), e.scores});
  }
  return p;
}

Var loss_with_penalty(Var task_loss, const std::map<std::string, Var>& bound, const PenaltyConfig& penalty) {
  if (!(penalty.lambda >= 0.0)) throw ConfigError("penalty strength must be >= 0");
  if (penalty.lambda == 0.0) return task_loss;
  if (penalty.terms.empty()) throw ConfigError("penalty has no anchor snapshot");
  Tape& tape = *task_loss.tape();
  std::optional<Var> total;
  for (const auto& term : penalty.terms) {
    auto it = bound.find(term.param_id);
    if (it == bound.end()) throw ConfigError("penalty anchor '" + term.param_id + "' is not bound on the tape");
    const Var w = it->second;
    if (w.value().size() != term.anchor.size() || term.weight.size() != term.anchor.size()) {
      throw ConfigError("penalty anchor '" + term.param_id + "' does not match the parameter size");
    }
    const Var diff = sub(w, tape.constant(w.shape(), term.anchor));
    const Var weighted = mul(tape.constant(w.shape(), term.weight), mul(diff, diff));
    const Var s = sum(weighted);
    total = total ? add(*total, s) : s;
  }
  return add(task_loss, scale(*total, 0.5 * penalty.lambda));
}

// ---------------------------------------------------------------------------
// Strategies

const char* to_string(Strategy s) {
  switch (s) {
    case Strategy::kBase: return "base";
    case Strategy::kFull: return "full";
    case Strategy::kLoraMu: return "lora_mu";
    case Strategy::kLoraNuMu: return "lora_nu_mu";
    case Strategy::kEwcLora: return "ewclora";
    case Strategy::kRsLora: return "rslora";
    case Strategy::kSelective: return "selective";
  }
  return "?";
}

std::optional<Strategy> parse_strategy(const std::string& name) {
  for (auto s : {Strategy::kBase, Strategy::kFull, Strategy::kLoraMu, Strategy::kLoraNuMu, Strategy::kEwcLora,
                 Strategy::kRsLora, Strategy::kSelective}) {
    if (name == to_string(s)) return s;
  }
  return std::nullopt;
}

bool uses_lora(Strategy s) {
  return s == Strategy::kLoraMu || s == Strategy::kLoraNuMu || s == Strategy::kEwcLora || s == Strategy::kRsLora;
}

// ---------------------------------------------------------------------------
// Loops

TrainLog train_epochs(TinyLM& model, std::span<const Example> examples, std::size_t epochs, OptimizerState& opt,
                      const LoopOptions& options) {
  TrainLog log;
  if (epochs == 0) return log;
  if (examples.empty()) throw DataError("training set is empty");
  if (examples.size() < options.batch_size) {
    throw DataError("training set has " + std::to_string(examples.size()) + " examples, fewer than batch size " +
                    std::to_string(options.batch_size));
  }
  const std::vector<Example> pool(examples.begin(), examples.end());
  ParameterRegistry& params = model.params();

  for (std::size_t epoch = 1; epoch <= epochs; ++epoch) {
    EpochStats stats;
    stats.epoch = epoch;
    for (const Batch& batch : batches(pool, options.batch_size, derive_seed(options.shuffle_seed, epoch))) {
      if (!options.stop_file.empty() && std::filesystem::exists(options.stop_file)) {
        log.interrupted = true;
        break;
      }
      std::vector<TokenSeq> xs;
      std::vector<int> ys;
      for (const auto& ex : batch) {
        xs.push_back(ex.x);
        ys.insert(ys.end(), ex.y.begin(), ex.y.end());
      }
      params.zero_grad();
      Tape tape;
      ForwardPass pass = model.forward(tape, xs);
      const Var task = softmax_cross_entropy(pass.logits, ys);
      const Var total = options.penalty ? loss_with_penalty(task, pass.effective, *options.penalty) : task;
      const double task_value = task.item();
      const double total_value = total.item();
      if (!std::isfinite(total_value)) {
        throw TrainingError("loss became non-finite at step " + std::to_string(log.steps + 1));
      }
      tape.backward(total);
      if (options.hook) options.hook->before_step(params);
      step_masked(params, opt, options.mask);
      if (options.hook) options.hook->after_step(params);

      ++log.steps;
      ++stats.steps;
      stats.task_loss += task_value;
      stats.penalty += total_value - task_value;
    }
    if (stats.steps > 0) {
      stats.task_loss /= static_cast<double>(stats.steps);
      stats.penalty /= static_cast<double>(stats.steps);
    }
    log.epochs.push_back(stats);
    if (options.on_epoch) options.on_epoch(stats);
    if (log.interrupted) break;
  }
  params.clear_grad();
  return log;
}

TrainLog train_general(TinyLM& model, std::span<const Example> examples, std::size_t epochs, OptimizerState& opt,
                       const LoopOptions& options) {
  LoopOptions plain = options;
  plain.mask = nullptr;
  plain.penalty = nullptr;
  return train_epochs(model, examples, epochs, opt, plain);
}

TrainLog train_domain(TinyLM& model, std::span<const Example> examples, std::size_t epochs, OptimizerState& opt,
                      const DomainPlan& plan, LoopOptions options) {
  options.mask = nullptr;
  options.penalty = plan.penalty;
  switch (plan.strategy) {
    case Strategy::kBase:
      return {};
    case Strategy::kSelective:
      if (plan.mask == nullptr) throw ConfigError("selective strategy requires a freeze mask");
      options.mask = plan.mask;
      break;
    case Strategy::kFull:
      break;
    case Strategy::kLoraMu:
    case Strategy::kLoraNuMu:
    case Strategy::kEwcLora:
    case Strategy::kRsLora: {
      if (!model.has_adapters()) throw ConfigError(std::string(to_string(plan.strategy)) + " requires LoRA adapters");
      const auto want = plan.strategy == Strategy::kRsLora ? LoraScaleMode::kRankStabilized : LoraScaleMode::kStandard;
      for (const auto& a : model.adapters()) {
        if (a.mode != want) {
          throw ConfigError(std::string(to_string(plan.strategy)) + " requires " + to_string(want) + " adapters");
        }
      }
      if (plan.strategy == Strategy::kEwcLora && plan.penalty == nullptr) {
        throw ConfigError("ewclora requires a penalty with Fisher weights");
      }
      break;
    }
  }
  return train_epochs(model, examples, epochs, opt, options);
}

// ---------------------------------------------------------------------------
// Evaluation

namespace {

// -log softmax(row)[target], stabilized by the row max.
double row_nll(const Eigen::Ref<const Eigen::RowVectorXd>& row, int target) {
  const double mx = row.maxCoeff();
  const double lse = mx + std::log((row.array() - mx).exp().sum());
  return lse - row[target];
}

constexpr std::size_t kEvalChunk = 64;

}  // namespace

double continuation_loss(const TinyLM& model, const TokenSeq& prompt, const TokenSeq& continuation) {
  if (prompt.empty() || continuation.empty()) throw DataError("choice prompt and continuation must be non-empty");
  TokenSeq seq = prompt;
  seq.insert(seq.end(), continuation.begin(), continuation.end());
  const TokenSeq x(seq.begin(), seq.end() - 1);
  const RowMatXd logits = model.predict(x);
  double total = 0.0;
  for (std::size_t pos = prompt.size() - 1; pos + 1 < seq.size(); ++pos) total += row_nll(logits.row(pos), seq[pos + 1]);
  return total / static_cast<double>(continuation.size());
}

EvalResult evaluate(const TinyLM& model, std::span<const Example> eval, std::span<const ChoiceItem> items) {
  if (eval.empty()) throw DataError("evaluation set is empty");
  EvalResult r;
  double total = 0.0;
  for (std::size_t start = 0; start < eval.size(); start += kEvalChunk) {
    const std::size_t end = std::min(eval.size(), start + kEvalChunk);
    std::vector<TokenSeq> xs;
    for (std::size_t i = start; i < end; ++i) xs.push_back(eval[i].x);
    const RowMatXd logits = model.predict(xs);
    Eigen::Index row = 0;
    for (std::size_t i = start; i < end; ++i) {
      for (int y : eval[i].y) total += row_nll(logits.row(row++), y);
      r.tokens += eval[i].y.size();
    }
  }
  r.mean_loss = total / static_cast<double>(r.tokens);
  r.ppl = std::exp(r.mean_loss);

  if (!items.empty()) {
    std::size_t correct = 0;
    for (const auto& item : items) {
      if (item.candidates.size() < 2 || item.correct >= item.candidates.size()) {
        throw DataError("malformed choice item");
      }
      std::size_t best = 0;
      double best_loss = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < item.candidates.size(); ++c) {
        const double l = continuation_loss(model, item.prompt, item.candidates[c]);
        if (l < best_loss) {
          best_loss = l;
          best = c;
        }
      }
      if (best == item.correct) ++correct;
    }
    r.items = items.size();
    r.accuracy = static_cast<double>(correct) / static_cast<double>(items.size());
  }
  return r;
}

}  // namespace sfrz
