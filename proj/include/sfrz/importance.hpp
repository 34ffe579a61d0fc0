// SPDX-License-Identifier: Apache-2.0
//
// Per-scalar parameter importance and the core / non-core partition.
//
// Three estimators share one map type:
//   grad    I_i = mean_s |dl_s/dw_i|           (per-sample gradient magnitude)
//   fisher  F_i = mean_s (dl_s/dw_i)^2         (empirical diagonal Fisher)
//   path    w_i = max(0, sum_t -g_i(t) dw_i(t)) / (total displacement_i^2 + xi)
#pragma once

#include "sfrz/autodiff.hpp"
#include "sfrz/data.hpp"
#include "sfrz/model.hpp"

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <limits>
#include <span>
#include <string>
#include <vector>

namespace sfrz {

enum class Estimator : std::uint8_t { kGrad = 0, kFisher = 1, kPath = 2 };
enum class Granularity : std::uint8_t { kScalar = 0, kTensor = 1 };

const char* to_string(Estimator e);
const char* to_string(Granularity g);

struct ImportanceEntry {
  std::string param_id;
  VecXd scores;
};

struct ImportanceMap {
  Estimator estimator = Estimator::kGrad;
  Granularity granularity = Granularity::kScalar;
  std::size_t sample_count = 0;
  std::vector<ImportanceEntry> entries;

  std::size_t total_scalars() const;
  // Scores of all entries concatenated in entry order.
  VecXd flat() const;
  const ImportanceEntry* find(const std::string& id) const;
  // Nonnegative, finite, sample_count >= 1; throws ContractError otherwise.
  void validate() const;
};

// Replaces every score by the mean over its tensor.
ImportanceMap aggregate_per_tensor(const ImportanceMap& imap);

// Builds the loss of sample `index` on a fresh tape.
using SampleLoss = std::function<Var(Tape&, std::size_t index)>;

// Both estimators run one backward per sample over the trainable entries of
// `registry` and never modify parameter values. `num_samples` of the stream
// are available; min(num_samples, max_samples) are used.
ImportanceMap accumulate_grad_importance(ParameterRegistry& registry, std::size_t num_samples,
                                         const SampleLoss& loss, std::size_t max_samples);
ImportanceMap accumulate_fisher_diag(ParameterRegistry& registry, std::size_t num_samples, const SampleLoss& loss,
                                     std::size_t max_samples);

// Per-example next-token loss of a TinyLM.
SampleLoss lm_sample_loss(TinyLM& model, std::span<const Example> examples);

ImportanceMap accumulate_grad_importance(TinyLM& model, std::span<const Example> examples, std::size_t max_samples);
ImportanceMap accumulate_fisher_diag(TinyLM& model, std::span<const Example> examples, std::size_t max_samples);

// Observer around optimizer steps, used by the training loops.
class StepHook {
 public:
  virtual ~StepHook() = default;
  // Gradients are populated; values are pre-update.
  virtual void before_step(const ParameterRegistry& registry) = 0;
  virtual void after_step(const ParameterRegistry& registry) = 0;
};

// Online path-integral importance over the trainable entries present at
// construction.
class PathImportance final : public StepHook {
 public:
  explicit PathImportance(const ParameterRegistry& registry, double damping = 1e-3);

  void before_step(const ParameterRegistry& registry) override;
  void after_step(const ParameterRegistry& registry) override;

  std::size_t steps() const { return steps_; }
  // Unclamped, unnormalized running sum of -g * dw per entry.
  const std::vector<VecXd>& raw() const { return omega_; }
  ImportanceMap finalize(const ParameterRegistry& registry) const;

 private:
  void check_layout(const ParameterRegistry& registry) const;

  double damping_;
  std::vector<std::size_t> index_;
  std::vector<std::string> ids_;
  std::vector<VecXd> start_;
  std::vector<VecXd> omega_;
  std::vector<VecXd> pending_grad_;
  std::vector<VecXd> pending_value_;
  bool armed_ = false;
  std::size_t steps_ = 0;
};

struct FreezeEntry {
  std::string param_id;
  std::vector<std::uint8_t> frozen;  // 1 = core (frozen)
};

struct FreezeMask {
  double threshold = std::numeric_limits<double>::infinity();
  double core_fraction = 0.0;
  std::size_t core_count = 0;
  std::size_t total = 0;
  std::vector<FreezeEntry> entries;

  const FreezeEntry* find(const std::string& id) const;
};

struct PartitionCriterion {
  enum class Kind { kThreshold, kTopFraction };
  Kind kind = Kind::kTopFraction;
  double value = 0.1;

  static PartitionCriterion threshold(double theta) { return {Kind::kThreshold, theta}; }
  static PartitionCriterion top_fraction(double rho) { return {Kind::kTopFraction, rho}; }
};

// Threshold whose ">=" rule freezes at least ceil(rho * n) scores: the
// ceil(rho * n)-th largest score, or +inf when that count is zero.
double top_fraction_threshold(std::span<const double> scores, double rho);

// mask_i = (I_i >= theta). Ties are frozen.
FreezeMask partition(const ImportanceMap& imap, PartitionCriterion criterion);

// Quantile with linear interpolation between order statistics.
double quantile_sorted(std::span<const double> sorted, double q);

struct ScoreStats {
  std::string label;
  std::size_t offset = 0;
  std::size_t count = 0;
  double mean = 0.0;
  double min = 0.0;
  double q25 = 0.0;
  double q50 = 0.0;
  double q75 = 0.0;
  double q90 = 0.0;
  double q99 = 0.0;
  double max = 0.0;
};

struct HistogramBin {
  double lo = 0.0;
  double hi = 0.0;
  std::size_t count = 0;
};

struct ImportanceSummary {
  std::vector<ScoreStats> layers;
  ScoreStats overall;
  std::vector<HistogramBin> histogram;
};

ScoreStats score_stats(std::span<const double> scores, std::string label, std::size_t offset = 0);
ImportanceSummary importance_summary(const ImportanceMap& imap, std::size_t bins = 20);

// Rows: kind,label,offset_begin,offset_end,count,mean,min,q25,q50,q75,q90,q99,max
// followed by histogram rows.
void write_summary_csv(std::ostream& out, const ImportanceSummary& summary);

}  // namespace sfrz
