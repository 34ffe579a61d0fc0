// SPDX-License-Identifier: Apache-2.0
#include "sfrz/importance.hpp"

#include "sfrz/errors.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

namespace sfrz {

const char* to_string(Estimator e) {
  switch (e) {
    case Estimator::kGrad: return "grad";
    case Estimator::kFisher: return "fisher";
    case Estimator::kPath: return "path";
  }
  return "?";
}

const char* to_string(Granularity g) { return g == Granularity::kScalar ? "scalar" : "tensor"; }

std::size_t ImportanceMap::total_scalars() const {
  std::size_t n = 0;
  for (const auto& e : entries) n += static_cast<std::size_t>(e.scores.size());
  return n;
}

VecXd ImportanceMap::flat() const {
  VecXd out(static_cast<Eigen::Index>(total_scalars()));
  Eigen::Index off = 0;
  for (const auto& e : entries) {
    out.segment(off, e.scores.size()) = e.scores;
    off += e.scores.size();
  }
  return out;
}

const ImportanceEntry* ImportanceMap::find(const std::string& id) const {
  for (const auto& e : entries) {
    if (e.param_id == id) return &e;
  }
  return nullptr;
}

void ImportanceMap::validate() const {
  if (sample_count < 1) throw ContractError("importance map has no accumulated samples");
  for (const auto& e : entries) {
    for (Eigen::Index i = 0; i < e.scores.size(); ++i) {
      if (!(e.scores[i] >= 0.0) || !std::isfinite(e.scores[i])) {
        throw ContractError("importance score of '" + e.param_id + "'[" + std::to_string(i) +
                            "] is negative or non-finite");
      }
    }
  }
}

ImportanceMap aggregate_per_tensor(const ImportanceMap& imap) {
  ImportanceMap out = imap;
  out.granularity = Granularity::kTensor;
  for (auto& e : out.entries) {
    if (e.scores.size() > 0) e.scores.setConstant(e.scores.mean());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gradient-statistic estimators

namespace {

template <typename Reduce>
ImportanceMap accumulate(Estimator kind, ParameterRegistry& registry, std::size_t num_samples,
                         const SampleLoss& loss, std::size_t max_samples, Reduce reduce) {
  if (num_samples == 0) throw DataError("importance estimation needs a non-empty sample stream");
  if (max_samples == 0) throw DataError("importance estimation needs max_samples >= 1");
  const std::size_t n = std::min(num_samples, max_samples);

  std::vector<std::size_t> index;
  ImportanceMap imap;
  imap.estimator = kind;
  for (std::size_t i = 0; i < registry.size(); ++i) {
    if (!registry[i].tensor.requires_grad()) continue;
    index.push_back(i);
    imap.entries.push_back({registry[i].id, VecXd::Zero(static_cast<Eigen::Index>(registry[i].tensor.size()))});
  }

  for (std::size_t s = 0; s < n; ++s) {
    registry.zero_grad();
    Tape tape;
    Var l = loss(tape, s);
    tape.backward(l);
    for (std::size_t k = 0; k < index.size(); ++k) {
      const Tensor& t = registry[index[k]].tensor;
      if (t.has_grad()) imap.entries[k].scores += reduce(t.grad());
    }
  }
  registry.clear_grad();
  for (auto& e : imap.entries) e.scores /= static_cast<double>(n);
  imap.sample_count = n;
  return imap;
}

}  // namespace

ImportanceMap accumulate_grad_importance(ParameterRegistry& registry, std::size_t num_samples,
                                         const SampleLoss& loss, std::size_t max_samples) {
  return accumulate(Estimator::kGrad, registry, num_samples, loss, max_samples,
                    [](const VecXd& g) -> VecXd { return g.cwiseAbs(); });
}

ImportanceMap accumulate_fisher_diag(ParameterRegistry& registry, std::size_t num_samples, const SampleLoss& loss,
                                     std::size_t max_samples) {
  return accumulate(Estimator::kFisher, registry, num_samples, loss, max_samples,
                    [](const VecXd& g) -> VecXd { return g.cwiseAbs2(); });
}

SampleLoss lm_sample_loss(TinyLM& model, std::span<const Example> examples) {
  return [&model, examples](Tape& tape, std::size_t index) {
    const Example& ex = examples[index];
    ForwardPass pass = model.forward(tape, std::span<const TokenSeq>(&ex.x, 1));
    return softmax_cross_entropy(pass.logits, ex.y);
  };
}

ImportanceMap accumulate_grad_importance(TinyLM& model, std::span<const Example> examples, std::size_t max_samples) {
  return accumulate_grad_importance(model.params(), examples.size(), lm_sample_loss(model, examples), max_samples);
}

ImportanceMap accumulate_fisher_diag(TinyLM& model, std::span<const Example> examples, std::size_t max_samples) {
  return accumulate_fisher_diag(model.params(), examples.size(), lm_sample_loss(model, examples), max_samples);
}

// ---------------------------------------------------------------------------
// Path integral

PathImportance::PathImportance(const ParameterRegistry& registry, double damping) : damping_(damping) {
  if (damping < 0.0) throw ConfigError("path importance damping must be >= 0");
  for (std::size_t i = 0; i < registry.size(); ++i) {
    const auto& e = registry[i];
    if (!e.tensor.requires_grad()) continue;
    index_.push_back(i);
    ids_.push_back(e.id);
    start_.push_back(e.tensor.data());
    omega_.push_back(VecXd::Zero(static_cast<Eigen::Index>(e.tensor.size())));
  }
}

void PathImportance::check_layout(const ParameterRegistry& registry) const {
  for (std::size_t k = 0; k < index_.size(); ++k) {
    if (index_[k] >= registry.size() || registry[index_[k]].id != ids_[k] ||
        registry[index_[k]].tensor.size() != static_cast<std::size_t>(start_[k].size())) {
      throw ContractError("path importance hook invoked with a mismatched registry");
    }
  }
}

void PathImportance::before_step(const ParameterRegistry& registry) {
  check_layout(registry);
  pending_grad_.clear();
  pending_value_.clear();
  for (std::size_t k = 0; k < index_.size(); ++k) {
    const Tensor& t = registry[index_[k]].tensor;
    pending_value_.push_back(t.data());
    pending_grad_.push_back(t.has_grad() ? t.grad() : VecXd::Zero(static_cast<Eigen::Index>(t.size())));
  }
  armed_ = true;
}

void PathImportance::after_step(const ParameterRegistry& registry) {
  check_layout(registry);
  if (!armed_) throw ContractError("after_step without a matching before_step");
  for (std::size_t k = 0; k < index_.size(); ++k) {
    const VecXd delta = registry[index_[k]].tensor.data() - pending_value_[k];
    omega_[k] -= pending_grad_[k].cwiseProduct(delta);
  }
  armed_ = false;
  ++steps_;
}

ImportanceMap PathImportance::finalize(const ParameterRegistry& registry) const {
  check_layout(registry);
  ImportanceMap imap;
  imap.estimator = Estimator::kPath;
  imap.sample_count = std::max<std::size_t>(steps_, 1);
  for (std::size_t k = 0; k < index_.size(); ++k) {
    const VecXd displacement = registry[index_[k]].tensor.data() - start_[k];
    VecXd scores = omega_[k].cwiseMax(0.0).array() / (displacement.array().square() + damping_);
    imap.entries.push_back({ids_[k], std::move(scores)});
  }
  return imap;
}

// ---------------------------------------------------------------------------
// Partition

const FreezeEntry* FreezeMask::find(const std::string& id) const {
  for (const auto& e : entries) {
    if (e.param_id == id) return &e;
  }
  return nullptr;
}

double top_fraction_threshold(std::span<const double> scores, double rho) {
  if (!(rho >= 0.0 && rho <= 1.0)) throw ConfigError("core fraction must lie in [0, 1], got " + std::to_string(rho));
  const std::size_t n = scores.size();
  const auto k = static_cast<std::size_t>(std::ceil(rho * static_cast<double>(n)));
  if (k == 0 || n == 0) return std::numeric_limits<double>::infinity();
  std::vector<double> v(scores.begin(), scores.end());
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k - 1), v.end(), std::greater<double>());
  return v[k - 1];
}

FreezeMask partition(const ImportanceMap& imap, PartitionCriterion criterion) {
  FreezeMask mask;
  if (criterion.kind == PartitionCriterion::Kind::kThreshold) {
    if (std::isnan(criterion.value)) throw ConfigError("importance threshold is NaN");
    mask.threshold = criterion.value;
  } else {
    const VecXd flat = imap.flat();
    mask.threshold = top_fraction_threshold(std::span<const double>(flat.data(), flat.size()), criterion.value);
  }
  for (const auto& e : imap.entries) {
    FreezeEntry fe{e.param_id, std::vector<std::uint8_t>(static_cast<std::size_t>(e.scores.size()), 0)};
    for (Eigen::Index i = 0; i < e.scores.size(); ++i) {
      if (e.scores[i] >= mask.threshold) {
        fe.frozen[static_cast<std::size_t>(i)] = 1;
        ++mask.core_count;
      }
    }
    mask.total += fe.frozen.size();
    mask.entries.push_back(std::move(fe));
  }
  mask.core_fraction = mask.total ? static_cast<double>(mask.core_count) / static_cast<double>(mask.total) : 0.0;
  return mask;
}

// ---------------------------------------------------------------------------
// Summary

double quantile_sorted(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw ContractError("quantile of an empty set");
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

ScoreStats score_stats(std::span<const double> scores, std::string label, std::size_t offset) {
  ScoreStats s;
  s.label = std::move(label);
  s.offset = offset;
  s.count = scores.size();
  if (scores.empty()) return s;
  std::vector<double> v(scores.begin(), scores.end());
  std::sort(v.begin(), v.end());
  double total = 0.0;
  for (double x : v) total += x;
  s.mean = total / static_cast<double>(v.size());
  s.min = v.front();
  s.max = v.back();
  s.q25 = quantile_sorted(v, 0.25);
  s.q50 = quantile_sorted(v, 0.50);
  s.q75 = quantile_sorted(v, 0.75);
  s.q90 = quantile_sorted(v, 0.90);
  s.q99 = quantile_sorted(v, 0.99);
  return s;
}

ImportanceSummary importance_summary(const ImportanceMap& imap, std::size_t bins) {
  if (bins == 0) throw ConfigError("histogram needs at least one bin");
  ImportanceSummary out;
  std::size_t offset = 0;
  for (const auto& e : imap.entries) {
    out.layers.push_back(score_stats(std::span<const double>(e.scores.data(), e.scores.size()), e.param_id, offset));
    offset += static_cast<std::size_t>(e.scores.size());
  }
  const VecXd flat = imap.flat();
  out.overall = score_stats(std::span<const double>(flat.data(), flat.size()), "overall", 0);
  if (flat.size() == 0) return out;

  const double lo = out.overall.min, hi = out.overall.max;
  const std::size_t nb = hi > lo ? bins : 1;
  const double width = hi > lo ? (hi - lo) / static_cast<double>(nb) : 0.0;
  for (std::size_t b = 0; b < nb; ++b) {
    out.histogram.push_back({lo + width * static_cast<double>(b), b + 1 == nb ? hi : lo + width * static_cast<double>(b + 1), 0});
  }
  for (Eigen::Index i = 0; i < flat.size(); ++i) {
    std::size_t b = width > 0.0 ? static_cast<std::size_t>((flat[i] - lo) / width) : 0;
    out.histogram[std::min(b, nb - 1)].count += 1;
  }
  return out;
}

void write_summary_csv(std::ostream& out, const ImportanceSummary& summary) {
  out << "kind,label,offset_begin,offset_end,count,mean,min,q25,q50,q75,q90,q99,max\n";
  auto row = [&out](const char* kind, const ScoreStats& s) {
    out << kind << ',' << s.label << ',' << s.offset << ',' << s.offset + s.count << ',' << s.count << ','
        << s.mean << ',' << s.min << ',' << s.q25 << ',' << s.q50 << ',' << s.q75 << ',' << s.q90 << ','
        << s.q99 << ',' << s.max << '\n';
  };
  for (const auto& l : summary.layers) row("layer", l);
  row("overall", summary.overall);
  for (std::size_t b = 0; b < summary.histogram.size(); ++b) {
    const auto& h = summary.histogram[b];
    out << "histogram,bin" << b << ",,," << h.count << ",," << h.lo << ",,,,,," << h.hi << '\n';
  }
}

}  // namespace sfrz
