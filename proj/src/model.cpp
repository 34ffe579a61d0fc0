// SPDX-License-Identifier: Apache-2.0
#include "sfrz/model.hpp"

#include "sfrz/errors.hpp"
#include "sfrz/random.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace sfrz {

// ---------------------------------------------------------------------------
// ParameterRegistry

Tensor& ParameterRegistry::add(std::string id, Tensor tensor) {
  if (index_of(id)) throw ContractError("duplicate parameter id '" + id + "'");
  entries_.push_back(ParamEntry{std::move(id), std::move(tensor)});
  return entries_.back().tensor;
}

void ParameterRegistry::remove(const std::string& id) {
  auto it = std::find_if(entries_.begin(), entries_.end(), [&](const ParamEntry& e) { return e.id == id; });
  if (it == entries_.end()) throw ContractError("unknown parameter id '" + id + "'");
  entries_.erase(it);
}

std::optional<std::size_t> ParameterRegistry::index_of(const std::string& id) const {
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].id == id) return i;
  }
  return std::nullopt;
}

Tensor* ParameterRegistry::find(const std::string& id) {
  auto i = index_of(id);
  return i ? &entries_[*i].tensor : nullptr;
}

const Tensor* ParameterRegistry::find(const std::string& id) const {
  auto i = index_of(id);
  return i ? &entries_[*i].tensor : nullptr;
}

Tensor& ParameterRegistry::at(const std::string& id) {
  if (auto* t = find(id)) return *t;
  throw ContractError("unknown parameter id '" + id + "'");
}

const Tensor& ParameterRegistry::at(const std::string& id) const {
  if (const auto* t = find(id)) return *t;
  throw ContractError("unknown parameter id '" + id + "'");
}

std::size_t ParameterRegistry::total_scalars() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.tensor.size();
  return n;
}

std::size_t ParameterRegistry::trainable_scalars() const {
  std::size_t n = 0;
  for (const auto& e : entries_) {
    if (e.tensor.requires_grad()) n += e.tensor.size();
  }
  return n;
}

void ParameterRegistry::zero_grad() {
  for (auto& e : entries_) e.tensor.zero_grad();
}

void ParameterRegistry::clear_grad() {
  for (auto& e : entries_) e.tensor.clear_grad();
}

bool ParameterRegistry::same_layout(const ParameterRegistry& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& a = entries_[i];
    const auto& b = other.entries_[i];
    if (a.id != b.id || a.tensor.shape() != b.tensor.shape() ||
        a.tensor.requires_grad() != b.tensor.requires_grad()) {
      return false;
    }
  }
  return true;
}

std::uint64_t fingerprint(const ParameterRegistry& registry) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& e : registry) {
    mix(e.id.data(), e.id.size());
    for (auto d : e.tensor.shape()) {
      const std::uint64_t d64 = d;
      mix(&d64, sizeof d64);
    }
    mix(e.tensor.data().data(), e.tensor.size() * sizeof(double));
  }
  return h;
}

// ---------------------------------------------------------------------------
// Config

void ModelConfig::validate() const {
  std::vector<std::string> problems;
  if (vocab_size < 2) problems.push_back("vocab_size must be >= 2");
  if (embed_dim < 1) problems.push_back("embed_dim must be >= 1");
  if (window < 1) problems.push_back("window must be >= 1");
  if (hidden < 1) problems.push_back("hidden must be >= 1");
  if (depth < 1) problems.push_back("depth must be >= 1");
  if (context < 1) problems.push_back("context must be >= 1");
  if (!problems.empty()) {
    std::string msg = "invalid model config:";
    for (const auto& p : problems) msg += " " + p + ";";
    throw ConfigError(msg);
  }
}

std::size_t expected_parameter_count(const ModelConfig& c) {
  const std::size_t d_in = c.window * c.embed_dim;
  const std::size_t block = d_in * c.hidden + c.hidden + c.hidden * d_in + d_in;
  return c.vocab_size * c.embed_dim + c.depth * block + d_in * c.vocab_size + c.vocab_size;
}

const char* to_string(LoraScaleMode mode) {
  return mode == LoraScaleMode::kStandard ? "standard" : "rank_stabilized";
}

double lora_scale(double alpha, std::size_t rank, LoraScaleMode mode) {
  if (rank == 0) throw ConfigError("LoRA rank must be >= 1");
  const double r = static_cast<double>(rank);
  return mode == LoraScaleMode::kStandard ? alpha / r : alpha / std::sqrt(r);
}

// ---------------------------------------------------------------------------
// TinyLM

namespace {

Tensor uniform_tensor(Rng& rng, Shape shape, double bound) {
  Tensor t = Tensor::zeros(std::move(shape), true);
  for (Eigen::Index i = 0; i < t.data().size(); ++i) t.data()[i] = rng.uniform(-bound, bound);
  return t;
}

std::string block_prefix(std::size_t k) { return "block" + std::to_string(k); }

}  // namespace

TinyLM::TinyLM(const ModelConfig& config, std::uint64_t seed) : config_(config), seed_(seed) {
  config_.validate();
  Rng rng(seed);
  const std::size_t d_in = config_.input_width();
  const std::size_t h = config_.hidden;
  const std::size_t v = config_.vocab_size;
  params_.add("embed.table", uniform_tensor(rng, {v, config_.embed_dim}, 0.5));
  for (std::size_t k = 0; k < config_.depth; ++k) {
    const auto p = block_prefix(k);
    params_.add(p + ".fc1.weight", uniform_tensor(rng, {d_in, h}, 1.0 / std::sqrt(double(d_in))));
    params_.add(p + ".fc1.bias", Tensor::zeros({h}, true));
    params_.add(p + ".fc2.weight", uniform_tensor(rng, {h, d_in}, 1.0 / std::sqrt(double(h))));
    params_.add(p + ".fc2.bias", Tensor::zeros({d_in}, true));
  }
  params_.add("head.weight", uniform_tensor(rng, {d_in, v}, 0.1 / std::sqrt(double(d_in))));
  params_.add("head.bias", Tensor::zeros({v}, true));
}

TinyLM::TinyLM(const ModelConfig& config, std::uint64_t seed, ParameterRegistry params,
               std::vector<LoraAdapter> adapters)
    : config_(config), seed_(seed), params_(std::move(params)), adapters_(std::move(adapters)) {
  config_.validate();
  // The stored registry must be the architecture's registry plus adapters.
  TinyLM reference(config_, 0);
  for (const auto& a : adapters_) reference.attach_lora(LoraSpec{{a.target}, a.rank, a.alpha, a.mode, 0});
  for (const auto& e : reference.params_) {
    const Tensor* t = params_.find(e.id);
    if (t == nullptr || t->shape() != e.tensor.shape()) {
      throw CheckpointError("parameter '" + e.id + "' missing or mis-shaped for this architecture");
    }
  }
  if (reference.params_.size() != params_.size()) {
    throw CheckpointError("stored registry has " + std::to_string(params_.size()) + " entries, architecture expects " +
                          std::to_string(reference.params_.size()));
  }
}

std::vector<std::string> TinyLM::block_weight_ids() const {
  std::vector<std::string> ids;
  for (std::size_t k = 0; k < config_.depth; ++k) {
    ids.push_back(block_prefix(k) + ".fc1.weight");
    ids.push_back(block_prefix(k) + ".fc2.weight");
  }
  return ids;
}

void TinyLM::check_inputs(std::span<const TokenSeq> sequences) const {
  if (sequences.empty()) throw DataError("forward called with no sequences");
  for (const auto& seq : sequences) {
    if (seq.empty()) throw DataError("empty token sequence");
    if (seq.size() > config_.context) {
      throw DataError("sequence length " + std::to_string(seq.size()) + " exceeds context " +
                      std::to_string(config_.context));
    }
    for (int id : seq) {
      if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab_size) {
        throw IndexError("token id " + std::to_string(id) + " outside vocabulary of " +
                         std::to_string(config_.vocab_size));
      }
    }
  }
}

template <typename Binder>
ForwardPass TinyLM::run(std::span<const TokenSeq> sequences, Binder bind) const {
  check_inputs(sequences);
  std::map<std::string, Var> bound;
  for (std::size_t i = 0; i < params_.size(); ++i) bound.emplace(params_[i].id, bind(i));

  ForwardPass pass;
  for (const auto& e : params_) {
    if (e.id.ends_with(".lora_A") || e.id.ends_with(".lora_B")) continue;
    pass.effective.emplace(e.id, bound.at(e.id));
  }
  for (const auto& a : adapters_) {
    Var delta = transpose(matmul(bound.at(a.b_id()), bound.at(a.a_id())));
    pass.effective[a.target] = add(bound.at(a.target), scale(delta, a.scale()));
  }
  const auto& w = pass.effective;

  Var h = context_window(w.at("embed.table"), sequences, config_.window);
  for (std::size_t k = 0; k < config_.depth; ++k) {
    const auto p = block_prefix(k);
    Var inner = relu(add_bias(matmul(h, w.at(p + ".fc1.weight")), w.at(p + ".fc1.bias")));
    h = add(h, add_bias(matmul(inner, w.at(p + ".fc2.weight")), w.at(p + ".fc2.bias")));
  }
  pass.logits = add_bias(matmul(h, w.at("head.weight")), w.at("head.bias"));
  return pass;
}

ForwardPass TinyLM::forward(Tape& tape, std::span<const TokenSeq> sequences) {
  return run(sequences, [&](std::size_t i) { return tape.param(params_[i].tensor); });
}

RowMatXd TinyLM::predict(std::span<const TokenSeq> sequences) const {
  Tape tape;
  ForwardPass pass = run(sequences, [&](std::size_t i) { return tape.constant(params_[i].tensor); });
  return pass.logits.mat();
}

RowMatXd TinyLM::predict(const TokenSeq& tokens) const { return predict(std::span<const TokenSeq>(&tokens, 1)); }

void TinyLM::attach_lora(const LoraSpec& spec) {
  const std::vector<std::string> targets = spec.targets.empty() ? block_weight_ids() : spec.targets;
  if (spec.rank < 1) throw ConfigError("LoRA rank must be >= 1");
  for (const auto& id : targets) {
    const Tensor* t = params_.find(id);
    if (t == nullptr) throw ConfigError("LoRA target '" + id + "' does not exist");
    if (t->rank() != 2) throw ConfigError("LoRA target '" + id + "' is not a matrix");
    const std::size_t d_in = t->shape()[0], d_out = t->shape()[1];
    if (spec.rank > std::min(d_in, d_out)) {
      throw ConfigError("LoRA rank " + std::to_string(spec.rank) + " exceeds min dimension of '" + id + "' " +
                        shape_to_string(t->shape()));
    }
    for (const auto& a : adapters_) {
      if (a.target == id) throw ConfigError("LoRA target '" + id + "' already has an adapter");
    }
  }

  for (auto& e : params_) e.tensor.set_requires_grad(false);
  for (std::size_t k = 0; k < targets.size(); ++k) {
    const auto& id = targets[k];
    const Shape shape = params_.at(id).shape();
    const std::size_t d_in = shape[0], d_out = shape[1];
    LoraAdapter adapter{id, spec.rank, spec.alpha, spec.mode};
    Rng rng(derive_seed(spec.seed, k));
    params_.add(adapter.a_id(), uniform_tensor(rng, {spec.rank, d_in}, 1.0 / std::sqrt(double(d_in))));
    params_.add(adapter.b_id(), Tensor::zeros({d_out, spec.rank}, true));
    adapters_.push_back(std::move(adapter));
  }
}

void TinyLM::merge_lora() {
  if (adapters_.empty()) throw ContractError("merge_lora: no adapters attached");
  for (const auto& a : adapters_) {
    const Tensor& A = params_.at(a.a_id());
    const Tensor& B = params_.at(a.b_id());
    RowMatXd delta = B.mat() * A.mat();
    RowMatXd delta_t = delta.transpose();
    Tensor& w = params_.at(a.target);
    w.mat() = w.mat() + delta_t * a.scale();
  }
  for (const auto& a : adapters_) {
    params_.remove(a.a_id());
    params_.remove(a.b_id());
  }
  adapters_.clear();
  for (auto& e : params_) e.tensor.set_requires_grad(true);
}

}  // namespace sfrz
