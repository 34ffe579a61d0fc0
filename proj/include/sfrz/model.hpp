// SPDX-License-Identifier: Apache-2.0
//
// Tiny next-token language model: token embeddings gathered over a causal
// context window, `depth` residual MLP blocks, and a linear output head.
//
//   h_0   = concat(embed[x_{t-w+1}], ..., embed[x_t])         (zero-padded)
//   h_k+1 = h_k + relu(h_k W1 + b1) W2 + b2
//   logit = h_depth Wout + bout
//
// Weights use the row-vector convention y = x W with W[d_in x d_out].
#pragma once

#include "sfrz/autodiff.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace sfrz {

struct ParamEntry {
  std::string id;
  Tensor tensor;
};

// Ordered map from stable parameter id to tensor. Entry order is the
// enumeration order used by importance maps, masks and checkpoints.
class ParameterRegistry {
 public:
  Tensor& add(std::string id, Tensor tensor);
  void remove(const std::string& id);

  std::size_t size() const { return entries_.size(); }
  ParamEntry& operator[](std::size_t i) { return entries_[i]; }
  const ParamEntry& operator[](std::size_t i) const { return entries_[i]; }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  std::optional<std::size_t> index_of(const std::string& id) const;
  Tensor* find(const std::string& id);
  const Tensor* find(const std::string& id) const;
  Tensor& at(const std::string& id);
  const Tensor& at(const std::string& id) const;

  std::size_t total_scalars() const;
  std::size_t trainable_scalars() const;
  void zero_grad();
  void clear_grad();

  // Same ids, shapes and trainability in the same order.
  bool same_layout(const ParameterRegistry& other) const;

 private:
  std::vector<ParamEntry> entries_;
};

// FNV-1a over ids, shapes and raw parameter bytes.
std::uint64_t fingerprint(const ParameterRegistry& registry);

struct ModelConfig {
  std::size_t vocab_size = 16;
  std::size_t embed_dim = 8;
  std::size_t window = 3;
  std::size_t hidden = 48;
  std::size_t depth = 2;
  std::size_t context = 32;

  // Throws ConfigError listing every invalid field.
  void validate() const;
  std::size_t input_width() const { return window * embed_dim; }
  bool operator==(const ModelConfig&) const = default;
};

// Closed-form scalar count of a freshly built model.
std::size_t expected_parameter_count(const ModelConfig& config);

enum class LoraScaleMode { kStandard, kRankStabilized };

const char* to_string(LoraScaleMode mode);

// alpha / r (standard) or alpha / sqrt(r) (rank-stabilized).
double lora_scale(double alpha, std::size_t rank, LoraScaleMode mode);

struct LoraSpec {
  // Empty means every block linear weight.
  std::vector<std::string> targets;
  std::size_t rank = 8;
  double alpha = 32.0;
  LoraScaleMode mode = LoraScaleMode::kStandard;
  std::uint64_t seed = 0;
};

// Low-rank delta on a base weight W[d_in x d_out]:
//   W_eff = W + scale * (B A)^T,  A[r x d_in], B[d_out x r].
struct LoraAdapter {
  std::string target;
  std::size_t rank = 0;
  double alpha = 0.0;
  LoraScaleMode mode = LoraScaleMode::kStandard;

  double scale() const { return lora_scale(alpha, rank, mode); }
  std::string a_id() const { return target + ".lora_A"; }
  std::string b_id() const { return target + ".lora_B"; }
  bool operator==(const LoraAdapter&) const = default;
};

struct ForwardPass {
  Var logits;
  // Effective value of every base parameter on the tape; adapted weights map
  // to W + scale * (B A)^T.
  std::map<std::string, Var> effective;
};

class TinyLM {
 public:
  // Deterministic initialization from `seed`. Throws ConfigError on invalid dims.
  TinyLM(const ModelConfig& config, std::uint64_t seed);

  // Rebuilds a model from stored state (checkpoint load).
  TinyLM(const ModelConfig& config, std::uint64_t seed, ParameterRegistry params,
         std::vector<LoraAdapter> adapters);

  const ModelConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }
  ParameterRegistry& params() { return params_; }
  const ParameterRegistry& params() const { return params_; }
  const std::vector<LoraAdapter>& adapters() const { return adapters_; }
  bool has_adapters() const { return !adapters_.empty(); }

  // Logits for every position of every sequence, rows concatenated in order.
  // Trainable parameters are bound as gradient leaves.
  ForwardPass forward(Tape& tape, std::span<const TokenSeq> sequences);
  // Inference-only variant; nothing is recorded for gradients.
  RowMatXd predict(std::span<const TokenSeq> sequences) const;
  RowMatXd predict(const TokenSeq& tokens) const;

  // Ids of the block linear weights, the default LoRA targets.
  std::vector<std::string> block_weight_ids() const;

  // Freezes every base parameter and adds trainable A (seeded uniform of
  // scale 1/sqrt(d_in)) and B (zero) factors for each target.
  void attach_lora(const LoraSpec& spec);
  // Folds each adapter into its base weight and removes it. Base parameters
  // become trainable again.
  void merge_lora();

 private:
  template <typename Binder>
  ForwardPass run(std::span<const TokenSeq> sequences, Binder bind) const;
  void check_inputs(std::span<const TokenSeq> sequences) const;

  ModelConfig config_;
  std::uint64_t seed_ = 0;
  ParameterRegistry params_;
  std::vector<LoraAdapter> adapters_;
};

}  // namespace sfrz
