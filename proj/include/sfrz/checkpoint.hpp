// SPDX-License-Identifier: Apache-2.0
//
// Binary checkpoint layout (all integers and floats little-endian):
//
//   "SFRZ"  u16 version
//   config  u32 vocab, embed_dim, window, hidden, depth, context
//   seeds   u64 model seed
//   loras   u32 count, then per adapter: str target, u32 rank, f64 alpha, u8 mode
//   params  u32 count, then per entry: str id, u8 flags, u32 ndim,
//           u32 dims[ndim], f64 data[prod(dims)]
//           flags: bit0 trainable, bit1 covered by IMPT, bit2 covered by MASK
//   sections, each: 4-byte tag, u64 payload length, payload
//     "IMPT"  u8 estimator, u8 granularity, u64 sample_count, u64 N, f64 scores[N]
//     "MASK"  f64 threshold, f64 core_fraction, u64 N, u8 frozen[N]
//     "END "  empty payload, always last
//
// str = u32 byte length + UTF-8 bytes. Section scalars are the covered
// entries concatenated in registry order.
#pragma once

#include "sfrz/importance.hpp"
#include "sfrz/model.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace sfrz {

inline constexpr char kCheckpointMagic[4] = {'S', 'F', 'R', 'Z'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

// Fixed IMPT overhead: tag + length + estimator + granularity + sample_count + N.
inline constexpr std::size_t kImportanceSectionHeaderBytes = 4 + 8 + 1 + 1 + 8 + 8;

struct CheckpointData {
  ModelConfig config;
  std::uint64_t seed = 0;
  std::vector<LoraAdapter> adapters;
  ParameterRegistry registry;
  std::optional<ImportanceMap> importance;
  std::optional<FreezeMask> mask;
};

// Importance and mask entries must follow registry order and match entry
// sizes; throws ContractError otherwise.
void save_checkpoint(const std::filesystem::path& path, const TinyLM& model, const ImportanceMap* importance = nullptr,
                     const FreezeMask* mask = nullptr);

// Throws CheckpointError on bad magic/version, truncation or inconsistency.
CheckpointData load_checkpoint(const std::filesystem::path& path);

// Loads and checks the stored architecture against `expected`.
TinyLM load_model(const std::filesystem::path& path, const ModelConfig& expected, CheckpointData* rest = nullptr);

// Serialized size of an IMPT section holding `scalars` scores: 8N + fixed header.
std::size_t importance_storage_bytes(std::size_t scalars);

}  // namespace sfrz
