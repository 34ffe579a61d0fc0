// SPDX-License-Identifier: Apache-2.0
#include "sfrz/checkpoint.hpp"

#include "sfrz/errors.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace sfrz {

namespace {

constexpr std::uint8_t kFlagTrainable = 1;
constexpr std::uint8_t kFlagImportance = 2;
constexpr std::uint8_t kFlagMask = 4;

class ByteWriter {
 public:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const char*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  template <typename U>
  void uint(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void u8(std::uint8_t v) { uint(v); }
  void u16(std::uint16_t v) { uint(v); }
  void u32(std::uint64_t v) {
    if (v > UINT32_MAX) throw CheckpointError("value does not fit a u32 field");
    uint(static_cast<std::uint32_t>(v));
  }
  void u64(std::uint64_t v) { uint(v); }
  void f64(double v) { uint(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u32(s.size());
    raw(s.data(), s.size());
  }
  std::size_t size() const { return buf_.size(); }
  const std::vector<char>& bytes() const { return buf_; }

 private:
  std::vector<char> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::vector<char> buf) : buf_(std::move(buf)) {}

  void need(std::size_t n) const {
    if (pos_ + n > buf_.size()) throw CheckpointError("file truncated at byte " + std::to_string(pos_));
  }
  template <typename U>
  U uint() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      v |= static_cast<U>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(U);
    return v;
  }
  std::uint8_t u8() { return uint<std::uint8_t>(); }
  std::uint16_t u16() { return uint<std::uint16_t>(); }
  std::uint32_t u32() { return uint<std::uint32_t>(); }
  std::uint64_t u64() { return uint<std::uint64_t>(); }
  double f64() { return std::bit_cast<double>(uint<std::uint64_t>()); }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  std::string tag() {
    need(4);
    std::string s(buf_.data() + pos_, 4);
    pos_ += 4;
    return s;
  }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return buf_.size() - pos_; }

 private:
  std::vector<char> buf_;
  std::size_t pos_ = 0;
};

// Registry indices covered by an ordered list of (id, size) entries.
template <typename Entries, typename SizeOf>
std::vector<std::size_t> covered_indices(const ParameterRegistry& reg, const Entries& entries, SizeOf size_of,
                                         const char* what) {
  std::vector<std::size_t> out;
  std::size_t next = 0;
  for (const auto& e : entries) {
    auto idx = reg.index_of(e.param_id);
    if (!idx || *idx < next) {
      throw ContractError(std::string(what) + " entry '" + e.param_id + "' is not in registry order");
    }
    if (reg[*idx].tensor.size() != size_of(e)) {
      throw ContractError(std::string(what) + " entry '" + e.param_id + "' does not match the parameter size");
    }
    out.push_back(*idx);
    next = *idx + 1;
  }
  return out;
}

bool contains(const std::vector<std::size_t>& v, std::size_t x) {
  return std::find(v.begin(), v.end(), x) != v.end();
}

}  // namespace

std::size_t importance_storage_bytes(std::size_t scalars) { return kImportanceSectionHeaderBytes + 8 * scalars; }

void save_checkpoint(const std::filesystem::path& path, const TinyLM& model, const ImportanceMap* importance,
                     const FreezeMask* mask) {
  const ParameterRegistry& reg = model.params();
  std::vector<std::size_t> imp_idx, mask_idx;
  if (importance) {
    imp_idx = covered_indices(reg, importance->entries,
                              [](const ImportanceEntry& e) { return static_cast<std::size_t>(e.scores.size()); },
                              "importance");
  }
  if (mask) {
    mask_idx = covered_indices(reg, mask->entries, [](const FreezeEntry& e) { return e.frozen.size(); }, "mask");
  }

  ByteWriter w;
  w.raw(kCheckpointMagic, 4);
  w.u16(kCheckpointVersion);
  const auto& c = model.config();
  w.u32(c.vocab_size);
  w.u32(c.embed_dim);
  w.u32(c.window);
  w.u32(c.hidden);
  w.u32(c.depth);
  w.u32(c.context);
  w.u64(model.seed());
  w.u32(model.adapters().size());
  for (const auto& a : model.adapters()) {
    w.str(a.target);
    w.u32(a.rank);
    w.f64(a.alpha);
    w.u8(a.mode == LoraScaleMode::kStandard ? 0 : 1);
  }
  w.u32(reg.size());
  for (std::size_t i = 0; i < reg.size(); ++i) {
    const auto& e = reg[i];
    std::uint8_t flags = e.tensor.requires_grad() ? kFlagTrainable : 0;
    if (contains(imp_idx, i)) flags |= kFlagImportance;
    if (contains(mask_idx, i)) flags |= kFlagMask;
    w.str(e.id);
    w.u8(flags);
    w.u32(e.tensor.rank());
    for (auto d : e.tensor.shape()) w.u32(d);
    for (Eigen::Index k = 0; k < e.tensor.data().size(); ++k) w.f64(e.tensor.data()[k]);
  }

  if (importance) {
    const std::size_t n = importance->total_scalars();
    w.raw("IMPT", 4);
    w.u64(1 + 1 + 8 + 8 + 8 * n);
    w.u8(static_cast<std::uint8_t>(importance->estimator));
    w.u8(static_cast<std::uint8_t>(importance->granularity));
    w.u64(importance->sample_count);
    w.u64(n);
    for (const auto& e : importance->entries) {
      for (Eigen::Index k = 0; k < e.scores.size(); ++k) w.f64(e.scores[k]);
    }
  }
  if (mask) {
    std::size_t n = 0;
    for (const auto& e : mask->entries) n += e.frozen.size();
    w.raw("MASK", 4);
    w.u64(8 + 8 + 8 + n);
    w.f64(mask->threshold);
    w.f64(mask->core_fraction);
    w.u64(n);
    for (const auto& e : mask->entries) w.raw(e.frozen.data(), e.frozen.size());
  }
  w.raw("END ", 4);
  w.u64(0);

  // Write-then-rename so an interrupted save never leaves a torn file.
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write '" + tmp.string() + "'");
    out.write(w.bytes().data(), static_cast<std::streamsize>(w.size()));
    if (!out) throw CheckpointError("short write to '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw CheckpointError("cannot move checkpoint into place: " + ec.message());
}

CheckpointData load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot read '" + path.string() + "'");
  ByteReader r(std::vector<char>(std::istreambuf_iterator<char>(in), {}));

  if (r.tag() != std::string(kCheckpointMagic, 4)) throw CheckpointError("bad magic in '" + path.string() + "'");
  const std::uint16_t version = r.u16();
  if (version != kCheckpointVersion) throw CheckpointError("unsupported version " + std::to_string(version));

  CheckpointData out;
  out.config.vocab_size = r.u32();
  out.config.embed_dim = r.u32();
  out.config.window = r.u32();
  out.config.hidden = r.u32();
  out.config.depth = r.u32();
  out.config.context = r.u32();
  out.seed = r.u64();
  const std::uint32_t n_adapters = r.u32();
  for (std::uint32_t i = 0; i < n_adapters; ++i) {
    LoraAdapter a;
    a.target = r.str();
    a.rank = r.u32();
    a.alpha = r.f64();
    const std::uint8_t mode = r.u8();
    if (mode > 1) throw CheckpointError("unknown LoRA scale mode " + std::to_string(mode));
    a.mode = mode == 0 ? LoraScaleMode::kStandard : LoraScaleMode::kRankStabilized;
    out.adapters.push_back(std::move(a));
  }

  std::vector<std::size_t> imp_idx, mask_idx;
  const std::uint32_t n_entries = r.u32();
  for (std::uint32_t i = 0; i < n_entries; ++i) {
    std::string id = r.str();
    const std::uint8_t flags = r.u8();
    const std::uint32_t ndim = r.u32();
    if (ndim == 0 || ndim > 8) throw CheckpointError("entry '" + id + "' has invalid rank " + std::to_string(ndim));
    Shape shape;
    std::size_t numel = 1;
    for (std::uint32_t k = 0; k < ndim; ++k) {
      shape.push_back(r.u32());
      if (shape.back() == 0) throw CheckpointError("entry '" + id + "' has a zero dimension");
      numel *= shape.back();
    }
    r.need(numel * 8);
    VecXd data(static_cast<Eigen::Index>(numel));
    for (std::size_t k = 0; k < numel; ++k) data[static_cast<Eigen::Index>(k)] = r.f64();
    if (out.registry.index_of(id)) throw CheckpointError("duplicate entry '" + id + "'");
    if (flags & kFlagImportance) imp_idx.push_back(i);
    if (flags & kFlagMask) mask_idx.push_back(i);
    out.registry.add(std::move(id), Tensor(std::move(shape), std::move(data), (flags & kFlagTrainable) != 0));
  }

  auto covered_size = [&](const std::vector<std::size_t>& idx) {
    std::size_t n = 0;
    for (auto i : idx) n += out.registry[i].tensor.size();
    return n;
  };

  bool ended = false;
  while (!ended) {
    const std::string tag = r.tag();
    const std::uint64_t len = r.u64();
    if (len > r.remaining()) throw CheckpointError("section '" + tag + "' truncated");
    const std::size_t start = r.pos();
    if (tag == "IMPT") {
      ImportanceMap imap;
      const std::uint8_t est = r.u8(), gran = r.u8();
      if (est > 2 || gran > 1) throw CheckpointError("invalid IMPT header");
      imap.estimator = static_cast<Estimator>(est);
      imap.granularity = static_cast<Granularity>(gran);
      imap.sample_count = r.u64();
      const std::uint64_t n = r.u64();
      if (n != covered_size(imp_idx)) throw CheckpointError("IMPT scalar count does not match covered entries");
      for (auto i : imp_idx) {
        const auto& e = out.registry[i];
        VecXd s(static_cast<Eigen::Index>(e.tensor.size()));
        for (Eigen::Index k = 0; k < s.size(); ++k) s[k] = r.f64();
        imap.entries.push_back({e.id, std::move(s)});
      }
      out.importance = std::move(imap);
    } else if (tag == "MASK") {
      FreezeMask mask;
      mask.threshold = r.f64();
      mask.core_fraction = r.f64();
      const std::uint64_t n = r.u64();
      if (n != covered_size(mask_idx)) throw CheckpointError("MASK scalar count does not match covered entries");
      for (auto i : mask_idx) {
        const auto& e = out.registry[i];
        FreezeEntry fe{e.id, std::vector<std::uint8_t>(e.tensor.size())};
        for (auto& b : fe.frozen) {
          b = r.u8();
          if (b > 1) throw CheckpointError("MASK byte is not 0/1");
          mask.core_count += b;
        }
        mask.total += fe.frozen.size();
        mask.entries.push_back(std::move(fe));
      }
      out.mask = std::move(mask);
    } else if (tag == "END ") {
      ended = true;
    } else {
      throw CheckpointError("unknown section tag '" + tag + "'");
    }
    if (r.pos() - start != len) throw CheckpointError("section '" + tag + "' length mismatch");
  }
  if (r.remaining() != 0) throw CheckpointError("trailing bytes after END section");
  if (!imp_idx.empty() && !out.importance) throw CheckpointError("entries flagged for IMPT but section missing");
  if (!mask_idx.empty() && !out.mask) throw CheckpointError("entries flagged for MASK but section missing");
  return out;
}

TinyLM load_model(const std::filesystem::path& path, const ModelConfig& expected, CheckpointData* rest) {
  CheckpointData data = load_checkpoint(path);
  if (!(data.config == expected)) {
    throw CheckpointError("checkpoint architecture does not match the configured model");
  }
  try {
    TinyLM model(data.config, data.seed, data.registry, data.adapters);
    if (rest) *rest = std::move(data);
    return model;
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("stored model is invalid: ") + e.what());
  }
}

}  // namespace sfrz
