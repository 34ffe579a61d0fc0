// SPDX-License-Identifier: Apache-2.0
#include "sfrz/experiment.hpp"

#include "sfrz/errors.hpp"
#include "sfrz/random.hpp"

#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>

namespace sfrz {

namespace fs = std::filesystem;
using nlohmann::json;

const char* to_string(ImportanceOver over) { return over == ImportanceOver::kBase ? "base" : "adapters"; }

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

// ---------------------------------------------------------------------------
// Config parsing

namespace {

// Reads typed fields from one JSON object and records every problem instead
// of stopping at the first.
class Section {
 public:
  Section(const json* node, std::string path, std::vector<std::string>& errors)
      : node_(node), path_(std::move(path)), errors_(errors) {
    if (node_ != nullptr && !node_->is_object()) {
      fail("", "must be an object");
      node_ = nullptr;
    }
  }

  bool has(const char* key) const { return node_ != nullptr && node_->contains(key); }

  Section child(const char* key) {
    seen_.insert(key);
    return Section(has(key) ? &node_->at(key) : nullptr, name(key), errors_);
  }

  static_assert(std::is_same_v<std::size_t, std::uint64_t>, "size_t reads also serve the 64-bit seeds");
  void read(const char* key, std::size_t& out) {
    if (const json* v = take(key)) {
      if (v->is_number_unsigned() || (v->is_number_integer() && v->get<std::int64_t>() >= 0)) {
        out = v->get<std::size_t>();
      } else {
        fail(key, "must be a non-negative integer");
      }
    }
  }
  void read(const char* key, double& out) {
    if (const json* v = take(key)) {
      if (v->is_number()) {
        out = v->get<double>();
      } else {
        fail(key, "must be a number");
      }
    }
  }
  void read(const char* key, bool& out) {
    if (const json* v = take(key)) {
      if (v->is_boolean()) {
        out = v->get<bool>();
      } else {
        fail(key, "must be true or false");
      }
    }
  }
  void read(const char* key, std::string& out) {
    if (const json* v = take(key)) {
      if (v->is_string()) {
        out = v->get<std::string>();
      } else {
        fail(key, "must be a string");
      }
    }
  }
  void read(const char* key, std::vector<std::string>& out) {
    if (const json* v = take(key)) {
      if (v->is_array() && std::all_of(v->begin(), v->end(), [](const json& x) { return x.is_string(); })) {
        out = v->get<std::vector<std::string>>();
      } else {
        fail(key, "must be a list of strings");
      }
    }
  }
  void read_path(const char* key, fs::path& out, const fs::path& base) {
    std::string s;
    if (!has(key)) {
      seen_.insert(key);
      return;
    }
    read(key, s);
    if (s.empty()) return;
    fs::path p(s);
    out = p.is_absolute() || base.empty() ? p : base / p;
  }

  // Maps a string field through `choices`.
  template <typename E>
  void read_enum(const char* key, E& out, std::initializer_list<std::pair<const char*, E>> choices) {
    std::string s;
    if (!has(key)) {
      seen_.insert(key);
      return;
    }
    read(key, s);
    if (node_->at(key).is_string()) {
      std::string allowed;
      for (const auto& [n, e] : choices) {
        if (s == n) {
          out = e;
          return;
        }
        allowed += allowed.empty() ? n : std::string(", ") + n;
      }
      fail(key, "unknown value '" + s + "' (expected one of: " + allowed + ")");
    }
  }

  void fail(const std::string& key, const std::string& what) {
    errors_.push_back(name(key) + (name(key).empty() ? "" : " ") + what);
  }

  // Unknown keys are errors so that typos do not silently fall back to defaults.
  void finish() {
    if (node_ == nullptr) return;
    for (auto it = node_->begin(); it != node_->end(); ++it) {
      if (!seen_.count(it.key())) errors_.push_back(name(it.key()) + " is not a recognized key");
    }
  }

 private:
  std::string name(const std::string& key) const {
    if (key.empty()) return path_;
    return path_.empty() ? key : path_ + "." + key;
  }

  const json* take(const char* key) {
    seen_.insert(key);
    return has(key) ? &node_->at(key) : nullptr;
  }

  const json* node_;
  std::string path_;
  std::vector<std::string>& errors_;
  std::set<std::string> seen_;
};

void read_optimizer(Section& s, OptimizerConfig& o) {
  s.read_enum("optimizer", o.kind, {{"adam", OptimizerKind::kAdam}, {"sgd", OptimizerKind::kSgd}});
  s.read("lr", o.lr);
  s.read("beta1", o.beta1);
  s.read("beta2", o.beta2);
  s.read("eps", o.eps);
  s.read("clip_norm", o.clip_norm);
}

void read_stage(Section& s, StageConfig& st) {
  s.read("epochs", st.epochs);
  s.read("batch_size", st.batch_size);
  s.read("shuffle_seed", st.shuffle_seed);
  read_optimizer(s, st.optimizer);
}

json stage_json(const StageConfig& st) {
  return {{"epochs", st.epochs},
          {"batch_size", st.batch_size},
          {"shuffle_seed", st.shuffle_seed},
          {"optimizer", to_string(st.optimizer.kind)},
          {"lr", st.optimizer.lr},
          {"beta1", st.optimizer.beta1},
          {"beta2", st.optimizer.beta2},
          {"eps", st.optimizer.eps},
          {"clip_norm", st.optimizer.clip_norm}};
}

void check_stage(const std::string& name, const StageConfig& st, std::vector<std::string>& errors) {
  if (st.batch_size < 1) errors.push_back(name + ".batch_size must be >= 1");
  const auto& o = st.optimizer;
  if (!(o.lr > 0.0) || !std::isfinite(o.lr)) errors.push_back(name + ".lr must be > 0");
  if (!(o.beta1 >= 0.0 && o.beta1 < 1.0)) errors.push_back(name + ".beta1 must lie in [0, 1)");
  if (!(o.beta2 >= 0.0 && o.beta2 < 1.0)) errors.push_back(name + ".beta2 must lie in [0, 1)");
  if (!(o.eps > 0.0)) errors.push_back(name + ".eps must be > 0");
  if (!(o.clip_norm >= 0.0)) errors.push_back(name + ".clip_norm must be >= 0");
}

std::string join_errors(const std::vector<std::string>& errors) {
  std::string msg = std::to_string(errors.size()) + (errors.size() == 1 ? " problem" : " problems");
  for (const auto& e : errors) msg += "\n  - " + e;
  return msg;
}

ExperimentConfig parse_unvalidated(const json& j, const fs::path& base, std::vector<std::string>& errors) {
  ExperimentConfig cfg;
  cfg.general.shuffle_seed = 11;
  cfg.domain.stage.shuffle_seed = 12;
  cfg.domain.lora.seed = 13;

  Section root(&j, "", errors);
  root.read("run_id", cfg.run_id);
  root.read_path("output_dir", cfg.output_dir, base);
  root.read("seed", cfg.seed);
  root.read("timing", cfg.timing);
  root.read("checkpoints", cfg.checkpoints);
  root.read_path("stop_file", cfg.stop_file, base);
  root.child("matrix");  // consumed by expand_matrix

  Section model = root.child("model");
  std::size_t vocab = 0;
  model.read("vocab_size", vocab);
  model.read("embed_dim", cfg.model.embed_dim);
  model.read("window", cfg.model.window);
  model.read("hidden", cfg.model.hidden);
  model.read("depth", cfg.model.depth);
  model.read("context", cfg.model.context);
  cfg.model.vocab_size = vocab;
  model.finish();

  Section data = root.child("data");
  auto& d = cfg.data;
  data.read("source", d.source);
  data.read("seed", d.seed);
  data.read("general_size", d.general_size);
  data.read("domain_size", d.domain_size);
  data.read("skew", d.skew);
  data.read("alphabet", d.synthetic.alphabet);
  data.read("seq_len", d.synthetic.seq_len);
  data.read("eval_fraction", d.synthetic.eval_fraction);
  data.read("choice_items", d.synthetic.choice_items);
  data.read("prompt_len", d.synthetic.prompt_len);
  data.read("continuation_len", d.synthetic.continuation_len);
  data.read("min_candidates", d.synthetic.min_candidates);
  data.read("max_candidates", d.synthetic.max_candidates);
  data.read_path("general_path", d.general_path, base);
  data.read_path("domain_path", d.domain_path, base);
  data.read_path("vocab_path", d.vocab_path, base);
  data.read_path("general_items", d.general_items, base);
  data.read_path("domain_items", d.domain_items, base);
  data.read_enum("unknown", d.unknown, {{"reject", UnknownPolicy::kReject}, {"reserve", UnknownPolicy::kReserve}});
  data.finish();

  Section general = root.child("general");
  read_stage(general, cfg.general);
  general.finish();

  Section imp = root.child("importance");
  auto& ic = cfg.importance;
  imp.read_enum("estimator", ic.estimator,
                {{"grad", Estimator::kGrad}, {"fisher", Estimator::kFisher}, {"path", Estimator::kPath}});
  imp.read_enum("granularity", ic.granularity, {{"scalar", Granularity::kScalar}, {"tensor", Granularity::kTensor}});
  imp.read_enum("over", ic.over, {{"base", ImportanceOver::kBase}, {"adapters", ImportanceOver::kAdapters}});
  imp.read("max_samples", ic.max_samples);
  imp.read("damping", ic.damping);
  if (imp.has("top_fraction") && imp.has("threshold")) {
    imp.fail("", "sets both top_fraction and threshold; choose one");
  }
  double value = ic.criterion.value;
  if (imp.has("threshold")) {
    imp.read("threshold", value);
    ic.criterion = PartitionCriterion::threshold(value);
  } else {
    imp.read("top_fraction", value);
    ic.criterion = PartitionCriterion::top_fraction(value);
  }
  imp.read("threshold", value);
  imp.finish();

  Section dom = root.child("domain");
  auto& dc = cfg.domain;
  std::string strategy_name;
  dom.read("strategy", strategy_name);
  if (dom.has("strategy")) {
    const std::string& s = strategy_name;
    dc.strategy = parse_strategy(s);
    if (!dc.strategy && !s.empty()) {
      dom.fail("strategy", "unknown value '" + s +
                               "' (expected one of: base, full, lora_mu, lora_nu_mu, ewclora, rslora, selective)");
    }
  }
  read_stage(dom, dc.stage);
  dom.read("lambda", dc.lambda);
  dom.read("ewc_lambda", dc.ewc_lambda);
  dom.read("nu_epochs", dc.nu_epochs);
  dom.read("merge_nu_adapters", dc.merge_nu_adapters);
  Section lora = dom.child("lora");
  lora.read("rank", dc.lora.rank);
  lora.read("alpha", dc.lora.alpha);
  lora.read("targets", dc.lora.targets);
  lora.read("seed", dc.lora.seed);
  lora.finish();
  dom.finish();

  root.finish();
  return cfg;
}

}  // namespace

std::vector<std::string> validate_config(const ExperimentConfig& cfg) {
  std::vector<std::string> errors;
  if (cfg.run_id.empty() || cfg.run_id.find('/') != std::string::npos || cfg.run_id == "." || cfg.run_id == "..") {
    errors.push_back("run_id must be a non-empty plain name");
  }
  if (!cfg.domain.strategy) errors.push_back("domain.strategy is required");

  const auto& m = cfg.model;
  if (m.embed_dim < 1) errors.push_back("model.embed_dim must be >= 1");
  if (m.window < 1) errors.push_back("model.window must be >= 1");
  if (m.hidden < 1) errors.push_back("model.hidden must be >= 1");
  if (m.depth < 1) errors.push_back("model.depth must be >= 1");
  if (m.context < 2) errors.push_back("model.context must be >= 2");

  const auto& d = cfg.data;
  if (d.source == "synthetic") {
    if (d.general_size < 1) errors.push_back("data.general_size must be >= 1");
    if (d.domain_size < 1) errors.push_back("data.domain_size must be >= 1");
    if (!(d.skew > 0.0 && d.skew <= 1.0)) errors.push_back("data.skew must lie in (0, 1]");
    const std::size_t alphabet = [&] {
      try {
        return alphabet_vocab(d.synthetic).size();
      } catch (const Error&) {
        return std::size_t{0};
      }
    }();
    if (alphabet < 2) errors.push_back("data.alphabet must hold at least 2 distinct UTF-8 symbols");
    if (m.vocab_size != 0 && alphabet >= 2 && m.vocab_size != alphabet) {
      errors.push_back("model.vocab_size " + std::to_string(m.vocab_size) + " does not match the alphabet size " +
                       std::to_string(alphabet));
    }
    if (d.synthetic.prompt_len < 1) errors.push_back("data.prompt_len must be >= 1");
    if (d.synthetic.continuation_len < 1) errors.push_back("data.continuation_len must be >= 1");
    if (d.synthetic.prompt_len + d.synthetic.continuation_len - 1 > m.context) {
      errors.push_back("data.prompt_len + data.continuation_len - 1 must not exceed model.context");
    }
    if (d.synthetic.min_candidates < 2 || d.synthetic.max_candidates < d.synthetic.min_candidates) {
      errors.push_back("data.min_candidates and data.max_candidates must satisfy 2 <= min <= max");
    }
    if (d.synthetic.choice_items < 1) errors.push_back("data.choice_items must be >= 1");
  } else if (d.source == "files") {
    for (const auto& [key, path] : {std::pair{"data.general_path", d.general_path}, {"data.domain_path", d.domain_path}}) {
      if (path.empty()) {
        errors.push_back(std::string(key) + " is required when data.source is 'files'");
      } else if (!fs::is_regular_file(path)) {
        errors.push_back(std::string(key) + " '" + path.string() + "' does not exist");
      }
    }
    for (const auto& [key, path] :
         {std::pair{"data.vocab_path", d.vocab_path}, {"data.general_items", d.general_items},
          {"data.domain_items", d.domain_items}}) {
      if (!path.empty() && !fs::is_regular_file(path)) {
        errors.push_back(std::string(key) + " '" + path.string() + "' does not exist");
      }
    }
  } else {
    errors.push_back("data.source must be 'synthetic' or 'files'");
  }
  if (d.synthetic.seq_len < m.context + 1) {
    errors.push_back("data.seq_len must be at least model.context + 1 (" + std::to_string(m.context + 1) + ")");
  }
  if (!(d.synthetic.eval_fraction > 0.0 && d.synthetic.eval_fraction < 1.0)) {
    errors.push_back("data.eval_fraction must lie in (0, 1)");
  }

  check_stage("general", cfg.general, errors);
  check_stage("domain", cfg.domain.stage, errors);

  const auto& ic = cfg.importance;
  if (ic.criterion.kind == PartitionCriterion::Kind::kTopFraction &&
      !(ic.criterion.value >= 0.0 && ic.criterion.value <= 1.0)) {
    errors.push_back("importance.top_fraction must lie in [0, 1], got " + format_double(ic.criterion.value));
  }
  if (ic.criterion.kind == PartitionCriterion::Kind::kThreshold && std::isnan(ic.criterion.value)) {
    errors.push_back("importance.threshold must be a number");
  }
  if (ic.max_samples < 1) errors.push_back("importance.max_samples must be >= 1");
  if (!(ic.damping >= 0.0)) errors.push_back("importance.damping must be >= 0");

  const auto& dc = cfg.domain;
  if (dc.lora.rank < 1) errors.push_back("domain.lora.rank must be >= 1");
  if (dc.lora.rank > std::min(m.window * m.embed_dim, m.hidden)) {
    errors.push_back("domain.lora.rank must not exceed min(model.window * model.embed_dim, model.hidden)");
  }
  if (!(dc.lora.alpha > 0.0)) errors.push_back("domain.lora.alpha must be > 0");
  if (!(dc.lambda >= 0.0)) errors.push_back("domain.lambda must be >= 0");
  if (!(dc.ewc_lambda >= 0.0)) errors.push_back("domain.ewc_lambda must be >= 0");
  if (dc.strategy == Strategy::kSelective && dc.lambda > 0.0 && ic.over == ImportanceOver::kAdapters) {
    errors.push_back("domain.lambda > 0 needs importance.over = 'base'");
  }
  if (dc.merge_nu_adapters && dc.strategy != Strategy::kLoraNuMu) {
    errors.push_back("domain.merge_nu_adapters only applies to strategy lora_nu_mu");
  }
  return errors;
}

ExperimentConfig parse_config(const json& j, const fs::path& base_dir) {
  std::vector<std::string> errors;
  ExperimentConfig cfg = parse_unvalidated(j, base_dir, errors);
  // Fields that failed to parse keep their defaults, so range checks stay meaningful.
  for (auto& e : validate_config(cfg)) errors.push_back(std::move(e));
  if (!errors.empty()) throw ConfigError(join_errors(errors));
  return cfg;
}

namespace {

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config '" + path.string() + "'");
  try {
    return json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::parse_error& e) {
    throw ConfigError("'" + path.string() + "' is not valid JSON: " + e.what());
  }
}

}  // namespace

ExperimentConfig load_config(const fs::path& path) {
  return parse_config(read_json_file(path), path.parent_path());
}

json to_json(const ExperimentConfig& cfg) {
  const auto& d = cfg.data;
  const auto& ic = cfg.importance;
  const auto& dc = cfg.domain;
  json imp = {{"estimator", to_string(ic.estimator)},
              {"granularity", to_string(ic.granularity)},
              {"over", to_string(ic.over)},
              {"max_samples", ic.max_samples},
              {"damping", ic.damping}};
  imp[ic.criterion.kind == PartitionCriterion::Kind::kTopFraction ? "top_fraction" : "threshold"] = ic.criterion.value;
  json data = {{"source", d.source},
               {"seed", d.seed},
               {"general_size", d.general_size},
               {"domain_size", d.domain_size},
               {"skew", d.skew},
               {"alphabet", d.synthetic.alphabet},
               {"seq_len", d.synthetic.seq_len},
               {"eval_fraction", d.synthetic.eval_fraction},
               {"choice_items", d.synthetic.choice_items},
               {"prompt_len", d.synthetic.prompt_len},
               {"continuation_len", d.synthetic.continuation_len},
               {"min_candidates", d.synthetic.min_candidates},
               {"max_candidates", d.synthetic.max_candidates},
               {"unknown", d.unknown == UnknownPolicy::kReject ? "reject" : "reserve"}};
  for (const auto& [key, path] : {std::pair{"general_path", d.general_path}, {"domain_path", d.domain_path},
                                  {"vocab_path", d.vocab_path}, {"general_items", d.general_items},
                                  {"domain_items", d.domain_items}}) {
    if (!path.empty()) data[key] = path.generic_string();
  }
  json model = {{"embed_dim", cfg.model.embed_dim}, {"window", cfg.model.window}, {"hidden", cfg.model.hidden},
                {"depth", cfg.model.depth},         {"context", cfg.model.context}};
  if (cfg.model.vocab_size != 0) model["vocab_size"] = cfg.model.vocab_size;
  json domain = stage_json(dc.stage);
  domain["strategy"] = dc.strategy ? json(to_string(*dc.strategy)) : json(nullptr);
  domain["lambda"] = dc.lambda;
  domain["ewc_lambda"] = dc.ewc_lambda;
  domain["nu_epochs"] = dc.nu_epochs;
  domain["merge_nu_adapters"] = dc.merge_nu_adapters;
  domain["lora"] = {{"rank", dc.lora.rank}, {"alpha", dc.lora.alpha}, {"targets", dc.lora.targets}, {"seed", dc.lora.seed}};
  json out = {{"run_id", cfg.run_id},
              {"output_dir", cfg.output_dir.generic_string()},
              {"seed", cfg.seed},
              {"timing", cfg.timing},
              {"checkpoints", cfg.checkpoints},
              {"model", model},
              {"data", data},
              {"general", stage_json(cfg.general)},
              {"importance", imp},
              {"domain", domain}};
  if (!cfg.stop_file.empty()) out["stop_file"] = cfg.stop_file.generic_string();
  return out;
}

std::vector<ExperimentConfig> expand_matrix(const json& j, const fs::path& base_dir) {
  if (!j.is_object() || !j.contains("matrix")) return {parse_config(j, base_dir)};
  const json& m = j.at("matrix");
  std::vector<std::string> errors;
  if (!m.is_object() || !m.contains("strategies") || !m.at("strategies").is_array() || m.at("strategies").size() < 2) {
    throw ConfigError("matrix.strategies must list at least two strategies");
  }
  for (auto it = m.begin(); it != m.end(); ++it) {
    if (it.key() != "strategies" && it.key() != "overrides") errors.push_back("matrix." + it.key() + " is not a recognized key");
  }
  const json overrides = m.value("overrides", json::object());
  std::vector<ExperimentConfig> out;
  std::set<std::string> seen;
  for (const auto& s : m.at("strategies")) {
    if (!s.is_string()) {
      errors.push_back("matrix.strategies entries must be strategy names");
      continue;
    }
    const std::string name = s.get<std::string>();
    if (!seen.insert(name).second) errors.push_back("matrix.strategies lists '" + name + "' twice");
    json one = j;
    one.erase("matrix");
    one["domain"]["strategy"] = name;
    if (overrides.contains(name)) one.merge_patch(overrides.at(name));
    try {
      out.push_back(parse_config(one, base_dir));
    } catch (const ConfigError& e) {
      errors.push_back("strategy '" + name + "': " + e.what());
    }
  }
  if (!errors.empty()) throw ConfigError(join_errors(errors));
  return out;
}

// ---------------------------------------------------------------------------
// Data

namespace {

std::uint64_t fnv(std::uint64_t h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t fnv_seqs(std::uint64_t h, const std::vector<TokenSeq>& seqs) {
  for (const auto& s : seqs) {
    const std::uint64_t n = s.size();
    h = fnv(h, &n, sizeof(n));
    h = fnv(h, s.data(), s.size() * sizeof(int));
  }
  return h;
}

std::vector<ChoiceItem> read_items(const fs::path& path, const Vocab& vocab) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read '" + path.string() + "'");
  std::vector<ChoiceItem> items;
  std::string line;
  std::size_t lineno = 0;
  auto ids = [&](const std::string& text) {
    TokenSeq out;
    for (const auto& s : utf8_symbols(text)) {
      if (auto id = vocab.lookup(s)) {
        out.push_back(*id);
      } else if (vocab.unknown_id()) {
        out.push_back(*vocab.unknown_id());
      } else {
        throw DataError("character '" + s + "' in '" + path.string() + "' is not in the vocabulary");
      }
    }
    return out;
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    try {
      const json j = json::parse(line);
      ChoiceItem item;
      item.prompt = ids(j.at("prompt").get<std::string>());
      for (const auto& c : j.at("candidates")) item.candidates.push_back(ids(c.get<std::string>()));
      item.correct = j.at("correct").get<std::size_t>();
      if (item.prompt.empty() || item.candidates.size() < 2 || item.correct >= item.candidates.size()) {
        throw DataError(where + ": item needs a prompt, at least 2 candidates and a valid correct index");
      }
      items.push_back(std::move(item));
    } catch (const json::exception& e) {
      throw DataError(where + ": " + e.what());
    }
  }
  return items;
}

void write_items(const fs::path& path, const std::vector<ChoiceItem>& items, const Vocab& vocab) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  for (const auto& it : items) {
    json c = json::array();
    for (const auto& cand : it.candidates) c.push_back(detokenize(cand, vocab));
    out << json{{"prompt", detokenize(it.prompt, vocab)}, {"candidates", c}, {"correct", it.correct}}.dump() << '\n';
  }
}

}  // namespace

std::uint64_t Datasets::fingerprint() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& s : vocab.symbols()) h = fnv(h, s.data(), s.size() + 1);
  for (const auto* c : {&general, &domain}) {
    h = fnv_seqs(h, c->train);
    h = fnv_seqs(h, c->eval);
  }
  for (const auto* items : {&general_items, &domain_items}) {
    for (const auto& it : *items) {
      h = fnv_seqs(h, {it.prompt});
      h = fnv_seqs(h, it.candidates);
      h = fnv(h, &it.correct, sizeof(it.correct));
    }
  }
  return h;
}

Datasets load_datasets(const ExperimentConfig& cfg) {
  const auto& d = cfg.data;
  Datasets out;
  if (d.source == "synthetic") {
    out.general = gen_general_corpus(d.seed, d.general_size, d.synthetic);
    DomainData dom = gen_domain_corpus(d.seed, d.domain_size, d.skew, d.synthetic);
    out.domain = std::move(dom.corpus);
    out.domain_items = std::move(dom.items);
    out.general_items = gen_general_choices(d.seed, d.synthetic);
    out.vocab = out.general.vocab;
  } else {
    VocabPolicy policy;
    policy.unknown = d.unknown;
    if (!d.vocab_path.empty()) policy.fixed = read_vocab(d.vocab_path);
    Corpus general = ingest_text(d.general_path, policy);
    // The domain text must share the general vocabulary.
    policy.fixed = general.vocab;
    Corpus domain = ingest_text(d.domain_path, policy);
    out.vocab = domain.vocab;
    general.vocab = out.vocab;
    domain.role = CorpusRole::kDomain;
    out.general = chunk_and_split(general, d.synthetic.seq_len, d.synthetic.eval_fraction);
    out.domain = chunk_and_split(domain, d.synthetic.seq_len, d.synthetic.eval_fraction);
    if (!d.general_items.empty()) out.general_items = read_items(d.general_items, out.vocab);
    if (!d.domain_items.empty()) out.domain_items = read_items(d.domain_items, out.vocab);
  }
  const std::size_t ctx = cfg.model.context;
  out.general_train = make_examples(out.general.train, ctx);
  out.general_eval = make_examples(out.general.eval, ctx);
  out.domain_train = make_examples(out.domain.train, ctx);
  out.domain_eval = make_examples(out.domain.eval, ctx);
  return out;
}

ModelConfig resolve_model(const ExperimentConfig& cfg, const Datasets& data) {
  ModelConfig m = cfg.model;
  if (m.vocab_size != 0 && m.vocab_size != data.vocab.size()) {
    throw ConfigError("model.vocab_size " + std::to_string(m.vocab_size) + " does not match the data vocabulary of " +
                      std::to_string(data.vocab.size()) + " symbols");
  }
  m.vocab_size = data.vocab.size();
  return m;
}

void export_datasets(const Datasets& data, const fs::path& dir) {
  fs::create_directories(dir);
  write_vocab(dir / "vocab.txt", data.vocab);
  write_corpus_text(dir / "general_train.txt", data.general.train, data.vocab);
  write_corpus_text(dir / "general_eval.txt", data.general.eval, data.vocab);
  write_corpus_text(dir / "domain_train.txt", data.domain.train, data.vocab);
  write_corpus_text(dir / "domain_eval.txt", data.domain.eval, data.vocab);
  write_items(dir / "general_items.jsonl", data.general_items, data.vocab);
  write_items(dir / "domain_items.jsonl", data.domain_items, data.vocab);
}

// ---------------------------------------------------------------------------
// Metrics

std::string metrics_csv_header() {
  return "run_id,strategy,stage,epoch,general_ppl,general_acc,domain_ppl,domain_acc,core_fraction,wall_ms,"
         "peak_param_bytes,importance_bytes";
}

std::string to_csv(const MetricsRecord& r) {
  auto opt = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string(); };
  std::ostringstream s;
  s << r.run_id << ',' << r.strategy << ',' << r.stage << ',' << r.epoch << ',' << format_double(r.general_ppl) << ','
    << opt(r.general_acc) << ',' << format_double(r.domain_ppl) << ',' << opt(r.domain_acc) << ','
    << format_double(r.core_fraction) << ',' << format_double(r.wall_ms) << ',' << r.peak_param_bytes << ','
    << r.importance_bytes;
  return s.str();
}

json to_json(const MetricsRecord& r) {
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  return {{"run_id", r.run_id},
          {"strategy", r.strategy},
          {"stage", r.stage},
          {"epoch", r.epoch},
          {"general_ppl", r.general_ppl},
          {"general_acc", opt(r.general_acc)},
          {"domain_ppl", r.domain_ppl},
          {"domain_acc", opt(r.domain_acc)},
          {"core_fraction", r.core_fraction},
          {"wall_ms", r.wall_ms},
          {"peak_param_bytes", r.peak_param_bytes},
          {"importance_bytes", r.importance_bytes}};
}

MetricsRecord evaluate_record(const TinyLM& model, const Datasets& data) {
  MetricsRecord r;
  const EvalResult g = evaluate(model, data.general_eval, data.general_items);
  const EvalResult d = evaluate(model, data.domain_eval, data.domain_items);
  r.general_ppl = g.ppl;
  r.general_acc = g.accuracy;
  r.domain_ppl = d.ppl;
  r.domain_acc = d.accuracy;
  return r;
}

MetricsSink::MetricsSink(const fs::path& dir) {
  fs::create_directories(dir);
  csv_.open(dir / "metrics.csv", std::ios::binary | std::ios::trunc);
  jsonl_.open(dir / "metrics.jsonl", std::ios::binary | std::ios::trunc);
  if (!csv_ || !jsonl_) throw DataError("cannot write metrics in '" + dir.string() + "'");
  csv_ << metrics_csv_header() << '\n' << std::flush;
}

void MetricsSink::append(const MetricsRecord& r) {
  records_.push_back(r);
  if (csv_.is_open()) csv_ << to_csv(r) << '\n' << std::flush;
  if (jsonl_.is_open()) jsonl_ << to_json(r).dump() << '\n' << std::flush;
}

// ---------------------------------------------------------------------------
// Pipeline

ImportanceMap estimate_importance(TinyLM& model, const ImportanceConfig& cfg, const Datasets& data,
                                  const PathImportance* path) {
  ImportanceMap imap;
  switch (cfg.estimator) {
    case Estimator::kGrad:
      imap = accumulate_grad_importance(model, data.general_train, cfg.max_samples);
      break;
    case Estimator::kFisher:
      imap = accumulate_fisher_diag(model, data.general_train, cfg.max_samples);
      break;
    case Estimator::kPath:
      if (path == nullptr) throw ConfigError("the path estimator needs a recorded general-stage trajectory");
      imap = path->finalize(model.params());
      break;
  }
  if (cfg.granularity == Granularity::kTensor) imap = aggregate_per_tensor(imap);
  return imap;
}

namespace {

using Clock = std::chrono::steady_clock;

// Parameter values plus optimizer moments.
std::size_t param_bytes(const ParameterRegistry& reg, const OptimizerState* opt) {
  std::size_t n = reg.total_scalars();
  if (opt && opt->config.kind == OptimizerKind::kAdam) {
    for (const auto& m : opt->m) n += 2 * static_cast<std::size_t>(m.size());
  }
  return 8 * n;
}

// Re-raises an error with the failing stage named, keeping its exit code.
template <typename F>
auto in_stage(const char* stage, F&& f) {
  try {
    return f();
  } catch (const Error& e) {
    throw Error(e.code(), std::string("stage '") + stage + "' failed: " + e.what());
  }
}

fs::path stop_file_for(const ExperimentConfig& cfg) {
  return cfg.stop_file.empty() ? cfg.run_dir() / "STOP" : cfg.stop_file;
}

LoraSpec lora_spec(const ExperimentConfig& cfg, LoraScaleMode mode) {
  LoraSpec s = cfg.domain.lora;
  s.mode = mode;
  return s;
}

}  // namespace

Prepared prepare(const ExperimentConfig& cfg, MetricsSink* sink) {
  Datasets data = in_stage("data", [&] { return load_datasets(cfg); });
  const ModelConfig mc = in_stage("model", [&] { return resolve_model(cfg, data); });
  Prepared p(std::move(data), mc, TinyLM(mc, cfg.seed));
  p.init_hash = fingerprint(p.model.params());
  p.data_hash = p.data.fingerprint();
  p.path.emplace(p.model.params(), cfg.importance.damping);

  in_stage("general", [&] {
    OptimizerState opt = OptimizerState::create(cfg.general.optimizer, p.model.params());
    const std::size_t bytes = param_bytes(p.model.params(), &opt);
    const auto t0 = Clock::now();
    auto record = [&](std::size_t epoch) {
      MetricsRecord r = evaluate_record(p.model, p.data);
      r.run_id = cfg.run_id;
      r.strategy = "shared";
      r.stage = "general";
      r.epoch = epoch;
      r.peak_param_bytes = bytes;
      if (cfg.timing) r.wall_ms = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
      p.general_records.push_back(r);
      if (sink) sink->append(r);
    };
    record(0);
    LoopOptions lo;
    lo.batch_size = cfg.general.batch_size;
    lo.shuffle_seed = cfg.general.shuffle_seed;
    lo.hook = &*p.path;
    lo.stop_file = stop_file_for(cfg);
    lo.on_epoch = [&](const EpochStats& s) { record(s.epoch); };
    const TrainLog log = train_general(p.model, p.data.general_train, cfg.general.epochs, opt, lo);
    p.interrupted = log.interrupted;
    return 0;
  });
  p.general_hash = fingerprint(p.model.params());
  p.reference = p.general_records.back();
  return p;
}

Prepared prepare_from_checkpoint(const ExperimentConfig& cfg, const fs::path& checkpoint) {
  Datasets data = in_stage("data", [&] { return load_datasets(cfg); });
  const ModelConfig mc = in_stage("model", [&] { return resolve_model(cfg, data); });
  CheckpointData rest;
  TinyLM model = load_model(checkpoint, mc, &rest);
  Prepared p(std::move(data), mc, std::move(model));
  p.init_hash = fingerprint(p.model.params());
  p.general_hash = p.init_hash;
  p.data_hash = p.data.fingerprint();
  p.reference = evaluate_record(p.model, p.data);
  p.reference.run_id = cfg.run_id;
  p.reference.strategy = "shared";
  p.reference.stage = "general";
  p.importance = std::move(rest.importance);
  p.mask = std::move(rest.mask);
  return p;
}

StrategyResult run_strategy(const ExperimentConfig& cfg, const Prepared& prepared, const fs::path& dir,
                            MetricsSink& sink) {
  const Strategy strategy = cfg.domain.strategy.value();
  const Datasets& data = prepared.data;
  const char* name = to_string(strategy);
  StrategyResult res;
  res.strategy = strategy;
  res.reference = prepared.reference;
  res.reference.strategy = name;
  fs::create_directories(dir);

  TinyLM model = prepared.model;
  std::size_t peak = param_bytes(model.params(), nullptr);
  std::size_t imp_bytes = 0;
  std::optional<PenaltyConfig> penalty;
  const fs::path stop = stop_file_for(cfg);

  auto record = [&](const char* stage, std::size_t epoch, Clock::time_point t0) {
    MetricsRecord r = evaluate_record(model, data);
    r.run_id = cfg.run_id;
    r.strategy = name;
    r.stage = stage;
    r.epoch = epoch;
    r.core_fraction = res.mask ? res.mask->core_fraction : 0.0;
    r.peak_param_bytes = peak;
    r.importance_bytes = imp_bytes;
    if (cfg.timing) r.wall_ms = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
    sink.append(r);
    return r;
  };
  auto interrupted = [&] {
    if (cfg.checkpoints) save_checkpoint(dir / "interrupted.ckpt", model);
    res.interrupted = true;
    return res;
  };

  const bool over_adapters = strategy == Strategy::kSelective && cfg.importance.over == ImportanceOver::kAdapters;
  std::optional<PathImportance> nu_path;

  if (strategy == Strategy::kLoraNuMu || over_adapters) {
    const bool stopped = in_stage("general_adapters", [&] {
      model.attach_lora(lora_spec(cfg, LoraScaleMode::kStandard));
      OptimizerState opt = OptimizerState::create(cfg.domain.stage.optimizer, model.params());
      peak = std::max(peak, param_bytes(model.params(), &opt));
      if (over_adapters) nu_path.emplace(model.params(), cfg.importance.damping);
      const auto t0 = Clock::now();
      LoopOptions lo;
      lo.batch_size = cfg.domain.stage.batch_size;
      lo.shuffle_seed = derive_seed(cfg.domain.stage.shuffle_seed, 1);
      lo.hook = nu_path ? &*nu_path : nullptr;
      lo.stop_file = stop;
      lo.on_epoch = [&](const EpochStats& s) { record("general_adapters", s.epoch, t0); };
      return train_epochs(model, data.general_train, cfg.domain.nu_epochs, opt, lo).interrupted;
    });
    if (stopped) return interrupted();
  }

  if (strategy == Strategy::kSelective && prepared.mask) {
    res.importance = prepared.importance;
    res.mask = prepared.mask;
    if (res.importance) imp_bytes = importance_storage_bytes(res.importance->total_scalars());
    if (cfg.domain.lambda > 0.0) {
      if (!res.importance) throw ConfigError("domain.lambda > 0 needs importance scores in the checkpoint");
      penalty = make_penalty(model.params(), *res.importance, cfg.domain.lambda);
    }
  } else if (strategy == Strategy::kSelective) {
    in_stage("importance", [&] {
      const PathImportance* path = over_adapters ? (nu_path ? &*nu_path : nullptr) : &*prepared.path;
      res.importance = estimate_importance(model, cfg.importance, data, path);
      imp_bytes = importance_storage_bytes(res.importance->total_scalars());
      std::ofstream csv(dir / "importance_summary.csv", std::ios::binary);
      write_summary_csv(csv, importance_summary(*res.importance));
      return 0;
    });
    in_stage("partition", [&] {
      res.mask = partition(*res.importance, cfg.importance.criterion);
      if (cfg.checkpoints) save_checkpoint(dir / "partition.ckpt", model, &*res.importance, &*res.mask);
      if (cfg.domain.lambda > 0.0) penalty = make_penalty(model.params(), *res.importance, cfg.domain.lambda);
      return 0;
    });
  }

  in_stage("adapters", [&] {
    switch (strategy) {
      case Strategy::kLoraNuMu:
        if (cfg.domain.merge_nu_adapters) {
          model.merge_lora();
          model.attach_lora(lora_spec(cfg, LoraScaleMode::kStandard));
        }
        break;
      case Strategy::kEwcLora: {
        // Fisher of the general task at the general-stage weights.
        const ImportanceMap fisher = accumulate_fisher_diag(model, data.general_train, cfg.importance.max_samples);
        imp_bytes = importance_storage_bytes(fisher.total_scalars());
        penalty = make_penalty(model.params(), fisher, cfg.domain.ewc_lambda);
        model.attach_lora(lora_spec(cfg, LoraScaleMode::kStandard));
        break;
      }
      case Strategy::kLoraMu:
        model.attach_lora(lora_spec(cfg, LoraScaleMode::kStandard));
        break;
      case Strategy::kRsLora:
        model.attach_lora(lora_spec(cfg, LoraScaleMode::kRankStabilized));
        break;
      default:
        break;
    }
    return 0;
  });

  const auto t_pre = Clock::now();
  res.pre_domain = record("pre_domain", 0, t_pre);

  const bool stopped = in_stage("domain", [&] {
    OptimizerState opt = OptimizerState::create(cfg.domain.stage.optimizer, model.params());
    if (strategy != Strategy::kBase) peak = std::max(peak, param_bytes(model.params(), &opt));
    const auto t0 = Clock::now();
    LoopOptions lo;
    lo.batch_size = cfg.domain.stage.batch_size;
    lo.shuffle_seed = cfg.domain.stage.shuffle_seed;
    lo.stop_file = stop;
    lo.on_epoch = [&](const EpochStats& s) { record("domain", s.epoch, t0); };
    const DomainPlan plan{strategy, res.mask ? &*res.mask : nullptr, penalty ? &*penalty : nullptr};
    return train_domain(model, data.domain_train, cfg.domain.stage.epochs, opt, plan, lo).interrupted;
  });
  if (stopped) return interrupted();

  in_stage("final", [&] {
    res.final = record("final", strategy == Strategy::kBase ? 0 : cfg.domain.stage.epochs, t_pre);
    res.delta_general_ppl = res.final.general_ppl - res.pre_domain.general_ppl;
    res.final_hash = fingerprint(model.params());
    if (cfg.checkpoints) {
      save_checkpoint(dir / "final.ckpt", model, res.importance ? &*res.importance : nullptr,
                      res.mask ? &*res.mask : nullptr);
    }
    return 0;
  });
  return res;
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << text;
}

}  // namespace

PipelineResult run_pipeline(const ExperimentConfig& cfg) {
  PipelineResult out;
  out.run_dir = cfg.run_dir();
  fs::create_directories(out.run_dir);
  write_text(out.run_dir / "config.normalized.json", to_json(cfg).dump(2) + "\n");
  MetricsSink sink(out.run_dir);
  Prepared p = prepare(cfg, &sink);
  if (cfg.checkpoints) save_checkpoint(out.run_dir / "general.ckpt", p.model);
  if (p.interrupted) {
    out.interrupted = true;
    out.records = sink.records();
    return out;
  }
  out.result = run_strategy(cfg, p, out.run_dir, sink);
  out.interrupted = out.result.interrupted;
  out.records = sink.records();
  return out;
}

MatrixReport run_matrix(const std::vector<ExperimentConfig>& configs) {
  if (configs.size() < 2) throw ConfigError("a matrix needs at least two strategies");
  const json ref = to_json(configs.front());
  std::set<std::string> names;
  std::vector<std::string> errors;
  for (const auto& c : configs) {
    if (!c.domain.strategy) throw ConfigError("every matrix entry needs domain.strategy");
    if (!names.insert(to_string(*c.domain.strategy)).second) {
      errors.push_back("strategy '" + std::string(to_string(*c.domain.strategy)) + "' appears twice");
    }
    const json j = to_json(c);
    for (const char* key : {"seed", "model", "data", "general", "run_id", "output_dir"}) {
      if (j.at(key) != ref.at(key)) {
        errors.push_back("strategy '" + std::string(to_string(*c.domain.strategy)) + "' differs in '" + key +
                         "'; all strategies must share seeds, data, model and the general stage");
      }
    }
  }
  if (!errors.empty()) throw ConfigError(join_errors(errors));

  const ExperimentConfig& base = configs.front();
  const fs::path dir = base.run_dir();
  fs::create_directories(dir);
  json all = json::array();
  for (const auto& c : configs) all.push_back(to_json(c));
  write_text(dir / "config.normalized.json", all.dump(2) + "\n");

  MetricsSink sink(dir);
  const Prepared p = prepare(base, &sink);
  if (base.checkpoints) save_checkpoint(dir / "general.ckpt", p.model);
  if (p.interrupted) throw TrainingError("matrix interrupted during the general stage");

  MatrixReport report;
  report.run_id = base.run_id;
  report.init_hash = p.init_hash;
  report.general_hash = p.general_hash;
  report.data_hash = p.data_hash;
  for (const auto& c : configs) {
    StrategyResult r = run_strategy(c, p, dir / to_string(*c.domain.strategy), sink);
    if (r.interrupted) throw TrainingError(std::string("matrix interrupted during strategy ") + to_string(r.strategy));
    report.rows.push_back(std::move(r));
  }
  write_text(dir / "matrix.txt", format_matrix(report));
  write_text(dir / "matrix.jsonl", matrix_jsonl(report));
  return report;
}

namespace {

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

std::string signed_fixed(double v) { return (v >= 0 ? "+" : "") + fixed(v, 4); }

std::string pct(const std::optional<double>& v) { return v ? fixed(100.0 * *v, 2) : "-"; }

std::string hex(std::uint64_t v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

std::string format_matrix(const MatrixReport& report) {
  std::ostringstream s;
  s << "run " << report.run_id << "  init " << hex(report.init_hash) << "  general " << hex(report.general_hash)
    << "  data " << hex(report.data_hash) << "\n\n";
  char line[256];
  std::snprintf(line, sizeof(line), "%-12s %11s %11s %11s %11s %11s %9s\n", "strategy", "general_ppl", "general_acc",
                "domain_ppl", "domain_acc", "d_gen_ppl", "core");
  s << line;
  for (const auto& r : report.rows) {
    std::snprintf(line, sizeof(line), "%-12s %11s %11s %11s %11s %11s %9s\n", to_string(r.strategy),
                  fixed(r.final.general_ppl, 4).c_str(), pct(r.final.general_acc).c_str(),
                  fixed(r.final.domain_ppl, 4).c_str(), pct(r.final.domain_acc).c_str(),
                  signed_fixed(r.delta_general_ppl).c_str(),
                  fixed(r.final.core_fraction, 4).c_str());
    s << line;
  }
  return s.str();
}

std::string matrix_jsonl(const MatrixReport& report) {
  std::string out;
  for (const auto& r : report.rows) {
    json j = to_json(r.final);
    j["stage"] = "matrix";
    j["delta_general_ppl"] = r.delta_general_ppl;
    j["pre_domain_general_ppl"] = r.pre_domain.general_ppl;
    j["reference_general_ppl"] = r.reference.general_ppl;
    j["init_hash"] = hex(report.init_hash);
    j["general_hash"] = hex(report.general_hash);
    j["data_hash"] = hex(report.data_hash);
    j["final_hash"] = hex(r.final_hash);
    out += j.dump() + "\n";
  }
  return out;
}

CostReport measure_importance_cost(const ExperimentConfig& cfg, std::size_t samples) {
  if (samples == 0) throw DataError("cost measurement needs at least one sample");
  const Datasets data = load_datasets(cfg);
  TinyLM model(resolve_model(cfg, data), cfg.seed);
  CostReport r;
  r.scalars = model.params().total_scalars();
  r.samples = std::min(samples, data.general_train.size());
  const auto t0 = Clock::now();
  accumulate_grad_importance(model, data.general_train, r.samples);
  const auto t1 = Clock::now();
  accumulate_fisher_diag(model, data.general_train, r.samples);
  const auto t2 = Clock::now();
  r.grad_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
  r.fisher_ms = std::chrono::duration<double, std::milli>(t2 - t1).count();
  r.ratio = r.grad_ms > 0.0 ? r.fisher_ms / r.grad_ms : 0.0;
  r.importance_bytes = importance_storage_bytes(r.scalars);
  r.peak_param_bytes = param_bytes(model.params(), nullptr);
  return r;
}

json to_json(const CostReport& r) {
  return {{"scalars", r.scalars},         {"samples", r.samples},
          {"grad_ms", r.grad_ms},         {"fisher_ms", r.fisher_ms},
          {"fisher_over_grad", r.ratio},  {"importance_bytes", r.importance_bytes},
          {"peak_param_bytes", r.peak_param_bytes}};
}

}  // namespace sfrz
