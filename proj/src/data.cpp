// SPDX-License-Identifier: Apache-2.0
#include "sfrz/data.hpp"

#include "sfrz/errors.hpp"
#include "sfrz/random.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace sfrz {

// ---------------------------------------------------------------------------
// Vocab / tokenization

Vocab::Vocab(std::vector<std::string> symbols) {
  for (auto& s : symbols) {
    if (index_.count(s)) throw DataError("duplicate vocabulary symbol '" + s + "'");
    intern(s);
  }
}

int Vocab::intern(const std::string& symbol) {
  if (auto it = index_.find(symbol); it != index_.end()) return it->second;
  const int id = static_cast<int>(symbols_.size());
  symbols_.push_back(symbol);
  index_.emplace(symbol, id);
  if (symbol == kUnknownSymbol) unknown_id_ = id;
  return id;
}

std::optional<int> Vocab::lookup(const std::string& symbol) const {
  if (auto it = index_.find(symbol); it != index_.end()) return it->second;
  return std::nullopt;
}

int Vocab::reserve_unknown() {
  if (unknown_id_) return *unknown_id_;
  return intern(kUnknownSymbol);
}

std::vector<std::string> utf8_symbols(const std::string& text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    const auto c = static_cast<unsigned char>(text[i]);
    std::size_t len = 0;
    if (c < 0x80) len = 1;
    else if ((c >> 5) == 0x6) len = 2;
    else if ((c >> 4) == 0xE) len = 3;
    else if ((c >> 3) == 0x1E) len = 4;
    else throw DataError("invalid UTF-8 lead byte at offset " + std::to_string(i));
    if (i + len > text.size()) throw DataError("truncated UTF-8 sequence at offset " + std::to_string(i));
    for (std::size_t k = 1; k < len; ++k) {
      if ((static_cast<unsigned char>(text[i + k]) >> 6) != 0x2) {
        throw DataError("invalid UTF-8 continuation byte at offset " + std::to_string(i + k));
      }
    }
    out.push_back(text.substr(i, len));
    i += len;
  }
  return out;
}

TokenSeq tokenize(const std::string& text, const Vocab& vocab) {
  TokenSeq ids;
  for (const auto& s : utf8_symbols(text)) {
    if (auto id = vocab.lookup(s)) {
      ids.push_back(*id);
    } else if (vocab.unknown_id()) {
      ids.push_back(*vocab.unknown_id());
    } else {
      throw DataError("character '" + s + "' is not in the vocabulary");
    }
  }
  return ids;
}

std::string detokenize(const TokenSeq& ids, const Vocab& vocab) {
  std::string out;
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab.size()) {
      throw IndexError("token id " + std::to_string(id) + " outside vocabulary");
    }
    out += vocab.symbol(id);
  }
  return out;
}

const char* to_string(CorpusRole role) { return role == CorpusRole::kGeneral ? "general" : "domain"; }

// ---------------------------------------------------------------------------
// Grammars

namespace {

std::size_t draw(Rng& rng, const std::vector<double>& p) { return rng.categorical(p); }

void normalize(std::vector<double>& p) {
  double s = 0.0;
  for (double x : p) s += x;
  for (double& x : p) x /= s;
}

constexpr std::uint64_t kTagGeneralGrammar = 1;
constexpr std::uint64_t kTagDomainStructure = 2;
constexpr std::uint64_t kTagGeneralSamples = 10;
constexpr std::uint64_t kTagDomainSamples = 20;
constexpr std::uint64_t kTagDomainChoices = 30;
constexpr std::uint64_t kTagGeneralChoices = 40;

}  // namespace

TokenSeq MarkovGrammar::sample(Rng& rng, std::size_t length) const { return continue_from(rng, {}, length); }

TokenSeq MarkovGrammar::continue_from(Rng& rng, const TokenSeq& prefix, std::size_t length) const {
  TokenSeq out;
  out.reserve(length);
  int prev = prefix.empty() ? -1 : prefix.back();
  for (std::size_t i = 0; i < length; ++i) {
    const auto& p = prev < 0 ? initial : transition[static_cast<std::size_t>(prev)];
    prev = static_cast<int>(draw(rng, p));
    out.push_back(prev);
  }
  return out;
}

double MarkovGrammar::log_prob(const TokenSeq& prefix, const TokenSeq& continuation) const {
  double lp = 0.0;
  int prev = prefix.empty() ? -1 : prefix.back();
  for (int tok : continuation) {
    const auto& p = prev < 0 ? initial : transition[static_cast<std::size_t>(prev)];
    lp += std::log(p[static_cast<std::size_t>(tok)]);
    prev = tok;
  }
  return lp;
}

Vocab alphabet_vocab(const SyntheticOptions& options) {
  Vocab v;
  for (const auto& s : utf8_symbols(options.alphabet)) v.intern(s);
  if (v.size() < 2) throw ConfigError("synthetic alphabet needs at least 2 distinct symbols");
  return v;
}

MarkovGrammar general_grammar(std::uint64_t seed, std::size_t n) {
  Rng rng(derive_seed(seed, kTagGeneralGrammar));
  MarkovGrammar g;
  g.initial.assign(n, 1.0 / static_cast<double>(n));
  g.transition.assign(n, std::vector<double>(n));
  for (auto& row : g.transition) {
    for (double& w : row) w = std::exp(1.5 * rng.normal());
    normalize(row);
  }
  return g;
}

MarkovGrammar domain_grammar(std::uint64_t seed, double skew, std::size_t n) {
  if (!(skew > 0.0 && skew <= 1.0)) throw ConfigError("skew must lie in (0, 1], got " + std::to_string(skew));
  const MarkovGrammar general = general_grammar(seed, n);

  // Peaked chain: a seeded half of the alphabet, each symbol mostly followed
  // by its cyclic successor within that subset.
  Rng rng(derive_seed(seed, kTagDomainStructure));
  std::vector<int> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = static_cast<int>(i);
  rng.shuffle(order);
  const std::size_t m = std::max<std::size_t>(2, n / 2);
  std::vector<int> subset(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(m));
  std::vector<double> on_subset(n, 0.0);
  for (int s : subset) on_subset[static_cast<std::size_t>(s)] = 1.0 / static_cast<double>(m);

  std::vector<std::vector<double>> peaked(n, on_subset);
  for (std::size_t k = 0; k < m; ++k) {
    auto& row = peaked[static_cast<std::size_t>(subset[k])];
    for (double& w : row) w *= 0.2;
    row[static_cast<std::size_t>(subset[(k + 1) % m])] += 0.8;
  }

  MarkovGrammar d;
  d.initial.resize(n);
  d.transition.assign(n, std::vector<double>(n));
  for (std::size_t i = 0; i < n; ++i) {
    d.initial[i] = (1.0 - skew) * general.initial[i] + skew * on_subset[i];
    for (std::size_t j = 0; j < n; ++j) {
      d.transition[i][j] = (1.0 - skew) * general.transition[i][j] + skew * peaked[i][j];
    }
  }
  return d;
}

namespace {

std::vector<TokenSeq> distinct_samples(const MarkovGrammar& g, Rng& rng, std::size_t count, std::size_t len) {
  std::set<TokenSeq> seen;
  std::vector<TokenSeq> out;
  std::size_t attempts = 0;
  while (out.size() < count) {
    if (++attempts > 100 * count + 1000) {
      throw DataError("could not draw " + std::to_string(count) + " distinct sequences of length " +
                      std::to_string(len));
    }
    TokenSeq s = g.sample(rng, len);
    if (seen.insert(s).second) out.push_back(std::move(s));
  }
  return out;
}

Corpus split_corpus(std::vector<TokenSeq> seqs, const Vocab& vocab, CorpusRole role, double eval_fraction) {
  Corpus c;
  c.vocab = vocab;
  c.role = role;
  std::size_t n_eval = static_cast<std::size_t>(std::ceil(eval_fraction * static_cast<double>(seqs.size())));
  if (seqs.size() > 1) n_eval = std::min(n_eval, seqs.size() - 1);
  else n_eval = 0;
  const auto cut = seqs.begin() + static_cast<std::ptrdiff_t>(seqs.size() - n_eval);
  c.train.assign(seqs.begin(), cut);
  c.eval.assign(cut, seqs.end());
  return c;
}

void check_synthetic(std::size_t size, const SyntheticOptions& o) {
  if (size < 1) throw ConfigError("corpus size must be >= 1");
  if (o.seq_len < 2) throw ConfigError("seq_len must be >= 2");
  if (o.min_candidates < 2 || o.max_candidates < o.min_candidates) {
    throw ConfigError("choice candidates must satisfy 2 <= min <= max");
  }
}

// Builds one choice item; distractors are redrawn until the scoring grammar
// strictly prefers the correct continuation.
ChoiceItem make_item(Rng& rng, const MarkovGrammar& source, const MarkovGrammar& distractor_source,
                     const SyntheticOptions& o) {
  ChoiceItem item;
  item.prompt = source.sample(rng, o.prompt_len);
  const TokenSeq correct = source.continue_from(rng, item.prompt, o.continuation_len);
  const double correct_lp = source.log_prob(item.prompt, correct);
  const std::size_t k = o.min_candidates + rng.below(o.max_candidates - o.min_candidates + 1);
  item.correct = rng.below(k);
  for (std::size_t c = 0; c < k; ++c) {
    if (c == item.correct) {
      item.candidates.push_back(correct);
      continue;
    }
    TokenSeq d;
    for (int attempt = 0; attempt < 50; ++attempt) {
      d = distractor_source.continue_from(rng, item.prompt, o.continuation_len);
      if (d != correct && source.log_prob(item.prompt, d) < correct_lp) break;
    }
    item.candidates.push_back(std::move(d));
  }
  return item;
}

}  // namespace

Corpus gen_general_corpus(std::uint64_t seed, std::size_t size, const SyntheticOptions& options) {
  check_synthetic(size, options);
  const Vocab vocab = alphabet_vocab(options);
  const MarkovGrammar g = general_grammar(seed, vocab.size());
  Rng rng(derive_seed(seed, kTagGeneralSamples));
  return split_corpus(distinct_samples(g, rng, size, options.seq_len), vocab, CorpusRole::kGeneral,
                      options.eval_fraction);
}

DomainData gen_domain_corpus(std::uint64_t seed, std::size_t size, double skew, const SyntheticOptions& options) {
  check_synthetic(size, options);
  const Vocab vocab = alphabet_vocab(options);
  const MarkovGrammar general = general_grammar(seed, vocab.size());
  const MarkovGrammar domain = domain_grammar(seed, skew, vocab.size());
  Rng rng(derive_seed(seed, kTagDomainSamples));
  DomainData out;
  out.corpus = split_corpus(distinct_samples(domain, rng, size, options.seq_len), vocab, CorpusRole::kDomain,
                            options.eval_fraction);
  Rng item_rng(derive_seed(seed, kTagDomainChoices));
  for (std::size_t i = 0; i < options.choice_items; ++i) out.items.push_back(make_item(item_rng, domain, general, options));
  return out;
}

std::vector<ChoiceItem> gen_general_choices(std::uint64_t seed, const SyntheticOptions& options) {
  check_synthetic(1, options);
  const Vocab vocab = alphabet_vocab(options);
  const std::size_t n = vocab.size();
  const MarkovGrammar general = general_grammar(seed, n);
  MarkovGrammar uniform;
  uniform.initial.assign(n, 1.0 / static_cast<double>(n));
  uniform.transition.assign(n, uniform.initial);
  Rng rng(derive_seed(seed, kTagGeneralChoices));
  std::vector<ChoiceItem> items;
  for (std::size_t i = 0; i < options.choice_items; ++i) items.push_back(make_item(rng, general, uniform, options));
  return items;
}

// ---------------------------------------------------------------------------
// Text ingestion / export

Corpus ingest_text(const std::filesystem::path& path, VocabPolicy policy) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  const std::string text = buf.str();

  Corpus c;
  c.role = CorpusRole::kGeneral;
  const bool fresh = !policy.fixed.has_value();
  if (!fresh) c.vocab = *policy.fixed;
  if (!fresh && policy.unknown == UnknownPolicy::kReserve) c.vocab.reserve_unknown();

  std::istringstream lines(text);
  std::string line;
  while (std::getline(lines, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    TokenSeq seq;
    for (const auto& s : utf8_symbols(line)) {
      if (fresh) {
        seq.push_back(c.vocab.intern(s));
      } else if (auto id = c.vocab.lookup(s)) {
        seq.push_back(*id);
      } else if (policy.unknown == UnknownPolicy::kReserve) {
        seq.push_back(*c.vocab.unknown_id());
      } else {
        throw DataError("character '" + s + "' in '" + path.string() + "' is not in the vocabulary");
      }
    }
    c.train.push_back(std::move(seq));
  }
  if (c.train.empty()) throw DataError("'" + path.string() + "' contains no text");
  return c;
}

Corpus chunk_and_split(const Corpus& corpus, std::size_t seq_len, double eval_fraction) {
  if (seq_len < 2) throw ConfigError("seq_len must be >= 2");
  std::vector<TokenSeq> chunks;
  auto chunk = [&](const std::vector<TokenSeq>& seqs) {
    for (const auto& s : seqs) {
      for (std::size_t start = 0; start < s.size(); start += seq_len) {
        const std::size_t end = std::min(s.size(), start + seq_len);
        if (end - start >= 2) chunks.emplace_back(s.begin() + start, s.begin() + end);
      }
    }
  };
  chunk(corpus.train);
  chunk(corpus.eval);
  if (chunks.empty()) throw DataError("corpus has no sequence of at least 2 tokens");
  return split_corpus(std::move(chunks), corpus.vocab, corpus.role, eval_fraction);
}

void write_corpus_text(const std::filesystem::path& path, const std::vector<TokenSeq>& sequences, const Vocab& vocab) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  for (const auto& s : sequences) out << detokenize(s, vocab) << '\n';
}

void write_vocab(const std::filesystem::path& path, const Vocab& vocab) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  for (const auto& s : vocab.symbols()) out << s << '\n';
}

Vocab read_vocab(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read '" + path.string() + "'");
  std::vector<std::string> symbols;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (utf8_symbols(line).size() != 1) throw DataError("vocab line '" + line + "' is not a single symbol");
    symbols.push_back(line);
  }
  return Vocab(std::move(symbols));
}

std::vector<double> unigram_distribution(const std::vector<TokenSeq>& sequences, std::size_t vocab_size) {
  std::vector<double> p(vocab_size, 0.0);
  double n = 0.0;
  for (const auto& s : sequences) {
    for (int t : s) {
      p.at(static_cast<std::size_t>(t)) += 1.0;
      n += 1.0;
    }
  }
  if (n > 0) {
    for (double& x : p) x /= n;
  }
  return p;
}

double total_variation(const std::vector<double>& p, const std::vector<double>& q) {
  if (p.size() != q.size()) throw DimensionError("total_variation: distributions differ in size");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - q[i]);
  return 0.5 * s;
}

// ---------------------------------------------------------------------------
// Batching

std::vector<Example> make_examples(const std::vector<TokenSeq>& sequences, std::size_t context) {
  if (context < 2) throw ConfigError("context must be >= 2");
  std::vector<Example> out;
  for (const auto& s : sequences) {
    for (std::size_t start = 0; start + context + 1 <= s.size(); start += context) {
      Example e;
      e.x.assign(s.begin() + start, s.begin() + start + context);
      e.y.assign(s.begin() + start + 1, s.begin() + start + context + 1);
      out.push_back(std::move(e));
    }
  }
  if (out.empty()) {
    throw DataError("corpus has no sequence longer than the context of " + std::to_string(context) + " tokens");
  }
  return out;
}

std::vector<Batch> batches(const std::vector<Example>& examples, std::size_t batch_size, std::uint64_t seed) {
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  std::vector<std::size_t> order(examples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  std::vector<Batch> out;
  for (std::size_t start = 0; start + batch_size <= order.size(); start += batch_size) {
    Batch b;
    for (std::size_t k = start; k < start + batch_size; ++k) b.push_back(examples[order[k]]);
    out.push_back(std::move(b));
  }
  return out;
}

std::vector<Batch> batches(const Corpus& corpus, std::size_t batch_size, std::size_t context, std::uint64_t seed) {
  return batches(make_examples(corpus.train, context), batch_size, seed);
}

}  // namespace sfrz
