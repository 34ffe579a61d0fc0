// SPDX-License-Identifier: Apache-2.0
//
// Synthetic general/domain corpora from seeded Markov grammars, plain-text
// ingestion with char-level vocabularies, and next-token batching.
#pragma once

#include "sfrz/types.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace sfrz {

class Rng;

// One vocabulary symbol per UTF-8 code point.
class Vocab {
 public:
  Vocab() = default;
  explicit Vocab(std::vector<std::string> symbols);

  // Appends a symbol if unseen; returns its id.
  int intern(const std::string& symbol);
  std::optional<int> lookup(const std::string& symbol) const;
  const std::string& symbol(int id) const { return symbols_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return symbols_.size(); }
  const std::vector<std::string>& symbols() const { return symbols_; }
  std::optional<int> unknown_id() const { return unknown_id_; }
  // Adds the reserved unknown symbol and remembers its id.
  int reserve_unknown();

  bool operator==(const Vocab& other) const { return symbols_ == other.symbols_; }

  static constexpr const char* kUnknownSymbol = "\xE2\x90\xA6";  // U+2426

 private:
  std::vector<std::string> symbols_;
  std::unordered_map<std::string, int> index_;
  std::optional<int> unknown_id_;
};

// Splits UTF-8 text into code-point strings. Throws DataError on bad UTF-8.
std::vector<std::string> utf8_symbols(const std::string& text);

TokenSeq tokenize(const std::string& text, const Vocab& vocab);
std::string detokenize(const TokenSeq& ids, const Vocab& vocab);

enum class CorpusRole { kGeneral, kDomain };

const char* to_string(CorpusRole role);

struct Corpus {
  Vocab vocab;
  CorpusRole role = CorpusRole::kGeneral;
  std::vector<TokenSeq> train;
  std::vector<TokenSeq> eval;
};

struct ChoiceItem {
  TokenSeq prompt;
  std::vector<TokenSeq> candidates;
  std::size_t correct = 0;
};

// First-order Markov chain over an alphabet.
struct MarkovGrammar {
  std::vector<double> initial;
  std::vector<std::vector<double>> transition;

  std::size_t size() const { return initial.size(); }
  TokenSeq sample(Rng& rng, std::size_t length) const;
  // Continues from the last token of `prefix` (or the initial distribution).
  TokenSeq continue_from(Rng& rng, const TokenSeq& prefix, std::size_t length) const;
  // Log probability of `continuation` given the last token of `prefix`.
  double log_prob(const TokenSeq& prefix, const TokenSeq& continuation) const;
};

struct SyntheticOptions {
  std::string alphabet = "abcdefghijklmnop";
  std::size_t seq_len = 33;
  double eval_fraction = 0.1;
  std::size_t choice_items = 200;
  std::size_t prompt_len = 8;
  std::size_t continuation_len = 4;
  std::size_t min_candidates = 2;
  std::size_t max_candidates = 4;
};

Vocab alphabet_vocab(const SyntheticOptions& options);

// Both grammars are pure functions of the world seed. The domain chain is
// (1 - skew) * general + skew * peaked chain over a seeded symbol subset.
MarkovGrammar general_grammar(std::uint64_t seed, std::size_t alphabet_size);
MarkovGrammar domain_grammar(std::uint64_t seed, double skew, std::size_t alphabet_size);

// `size` distinct sequences from the general grammar; the last eval_fraction
// go to the eval split before any shuffling.
Corpus gen_general_corpus(std::uint64_t seed, std::size_t size, const SyntheticOptions& options = {});

struct DomainData {
  Corpus corpus;
  std::vector<ChoiceItem> items;
};

// Domain corpus plus 2-4-way choice items whose correct continuation follows
// the domain grammar and whose distractors follow the general grammar.
DomainData gen_domain_corpus(std::uint64_t seed, std::size_t size, double skew, const SyntheticOptions& options = {});

// General-task choice items: correct continuation from the general grammar,
// distractors from a uniform chain.
std::vector<ChoiceItem> gen_general_choices(std::uint64_t seed, const SyntheticOptions& options = {});

enum class UnknownPolicy { kReserve, kReject };

struct VocabPolicy {
  // Absent: build a fresh vocabulary from the text.
  std::optional<Vocab> fixed;
  UnknownPolicy unknown = UnknownPolicy::kReject;
};

// Reads UTF-8 text, one sequence per non-empty line, into the train split.
Corpus ingest_text(const std::filesystem::path& path, VocabPolicy policy = {});

// Re-chunks sequences into pieces of `seq_len` tokens and moves the last
// `eval_fraction` of them to the eval split.
Corpus chunk_and_split(const Corpus& corpus, std::size_t seq_len, double eval_fraction);

void write_corpus_text(const std::filesystem::path& path, const std::vector<TokenSeq>& sequences, const Vocab& vocab);
void write_vocab(const std::filesystem::path& path, const Vocab& vocab);
Vocab read_vocab(const std::filesystem::path& path);

std::vector<double> unigram_distribution(const std::vector<TokenSeq>& sequences, std::size_t vocab_size);
double total_variation(const std::vector<double>& p, const std::vector<double>& q);

// Next-token pair: y is x shifted by one.
struct Example {
  TokenSeq x;
  TokenSeq y;
};

using Batch = std::vector<Example>;

// Non-overlapping windows of context+1 tokens from every sequence. Throws
// DataError when no sequence is long enough.
std::vector<Example> make_examples(const std::vector<TokenSeq>& sequences, std::size_t context);

// Seeded shuffle of the examples grouped into full batches; the final
// partial batch is dropped.
std::vector<Batch> batches(const std::vector<Example>& examples, std::size_t batch_size, std::uint64_t seed);
std::vector<Batch> batches(const Corpus& corpus, std::size_t batch_size, std::size_t context, std::uint64_t seed);

}  // namespace sfrz
