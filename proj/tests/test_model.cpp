// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include "sfrz/errors.hpp"
#include "sfrz/model.hpp"
#include "sfrz/random.hpp"

#include <cmath>
#include <cstring>

using namespace sfrz;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.vocab_size = 4;
  c.embed_dim = 2;
  c.window = 1;
  c.hidden = 3;
  c.depth = 1;
  c.context = 8;
  return c;
}

std::vector<TokenSeq> random_batch(Rng& rng, std::size_t count, std::size_t len, std::size_t vocab) {
  std::vector<TokenSeq> out(count);
  for (auto& s : out) {
    for (std::size_t i = 0; i < len; ++i) s.push_back(static_cast<int>(rng.below(vocab)));
  }
  return out;
}

bool bitwise_equal(const RowMatXd& a, const RowMatXd& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), sizeof(double) * a.size()) == 0;
}

}  // namespace

TEST_CASE("parameter count for the small architecture") {
  TinyLM m(small_config(), 1);
  // embed 4*2, fc1 2*3 + 3, fc2 3*2 + 2, head 2*4 + 4, enumerated by hand
  CHECK(m.params().total_scalars() == 8 + 6 + 3 + 6 + 2 + 8 + 4);
  CHECK(expected_parameter_count(small_config()) == 37);

  ModelConfig wide = small_config();
  wide.window = 3;
  wide.hidden = 48;
  TinyLM w(wide, 1);
  CHECK(w.params().total_scalars() == 666);
  CHECK(expected_parameter_count(wide) == 666);
}

TEST_CASE("registry ids and order are stable") {
  ModelConfig c = small_config();
  c.depth = 2;
  TinyLM m(c, 5);
  std::vector<std::string> ids;
  for (const auto& e : m.params()) ids.push_back(e.id);
  const std::vector<std::string> expected{"embed.table",        "block0.fc1.weight", "block0.fc1.bias",
                                          "block0.fc2.weight",  "block0.fc2.bias",   "block1.fc1.weight",
                                          "block1.fc1.bias",    "block1.fc2.weight", "block1.fc2.bias",
                                          "head.weight",        "head.bias"};
  CHECK(ids == expected);
  CHECK(m.block_weight_ids() ==
        std::vector<std::string>{"block0.fc1.weight", "block0.fc2.weight", "block1.fc1.weight", "block1.fc2.weight"});
}

TEST_CASE("same seed gives bitwise identical parameters") {
  TinyLM a(ModelConfig{}, 42);
  TinyLM b(ModelConfig{}, 42);
  TinyLM c(ModelConfig{}, 43);
  CHECK(fingerprint(a.params()) == fingerprint(b.params()));
  CHECK(fingerprint(a.params()) != fingerprint(c.params()));
  for (std::size_t k = 0; k < a.params().size(); ++k) {
    const auto& x = a.params()[k].tensor.data();
    const auto& y = b.params()[k].tensor.data();
    CHECK(std::memcmp(x.data(), y.data(), sizeof(double) * x.size()) == 0);
  }
}

TEST_CASE("invalid architecture is a config error") {
  ModelConfig c = small_config();
  c.depth = 0;
  CHECK_THROWS_AS(TinyLM(c, 1), ConfigError);
  c = small_config();
  c.vocab_size = 1;
  CHECK_THROWS_AS(TinyLM(c, 1), ConfigError);
  c = small_config();
  c.embed_dim = 0;
  CHECK_THROWS_AS(TinyLM(c, 1), ConfigError);
}

TEST_CASE("forward shape and input checks") {
  TinyLM m(small_config(), 3);
  Tape tape;
  const std::vector<TokenSeq> seqs{{0, 1, 2}, {3, 3}};
  ForwardPass fp = m.forward(tape, seqs);
  CHECK(fp.logits.shape() == Shape{5, 4});
  CHECK(m.predict(TokenSeq{1, 2, 3, 0}).rows() == 4);

  CHECK_THROWS_AS(m.predict(TokenSeq{0, 4}), IndexError);
  CHECK_THROWS_AS(m.predict(TokenSeq(9, 0)), DataError);
}

TEST_CASE("zeroed output projection gives loss ln V") {
  TinyLM m(ModelConfig{}, 9);
  m.params().at("head.weight").data().setZero();
  m.params().at("head.bias").data().setZero();
  Tape tape;
  const std::vector<TokenSeq> seqs{{1, 5, 7, 2, 9}};
  ForwardPass fp = m.forward(tape, seqs);
  Var loss = softmax_cross_entropy(fp.logits, std::vector<int>{5, 7, 2, 9, 0});
  CHECK(loss.item() == doctest::Approx(std::log(16.0)).epsilon(1e-14));
}

TEST_CASE("embedding perturbation only affects positions whose window holds the token") {
  for (std::size_t window : {1u, 3u}) {
    ModelConfig c = small_config();
    c.window = window;
    TinyLM m(c, 17);
    const TokenSeq seq{0, 1, 2, 1, 3, 0, 3, 2};
    const RowMatXd before = m.predict(seq);
    m.params().at("embed.table").mat().row(2).array() += 0.25;
    const RowMatXd after = m.predict(seq);
    for (std::size_t t = 0; t < seq.size(); ++t) {
      bool uses = false;
      for (std::size_t k = 0; k < window && k <= t; ++k) uses = uses || seq[t - k] == 2;
      const double diff = (after.row(static_cast<Eigen::Index>(t)) - before.row(static_cast<Eigen::Index>(t))).cwiseAbs().maxCoeff();
      if (uses) {
        CHECK(diff > 0.0);
      } else {
        CHECK(diff == 0.0);
      }
    }
  }
}

TEST_CASE("lora scale arithmetic") {
  CHECK(lora_scale(32, 8, LoraScaleMode::kStandard) == 4.0);
  CHECK(lora_scale(32, 8, LoraScaleMode::kRankStabilized) == doctest::Approx(11.3137).epsilon(1e-5));
  CHECK(lora_scale(32, 8, LoraScaleMode::kRankStabilized) == doctest::Approx(32.0 / std::sqrt(8.0)).epsilon(1e-15));
  CHECK_THROWS_AS(lora_scale(32, 0, LoraScaleMode::kStandard), ConfigError);
}

TEST_CASE("attach lora freezes the base and preserves outputs exactly") {
  TinyLM m(ModelConfig{}, 11);
  Rng rng(2);
  const auto batch = random_batch(rng, 3, 12, 16);
  const RowMatXd base = m.predict(batch);
  const std::size_t base_count = m.params().total_scalars();
  m.attach_lora(LoraSpec{{}, 4, 8.0, LoraScaleMode::kStandard, 7});
  CHECK(m.adapters().size() == 4);
  for (const auto& e : m.params()) {
    const bool adapter = e.id.find(".lora_") != std::string::npos;
    CHECK(e.tensor.requires_grad() == adapter);
  }
  // fc1 is [24 x 48]: A[4 x 24], B[48 x 4]; fc2 mirrors it.
  CHECK(m.params().at("block0.fc1.weight.lora_A").shape() == Shape{4, 24});
  CHECK(m.params().at("block0.fc1.weight.lora_B").shape() == Shape{48, 4});
  CHECK(m.params().at("block0.fc2.weight.lora_A").shape() == Shape{4, 48});
  CHECK(m.params().total_scalars() == base_count + 4 * (4 * 24 + 48 * 4));
  CHECK(m.params().trainable_scalars() == 4 * (4 * 24 + 48 * 4));
  CHECK(bitwise_equal(m.predict(batch), base));
}

TEST_CASE("attach lora rejects bad targets") {
  TinyLM m(small_config(), 1);
  CHECK_THROWS_AS(m.attach_lora(LoraSpec{{"nope"}, 1, 1.0, LoraScaleMode::kStandard, 0}), ConfigError);
  CHECK_THROWS_AS(m.attach_lora(LoraSpec{{"block0.fc1.bias"}, 1, 1.0, LoraScaleMode::kStandard, 0}), ConfigError);
  // fc1 is [2 x 3]; rank 3 exceeds min(2, 3).
  CHECK_THROWS_AS(m.attach_lora(LoraSpec{{"block0.fc1.weight"}, 3, 1.0, LoraScaleMode::kStandard, 0}), ConfigError);
  CHECK_THROWS_AS(m.attach_lora(LoraSpec{{"block0.fc1.weight"}, 0, 1.0, LoraScaleMode::kStandard, 0}), ConfigError);
  CHECK_FALSE(m.has_adapters());
  m.attach_lora(LoraSpec{{"block0.fc1.weight"}, 2, 1.0, LoraScaleMode::kStandard, 0});
  CHECK_THROWS_AS(m.attach_lora(LoraSpec{{"block0.fc1.weight"}, 2, 1.0, LoraScaleMode::kStandard, 0}), ConfigError);
}

TEST_CASE("merge of untrained adapters restores the base exactly") {
  TinyLM m(ModelConfig{}, 12);
  const auto before = fingerprint(m.params());
  m.attach_lora(LoraSpec{});
  m.merge_lora();
  CHECK(fingerprint(m.params()) == before);
  CHECK_FALSE(m.has_adapters());
  CHECK(m.params().trainable_scalars() == m.params().total_scalars());
  CHECK_THROWS_AS(m.merge_lora(), ContractError);
}

TEST_CASE("merged forward matches adapted forward on random batches") {
  for (auto mode : {LoraScaleMode::kStandard, LoraScaleMode::kRankStabilized}) {
    TinyLM m(ModelConfig{}, 13);
    m.attach_lora(LoraSpec{{}, 8, 32.0, mode, 3});
    Rng rng(99);
    // Stand in for training: random nonzero B and perturbed A.
    for (const auto& a : m.adapters()) {
      for (auto& x : m.params().at(a.b_id()).data()) x = rng.uniform(-0.05, 0.05);
      for (auto& x : m.params().at(a.a_id()).data()) x += rng.uniform(-0.05, 0.05);
    }
    const auto batch = random_batch(rng, 4, 20, 16);
    const RowMatXd adapted = m.predict(batch);
    m.merge_lora();
    const RowMatXd merged = m.predict(batch);
    CHECK((adapted - merged).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("lora gradients reach only the adapters") {
  TinyLM m(small_config(), 4);
  m.attach_lora(LoraSpec{{"block0.fc1.weight"}, 1, 2.0, LoraScaleMode::kStandard, 1});
  m.params().at("block0.fc1.weight.lora_B").data().setConstant(0.1);
  Tape tape;
  const std::vector<TokenSeq> seqs{{0, 1, 2, 3}};
  ForwardPass fp = m.forward(tape, seqs);
  CHECK(fp.effective.count("block0.fc1.weight") == 1);
  tape.backward(softmax_cross_entropy(fp.logits, std::vector<int>{1, 2, 3, 0}));
  for (const auto& e : m.params()) {
    CHECK(e.tensor.has_grad() == e.tensor.requires_grad());
  }
  CHECK(m.params().at("block0.fc1.weight.lora_A").grad().cwiseAbs().maxCoeff() > 0.0);
}
