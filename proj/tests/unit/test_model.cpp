#include <doctest.h>

#include <cmath>
#include <random>

#include "gradcheck.hpp"
#include "hulm/error.hpp"
#include "hulm/model.hpp"
#include "oracles.hpp"

using namespace hulm;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 4;
  c.d_ff = 32;
  c.max_positions = 64;
  return c;
}

LoraAdapter random_adapter(const ModelConfig& c, std::size_t rank, std::uint64_t seed) {
  auto a = init_lora(c, rank, 4.0, seed);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 0.1);
  for (auto& [name, m] : a.named_tensors()) {
    for (Eigen::Index i = 0; i < m->size(); ++i) m->data()[i] = n(rng);
  }
  return a;
}

}  // namespace

TEST_CASE("config validation") {
  auto c = small_config();
  CHECK_NOTHROW(c.validate());
  c.n_heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK(model_config_from_json(to_json(small_config())) == small_config());
}

TEST_CASE("forward shapes and errors") {
  const auto p = init_parameters(small_config());
  const std::vector<TokenId> one{42};
  const auto r = forward(p, nullptr, one);
  CHECK(r.logits.rows() == 1);
  CHECK(r.logits.cols() == 259);
  CHECK(r.hidden.rows() == 1);
  const std::vector<TokenId> bad{259};
  CHECK_THROWS_AS(forward(p, nullptr, bad), std::out_of_range);
  const std::vector<TokenId> too_long(65, 1);
  CHECK_THROWS_AS(forward(p, nullptr, too_long), std::length_error);
}

TEST_CASE("causality") {
  const auto p = init_parameters(small_config());
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    auto t = gradcheck::random_tokens(rng, 12);
    const auto base = forward(p, nullptr, t).logits;
    const std::size_t j = rng() % t.size();
    t[j] = static_cast<TokenId>((t[j] + 1) % kVocabSize);
    const auto changed = forward(p, nullptr, t).logits;
    for (std::size_t i = 0; i < j; ++i) {
      CHECK((base.row(static_cast<Eigen::Index>(i)) - changed.row(static_cast<Eigen::Index>(i))).cwiseAbs().maxCoeff() == 0.0);
    }
  }
}

TEST_CASE("softmax rows sum to one") {
  const auto p = init_parameters(small_config());
  const std::vector<TokenId> t{1, 2, 3, 4, 5};
  const auto probs = softmax_rows(forward(p, nullptr, t).logits);
  for (Eigen::Index i = 0; i < probs.rows(); ++i) CHECK(std::abs(probs.row(i).sum() - 1.0) < 1e-6);
}

TEST_CASE("nll_loss") {
  const std::vector<TokenId> t{1, 2, 3};
  const std::vector<std::uint8_t> mask{1, 1, 0};
  SUBCASE("uniform logits") {
    const Matrix logits = Matrix::Zero(3, 259);
    CHECK(nll_loss(logits, t, mask) == doctest::Approx(std::log(259.0)).epsilon(1e-12));
  }
  SUBCASE("saturated") {
    Matrix logits = Matrix::Zero(3, 259);
    logits(0, 2) = 1000;
    logits(1, 3) = 1000;
    CHECK(nll_loss(logits, t, mask) < 1e-6);
  }
  SUBCASE("empty support") {
    const std::vector<std::uint8_t> none{0, 0, 0};
    CHECK_THROWS_WITH_AS(nll_loss(Matrix::Zero(3, 259), t, none), "empty loss support", DataError);
  }
  SUBCASE("PAD targets are skipped") {
    const std::vector<TokenId> padded{1, kPad, kPad};
    const std::vector<std::uint8_t> all{1, 1, 1};
    CHECK_THROWS_AS(nll_loss(Matrix::Zero(3, 259), padded, all), DataError);
  }
}

TEST_CASE("packed loss equals per-document conditional loss") {
  const auto p = init_parameters(small_config());
  const std::vector<std::vector<TokenId>> docs{{10, 11, 12}, {20, 21}, {30, 31, 32, 33}};
  std::vector<TokenId> packed;
  for (const auto& d : docs) {
    packed.insert(packed.end(), d.begin(), d.end());
    packed.push_back(kEos);
  }
  const auto mask = next_token_mask(packed);
  const double flat = nll_loss(forward(p, nullptr, packed).logits, packed, mask);
  const auto [sum, count] = oracle::per_document_nll(p, docs, false);
  CHECK(count == packed.size() - 1);
  CHECK(std::abs(flat - sum / static_cast<double>(count)) <= 1e-10);
}

TEST_CASE("finite-difference gradients") {
  std::mt19937_64 rng(17);
  for (int i = 0; i < 3; ++i) {
    const auto p = gradcheck::tiny_model(100 + i);
    const auto t = gradcheck::random_tokens(rng, 7);
    const std::vector<std::uint8_t> mask(t.size(), 1);
    SUBCASE("full") {
      const auto r = gradcheck::check(p, nullptr, t, mask, Trainable::full);
      CHECK(r.max_rel <= 1e-4);
    }
    SUBCASE("adapter") {
      auto a = random_adapter(p.config, 2, 200 + i);
      const auto r = gradcheck::check(p, &a, t, mask, Trainable::adapter_only);
      CHECK(r.checked == parameter_count(a));
      CHECK(r.max_rel <= 1e-4);
    }
  }
}

TEST_CASE("single-position mask gives the single-position gradient") {
  const auto p = gradcheck::tiny_model(5);
  const std::vector<TokenId> t{3, 9, 27, 81, 243};
  std::vector<std::uint8_t> mask(t.size(), 0);
  mask[2] = 1;
  const auto g = backward(p, nullptr, t, mask, Trainable::full);
  // Direct: gradient of -log p(t[3] | t[0..2]) through a fresh backward_from.
  Gradients direct = zero_gradients(p, nullptr, Trainable::full);
  const auto cache = forward_cached(p, nullptr, t, true);
  Matrix dlogits = Matrix::Zero(cache.logits.rows(), cache.logits.cols());
  const auto probs = softmax_rows(cache.logits);
  dlogits.row(2) = probs.row(2);
  dlogits(2, t[3]) -= 1.0;
  backward_from(p, nullptr, cache, &dlogits, nullptr, direct);
  const auto a = g.base->named_tensors();
  const auto b = direct.base->named_tensors();
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, (*a[i].second - *b[i].second).cwiseAbs().maxCoeff());
  CHECK(worst <= 1e-12);
}

TEST_CASE("frozen tensors have no gradients") {
  const auto p = init_parameters(small_config());
  const auto a = init_lora(p.config);
  const std::vector<TokenId> t{1, 2, 3};
  const std::vector<std::uint8_t> m{1, 1, 0};
  const auto g = backward(p, &a, t, m, Trainable::adapter_only);
  CHECK_FALSE(g.base.has_value());
  CHECK(g.adapter.has_value());
  const auto h = backward(p, &a, t, m, Trainable::head_only);
  CHECK_FALSE(h.base.has_value());
  CHECK_FALSE(h.adapter.has_value());
}

TEST_CASE("LoRA") {
  const auto p = init_parameters(small_config());
  const std::vector<TokenId> t{5, 6, 7, 8};
  SUBCASE("zero B is an exact identity") {
    const auto a = init_lora(p.config, 8, 16.0, 1);
    CHECK(forward(p, &a, t).logits == forward(p, nullptr, t).logits);
    CHECK(parameter_hash(lora_merge(p, a)) == parameter_hash(p));
  }
  SUBCASE("A init variance is 1/r") {
    const auto a = init_lora(p.config, 4, 8.0, 2);
    double s = 0, n = 0;
    for (const auto& [name, m] : a.named_tensors()) {
      if (name.back() != 'a') continue;
      s += m->squaredNorm();
      n += static_cast<double>(m->size());
    }
    CHECK(s / n == doctest::Approx(0.25).epsilon(0.15));
  }
  SUBCASE("merge matches adapted forward") {
    const auto a = random_adapter(p.config, 2, 9);
    const auto merged = lora_merge(p, a);
    CHECK((forward(merged, nullptr, t).logits - forward(p, &a, t).logits).cwiseAbs().maxCoeff() <= 1e-5);
    CHECK(parameter_hash(lora_merge(merged, a)) != parameter_hash(merged));
  }
  SUBCASE("rank mismatch") {
    auto a = random_adapter(p.config, 2, 9);
    a.layers[0].q.a = Matrix::Zero(3, 16);
    CHECK_THROWS_AS(lora_merge(p, a), DataError);
  }
}

TEST_CASE("pool") {
  Matrix h(3, 2);
  h << 1, 2, 3, 4, 5, 6;
  const std::vector<std::size_t> two{0, 2};
  CHECK(pool(h, two, PoolingMode::mean) == RowVector{{3.0, 4.0}});
  const std::vector<std::size_t> one{1};
  CHECK(pool(h, one, PoolingMode::last) == RowVector{{3.0, 4.0}});
  Matrix same = Matrix::Constant(4, 2, 7.0);
  const std::vector<std::size_t> all{0, 1, 2, 3};
  CHECK(pool(same, all, PoolingMode::mean) == RowVector{{7.0, 7.0}});
  CHECK_THROWS_AS(pool(h, {}, PoolingMode::mean), DataError);
}

TEST_CASE("initialization is seed-deterministic") {
  CHECK(parameter_hash(init_parameters(small_config())) == parameter_hash(init_parameters(small_config())));
  auto other = small_config();
  other.seed = 43;
  CHECK(parameter_hash(init_parameters(small_config())) != parameter_hash(init_parameters(other)));
}
