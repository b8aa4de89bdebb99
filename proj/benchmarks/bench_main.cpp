#include <benchmark/benchmark.h>

#include <random>
#include <string>
#include <vector>

#include "hulm/model.hpp"
#include "hulm/packer.hpp"
#include "hulm/quantize.hpp"
#include "hulm/tokenizer.hpp"

using namespace hulm;

namespace {

ModelConfig bench_config() {
  ModelConfig c;
  c.d_model = 32;
  c.n_heads = 4;
  c.d_ff = 128;
  c.n_layers = 2;
  c.max_positions = 1024;
  return c;
}

std::vector<TokenId> random_tokens(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<TokenId> t(n);
  for (auto& v : t) v = static_cast<TokenId>(rng() % 256);
  return t;
}

AuthorStream random_stream(std::size_t docs, std::size_t len) {
  std::mt19937_64 rng(1);
  AuthorStream s{"bench", {}};
  for (std::size_t d = 0; d < docs; ++d) {
    CleanDocument doc;
    doc.author_id = s.author_id;
    doc.text.resize(len);
    for (auto& c : doc.text) c = static_cast<char>('a' + rng() % 26);
    doc.normalized_text = doc.text;
    s.documents.push_back(doc);
  }
  return s;
}

void BM_Forward(benchmark::State& state) {
  const auto p = init_parameters(bench_config());
  const auto t = random_tokens(static_cast<std::size_t>(state.range(0)), 2);
  for (auto _ : state) benchmark::DoNotOptimize(forward(p, nullptr, t).logits.data());
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Forward)->Arg(64)->Arg(256)->Arg(1024);

void BM_ForwardBackwardAdapter(benchmark::State& state) {
  const auto p = init_parameters(bench_config());
  const auto a = init_lora(p.config);
  const auto t = random_tokens(static_cast<std::size_t>(state.range(0)), 3);
  const auto mask = next_token_mask(t);
  for (auto _ : state) {
    auto g = backward(p, &a, t, mask, Trainable::adapter_only);
    benchmark::DoNotOptimize(g.adapter->layers[0].q.a.data());
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_ForwardBackwardAdapter)->Arg(64)->Arg(256)->Arg(1024);

void BM_ForwardBackwardFull(benchmark::State& state) {
  const auto p = init_parameters(bench_config());
  const auto t = random_tokens(static_cast<std::size_t>(state.range(0)), 4);
  const auto mask = next_token_mask(t);
  for (auto _ : state) {
    auto g = backward(p, nullptr, t, mask, Trainable::full);
    benchmark::DoNotOptimize(g.base->token_embedding.data());
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_ForwardBackwardFull)->Arg(256);

void BM_PackAuthor(benchmark::State& state) {
  const auto s = random_stream(static_cast<std::size_t>(state.range(0)), 50);
  for (auto _ : state) benchmark::DoNotOptimize(pack_author(s, kAuthorMaxLen).size());
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_PackAuthor)->Arg(64)->Arg(1024);

void BM_PackForTask(benchmark::State& state) {
  const auto s = random_stream(256, 50);
  for (auto _ : state) benchmark::DoNotOptimize(pack_for_task(s, 255, kTaskMaxLen, true).size());
}
BENCHMARK(BM_PackForTask);

void BM_Tokenize(benchmark::State& state) {
  const std::string text(static_cast<std::size_t>(state.range(0)), 'x');
  for (auto _ : state) benchmark::DoNotOptimize(tokenize(text).data());
  state.SetBytesProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Tokenize)->Arg(1 << 10)->Arg(1 << 16);

void BM_Quantize(benchmark::State& state) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n;
  std::vector<double> v(static_cast<std::size_t>(state.range(0)));
  for (auto& x : v) x = n(rng);
  for (auto _ : state) benchmark::DoNotOptimize(dequantize(quantize_4bit(v)).data());
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Quantize)->Arg(1 << 16);

}  // namespace

BENCHMARK_MAIN();
