#include <benchmark/benchmark.h>

#include <cstdint>
#include <vector>

#include "metalm/crf.hpp"
#include "metalm/decoder.hpp"
#include "metalm/tensor.hpp"
#include "metalm/trainer.hpp"

using namespace metalm;

namespace {

Tensor random_matrix(int64_t m, int64_t n, uint64_t seed) {
  Rng rng(seed);
  return Tensor::randn({m, n}, rng, 1.0f);
}

std::vector<int32_t> random_ids(int64_t n, int64_t vocab, uint64_t seed) {
  Rng rng(seed);
  std::vector<int32_t> ids(static_cast<size_t>(n));
  for (auto& id : ids) id = static_cast<int32_t>(rng.uniform_int(vocab));
  return ids;
}

void bm_matmul_forward(benchmark::State& state) {
  int64_t n = state.range(0);
  auto a = random_matrix(n, n, 1);
  auto b = random_matrix(n, n, 2);
  for (auto _ : state) {
    auto y = matmul<float>(nullptr, a, b);
    benchmark::DoNotOptimize(y.data().data());
  }
  state.SetItemsProcessed(state.iterations() * n * n * n);
}

void bm_matmul_backward(benchmark::State& state) {
  int64_t n = state.range(0);
  auto a = random_matrix(n, n, 1);
  auto b = random_matrix(n, n, 2);
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  for (auto _ : state) {
    Tape tape;
    auto loss = sum(&tape, matmul(&tape, a, b));
    backward(loss, tape);
    benchmark::DoNotOptimize(a.grad().data());
    a.zero_grad();
    b.zero_grad();
  }
  state.SetItemsProcessed(state.iterations() * n * n * n);
}

void bm_decoder_forward(benchmark::State& state) {
  auto cfg = tier_config("desk");
  Rng rng(7);
  auto params = DecoderParams::init(cfg, rng);
  auto ids = random_ids(cfg.max_seq_len, cfg.vocab_size, 3);
  for (auto _ : state) {
    auto h = decoder_hidden<float>(nullptr, params, ids);
    benchmark::DoNotOptimize(h.data().data());
  }
  state.SetItemsProcessed(state.iterations() * cfg.max_seq_len);
}

void bm_lm_train_step(benchmark::State& state) {
  auto cfg = tier_config("desk");
  Rng rng(7);
  auto params = DecoderParams::init(cfg, rng);
  params.set_requires_grad(true);
  auto tokens = random_ids(cfg.max_seq_len + 1, cfg.vocab_size, 4);
  for (auto _ : state) {
    Tape tape;
    auto loss = next_token_loss(&tape, params, tokens);
    backward(loss, tape);
    benchmark::DoNotOptimize(loss.item());
    params.zero_grad();
  }
  state.SetItemsProcessed(state.iterations() * cfg.max_seq_len);
}

void bm_crf_log_partition(benchmark::State& state) {
  int64_t t_len = state.range(0);
  Rng rng(11);
  auto em = Tensor::randn({t_len, TagScheme::kCount}, rng, 1.0f);
  auto crf = CrfParams::init(16, rng);
  for (auto _ : state) {
    auto z = log_partition<float>(nullptr, em, crf);
    benchmark::DoNotOptimize(z.item());
  }
  state.SetItemsProcessed(state.iterations() * t_len);
}

void bm_crf_viterbi(benchmark::State& state) {
  int64_t t_len = state.range(0);
  Rng rng(13);
  auto em = Tensor::randn({t_len, TagScheme::kCount}, rng, 1.0f);
  auto crf = CrfParams::init(16, rng);
  for (auto _ : state) {
    auto path = viterbi_decode(em, crf, true);
    benchmark::DoNotOptimize(path.data());
  }
  state.SetItemsProcessed(state.iterations() * t_len);
}

void bm_episode_update(benchmark::State& state) {
  ModelConfig cfg;
  cfg.d_model = 16;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.n_kv_heads = 1;
  cfg.d_ff = 32;
  cfg.vocab_size = 256;
  cfg.max_seq_len = 16;
  Rng rng(17);
  auto params = DecoderParams::init(cfg, rng);
  params.set_requires_grad(true);
  auto head = MetaHead::init(cfg.d_model, 32, 4, rng);

  Episode ep;
  ep.n_way = 4;
  ep.k_shot = 2;
  ep.n_query = 2;
  Rng erng(19);
  auto make = [&](int32_t label) {
    EpisodeExample ex;
    for (int64_t t = 0; t < cfg.max_seq_len; ++t)
      ex.ids.push_back(static_cast<int32_t>(
          Vocab::kReserved + erng.uniform_int(cfg.vocab_size - Vocab::kReserved)));
    ex.masked_positions = {2, 9};
    for (int64_t p : ex.masked_positions) ex.ids[static_cast<size_t>(p)] = Vocab::kMask;
    ex.label = label;
    return ex;
  };
  for (int64_t c = 0; c < 4; ++c) {
    ep.class_words.push_back(static_cast<int32_t>(Vocab::kReserved + c));
    for (int64_t k = 0; k < 2; ++k) ep.support.push_back(make(static_cast<int32_t>(c)));
    for (int64_t q = 0; q < 2; ++q) ep.query.push_back(make(static_cast<int32_t>(c)));
  }

  MetaConfig mc;
  mc.inner_steps = static_cast<int64_t>(state.range(0));
  for (auto _ : state) {
    auto up = maml_episode_update(params, head, ep, mc, 1.0f, nullptr);
    benchmark::DoNotOptimize(up.query_loss);
    params.zero_grad();
    head.w1.zero_grad();
    head.w2.zero_grad();
  }
}

BENCHMARK(bm_matmul_forward)->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(bm_matmul_backward)->Arg(64)->Arg(128);
BENCHMARK(bm_decoder_forward);
BENCHMARK(bm_lm_train_step);
BENCHMARK(bm_crf_log_partition)->Arg(16)->Arg(64);
BENCHMARK(bm_crf_viterbi)->Arg(16)->Arg(64);
BENCHMARK(bm_episode_update)->Arg(0)->Arg(10);

}  // namespace

BENCHMARK_MAIN();
