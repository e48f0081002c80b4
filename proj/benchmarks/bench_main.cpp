#include <benchmark/benchmark.h>

#include "icdit/backbone.hpp"
#include "icdit/diffusion.hpp"
#include "icdit/ops.hpp"
#include "icdit/rng.hpp"
#include "icdit/trainer.hpp"

using namespace icdit;

namespace {

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  const Tensor a = Tensor::randn({n, n}, rng), b = Tensor::randn({n, n}, rng);
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(16)->Arg(32)->Arg(64)->Arg(128);

void BM_MmAttention(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const std::size_t d = 32;
  Rng rng(2);
  AttentionParams p;
  p.n_heads = 4;
  for (Tensor* w : {&p.q_a, &p.k_a, &p.v_a, &p.o_a, &p.q_b, &p.k_b, &p.v_b, &p.o_b}) *w = Tensor::randn({d, d}, rng, 0.2);
  const TokenStream a{Modality::image, Tensor::randn({n, d}, rng)}, b{Modality::layout, Tensor::randn({n, d}, rng)};
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(mm_attention(a, b, p));
}
BENCHMARK(BM_MmAttention)->Arg(16)->Arg(64);

void BM_TrainStep(benchmark::State& state) {
  const ModelConfig config;
  const SurrogateEncoders encoders;
  const auto schedule = make_schedule(config.steps, 5e-4, 0.1);
  const auto samples = gen_dataset(8, 3);
  const auto data = prepare_samples(samples, encoders);
  TrainOptions opt;
  opt.steps = 1;
  opt.batch_size = static_cast<std::size_t>(state.range(0));
  ModelParams params = init_model(config, 0);
  for (auto _ : state) params = train_model(std::move(params), schedule, encoders, data, opt).params;
}
BENCHMARK(BM_TrainStep)->Arg(1)->Arg(8)->Unit(benchmark::kMillisecond);

void BM_SampleChain(benchmark::State& state) {
  ModelConfig config;
  config.steps = 50;
  const SurrogateEncoders encoders;
  const auto schedule = make_schedule(config.steps, 5e-4, 0.1);
  const auto samples = gen_dataset(4, 5);
  std::vector<SampleConditions> conds;
  for (const auto& p : prepare_samples(samples, encoders)) conds.push_back(p.conditions);
  const ModelParams params = init_model(config, 0);
  for (auto _ : state) benchmark::DoNotOptimize(generate_latents(params, encoders, schedule, conds, {}, 1, 4));
}
BENCHMARK(BM_SampleChain)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
