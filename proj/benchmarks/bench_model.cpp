// Copyright 2026 the msdetr authors
// SPDX-License-Identifier: Apache-2.0

#include <benchmark/benchmark.h>

#include <random>

#include "msdetr/model.hpp"
#include "msdetr/ops.hpp"

using namespace msdetr;

namespace {

ModelConfig bench_config() {
  ModelConfig cfg;  // desk-scale defaults
  cfg.init_seed = 3;
  return cfg;
}

TensorT<float> bench_image(int64_t size) {
  std::mt19937_64 rng(17);
  return TensorT<float>::uniform({1, 3, size, size}, rng, 0.0f, 1.0f);
}

}  // namespace

static void BM_ForwardUnfused(benchmark::State& state) {
  auto model = build<float>(bench_config());
  auto x = bench_image(state.range(0));
  autograd::NoGradGuard no_grad;
  for (auto _ : state) {
    auto det = model.forward(x);
    benchmark::DoNotOptimize(det.boxes.values().data());
  }
}
BENCHMARK(BM_ForwardUnfused)->Arg(128)->Unit(benchmark::kMillisecond);

static void BM_ForwardFused(benchmark::State& state) {
  auto model = fuse_model(build<float>(bench_config()));
  auto x = bench_image(state.range(0));
  autograd::NoGradGuard no_grad;
  for (auto _ : state) {
    auto det = model.forward(x);
    benchmark::DoNotOptimize(det.boxes.values().data());
  }
}
BENCHMARK(BM_ForwardFused)->Arg(128)->Unit(benchmark::kMillisecond);

static void BM_Conv2d(benchmark::State& state) {
  std::mt19937_64 rng(5);
  const int64_t c = state.range(0);
  auto x = TensorT<float>::uniform({1, c, 64, 64}, rng, -1.0f, 1.0f);
  auto k = TensorT<float>::uniform({c, c, 3, 3}, rng, -0.1f, 0.1f);
  autograd::NoGradGuard no_grad;
  for (auto _ : state) {
    auto y = conv2d(x, k, TensorT<float>(), 1, 1);
    benchmark::DoNotOptimize(y.values().data());
  }
  state.SetItemsProcessed(state.iterations() * 2 * c * c * 9 * 64 * 64);
}
BENCHMARK(BM_Conv2d)->Arg(16)->Arg(64)->Unit(benchmark::kMillisecond);

static void BM_MsDeformSample(benchmark::State& state) {
  std::mt19937_64 rng(9);
  const int64_t rows = state.range(0);
  const int64_t d = 64, M = 4, L = 3, K = 4;
  std::vector<TensorT<float>> values;
  for (int64_t l = 0; l < L; ++l)
    values.push_back(TensorT<float>::uniform({1, d, 32 >> l, 32 >> l}, rng, -1.0f, 1.0f));
  auto loc = TensorT<float>::uniform(Shape4::mat(rows, M * L * K * 2), rng, 0.1f, 0.9f);
  auto w = TensorT<float>::full(Shape4::mat(rows, M * L * K), 1.0f / (L * K));
  std::vector<int64_t> items(static_cast<size_t>(rows), 0);
  autograd::NoGradGuard no_grad;
  for (auto _ : state) {
    auto out = ms_deform_sample(values, loc, w, M, items);
    benchmark::DoNotOptimize(out.values().data());
  }
}
BENCHMARK(BM_MsDeformSample)->Arg(256)->Arg(1344)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
