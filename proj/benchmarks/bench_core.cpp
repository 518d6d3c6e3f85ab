#include <benchmark/benchmark.h>

#include "fmm/harness.hpp"
#include "fmm/interpret.hpp"
#include "fmm/pretrain.hpp"
#include "fmm/rng.hpp"

namespace {

using namespace fmm;

const Cohort& desk_cohort() {
  static const Cohort c = generate_synthetic_cohort(openneuro_like_profile(), 7);
  return c;
}

const PreparedCohort& desk_data() {
  static const PreparedCohort d = prepare_cohort(desk_cohort());
  return d;
}

void BM_Metrics(benchmark::State& state) {
  Rng rng(1);
  std::vector<double> p(static_cast<std::size_t>(state.range(0)));
  std::vector<int> y(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = rng.uniform();
    y[i] = static_cast<int>(i % 2);
  }
  for (auto _ : state) benchmark::DoNotOptimize(compute_metrics(p, y));
}
BENCHMARK(BM_Metrics)->Arg(56)->Arg(1000);

void BM_Prepare(benchmark::State& state) {
  const auto& s = desk_cohort().subjects.front().series;
  for (auto _ : state) benchmark::DoNotOptimize(prepare(s));
}
BENCHMARK(BM_Prepare);

void BM_TsEncode(benchmark::State& state) {
  const Model m = init_model(desk_model_config(), 1);
  const auto& tokens = desk_data().subjects.front().tokens;
  for (auto _ : state) benchmark::DoNotOptimize(ts_encode(m, tokens));
}
BENCHMARK(BM_TsEncode)->Unit(benchmark::kMillisecond);

void BM_FusedForward(benchmark::State& state) {
  const Model m = init_model(desk_model_config(), 1);
  const auto& s = desk_data().subjects.front();
  for (auto _ : state) benchmark::DoNotOptimize(forward(m, s));
}
BENCHMARK(BM_FusedForward)->Unit(benchmark::kMillisecond);

void BM_TrainStepBothScratch(benchmark::State& state) {
  const Model m = init_model(desk_model_config(), 1);
  const auto& s = desk_data().subjects.front();
  for (auto _ : state) {
    Graph g;
    Params p(g, m.params, [](const std::string&) { return true; });
    Var logit = predict_head(p, combine_streams(p, m.config, ts_encode(p, m.config.ts, s.tokens), fc_encode(p, m.config.fc, s.fc)));
    Var loss = ops::bce_with_logits(logit, p.constant(Tensor::full({1, 1}, 1.0, DType::f64)));
    benchmark::DoNotOptimize(g.backward(loss));
  }
}
BENCHMARK(BM_TrainStepBothScratch)->Unit(benchmark::kMillisecond);

void BM_IntegratedGradients(benchmark::State& state) {
  const Model m = init_model(desk_model_config(), 1);
  const Tensor x = extract_fused(m, desk_data().subjects.front());
  const auto values = x.to_vector();
  const FeaturePredictor predictor = head_probability(m);
  for (auto _ : state) benchmark::DoNotOptimize(integrated_gradients(predictor, values, 50));
}
BENCHMARK(BM_IntegratedGradients)->Unit(benchmark::kMillisecond);

void BM_MaskTokens(benchmark::State& state) {
  std::uint64_t seed = 0;
  for (auto _ : state) benchmark::DoNotOptimize(mask_tokens(320, 0.75, ++seed));
}
BENCHMARK(BM_MaskTokens);

void BM_RidgeProbe(benchmark::State& state) {
  const Matrix x = raw_fc_features(desk_data());
  ProbeConfig cfg;
  for (auto _ : state) benchmark::DoNotOptimize(linear_probe(x, desk_data().labels, cfg, 5, 7));
}
BENCHMARK(BM_RidgeProbe)->Unit(benchmark::kMillisecond);

}  // namespace

// The packaged benchmark_main archive is LTO bytecode from another compiler release, so define main here.
BENCHMARK_MAIN();
