#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

#include "../support/fixtures.hpp"
#include "fmm/errors.hpp"
#include "fmm/interpret.hpp"

namespace fmm {
namespace {

using testing::tiny_config;

FeaturePredictor affine(std::vector<double> w, double b) {
  return [w, b](Graph& g, Var x) {
    Var wv = g.constant(Tensor::from_values({w.size(), 1}, w, DType::f64));
    return ops::add(ops::matmul(x, wv), g.constant(Tensor::full({1, 1}, b, DType::f64)));
  };
}

// sigmoid(w.x + b) + 0.3 * tanh-like smooth term, to exercise curvature.
FeaturePredictor curved(std::vector<double> w, double b) {
  return [w, b](Graph& g, Var x) {
    Var wv = g.constant(Tensor::from_values({w.size(), 1}, w, DType::f64));
    Var z = ops::add(ops::matmul(x, wv), g.constant(Tensor::full({1, 1}, b, DType::f64)));
    return ops::add(ops::sigmoid(z), ops::scale(ops::sigmoid(ops::mul(z, z)), 0.3));
  };
}

TEST(IntegratedGradients, ExactForAffinePredictors) {
  const std::vector<double> w{0.5, -2.0, 1.5, 0.25}, x{1.0, 0.3, -0.7, 2.0};
  for (std::size_t steps : {1u, 7u, 50u}) {
    const AttributionReport r = integrated_gradients(affine(w, 0.4), x, steps);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(r.attributions[i], w[i] * x[i], 1e-14);
    EXPECT_LT(r.residual, 1e-14);
    EXPECT_EQ(r.baseline, "zero");
  }
}

TEST(IntegratedGradients, ZeroPathGivesZeroAttribution) {
  const std::vector<double> w{0.5, -2.0}, x{0.2, 0.9};
  const AttributionReport r = integrated_gradients(curved(w, 0.1), x, x, 16);
  for (double a : r.attributions) EXPECT_EQ(a, 0.0);
  EXPECT_EQ(r.baseline, "custom");
}

TEST(IntegratedGradients, LinearInThePredictor) {
  const std::vector<double> w1{0.5, -1.0, 2.0}, w2{-0.3, 0.8, 0.1}, x{0.4, -1.2, 0.7};
  const FeaturePredictor p1 = curved(w1, 0.2), p2 = curved(w2, -0.5);
  const FeaturePredictor both = [&](Graph& g, Var v) { return ops::add(p1(g, v), p2(g, v)); };
  const auto a = integrated_gradients(p1, x, 32), b = integrated_gradients(p2, x, 32), c = integrated_gradients(both, x, 32);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(c.attributions[i], a.attributions[i] + b.attributions[i], 1e-13);
}

TEST(IntegratedGradients, ScalesWithInputDifferenceForAffine) {
  const std::vector<double> w{1.0, -0.5, 3.0}, base{0.1, 0.2, 0.3}, x{1.0, -1.0, 0.5};
  std::vector<double> x2(3);
  for (std::size_t i = 0; i < 3; ++i) x2[i] = base[i] + 2.5 * (x[i] - base[i]);
  const auto a = integrated_gradients(affine(w, 0.0), x, base, 10);
  const auto b = integrated_gradients(affine(w, 0.0), x2, base, 10);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(b.attributions[i], 2.5 * a.attributions[i], 1e-13);
}

TEST(IntegratedGradients, ResidualShrinksAsStepsDouble) {
  const std::vector<double> w{1.5, -2.0, 0.7, 1.1}, x{1.2, -0.8, 2.0, 0.5};
  double previous = std::numeric_limits<double>::infinity();
  for (std::size_t steps = 32; steps <= 1024; steps *= 2) {
    const double residual = integrated_gradients(curved(w, 0.3), x, steps).residual;
    EXPECT_LE(residual, previous + 1e-6) << steps;
    previous = residual;
  }
  EXPECT_LT(previous, 1e-5);
}

TEST(IntegratedGradients, RejectsBadArguments) {
  const FeaturePredictor p = affine({1.0, 1.0}, 0.0);
  const std::vector<double> x{1.0, 2.0}, short_baseline{0.0};
  EXPECT_THROW(integrated_gradients(p, x, short_baseline, 4), ShapeError);
  EXPECT_THROW(integrated_gradients(p, x, 0), ValueError);
  const FeaturePredictor nan_grad = [](Graph& g, Var v) {
    return ops::matmul(v, g.constant(Tensor::from_values({2, 1}, std::vector<double>{NAN, 1.0}, DType::f64)));
  };
  EXPECT_THROW(integrated_gradients(nan_grad, x, 4), ValueError);
}

TEST(ModalityImportance, ZeroBlockGetsZeroShare) {
  const std::vector<double> w{1.0, -2.0, 0.0, 0.0}, x{0.5, 0.5, 3.0, -1.0};
  const auto r = integrated_gradients(curved(w, 0.0), x, 20);
  const ModalityImportance m = modality_importance({r}, 2);
  EXPECT_EQ(m.fc_share, 0.0);
  EXPECT_GT(m.ts_share, 0.0);
}

TEST(ModalityImportance, SwappedBlocksSwapShares) {
  const std::vector<double> w{1.0, -2.0, 0.4, 0.2}, x{0.5, 0.1, 3.0, -1.0};
  const std::vector<double> ws{0.4, 0.2, 1.0, -2.0}, xs{3.0, -1.0, 0.5, 0.1};
  const auto a = modality_importance({integrated_gradients(curved(w, 0.1), x, 20)}, 2);
  const auto b = modality_importance({integrated_gradients(curved(ws, 0.1), xs, 20)}, 2);
  EXPECT_NEAR(a.ts_share, b.fc_share, 1e-14);
  EXPECT_NEAR(a.fc_share, b.ts_share, 1e-14);
}

TEST(ModalityImportance, RejectsInconsistentLengths) {
  const auto r = integrated_gradients(affine({1.0, 1.0, 1.0}, 0.0), std::vector<double>{1, 2, 3}, 4);
  EXPECT_TRUE(std::isnan(r.ts_share));
  EXPECT_THROW(modality_importance({r}, 2), ShapeError);
  EXPECT_THROW(modality_importance({}, 2), ValueError);
}

TEST(ModalityImportance, TrainedFcOutweighsFrozenRandomTs) {
  const Cohort cohort = generate_synthetic_cohort(openneuro_like_profile(4, 40), 7);
  PreprocessConfig pc;
  pc.target_length = 40;
  const PreparedCohort data = prepare_cohort(cohort, pc);
  PretrainResult random_encoder;
  random_encoder.encoder_config = tiny_config().ts;
  random_encoder.encoder = init_ts_parameters(tiny_config().ts, DType::f64, 3);
  random_encoder.provenance.pretrained = true;
  ExperimentContext ctx;
  ctx.model = tiny_config();
  ctx.preprocess = pc;
  ctx.encoder = &random_encoder;
  ExperimentSpec spec;
  spec.pretrained = true;
  spec.epochs = 20;
  spec.optimizer.learning_rate = 3e-3;
  std::vector<std::size_t> all(data.size());
  std::iota(all.begin(), all.end(), 0);
  const Model model = train_model(data, all, spec, ctx, 1).model;
  const auto reports = attribute_cohort(model, data, 50);
  ASSERT_EQ(reports.size(), data.size());
  for (const auto& r : reports) EXPECT_LT(r.residual, 1e-3);
  const ModalityImportance m = modality_importance(reports, 8);
  EXPECT_GT(m.fc_share, m.ts_share);

  const auto dir = std::filesystem::temp_directory_path() / "fmm_attribution_test";
  std::filesystem::remove_all(dir);
  write_attribution(reports, m, dir);
  EXPECT_TRUE(std::filesystem::exists(dir / "attribution.json"));
  EXPECT_TRUE(std::filesystem::exists(dir / "attribution_profile.csv"));
  std::filesystem::remove_all(dir);
}

TEST(ModalityImportance, RequiresConcatModel) {
  ModelConfig c = tiny_config(FusionKind::sum);
  const Model m = init_model(c, 1);
  PreparedCohort empty;
  EXPECT_THROW(attribute_cohort(m, empty), ValueError);
}

}  // namespace
}  // namespace fmm
