#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "../support/fixtures.hpp"
#include "fmm/errors.hpp"
#include "fmm/pretrain.hpp"

namespace fmm {
namespace {

using testing::tiny_config;
using testing::tiny_corpus;

PretrainConfig tiny_pretrain(std::size_t epochs = 6) {
  PretrainConfig pc;
  pc.epochs = epochs;
  pc.batch_size = 4;
  pc.decoder_layers = 1;
  pc.preprocess.target_length = 40;
  pc.optimizer.learning_rate = 3e-3;
  pc.eval_subjects = 8;
  pc.dtype = DType::f64;
  return pc;
}

TEST(MaskTokens, CountsFollowRounding) {
  EXPECT_EQ(mask_tokens(10, 0.5, 1).masked.size(), 5u);
  EXPECT_EQ(mask_tokens(4240, 0.75, 1).masked.size(), 3180u);
  EXPECT_EQ(mask_tokens(4240, 0.75, 1).visible.size(), 1060u);
}

TEST(MaskTokens, UniqueSortedAndPartitioning) {
  const MaskPlan plan = mask_tokens(321, 0.75, 9);
  std::set<std::size_t> all(plan.masked.begin(), plan.masked.end());
  EXPECT_EQ(all.size(), plan.masked.size());
  EXPECT_TRUE(std::is_sorted(plan.masked.begin(), plan.masked.end()));
  for (std::size_t v : plan.visible) EXPECT_TRUE(all.insert(v).second);
  EXPECT_EQ(all.size(), 321u);
  EXPECT_EQ(*all.rbegin(), 320u);
}

TEST(MaskTokens, DeterministicPerSeed) {
  EXPECT_EQ(mask_tokens(100, 0.75, 3).masked, mask_tokens(100, 0.75, 3).masked);
  EXPECT_NE(mask_tokens(100, 0.75, 3).masked, mask_tokens(100, 0.75, 4).masked);
}

TEST(MaskTokens, RoughlyUniform) {
  std::vector<int> hits(20, 0);
  for (std::uint64_t s = 0; s < 2000; ++s) {
    for (std::size_t i : mask_tokens(20, 0.5, s).masked) ++hits[i];
  }
  for (int h : hits) EXPECT_NEAR(h / 2000.0, 0.5, 0.05);
}

TEST(MaskTokens, RejectsRatioOutsideOpenInterval) {
  EXPECT_THROW(mask_tokens(10, 0.0, 1), ValueError);
  EXPECT_THROW(mask_tokens(10, 1.0, 1), ValueError);
  EXPECT_THROW(mask_tokens(10, -0.2, 1), ValueError);
  EXPECT_THROW(mask_tokens(2, 0.1, 1), ValueError);  // rounds to zero masked
}

TEST(MaskTokens, VisibleValuesMatchSequence) {
  const PreparedSubject s = testing::tiny_subject(2);
  const MaskedTokens m = mask_tokens(s.tokens, 0.5, 5);
  ASSERT_EQ(m.visible_values.size(), m.plan.visible.size() * s.tokens.patch_size);
  const auto t = s.tokens.token(m.plan.visible[1]);
  for (std::size_t j = 0; j < t.size(); ++j) EXPECT_EQ(m.visible_values[s.tokens.patch_size + j], t[j]);
}

TEST(ReconstructionLoss, PerfectIsZeroAndOffsetIsOne) {
  const MaskPlan plan = mask_tokens(6, 0.5, 2);
  const Tensor truth = testing::random_tensor({6, 4}, 3);
  EXPECT_EQ(reconstruction_loss(truth, truth, plan), 0.0);
  std::vector<double> shifted = truth.to_vector();
  for (auto& x : shifted) x += 1.0;
  EXPECT_NEAR(reconstruction_loss(Tensor({6, 4}, shifted), truth, plan), 1.0, 1e-12);
}

TEST(ReconstructionLoss, IgnoresUnmaskedPositions) {
  const MaskPlan plan = mask_tokens(6, 0.5, 2);
  const Tensor truth = testing::random_tensor({6, 4}, 3);
  const Tensor pred = testing::random_tensor({6, 4}, 4);
  std::vector<double> perturbed = pred.to_vector();
  for (std::size_t i : plan.visible) {
    for (std::size_t j = 0; j < 4; ++j) perturbed[i * 4 + j] += 100.0 * (j + 1);
  }
  EXPECT_DOUBLE_EQ(reconstruction_loss(pred, truth, plan), reconstruction_loss(Tensor({6, 4}, perturbed), truth, plan));
}

TEST(ReconstructionLoss, ShapeMismatchThrows) {
  const MaskPlan plan = mask_tokens(6, 0.5, 2);
  EXPECT_THROW(reconstruction_loss(Tensor::zeros({6, 4}, DType::f64), Tensor::zeros({6, 3}, DType::f64), plan), ShapeError);
  EXPECT_THROW(reconstruction_loss(Tensor::zeros({5, 4}, DType::f64), Tensor::zeros({5, 4}, DType::f64), plan), ShapeError);
}

TEST(MaeLoss, GradientsMatchFiniteDifferences) {
  const auto cfg = tiny_config().ts;
  const PreparedSubject s = testing::tiny_subject(7);
  const MaskPlan plan = mask_tokens(s.tokens.token_count(), 0.5, 1);
  std::map<std::string, Tensor> inputs;
  auto shapes = ts_parameter_shapes(cfg);
  for (const auto& [n, sh] : decoder_parameter_shapes(cfg, 1)) shapes.emplace(n, sh);
  std::uint64_t k = 0;
  for (const auto& [name, shape] : shapes) inputs.emplace(name, testing::random_tensor(shape, ++k, -0.5, 0.5));
  // The key-weight gradient is small here, so round-off dominates at the default step.
  const auto r = testing::gradient_check(
      inputs,
      [&](Graph& g, const std::map<std::string, Var>& v) {
        Params p(g, v, DType::f64);
        return mae_loss(p, cfg, 1, s.tokens, plan);
      },
      3e-5);
  EXPECT_LE(r.worst_relative_error, 1e-6) << r.worst_input;
}

TEST(MaeLoss, EqualsReconstructionLossOnDecodedPatches) {
  // The graph loss only reads masked rows, so a constant decoder output of
  // zero must give the mean square of the masked truth.
  const auto cfg = tiny_config().ts;
  const PreparedSubject s = testing::tiny_subject(8);
  const MaskPlan plan = mask_tokens(s.tokens.token_count(), 0.5, 4);
  ParameterMap params = init_ts_parameters(cfg, DType::f64, 1);
  for (const auto& [n, sh] : decoder_parameter_shapes(cfg, 1)) params.emplace(n, Tensor::zeros(sh, DType::f64));
  Graph g(false);
  Params p(g, params, nullptr);
  const double loss = mae_loss(p, cfg, 1, s.tokens, plan).value().item();
  std::vector<double> truth(s.tokens.values.begin(), s.tokens.values.end());
  const Tensor t({s.tokens.token_count(), s.tokens.patch_size}, truth);
  EXPECT_NEAR(loss, reconstruction_loss(Tensor::zeros(t.shape(), DType::f64), t, plan), 1e-12);
}

TEST(MaePretrain, ReducesMaskedError) {
  const PretrainResult r = mae_pretrain(tiny_corpus(24, 1), tiny_config().ts, tiny_pretrain(), 5);
  ASSERT_EQ(r.history.size(), 7u);
  EXPECT_EQ(r.history.front().epoch, 0u);
  EXPECT_LT(r.final_mse, r.initial_mse);
  EXPECT_TRUE(r.provenance.pretrained);
  EXPECT_EQ(r.provenance.pretrain_fingerprint, "tiny-1");
  for (const auto& [name, t] : r.encoder) EXPECT_TRUE(is_ts_parameter(name)) << name;
  EXPECT_EQ(r.encoder.size(), ts_parameter_shapes(tiny_config().ts).size());
}

TEST(MaePretrain, EncoderMovesAwayFromInitialisation) {
  const auto cfg = tiny_config(FusionKind::concat, Modality::ts);
  const PretrainResult r = mae_pretrain(tiny_corpus(24, 1), cfg.ts, tiny_pretrain(), 5);
  Model fresh = init_model(cfg, 5);
  Model trained = fresh;
  load_pretrained_encoder(trained, r.encoder, r.provenance);
  const PreparedSubject s = testing::tiny_subject(30);
  const Tensor a = ts_encode(fresh, s.tokens), b = ts_encode(trained, s.tokens);
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    ab += a.at(i) * b.at(i);
    aa += a.at(i) * a.at(i);
    bb += b.at(i) * b.at(i);
  }
  EXPECT_LT(ab / std::sqrt(aa * bb), 0.99);
}

TEST(MaePretrain, BitwiseDeterministicAcrossJobCounts) {
  const Cohort corpus = tiny_corpus(10, 2);
  PretrainConfig pc = tiny_pretrain(2);
  const auto a = serialize_checkpoint(encoder_checkpoint(mae_pretrain(corpus, tiny_config().ts, pc, 8)));
  pc.jobs = 3;
  const auto b = serialize_checkpoint(encoder_checkpoint(mae_pretrain(corpus, tiny_config().ts, pc, 8)));
  EXPECT_EQ(a, b);
  const auto c = serialize_checkpoint(encoder_checkpoint(mae_pretrain(corpus, tiny_config().ts, pc, 9)));
  EXPECT_NE(a, c);
}

TEST(MaePretrain, LeavesCorpusUntouched) {
  const Cohort corpus = tiny_corpus(6, 3);
  const Cohort copy = corpus;
  mae_pretrain(corpus, tiny_config().ts, tiny_pretrain(1), 1);
  EXPECT_EQ(corpus, copy);
}

TEST(MaePretrain, DivergenceGuardAborts) {
  // An absurd step size overflows the weights within one update.
  PretrainConfig pc = tiny_pretrain(2);
  pc.dtype = DType::f32;
  pc.optimizer.learning_rate = 1e30;
  EXPECT_THROW(mae_pretrain(tiny_corpus(8, 3), tiny_config().ts, pc, 1), DivergenceError);
}

TEST(MaePretrain, RejectsEmptyCorpusAndPatchMismatch) {
  EXPECT_THROW(mae_pretrain(Cohort{}, tiny_config().ts, tiny_pretrain(1), 1), ValueError);
  PretrainConfig pc = tiny_pretrain(1);
  pc.preprocess.patch_size = 10;
  EXPECT_THROW(mae_pretrain(tiny_corpus(2, 1), tiny_config().ts, pc, 1), ValueError);
}

TEST(EncoderCheckpoint, RoundTripsThroughFile) {
  const PretrainResult r = mae_pretrain(tiny_corpus(6, 4), tiny_config().ts, tiny_pretrain(1), 3);
  const auto path = std::filesystem::temp_directory_path() / "fmm_encoder_roundtrip.fmtc";
  save_checkpoint(encoder_checkpoint(r), path);
  const PretrainResult back = encoder_from_checkpoint(load_checkpoint(path));
  EXPECT_EQ(back.history.size(), r.history.size());
  EXPECT_EQ(back.provenance.pretrain_seed, 3u);
  for (const auto& [name, t] : r.encoder) EXPECT_TRUE(back.encoder.at(name).bitwise_equal(t)) << name;
  std::filesystem::remove(path);
}

TEST(EncoderCheckpoint, RejectsClassifierCheckpoints) {
  const Model m = init_model(tiny_config(), 1);
  EXPECT_THROW(encoder_from_checkpoint(to_checkpoint(m)), FormatError);
}

TEST(PretrainConfig, JsonRoundTripAndValidation) {
  PretrainConfig pc = tiny_pretrain(4);
  std::vector<std::string> warnings;
  Json j = to_json(pc);
  j["bogus"] = 1;
  const PretrainConfig back = pretrain_config_from_json(j, &warnings);
  EXPECT_EQ(to_json(back), to_json(pc));
  ASSERT_EQ(warnings.size(), 1u);
  EXPECT_NE(warnings[0].find("pretrain.bogus"), std::string::npos);
  j["mask_ratio"] = 1.5;
  EXPECT_THROW(pretrain_config_from_json(j), ValueError);
}

TEST(PretrainHistory, WritesCsv) {
  const auto path = std::filesystem::temp_directory_path() / "fmm_pretrain_history.csv";
  write_pretrain_history({{0, 1.5, 0.0}, {1, 1.25, 1.3}}, path);
  std::ifstream in(path);
  std::string header, row0, row1;
  std::getline(in, header);
  std::getline(in, row0);
  std::getline(in, row1);
  EXPECT_EQ(header, "epoch,masked_mse,train_mse");
  EXPECT_EQ(row0, "0,1.5,0");
  EXPECT_EQ(row1.substr(0, 7), "1,1.25,");
  std::filesystem::remove(path);
}

}  // namespace
}  // namespace fmm
