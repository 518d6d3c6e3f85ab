#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "fmm/data.hpp"
#include "fmm/model.hpp"

namespace fmm {

struct MaskPlan {
  double ratio = 0.75;
  std::uint64_t seed = 0;
  std::size_t token_count = 0;
  std::vector<std::size_t> masked;   // sorted
  std::vector<std::size_t> visible;  // sorted complement
};

// round(ratio * token_count) tokens drawn uniformly without replacement.
MaskPlan mask_tokens(std::size_t token_count, double ratio, std::uint64_t seed);

struct MaskedTokens {
  std::vector<float> visible_values;  // visible.size() x patch_size
  MaskPlan plan;
};
MaskedTokens mask_tokens(const TokenSequence& tokens, double ratio, std::uint64_t seed);

// Mean squared error over the masked tokens only; both inputs are [T, P].
double reconstruction_loss(const Tensor& predicted, const Tensor& truth, const MaskPlan& plan);

struct PretrainConfig {
  double mask_ratio = 0.75;
  std::size_t epochs = 30;
  std::size_t batch_size = 8;
  std::size_t decoder_layers = 2;
  AdamConfig optimizer;
  PreprocessConfig preprocess;
  // Subjects with fixed masks used for the per-epoch curve.
  std::size_t eval_subjects = 32;
  DType dtype = DType::f32;
  std::size_t jobs = 1;
};

void validate(const PretrainConfig& config);

Json to_json(const PretrainConfig& config);
PretrainConfig pretrain_config_from_json(const Json& j, std::vector<std::string>* warnings = nullptr);

struct PretrainHistoryRow {
  std::size_t epoch = 0;  // 0 = evaluation before any update
  double masked_mse = 0.0;  // fixed evaluation masks
  double train_mse = 0.0;   // mean over the epoch's batches; 0 for epoch 0
};

struct PretrainResult {
  TsEncoderConfig encoder_config;
  ParameterMap encoder;  // ts.* only; the decoder is discarded
  Provenance provenance;
  std::vector<PretrainHistoryRow> history;
  double initial_mse = 0.0;  // fixed evaluation masks, before training
  double final_mse = 0.0;    // same masks, after training
};

// Shapes of the decoder (mae.*) parameters for a given encoder.
std::map<std::string, Shape> decoder_parameter_shapes(const TsEncoderConfig& config, std::size_t decoder_layers);

// Masked-patch MSE of one subject through encoder + decoder, as a graph node.
Var mae_loss(Params& p, const TsEncoderConfig& config, std::size_t decoder_layers, const TokenSequence& tokens,
             const MaskPlan& plan);

PretrainResult mae_pretrain(const Cohort& corpus, const TsEncoderConfig& config, const PretrainConfig& pretrain,
                            std::uint64_t seed);

Checkpoint encoder_checkpoint(const PretrainResult& result);
PretrainResult encoder_from_checkpoint(const Checkpoint& checkpoint);
void write_pretrain_history(const std::vector<PretrainHistoryRow>& history, const std::filesystem::path& path);

}  // namespace fmm
