#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fmm/harness.hpp"
#include "fmm/pretrain.hpp"

namespace fmm {

struct RunPaths {
  std::string data_dir = "data";
  std::string checkpoint_dir = "checkpoints";
  std::string report_dir = "reports";
};

/// Everything a CLI run needs. The global seed drives every random stream:
/// the cohort and the experiment use it directly, the pretraining corpus and
/// encoder initialisation use derive_seed(seed, 1) and derive_seed(seed, 2).
struct RunConfig {
  RunPaths paths;
  std::string profile = "openneuro-like";
  ModelConfig model = desk_model_config();
  PreprocessConfig preprocess;
  PretrainConfig pretrain;
  std::size_t pretrain_subjects = 200;
  ExperimentSpec experiment;
  ProbeConfig probe;
  std::size_t attribution_steps = 50;
  std::uint64_t seed = 7;
  Json provenance = Json::object();  // informational, filled by runs (fingerprints, command)
};

void validate(const RunConfig& config);
Json to_json(const RunConfig& config);
// Missing keys keep their defaults; unknown keys are reported through warnings.
RunConfig run_config_from_json(const Json& j, std::vector<std::string>* warnings = nullptr);
// Parse errors carry the line and column of the offending character.
RunConfig load_config(const std::filesystem::path& path, std::vector<std::string>* warnings = nullptr);

std::uint64_t corpus_seed(const RunConfig& config);
std::uint64_t encoder_seed(const RunConfig& config);

}  // namespace fmm
