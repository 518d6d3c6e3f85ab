#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "fmm/canonical_json.hpp"
#include "fmm/graph.hpp"
#include "fmm/optimizer.hpp"
#include "fmm/preprocess.hpp"

namespace fmm {

enum class AttentionKind { exact, nystrom };
enum class FusionKind { concat, sum, cross_uni, cross_bi, moe };
enum class Modality { ts, fc, both };

std::string to_string(AttentionKind kind);
std::string to_string(FusionKind kind);
std::string to_string(Modality modality);
AttentionKind parse_attention_kind(const std::string& name);
FusionKind parse_fusion_kind(const std::string& name);
Modality parse_modality(const std::string& name);
std::vector<std::string> fusion_kind_names();

struct TsEncoderConfig {
  std::size_t layers = 4;
  std::size_t heads = 4;
  std::size_t model_dim = 256;
  std::size_t ff_multiplier = 4;
  std::size_t patch_size = 20;
  std::size_t max_rois = 424;
  std::size_t max_patches = 10;
  std::size_t max_tokens = 4240;
  AttentionKind attention = AttentionKind::exact;
  std::size_t landmarks = 32;  // Nystrom only
  bool frozen = false;
};

struct FcEncoderConfig {
  std::vector<std::size_t> widths{8, 16, 32, 64};
  std::size_t n_rois = 32;
  std::size_t output_dim = 256;
  std::size_t groups = 4;  // GroupNorm groups; must divide every width
  std::size_t stem_kernel = 7;
  std::size_t stem_stride = 2;
};

struct ModelConfig {
  TsEncoderConfig ts;
  FcEncoderConfig fc;
  FusionKind fusion = FusionKind::concat;
  Modality modality = Modality::both;
  DType dtype = DType::f32;
};

void validate(const TsEncoderConfig& config);
void validate(const FcEncoderConfig& config);
void validate(const ModelConfig& config);

Json to_json(const TsEncoderConfig& config);
Json to_json(const FcEncoderConfig& config);
Json to_json(const ModelConfig& config);
// Missing keys take defaults; unknown keys are reported through warnings.
TsEncoderConfig ts_config_from_json(const Json& j, std::vector<std::string>* warnings = nullptr);
FcEncoderConfig fc_config_from_json(const Json& j, std::vector<std::string>* warnings = nullptr);
ModelConfig model_config_from_json(const Json& j, std::vector<std::string>* warnings = nullptr);

// Scaled-down configuration used by tests, acceptance and CLI defaults:
// M=32, 4 layers, 4 heads, FC widths [8,16,32,64] for N=32 inputs.
ModelConfig desk_model_config(std::size_t n_rois = 32, std::size_t n_timepoints = 200);

// Width of the fused feature fed to the head.
std::size_t head_input_dim(const ModelConfig& config);

struct Provenance {
  bool pretrained = false;
  std::uint64_t init_seed = 0;
  std::uint64_t pretrain_seed = 0;
  std::string pretrain_fingerprint;
};

Json to_json(const Provenance& provenance);
Provenance provenance_from_json(const Json& j);

struct Model {
  ModelConfig config;
  ParameterMap params;
  Provenance provenance;
};

// Every parameter name and shape the architecture needs, in sorted order.
std::map<std::string, Shape> parameter_shapes(const ModelConfig& config);
std::map<std::string, Shape> ts_parameter_shapes(const TsEncoderConfig& config);
Model init_model(const ModelConfig& config, std::uint64_t seed);
// Deterministic per-name initialisation: normal(0, 0.02) for embeddings and
// tokens, unit/zero norms, Kaiming-uniform weights, zero biases.
Tensor init_parameter(const std::string& name, const Shape& shape, DType dtype, std::uint64_t seed);
ParameterMap init_ts_parameters(const TsEncoderConfig& config, DType dtype, std::uint64_t seed);
// Copies every ts.* tensor of a pretrained encoder into the model and marks it pretrained.
void load_pretrained_encoder(Model& model, const ParameterMap& encoder, const Provenance& provenance);
bool is_ts_parameter(const std::string& name);

/// Resolves parameter names to graph leaves, binding each one on first use.
class Params {
 public:
  using TrainablePredicate = std::function<bool(const std::string&)>;

  Params(Graph& graph, const ParameterMap& values, TrainablePredicate trainable);
  // Pre-bound leaves, e.g. from a gradient-check harness.
  Params(Graph& graph, std::map<std::string, Var> bound, DType dtype);

  Var operator()(const std::string& name);
  Graph& graph() const { return *graph_; }
  DType dtype() const { return dtype_; }
  Var constant(Tensor value) const;

 private:
  Graph* graph_;
  const ParameterMap* values_ = nullptr;
  TrainablePredicate trainable_;
  std::map<std::string, Var> bound_;
  DType dtype_ = DType::f32;
};

// Graph builders. Row vectors are [1, D].
Var embed_tokens(Params& p, const TsEncoderConfig& config, const TokenSequence& tokens,
                 const std::vector<std::size_t>& which);
// x is [L, M]; returns the final-normed [L, M] states. attention_maps, when
// given, receives one [L, L] row-stochastic matrix per layer and head.
Var transformer_stack(Params& p, const std::string& prefix, std::size_t layers, std::size_t heads, Var x,
                      AttentionKind attention, std::size_t landmarks, std::vector<Tensor>* attention_maps = nullptr);
Var ts_encode(Params& p, const TsEncoderConfig& config, const TokenSequence& tokens,
              std::vector<Tensor>* attention_maps = nullptr);
Var fc_encode(Params& p, const FcEncoderConfig& config, const ConnectivityMatrix& fc);
Var fuse(Params& p, FusionKind kind, Var rt, Var rc);
Var predict_head(Params& p, Var features);
// Head input for the configured modality from whatever streams are active.
Var combine_streams(Params& p, const ModelConfig& config, Var rt, Var rc);

// Tensor-level conveniences on a read-only model.
Tensor ts_encode(const Model& model, const TokenSequence& tokens, std::vector<Tensor>* attention_maps = nullptr);
Tensor fc_encode(const Model& model, const ConnectivityMatrix& fc);
Tensor fuse(const Model& model, const Tensor& rt, const Tensor& rc);
double predict_head(const Model& model, const Tensor& features);  // logit
Tensor extract_fused(const Model& model, const PreparedSubject& subject);
double forward_logit(const Model& model, const PreparedSubject& subject);
double forward(const Model& model, const PreparedSubject& subject);  // probability

double sigmoid(double logit);
// Mean binary cross-entropy in the stable logit form.
double bce_loss(std::span<const double> logits, std::span<const int> labels);
double bce_loss_from_probabilities(std::span<const double> probabilities, std::span<const int> labels);

/// Raw checkpoint contents; the config blob is free-form canonical JSON.
struct Checkpoint {
  Json config;
  ParameterMap params;
};

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);
std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& checkpoint);
Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& source = "checkpoint");

Checkpoint to_checkpoint(const Model& model);
// Validates that every architecture parameter is present with its expected shape.
Model model_from_checkpoint(const Checkpoint& checkpoint);
void save_model(const Model& model, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);

}  // namespace fmm
