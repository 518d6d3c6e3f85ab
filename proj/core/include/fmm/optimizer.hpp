#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fmm/canonical_json.hpp"
#include "fmm/graph.hpp"
#include "fmm/tensor.hpp"

namespace fmm {

using ParameterMap = std::map<std::string, Tensor>;

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  // Decoupled weight decay; 0 disables it.
  double weight_decay = 0.0;
};

Json to_json(const AdamConfig& config);
AdamConfig adam_config_from_json(const Json& j, std::vector<std::string>* warnings = nullptr,
                                 const std::string& path = "optimizer");
void validate(const AdamConfig& config);

/// Moment buffers are kept in f64 regardless of parameter dtype.
struct OptimizerState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::map<std::string, std::vector<double>> first_moment;
  std::map<std::string, std::vector<double>> second_moment;
};

// One bias-corrected Adam update. Parameters without a gradient entry are
// left untouched, as are their moment buffers.
void adam_step(OptimizerState& state, ParameterMap& params, const GradientMap& grads);

// Elementwise sum of gradient maps, used to reduce per-sample gradients in a fixed order.
void accumulate_gradients(GradientMap& total, const GradientMap& part);
GradientMap scale_gradients(const GradientMap& grads, double factor);

}  // namespace fmm
