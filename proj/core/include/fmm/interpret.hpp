#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "fmm/graph.hpp"
#include "fmm/harness.hpp"

namespace fmm {

// Maps a [1, D] feature row to a [1, 1] scalar on the given graph.
using FeaturePredictor = std::function<Var(Graph&, Var)>;

// Post-sigmoid probability of the model's final predictor, evaluated in f64.
FeaturePredictor head_probability(const Model& model);

struct AttributionReport {
  std::string subject_id;
  std::vector<double> attributions;  // one per feature dimension
  // Mean |IG| over the first and second half of the features; NaN for odd widths.
  double ts_share = 0.0;
  double fc_share = 0.0;
  double residual = 0.0;  // |sum IG - (p(x) - p(x'))|
  double prediction = 0.0;
  double baseline_prediction = 0.0;
  std::size_t steps = 0;
  std::string baseline = "zero";
};

// Midpoint-rule integrated gradients from baseline to x.
AttributionReport integrated_gradients(const FeaturePredictor& predictor, std::span<const double> x,
                                       std::span<const double> baseline, std::size_t steps);
AttributionReport integrated_gradients(const FeaturePredictor& predictor, std::span<const double> x,
                                       std::size_t steps = 50);  // zero baseline

struct ModalityImportance {
  double ts_share = 0.0;
  double fc_share = 0.0;
  std::vector<double> profile;  // mean |IG| per dimension over subjects
  std::size_t subjects = 0;
};

ModalityImportance modality_importance(const std::vector<AttributionReport>& reports, std::size_t model_dim);

// One report per cohort subject on the fused head input. Requires a concat model.
std::vector<AttributionReport> attribute_cohort(const Model& model, const PreparedCohort& data, std::size_t steps = 50,
                                                const std::vector<Tensor>* ts_cache = nullptr, std::size_t jobs = 1);

Json to_json(const AttributionReport& report);
Json to_json(const ModalityImportance& importance);
// attribution.json plus attribution_profile.csv (dimension,stream,mean_abs_ig).
void write_attribution(const std::vector<AttributionReport>& reports, const ModalityImportance& importance,
                       const std::filesystem::path& directory);

}  // namespace fmm
