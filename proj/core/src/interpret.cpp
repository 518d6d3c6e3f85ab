#include "fmm/interpret.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <memory>
#include <sstream>

#include "binary_io.hpp"
#include "fmm/errors.hpp"
#include "fmm/parallel.hpp"

namespace fmm {

namespace {

constexpr const char* kInput = "__input";

double half_mean_abs(const std::vector<double>& v, std::size_t begin, std::size_t end) {
  double s = 0.0;
  for (std::size_t i = begin; i < end; ++i) s += std::abs(v[i]);
  return s / static_cast<double>(end - begin);
}

// Value and input gradient of the predictor at one point.
std::pair<double, std::vector<double>> evaluate(const FeaturePredictor& predictor, const std::vector<double>& point,
                                                bool with_gradient) {
  Graph g(with_gradient);
  const Shape shape{1, point.size()};
  Var x = g.parameter(kInput, Tensor::from_values(shape, point, DType::f64), true);
  Var y = predictor(g, x);
  if (y.shape() != Shape{1, 1}) throw ShapeError("predictor must return a [1, 1] value, got " + shape_string(y.shape()));
  const double value = y.value().item();
  if (!with_gradient) return {value, {}};
  const GradientMap grads = g.backward(y);
  auto it = grads.find(kInput);
  std::vector<double> grad = it == grads.end() ? std::vector<double>(point.size(), 0.0) : it->second.to_vector();
  for (double d : grad) {
    if (!std::isfinite(d)) throw ValueError("integrated gradients: non-finite gradient");
  }
  return {value, std::move(grad)};
}

}  // namespace

FeaturePredictor head_probability(const Model& model) {
  auto head = std::make_shared<ParameterMap>();
  for (const char* name : {"head.weight", "head.bias"}) {
    auto it = model.params.find(name);
    if (it == model.params.end()) throw ValueError(std::string("model has no parameter '") + name + "'");
    head->emplace(name, it->second.cast(DType::f64));
  }
  return [head](Graph& g, Var x) {
    Params p(g, *head, nullptr);
    return ops::sigmoid(predict_head(p, x));
  };
}

AttributionReport integrated_gradients(const FeaturePredictor& predictor, std::span<const double> x,
                                       std::span<const double> baseline, std::size_t steps) {
  if (x.size() != baseline.size()) {
    throw ShapeError("integrated gradients: input has " + std::to_string(x.size()) + " dimensions, baseline " +
                     std::to_string(baseline.size()));
  }
  if (x.empty()) throw ShapeError("integrated gradients: empty input");
  if (steps == 0) throw ValueError("integrated gradients: steps must be >= 1");
  const std::size_t d = x.size();
  std::vector<double> sum(d, 0.0), point(d);
  for (std::size_t s = 1; s <= steps; ++s) {
    const double alpha = (static_cast<double>(s) - 0.5) / static_cast<double>(steps);
    for (std::size_t i = 0; i < d; ++i) point[i] = baseline[i] + alpha * (x[i] - baseline[i]);
    const auto grad = evaluate(predictor, point, true).second;
    for (std::size_t i = 0; i < d; ++i) sum[i] += grad[i];
  }
  AttributionReport r;
  r.steps = steps;
  r.attributions.resize(d);
  double total = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    r.attributions[i] = (x[i] - baseline[i]) * sum[i] / static_cast<double>(steps);
    total += r.attributions[i];
  }
  r.prediction = evaluate(predictor, std::vector<double>(x.begin(), x.end()), false).first;
  r.baseline_prediction = evaluate(predictor, std::vector<double>(baseline.begin(), baseline.end()), false).first;
  r.residual = std::abs(total - (r.prediction - r.baseline_prediction));
  if (d % 2 == 0) {
    r.ts_share = half_mean_abs(r.attributions, 0, d / 2);
    r.fc_share = half_mean_abs(r.attributions, d / 2, d);
  } else {
    r.ts_share = r.fc_share = std::numeric_limits<double>::quiet_NaN();
  }
  bool zero = true;
  for (double b : baseline) zero = zero && b == 0.0;
  r.baseline = zero ? "zero" : "custom";
  return r;
}

AttributionReport integrated_gradients(const FeaturePredictor& predictor, std::span<const double> x, std::size_t steps) {
  const std::vector<double> zero(x.size(), 0.0);
  return integrated_gradients(predictor, x, zero, steps);
}

ModalityImportance modality_importance(const std::vector<AttributionReport>& reports, std::size_t model_dim) {
  if (reports.empty()) throw ValueError("modality_importance: no reports");
  if (model_dim == 0) throw ValueError("modality_importance: model_dim must be >= 1");
  ModalityImportance m;
  m.profile.assign(2 * model_dim, 0.0);
  for (const auto& r : reports) {
    if (r.attributions.size() != 2 * model_dim) {
      throw ShapeError("modality_importance: report '" + r.subject_id + "' has " + std::to_string(r.attributions.size()) +
                       " dimensions, expected " + std::to_string(2 * model_dim));
    }
    for (std::size_t i = 0; i < m.profile.size(); ++i) m.profile[i] += std::abs(r.attributions[i]);
  }
  for (auto& v : m.profile) v /= static_cast<double>(reports.size());
  m.ts_share = half_mean_abs(m.profile, 0, model_dim);
  m.fc_share = half_mean_abs(m.profile, model_dim, 2 * model_dim);
  m.subjects = reports.size();
  return m;
}

std::vector<AttributionReport> attribute_cohort(const Model& model, const PreparedCohort& data, std::size_t steps,
                                                const std::vector<Tensor>* ts_cache, std::size_t jobs) {
  if (model.config.modality != Modality::both || model.config.fusion != FusionKind::concat) {
    throw ValueError("attribution needs a concat-fused model on both modalities");
  }
  const Matrix features = extract_features(model, data, ts_cache, jobs);
  const FeaturePredictor predictor = head_probability(model);
  std::vector<AttributionReport> out(data.size());
  parallel_for(data.size(), jobs, [&](std::size_t i) {
    out[i] = integrated_gradients(predictor, features.row(i), steps);
    out[i].subject_id = data.ids[i];
  });
  return out;
}

Json to_json(const AttributionReport& r) {
  auto num = [](double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); };
  return Json{{"subject", r.subject_id},   {"attributions", r.attributions}, {"ts_share", num(r.ts_share)},
              {"fc_share", num(r.fc_share)}, {"residual", r.residual},        {"prediction", r.prediction},
              {"baseline_prediction", r.baseline_prediction}, {"steps", r.steps}, {"baseline", r.baseline}};
}

Json to_json(const ModalityImportance& m) {
  return Json{{"ts_share", m.ts_share}, {"fc_share", m.fc_share}, {"profile", m.profile}, {"subjects", m.subjects}};
}

void write_attribution(const std::vector<AttributionReport>& reports, const ModalityImportance& importance,
                       const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  Json subjects = Json::array();
  double worst = 0.0;
  for (const auto& r : reports) {
    subjects.push_back(to_json(r));
    worst = std::max(worst, r.residual);
  }
  const Json doc{{"importance", to_json(importance)}, {"max_residual", worst}, {"subjects", subjects}};
  const std::string json = canonical_dump_pretty(doc) + "\n";
  detail::write_file(dir / "attribution.json", std::vector<std::uint8_t>(json.begin(), json.end()));
  std::ostringstream csv;
  csv.precision(17);
  csv << "dimension,stream,mean_abs_ig\n";
  const std::size_t half = importance.profile.size() / 2;
  for (std::size_t i = 0; i < importance.profile.size(); ++i) {
    csv << i << ',' << (i < half ? "ts" : "fc") << ',' << importance.profile[i] << '\n';
  }
  const std::string text = csv.str();
  detail::write_file(dir / "attribution_profile.csv", std::vector<std::uint8_t>(text.begin(), text.end()));
}

}  // namespace fmm
