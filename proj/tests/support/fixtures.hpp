#pragma once

#include "fmm/data.hpp"
#include "fmm/model.hpp"
#include "fmm/preprocess.hpp"
#include "gradcheck.hpp"

namespace fmm::testing {

// M=8, one layer, one head, N=4, two patches per ROI.
inline ModelConfig tiny_config(FusionKind fusion = FusionKind::concat, Modality modality = Modality::both) {
  ModelConfig c;
  c.ts.layers = 1;
  c.ts.heads = 1;
  c.ts.model_dim = 8;
  c.ts.max_rois = 4;
  c.ts.max_patches = 2;
  c.ts.max_tokens = 8;
  c.fc.widths = {4, 4, 4, 4};
  c.fc.groups = 1;  // two-value groups at 1x1 resolution make GroupNorm ill-conditioned for finite differences
  c.fc.n_rois = 4;
  c.fc.output_dim = 8;
  c.fc.stem_kernel = 3;
  c.fc.stem_stride = 1;
  c.fusion = fusion;
  c.modality = modality;
  c.dtype = DType::f64;
  return c;
}

inline PreparedSubject tiny_subject(std::uint64_t seed) {
  Rng rng(seed);
  std::vector<float> v(4 * 40);
  for (auto& x : v) x = static_cast<float>(rng.normal());
  PreprocessConfig pc;
  pc.target_length = 40;
  return prepare(RoiTimeSeries(4, 40, std::move(v)), pc);
}

// Unlabelled 4 x 40 AR(1) series with a shared component, sized for tiny_config().
inline Cohort tiny_corpus(std::size_t n, std::uint64_t seed) {
  Cohort c;
  c.name = "tiny";
  c.fingerprint = "tiny-" + std::to_string(seed);
  Rng rng(seed);
  for (std::size_t s = 0; s < n; ++s) {
    std::vector<float> v(4 * 40);
    double shared = 0.0;
    std::vector<double> own(4, 0.0);
    for (std::size_t t = 0; t < 40; ++t) {
      shared = 0.8 * shared + 0.6 * rng.normal();
      for (std::size_t r = 0; r < 4; ++r) {
        own[r] = 0.8 * own[r] + 0.6 * rng.normal();
        v[r * 40 + t] = static_cast<float>(shared + 0.5 * own[r]);
      }
    }
    SubjectRecord rec;
    rec.subject_id = "pre-" + std::to_string(s);
    rec.series = RoiTimeSeries(4, 40, std::move(v));
    rec.cohort = "tiny";
    c.subjects.push_back(std::move(rec));
  }
  return c;
}

// Central differences against backward() on every parameter of a model whose
// weights are all randomised (so zero-initialised scales do not hide paths).
inline GradCheckResult model_gradient_check(const ModelConfig& config, std::uint64_t seed) {
  const PreparedSubject subject = tiny_subject(seed);
  std::map<std::string, Tensor> inputs;
  std::uint64_t k = 0;
  for (const auto& [name, shape] : parameter_shapes(config)) {
    inputs.emplace(name, random_tensor(shape, derive_seed(seed, ++k), -0.5, 0.5));
  }
  return gradient_check(inputs, [&](Graph& g, const std::map<std::string, Var>& vars) {
    Params p(g, vars, DType::f64);
    Var rt, rc;
    if (config.modality != Modality::fc) rt = ts_encode(p, config.ts, subject.tokens);
    if (config.modality != Modality::ts) rc = fc_encode(p, config.fc, subject.fc);
    return predict_head(p, combine_streams(p, config, rt, rc));
  });
}

}  // namespace fmm::testing
