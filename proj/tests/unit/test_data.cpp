#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "fmm/data.hpp"
#include "fmm/errors.hpp"
#include "fmm/preprocess.hpp"

namespace fmm {
namespace {

namespace fs = std::filesystem;

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("fmm_test_" + name);
  fs::remove_all(dir);
  return dir;
}

// Textbook one-pass Pearson correlation, kept separate from compute_fc.
double pearson(std::span<const float> a, std::span<const float> b) {
  const double n = static_cast<double>(a.size());
  double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sa += a[i];
    sb += b[i];
    saa += double(a[i]) * a[i];
    sbb += double(b[i]) * b[i];
    sab += double(a[i]) * b[i];
  }
  return (n * sab - sa * sb) / std::sqrt((n * saa - sa * sa) * (n * sbb - sb * sb));
}

GeneratorProfile convergence_profile() {
  GeneratorProfile p = openneuro_like_profile(4, 2000);
  p.ar_coefficient = 0.0;
  p.noise_std = 0.0;
  p.mix_separation = 0.5;  // responders draw exactly sigma1, non-responders sigma0
  p.mix_jitter = 0.0;
  p.ar_class_offset = 0.0;
  p.ar_jitter = 0.0;
  return p;
}

TEST(GenerateTest, LabelAndDrugCountsMatchCohortShape) {
  const Cohort c = generate_synthetic_cohort(openneuro_like_profile(), 7);
  ASSERT_EQ(c.subjects.size(), 56u);
  const auto labels = c.labels();
  EXPECT_EQ(std::count(labels.begin(), labels.end(), 1), 26);
  EXPECT_EQ(std::count(labels.begin(), labels.end(), 0), 30);
  const auto dulox = std::count_if(c.subjects.begin(), c.subjects.end(), [](auto& s) { return s.drug == "duloxetine"; });
  EXPECT_EQ(dulox, 19);
  EXPECT_EQ(c.subjects.size() - dulox, 37u);
  EXPECT_EQ(c.subjects.front().subject_id, "sub-001");
}

TEST(GenerateTest, SameSeedIsBitwiseIdentical) {
  const auto p = openneuro_like_profile();
  EXPECT_EQ(generate_synthetic_cohort(p, 11), generate_synthetic_cohort(p, 11));
}

TEST(GenerateTest, FingerprintTracksParametersAndSeed) {
  auto p = openneuro_like_profile();
  const std::string base = generate_synthetic_cohort(p, 1).fingerprint;
  EXPECT_EQ(base, generate_synthetic_cohort(p, 1).fingerprint);
  EXPECT_NE(base, generate_synthetic_cohort(p, 2).fingerprint);
  p.noise_std = 0.51;
  EXPECT_NE(base, generate_synthetic_cohort(p, 1).fingerprint);
  p = openneuro_like_profile();
  p.sigma1(0, 1) = p.sigma1(1, 0) = 0.4;
  EXPECT_NE(base, generate_synthetic_cohort(p, 1).fingerprint);
}

TEST(GenerateTest, EmpiricalCorrelationConvergesAtLongLength) {
  const auto p = convergence_profile();
  const Cohort c = generate_synthetic_cohort(p, 3);
  // Sampling error per entry is ~1/sqrt(t); the mean over subjects is the
  // stable statistic, and the first subject is checked on its own.
  std::vector<double> dist;
  for (const auto& s : c.subjects) {
    const Matrix target = subject_latent_correlation(p, *s.label, s.drug, *s.label == 1 ? 1.0 : 0.0);
    double frob = 0.0;
    for (std::size_t i = 0; i < p.n_rois; ++i) {
      for (std::size_t j = 0; j < p.n_rois; ++j) {
        const double r = i == j ? 1.0 : pearson(s.series.row(i), s.series.row(j));
        frob += (r - target(i, j)) * (r - target(i, j));
      }
    }
    dist.push_back(std::sqrt(frob));
  }
  EXPECT_LE(dist.front(), 0.1);
  EXPECT_LE(std::accumulate(dist.begin(), dist.end(), 0.0) / dist.size(), 0.1);
}

TEST(GenerateTest, RejectsIndefiniteTemplateWithEigenvalue) {
  auto p = openneuro_like_profile(4, 20);
  p.sigma0 = Matrix(4, 4, 0.0);
  for (std::size_t i = 0; i < 4; ++i) p.sigma0(i, i) = 1.0;
  p.sigma0(0, 1) = p.sigma0(1, 0) = 1.5;
  try {
    generate_synthetic_cohort(p, 1);
    FAIL() << "expected ValueError";
  } catch (const ValueError& e) {
    EXPECT_NE(std::string(e.what()).find("smallest eigenvalue -0.5"), std::string::npos) << e.what();
  }
}

TEST(GenerateTest, TrueTemplatesAreFisherSeparable) {
  // Subject-level true covariances projected on the Fisher direction of the
  // vectorized templates split perfectly by label.
  const auto p = openneuro_like_profile();
  std::vector<double> diff(p.sigma0.values.size());
  for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = p.sigma1.values[i] - p.sigma0.values[i];
  auto score = [&](const Matrix& m) { return std::inner_product(m.values.begin(), m.values.end(), diff.begin(), 0.0); };
  EXPECT_GT(score(p.sigma1), score(p.sigma0));
  const double mid = 0.5 * (score(p.sigma0) + score(p.sigma1));
  EXPECT_LT(score(p.sigma0), mid);
  EXPECT_GT(score(p.sigma1), mid);
}

double fc_fisher_ratio(double noise) {
  auto p = openneuro_like_profile();
  p.noise_std = noise;
  const Cohort c = generate_synthetic_cohort(p, 5);
  std::vector<double> diff(p.sigma0.values.size());
  for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = p.sigma1.values[i] - p.sigma0.values[i];
  std::vector<double> s[2];
  for (const auto& subj : c.subjects) {
    const Matrix fc = compute_fc(subj.series);
    s[*subj.label].push_back(std::inner_product(fc.values.begin(), fc.values.end(), diff.begin(), 0.0));
  }
  auto mean = [](const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); };
  auto var = [&](const std::vector<double>& v) {
    const double m = mean(v);
    double acc = 0.0;
    for (double x : v) acc += (x - m) * (x - m);
    return acc / v.size();
  };
  const double gap = mean(s[1]) - mean(s[0]);
  return gap * gap / (var(s[0]) + var(s[1]));
}

TEST(GenerateTest, FcSeparabilityDegradesWithNoise) {
  const double low = fc_fisher_ratio(0.1);
  const double mid = fc_fisher_ratio(1.0);
  const double high = fc_fisher_ratio(3.0);
  EXPECT_GT(low, mid);
  EXPECT_GT(mid, high);
}

// Min ||sum_k w_k A_k - target||_F over the simplex by projected gradient.
double simplex_residual(const std::vector<Matrix>& anchors, const Matrix& target) {
  const std::size_t k = anchors.size();
  std::vector<double> gram(k * k), rhs(k);
  for (std::size_t a = 0; a < k; ++a) {
    rhs[a] = std::inner_product(anchors[a].values.begin(), anchors[a].values.end(), target.values.begin(), 0.0);
    for (std::size_t b = 0; b < k; ++b) {
      gram[a * k + b] =
          std::inner_product(anchors[a].values.begin(), anchors[a].values.end(), anchors[b].values.begin(), 0.0);
    }
  }
  double lipschitz = 0.0;
  for (double g : gram) lipschitz += std::abs(g);
  std::vector<double> w(k, 1.0 / k);
  for (int it = 0; it < 200000; ++it) {
    std::vector<double> y(k);
    for (std::size_t a = 0; a < k; ++a) {
      double g = -rhs[a];
      for (std::size_t b = 0; b < k; ++b) g += gram[a * k + b] * w[b];
      y[a] = w[a] - g / lipschitz;
    }
    // Euclidean projection onto the simplex.
    std::vector<double> u = y;
    std::sort(u.rbegin(), u.rend());
    double css = 0.0, theta = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      css += u[j];
      const double t = (css - 1.0) / static_cast<double>(j + 1);
      if (u[j] - t > 0) theta = t;
    }
    for (std::size_t a = 0; a < k; ++a) w[a] = std::max(0.0, y[a] - theta);
  }
  double res = 0.0;
  for (std::size_t i = 0; i < target.values.size(); ++i) {
    double v = -target.values[i];
    for (std::size_t a = 0; a < k; ++a) v += w[a] * anchors[a].values[i];
    res += v * v;
  }
  return std::sqrt(res);
}

TEST(PretrainCorpusTest, TemplatesAreConvexCombinationsOfAnchors) {
  const auto p = openneuro_like_profile();
  const PretrainFamily family = make_pretrain_family(p, 99);
  EXPECT_GE(family.anchors.size(), 3u);
  EXPECT_LT(simplex_residual(family.anchors, p.sigma0), 1e-6);
  EXPECT_LT(simplex_residual(family.anchors, p.sigma1), 1e-6);
}

TEST(PretrainCorpusTest, CountsLabelsAndFingerprints) {
  const PretrainFamily family = make_pretrain_family(openneuro_like_profile(), 99);
  const Cohort a = generate_pretrain_corpus(family, 200, 1);
  ASSERT_EQ(a.subjects.size(), 200u);
  for (const auto& s : a.subjects) EXPECT_FALSE(s.label.has_value());
  EXPECT_NE(a.fingerprint, generate_pretrain_corpus(family, 200, 2).fingerprint);
  EXPECT_THROW(generate_pretrain_corpus(family, 0, 1), ValueError);
}

TEST(CohortIoTest, RoundTripIsExact) {
  const fs::path dir = scratch_dir("roundtrip");
  Cohort c = generate_synthetic_cohort(openneuro_like_profile(8, 40), 4);
  c.subjects.push_back(generate_pretrain_corpus(make_pretrain_family(openneuro_like_profile(8, 40), 1), 1, 1).subjects[0]);
  save_cohort(c, dir);
  EXPECT_EQ(load_cohort(dir), c);
}

TEST(CohortIoTest, CorruptedPayloadNamesFile) {
  const fs::path dir = scratch_dir("corrupt");
  save_cohort(generate_synthetic_cohort(openneuro_like_profile(4, 20), 4), dir);
  {
    std::fstream f(dir / "sub-003.bin", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(20);
    f.put('\x7f');
  }
  try {
    load_cohort(dir);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("sub-003.bin"), std::string::npos) << e.what();
  }
}

TEST(CohortIoTest, MissingManifestIsAnIoError) {
  const fs::path dir = scratch_dir("missing");
  fs::create_directories(dir);
  EXPECT_THROW(load_cohort(dir), IoError);
}

TEST(CohortIoTest, UnknownKeysWarn) {
  const fs::path dir = scratch_dir("unknown");
  const Cohort c = generate_synthetic_cohort(openneuro_like_profile(4, 20), 4);
  save_cohort(c, dir);
  Json m = Json::parse(std::ifstream(dir / "manifest.json"));
  m["acquired_on"] = "scanner-b";
  m["subjects"][0]["site"] = 3;
  std::ofstream(dir / "manifest.json") << m.dump();
  std::vector<std::string> warnings;
  EXPECT_EQ(load_cohort(dir, &warnings), c);
  ASSERT_EQ(warnings.size(), 2u);
  EXPECT_NE(warnings[0].find("acquired_on"), std::string::npos);
  EXPECT_NE(warnings[1].find("site"), std::string::npos);
}

TEST(CohortIoTest, ShapeMismatchIsRejected) {
  const fs::path dir = scratch_dir("shape");
  save_cohort(generate_synthetic_cohort(openneuro_like_profile(4, 20), 4), dir);
  Json m = Json::parse(std::ifstream(dir / "manifest.json"));
  m["subjects"][1]["n_timepoints"] = 21;
  std::ofstream(dir / "manifest.json") << m.dump();
  EXPECT_THROW(load_cohort(dir), FormatError);
}

}  // namespace
}  // namespace fmm
