#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "fmm/errors.hpp"
#include "fmm/preprocess.hpp"
#include "fmm/rng.hpp"

namespace fmm {
namespace {

RoiTimeSeries series(std::size_t n, std::size_t t, std::vector<float> v) { return RoiTimeSeries(n, t, std::move(v)); }

RoiTimeSeries random_series(std::size_t n, std::size_t t, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<float> v(n * t);
  for (auto& x : v) x = static_cast<float>(rng.normal(0.0, 2.0) + 3.0);
  return series(n, t, std::move(v));
}

void expect_fc_invariants(const ConnectivityMatrix& fc) {
  for (std::size_t i = 0; i < fc.rows; ++i) {
    for (std::size_t j = 0; j < fc.cols; ++j) {
      EXPECT_LE(std::abs(fc(i, j) - fc(j, i)), 1e-6);
      EXPECT_GE(fc(i, j), -1.0);
      EXPECT_LE(fc(i, j), 1.0);
    }
    const bool zero_row = fc(i, i) == 0.0;
    if (!zero_row) EXPECT_EQ(fc(i, i), 1.0);
  }
}

TEST(ParcellateTest, AveragesVoxelsPerRoi) {
  Matrix vox(4, 1, std::vector<double>{1, 3, 10, 20});
  const std::vector<int> labels{1, 1, 2, 2};
  const RoiTimeSeries out = parcellate(vox, labels);
  ASSERT_EQ(out.n_rois(), 2u);
  EXPECT_EQ(out.at(0, 0), 2.0f);
  EXPECT_EQ(out.at(1, 0), 15.0f);
}

TEST(ParcellateTest, IdentityLabelingIsIdentity) {
  Matrix vox(3, 2, std::vector<double>{1, 2, 3, 4, 5, 6});
  const std::vector<int> labels{1, 2, 3};
  EXPECT_EQ(parcellate(vox, labels), series(3, 2, {1, 2, 3, 4, 5, 6}));
}

TEST(ParcellateTest, ReportsEmptyRoisAndBadLabels) {
  Matrix vox(2, 2, 1.0);
  const std::vector<int> gap{1, 3};
  try {
    parcellate(vox, gap);
    FAIL();
  } catch (const ValueError& e) {
    EXPECT_NE(std::string(e.what()).find("empty ROI(s): 2"), std::string::npos);
  }
  const std::vector<int> zero{0, 1};
  EXPECT_THROW(parcellate(vox, zero), ValueError);
  const std::vector<int> big{1, 5};
  EXPECT_THROW(parcellate(vox, big, 2), ValueError);
}

TEST(ParcellateTest, ReadsAtlasLabelFile) {
  const auto path = std::filesystem::temp_directory_path() / "fmm_atlas.txt";
  std::ofstream(path) << "1\n2\n2\n";
  EXPECT_EQ(read_atlas_labels(path), (std::vector<int>{1, 2, 2}));
  std::ofstream(path) << "1\nx\n";
  EXPECT_THROW(read_atlas_labels(path), FormatError);
}

TEST(StandardizeTest, UsesPopulationStd) {
  const RoiTimeSeries out = standardize(series(1, 3, {1, 2, 3}));
  EXPECT_NEAR(out.at(0, 0), -1.2247449, 1e-6);
  EXPECT_EQ(out.at(0, 1), 0.0f);
  EXPECT_NEAR(out.at(0, 2), 1.2247449, 1e-6);
}

TEST(StandardizeTest, ConstantRowBecomesZeros) {
  const RoiTimeSeries out = standardize(series(1, 3, {4, 4, 4}));
  EXPECT_EQ(out, series(1, 3, {0, 0, 0}));
}

TEST(StandardizeTest, IsIdempotent) {
  const RoiTimeSeries once = standardize(random_series(5, 50, 1));
  const RoiTimeSeries twice = standardize(once);
  for (std::size_t i = 0; i < once.values().size(); ++i) EXPECT_NEAR(once.values()[i], twice.values()[i], 1e-6);
}

TEST(FitLengthTest, TruncatesPadsOrKeeps) {
  const RoiTimeSeries x = random_series(2, 230, 2);
  const RoiTimeSeries cut = fit_length(x, 200);
  ASSERT_EQ(cut.n_timepoints(), 200u);
  EXPECT_EQ(cut.at(1, 199), x.at(1, 199));
  const RoiTimeSeries y = random_series(2, 150, 3);
  const RoiTimeSeries padded = fit_length(y, 200);
  ASSERT_EQ(padded.n_timepoints(), 200u);
  EXPECT_EQ(padded.at(1, 149), y.at(1, 149));
  for (std::size_t j = 150; j < 200; ++j) EXPECT_EQ(padded.at(0, j), 0.0f);
  const RoiTimeSeries z = random_series(2, 200, 4);
  EXPECT_EQ(fit_length(z, 200), z);
}

TEST(PatchifyTest, TokenCountAndLayout) {
  const RoiTimeSeries x = random_series(424, 200, 5);
  const TokenSequence tok = patchify(x, 20);
  EXPECT_EQ(tok.token_count(), 4240u);
  EXPECT_EQ(tok.roi_index[13], 1);
  EXPECT_EQ(tok.patch_index[13], 3);
  EXPECT_EQ(tok.token(13)[0], x.at(1, 60));
  EXPECT_EQ(unpatchify(tok), x);
}

TEST(PatchifyTest, SingleTokenEqualsRow) {
  const RoiTimeSeries x = random_series(1, 20, 6);
  const TokenSequence tok = patchify(x, 20);
  ASSERT_EQ(tok.token_count(), 1u);
  for (std::size_t j = 0; j < 20; ++j) EXPECT_EQ(tok.token(0)[j], x.at(0, j));
}

TEST(PatchifyTest, RejectsNonDividingPatch) { EXPECT_THROW(patchify(random_series(2, 30, 7), 20), ShapeError); }

TEST(FcTest, AntiCorrelatedRows) {
  const ConnectivityMatrix fc = compute_fc(series(2, 4, {1, 2, 4, 3, -1, -2, -4, -3}));
  EXPECT_EQ(fc(0, 0), 1.0);
  EXPECT_EQ(fc(1, 1), 1.0);
  EXPECT_NEAR(fc(0, 1), -1.0, 1e-12);
}

TEST(FcTest, IndependentLongRowsAreNearlyUncorrelated) {
  const ConnectivityMatrix fc = compute_fc(random_series(6, 2000, 8));
  for (std::size_t i = 0; i < 6; ++i) {
    for (std::size_t j = 0; j < 6; ++j) {
      if (i != j) EXPECT_LE(std::abs(fc(i, j)), 0.1);
    }
  }
}

TEST(FcTest, ConstantRowIsZero) {
  const ConnectivityMatrix fc = compute_fc(series(2, 3, {5, 5, 5, 1, 2, 3}));
  EXPECT_EQ(fc(0, 0), 0.0);
  EXPECT_EQ(fc(0, 1), 0.0);
  EXPECT_EQ(fc(1, 0), 0.0);
  EXPECT_EQ(fc(1, 1), 1.0);
}

TEST(FcTest, AffineInvariance) {
  const RoiTimeSeries x = random_series(4, 100, 9);
  const ConnectivityMatrix base = compute_fc(x);
  std::vector<float> v = x.values();
  for (std::size_t j = 0; j < 100; ++j) {
    v[j] = 2.5f * v[j] + 7.0f;              // row 0: positive scale
    v[100 + j] = -0.5f * v[100 + j] + 1.0f;  // row 1: negative scale
  }
  const ConnectivityMatrix fc = compute_fc(series(4, 100, v));
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 4; ++j) {
      const double sign = (i == 1) != (j == 1) ? -1.0 : 1.0;
      EXPECT_NEAR(fc(i, j), sign * base(i, j), 1e-6);
    }
  }
}

TEST(FcTest, StandardizeDoesNotChangeFc) {
  const RoiTimeSeries x = random_series(5, 80, 10);
  const ConnectivityMatrix a = compute_fc(x);
  const ConnectivityMatrix b = compute_fc(standardize(x));
  for (std::size_t i = 0; i < a.values.size(); ++i) EXPECT_NEAR(a.values[i], b.values[i], 1e-6);
}

TEST(FcTest, InvariantsOnRandomInputs) {
  for (std::uint64_t s = 0; s < 100; ++s) {
    Rng rng(s);
    const std::size_t n = 2 + rng.below(6);
    const std::size_t t = 2 + rng.below(40);
    RoiTimeSeries x = random_series(n, t, 100 + s);
    if (s % 10 == 0) {
      std::vector<float> v = x.values();
      std::fill_n(v.begin(), t, 1.0f);
      x = series(n, t, v);
    }
    expect_fc_invariants(compute_fc(x));
  }
}

TEST(PrepareTest, ProducesTokensAndFcOfFittedSeries) {
  const RoiTimeSeries x = random_series(3, 230, 11);
  const PreparedSubject p = prepare(x);
  EXPECT_EQ(p.tokens.token_count(), 30u);
  EXPECT_EQ(p.fc.rows, 3u);
  const ConnectivityMatrix direct = compute_fc(fit_length(standardize(x), 200));
  EXPECT_EQ(p.fc, direct);
}

}  // namespace
}  // namespace fmm
