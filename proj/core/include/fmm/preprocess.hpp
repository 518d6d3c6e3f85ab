#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

#include "fmm/data.hpp"
#include "fmm/matrix.hpp"

namespace fmm {

// Pearson correlations between ROI rows, N x N.
using ConnectivityMatrix = Matrix;

/// Patchified time series. Token (r, k) holds series[r, kP:(k+1)P] and sits
/// at position r * n_patches + k.
struct TokenSequence {
  std::size_t n_rois = 0;
  std::size_t n_patches = 0;
  std::size_t patch_size = 0;
  std::vector<float> values;  // token_count x patch_size
  std::vector<int> roi_index;
  std::vector<int> patch_index;

  std::size_t token_count() const { return n_rois * n_patches; }
  std::span<const float> token(std::size_t i) const { return {values.data() + i * patch_size, patch_size}; }
  bool operator==(const TokenSequence&) const = default;
};

// voxel_series is V x t; labels are 1-based ROI ids, one per voxel. With
// n_rois == 0 the ROI count is the largest label.
RoiTimeSeries parcellate(const Matrix& voxel_series, std::span<const int> labels, std::size_t n_rois = 0);
// One integer per line.
std::vector<int> read_atlas_labels(const std::filesystem::path& path);

// Per-ROI z-score with population std; constant rows become zeros.
RoiTimeSeries standardize(const RoiTimeSeries& series);
// Keep the first T columns or right-pad with zeros.
RoiTimeSeries fit_length(const RoiTimeSeries& series, std::size_t target_length = 200);
TokenSequence patchify(const RoiTimeSeries& series, std::size_t patch_size = 20);
RoiTimeSeries unpatchify(const TokenSequence& tokens);

// Constant rows correlate 0 with everything, themselves included.
ConnectivityMatrix compute_fc(const RoiTimeSeries& series);

struct PreprocessConfig {
  std::size_t target_length = 200;
  std::size_t patch_size = 20;
};

struct PreparedSubject {
  TokenSequence tokens;
  ConnectivityMatrix fc;
};

// standardize -> fit_length -> patchify, with FC taken from the fitted series.
PreparedSubject prepare(const RoiTimeSeries& series, const PreprocessConfig& config = {});

}  // namespace fmm
