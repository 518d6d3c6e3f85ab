#include "fmm/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "fmm/errors.hpp"

namespace fmm {

RoiTimeSeries parcellate(const Matrix& voxel_series, std::span<const int> labels, std::size_t n_rois) {
  if (labels.size() != voxel_series.rows) {
    throw ShapeError("atlas has " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(voxel_series.rows) + " voxels");
  }
  if (voxel_series.cols == 0) throw ShapeError("voxel series has no timepoints");
  int max_label = 0;
  for (int l : labels) max_label = std::max(max_label, l);
  const std::size_t n = n_rois ? n_rois : static_cast<std::size_t>(max_label);
  for (std::size_t v = 0; v < labels.size(); ++v) {
    if (labels[v] < 1 || static_cast<std::size_t>(labels[v]) > n) {
      throw ValueError("atlas label " + std::to_string(labels[v]) + " at voxel " + std::to_string(v) +
                       " is outside [1, " + std::to_string(n) + "]");
    }
  }
  const std::size_t t = voxel_series.cols;
  std::vector<double> sums(n * t, 0.0);
  std::vector<std::size_t> counts(n, 0);
  for (std::size_t v = 0; v < labels.size(); ++v) {
    const std::size_t r = static_cast<std::size_t>(labels[v] - 1);
    ++counts[r];
    for (std::size_t j = 0; j < t; ++j) sums[r * t + j] += voxel_series(v, j);
  }
  std::string missing;
  for (std::size_t r = 0; r < n; ++r) {
    if (counts[r] == 0) missing += (missing.empty() ? "" : ", ") + std::to_string(r + 1);
  }
  if (!missing.empty()) throw ValueError("empty ROI(s): " + missing);
  std::vector<float> values(n * t);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < t; ++j) values[r * t + j] = static_cast<float>(sums[r * t + j] / counts[r]);
  }
  return RoiTimeSeries(n, t, std::move(values));
}

std::vector<int> read_atlas_labels(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open atlas labels '" + path.string() + "'");
  std::vector<int> labels;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ss(line);
    int v;
    std::string rest;
    if (!(ss >> v) || (ss >> rest)) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": expected one integer");
    }
    labels.push_back(v);
  }
  return labels;
}

RoiTimeSeries standardize(const RoiTimeSeries& series) {
  const std::size_t n = series.n_rois();
  const std::size_t t = series.n_timepoints();
  std::vector<float> out(n * t, 0.0f);
  for (std::size_t r = 0; r < n; ++r) {
    const auto row = series.row(r);
    double mean = 0.0;
    for (float v : row) mean += v;
    mean /= static_cast<double>(t);
    double var = 0.0;
    for (float v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(t);
    const bool constant = std::all_of(row.begin(), row.end(), [&](float v) { return v == row[0]; });
    if (constant || var <= 0.0) continue;
    const double inv = 1.0 / std::sqrt(var);
    for (std::size_t j = 0; j < t; ++j) out[r * t + j] = static_cast<float>((row[j] - mean) * inv);
  }
  return RoiTimeSeries(n, t, std::move(out));
}

RoiTimeSeries fit_length(const RoiTimeSeries& series, std::size_t target_length) {
  if (target_length == 0) throw ValueError("target length must be >= 1");
  const std::size_t n = series.n_rois();
  const std::size_t t = series.n_timepoints();
  if (t == target_length) return series;
  std::vector<float> out(n * target_length, 0.0f);
  const std::size_t keep = std::min(t, target_length);
  for (std::size_t r = 0; r < n; ++r) {
    std::copy_n(series.row(r).begin(), keep, out.begin() + static_cast<std::ptrdiff_t>(r * target_length));
  }
  return RoiTimeSeries(n, target_length, std::move(out));
}

TokenSequence patchify(const RoiTimeSeries& series, std::size_t patch_size) {
  const std::size_t t = series.n_timepoints();
  if (patch_size == 0 || t % patch_size != 0) {
    throw ShapeError("patch size " + std::to_string(patch_size) + " does not divide length " + std::to_string(t));
  }
  TokenSequence seq;
  seq.n_rois = series.n_rois();
  seq.n_patches = t / patch_size;
  seq.patch_size = patch_size;
  // Row-major ROI x time already lays tokens out in (roi, patch) order.
  seq.values = series.values();
  for (std::size_t r = 0; r < seq.n_rois; ++r) {
    for (std::size_t k = 0; k < seq.n_patches; ++k) {
      seq.roi_index.push_back(static_cast<int>(r));
      seq.patch_index.push_back(static_cast<int>(k));
    }
  }
  return seq;
}

RoiTimeSeries unpatchify(const TokenSequence& tokens) {
  return RoiTimeSeries(tokens.n_rois, tokens.n_patches * tokens.patch_size, tokens.values);
}

ConnectivityMatrix compute_fc(const RoiTimeSeries& series) {
  const std::size_t n = series.n_rois();
  const std::size_t t = series.n_timepoints();
  if (t < 2) throw ValueError("compute_fc needs at least 2 timepoints");
  std::vector<double> centered(n * t);
  std::vector<double> norm(n, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    const auto row = series.row(r);
    const bool constant = std::all_of(row.begin(), row.end(), [&](float v) { return v == row[0]; });
    if (constant) continue;
    double mean = 0.0;
    for (float v : row) mean += v;
    mean /= static_cast<double>(t);
    double ss = 0.0;
    for (std::size_t j = 0; j < t; ++j) {
      centered[r * t + j] = row[j] - mean;
      ss += centered[r * t + j] * centered[r * t + j];
    }
    norm[r] = std::sqrt(ss);
  }
  ConnectivityMatrix fc(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    if (norm[i] == 0.0) continue;
    fc(i, i) = 1.0;
    for (std::size_t k = i + 1; k < n; ++k) {
      if (norm[k] == 0.0) continue;
      double dot = 0.0;
      for (std::size_t j = 0; j < t; ++j) dot += centered[i * t + j] * centered[k * t + j];
      const double r = std::clamp(dot / (norm[i] * norm[k]), -1.0, 1.0);
      fc(i, k) = r;
      fc(k, i) = r;
    }
  }
  return fc;
}

PreparedSubject prepare(const RoiTimeSeries& series, const PreprocessConfig& config) {
  const RoiTimeSeries fitted = fit_length(standardize(series), config.target_length);
  return PreparedSubject{patchify(fitted, config.patch_size), compute_fc(fitted)};
}

}  // namespace fmm
