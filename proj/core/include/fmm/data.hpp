#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fmm/canonical_json.hpp"
#include "fmm/matrix.hpp"

namespace fmm {

/// N x t matrix of per-ROI BOLD signal, stored row-major (ROI x time) in f32.
class RoiTimeSeries {
 public:
  RoiTimeSeries() = default;
  RoiTimeSeries(std::size_t n_rois, std::size_t n_timepoints, std::vector<float> values);

  std::size_t n_rois() const { return n_rois_; }
  std::size_t n_timepoints() const { return n_timepoints_; }
  float at(std::size_t roi, std::size_t time) const { return values_[roi * n_timepoints_ + time]; }
  std::span<const float> row(std::size_t roi) const { return {values_.data() + roi * n_timepoints_, n_timepoints_}; }
  const std::vector<float>& values() const { return values_; }

  bool operator==(const RoiTimeSeries&) const = default;

 private:
  std::size_t n_rois_ = 0;
  std::size_t n_timepoints_ = 0;
  std::vector<float> values_;
};

struct SubjectRecord {
  std::string subject_id;
  RoiTimeSeries series;
  std::optional<int> label;  // 1 = responder; absent for pretraining corpora
  std::string drug;
  std::string cohort;

  bool operator==(const SubjectRecord&) const = default;
};

// Throws ValueError when a record breaks the N >= 2, t >= 2, label in {0,1} contract.
void validate_subject(const SubjectRecord& subject);

struct DrugEffect {
  std::vector<double> direction;  // unit vector of length n_rois
  double strength = 0.0;          // >= 0; added as strength * u u^T before renormalising to unit diagonal
};

struct CohortCell {
  int label = 0;
  std::string drug;
  std::size_t count = 0;
};

/// Everything needed to synthesise a labelled cohort. Each subject's latent
/// covariance interpolates between the class templates with a weight centred
/// on 0.5 +/- mix_separation; its AR(1) coefficient is shifted by
/// +/- ar_class_offset. Both draws carry Gaussian subject jitter.
struct GeneratorProfile {
  std::string name;
  std::string cohort;
  std::size_t n_rois = 32;
  std::size_t n_timepoints = 200;
  Matrix sigma0;  // non-responder template
  Matrix sigma1;  // responder template
  double ar_coefficient = 0.5;
  double noise_std = 0.5;
  double mix_separation = 0.5;
  double mix_jitter = 0.0;
  double ar_class_offset = 0.0;
  double ar_jitter = 0.0;
  std::map<std::string, DrugEffect> drug_effects;
  std::vector<CohortCell> cells;
};

void validate_profile(const GeneratorProfile& profile);
Json profile_to_json(const GeneratorProfile& profile);

// (1 - coupling) I + coupling * [same community], contiguous equal communities.
Matrix community_covariance(std::size_t n_rois, std::size_t n_communities, double coupling);

// Desk-scale cohort shaped like the public duloxetine/placebo cohort: 56 subjects,
// 26 responders, 19 duloxetine and 37 placebo.
GeneratorProfile openneuro_like_profile(std::size_t n_rois = 32, std::size_t n_timepoints = 200);
// 61 lidocaine subjects, 24 responders.
GeneratorProfile inhouse_like_profile(std::size_t n_rois = 32, std::size_t n_timepoints = 200);
// Same cohort shape at full atlas resolution (424 ROIs); not used in tests.
GeneratorProfile fidelity_profile();
std::vector<std::string> profile_names();
GeneratorProfile profile_by_name(const std::string& name);

struct Cohort {
  std::string name;
  std::string fingerprint;
  std::vector<SubjectRecord> subjects;

  std::vector<int> labels() const;
  bool operator==(const Cohort&) const = default;
};

Cohort generate_synthetic_cohort(const GeneratorProfile& profile, std::uint64_t seed);

// Latent correlation of one subject before temporal filtering and noise; exposed for oracles.
Matrix subject_latent_correlation(const GeneratorProfile& profile, int label, const std::string& drug, double mix_weight);

/// Family of covariance templates used for the unlabeled pretraining corpus.
/// Every member is a convex combination of the anchors; the identity and the
/// two class-structured anchors make both downstream templates members.
struct PretrainFamily {
  std::size_t n_rois = 0;
  std::size_t n_timepoints = 0;
  std::vector<Matrix> anchors;
  double ar_min = 0.05;
  double ar_max = 0.9;
  double noise_min = 0.1;
  double noise_max = 0.9;
  std::uint64_t family_seed = 0;
};

PretrainFamily make_pretrain_family(const GeneratorProfile& downstream, std::uint64_t family_seed,
                                    std::size_t random_anchors = 4, double max_coupling = 0.9);
Cohort generate_pretrain_corpus(const PretrainFamily& family, std::size_t n_subjects, std::uint64_t seed);

// Directory layout: manifest.json plus one <subject_id>.bin per subject.
void save_cohort(const Cohort& cohort, const std::filesystem::path& directory);
Cohort load_cohort(const std::filesystem::path& directory, std::vector<std::string>* warnings = nullptr);

}  // namespace fmm
