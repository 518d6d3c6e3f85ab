#include "fmm/data.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <set>

#include "binary_io.hpp"
#include "fmm/rng.hpp"

namespace fmm {

namespace {

constexpr std::uint32_t kSeriesVersion = 1;
constexpr int kManifestVersion = 1;

Eigen::MatrixXd to_eigen(const Matrix& m) {
  Eigen::MatrixXd out(m.rows, m.cols);
  for (std::size_t r = 0; r < m.rows; ++r) {
    for (std::size_t c = 0; c < m.cols; ++c) out(r, c) = m(r, c);
  }
  return out;
}

double smallest_eigenvalue(const Matrix& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(to_eigen(m), Eigen::EigenvaluesOnly);
  return solver.eigenvalues()(0);
}

void require_spd(const Matrix& m, const std::string& what) {
  if (m.rows != m.cols) throw ValueError(what + " is not square");
  for (std::size_t r = 0; r < m.rows; ++r) {
    for (std::size_t c = r + 1; c < m.cols; ++c) {
      if (std::abs(m(r, c) - m(c, r)) > 1e-12) throw ValueError(what + " is not symmetric");
    }
  }
  const double lambda = smallest_eigenvalue(m);
  if (!(lambda > 0.0)) {
    char buf[128];
    std::snprintf(buf, sizeof(buf), " is not positive-definite (smallest eigenvalue %.6g)", lambda);
    throw ValueError(what + buf);
  }
}

Matrix to_correlation(const Matrix& cov) {
  Matrix out = cov;
  for (std::size_t r = 0; r < cov.rows; ++r) {
    for (std::size_t c = 0; c < cov.cols; ++c) out(r, c) = cov(r, c) / std::sqrt(cov(r, r) * cov(c, c));
  }
  return out;
}

Json matrix_json(const Matrix& m) { return Json{{"rows", m.rows}, {"cols", m.cols}, {"values", m.values}}; }

// Stationary AR(1) with unit marginal variance per ROI, driven by innovations
// with the given correlation, plus white observation noise.
RoiTimeSeries simulate_series(const Matrix& correlation, double ar, double noise_std, std::size_t n_timepoints,
                              Rng& rng) {
  const std::size_t n = correlation.rows;
  Eigen::LLT<Eigen::MatrixXd> llt(to_eigen(correlation));
  if (llt.info() != Eigen::Success) {
    char buf[128];
    std::snprintf(buf, sizeof(buf), "subject covariance is not positive-definite (smallest eigenvalue %.6g)",
                  smallest_eigenvalue(correlation));
    throw ValueError(buf);
  }
  const Eigen::MatrixXd lower = llt.matrixL();
  const double innovation = std::sqrt(1.0 - ar * ar);
  Eigen::VectorXd state(static_cast<Eigen::Index>(n));
  Eigen::VectorXd z(static_cast<Eigen::Index>(n));
  std::vector<float> values(n * n_timepoints);
  for (std::size_t t = 0; t < n_timepoints; ++t) {
    for (std::size_t i = 0; i < n; ++i) z(static_cast<Eigen::Index>(i)) = rng.normal();
    const Eigen::VectorXd latent = lower * z;
    if (t == 0) state = latent;
    else state = ar * state + innovation * latent;
    for (std::size_t i = 0; i < n; ++i) {
      const double obs = state(static_cast<Eigen::Index>(i)) + noise_std * rng.normal();
      values[i * n_timepoints + t] = static_cast<float>(obs);
    }
  }
  return RoiTimeSeries(n, n_timepoints, std::move(values));
}

std::vector<double> cosine_direction(std::size_t n, double frequency, double phase) {
  std::vector<double> u(n);
  double norm = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    u[i] = std::cos(2.0 * std::numbers::pi * frequency * (static_cast<double>(i) + 0.5) / static_cast<double>(n) + phase);
    norm += u[i] * u[i];
  }
  for (auto& v : u) v /= std::sqrt(norm);
  return u;
}

std::string subject_id(const std::string& prefix, std::size_t index, std::size_t total) {
  const int width = std::max(3, static_cast<int>(std::to_string(total).size()));
  std::string digits = std::to_string(index + 1);
  if (static_cast<int>(digits.size()) < width) digits.insert(0, static_cast<std::size_t>(width) - digits.size(), '0');
  return prefix + "-" + digits;
}

std::string cohort_fingerprint(const Json& generator, std::uint64_t seed) {
  return hex64(fnv1a64(canonical_dump(Json{{"generator", generator}, {"seed", seed}})));
}

}  // namespace

RoiTimeSeries::RoiTimeSeries(std::size_t n_rois, std::size_t n_timepoints, std::vector<float> values)
    : n_rois_(n_rois), n_timepoints_(n_timepoints), values_(std::move(values)) {
  if (n_rois == 0 || n_timepoints == 0) throw ShapeError("time series needs at least one ROI and one timepoint");
  if (values_.size() != n_rois * n_timepoints) {
    throw ShapeError("time series payload has " + std::to_string(values_.size()) + " values, expected " +
                     std::to_string(n_rois * n_timepoints));
  }
  for (float v : values_) {
    if (!std::isfinite(v)) throw ValueError("time series contains a non-finite value");
  }
}

void validate_subject(const SubjectRecord& subject) {
  if (subject.series.n_rois() < 2 || subject.series.n_timepoints() < 2) {
    throw ValueError("subject '" + subject.subject_id + "' needs at least 2 ROIs and 2 timepoints");
  }
  if (subject.label && *subject.label != 0 && *subject.label != 1) {
    throw ValueError("subject '" + subject.subject_id + "' has label " + std::to_string(*subject.label) +
                     ", expected 0 or 1");
  }
}

Matrix community_covariance(std::size_t n_rois, std::size_t n_communities, double coupling) {
  if (n_communities == 0 || n_communities > n_rois) throw ValueError("community count must be in [1, n_rois]");
  Matrix m(n_rois, n_rois);
  for (std::size_t r = 0; r < n_rois; ++r) {
    for (std::size_t c = 0; c < n_rois; ++c) {
      const bool same = (r * n_communities / n_rois) == (c * n_communities / n_rois);
      m(r, c) = r == c ? 1.0 : (same ? coupling : 0.0);
    }
  }
  return m;
}

void validate_profile(const GeneratorProfile& p) {
  if (p.n_rois < 2 || p.n_timepoints < 2) throw ValueError("profile needs n_rois >= 2 and n_timepoints >= 2");
  if (p.sigma0.rows != p.n_rois || p.sigma1.rows != p.n_rois) throw ValueError("class templates must be n_rois x n_rois");
  require_spd(p.sigma0, "sigma0");
  require_spd(p.sigma1, "sigma1");
  if (!(p.ar_coefficient >= 0.0 && p.ar_coefficient < 1.0)) throw ValueError("ar_coefficient must lie in [0, 1)");
  if (!(p.noise_std >= 0.0)) throw ValueError("noise_std must be non-negative");
  if (p.mix_jitter < 0.0 || p.ar_jitter < 0.0) throw ValueError("jitter must be non-negative");
  if (p.cells.empty()) throw ValueError("profile has no cohort cells");
  for (const auto& cell : p.cells) {
    if (cell.count < 1) throw ValueError("cohort cell sizes must be >= 1");
    if (cell.label != 0 && cell.label != 1) throw ValueError("cohort cell label must be 0 or 1");
    if (!cell.drug.empty() && !p.drug_effects.count(cell.drug)) {
      throw ValueError("cohort cell references drug '" + cell.drug + "' without a drug effect");
    }
  }
  for (const auto& [drug, effect] : p.drug_effects) {
    if (effect.direction.size() != p.n_rois) throw ValueError("drug '" + drug + "' direction has wrong length");
    if (effect.strength < 0.0) throw ValueError("drug '" + drug + "' strength must be non-negative");
  }
}

Json profile_to_json(const GeneratorProfile& p) {
  Json drugs = Json::object();
  for (const auto& [drug, effect] : p.drug_effects) {
    drugs[drug] = Json{{"direction", effect.direction}, {"strength", effect.strength}};
  }
  Json cells = Json::array();
  for (const auto& c : p.cells) cells.push_back(Json{{"label", c.label}, {"drug", c.drug}, {"count", c.count}});
  return Json{{"name", p.name},
              {"cohort", p.cohort},
              {"n_rois", p.n_rois},
              {"n_timepoints", p.n_timepoints},
              {"sigma0", matrix_json(p.sigma0)},
              {"sigma1", matrix_json(p.sigma1)},
              {"ar_coefficient", p.ar_coefficient},
              {"noise_std", p.noise_std},
              {"mix_separation", p.mix_separation},
              {"mix_jitter", p.mix_jitter},
              {"ar_class_offset", p.ar_class_offset},
              {"ar_jitter", p.ar_jitter},
              {"drug_effects", drugs},
              {"cells", cells}};
}

GeneratorProfile openneuro_like_profile(std::size_t n_rois, std::size_t n_timepoints) {
  GeneratorProfile p;
  p.name = "openneuro-like";
  p.cohort = "openneuro-like";
  p.n_rois = n_rois;
  p.n_timepoints = n_timepoints;
  p.sigma0 = community_covariance(n_rois, 2, 0.5);
  p.sigma1 = community_covariance(n_rois, 4, 0.5);
  p.ar_coefficient = 0.5;
  p.noise_std = 0.5;
  p.mix_separation = 0.15;
  p.mix_jitter = 0.15;
  p.ar_class_offset = 0.1;
  p.ar_jitter = 0.1;
  p.drug_effects["duloxetine"] = DrugEffect{cosine_direction(n_rois, 1.0, 0.3), 0.3};
  p.drug_effects["placebo"] = DrugEffect{cosine_direction(n_rois, 2.0, 1.1), 0.3};
  p.cells = {{1, "duloxetine", 9}, {0, "duloxetine", 10}, {1, "placebo", 17}, {0, "placebo", 20}};
  return p;
}

GeneratorProfile inhouse_like_profile(std::size_t n_rois, std::size_t n_timepoints) {
  GeneratorProfile p = openneuro_like_profile(n_rois, n_timepoints);
  p.name = "inhouse-like";
  p.cohort = "inhouse-like";
  p.drug_effects.clear();
  p.drug_effects["lidocaine"] = DrugEffect{cosine_direction(n_rois, 3.0, 0.7), 0.3};
  p.cells = {{1, "lidocaine", 24}, {0, "lidocaine", 37}};
  return p;
}

GeneratorProfile fidelity_profile() {
  GeneratorProfile p = openneuro_like_profile(424, 200);
  p.name = "fidelity";
  return p;
}

std::vector<std::string> profile_names() { return {"openneuro-like", "inhouse-like", "fidelity"}; }

GeneratorProfile profile_by_name(const std::string& name) {
  if (name == "openneuro-like") return openneuro_like_profile();
  if (name == "inhouse-like") return inhouse_like_profile();
  if (name == "fidelity") return fidelity_profile();
  throw ValueError("unknown generator profile '" + name + "'");
}

std::vector<int> Cohort::labels() const {
  std::vector<int> out;
  out.reserve(subjects.size());
  for (const auto& s : subjects) {
    if (!s.label) throw ValueError("subject '" + s.subject_id + "' has no label");
    out.push_back(*s.label);
  }
  return out;
}

Matrix subject_latent_correlation(const GeneratorProfile& p, int label, const std::string& drug, double mix_weight) {
  (void)label;
  Matrix cov(p.n_rois, p.n_rois);
  for (std::size_t i = 0; i < cov.values.size(); ++i) {
    cov.values[i] = (1.0 - mix_weight) * p.sigma0.values[i] + mix_weight * p.sigma1.values[i];
  }
  if (auto it = p.drug_effects.find(drug); it != p.drug_effects.end()) {
    const auto& u = it->second.direction;
    for (std::size_t r = 0; r < p.n_rois; ++r) {
      for (std::size_t c = 0; c < p.n_rois; ++c) cov(r, c) += it->second.strength * u[r] * u[c];
    }
  }
  return to_correlation(cov);
}

Cohort generate_synthetic_cohort(const GeneratorProfile& profile, std::uint64_t seed) {
  validate_profile(profile);
  Cohort cohort;
  cohort.name = profile.name;
  cohort.fingerprint = cohort_fingerprint(profile_to_json(profile), seed);

  std::size_t total = 0;
  for (const auto& cell : profile.cells) total += cell.count;
  std::size_t index = 0;
  for (const auto& cell : profile.cells) {
    for (std::size_t k = 0; k < cell.count; ++k, ++index) {
      Rng rng(derive_seed(seed, index));
      const double sign = cell.label == 1 ? 1.0 : -1.0;
      const double mix =
          std::clamp(0.5 + sign * profile.mix_separation + profile.mix_jitter * rng.normal(), 0.0, 1.0);
      const double ar = std::clamp(profile.ar_coefficient + sign * profile.ar_class_offset + profile.ar_jitter * rng.normal(),
                                   0.0, 0.95);
      const Matrix corr = subject_latent_correlation(profile, cell.label, cell.drug, mix);
      SubjectRecord subject;
      subject.subject_id = subject_id("sub", index, total);
      subject.series = simulate_series(corr, ar, profile.noise_std, profile.n_timepoints, rng);
      subject.label = cell.label;
      subject.drug = cell.drug;
      subject.cohort = profile.cohort;
      cohort.subjects.push_back(std::move(subject));
    }
  }
  return cohort;
}

PretrainFamily make_pretrain_family(const GeneratorProfile& downstream, std::uint64_t family_seed,
                                    std::size_t random_anchors, double max_coupling) {
  validate_profile(downstream);
  const std::size_t n = downstream.n_rois;
  PretrainFamily family;
  family.n_rois = n;
  family.n_timepoints = downstream.n_timepoints;
  family.family_seed = family_seed;
  family.anchors.push_back(Matrix::identity(n));
  // Scale the class templates' off-diagonal structure out to max_coupling so
  // each template sits on the segment between the identity and its anchor.
  for (const Matrix* tpl : {&downstream.sigma0, &downstream.sigma1}) {
    double peak = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < n; ++c) {
        if (r != c) peak = std::max(peak, std::abs((*tpl)(r, c)));
      }
    }
    Matrix anchor = *tpl;
    const double stretch = peak > 0.0 ? std::max(1.0, max_coupling / peak) : 1.0;
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < n; ++c) {
        if (r != c) anchor(r, c) *= stretch;
      }
    }
    require_spd(anchor, "pretraining anchor");
    family.anchors.push_back(std::move(anchor));
  }
  Rng rng(family_seed);
  for (std::size_t a = 0; a < random_anchors; ++a) {
    const std::size_t communities = 2 + rng.below(5);
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    rng.shuffle(std::span<std::size_t>(order));
    std::vector<std::size_t> group(n);
    for (std::size_t i = 0; i < n; ++i) group[order[i]] = i * communities / n;
    Matrix anchor(n, n);
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < n; ++c) anchor(r, c) = r == c ? 1.0 : (group[r] == group[c] ? max_coupling : 0.0);
    }
    family.anchors.push_back(std::move(anchor));
  }
  return family;
}

Cohort generate_pretrain_corpus(const PretrainFamily& family, std::size_t n_subjects, std::uint64_t seed) {
  if (n_subjects < 1) throw ValueError("pretraining corpus needs at least one subject");
  if (family.anchors.empty()) throw ValueError("pretraining family has no anchors");
  Cohort cohort;
  cohort.name = "pretrain-corpus";
  Json generator{{"family_seed", family.family_seed},
                 {"anchors", family.anchors.size()},
                 {"n_rois", family.n_rois},
                 {"n_timepoints", family.n_timepoints},
                 {"ar", {family.ar_min, family.ar_max}},
                 {"noise", {family.noise_min, family.noise_max}},
                 {"n_subjects", n_subjects}};
  cohort.fingerprint = cohort_fingerprint(generator, seed);
  for (std::size_t index = 0; index < n_subjects; ++index) {
    Rng rng(derive_seed(seed, index));
    std::vector<double> weights(family.anchors.size());
    double total = 0.0;
    for (auto& w : weights) {
      double u = rng.uniform();
      while (u <= 0.0) u = rng.uniform();
      w = -std::log(u);
      total += w;
    }
    Matrix corr(family.n_rois, family.n_rois);
    for (std::size_t k = 0; k < weights.size(); ++k) {
      for (std::size_t i = 0; i < corr.values.size(); ++i) corr.values[i] += weights[k] / total * family.anchors[k].values[i];
    }
    const double ar = rng.uniform(family.ar_min, family.ar_max);
    const double noise = rng.uniform(family.noise_min, family.noise_max);
    SubjectRecord subject;
    subject.subject_id = subject_id("pre", index, n_subjects);
    subject.series = simulate_series(corr, ar, noise, family.n_timepoints, rng);
    subject.cohort = "pretrain";
    cohort.subjects.push_back(std::move(subject));
  }
  return cohort;
}

void save_cohort(const Cohort& cohort, const std::filesystem::path& directory) {
  std::error_code ec;
  std::filesystem::create_directories(directory, ec);
  if (ec) throw IoError("cannot create '" + directory.string() + "': " + ec.message());

  std::set<std::string> seen;
  Json subjects = Json::array();
  for (const auto& s : cohort.subjects) {
    if (!seen.insert(s.subject_id).second) throw ValueError("duplicate subject id '" + s.subject_id + "'");
    detail::ByteWriter w;
    w.raw("FMTS");
    w.u32(kSeriesVersion);
    w.u32(static_cast<std::uint32_t>(s.series.n_rois()));
    w.u32(static_cast<std::uint32_t>(s.series.n_timepoints()));
    for (float v : s.series.values()) w.f32(v);
    const std::string file = s.subject_id + ".bin";
    detail::write_file(directory / file, w.bytes());
    subjects.push_back(Json{{"id", s.subject_id},
                            {"label", s.label ? Json(*s.label) : Json(nullptr)},
                            {"drug", s.drug},
                            {"cohort", s.cohort},
                            {"n_rois", s.series.n_rois()},
                            {"n_timepoints", s.series.n_timepoints()},
                            {"file", file},
                            {"crc32", detail::crc32_of(w.bytes().data(), w.bytes().size())}});
  }
  Json manifest{{"format", "fmm-cohort"},
                {"version", kManifestVersion},
                {"name", cohort.name},
                {"fingerprint", cohort.fingerprint},
                {"dtype", "f32"},
                {"subjects", subjects}};
  detail::write_text(directory / "manifest.json", canonical_dump_pretty(manifest));
}

Cohort load_cohort(const std::filesystem::path& directory, std::vector<std::string>* warnings) {
  const auto manifest_path = directory / "manifest.json";
  if (!std::filesystem::exists(manifest_path)) throw IoError("missing manifest: '" + manifest_path.string() + "'");
  Json manifest;
  try {
    manifest = Json::parse(detail::read_text(manifest_path));
  } catch (const Json::parse_error& e) {
    throw FormatError("malformed manifest '" + manifest_path.string() + "': " + e.what());
  }
  auto warn = [&](const std::string& msg) {
    if (warnings) warnings->push_back(msg);
  };
  static const std::set<std::string> top_keys{"format", "version", "name", "fingerprint", "dtype", "subjects"};
  static const std::set<std::string> subject_keys{"id", "label", "drug", "cohort", "n_rois", "n_timepoints", "file", "crc32"};
  for (auto it = manifest.begin(); it != manifest.end(); ++it) {
    if (!top_keys.count(it.key())) warn("manifest: ignoring unknown key '" + it.key() + "'");
  }
  try {
    if (manifest.value("dtype", std::string("f32")) != "f32") throw FormatError("manifest: unsupported dtype");
    Cohort cohort;
    cohort.name = manifest.value("name", std::string());
    cohort.fingerprint = manifest.value("fingerprint", std::string());
    std::set<std::string> seen;
    for (const auto& entry : manifest.at("subjects")) {
      for (auto it = entry.begin(); it != entry.end(); ++it) {
        if (!subject_keys.count(it.key())) warn("manifest: ignoring unknown subject key '" + it.key() + "'");
      }
      const std::string file = entry.at("file").get<std::string>();
      const auto bytes = detail::read_file(directory / file);
      const std::uint32_t expected_crc = entry.at("crc32").get<std::uint32_t>();
      if (detail::crc32_of(bytes.data(), bytes.size()) != expected_crc) {
        throw FormatError("checksum mismatch in '" + file + "'");
      }
      detail::ByteReader r(bytes, file);
      if (r.raw(4) != "FMTS") throw FormatError("bad magic in '" + file + "'");
      if (r.u32() != kSeriesVersion) throw FormatError("unsupported series version in '" + file + "'");
      const std::size_t n = r.u32();
      const std::size_t t = r.u32();
      if (n != entry.at("n_rois").get<std::size_t>() || t != entry.at("n_timepoints").get<std::size_t>()) {
        throw FormatError("shape mismatch between manifest and payload in '" + file + "'");
      }
      if (r.remaining() != n * t * 4) throw FormatError("payload length mismatch in '" + file + "'");
      std::vector<float> values(n * t);
      for (auto& v : values) v = r.f32();
      SubjectRecord s;
      s.subject_id = entry.at("id").get<std::string>();
      if (!seen.insert(s.subject_id).second) throw FormatError("duplicate subject id '" + s.subject_id + "'");
      s.series = RoiTimeSeries(n, t, std::move(values));
      if (!entry.at("label").is_null()) s.label = entry.at("label").get<int>();
      s.drug = entry.value("drug", std::string());
      s.cohort = entry.value("cohort", std::string());
      validate_subject(s);
      cohort.subjects.push_back(std::move(s));
    }
    return cohort;
  } catch (const Json::exception& e) {
    throw FormatError("malformed manifest '" + manifest_path.string() + "': " + e.what());
  }
}

}  // namespace fmm
