// Acceptance suite: one PASS/FAIL line per criterion.
//
//   fmm_acceptance [--only 1,5,...] [--expect-fail 5,...]
//
// The exit status is 0 when every selected criterion passes except those named
// in --expect-fail, and each of those fails. An expected failure that starts
// passing is reported so the list cannot go stale.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "../support/fixtures.hpp"
#include "../support/gradcheck.hpp"
#include "../support/metric_oracle.hpp"
#include "fmm/errors.hpp"
#include "fmm/harness.hpp"
#include "fmm/interpret.hpp"
#include "fmm/pretrain.hpp"
#include "fmm/run_config.hpp"

namespace fs = std::filesystem;
using namespace fmm;

namespace {

// Fine-tuning epochs for the ablation cells. The library default (50) puts the
// from-scratch multimodal cell alone past the 10 minute budget on one core.
constexpr std::size_t kAblationEpochs = 20;

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

std::vector<std::uint8_t> bytes_of(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// Relative paths and contents of every regular file below dir.
std::map<std::string, std::vector<std::uint8_t>> tree(const fs::path& dir) {
  std::map<std::string, std::vector<std::uint8_t>> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = bytes_of(e.path());
  }
  return out;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("fmm_acceptance_" + name);
  fs::remove_all(p);
  return p;
}

// Shared, lazily built artifacts for the benchmark criteria.
struct Benchmark {
  GeneratorProfile profile = openneuro_like_profile();
  std::optional<PreparedCohort> data;
  std::optional<PretrainResult> encoder;
  double pretrain_seconds = 0.0;
  std::map<std::string, CvResult> cells;
  double cells_seconds = 0.0;

  const PreparedCohort& cohort() {
    if (!data) data = prepare_cohort(generate_synthetic_cohort(profile, 7));
    return *data;
  }

  const PretrainResult& pretrained() {
    if (!encoder) {
      const auto t0 = std::chrono::steady_clock::now();
      const RunConfig rc;  // seed 7; the same streams the CLI uses
      const Cohort corpus =
          generate_pretrain_corpus(make_pretrain_family(profile, corpus_seed(rc)), rc.pretrain_subjects, corpus_seed(rc));
      encoder = mae_pretrain(corpus, desk_model_config().ts, rc.pretrain, encoder_seed(rc));
      pretrain_seconds = seconds_since(t0);
    }
    return *encoder;
  }

  ExperimentContext context() {
    ExperimentContext ctx;
    ctx.encoder = &pretrained();
    return ctx;
  }

  const std::map<std::string, CvResult>& ablation() {
    if (cells.empty()) {
      const ExperimentContext ctx = context();
      const auto t0 = std::chrono::steady_clock::now();
      ExperimentSpec base;
      base.epochs = kAblationEpochs;
      for (const auto& spec : ablation_specs(base)) {
        cells.emplace(spec.id, run_cv(cohort(), spec, ctx));
        std::fprintf(stderr, "  %-22s MCC %6.2f +- %5.2f\n", spec.id.c_str(), cells.at(spec.id).report.mcc.mean,
                     cells.at(spec.id).report.mcc.std);
      }
      cells_seconds = seconds_since(t0);
    }
    return cells;
  }
};

Benchmark bench;

Outcome metric_oracle() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(20240501);
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 10 + rng.below(191);
    std::vector<int> y(n);
    std::vector<double> p(n);
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = i < 2 ? static_cast<int>(i) : (rng.bernoulli(0.45) ? 1 : 0);
      p[i] = std::round(rng.uniform() * 50.0) / 50.0;  // coarse grid so ties occur
    }
    const MetricValues m = compute_metrics(p, y);
    const oracle::Metrics o = oracle::reference_metrics(p, y);
    for (double d : {m.f1 - o.f1, m.bacc - o.bacc, m.auroc - o.auroc, m.mcc - o.mcc}) worst = std::max(worst, std::abs(d));
  }
  const double s = seconds_since(t0);
  return {worst <= 1e-12 && s < 5.0, "max |diff| " + fmt("%.2e", worst) + " over 200 vectors, " + fmt("%.2f s", s)};
}

Outcome gradient_integrity() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  std::string where;
  std::size_t checked = 0;
  for (const auto& c : testing::op_gradient_cases()) {
    const auto r = testing::gradient_check(c.inputs, c.build);
    ++checked;
    if (r.worst_relative_error > worst) {
      worst = r.worst_relative_error;
      where = c.name + ":" + r.worst_input;
    }
  }
  for (const auto& name : fusion_kind_names()) {
    const auto r = testing::model_gradient_check(testing::tiny_config(parse_fusion_kind(name)), 21);
    ++checked;
    if (r.worst_relative_error > worst) {
      worst = r.worst_relative_error;
      where = "tiny model (" + name + "):" + r.worst_input;
    }
  }
  const double s = seconds_since(t0);
  return {worst <= 1e-6 && s < 60.0, std::to_string(checked) + " cases, worst relative error " + fmt("%.2e", worst) +
                                         " at " + where + ", " + fmt("%.2f s", s)};
}

Outcome fc_correctness() {
  const auto t0 = std::chrono::steady_clock::now();
  double asym = 0.0, diag = 0.0, range = 0.0, affine = 0.0;
  const Cohort c = generate_synthetic_cohort(openneuro_like_profile(), 3);
  for (std::size_t s = 0; s < 8; ++s) {
    const RoiTimeSeries& x = c.subjects[s].series;
    const ConnectivityMatrix fc = compute_fc(x);
    std::vector<float> v = x.values();
    const std::size_t t = x.n_timepoints();
    for (std::size_t r = 0; r < x.n_rois(); ++r) {
      const float a = r % 3 == 0 ? -0.5f : 2.0f + static_cast<float>(r) * 0.1f, b = static_cast<float>(r) - 4.0f;
      for (std::size_t j = 0; j < t; ++j) v[r * t + j] = a * v[r * t + j] + b;
    }
    const ConnectivityMatrix moved = compute_fc(RoiTimeSeries(x.n_rois(), t, v));
    for (std::size_t i = 0; i < fc.rows; ++i) {
      diag = std::max(diag, std::abs(fc(i, i) - 1.0));
      for (std::size_t j = 0; j < fc.cols; ++j) {
        asym = std::max(asym, std::abs(fc(i, j) - fc(j, i)));
        range = std::max(range, std::abs(fc(i, j)) - 1.0);
        const double sign = ((i % 3 == 0) != (j % 3 == 0)) ? -1.0 : 1.0;
        affine = std::max(affine, std::abs(moved(i, j) - sign * fc(i, j)));
      }
    }
  }
  // Long noiseless series converge to the generating correlation.
  GeneratorProfile p = openneuro_like_profile(4, 2000);
  p.ar_coefficient = p.noise_std = p.mix_jitter = p.ar_class_offset = p.ar_jitter = 0.0;
  p.mix_separation = 0.5;
  const Cohort longc = generate_synthetic_cohort(p, 3);
  double frob_sum = 0.0, frob_first = 0.0;
  for (std::size_t s = 0; s < longc.subjects.size(); ++s) {
    const auto& subj = longc.subjects[s];
    const Matrix target = subject_latent_correlation(p, *subj.label, subj.drug, *subj.label == 1 ? 1.0 : 0.0);
    const ConnectivityMatrix fc = compute_fc(subj.series);
    double f = 0.0;
    for (std::size_t i = 0; i < 4; ++i) {
      for (std::size_t j = 0; j < 4; ++j) f += (fc(i, j) - target(i, j)) * (fc(i, j) - target(i, j));
    }
    f = std::sqrt(f);
    if (s == 0) frob_first = f;
    frob_sum += f;
  }
  const double frob_mean = frob_sum / static_cast<double>(longc.subjects.size());
  const double s = seconds_since(t0);
  const bool pass = asym <= 1e-6 && diag == 0.0 && range <= 0.0 && affine <= 1e-6 && frob_first <= 0.1 &&
                    frob_mean <= 0.1 && s < 10.0;
  return {pass, "asymmetry " + fmt("%.1e", asym) + ", diagonal error " + fmt("%.1e", diag) + ", range excess " +
                    fmt("%.1e", std::max(range, 0.0)) + ", affine " + fmt("%.1e", affine) + ", t=2000 Frobenius " +
                    fmt("%.3f", frob_first) + " (mean " + fmt("%.3f", frob_mean) + "), " + fmt("%.2f s", s)};
}

Outcome ig_axioms() {
  const auto t0 = std::chrono::steady_clock::now();
  const Cohort cohort = generate_synthetic_cohort(openneuro_like_profile(4, 40), 7);
  PreprocessConfig pc;
  pc.target_length = 40;
  const PreparedCohort data = prepare_cohort(cohort, pc);
  ExperimentContext ctx;
  ctx.model = testing::tiny_config();
  ctx.preprocess = pc;
  ExperimentSpec spec;
  spec.epochs = 20;
  spec.optimizer.learning_rate = 3e-3;
  std::vector<std::size_t> all(data.size());
  std::iota(all.begin(), all.end(), 0);
  const Model model = train_model(data, all, spec, ctx, 1).model;
  const Matrix x = extract_features(model, data);

  const FeaturePredictor logit = [&](Graph& g, Var v) {
    Params p(g, model.params, nullptr);
    return predict_head(p, v);
  };
  const auto w = model.params.at("head.weight").to_vector();
  const FeaturePredictor prob = head_probability(model);
  double affine = 0.0, residual = 0.0, quadrature = 0.0, zero = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto row = x.row(i);
    const auto a = integrated_gradients(logit, row, 7);
    for (std::size_t d = 0; d < row.size(); ++d) {
      affine = std::max(affine, std::abs(a.attributions[d] - w[d] * row[d]) / std::max(1.0, std::abs(w[d] * row[d])));
    }
    const auto coarse = integrated_gradients(prob, row, 512);
    const auto dense = integrated_gradients(prob, row, 8192);
    residual = std::max(residual, coarse.residual);
    for (std::size_t d = 0; d < row.size(); ++d) {
      quadrature = std::max(quadrature, std::abs(coarse.attributions[d] - dense.attributions[d]));
    }
    for (double v : integrated_gradients(prob, row, row, 16).attributions) zero = std::max(zero, std::abs(v));
  }
  const double s = seconds_since(t0);
  const bool pass = affine <= 1e-13 && residual <= 1e-3 && quadrature <= 1e-3 && zero == 0.0 && s < 30.0;
  return {pass, "affine error " + fmt("%.1e", affine) + ", completeness residual at S=512 " + fmt("%.1e", residual) +
                    ", max |IG512 - IG8192| " + fmt("%.1e", quadrature) + ", zero-path max " + fmt("%.1e", zero) +
                    ", " + fmt("%.2f s", s)};
}

Outcome ablation_direction() {
  const auto& cells = bench.ablation();
  const double fc = cells.at("exp5_fc_scratch").report.mcc.mean;
  const double ts = cells.at("exp7_ts_pretrained").report.mcc.mean;
  const double scratch = cells.at("exp8_both_scratch").report.mcc.mean;
  const double both = cells.at("exp9_both_pretrained").report.mcc.mean;
  const double best_uni = std::max(fc, ts);
  const double total = bench.pretrain_seconds + bench.cells_seconds;
  const bool pass = both >= best_uni + 2.0 && both >= scratch + 5.0 && total < 600.0;
  return {pass, "MCC both+pretrained " + fmt("%.2f", both) + " vs best unimodal " + fmt("%.2f", best_uni) +
                    " (margin " + fmt("%+.2f", both - best_uni) + ", need +2) and both-scratch " + fmt("%.2f", scratch) +
                    " (margin " + fmt("%+.2f", both - scratch) + ", need +5); pretraining " +
                    fmt("%.0f s", bench.pretrain_seconds) + " + fine-tuning " + fmt("%.0f s", bench.cells_seconds) +
                    " at " + std::to_string(kAblationEpochs) + " epochs"};
}

Outcome random_baseline_check() {
  const auto t0 = std::chrono::steady_clock::now();
  const MetricsReport r = random_baseline(bench.cohort().labels, 1000, 7);
  const double s = seconds_since(t0);
  const bool pass = std::abs(r.mcc.mean) <= 5.0 && std::abs(r.bacc.mean - 50.0) <= 5.0 && s < 5.0;
  return {pass, "mean MCC " + fmt("%.2f", r.mcc.mean) + " +- " + fmt("%.2f", r.mcc.std) + ", mean BACC " +
                    fmt("%.2f", r.bacc.mean) + " over 1000 repeats, " + fmt("%.2f s", s)};
}

Outcome protocol_fidelity() {
  const auto t0 = std::chrono::steady_clock::now();
  const PreparedCohort& data = bench.cohort();
  const auto dulox = drug_indices(data, "duloxetine");
  const auto placebo = drug_indices(data, "placebo");
  ExperimentSpec spec;
  spec.modality = Modality::fc;
  spec.fusion.reset();
  spec.epochs = 3;
  const ExperimentContext ctx;
  const MetricsReport within = drug_protocol(data, "placebo", "placebo", spec, ctx);
  const MetricsReport direct = run_cv(data.subset(placebo), spec, ctx).report;
  const bool same = to_json(within)["evaluations"] == to_json(direct)["evaluations"];
  const MetricsReport ood = drug_protocol(data, "placebo", "duloxetine", spec, ctx);
  std::set<std::string> target;
  for (std::size_t i : dulox) target.insert(data.ids[i]);
  bool whole = ood.evaluations.size() == 5;
  for (const auto& e : ood.evaluations) {
    whole = whole && std::set<std::string>(e.subject_ids.begin(), e.subject_ids.end()) == target &&
            e.subject_ids.size() == target.size();
  }
  const double s = seconds_since(t0);
  const bool pass = dulox.size() == 19 && placebo.size() == 37 && same && whole;
  return {pass, "subsets " + std::to_string(dulox.size()) + "/" + std::to_string(placebo.size()) +
                    ", within-domain " + (same ? "equals" : "differs from") + " run_cv on the subset, out-of-domain " +
                    std::to_string(ood.evaluations.size()) + " whole-subset evaluations" + (whole ? "" : " (mismatch)") +
                    ", " + fmt("%.1f s", s)};
}

Outcome determinism() {
  const auto t0 = std::chrono::steady_clock::now();
  const PreparedCohort& data = bench.cohort();
  ExperimentSpec spec;
  spec.id = "determinism";
  spec.modality = Modality::fc;
  spec.fusion.reset();
  spec.epochs = 2;
  spec.jobs = 1;
  const fs::path a = scratch("det_a"), b = scratch("det_b");
  ExperimentContext ctx;
  ctx.output_dir = a;
  const CvResult ra = run_cv(data, spec, ctx);
  ctx.output_dir = b;
  run_cv(data, spec, ctx);
  const auto ta = tree(a), tb = tree(b);
  const bool runs_identical = ta == tb && !ta.empty();

  // Checkpoint and cohort round trips.
  const fs::path ck = a / "roundtrip.fmtc", ck2 = a / "roundtrip2.fmtc";
  save_model(ra.fold_models[0], ck);
  const Model loaded = load_model(ck);
  save_model(loaded, ck2);
  bool params_equal = loaded.params.size() == ra.fold_models[0].params.size();
  for (const auto& [name, t] : ra.fold_models[0].params) params_equal = params_equal && t.bitwise_equal(loaded.params.at(name));
  const bool checkpoint_ok = params_equal && bytes_of(ck) == bytes_of(ck2);
  const Cohort original = generate_synthetic_cohort(bench.profile, 7);
  const fs::path cdir = a / "cohort";
  save_cohort(original, cdir);
  const bool cohort_ok = load_cohort(cdir) == original;

  // Corruption is rejected with an error that names the file.
  auto rejected = [](const fs::path& file, std::size_t offset, const std::function<void()>& load) {
    {
      std::fstream f(file, std::ios::in | std::ios::out | std::ios::binary);
      f.seekg(static_cast<std::streamoff>(offset));
      const char c = static_cast<char>(f.get());
      f.seekp(static_cast<std::streamoff>(offset));
      f.put(static_cast<char>(c ^ 0x20));
    }
    try {
      load();
    } catch (const FormatError& e) {
      return std::string(e.what()).find(file.filename().string()) != std::string::npos;
    } catch (const Error&) {
      return false;
    }
    return false;
  };
  const bool bad_ckpt = rejected(ck2, fs::file_size(ck2) / 2, [&] { load_model(ck2); });
  const bool bad_cohort = rejected(cdir / "sub-005.bin", 64, [&] { load_cohort(cdir); });
  fs::resize_file(ck, fs::file_size(ck) - 7);
  bool truncated = false;
  try {
    load_model(ck);
  } catch (const FormatError&) {
    truncated = true;
  }
  fs::remove_all(a);
  fs::remove_all(b);
  const double s = seconds_since(t0);
  const bool pass = runs_identical && checkpoint_ok && cohort_ok && bad_ckpt && bad_cohort && truncated;
  return {pass, std::to_string(ta.size()) + " run artifacts " + (ta == tb ? "byte-identical" : "DIFFER") +
                    ", checkpoint round trip " + (checkpoint_ok ? "bit-exact" : "NOT bit-exact") +
                    ", cohort round trip " + (cohort_ok ? "bit-exact" : "NOT bit-exact") + ", corruption " +
                    (bad_ckpt && bad_cohort && truncated ? "rejected with file named" : "NOT rejected") + ", " +
                    fmt("%.1f s", s)};
}

Outcome freezing() {
  const auto t0 = std::chrono::steady_clock::now();
  const PreparedCohort& data = bench.cohort();
  const ExperimentContext ctx = bench.context();
  ExperimentSpec spec;
  spec.pretrained = true;
  spec.epochs = 3;
  std::vector<std::size_t> train(24);
  std::iota(train.begin(), train.end(), 0);
  const TrainResult r = train_model(data, train, spec, ctx, 5);
  std::size_t ts_same = 0, ts_total = 0, other_changed = 0;
  const Model init = [&] {
    Model m = init_model(resolve_model_config(spec, ctx), 5);
    load_pretrained_encoder(m, ctx.encoder->encoder, ctx.encoder->provenance);
    return m;
  }();
  for (const auto& [name, t] : r.model.params) {
    if (is_ts_parameter(name)) {
      ++ts_total;
      ts_same += t.bitwise_equal(ctx.encoder->encoder.at(name)) ? 1 : 0;
    } else if (!t.bitwise_equal(init.params.at(name))) {
      ++other_changed;
    }
  }
  const double s = seconds_since(t0);
  const bool pass = ts_total > 0 && ts_same == ts_total && other_changed > 0;
  return {pass, std::to_string(ts_same) + "/" + std::to_string(ts_total) + " TS-encoder tensors bit-identical after " +
                    std::to_string(r.history.size()) + " epochs; " + std::to_string(other_changed) +
                    " other tensors updated, " + fmt("%.1f s", s)};
}

Outcome probe_sanity() {
  const auto& cells = bench.ablation();
  const CvResult& cv = cells.at("exp9_both_pretrained");
  const PreparedCohort& data = bench.cohort();
  const auto cache = encode_ts_stream(cv.fold_models.front(), data);
  const Matrix raw = raw_fc_features(data);
  std::vector<Matrix> fused, fc, pca;
  for (std::size_t f = 0; f < cv.split.folds.size(); ++f) {
    fused.push_back(extract_features(cv.fold_models[f], data, &cache));
    fc.push_back(raw);
    pca.push_back(fit_pca(raw, cv.split.train_indices(f)).transform(raw));
  }
  // How often the two probes assign the same label on fused features.
  std::size_t agree = 0;
  for (std::size_t f = 0; f < cv.split.folds.size(); ++f) {
    const auto train = cv.split.train_indices(f);
    ProbeConfig ridge, knn;
    knn.kind = ProbeKind::knn;
    const auto a = probe_scores(fused[f], data.labels, train, cv.split.folds[f], ridge);
    const auto b = probe_scores(fused[f], data.labels, train, cv.split.folds[f], knn);
    for (std::size_t i = 0; i < a.size(); ++i) agree += (a[i] >= 0.5) == (b[i] >= 0.5) ? 1 : 0;
  }
  bool pass = true;
  std::string detail;
  for (ProbeKind kind : {ProbeKind::ridge, ProbeKind::knn}) {
    ProbeConfig cfg;
    cfg.kind = kind;
    const double r = linear_probe(fused, data.labels, cv.split, cfg).mcc.mean;
    const double f = linear_probe(fc, data.labels, cv.split, cfg).mcc.mean;
    const double p = linear_probe(pca, data.labels, cv.split, cfg).mcc.mean;
    pass = pass && r >= f && r >= p;
    detail += (detail.empty() ? "" : "; ") + to_string(kind) + " MCC fused " + fmt("%.2f", r) + ", raw FC " +
              fmt("%.2f", f) + ", PCA " + fmt("%.2f", p);
  }
  return {pass, detail + "; fused ridge and kNN agree on " + std::to_string(agree) + "/" + std::to_string(data.size()) +
                    " held-out labels"};
}

std::set<int> parse_list(const std::string& s) {
  std::set<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.insert(std::stoi(item));
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only, expect_fail;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--only" && i + 1 < argc) {
      only = parse_list(argv[++i]);
    } else if (a == "--expect-fail" && i + 1 < argc) {
      expect_fail = parse_list(argv[++i]);
    } else {
      std::fprintf(stderr, "usage: %s [--only 1,2,...] [--expect-fail 5,...]\n", argv[0]);
      return 2;
    }
  }
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"metric oracle equivalence", metric_oracle},
      {"gradient integrity", gradient_integrity},
      {"FC correctness", fc_correctness},
      {"IG axioms", ig_axioms},
      {"ablation direction", ablation_direction},
      {"random baseline", random_baseline_check},
      {"protocol fidelity", protocol_fidelity},
      {"determinism and persistence", determinism},
      {"freezing contract", freezing},
      {"probe sanity", probe_sanity},
  };
  int unexpected = 0;
  for (std::size_t k = 0; k < criteria.size(); ++k) {
    const int id = static_cast<int>(k + 1);
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    try {
      o = criteria[k].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const bool expected_failure = expect_fail.count(id) > 0;
    std::printf("%s %2d %s: %s%s\n", o.pass ? "PASS" : "FAIL", id, criteria[k].first.c_str(), o.detail.c_str(),
                expected_failure ? (o.pass ? " [listed as expected failure but passed]" : " [expected failure]") : "");
    std::fflush(stdout);
    if (o.pass == expected_failure) ++unexpected;
  }
  return unexpected == 0 ? 0 : 1;
}
