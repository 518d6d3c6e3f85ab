#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

#include "binary_io.hpp"
#include "fmm/errors.hpp"
#include "fmm/harness.hpp"
#include "fmm/rng.hpp"

namespace fmm {

namespace {

void check_binary(std::span<const int> v, const char* what) {
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (v[i] != 0 && v[i] != 1) {
      throw ValueError(std::string(what) + "[" + std::to_string(i) + "] = " + std::to_string(v[i]) + " is not in {0,1}");
    }
  }
}

double ratio(double num, double den) { return den > 0.0 ? num / den : 0.0; }

// Mann-Whitney U with midranks for tied scores.
double auroc_midrank(std::span<const double> scores, std::span<const int> labels) {
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  std::size_t positives = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
    for (std::size_t m = i; m < j; ++m) {
      if (labels[order[m]] == 1) rank_sum += midrank;
    }
    i = j;
  }
  for (int y : labels) positives += static_cast<std::size_t>(y);
  const double n1 = static_cast<double>(positives), n0 = static_cast<double>(n - positives);
  return (rank_sum - n1 * (n1 + 1.0) / 2.0) / (n1 * n0);
}

MetricSummary summary_of(const std::vector<double>& v) {
  MetricSummary s;
  if (v.empty()) {
    s.mean = s.std = std::numeric_limits<double>::quiet_NaN();
    return s;
  }
  s.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - s.mean) * (x - s.mean);
  s.std = std::sqrt(ss / static_cast<double>(v.size()));
  return s;
}

Json number_or_null(double x) { return std::isfinite(x) ? Json(x) : Json(nullptr); }

Json summary_json(const MetricSummary& s) { return Json{{"mean", number_or_null(s.mean)}, {"std", number_or_null(s.std)}}; }

Json confusion_json(const Confusion& c) { return Json{{"tp", c.tp}, {"fp", c.fp}, {"tn", c.tn}, {"fn", c.fn}}; }

}  // namespace

Confusion confusion(std::span<const int> predicted, std::span<const int> labels) {
  if (predicted.size() != labels.size()) {
    throw ShapeError("confusion: " + std::to_string(predicted.size()) + " predictions for " +
                     std::to_string(labels.size()) + " labels");
  }
  check_binary(predicted, "predicted");
  check_binary(labels, "labels");
  Confusion c;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (predicted[i] == 1) {
      (labels[i] == 1 ? c.tp : c.fp) += 1;
    } else {
      (labels[i] == 0 ? c.tn : c.fn) += 1;
    }
  }
  return c;
}

double mcc_from_confusion(const Confusion& c) {
  const double tp = static_cast<double>(c.tp), fp = static_cast<double>(c.fp);
  const double tn = static_cast<double>(c.tn), fn = static_cast<double>(c.fn);
  const double den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn);
  if (den == 0.0) return 0.0;
  return 100.0 * (tp * tn - fp * fn) / std::sqrt(den);
}

MetricValues compute_metrics(std::span<const double> probabilities, std::span<const int> labels) {
  if (probabilities.size() != labels.size()) {
    throw ShapeError("compute_metrics: " + std::to_string(probabilities.size()) + " scores for " +
                     std::to_string(labels.size()) + " labels");
  }
  if (labels.empty()) throw ValueError("compute_metrics: no samples");
  for (double p : probabilities) {
    if (!std::isfinite(p)) throw ValueError("compute_metrics: non-finite score");
  }
  std::vector<int> predicted(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) predicted[i] = probabilities[i] >= 0.5 ? 1 : 0;

  MetricValues m;
  m.counts = confusion(predicted, labels);
  const double tp = static_cast<double>(m.counts.tp), fp = static_cast<double>(m.counts.fp);
  const double tn = static_cast<double>(m.counts.tn), fn = static_cast<double>(m.counts.fn);
  m.f1 = 50.0 * (ratio(2 * tp, 2 * tp + fp + fn) + ratio(2 * tn, 2 * tn + fn + fp));
  // Rates of an absent class are skipped rather than counted as zero.
  const bool has_pos = tp + fn > 0, has_neg = tn + fp > 0;
  if (has_pos && has_neg) {
    m.bacc = 50.0 * (tp / (tp + fn) + tn / (tn + fp));
  } else {
    m.bacc = 100.0 * (has_pos ? tp / (tp + fn) : tn / (tn + fp));
  }
  m.mcc = mcc_from_confusion(m.counts);
  m.auroc_defined = has_pos && has_neg;
  m.auroc = m.auroc_defined ? 100.0 * auroc_midrank(probabilities, labels) : std::numeric_limits<double>::quiet_NaN();
  return m;
}

void summarize(MetricsReport& r) {
  std::vector<double> f1, bacc, auroc, mcc;
  r.total = {};
  for (const auto& e : r.evaluations) {
    f1.push_back(e.metrics.f1);
    bacc.push_back(e.metrics.bacc);
    mcc.push_back(e.metrics.mcc);
    if (e.metrics.auroc_defined) auroc.push_back(e.metrics.auroc);
    r.total.tp += e.metrics.counts.tp;
    r.total.fp += e.metrics.counts.fp;
    r.total.tn += e.metrics.counts.tn;
    r.total.fn += e.metrics.counts.fn;
  }
  r.f1 = summary_of(f1);
  r.bacc = summary_of(bacc);
  r.auroc = summary_of(auroc);
  r.mcc = summary_of(mcc);
}

Json to_json(const MetricsReport& r) {
  Json evals = Json::array();
  for (const auto& e : r.evaluations) {
    Json j{{"name", e.name},
           {"f1", e.metrics.f1},
           {"bacc", e.metrics.bacc},
           {"auroc", e.metrics.auroc_defined ? Json(e.metrics.auroc) : Json(nullptr)},
           {"mcc", e.metrics.mcc},
           {"confusion", confusion_json(e.metrics.counts)}};
    if (!e.subject_ids.empty()) j["subjects"] = e.subject_ids;
    evals.push_back(std::move(j));
  }
  return Json{{"experiment", r.experiment_id},
              {"summary",
               Json{{"f1", summary_json(r.f1)},
                    {"bacc", summary_json(r.bacc)},
                    {"auroc", summary_json(r.auroc)},
                    {"mcc", summary_json(r.mcc)}}},
              {"confusion", confusion_json(r.total)},
              {"evaluations", evals},
              {"details", r.details}};
}

MetricsReport report_from_json(const Json& j) {
  try {
    MetricsReport r;
    r.experiment_id = j.at("experiment").get<std::string>();
    for (const auto& e : j.at("evaluations")) {
      Evaluation ev;
      ev.name = e.at("name").get<std::string>();
      ev.metrics.f1 = e.at("f1").get<double>();
      ev.metrics.bacc = e.at("bacc").get<double>();
      ev.metrics.mcc = e.at("mcc").get<double>();
      ev.metrics.auroc_defined = !e.at("auroc").is_null();
      ev.metrics.auroc = ev.metrics.auroc_defined ? e.at("auroc").get<double>() : std::numeric_limits<double>::quiet_NaN();
      const Json& c = e.at("confusion");
      ev.metrics.counts = {c.at("tp").get<std::size_t>(), c.at("fp").get<std::size_t>(), c.at("tn").get<std::size_t>(),
                           c.at("fn").get<std::size_t>()};
      if (e.contains("subjects")) ev.subject_ids = e.at("subjects").get<std::vector<std::string>>();
      r.evaluations.push_back(std::move(ev));
    }
    summarize(r);
    if (j.contains("details")) r.details = j.at("details");
    return r;
  } catch (const Json::exception& e) {
    throw FormatError(std::string("malformed report: ") + e.what());
  }
}

std::string reports_csv(const std::vector<MetricsReport>& reports) {
  std::ostringstream out;
  out << std::setprecision(17);
  out << "experiment,f1_mean,f1_std,bacc_mean,bacc_std,auroc_mean,auroc_std,mcc_mean,mcc_std\n";
  for (const auto& r : reports) {
    out << r.experiment_id;
    for (const MetricSummary* s : {&r.f1, &r.bacc, &r.auroc, &r.mcc}) out << ',' << s->mean << ',' << s->std;
    out << '\n';
  }
  return out.str();
}

std::string reports_markdown(const std::vector<MetricsReport>& reports) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(2);
  out << "| Experiment | F1 | BACC | AUROC | MCC |\n|---|---|---|---|---|\n";
  for (const auto& r : reports) {
    out << "| " << r.experiment_id;
    for (const MetricSummary* s : {&r.f1, &r.bacc, &r.auroc, &r.mcc}) out << " | " << s->mean << " ± " << s->std;
    out << " |\n";
  }
  return out.str();
}

void write_report(const MetricsReport& report, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const std::string json = canonical_dump_pretty(to_json(report)) + "\n";
  detail::write_file(dir / "report.json", std::vector<std::uint8_t>(json.begin(), json.end()));
  const std::string csv = reports_csv({report});
  detail::write_file(dir / "report.csv", std::vector<std::uint8_t>(csv.begin(), csv.end()));
}

std::vector<std::size_t> FoldSplit::train_indices(std::size_t fold) const {
  std::vector<std::size_t> out;
  for (std::size_t f = 0; f < folds.size(); ++f) {
    if (f != fold) out.insert(out.end(), folds[f].begin(), folds[f].end());
  }
  std::sort(out.begin(), out.end());
  return out;
}

FoldSplit stratified_kfold(std::span<const int> labels, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw ValueError("folds must be >= 2, got " + std::to_string(k));
  if (labels.size() < k) {
    throw ValueError("cannot split " + std::to_string(labels.size()) + " subjects into " + std::to_string(k) + " folds");
  }
  check_binary(labels, "labels");
  FoldSplit split;
  split.folds.resize(k);
  std::size_t next = 0;
  for (int cls : {0, 1}) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == cls) members.push_back(i);
    }
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(cls)));
    rng.shuffle(std::span<std::size_t>(members));
    // Continue the round-robin where the previous class stopped so fold sizes stay balanced.
    for (std::size_t i : members) {
      split.folds[next].push_back(i);
      next = (next + 1) % k;
    }
  }
  for (auto& f : split.folds) std::sort(f.begin(), f.end());
  check_split(split, labels);
  return split;
}

void check_split(const FoldSplit& split, std::span<const int> labels) {
  const std::size_t k = split.folds.size();
  std::vector<int> seen(labels.size(), 0);
  std::size_t class_total[2] = {0, 0};
  for (int y : labels) ++class_total[y];
  for (std::size_t f = 0; f < k; ++f) {
    std::size_t counts[2] = {0, 0};
    for (std::size_t i : split.folds[f]) {
      if (i >= labels.size()) throw ValueError("fold " + std::to_string(f) + " holds out-of-range index");
      if (seen[i]++) throw ValueError("subject index " + std::to_string(i) + " appears in more than one fold");
      ++counts[labels[i]];
    }
    for (int c : {0, 1}) {
      const double expected = static_cast<double>(class_total[c]) / static_cast<double>(k);
      if (std::abs(static_cast<double>(counts[c]) - expected) > 1.0) {
        throw ValueError("fold " + std::to_string(f) + " has " + std::to_string(counts[c]) + " subjects of class " +
                         std::to_string(c) + ", expected about " + std::to_string(expected));
      }
    }
  }
  for (std::size_t i = 0; i < seen.size(); ++i) {
    if (!seen[i]) throw ValueError("subject index " + std::to_string(i) + " is in no fold");
  }
}

}  // namespace fmm
