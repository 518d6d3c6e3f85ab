#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fmm/data.hpp"
#include "fmm/matrix.hpp"
#include "fmm/model.hpp"
#include "fmm/pretrain.hpp"

namespace fmm {

// ---- metrics ---------------------------------------------------------------

struct Confusion {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  bool operator==(const Confusion&) const = default;
};

Confusion confusion(std::span<const int> predicted, std::span<const int> labels);

/// Single-evaluation metrics, all in percent. AUROC is NaN with
/// auroc_defined = false when the labels hold a single class.
struct MetricValues {
  double f1 = 0.0;
  double bacc = 0.0;
  double auroc = 0.0;
  double mcc = 0.0;
  bool auroc_defined = true;
  Confusion counts;
};

// Predicted label is 1 iff probability >= 0.5; AUROC uses the raw scores.
MetricValues compute_metrics(std::span<const double> probabilities, std::span<const int> labels);
double mcc_from_confusion(const Confusion& c);  // percent

struct MetricSummary {
  double mean = 0.0;
  double std = 0.0;  // population std over evaluations
};

struct Evaluation {
  std::string name;  // "fold0", "seed3", "repeat17"
  MetricValues metrics;
  std::vector<std::string> subject_ids;  // held-out subjects, may be empty
};

struct MetricsReport {
  std::string experiment_id;
  std::vector<Evaluation> evaluations;
  MetricSummary f1, bacc, auroc, mcc;
  Confusion total;  // summed over evaluations
  Json details = Json::object();
};

// Fills the summaries and total from the evaluations. AUROC is averaged over
// evaluations where it is defined; NaN if none.
void summarize(MetricsReport& report);

Json to_json(const MetricsReport& report);
// Inverse of to_json; summaries are recomputed from the evaluations.
MetricsReport report_from_json(const Json& j);
// One row per experiment with mean and std columns for each metric.
std::string reports_csv(const std::vector<MetricsReport>& reports);
std::string reports_markdown(const std::vector<MetricsReport>& reports);
void write_report(const MetricsReport& report, const std::filesystem::path& directory);

// ---- splits ----------------------------------------------------------------

struct FoldSplit {
  std::vector<std::vector<std::size_t>> folds;  // indices into the label vector

  std::vector<std::size_t> train_indices(std::size_t fold) const;
};

// Per-class round-robin after a seeded shuffle.
FoldSplit stratified_kfold(std::span<const int> labels, std::size_t k, std::uint64_t seed);
// Throws if folds overlap, miss an index, or deviate from proportional class counts by more than one.
void check_split(const FoldSplit& split, std::span<const int> labels);

// ---- experiments -------------------------------------------------------------

enum class ProtocolKind { drug_agnostic, drug_specific };

struct Protocol {
  ProtocolKind kind = ProtocolKind::drug_agnostic;
  std::string train_drug;
  std::string test_drug;
};

struct ExperimentSpec {
  std::string id = "experiment";
  Modality modality = Modality::both;
  bool pretrained = false;
  std::optional<FusionKind> fusion = FusionKind::concat;  // nullopt = none (unimodal)
  Protocol protocol;
  std::size_t folds = 5;
  std::uint64_t seed = 7;
  AdamConfig optimizer;
  std::size_t epochs = 50;
  std::size_t batch_size = 8;
  std::size_t patience = 10;
  double min_delta = 1e-4;
  std::size_t out_of_domain_seeds = 5;
  std::size_t jobs = 1;
};

void validate(const ExperimentSpec& spec);
Json to_json(const ExperimentSpec& spec);
ExperimentSpec experiment_spec_from_json(const Json& j, std::vector<std::string>* warnings = nullptr);

/// Architecture and artifacts shared by every experiment in a run.
struct ExperimentContext {
  ModelConfig model = desk_model_config();  // modality and fusion come from the spec
  PreprocessConfig preprocess;
  const PretrainResult* encoder = nullptr;  // required by pretrained specs
  std::filesystem::path output_dir;         // empty disables persistence
};

ModelConfig resolve_model_config(const ExperimentSpec& spec, const ExperimentContext& context);

/// Subjects sorted by id and preprocessed once.
struct PreparedCohort {
  std::string fingerprint;
  std::vector<std::string> ids;
  std::vector<int> labels;
  std::vector<std::string> drugs;
  std::vector<PreparedSubject> subjects;

  std::size_t size() const { return ids.size(); }
  PreparedCohort subset(std::span<const std::size_t> indices) const;
};

PreparedCohort prepare_cohort(const Cohort& cohort, const PreprocessConfig& config = {}, std::size_t jobs = 1);

struct TrainHistoryRow {
  std::size_t epoch = 0;
  double loss = 0.0;
};

struct TrainResult {
  Model model;
  std::vector<TrainHistoryRow> history;
  bool stopped_early = false;
};

// Per-subject R_T for a frozen encoder; index-aligned with the cohort.
std::vector<Tensor> encode_ts_stream(const Model& model, const PreparedCohort& data, std::size_t jobs = 1);

// Trains on the given subject indices. The TS encoder is frozen iff the spec is
// pretrained or the encoder config says so. ts_cache, when given, holds R_T for
// every cohort subject and must match the frozen encoder.
TrainResult train_model(const PreparedCohort& data, std::span<const std::size_t> train, const ExperimentSpec& spec,
                        const ExperimentContext& context, std::uint64_t seed,
                        const std::vector<Tensor>* ts_cache = nullptr);
TrainResult train_model(const PreparedCohort& data, const FoldSplit& split, std::size_t fold,
                        const ExperimentSpec& spec, const ExperimentContext& context);

std::vector<double> predict(const Model& model, const PreparedCohort& data, std::span<const std::size_t> indices,
                            const std::vector<Tensor>* ts_cache = nullptr, std::size_t jobs = 1);

void write_train_history(const std::vector<TrainHistoryRow>& history, const std::filesystem::path& path);

struct CvResult {
  MetricsReport report;
  FoldSplit split;
  std::vector<Model> fold_models;
};

CvResult run_cv(const PreparedCohort& data, const ExperimentSpec& spec, const ExperimentContext& context);
MetricsReport run_cv(const Cohort& cohort, const ExperimentSpec& spec, const ExperimentContext& context);

MetricsReport random_baseline(std::span<const int> labels, std::size_t repeats, std::uint64_t seed);

// Same drug: k-fold CV on the subset. Different drugs: train on the whole
// source subset and evaluate once on the whole target subset, once per seed.
MetricsReport drug_protocol(const PreparedCohort& data, const std::string& train_drug, const std::string& test_drug,
                            const ExperimentSpec& spec, const ExperimentContext& context);
std::vector<std::size_t> drug_indices(const PreparedCohort& data, const std::string& drug);

// The four ablation cells: FC scratch, TS pretrained, both scratch, both pretrained.
std::vector<ExperimentSpec> ablation_specs(const ExperimentSpec& base);

// ---- features and probes ------------------------------------------------------

// Fused head input R_TC per subject; ts_cache as in train_model.
Matrix extract_features(const Model& model, const PreparedCohort& data, const std::vector<Tensor>* ts_cache = nullptr,
                        std::size_t jobs = 1);
// Strict upper triangle of each FC matrix.
Matrix raw_fc_features(const PreparedCohort& data);
// Every token value of each subject, row-major.
Matrix raw_ts_features(const PreparedCohort& data);

struct Pca {
  std::vector<double> mean;
  Matrix components;  // c x D, rows are unit eigenvectors by decreasing eigenvalue
  std::vector<double> eigenvalues;

  Matrix transform(const Matrix& x) const;
};
// Fits on the given rows; c = 0 picks min(10, n - 1, D).
Pca fit_pca(const Matrix& x, std::span<const std::size_t> rows, std::size_t components = 0);

enum class ProbeKind { ridge, knn };
std::string to_string(ProbeKind kind);
ProbeKind parse_probe_kind(const std::string& name);

struct ProbeConfig {
  ProbeKind kind = ProbeKind::ridge;
  double lambda = 1.0;
  std::size_t neighbours = 5;
  bool standardize = true;
};

// Scores for query rows after fitting on train rows. Ridge returns the
// logistic of the linear score; k-NN returns the positive neighbour fraction.
std::vector<double> probe_scores(const Matrix& x, std::span<const int> labels, std::span<const std::size_t> train,
                                 std::span<const std::size_t> query, const ProbeConfig& config);

MetricsReport linear_probe(const Matrix& features, std::span<const int> labels, const ProbeConfig& config,
                           std::size_t k, std::uint64_t seed);
// Fold f scores its held-out rows with features[f]; used when features come
// from a model trained on that fold.
MetricsReport linear_probe(const std::vector<Matrix>& fold_features, std::span<const int> labels,
                           const FoldSplit& split, const ProbeConfig& config);

}  // namespace fmm
