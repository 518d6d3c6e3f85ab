#include "fmm/harness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "fmm/errors.hpp"
#include "fmm/parallel.hpp"
#include "fmm/rng.hpp"
#include "json_reader.hpp"

namespace fmm {

namespace {

constexpr std::uint64_t kShuffleStream = 0x5f;
constexpr std::uint64_t kOutOfDomainStream = 0x0d;

std::string protocol_name(ProtocolKind k) { return k == ProtocolKind::drug_agnostic ? "drug_agnostic" : "drug_specific"; }

bool ts_frozen(const ExperimentSpec& spec, const ModelConfig& config) {
  return config.modality != Modality::fc && (spec.pretrained || config.ts.frozen);
}

Model initial_model(const ExperimentSpec& spec, const ExperimentContext& ctx, std::uint64_t seed) {
  const ModelConfig config = resolve_model_config(spec, ctx);
  Model model = init_model(config, seed);
  if (spec.pretrained) {
    if (!ctx.encoder) throw ValueError("experiment '" + spec.id + "' is pretrained but no encoder was supplied");
    if (to_json(ctx.encoder->encoder_config) != to_json(config.ts)) {
      throw ValueError("pretrained encoder config does not match the model's TS encoder config");
    }
    load_pretrained_encoder(model, ctx.encoder->encoder, ctx.encoder->provenance);
  }
  return model;
}

// Head logit for one subject; rt comes from the cache when one is given.
Var subject_logit(Params& p, const ModelConfig& c, const PreparedSubject& s, const Tensor* cached_rt) {
  Var rt, rc;
  if (c.modality != Modality::fc) rt = cached_rt ? p.constant(*cached_rt) : ts_encode(p, c.ts, s.tokens);
  if (c.modality != Modality::ts) rc = fc_encode(p, c.fc, s.fc);
  return predict_head(p, combine_streams(p, c, rt, rc));
}

// R_T is shared across folds when every fold loads the same pretrained encoder.
std::vector<Tensor> shared_ts_cache(const ExperimentSpec& spec, const ExperimentContext& ctx, const PreparedCohort& data) {
  if (!spec.pretrained || spec.modality == Modality::fc) return {};
  return encode_ts_stream(initial_model(spec, ctx, spec.seed), data, spec.jobs);
}

}  // namespace

void validate(const ExperimentSpec& s) {
  if (s.id.empty()) throw ValueError("experiment.id must not be empty");
  if (s.folds < 2) throw ValueError("experiment.folds must be >= 2, got " + std::to_string(s.folds));
  if (s.epochs == 0) throw ValueError("experiment.epochs must be >= 1");
  if (s.batch_size == 0) throw ValueError("experiment.batch_size must be >= 1");
  if (s.patience == 0) throw ValueError("experiment.patience must be >= 1");
  if (s.out_of_domain_seeds == 0) throw ValueError("experiment.out_of_domain_seeds must be >= 1");
  if (s.modality == Modality::both && !s.fusion) throw ValueError("experiment.fusion: modality both needs a fusion kind");
  if (s.modality != Modality::both && s.fusion) {
    throw ValueError("experiment.fusion: fusion '" + to_string(*s.fusion) + "' requires modality both");
  }
  if (s.protocol.kind == ProtocolKind::drug_specific && (s.protocol.train_drug.empty() || s.protocol.test_drug.empty())) {
    throw ValueError("experiment.protocol: drug_specific needs train_drug and test_drug");
  }
  validate(s.optimizer);
}

Json to_json(const ExperimentSpec& s) {
  return Json{{"id", s.id},
              {"modality", to_string(s.modality)},
              {"pretrained", s.pretrained},
              {"fusion", s.fusion ? to_string(*s.fusion) : "none"},
              {"protocol",
               Json{{"kind", protocol_name(s.protocol.kind)},
                    {"train_drug", s.protocol.train_drug},
                    {"test_drug", s.protocol.test_drug}}},
              {"folds", s.folds},
              {"seed", s.seed},
              {"optimizer", to_json(s.optimizer)},
              {"epochs", s.epochs},
              {"batch_size", s.batch_size},
              {"patience", s.patience},
              {"min_delta", s.min_delta},
              {"out_of_domain_seeds", s.out_of_domain_seeds},
              {"jobs", s.jobs}};
}

ExperimentSpec experiment_spec_from_json(const Json& j, std::vector<std::string>* warnings) {
  ExperimentSpec s;
  detail::JsonReader r(j, "experiment", warnings);
  r.read("id", s.id);
  std::string modality = to_string(s.modality);
  r.read("modality", modality);
  s.modality = parse_modality(modality);
  r.read("pretrained", s.pretrained);
  std::string fusion = s.modality == Modality::both ? "concat" : "none";
  r.read("fusion", fusion);
  s.fusion = fusion == "none" ? std::nullopt : std::optional<FusionKind>(parse_fusion_kind(fusion));
  if (const Json* p = r.child("protocol")) {
    detail::JsonReader pr(*p, "experiment.protocol", warnings);
    std::string kind = protocol_name(s.protocol.kind);
    pr.read("kind", kind);
    if (kind == "drug_agnostic") {
      s.protocol.kind = ProtocolKind::drug_agnostic;
    } else if (kind == "drug_specific") {
      s.protocol.kind = ProtocolKind::drug_specific;
    } else {
      throw ValueError("experiment.protocol.kind: unknown protocol '" + kind + "'");
    }
    pr.read("train_drug", s.protocol.train_drug);
    pr.read("test_drug", s.protocol.test_drug);
    pr.finish();
  }
  r.read("folds", s.folds);
  r.read("seed", s.seed);
  if (const Json* o = r.child("optimizer")) s.optimizer = adam_config_from_json(*o, warnings, "experiment.optimizer");
  r.read("epochs", s.epochs);
  r.read("batch_size", s.batch_size);
  r.read("patience", s.patience);
  r.read("min_delta", s.min_delta);
  r.read("out_of_domain_seeds", s.out_of_domain_seeds);
  r.read("jobs", s.jobs);
  r.finish();
  validate(s);
  return s;
}

ModelConfig resolve_model_config(const ExperimentSpec& spec, const ExperimentContext& ctx) {
  ModelConfig c = ctx.model;
  c.modality = spec.modality;
  c.fusion = spec.fusion.value_or(FusionKind::concat);
  validate(c);
  return c;
}

PreparedCohort PreparedCohort::subset(std::span<const std::size_t> indices) const {
  PreparedCohort out;
  out.fingerprint = fingerprint;
  for (std::size_t i : indices) {
    out.ids.push_back(ids.at(i));
    out.labels.push_back(labels.at(i));
    out.drugs.push_back(drugs.at(i));
    out.subjects.push_back(subjects.at(i));
  }
  return out;
}

PreparedCohort prepare_cohort(const Cohort& cohort, const PreprocessConfig& config, std::size_t jobs) {
  std::vector<const SubjectRecord*> sorted;
  for (const auto& s : cohort.subjects) {
    if (!s.label) throw ValueError("subject '" + s.subject_id + "' has no label");
    sorted.push_back(&s);
  }
  std::sort(sorted.begin(), sorted.end(), [](auto* a, auto* b) { return a->subject_id < b->subject_id; });
  for (std::size_t i = 1; i < sorted.size(); ++i) {
    if (sorted[i]->subject_id == sorted[i - 1]->subject_id) {
      throw ValueError("duplicate subject id '" + sorted[i]->subject_id + "'");
    }
  }
  PreparedCohort out;
  out.fingerprint = cohort.fingerprint;
  out.subjects.resize(sorted.size());
  for (const auto* s : sorted) {
    out.ids.push_back(s->subject_id);
    out.labels.push_back(*s->label);
    out.drugs.push_back(s->drug);
  }
  parallel_for(sorted.size(), jobs, [&](std::size_t i) { out.subjects[i] = prepare(sorted[i]->series, config); });
  return out;
}

std::vector<Tensor> encode_ts_stream(const Model& model, const PreparedCohort& data, std::size_t jobs) {
  std::vector<Tensor> out(data.size());
  parallel_for(data.size(), jobs, [&](std::size_t i) { out[i] = ts_encode(model, data.subjects[i].tokens); });
  return out;
}

TrainResult train_model(const PreparedCohort& data, std::span<const std::size_t> train, const ExperimentSpec& spec,
                        const ExperimentContext& ctx, std::uint64_t seed, const std::vector<Tensor>* ts_cache) {
  validate(spec);
  if (train.empty()) throw ValueError("train_model: empty training set");
  TrainResult result;
  result.model = initial_model(spec, ctx, seed);
  Model& model = result.model;
  const ModelConfig& config = model.config;
  const bool frozen = ts_frozen(spec, config);

  std::vector<Tensor> local_cache;
  if (frozen && !ts_cache) {
    local_cache = encode_ts_stream(model, data, spec.jobs);
    ts_cache = &local_cache;
  }
  if (!frozen) ts_cache = nullptr;
  if (ts_cache && ts_cache->size() != data.size()) throw ShapeError("train_model: TS cache does not cover the cohort");

  Params::TrainablePredicate trainable = [frozen](const std::string& name) { return !(frozen && is_ts_parameter(name)); };
  OptimizerState opt;
  opt.config = spec.optimizer;
  std::vector<std::size_t> order(train.begin(), train.end());
  double best = std::numeric_limits<double>::infinity();
  std::size_t stale = 0;

  for (std::size_t epoch = 1; epoch <= spec.epochs; ++epoch) {
    Rng rng(derive_seed(derive_seed(seed, kShuffleStream), epoch));
    rng.shuffle(std::span<std::size_t>(order));
    double total_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += spec.batch_size) {
      const std::size_t b = std::min(spec.batch_size, order.size() - start);
      std::vector<GradientMap> grads(b);
      std::vector<double> losses(b);
      parallel_for(b, spec.jobs, [&](std::size_t k) {
        const std::size_t i = order[start + k];
        Graph g;
        Params p(g, model.params, trainable);
        Var logit = subject_logit(p, config, data.subjects[i], ts_cache ? &(*ts_cache)[i] : nullptr);
        Var label = p.constant(Tensor::full({1, 1}, static_cast<double>(data.labels[i]), DType::f64));
        Var loss = ops::bce_with_logits(logit, label);
        losses[k] = loss.value().item();
        grads[k] = g.backward(loss);
      });
      GradientMap sum;
      for (std::size_t k = 0; k < b; ++k) {
        if (!std::isfinite(losses[k])) {
          throw DivergenceError("training diverged at epoch " + std::to_string(epoch) + " on subject '" +
                                data.ids[order[start + k]] + "': loss " + std::to_string(losses[k]));
        }
        accumulate_gradients(sum, grads[k]);
        total_loss += losses[k];
      }
      adam_step(opt, model.params, scale_gradients(sum, 1.0 / static_cast<double>(b)));
    }
    const double loss = total_loss / static_cast<double>(order.size());
    result.history.push_back({epoch, loss});
    if (loss < best - spec.min_delta) {
      best = loss;
      stale = 0;
    } else if (++stale >= spec.patience) {
      result.stopped_early = epoch < spec.epochs;
      break;
    }
  }
  for (const auto& [name, t] : model.params) {
    const auto values = t.to_vector();
    if (!std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); })) {
      throw DivergenceError("training produced non-finite parameter '" + name + "'");
    }
  }
  model.provenance.init_seed = seed;
  return result;
}

TrainResult train_model(const PreparedCohort& data, const FoldSplit& split, std::size_t fold, const ExperimentSpec& spec,
                        const ExperimentContext& ctx) {
  if (fold >= split.folds.size()) throw ValueError("fold " + std::to_string(fold) + " out of range");
  const auto train = split.train_indices(fold);
  return train_model(data, train, spec, ctx, derive_seed(spec.seed, fold + 1));
}

std::vector<double> predict(const Model& model, const PreparedCohort& data, std::span<const std::size_t> indices,
                            const std::vector<Tensor>* ts_cache, std::size_t jobs) {
  std::vector<double> out(indices.size());
  parallel_for(indices.size(), jobs, [&](std::size_t k) {
    const std::size_t i = indices[k];
    Graph g(false);
    Params p(g, model.params, nullptr);
    out[k] = sigmoid(subject_logit(p, model.config, data.subjects[i], ts_cache ? &(*ts_cache)[i] : nullptr).value().item());
  });
  return out;
}

void write_train_history(const std::vector<TrainHistoryRow>& history, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out.precision(17);
  out << "epoch,loss\n";
  for (const auto& row : history) out << row.epoch << ',' << row.loss << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

namespace {

Evaluation evaluate(const Model& model, const PreparedCohort& data, std::span<const std::size_t> test,
                    const std::vector<Tensor>* cache, std::size_t jobs, std::string name) {
  Evaluation e;
  e.name = std::move(name);
  std::vector<int> labels;
  for (std::size_t i : test) {
    labels.push_back(data.labels[i]);
    e.subject_ids.push_back(data.ids[i]);
  }
  e.metrics = compute_metrics(predict(model, data, test, cache, jobs), labels);
  return e;
}

void persist_fold(const ExperimentContext& ctx, const ExperimentSpec& spec, const std::string& name,
                  const TrainResult& trained) {
  if (ctx.output_dir.empty()) return;
  const auto dir = ctx.output_dir / spec.id / name;
  std::filesystem::create_directories(dir);
  save_model(trained.model, dir / "model.fmtc");
  write_train_history(trained.history, dir / "history.csv");
}

Json report_details(const ExperimentSpec& spec, const PreparedCohort& data, const std::string& protocol) {
  return Json{{"spec", to_json(spec)}, {"cohort_fingerprint", data.fingerprint}, {"protocol", protocol},
              {"subjects", data.size()}};
}

}  // namespace

CvResult run_cv(const PreparedCohort& data, const ExperimentSpec& spec, const ExperimentContext& ctx) {
  validate(spec);
  CvResult out;
  out.split = stratified_kfold(data.labels, spec.folds, spec.seed);
  const std::vector<Tensor> cache = shared_ts_cache(spec, ctx, data);
  out.report.experiment_id = spec.id;
  for (std::size_t f = 0; f < spec.folds; ++f) {
    const auto train = out.split.train_indices(f);
    TrainResult trained =
        train_model(data, train, spec, ctx, derive_seed(spec.seed, f + 1), cache.empty() ? nullptr : &cache);
    const std::string name = "fold" + std::to_string(f);
    const auto& test = out.split.folds[f];
    // A frozen random encoder differs per fold, so only the shared cache is reused here.
    out.report.evaluations.push_back(
        evaluate(trained.model, data, test, cache.empty() ? nullptr : &cache, spec.jobs, name));
    persist_fold(ctx, spec, name, trained);
    out.fold_models.push_back(std::move(trained.model));
  }
  summarize(out.report);
  out.report.details = report_details(spec, data, "cross_validation");
  Json folds = Json::array();
  for (const auto& f : out.split.folds) {
    Json ids = Json::array();
    for (std::size_t i : f) ids.push_back(data.ids[i]);
    folds.push_back(ids);
  }
  out.report.details["split"] = folds;
  if (!ctx.output_dir.empty()) write_report(out.report, ctx.output_dir / spec.id);
  return out;
}

MetricsReport run_cv(const Cohort& cohort, const ExperimentSpec& spec, const ExperimentContext& ctx) {
  return run_cv(prepare_cohort(cohort, ctx.preprocess, spec.jobs), spec, ctx).report;
}

MetricsReport random_baseline(std::span<const int> labels, std::size_t repeats, std::uint64_t seed) {
  if (repeats == 0) throw ValueError("random_baseline: repeats must be >= 1");
  MetricsReport r;
  r.experiment_id = "random";
  Rng rng(seed);
  std::vector<double> guesses(labels.size());
  for (std::size_t k = 0; k < repeats; ++k) {
    for (auto& g : guesses) g = rng.bernoulli(0.5) ? 1.0 : 0.0;
    r.evaluations.push_back({"repeat" + std::to_string(k), compute_metrics(guesses, labels), {}});
  }
  summarize(r);
  r.details = Json{{"repeats", repeats}, {"seed", seed}, {"subjects", labels.size()}};
  return r;
}

std::vector<std::size_t> drug_indices(const PreparedCohort& data, const std::string& drug) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data.drugs[i] == drug) out.push_back(i);
  }
  if (out.empty()) {
    std::vector<std::string> names(data.drugs.begin(), data.drugs.end());
    std::sort(names.begin(), names.end());
    names.erase(std::unique(names.begin(), names.end()), names.end());
    std::string available;
    for (const auto& n : names) available += (available.empty() ? "" : ", ") + n;
    throw ValueError("no subjects with drug '" + drug + "' (available: " + available + ")");
  }
  return out;
}

MetricsReport drug_protocol(const PreparedCohort& data, const std::string& train_drug, const std::string& test_drug,
                            const ExperimentSpec& spec, const ExperimentContext& ctx) {
  validate(spec);
  const auto source = drug_indices(data, train_drug);
  const auto target = drug_indices(data, test_drug);
  if (train_drug == test_drug) {
    const PreparedCohort subset = data.subset(source);
    MetricsReport r = run_cv(subset, spec, ctx).report;
    r.details["protocol"] = "within_domain";
    r.details["train_drug"] = r.details["test_drug"] = train_drug;
    return r;
  }
  const std::vector<Tensor> cache = shared_ts_cache(spec, ctx, data);
  MetricsReport r;
  r.experiment_id = spec.id;
  for (std::size_t s = 0; s < spec.out_of_domain_seeds; ++s) {
    const std::uint64_t seed = derive_seed(derive_seed(spec.seed, kOutOfDomainStream), s);
    TrainResult trained = train_model(data, source, spec, ctx, seed, cache.empty() ? nullptr : &cache);
    const std::string name = "seed" + std::to_string(s);
    r.evaluations.push_back(evaluate(trained.model, data, target, cache.empty() ? nullptr : &cache, spec.jobs, name));
    persist_fold(ctx, spec, name, trained);
  }
  summarize(r);
  r.details = report_details(spec, data, "out_of_domain");
  r.details["train_drug"] = train_drug;
  r.details["test_drug"] = test_drug;
  r.details["train_subjects"] = source.size();
  r.details["test_subjects"] = target.size();
  if (!ctx.output_dir.empty()) write_report(r, ctx.output_dir / spec.id);
  return r;
}

std::vector<ExperimentSpec> ablation_specs(const ExperimentSpec& base) {
  const FusionKind fusion = base.fusion.value_or(FusionKind::concat);
  auto cell = [&](const char* id, Modality m, bool pretrained) {
    ExperimentSpec s = base;
    s.id = id;
    s.modality = m;
    s.pretrained = pretrained;
    s.fusion = m == Modality::both ? std::optional<FusionKind>(fusion) : std::nullopt;
    return s;
  };
  return {cell("exp5_fc_scratch", Modality::fc, false), cell("exp7_ts_pretrained", Modality::ts, true),
          cell("exp8_both_scratch", Modality::both, false), cell("exp9_both_pretrained", Modality::both, true)};
}

}  // namespace fmm
