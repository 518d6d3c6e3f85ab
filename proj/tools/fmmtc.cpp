#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fmm/errors.hpp"
#include "fmm/harness.hpp"
#include "fmm/interpret.hpp"
#include "fmm/pretrain.hpp"
#include "fmm/run_config.hpp"

namespace fs = std::filesystem;
using namespace fmm;

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string modality;
  bool pretrained = false;
  std::string fusion;
  std::optional<std::size_t> folds;
  std::optional<std::size_t> jobs;
  std::string format = "json";
  std::string profile;
  std::string data;
  std::string encoder;
  std::string model;
  std::string grid;
  std::string train_drug;
  std::string test_drug;
  std::string probe;
  std::size_t corpus = 0;
  std::optional<std::size_t> epochs;
};

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  f << text;
  if (!f) throw IoError("cannot write '" + path.string() + "'");
}

RunConfig resolve(const Options& o) {
  std::vector<std::string> warnings;
  RunConfig c = o.config.empty() ? RunConfig{} : load_config(o.config, &warnings);
  for (const auto& w : warnings) std::cerr << "warning: " << w << '\n';
  if (o.seed) c.seed = *o.seed;
  if (!o.profile.empty()) c.profile = o.profile;
  if (!o.modality.empty()) {
    c.experiment.modality = parse_modality(o.modality);
    if (c.experiment.modality != Modality::both) c.experiment.fusion.reset();
    else if (!c.experiment.fusion) c.experiment.fusion = FusionKind::concat;
  }
  if (!o.fusion.empty()) c.experiment.fusion = o.fusion == "none" ? std::nullopt : std::optional(parse_fusion_kind(o.fusion));
  if (o.pretrained) c.experiment.pretrained = true;
  if (o.folds) c.experiment.folds = *o.folds;
  if (o.epochs) c.experiment.epochs = *o.epochs;
  if (o.jobs) c.experiment.jobs = c.pretrain.jobs = *o.jobs;
  if (!o.out.empty()) c.paths.report_dir = o.out;
  c.experiment.seed = c.seed;
  validate(c);
  return c;
}

fs::path output_dir(const RunConfig& c) {
  fs::create_directories(c.paths.report_dir);
  return c.paths.report_dir;
}

void write_resolved(RunConfig c, const fs::path& dir, const std::string& command) {
  c.provenance["command"] = command;
  write_text(dir / "resolved_config.json", canonical_dump_pretty(to_json(c)) + "\n");
}

Cohort cohort_for(const Options& o, const RunConfig& c) {
  if (!o.data.empty()) {
    std::vector<std::string> warnings;
    Cohort cohort = load_cohort(o.data, &warnings);
    for (const auto& w : warnings) std::cerr << "warning: " << w << '\n';
    return cohort;
  }
  return generate_synthetic_cohort(profile_by_name(c.profile), c.seed);
}

std::optional<PretrainResult> encoder_for(const Options& o, const RunConfig& c) {
  if (!c.experiment.pretrained || c.experiment.modality == Modality::fc) return std::nullopt;
  const fs::path path = o.encoder.empty() ? fs::path(c.paths.checkpoint_dir) / "encoder.fmtc" : fs::path(o.encoder);
  if (!fs::exists(path)) {
    throw IoError("pretrained run needs an encoder checkpoint at '" + path.string() +
                  "'; run 'fmmtc pretrain' first or pass --encoder");
  }
  return encoder_from_checkpoint(load_checkpoint(path));
}

ExperimentContext context_for(const RunConfig& c, const std::optional<PretrainResult>& encoder, const fs::path& out) {
  ExperimentContext ctx;
  ctx.model = c.model;
  ctx.preprocess = c.preprocess;
  ctx.encoder = encoder ? &*encoder : nullptr;
  ctx.output_dir = out;
  return ctx;
}

std::string render(const std::vector<MetricsReport>& reports, const std::string& format) {
  if (format == "csv") return reports_csv(reports);
  if (format == "md") return reports_markdown(reports);
  Json all = Json::array();
  for (const auto& r : reports) all.push_back(to_json(r));
  return canonical_dump_pretty(all) + "\n";
}

void record_inputs(RunConfig& c, const Cohort& cohort, const std::optional<PretrainResult>& encoder) {
  c.provenance["cohort_fingerprint"] = cohort.fingerprint;
  if (encoder) c.provenance["encoder"] = to_json(encoder->provenance);
}

int gen_data(const Options& o) {
  RunConfig c = resolve(o);
  const fs::path out = o.out.empty() ? fs::path(c.paths.data_dir) : fs::path(o.out);
  Cohort cohort;
  if (o.corpus > 0) {
    const GeneratorProfile profile = profile_by_name(c.profile);
    cohort = generate_pretrain_corpus(make_pretrain_family(profile, corpus_seed(c)), o.corpus, corpus_seed(c));
  } else {
    cohort = generate_synthetic_cohort(profile_by_name(c.profile), c.seed);
  }
  save_cohort(cohort, out);
  c.provenance["cohort_fingerprint"] = cohort.fingerprint;
  write_resolved(c, out, "gen-data");
  std::cout << "wrote " << cohort.subjects.size() << " subjects to " << out.string() << " (fingerprint "
            << cohort.fingerprint << ")\n";
  return 0;
}

int pretrain(const Options& o) {
  RunConfig c = resolve(o);
  const fs::path out = o.out.empty() ? fs::path(c.paths.checkpoint_dir) : fs::path(o.out);
  Cohort corpus;
  if (!o.data.empty()) {
    corpus = load_cohort(o.data);
  } else {
    const GeneratorProfile profile = profile_by_name(c.profile);
    corpus = generate_pretrain_corpus(make_pretrain_family(profile, corpus_seed(c)), c.pretrain_subjects, corpus_seed(c));
  }
  const PretrainResult r = mae_pretrain(corpus, c.model.ts, c.pretrain, encoder_seed(c));
  fs::create_directories(out);
  save_checkpoint(encoder_checkpoint(r), out / "encoder.fmtc");
  write_pretrain_history(r.history, out / "pretrain_history.csv");
  c.provenance["corpus_fingerprint"] = corpus.fingerprint;
  write_resolved(c, out, "pretrain");
  std::cout << "masked MSE " << r.initial_mse << " -> " << r.final_mse << "; encoder written to "
            << (out / "encoder.fmtc").string() << '\n';
  return 0;
}

int train(const Options& o) {
  RunConfig c = resolve(o);
  const fs::path out = output_dir(c);
  const Cohort cohort = cohort_for(o, c);
  const auto encoder = encoder_for(o, c);
  const PreparedCohort data = prepare_cohort(cohort, c.preprocess, c.experiment.jobs);
  std::vector<std::size_t> all(data.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  const TrainResult r = train_model(data, all, c.experiment, context_for(c, encoder, {}), c.seed);
  const fs::path dir = out / c.experiment.id;
  fs::create_directories(dir);
  save_model(r.model, dir / "model.fmtc");
  write_train_history(r.history, dir / "history.csv");
  record_inputs(c, cohort, encoder);
  write_resolved(c, out, "train");
  std::cout << "trained " << r.history.size() << " epochs, final loss " << r.history.back().loss << "; model written to "
            << (dir / "model.fmtc").string() << '\n';
  return 0;
}

int cv(const Options& o) {
  RunConfig c = resolve(o);
  const fs::path out = output_dir(c);
  const Cohort cohort = cohort_for(o, c);
  const PreparedCohort data = prepare_cohort(cohort, c.preprocess, c.experiment.jobs);
  std::vector<MetricsReport> reports;
  std::optional<PretrainResult> encoder;
  if (o.grid.empty()) {
    encoder = encoder_for(o, c);
    reports.push_back(run_cv(data, c.experiment, context_for(c, encoder, out)).report);
  } else if (o.grid == "ablation") {
    RunConfig pretrained = c;
    pretrained.experiment.pretrained = true;
    pretrained.experiment.modality = Modality::ts;
    encoder = encoder_for(o, pretrained);
    for (const auto& spec : ablation_specs(c.experiment)) {
      std::cerr << "running " << spec.id << '\n';
      reports.push_back(run_cv(data, spec, context_for(c, encoder, out)).report);
    }
  } else {
    throw ValueError("unknown grid '" + o.grid + "' (expected ablation)");
  }
  record_inputs(c, cohort, encoder);
  write_resolved(c, out, o.grid.empty() ? "cv" : "cv --grid " + o.grid);
  std::cout << render(reports, o.format);
  return 0;
}

int drug(const Options& o) {
  RunConfig c = resolve(o);
  const std::string train_drug = o.train_drug.empty() ? c.experiment.protocol.train_drug : o.train_drug;
  const std::string test_drug = o.test_drug.empty() ? c.experiment.protocol.test_drug : o.test_drug;
  if (train_drug.empty() || test_drug.empty()) throw ValueError("drug needs --train-drug and --test-drug");
  c.experiment.protocol = {ProtocolKind::drug_specific, train_drug, test_drug};
  const fs::path out = output_dir(c);
  const Cohort cohort = cohort_for(o, c);
  const auto encoder = encoder_for(o, c);
  const PreparedCohort data = prepare_cohort(cohort, c.preprocess, c.experiment.jobs);
  const MetricsReport r = drug_protocol(data, train_drug, test_drug, c.experiment, context_for(c, encoder, out));
  record_inputs(c, cohort, encoder);
  write_resolved(c, out, "drug");
  std::cout << render({r}, o.format);
  return 0;
}

int probe(const Options& o) {
  RunConfig c = resolve(o);
  if (!o.probe.empty()) c.probe.kind = parse_probe_kind(o.probe);
  if (c.experiment.modality != Modality::both) throw ValueError("probe needs modality both");
  const fs::path out = output_dir(c);
  const Cohort cohort = cohort_for(o, c);
  const auto encoder = encoder_for(o, c);
  const PreparedCohort data = prepare_cohort(cohort, c.preprocess, c.experiment.jobs);
  const CvResult trained = run_cv(data, c.experiment, context_for(c, encoder, {}));
  std::vector<Tensor> cache;
  if (encoder) cache = encode_ts_stream(trained.fold_models.front(), data, c.experiment.jobs);
  const Matrix raw = raw_fc_features(data);
  std::vector<Matrix> fused, fc, pca;
  for (std::size_t f = 0; f < trained.split.folds.size(); ++f) {
    fused.push_back(extract_features(trained.fold_models[f], data, cache.empty() ? nullptr : &cache, c.experiment.jobs));
    fc.push_back(raw);
    pca.push_back(fit_pca(raw, trained.split.train_indices(f)).transform(raw));
  }
  std::vector<MetricsReport> reports;
  const std::pair<const char*, const std::vector<Matrix>*> sets[] = {{"fused", &fused}, {"raw_fc", &fc}, {"pca_fc", &pca}};
  for (const auto& [name, features] : sets) {
    MetricsReport r = linear_probe(*features, data.labels, trained.split, c.probe);
    r.experiment_id = std::string("probe_") + to_string(c.probe.kind) + "_" + name;
    reports.push_back(r);
  }
  write_text(out / "probe.json", render(reports, "json"));
  record_inputs(c, cohort, encoder);
  write_resolved(c, out, "probe");
  std::cout << render(reports, o.format);
  return 0;
}

int interpret(const Options& o) {
  RunConfig c = resolve(o);
  const fs::path out = output_dir(c);
  const Cohort cohort = cohort_for(o, c);
  const PreparedCohort data = prepare_cohort(cohort, c.preprocess, c.experiment.jobs);
  std::optional<PretrainResult> encoder;
  Model model;
  if (!o.model.empty()) {
    model = load_model(o.model);
  } else {
    encoder = encoder_for(o, c);
    std::vector<std::size_t> all(data.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    model = train_model(data, all, c.experiment, context_for(c, encoder, {}), c.seed).model;
  }
  const auto reports = attribute_cohort(model, data, c.attribution_steps, nullptr, c.experiment.jobs);
  const ModalityImportance m = modality_importance(reports, model.config.ts.model_dim);
  write_attribution(reports, m, out);
  record_inputs(c, cohort, encoder);
  write_resolved(c, out, "interpret");
  double worst = 0.0;
  for (const auto& r : reports) worst = std::max(worst, r.residual);
  std::cout << "ts_share " << m.ts_share << " fc_share " << m.fc_share << " max completeness residual " << worst << '\n';
  return 0;
}

int report(const Options& o) {
  const fs::path dir = o.out.empty() ? fs::path(RunConfig{}.paths.report_dir) : fs::path(o.out);
  std::vector<std::string> ids;
  if (o.grid == "ablation") {
    for (const auto& s : ablation_specs({})) ids.push_back(s.id);
  } else if (!o.grid.empty()) {
    throw ValueError("unknown grid '" + o.grid + "' (expected ablation)");
  } else {
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (fs::exists(entry.path() / "report.json")) ids.push_back(entry.path().filename().string());
    }
    std::sort(ids.begin(), ids.end());
  }
  std::vector<MetricsReport> reports;
  for (const auto& id : ids) {
    const fs::path path = dir / id / "report.json";
    if (!fs::exists(path)) throw IoError("missing report '" + path.string() + "'; run the experiment first");
    std::ifstream in(path);
    Json j;
    try {
      j = Json::parse(in);
    } catch (const Json::parse_error& e) {
      throw FormatError("malformed report '" + path.string() + "': " + e.what());
    }
    reports.push_back(report_from_json(j));
  }
  if (reports.empty()) throw IoError("no reports found under '" + dir.string() + "'");
  const std::string text = render(reports, o.format);
  write_text(dir / ("summary." + o.format), text);
  std::cout << text;
  return 0;
}

void add_common(CLI::App* cmd, Options& o) {
  cmd->add_option("--config", o.config, "Run configuration (JSON)")->check(CLI::ExistingFile);
  cmd->add_option("--seed", o.seed, "Global seed");
  cmd->add_option("--out", o.out, "Output directory");
  cmd->add_option("--jobs", o.jobs, "Worker threads (results do not depend on it)")->check(CLI::PositiveNumber);
}

void add_experiment(CLI::App* cmd, Options& o) {
  cmd->add_option("--modality", o.modality, "Input streams")->check(CLI::IsMember({"ts", "fc", "both"}));
  cmd->add_flag("--pretrained", o.pretrained, "Load and freeze a pretrained TS encoder");
  cmd->add_option("--fusion", o.fusion, "Fusion scheme")->check(CLI::IsMember({"concat", "sum", "cross_uni", "cross_bi", "moe", "none"}));
  cmd->add_option("--folds", o.folds, "Cross-validation folds");
  cmd->add_option("--epochs", o.epochs, "Training epochs");
  cmd->add_option("--profile", o.profile, "Generator profile")->check(CLI::IsMember(profile_names()));
  cmd->add_option("--data", o.data, "Cohort directory written by gen-data (default: generate from the profile)");
  cmd->add_option("--encoder", o.encoder, "Pretrained encoder checkpoint");
}

void add_format(CLI::App* cmd, Options& o) {
  cmd->add_option("--format", o.format, "Report format")->check(CLI::IsMember({"json", "csv", "md"}));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fmmtc: dual-stream fMRI drug-response models at desk scale"};
  app.require_subcommand(1);
  Options o;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic cohort or pretraining corpus");
  add_common(gen, o);
  gen->add_option("--profile", o.profile, "Generator profile")->check(CLI::IsMember(profile_names()));
  gen->add_option("--corpus", o.corpus, "Write an unlabelled pretraining corpus of this many subjects instead");

  auto* pre = app.add_subcommand("pretrain", "Masked-autoencoder pretraining of the TS encoder");
  add_common(pre, o);
  pre->add_option("--profile", o.profile, "Generator profile the corpus family is built around")
      ->check(CLI::IsMember(profile_names()));
  pre->add_option("--data", o.data, "Corpus directory (default: generate)");

  auto* tr = app.add_subcommand("train", "Train one model on the whole cohort");
  auto* cvc = app.add_subcommand("cv", "Stratified k-fold cross-validation");
  auto* dr = app.add_subcommand("drug", "Drug-specific protocol");
  auto* pr = app.add_subcommand("probe", "Linear and k-NN probes on fused, raw FC and PCA features");
  auto* in = app.add_subcommand("interpret", "Integrated gradients on the fused features");
  for (auto* cmd : {tr, cvc, dr, pr, in}) {
    add_common(cmd, o);
    add_experiment(cmd, o);
  }
  for (auto* cmd : {cvc, dr, pr}) add_format(cmd, o);
  cvc->add_option("--grid", o.grid, "Run a named grid of experiments")->check(CLI::IsMember({"ablation"}));
  dr->add_option("--train-drug", o.train_drug, "Training drug");
  dr->add_option("--test-drug", o.test_drug, "Evaluation drug");
  pr->add_option("--probe", o.probe, "Probe kind")->check(CLI::IsMember({"ridge", "knn"}));
  in->add_option("--model", o.model, "Trained model checkpoint (default: train one)");

  auto* rep = app.add_subcommand("report", "Render saved reports");
  rep->add_option("--out", o.out, "Directory holding <experiment>/report.json");
  rep->add_option("--grid", o.grid, "Named grid")->check(CLI::IsMember({"ablation"}));
  add_format(rep, o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "error: " << e.what() << "\n\n";
    const auto selected = app.get_subcommands();
    std::cerr << (selected.empty() ? app.help() : selected.back()->help());
    return 2;
  }

  try {
    if (*gen) return gen_data(o);
    if (*pre) return pretrain(o);
    if (*tr) return train(o);
    if (*cvc) return cv(o);
    if (*dr) return drug(o);
    if (*pr) return probe(o);
    if (*in) return interpret(o);
    if (*rep) return report(o);
  } catch (const fmm::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
