#include "fmm/run_config.hpp"

#include "binary_io.hpp"
#include "fmm/errors.hpp"
#include "fmm/rng.hpp"
#include "json_reader.hpp"

namespace fmm {

void validate(const RunConfig& c) {
  validate(c.experiment);
  validate(resolve_model_config(c.experiment, ExperimentContext{c.model, c.preprocess, nullptr, {}}));
  validate(c.pretrain);
  const GeneratorProfile profile = profile_by_name(c.profile);
  if (c.model.ts.max_rois != profile.n_rois || c.model.fc.n_rois != profile.n_rois) {
    throw ValueError("model: profile '" + c.profile + "' has " + std::to_string(profile.n_rois) +
                     " ROIs but the encoders expect " + std::to_string(c.model.ts.max_rois) + " (ts) and " +
                     std::to_string(c.model.fc.n_rois) + " (fc)");
  }
  if (c.preprocess.patch_size != c.model.ts.patch_size || c.pretrain.preprocess.patch_size != c.model.ts.patch_size) {
    throw ValueError("preprocess.patch_size must equal model.ts.patch_size (" + std::to_string(c.model.ts.patch_size) + ")");
  }
  if (c.preprocess.target_length != c.model.ts.max_patches * c.model.ts.patch_size) {
    throw ValueError("preprocess.target_length must be model.ts.max_patches * patch_size = " +
                     std::to_string(c.model.ts.max_patches * c.model.ts.patch_size));
  }
  if (c.pretrain_subjects == 0) throw ValueError("pretrain_subjects must be >= 1");
  if (c.attribution_steps == 0) throw ValueError("attribution_steps must be >= 1");
  if (c.probe.kind == ProbeKind::ridge && !(c.probe.lambda > 0.0)) throw ValueError("probe.lambda must be > 0");
  if (c.probe.kind == ProbeKind::knn && c.probe.neighbours == 0) throw ValueError("probe.neighbours must be >= 1");
}

Json to_json(const RunConfig& c) {
  Json experiment = to_json(c.experiment);
  experiment.erase("seed");  // the global seed is authoritative
  return Json{{"paths",
               Json{{"data_dir", c.paths.data_dir},
                    {"checkpoint_dir", c.paths.checkpoint_dir},
                    {"report_dir", c.paths.report_dir}}},
              {"profile", c.profile},
              {"model", to_json(c.model)},
              {"preprocess", Json{{"target_length", c.preprocess.target_length}, {"patch_size", c.preprocess.patch_size}}},
              {"pretrain", to_json(c.pretrain)},
              {"pretrain_subjects", c.pretrain_subjects},
              {"experiment", experiment},
              {"probe",
               Json{{"kind", to_string(c.probe.kind)},
                    {"lambda", c.probe.lambda},
                    {"neighbours", c.probe.neighbours},
                    {"standardize", c.probe.standardize}}},
              {"attribution_steps", c.attribution_steps},
              {"seed", c.seed},
              {"provenance", c.provenance}};
}

RunConfig run_config_from_json(const Json& j, std::vector<std::string>* warnings) {
  RunConfig c;
  detail::JsonReader r(j, "config", warnings);
  if (const Json* p = r.child("paths")) {
    detail::JsonReader pr(*p, "config.paths", warnings);
    pr.read("data_dir", c.paths.data_dir);
    pr.read("checkpoint_dir", c.paths.checkpoint_dir);
    pr.read("report_dir", c.paths.report_dir);
    pr.finish();
  }
  r.read("profile", c.profile);
  if (const Json* m = r.child("model")) {
    // Partial model objects patch the desk defaults rather than the fidelity ones.
    Json merged = to_json(c.model);
    merged.merge_patch(*m);
    c.model = model_config_from_json(merged, warnings);
  }
  if (const Json* p = r.child("preprocess")) {
    detail::JsonReader pr(*p, "config.preprocess", warnings);
    pr.read("target_length", c.preprocess.target_length);
    pr.read("patch_size", c.preprocess.patch_size);
    pr.finish();
  }
  if (const Json* p = r.child("pretrain")) c.pretrain = pretrain_config_from_json(*p, warnings);
  r.read("pretrain_subjects", c.pretrain_subjects);
  if (const Json* e = r.child("experiment")) {
    Json copy = *e;
    if (copy.contains("seed")) {
      if (warnings) warnings->push_back("config key 'experiment.seed' is ignored; the top-level seed is used");
      copy.erase("seed");
    }
    c.experiment = experiment_spec_from_json(copy, warnings);
  }
  if (const Json* p = r.child("probe")) {
    detail::JsonReader pr(*p, "config.probe", warnings);
    std::string kind = to_string(c.probe.kind);
    pr.read("kind", kind);
    c.probe.kind = parse_probe_kind(kind);
    pr.read("lambda", c.probe.lambda);
    pr.read("neighbours", c.probe.neighbours);
    pr.read("standardize", c.probe.standardize);
    pr.finish();
  }
  r.read("attribution_steps", c.attribution_steps);
  r.read("seed", c.seed);
  if (const Json* p = r.child("provenance")) c.provenance = *p;
  r.finish();
  c.experiment.seed = c.seed;
  validate(c);
  return c;
}

RunConfig load_config(const std::filesystem::path& path, std::vector<std::string>* warnings) {
  if (!std::filesystem::exists(path)) throw IoError("config file '" + path.string() + "' does not exist");
  Json j;
  try {
    j = Json::parse(detail::read_text(path));
  } catch (const Json::parse_error& e) {
    throw FormatError("malformed config '" + path.string() + "' at byte " + std::to_string(e.byte) + ": " + e.what());
  }
  return run_config_from_json(j, warnings);
}

std::uint64_t corpus_seed(const RunConfig& c) { return derive_seed(c.seed, 1); }
std::uint64_t encoder_seed(const RunConfig& c) { return derive_seed(c.seed, 2); }

}  // namespace fmm
