#include "fmm/pretrain.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "fmm/errors.hpp"
#include "fmm/parallel.hpp"
#include "fmm/rng.hpp"
#include "json_reader.hpp"
#include "model_internal.hpp"

namespace fmm {

namespace {

constexpr std::uint64_t kInitStream = 1;
constexpr std::uint64_t kEvalMaskStream = 2;
constexpr std::uint64_t kShuffleStream = 3;
constexpr std::uint64_t kTrainMaskStream = 4;

std::uint64_t name_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  return derive_seed(derive_seed(seed, stream), index);
}

}  // namespace

MaskPlan mask_tokens(std::size_t token_count, double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw ValueError("mask ratio must lie in (0, 1), got " + std::to_string(ratio));
  const auto k = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(token_count)));
  if (k == 0 || k >= token_count) {
    throw ValueError("mask ratio " + std::to_string(ratio) + " on " + std::to_string(token_count) +
                     " tokens leaves no masked or no visible token");
  }
  std::vector<std::size_t> order(token_count);
  std::iota(order.begin(), order.end(), 0);
  // Partial Fisher-Yates: the first k slots become the masked set.
  Rng rng(seed);
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + rng.below(token_count - i);
    std::swap(order[i], order[j]);
  }
  MaskPlan plan;
  plan.ratio = ratio;
  plan.seed = seed;
  plan.token_count = token_count;
  plan.masked.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  plan.visible.assign(order.begin() + static_cast<std::ptrdiff_t>(k), order.end());
  std::sort(plan.masked.begin(), plan.masked.end());
  std::sort(plan.visible.begin(), plan.visible.end());
  return plan;
}

MaskedTokens mask_tokens(const TokenSequence& tokens, double ratio, std::uint64_t seed) {
  MaskedTokens out;
  out.plan = mask_tokens(tokens.token_count(), ratio, seed);
  out.visible_values.reserve(out.plan.visible.size() * tokens.patch_size);
  for (std::size_t i : out.plan.visible) {
    const auto t = tokens.token(i);
    out.visible_values.insert(out.visible_values.end(), t.begin(), t.end());
  }
  return out;
}

double reconstruction_loss(const Tensor& predicted, const Tensor& truth, const MaskPlan& plan) {
  if (predicted.shape() != truth.shape() || predicted.rank() != 2) {
    throw ShapeError("reconstruction_loss: predicted " + shape_string(predicted.shape()) + " vs truth " +
                     shape_string(truth.shape()));
  }
  if (predicted.dim(0) != plan.token_count) {
    throw ShapeError("reconstruction_loss: " + std::to_string(predicted.dim(0)) + " rows for a plan over " +
                     std::to_string(plan.token_count) + " tokens");
  }
  const std::size_t p = predicted.dim(1);
  double acc = 0.0;
  for (std::size_t i : plan.masked) {
    for (std::size_t j = 0; j < p; ++j) {
      const double d = predicted.at(i * p + j) - truth.at(i * p + j);
      acc += d * d;
    }
  }
  return acc / static_cast<double>(plan.masked.size() * p);
}

void validate(const PretrainConfig& c) {
  if (!(c.mask_ratio > 0.0 && c.mask_ratio < 1.0)) throw ValueError("pretrain.mask_ratio must lie in (0, 1)");
  if (c.epochs == 0) throw ValueError("pretrain.epochs must be >= 1");
  if (c.batch_size == 0) throw ValueError("pretrain.batch_size must be >= 1");
  if (c.eval_subjects == 0) throw ValueError("pretrain.eval_subjects must be >= 1");
  if (c.preprocess.patch_size == 0 || c.preprocess.target_length % c.preprocess.patch_size != 0) {
    throw ValueError("pretrain.preprocess.target_length must be a multiple of patch_size");
  }
  validate(c.optimizer);
}

Json to_json(const PretrainConfig& c) {
  return Json{{"mask_ratio", c.mask_ratio},
              {"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"decoder_layers", c.decoder_layers},
              {"optimizer", to_json(c.optimizer)},
              {"preprocess", Json{{"target_length", c.preprocess.target_length}, {"patch_size", c.preprocess.patch_size}}},
              {"eval_subjects", c.eval_subjects},
              {"dtype", to_string(c.dtype)},
              {"jobs", c.jobs}};
}

PretrainConfig pretrain_config_from_json(const Json& j, std::vector<std::string>* warnings) {
  PretrainConfig c;
  detail::JsonReader r(j, "pretrain", warnings);
  r.read("mask_ratio", c.mask_ratio);
  r.read("epochs", c.epochs);
  r.read("batch_size", c.batch_size);
  r.read("decoder_layers", c.decoder_layers);
  r.read("eval_subjects", c.eval_subjects);
  r.read("jobs", c.jobs);
  std::string dtype = to_string(c.dtype);
  r.read("dtype", dtype);
  c.dtype = parse_dtype(dtype);
  if (const Json* o = r.child("optimizer")) c.optimizer = adam_config_from_json(*o, warnings, "pretrain.optimizer");
  if (const Json* pp = r.child("preprocess")) {
    detail::JsonReader pr(*pp, "pretrain.preprocess", warnings);
    pr.read("target_length", c.preprocess.target_length);
    pr.read("patch_size", c.preprocess.patch_size);
    pr.finish();
  }
  r.finish();
  validate(c);
  return c;
}

std::map<std::string, Shape> decoder_parameter_shapes(const TsEncoderConfig& c, std::size_t decoder_layers) {
  std::map<std::string, Shape> out;
  const std::size_t d = c.model_dim;
  detail::add_linear(out, "mae.enc_to_dec", d, d);
  out["mae.mask_token"] = {1, d};
  out["mae.cls_pos"] = {1, d};
  out["mae.roi_pos"] = {c.max_rois, d};
  out["mae.patch_pos"] = {c.max_patches, d};
  detail::add_transformer_shapes(out, "mae.", decoder_layers, d, c.ff_multiplier);
  detail::add_linear(out, "mae.recon", d, c.patch_size);
  return out;
}

Var mae_loss(Params& p, const TsEncoderConfig& c, std::size_t decoder_layers, const TokenSequence& tokens,
             const MaskPlan& plan) {
  const std::size_t n = tokens.token_count();
  if (plan.token_count != n) {
    throw ShapeError("mask plan covers " + std::to_string(plan.token_count) + " tokens, sequence has " +
                     std::to_string(n));
  }
  // Encoder sees the class token and the visible patches only.
  Var enc = ops::concat({p("ts.cls"), embed_tokens(p, c, tokens, plan.visible)}, 0);
  enc = transformer_stack(p, "ts.", c.layers, c.heads, enc, c.attention, c.landmarks);
  Var table = ops::concat({detail::linear(p, "mae.enc_to_dec", enc), p("mae.mask_token")}, 0);

  // Row 0 of the table is the class token, rows 1..V the visible tokens and
  // the last row the shared mask token.
  const std::size_t v = plan.visible.size();
  std::vector<std::size_t> layout(n + 1, v + 1);
  layout[0] = 0;
  for (std::size_t r = 0; r < v; ++r) layout[plan.visible[r] + 1] = r + 1;
  std::vector<std::size_t> rois(n), patches(n);
  for (std::size_t i = 0; i < n; ++i) {
    rois[i] = static_cast<std::size_t>(tokens.roi_index[i]);
    patches[i] = static_cast<std::size_t>(tokens.patch_index[i]);
  }
  Var pos = ops::add(ops::embed_lookup(p("mae.roi_pos"), rois), ops::embed_lookup(p("mae.patch_pos"), patches));
  Var dec = ops::add(ops::embed_lookup(table, layout), ops::concat({p("mae.cls_pos"), pos}, 0));
  dec = transformer_stack(p, "mae.", decoder_layers, c.heads, dec, AttentionKind::exact, c.landmarks);

  std::vector<std::size_t> rows(plan.masked.size());
  std::vector<double> truth(plan.masked.size() * c.patch_size);
  for (std::size_t i = 0; i < plan.masked.size(); ++i) {
    rows[i] = plan.masked[i] + 1;
    const auto t = tokens.token(plan.masked[i]);
    std::copy(t.begin(), t.end(), truth.begin() + static_cast<std::ptrdiff_t>(i * c.patch_size));
  }
  Var pred = detail::linear(p, "mae.recon", ops::embed_lookup(dec, rows));
  Var diff = ops::sub(pred, p.constant(Tensor::from_values({rows.size(), c.patch_size}, truth, DType::f64)));
  return ops::mean(ops::mul(diff, diff));
}

namespace {

double evaluate(const ParameterMap& params, const TsEncoderConfig& c, std::size_t decoder_layers,
                const std::vector<PreparedSubject>& data, const std::vector<MaskPlan>& plans, std::size_t jobs) {
  std::vector<double> losses(plans.size());
  parallel_for(plans.size(), jobs, [&](std::size_t i) {
    Graph g(false);
    Params p(g, params, nullptr);
    losses[i] = mae_loss(p, c, decoder_layers, data[i].tokens, plans[i]).value().item();
  });
  return std::accumulate(losses.begin(), losses.end(), 0.0) / static_cast<double>(losses.size());
}

void check_finite(double loss, std::size_t epoch) {
  if (!std::isfinite(loss)) {
    throw DivergenceError("pretraining diverged at epoch " + std::to_string(epoch) + ": masked MSE is " +
                          std::to_string(loss));
  }
}

}  // namespace

PretrainResult mae_pretrain(const Cohort& corpus, const TsEncoderConfig& config, const PretrainConfig& pc,
                            std::uint64_t seed) {
  if (corpus.subjects.empty()) throw ValueError("pretraining corpus is empty");
  validate(config);
  validate(pc);
  if (pc.preprocess.patch_size != config.patch_size) {
    throw ValueError("preprocess patch_size " + std::to_string(pc.preprocess.patch_size) +
                     " does not match encoder patch_size " + std::to_string(config.patch_size));
  }

  std::vector<PreparedSubject> data(corpus.subjects.size());
  parallel_for(data.size(), pc.jobs, [&](std::size_t i) { data[i] = prepare(corpus.subjects[i].series, pc.preprocess); });

  ParameterMap params = init_ts_parameters(config, pc.dtype, derive_seed(seed, kInitStream));
  for (const auto& [name, shape] : decoder_parameter_shapes(config, pc.decoder_layers)) {
    params.emplace(name, init_parameter(name, shape, pc.dtype, derive_seed(seed, kInitStream)));
  }

  const std::size_t n_eval = std::min(pc.eval_subjects, data.size());
  std::vector<PreparedSubject> eval_data(data.begin(), data.begin() + static_cast<std::ptrdiff_t>(n_eval));
  std::vector<MaskPlan> eval_plans;
  for (std::size_t i = 0; i < n_eval; ++i) {
    eval_plans.push_back(mask_tokens(data[i].tokens.token_count(), pc.mask_ratio, name_seed(seed, kEvalMaskStream, i)));
  }

  PretrainResult result;
  result.encoder_config = config;
  result.initial_mse = evaluate(params, config, pc.decoder_layers, eval_data, eval_plans, pc.jobs);
  check_finite(result.initial_mse, 0);
  result.history.push_back({0, result.initial_mse, 0.0});

  OptimizerState opt;
  opt.config = pc.optimizer;
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 1; epoch <= pc.epochs; ++epoch) {
    Rng shuffle_rng(name_seed(seed, kShuffleStream, epoch));
    shuffle_rng.shuffle(std::span<std::size_t>(order));
    const std::uint64_t mask_seed = name_seed(seed, kTrainMaskStream, epoch);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += pc.batch_size) {
      const std::size_t b = std::min(pc.batch_size, order.size() - start);
      std::vector<GradientMap> grads(b);
      std::vector<double> losses(b);
      parallel_for(b, pc.jobs, [&](std::size_t k) {
        const std::size_t i = order[start + k];
        const MaskPlan plan = mask_tokens(data[i].tokens.token_count(), pc.mask_ratio, derive_seed(mask_seed, i));
        Graph g;
        Params p(g, params, [](const std::string&) { return true; });
        Var loss = mae_loss(p, config, pc.decoder_layers, data[i].tokens, plan);
        losses[k] = loss.value().item();
        grads[k] = g.backward(loss);
      });
      GradientMap total;
      for (std::size_t k = 0; k < b; ++k) {
        check_finite(losses[k], epoch);
        accumulate_gradients(total, grads[k]);
        epoch_loss += losses[k];
      }
      adam_step(opt, params, scale_gradients(total, 1.0 / static_cast<double>(b)));
    }
    const double eval = evaluate(params, config, pc.decoder_layers, eval_data, eval_plans, pc.jobs);
    check_finite(eval, epoch);
    result.history.push_back({epoch, eval, epoch_loss / static_cast<double>(order.size())});
  }
  result.final_mse = result.history.back().masked_mse;

  for (auto& [name, t] : params) {
    if (is_ts_parameter(name)) result.encoder.emplace(name, std::move(t));
  }
  result.provenance.pretrained = true;
  result.provenance.init_seed = seed;
  result.provenance.pretrain_seed = seed;
  result.provenance.pretrain_fingerprint = corpus.fingerprint;
  return result;
}

Checkpoint encoder_checkpoint(const PretrainResult& r) {
  Json history = Json::array();
  for (const auto& row : r.history) history.push_back(Json{{"epoch", row.epoch}, {"masked_mse", row.masked_mse}});
  Checkpoint ck;
  ck.config = Json{{"kind", "ts_encoder"},
                   {"encoder", to_json(r.encoder_config)},
                   {"provenance", to_json(r.provenance)},
                   {"initial_mse", r.initial_mse},
                   {"final_mse", r.final_mse},
                   {"history", history}};
  ck.params = r.encoder;
  return ck;
}

PretrainResult encoder_from_checkpoint(const Checkpoint& ck) {
  if (ck.config.value("kind", std::string()) != "ts_encoder") {
    throw FormatError("checkpoint is not a pretrained TS encoder (kind '" + ck.config.value("kind", std::string()) + "')");
  }
  if (!ck.config.contains("encoder")) throw FormatError("encoder checkpoint has no encoder block");
  PretrainResult r;
  r.encoder_config = ts_config_from_json(ck.config.at("encoder"));
  if (ck.config.contains("provenance")) r.provenance = provenance_from_json(ck.config.at("provenance"));
  r.initial_mse = ck.config.value("initial_mse", 0.0);
  r.final_mse = ck.config.value("final_mse", 0.0);
  if (ck.config.contains("history")) {
    for (const auto& row : ck.config.at("history")) {
      r.history.push_back({row.at("epoch").get<std::size_t>(), row.at("masked_mse").get<double>(), 0.0});
    }
  }
  const auto shapes = ts_parameter_shapes(r.encoder_config);
  for (const auto& [name, shape] : shapes) {
    auto it = ck.params.find(name);
    if (it == ck.params.end()) throw FormatError("encoder checkpoint is missing parameter '" + name + "'");
    if (it->second.shape() != shape) {
      throw ShapeError("parameter '" + name + "' has shape " + shape_string(it->second.shape()) + ", expected " +
                       shape_string(shape));
    }
    r.encoder.emplace(name, it->second);
  }
  for (const auto& [name, t] : ck.params) {
    if (!shapes.count(name)) throw FormatError("encoder checkpoint has unexpected parameter '" + name + "'");
  }
  return r;
}

void write_pretrain_history(const std::vector<PretrainHistoryRow>& history, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out.precision(17);
  out << "epoch,masked_mse,train_mse\n";
  for (const auto& row : history) out << row.epoch << ',' << row.masked_mse << ',' << row.train_mse << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace fmm
