#include "fmm/model.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "fmm/errors.hpp"
#include "fmm/rng.hpp"
#include "json_reader.hpp"
#include "model_internal.hpp"

namespace fmm {

namespace {

template <class E>
E parse_enum(const std::string& name, std::initializer_list<std::pair<const char*, E>> table, const char* what) {
  for (const auto& [n, v] : table) {
    if (name == n) return v;
  }
  std::string options;
  for (const auto& [n, v] : table) options += (options.empty() ? "" : ", ") + std::string(n);
  throw ValueError(std::string("unknown ") + what + " '" + name + "' (expected one of " + options + ")");
}

Var linear(Params& p, const std::string& name, Var x) {
  return ops::add(ops::matmul(x, p(name + ".weight")), p(name + ".bias"));
}

Var group_norm(Params& p, const std::string& name, Var x, std::size_t groups) {
  const Shape s = x.shape();
  const std::size_t c = s[0];
  Var y = ops::reshape(x, {groups, shape_numel(s) / groups});
  y = ops::layer_norm(y);
  y = ops::reshape(y, s);
  y = ops::mul(y, ops::reshape(p(name + ".gamma"), {c, 1, 1}));
  return ops::add(y, ops::reshape(p(name + ".beta"), {c, 1, 1}));
}

Tensor identity_tensor(std::size_t n, DType dtype) {
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
  return Tensor::from_values({n, n}, v, dtype);
}

// Segment means over rows: [m, L] with row j averaging its contiguous block.
Tensor landmark_pooling(std::size_t m, std::size_t length, DType dtype) {
  std::vector<double> v(m * length, 0.0);
  for (std::size_t j = 0; j < m; ++j) {
    const std::size_t b = j * length / m;
    const std::size_t e = (j + 1) * length / m;
    for (std::size_t i = b; i < e; ++i) v[j * length + i] = 1.0 / static_cast<double>(e - b);
  }
  return Tensor::from_values({m, length}, v, dtype);
}

Var nystrom_attention(Params& p, Var q, Var k, Var v, double scale, std::size_t landmarks, Tensor* map_out) {
  const std::size_t length = q.shape()[0];
  const std::size_t m = std::min(landmarks, length);
  Var pool = p.constant(landmark_pooling(m, length, p.dtype()));
  Var ql = ops::matmul(pool, q);
  Var kl = ops::matmul(pool, k);
  Var f = ops::softmax(ops::scale(ops::matmul(q, ops::transpose(kl)), scale));
  Var a = ops::softmax(ops::scale(ops::matmul(ql, ops::transpose(kl)), scale));
  Var b = ops::softmax(ops::scale(ops::matmul(ql, ops::transpose(k)), scale));

  // Newton-Schulz iterations for pinv(a). The initial scaling is treated as a
  // constant taken from the forward value.
  const Tensor& av = a.value();
  double max_row = 0.0, max_col = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    double r = 0.0, c = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      r += std::abs(av.at(i * m + j));
      c += std::abs(av.at(j * m + i));
    }
    max_row = std::max(max_row, r);
    max_col = std::max(max_col, c);
  }
  Var eye = p.constant(identity_tensor(m, p.dtype()));
  Var z = ops::scale(ops::transpose(a), 1.0 / (max_row * max_col));
  for (int it = 0; it < 6; ++it) {
    Var az = ops::matmul(a, z);
    Var inner = ops::sub(ops::scale(eye, 7.0), az);
    inner = ops::sub(ops::scale(eye, 15.0), ops::matmul(az, inner));
    inner = ops::sub(ops::scale(eye, 13.0), ops::matmul(az, inner));
    z = ops::scale(ops::matmul(z, inner), 0.25);
  }
  if (map_out) *map_out = apply_op(OpKind::matmul, std::vector<Tensor>{apply_op(OpKind::matmul, std::vector<Tensor>{f.value(), z.value()}), b.value()});
  return ops::matmul(f, ops::matmul(z, ops::matmul(b, v)));
}

Var attention_block(Params& p, const std::string& name, Var x, std::size_t heads, AttentionKind kind,
                    std::size_t landmarks, std::vector<Tensor>* maps) {
  const std::size_t d = x.shape()[1];
  const std::size_t dh = d / heads;
  Var q = linear(p, name + ".q", x);
  Var k = linear(p, name + ".k", x);
  Var v = linear(p, name + ".v", x);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Var> outs;
  for (std::size_t h = 0; h < heads; ++h) {
    Var qh = heads == 1 ? q : ops::slice(q, 1, h * dh, (h + 1) * dh);
    Var kh = heads == 1 ? k : ops::slice(k, 1, h * dh, (h + 1) * dh);
    Var vh = heads == 1 ? v : ops::slice(v, 1, h * dh, (h + 1) * dh);
    if (kind == AttentionKind::nystrom) {
      Tensor map;
      outs.push_back(nystrom_attention(p, qh, kh, vh, scale, landmarks, maps ? &map : nullptr));
      if (maps) maps->push_back(std::move(map));
    } else {
      Var weights = ops::softmax(ops::scale(ops::matmul(qh, ops::transpose(kh)), scale));
      if (maps) maps->push_back(weights.value());
      outs.push_back(ops::matmul(weights, vh));
    }
  }
  Var merged = heads == 1 ? outs[0] : ops::concat(outs, 1);
  return linear(p, name + ".o", merged);
}

Var norm(Params& p, const std::string& name, Var x) {
  return ops::layer_norm(x, p(name + ".gamma"), p(name + ".beta"));
}

std::vector<std::size_t> fc_strides(const FcEncoderConfig&) { return {1, 2, 2, 2}; }

void add_linear(std::map<std::string, Shape>& out, const std::string& name, std::size_t in, std::size_t o) {
  out[name + ".weight"] = {in, o};
  out[name + ".bias"] = {o};
}

void add_norm(std::map<std::string, Shape>& out, const std::string& name, std::size_t d) {
  out[name + ".gamma"] = {d};
  out[name + ".beta"] = {d};
}

void add_transformer_shapes(std::map<std::string, Shape>& out, const std::string& prefix, std::size_t layers,
                            std::size_t d, std::size_t ff) {
  for (std::size_t l = 0; l < layers; ++l) {
    const std::string base = prefix + "layer" + std::to_string(l);
    add_norm(out, base + ".norm1", d);
    for (const char* n : {"q", "k", "v", "o"}) add_linear(out, base + ".attn." + n, d, d);
    add_norm(out, base + ".norm2", d);
    add_linear(out, base + ".ff1", d, d * ff);
    add_linear(out, base + ".ff2", d * ff, d);
  }
  add_norm(out, prefix + "final_norm", d);
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

std::string to_string(AttentionKind kind) { return kind == AttentionKind::exact ? "exact" : "nystrom"; }

std::string to_string(FusionKind kind) {
  switch (kind) {
    case FusionKind::concat: return "concat";
    case FusionKind::sum: return "sum";
    case FusionKind::cross_uni: return "cross_uni";
    case FusionKind::cross_bi: return "cross_bi";
    case FusionKind::moe: return "moe";
  }
  return "concat";
}

std::string to_string(Modality modality) {
  switch (modality) {
    case Modality::ts: return "ts";
    case Modality::fc: return "fc";
    case Modality::both: return "both";
  }
  return "both";
}

AttentionKind parse_attention_kind(const std::string& name) {
  return parse_enum<AttentionKind>(name, {{"exact", AttentionKind::exact}, {"nystrom", AttentionKind::nystrom}},
                                   "attention kind");
}

FusionKind parse_fusion_kind(const std::string& name) {
  return parse_enum<FusionKind>(name,
                                {{"concat", FusionKind::concat},
                                 {"sum", FusionKind::sum},
                                 {"cross_uni", FusionKind::cross_uni},
                                 {"cross_bi", FusionKind::cross_bi},
                                 {"moe", FusionKind::moe}},
                                "fusion kind");
}

Modality parse_modality(const std::string& name) {
  return parse_enum<Modality>(name, {{"ts", Modality::ts}, {"fc", Modality::fc}, {"both", Modality::both}}, "modality");
}

std::vector<std::string> fusion_kind_names() { return {"concat", "sum", "cross_uni", "cross_bi", "moe"}; }

void validate(const TsEncoderConfig& c) {
  if (c.layers < 1 || c.heads < 1) throw ValueError("ts: layers and heads must be >= 1");
  if (c.model_dim < 1 || c.model_dim % c.heads != 0) {
    throw ValueError("ts: model_dim " + std::to_string(c.model_dim) + " is not divisible by heads " +
                     std::to_string(c.heads));
  }
  if (c.ff_multiplier < 1) throw ValueError("ts: ff_multiplier must be >= 1");
  if (c.patch_size < 1) throw ValueError("ts: patch_size must be >= 1");
  if (c.max_rois < 1 || c.max_patches < 1 || c.max_tokens < 1) throw ValueError("ts: token limits must be >= 1");
  if (c.landmarks < 1) throw ValueError("ts: landmarks must be >= 1");
}

void validate(const FcEncoderConfig& c) {
  if (c.widths.size() != 4) throw ValueError("fc: widths must list 4 stages");
  for (std::size_t i = 0; i < 4; ++i) {
    if (c.widths[i] < 1) throw ValueError("fc: widths must be positive");
    if (i > 0 && c.widths[i] < c.widths[i - 1]) throw ValueError("fc: widths must be non-decreasing");
    if (c.groups < 1 || c.widths[i] % c.groups != 0) {
      throw ValueError("fc: groups " + std::to_string(c.groups) + " does not divide width " +
                       std::to_string(c.widths[i]));
    }
  }
  if (c.n_rois < 2) throw ValueError("fc: n_rois must be >= 2");
  if (c.output_dim < 1) throw ValueError("fc: output_dim must be >= 1");
  if (c.stem_kernel < 1 || c.stem_stride < 1) throw ValueError("fc: stem kernel and stride must be >= 1");
}

void validate(const ModelConfig& c) {
  if (c.modality != Modality::fc) validate(c.ts);
  if (c.modality != Modality::ts) validate(c.fc);
  if (c.modality == Modality::both && c.ts.model_dim != c.fc.output_dim) {
    throw ValueError("ts.model_dim and fc.output_dim must match for fusion");
  }
}

Json to_json(const TsEncoderConfig& c) {
  return Json{{"layers", c.layers},
              {"heads", c.heads},
              {"model_dim", c.model_dim},
              {"ff_multiplier", c.ff_multiplier},
              {"patch_size", c.patch_size},
              {"max_rois", c.max_rois},
              {"max_patches", c.max_patches},
              {"max_tokens", c.max_tokens},
              {"attention", to_string(c.attention)},
              {"landmarks", c.landmarks},
              {"frozen", c.frozen}};
}

Json to_json(const FcEncoderConfig& c) {
  return Json{{"widths", c.widths},       {"n_rois", c.n_rois},           {"output_dim", c.output_dim},
              {"groups", c.groups},       {"stem_kernel", c.stem_kernel}, {"stem_stride", c.stem_stride}};
}

Json to_json(const ModelConfig& c) {
  return Json{{"ts", to_json(c.ts)},
              {"fc", to_json(c.fc)},
              {"fusion", to_string(c.fusion)},
              {"modality", to_string(c.modality)},
              {"dtype", to_string(c.dtype)}};
}

TsEncoderConfig ts_config_from_json(const Json& j, std::vector<std::string>* warnings) {
  TsEncoderConfig c;
  detail::JsonReader r(j, "ts", warnings);
  r.read("layers", c.layers);
  r.read("heads", c.heads);
  r.read("model_dim", c.model_dim);
  r.read("ff_multiplier", c.ff_multiplier);
  r.read("patch_size", c.patch_size);
  r.read("max_rois", c.max_rois);
  r.read("max_patches", c.max_patches);
  r.read("max_tokens", c.max_tokens);
  std::string attention = to_string(c.attention);
  r.read("attention", attention);
  c.attention = parse_attention_kind(attention);
  r.read("landmarks", c.landmarks);
  r.read("frozen", c.frozen);
  r.finish();
  return c;
}

FcEncoderConfig fc_config_from_json(const Json& j, std::vector<std::string>* warnings) {
  FcEncoderConfig c;
  detail::JsonReader r(j, "fc", warnings);
  r.read("widths", c.widths);
  r.read("n_rois", c.n_rois);
  r.read("output_dim", c.output_dim);
  r.read("groups", c.groups);
  r.read("stem_kernel", c.stem_kernel);
  r.read("stem_stride", c.stem_stride);
  r.finish();
  return c;
}

ModelConfig model_config_from_json(const Json& j, std::vector<std::string>* warnings) {
  ModelConfig c;
  detail::JsonReader r(j, "model", warnings);
  if (const Json* ts = r.child("ts")) c.ts = ts_config_from_json(*ts, warnings);
  if (const Json* fc = r.child("fc")) c.fc = fc_config_from_json(*fc, warnings);
  std::string fusion = to_string(c.fusion), modality = to_string(c.modality), dtype = to_string(c.dtype);
  r.read("fusion", fusion);
  r.read("modality", modality);
  r.read("dtype", dtype);
  c.fusion = parse_fusion_kind(fusion);
  c.modality = parse_modality(modality);
  c.dtype = parse_dtype(dtype);
  r.finish();
  return c;
}

ModelConfig desk_model_config(std::size_t n_rois, std::size_t n_timepoints) {
  ModelConfig c;
  c.ts.model_dim = 32;
  c.ts.max_rois = n_rois;
  c.ts.max_patches = n_timepoints / c.ts.patch_size;
  c.ts.max_tokens = c.ts.max_rois * c.ts.max_patches;
  c.fc.n_rois = n_rois;
  c.fc.output_dim = 32;
  return c;
}

std::size_t head_input_dim(const ModelConfig& c) {
  switch (c.modality) {
    case Modality::ts: return c.ts.model_dim;
    case Modality::fc: return c.fc.output_dim;
    case Modality::both: return c.fusion == FusionKind::concat ? 2 * c.ts.model_dim : c.ts.model_dim;
  }
  return 0;
}

std::map<std::string, Shape> ts_parameter_shapes(const TsEncoderConfig& c) {
  std::map<std::string, Shape> out;
  const std::size_t d = c.model_dim;
  add_linear(out, "ts.patch_proj", c.patch_size, d);
  out["ts.roi_embed"] = {c.max_rois, d};
  out["ts.patch_embed"] = {c.max_patches, d};
  out["ts.cls"] = {1, d};
  add_transformer_shapes(out, "ts.", c.layers, d, c.ff_multiplier);
  return out;
}

std::map<std::string, Shape> parameter_shapes(const ModelConfig& c) {
  validate(c);
  std::map<std::string, Shape> out;
  if (c.modality != Modality::fc) out = ts_parameter_shapes(c.ts);
  if (c.modality != Modality::ts) {
    const auto& f = c.fc;
    const auto strides = fc_strides(f);
    out["fc.stem.weight"] = {f.widths[0], 1, f.stem_kernel, f.stem_kernel};
    add_norm(out, "fc.stem.norm", f.widths[0]);
    std::size_t in = f.widths[0];
    for (std::size_t s = 0; s < 4; ++s) {
      const std::size_t w = f.widths[s];
      for (std::size_t b = 0; b < 2; ++b) {
        const std::string base = "fc.stage" + std::to_string(s) + ".block" + std::to_string(b);
        const std::size_t stride = b == 0 ? strides[s] : 1;
        out[base + ".conv1.weight"] = {w, in, 3, 3};
        add_norm(out, base + ".norm1", w);
        out[base + ".conv2.weight"] = {w, w, 3, 3};
        add_norm(out, base + ".norm2", w);
        if (stride != 1 || in != w) {
          out[base + ".shortcut.weight"] = {w, in, 1, 1};
          add_norm(out, base + ".shortcut.norm", w);
        }
        in = w;
      }
    }
    add_linear(out, "fc.proj", in, f.output_dim);
  }
  if (c.modality == Modality::both) {
    const std::size_t d = c.ts.model_dim;
    switch (c.fusion) {
      case FusionKind::concat:
      case FusionKind::sum: break;
      case FusionKind::cross_bi:
        for (const char* n : {"q", "k", "v", "o"}) add_linear(out, std::string("fusion.c2t.") + n, d, d);
        [[fallthrough]];
      case FusionKind::cross_uni:
        for (const char* n : {"q", "k", "v", "o"}) add_linear(out, std::string("fusion.t2c.") + n, d, d);
        break;
      case FusionKind::moe:
        add_linear(out, "fusion.gate", 2 * d, 2);
        add_linear(out, "fusion.expert1", 2 * d, d);
        add_linear(out, "fusion.expert2", 2 * d, d);
        break;
    }
  }
  add_linear(out, "head", head_input_dim(c), 1);
  return out;
}

Tensor init_parameter(const std::string& name, const Shape& shape, DType dtype, std::uint64_t seed) {
  const std::size_t n = shape_numel(shape);
  std::vector<double> v(n, 0.0);
  Rng rng(derive_seed(seed, fnv1a64(name)));
  const bool embedding = ends_with(name, "_embed") || ends_with(name, ".cls") || ends_with(name, "mask_token") ||
                         ends_with(name, "_pos");
  if (embedding) {
    for (auto& x : v) x = rng.normal(0.0, 0.02);
  } else if (ends_with(name, ".gamma")) {
    // Last norm of each residual block starts at zero so blocks begin as identities.
    const bool zero = name.rfind("fc.stage", 0) == 0 && ends_with(name, ".norm2.gamma");
    std::fill(v.begin(), v.end(), zero ? 0.0 : 1.0);
  } else if (ends_with(name, ".beta") || ends_with(name, ".bias")) {
    // zeros
  } else if (ends_with(name, ".weight") && shape.size() == 4) {
    const double bound = std::sqrt(6.0 / static_cast<double>(shape[1] * shape[2] * shape[3]));
    for (auto& x : v) x = rng.uniform(-bound, bound);
  } else if (ends_with(name, ".weight") && shape.size() == 2) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(shape[0]));
    for (auto& x : v) x = rng.uniform(-bound, bound);
  } else {
    throw ValueError("no initialiser for parameter '" + name + "'");
  }
  return Tensor::from_values(shape, v, dtype);
}

ParameterMap init_ts_parameters(const TsEncoderConfig& config, DType dtype, std::uint64_t seed) {
  validate(config);
  ParameterMap out;
  for (const auto& [name, shape] : ts_parameter_shapes(config)) out.emplace(name, init_parameter(name, shape, dtype, seed));
  return out;
}

Model init_model(const ModelConfig& config, std::uint64_t seed) {
  Model m;
  m.config = config;
  m.provenance.init_seed = seed;
  for (const auto& [name, shape] : parameter_shapes(config)) m.params.emplace(name, init_parameter(name, shape, config.dtype, seed));
  return m;
}

bool is_ts_parameter(const std::string& name) { return name.rfind("ts.", 0) == 0; }

void load_pretrained_encoder(Model& model, const ParameterMap& encoder, const Provenance& provenance) {
  if (model.config.modality == Modality::fc) throw ValueError("an FC-only model has no TS encoder to load");
  for (const auto& [name, shape] : ts_parameter_shapes(model.config.ts)) {
    auto it = encoder.find(name);
    if (it == encoder.end()) throw FormatError("pretrained encoder is missing parameter '" + name + "'");
    if (it->second.shape() != shape) {
      throw ShapeError("parameter '" + name + "' has shape " + shape_string(it->second.shape()) + ", expected " +
                       shape_string(shape));
    }
    model.params[name] = it->second.cast(model.config.dtype);
  }
  model.provenance.pretrained = true;
  model.provenance.pretrain_seed = provenance.pretrain_seed;
  model.provenance.pretrain_fingerprint = provenance.pretrain_fingerprint;
}

Params::Params(Graph& graph, const ParameterMap& values, TrainablePredicate trainable)
    : graph_(&graph), values_(&values), trainable_(std::move(trainable)) {
  if (!values.empty()) dtype_ = values.begin()->second.dtype();
}

Params::Params(Graph& graph, std::map<std::string, Var> bound, DType dtype)
    : graph_(&graph), bound_(std::move(bound)), dtype_(dtype) {}

Var Params::operator()(const std::string& name) {
  if (auto it = bound_.find(name); it != bound_.end()) return it->second;
  if (!values_) throw ValueError("parameter '" + name + "' is not bound");
  auto it = values_->find(name);
  if (it == values_->end()) throw ValueError("model has no parameter '" + name + "'");
  Var v = graph_->parameter(name, it->second, trainable_ ? trainable_(name) : false);
  bound_.emplace(name, v);
  return v;
}

Var Params::constant(Tensor value) const { return graph_->constant(value.cast(dtype_)); }

Var embed_tokens(Params& p, const TsEncoderConfig& c, const TokenSequence& tokens, const std::vector<std::size_t>& which) {
  if (tokens.patch_size != c.patch_size) {
    throw ShapeError("token length " + std::to_string(tokens.patch_size) + " does not match patch size " +
                     std::to_string(c.patch_size));
  }
  if (tokens.token_count() > c.max_tokens) {
    throw ShapeError("token overflow: " + std::to_string(tokens.token_count()) + " tokens exceed max_tokens " +
                     std::to_string(c.max_tokens));
  }
  if (tokens.n_rois > c.max_rois || tokens.n_patches > c.max_patches) {
    throw ShapeError("token overflow: " + std::to_string(tokens.n_rois) + " ROIs x " +
                     std::to_string(tokens.n_patches) + " patches exceed embedding tables " +
                     std::to_string(c.max_rois) + " x " + std::to_string(c.max_patches));
  }
  std::vector<double> x(which.size() * c.patch_size);
  std::vector<std::size_t> roi(which.size()), patch(which.size());
  for (std::size_t i = 0; i < which.size(); ++i) {
    const auto t = tokens.token(which[i]);
    std::copy(t.begin(), t.end(), x.begin() + static_cast<std::ptrdiff_t>(i * c.patch_size));
    roi[i] = static_cast<std::size_t>(tokens.roi_index[which[i]]);
    patch[i] = static_cast<std::size_t>(tokens.patch_index[which[i]]);
  }
  Var values = p.constant(Tensor::from_values({which.size(), c.patch_size}, x, DType::f64));
  Var e = linear(p, "ts.patch_proj", values);
  e = ops::add(e, ops::embed_lookup(p("ts.roi_embed"), roi));
  return ops::add(e, ops::embed_lookup(p("ts.patch_embed"), patch));
}

Var transformer_stack(Params& p, const std::string& prefix, std::size_t layers, std::size_t heads, Var x,
                      AttentionKind attention, std::size_t landmarks, std::vector<Tensor>* maps) {
  for (std::size_t l = 0; l < layers; ++l) {
    const std::string base = prefix + "layer" + std::to_string(l);
    x = ops::add(x, attention_block(p, base + ".attn", norm(p, base + ".norm1", x), heads, attention, landmarks, maps));
    Var h = norm(p, base + ".norm2", x);
    h = linear(p, base + ".ff2", ops::gelu(linear(p, base + ".ff1", h)));
    x = ops::add(x, h);
  }
  return norm(p, prefix + "final_norm", x);
}

Var ts_encode(Params& p, const TsEncoderConfig& c, const TokenSequence& tokens, std::vector<Tensor>* maps) {
  std::vector<std::size_t> all(tokens.token_count());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  Var x = ops::concat({p("ts.cls"), embed_tokens(p, c, tokens, all)}, 0);
  Var h = transformer_stack(p, "ts.", c.layers, c.heads, x, c.attention, c.landmarks, maps);
  return ops::slice(h, 0, 0, 1);
}

Var fc_encode(Params& p, const FcEncoderConfig& c, const ConnectivityMatrix& fc) {
  if (fc.rows != fc.cols) {
    throw ShapeError("fc_encode: input is " + std::to_string(fc.rows) + "x" + std::to_string(fc.cols) + ", not square");
  }
  if (fc.rows != c.n_rois) {
    throw ShapeError("fc_encode: input side " + std::to_string(fc.rows) + " does not match n_rois " +
                     std::to_string(c.n_rois));
  }
  Var x = p.constant(Tensor::from_values({1, fc.rows, fc.cols}, fc.values, DType::f64));
  x = ops::conv2d(x, p("fc.stem.weight"), c.stem_stride, c.stem_kernel / 2);
  x = ops::relu(group_norm(p, "fc.stem.norm", x, c.groups));
  const auto strides = fc_strides(c);
  std::size_t in = c.widths[0];
  for (std::size_t s = 0; s < 4; ++s) {
    for (std::size_t b = 0; b < 2; ++b) {
      const std::string base = "fc.stage" + std::to_string(s) + ".block" + std::to_string(b);
      const std::size_t stride = b == 0 ? strides[s] : 1;
      Var h = ops::conv2d(x, p(base + ".conv1.weight"), stride, 1);
      h = ops::relu(group_norm(p, base + ".norm1", h, c.groups));
      h = ops::conv2d(h, p(base + ".conv2.weight"), 1, 1);
      h = group_norm(p, base + ".norm2", h, c.groups);
      Var shortcut = x;
      if (stride != 1 || in != c.widths[s]) {
        shortcut = group_norm(p, base + ".shortcut.norm", ops::conv2d(x, p(base + ".shortcut.weight"), stride, 0), c.groups);
      }
      x = ops::relu(ops::add(h, shortcut));
      in = c.widths[s];
    }
  }
  const Shape s = x.shape();
  Var pooled = ops::reshape(ops::mean(ops::reshape(x, {s[0], s[1] * s[2]}), 1), {1, s[0]});
  return linear(p, "fc.proj", pooled);
}

namespace {

// Attention from a single query token onto a single key token. The softmax
// over one score is identically 1, so the output reduces to o(v(source)).
Var single_token_cross(Params& p, const std::string& name, Var query, Var source) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(query.shape()[1]));
  Var q = linear(p, name + ".q", query);
  Var k = linear(p, name + ".k", source);
  Var v = linear(p, name + ".v", source);
  Var w = ops::softmax(ops::scale(ops::matmul(q, ops::transpose(k)), scale));
  return ops::add(query, linear(p, name + ".o", ops::matmul(w, v)));
}

}  // namespace

Var fuse(Params& p, FusionKind kind, Var rt, Var rc) {
  if (rt.shape() != rc.shape()) {
    throw ShapeError("fuse: R_T " + shape_string(rt.shape()) + " and R_C " + shape_string(rc.shape()) + " differ");
  }
  switch (kind) {
    case FusionKind::concat: return ops::concat({rt, rc}, 1);
    case FusionKind::sum: return ops::add(rt, rc);
    case FusionKind::cross_uni: return single_token_cross(p, "fusion.t2c", rt, rc);
    case FusionKind::cross_bi:
      return ops::add(single_token_cross(p, "fusion.t2c", rt, rc), single_token_cross(p, "fusion.c2t", rc, rt));
    case FusionKind::moe: {
      Var joint = ops::concat({rt, rc}, 1);
      Var gate = ops::softmax(linear(p, "fusion.gate", joint));
      Var e1 = ops::mul(linear(p, "fusion.expert1", joint), ops::slice(gate, 1, 0, 1));
      Var e2 = ops::mul(linear(p, "fusion.expert2", joint), ops::slice(gate, 1, 1, 2));
      return ops::add(e1, e2);
    }
  }
  throw ValueError("unknown fusion kind");
}

Var predict_head(Params& p, Var features) {
  const Shape expected{features.shape().size() == 2 ? features.shape()[1] : 0, 1};
  if (p.graph().value(p("head.weight")).shape() != expected || features.shape()[0] != 1) {
    throw ShapeError("head: feature shape " + shape_string(features.shape()) + " does not match head.weight " +
                     shape_string(p.graph().value(p("head.weight")).shape()));
  }
  return linear(p, "head", features);
}

Var combine_streams(Params& p, const ModelConfig& c, Var rt, Var rc) {
  switch (c.modality) {
    case Modality::ts: return rt;
    case Modality::fc: return rc;
    case Modality::both: return fuse(p, c.fusion, rt, rc);
  }
  return rt;
}

Tensor ts_encode(const Model& model, const TokenSequence& tokens, std::vector<Tensor>* maps) {
  Graph g(false);
  Params p(g, model.params, nullptr);
  return ts_encode(p, model.config.ts, tokens, maps).value();
}

Tensor fc_encode(const Model& model, const ConnectivityMatrix& fc) {
  Graph g(false);
  Params p(g, model.params, nullptr);
  return fc_encode(p, model.config.fc, fc).value();
}

Tensor fuse(const Model& model, const Tensor& rt, const Tensor& rc) {
  Graph g(false);
  Params p(g, model.params, nullptr);
  return fuse(p, model.config.fusion, p.constant(rt), p.constant(rc)).value();
}

double predict_head(const Model& model, const Tensor& features) {
  Graph g(false);
  Params p(g, model.params, nullptr);
  return predict_head(p, p.constant(features)).value().item();
}

Tensor extract_fused(const Model& model, const PreparedSubject& subject) {
  Graph g(false);
  Params p(g, model.params, nullptr);
  Var rt, rc;
  if (model.config.modality != Modality::fc) rt = ts_encode(p, model.config.ts, subject.tokens);
  if (model.config.modality != Modality::ts) rc = fc_encode(p, model.config.fc, subject.fc);
  return combine_streams(p, model.config, rt, rc).value();
}

double forward_logit(const Model& model, const PreparedSubject& subject) {
  return predict_head(model, extract_fused(model, subject));
}

double sigmoid(double logit) {
  if (logit >= 0) return 1.0 / (1.0 + std::exp(-logit));
  const double e = std::exp(logit);
  return e / (1.0 + e);
}

double forward(const Model& model, const PreparedSubject& subject) { return sigmoid(forward_logit(model, subject)); }

double bce_loss(std::span<const double> logits, std::span<const int> labels) {
  if (logits.size() != labels.size() || logits.empty()) throw ShapeError("bce_loss: logits and labels differ in length");
  double acc = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw ValueError("bce_loss: label " + std::to_string(labels[i]) + " is not in {0,1}");
    const double z = logits[i];
    acc += std::max(z, 0.0) - z * labels[i] + std::log1p(std::exp(-std::abs(z)));
  }
  return acc / static_cast<double>(logits.size());
}

double bce_loss_from_probabilities(std::span<const double> probabilities, std::span<const int> labels) {
  std::vector<double> logits(probabilities.size());
  for (std::size_t i = 0; i < probabilities.size(); ++i) {
    const double q = probabilities[i];
    if (!(q > 0.0 && q < 1.0)) throw ValueError("bce_loss: probability outside (0,1)");
    logits[i] = std::log(q) - std::log1p(-q);
  }
  return bce_loss(logits, labels);
}

namespace detail {

Var linear(Params& p, const std::string& name, Var x) { return fmm::linear(p, name, x); }
Var norm(Params& p, const std::string& name, Var x) { return fmm::norm(p, name, x); }
void add_linear(std::map<std::string, Shape>& out, const std::string& name, std::size_t in, std::size_t o) {
  fmm::add_linear(out, name, in, o);
}
void add_norm(std::map<std::string, Shape>& out, const std::string& name, std::size_t d) { fmm::add_norm(out, name, d); }
void add_transformer_shapes(std::map<std::string, Shape>& out, const std::string& prefix, std::size_t layers,
                            std::size_t d, std::size_t ff_multiplier) {
  fmm::add_transformer_shapes(out, prefix, layers, d, ff_multiplier);
}

}  // namespace detail

}  // namespace fmm
