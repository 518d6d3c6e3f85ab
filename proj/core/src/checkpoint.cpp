#include <cstring>

#include "binary_io.hpp"
#include "fmm/errors.hpp"
#include "fmm/model.hpp"

namespace fmm {

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace

Json to_json(const Provenance& p) {
  return Json{{"pretrained", p.pretrained},
              {"init_seed", p.init_seed},
              {"pretrain_seed", p.pretrain_seed},
              {"pretrain_fingerprint", p.pretrain_fingerprint}};
}

Provenance provenance_from_json(const Json& j) {
  Provenance p;
  p.pretrained = j.value("pretrained", false);
  p.init_seed = j.value("init_seed", std::uint64_t{0});
  p.pretrain_seed = j.value("pretrain_seed", std::uint64_t{0});
  p.pretrain_fingerprint = j.value("pretrain_fingerprint", std::string());
  return p;
}

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ck) {
  detail::ByteWriter w;
  w.raw("FMTC");
  w.u32(kCheckpointVersion);
  const std::string config = canonical_dump(ck.config);
  w.u32(static_cast<std::uint32_t>(config.size()));
  w.raw(config);
  w.u32(static_cast<std::uint32_t>(ck.params.size()));
  for (const auto& [name, t] : ck.params) {
    if (name.size() > 0xffff) throw ValueError("parameter name too long: '" + name.substr(0, 32) + "...'");
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.raw(name);
    w.u8(static_cast<std::uint8_t>(t.dtype()));
    w.u8(static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
    if (t.dtype() == DType::f32) {
      for (float v : t.data<float>()) w.f32(v);
    } else {
      for (double v : t.data<double>()) w.f64(v);
    }
  }
  std::vector<std::uint8_t> bytes = w.bytes();
  const std::uint32_t crc = detail::crc32_of(bytes.data(), bytes.size());
  for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<std::uint8_t>(crc >> (8 * i)));
  return bytes;
}

Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& source) {
  if (bytes.size() < 16) throw FormatError(source + ": truncated file");
  if (std::memcmp(bytes.data(), "FMTC", 4) != 0) throw FormatError(source + ": bad magic (not a checkpoint)");
  std::uint32_t stored = 0;
  for (int i = 0; i < 4; ++i) stored |= static_cast<std::uint32_t>(bytes[bytes.size() - 4 + i]) << (8 * i);
  if (detail::crc32_of(bytes.data(), bytes.size() - 4) != stored) throw FormatError(source + ": checksum mismatch");
  const std::vector<std::uint8_t> body(bytes.begin(), bytes.end() - 4);
  detail::ByteReader r(body, source);
  r.raw(4);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError(source + ": unsupported version " + std::to_string(version));
  }
  Checkpoint ck;
  const std::string config = r.raw(r.u32());
  try {
    ck.config = Json::parse(config);
  } catch (const Json::parse_error& e) {
    throw FormatError(source + ": malformed config block: " + e.what());
  }
  const std::uint32_t count = r.u32();
  for (std::uint32_t e = 0; e < count; ++e) {
    const std::string name = r.raw(r.u16());
    const std::uint8_t code = r.u8();
    if (code > 1) throw FormatError(source + ": parameter '" + name + "' has unknown dtype code " + std::to_string(code));
    const std::uint8_t rank = r.u8();
    Shape shape(rank);
    for (auto& d : shape) d = r.u32();
    const std::size_t n = shape_numel(shape);
    if (rank == 0 || n == 0) throw FormatError(source + ": parameter '" + name + "' has an empty shape");
    Tensor t;
    if (code == 0) {
      std::vector<float> v(n);
      for (auto& x : v) x = r.f32();
      t = Tensor(shape, std::move(v));
    } else {
      std::vector<double> v(n);
      for (auto& x : v) x = r.f64();
      t = Tensor(shape, std::move(v));
    }
    if (!ck.params.emplace(name, std::move(t)).second) throw FormatError(source + ": duplicate parameter '" + name + "'");
  }
  if (r.remaining() != 0) throw FormatError(source + ": trailing bytes after parameters");
  return ck;
}

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  detail::write_file(path, serialize_checkpoint(ck));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(detail::read_file(path), path.filename().string());
}

Checkpoint to_checkpoint(const Model& model) {
  Checkpoint ck;
  ck.config = Json{{"kind", "classifier"}, {"model", to_json(model.config)}, {"provenance", to_json(model.provenance)}};
  ck.params = model.params;
  return ck;
}

Model model_from_checkpoint(const Checkpoint& ck) {
  if (!ck.config.contains("model")) throw FormatError("checkpoint config has no model block");
  Model m;
  m.config = model_config_from_json(ck.config.at("model"));
  if (ck.config.contains("provenance")) m.provenance = provenance_from_json(ck.config.at("provenance"));
  const auto shapes = parameter_shapes(m.config);
  for (const auto& [name, shape] : shapes) {
    auto it = ck.params.find(name);
    if (it == ck.params.end()) throw FormatError("checkpoint is missing parameter '" + name + "'");
    if (it->second.shape() != shape) {
      throw ShapeError("parameter '" + name + "' has shape " + shape_string(it->second.shape()) + ", expected " +
                       shape_string(shape));
    }
    if (it->second.dtype() != m.config.dtype) {
      throw FormatError("parameter '" + name + "' is " + to_string(it->second.dtype()) + ", expected " +
                        to_string(m.config.dtype));
    }
    m.params.emplace(name, it->second);
  }
  for (const auto& [name, t] : ck.params) {
    if (!shapes.count(name)) throw FormatError("checkpoint has unexpected parameter '" + name + "'");
  }
  return m;
}

void save_model(const Model& model, const std::filesystem::path& path) { save_checkpoint(to_checkpoint(model), path); }

Model load_model(const std::filesystem::path& path) { return model_from_checkpoint(load_checkpoint(path)); }

}  // namespace fmm
