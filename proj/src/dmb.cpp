#include "dmprune/dmb.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace dmprune {
namespace {

using json = nlohmann::json;

constexpr char kMagic[4] = {'D', 'M', 'B', '1'};

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint64_t get_u64(const std::string& in, std::size_t pos) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i)
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  return v;
}

void put_f64s(std::string& out, std::span<const double> values) {
  for (double d : values) put_u64(out, std::bit_cast<std::uint64_t>(d));
}

// Collects blobs and manifest entries in write order.
class Writer {
 public:
  json& add(const std::string& name, const std::string& role, int layer_id, const Tensor& t) {
    json e;
    e["name"] = name;
    e["role"] = role;
    e["layer_id"] = layer_id;
    e["shape"] = t.shape;
    e["dtype"] = "f64";
    e["byte_offset"] = blobs_.size();
    e["byte_length"] = t.size() * sizeof(double);
    put_f64s(blobs_, t.data);
    entries_.push_back(std::move(e));
    return entries_.back();
  }

  std::string finish(json manifest) {
    manifest["entries"] = std::move(entries_);
    const std::string text = manifest.dump();
    std::string out(kMagic, 4);
    put_u64(out, text.size());
    out += text;
    out += blobs_;
    return out;
  }

 private:
  json entries_ = json::array();
  std::string blobs_;
};

json header(const char* kind, const std::map<std::string, std::string>& meta) {
  json m;
  m["format"] = "DMB";
  m["version"] = kDmbVersion;
  m["bundle"] = kind;
  m["meta"] = meta;
  return m;
}

struct Parsed {
  json manifest;
  std::string_view blobs;
};

Parsed parse(const std::string& bytes) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw Error("not a DMB file");
  const std::uint64_t len = get_u64(bytes, 4);
  if (len > bytes.size() - 12) throw Error("malformed manifest: length exceeds file size");
  Parsed p;
  try {
    p.manifest = json::parse(bytes.begin() + 12, bytes.begin() + 12 + static_cast<std::ptrdiff_t>(len));
  } catch (const json::exception& e) {
    throw Error(std::string("malformed manifest: ") + e.what());
  }
  if (!p.manifest.is_object() || p.manifest.value("format", "") != "DMB")
    throw Error("malformed manifest: missing format tag");
  if (p.manifest.value("version", -1) != kDmbVersion)
    throw Error("version unsupported: " + p.manifest.value("version", json(-1)).dump());
  if (!p.manifest.contains("entries") || !p.manifest["entries"].is_array())
    throw Error("malformed manifest: missing entries");
  p.blobs = std::string_view(bytes).substr(12 + len);
  return p;
}

Tensor read_tensor(const json& e, std::string_view blobs) {
  if (e.value("dtype", "") != "f64") throw Error("unsupported dtype in entry " + e.value("name", ""));
  Shape shape = e.at("shape").get<Shape>();
  for (auto d : shape)
    if (d <= 0) throw Error("malformed manifest: non-positive extent");
  const auto offset = e.at("byte_offset").get<std::uint64_t>();
  const auto length = e.at("byte_length").get<std::uint64_t>();
  const std::size_t n = shape_size(shape);
  if (length != n * sizeof(double) || offset > blobs.size() || length > blobs.size() - offset)
    throw Error("tensor byte-length mismatch (" + e.value("name", "") + ")");
  std::vector<double> data(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b)
      bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(blobs[offset + i * 8 + b])) << (8 * b);
    data[i] = std::bit_cast<double>(bits);
  }
  return Tensor(std::move(shape), std::move(data));
}

std::map<std::string, std::string> read_meta(const json& m) {
  if (!m.contains("meta")) return {};
  return m["meta"].get<std::map<std::string, std::string>>();
}

ModelBundle decode_model(const Parsed& p) {
  ModelBundle b;
  b.meta = read_meta(p.manifest);
  for (const auto& e : p.manifest["entries"]) {
    const auto role = e.at("role").get<std::string>();
    if (role == "weight") {
      LayerRecord l;
      l.layer_id = e.at("layer_id").get<int>();
      l.name = e.at("name").get<std::string>();
      l.kind = layer_kind_from_string(e.at("kind").get<std::string>());
      l.flops_per_weight = e.at("flops_per_weight").get<double>();
      l.prunable = e.at("prunable").get<bool>();
      l.weight = read_tensor(e, p.blobs);
      b.layers.push_back(std::move(l));
    } else if (role == "mask") {
      b.masks.push_back(PruneMask::from_bits(e.at("layer_id").get<int>(), read_tensor(e, p.blobs)));
    } else {
      throw Error("malformed manifest: role '" + role + "' in a model bundle");
    }
  }
  b.validate();
  return b;
}

GradientBundle decode_gradients(const Parsed& p) {
  GradientBundle g;
  g.meta = read_meta(p.manifest);
  const auto lam = p.manifest.at("lambda").get<std::vector<double>>();
  if (lam.size() != 2) throw Error("malformed manifest: lambda must have two entries");
  g.lambda_used = {lam[0], lam[1]};
  g.n_samples = p.manifest.at("n_samples").get<int>();
  for (const auto& e : p.manifest["entries"]) {
    const auto role = e.at("role").get<std::string>();
    const int id = e.at("layer_id").get<int>();
    if (role == "avg_grad") {
      LayerGradient lg;
      lg.layer_id = id;
      lg.name = e.at("name").get<std::string>();
      lg.avg_grad = read_tensor(e, p.blobs);
      g.layers.push_back(std::move(lg));
    } else if (role == "per_sample_grads") {
      if (g.layers.empty() || g.layers.back().layer_id != id)
        throw Error("malformed manifest: per_sample_grads must follow its avg_grad entry");
      g.layers.back().per_sample = read_tensor(e, p.blobs);
    } else {
      throw Error("malformed manifest: role '" + role + "' in a gradient bundle");
    }
  }
  g.validate();
  return g;
}

CalibrationSet decode_calibration(const Parsed& p) {
  CalibrationSet c;
  c.meta = read_meta(p.manifest);
  c.seed = p.manifest.value("seed", std::uint64_t{0});
  const auto& entries = p.manifest["entries"];
  if (entries.size() != 1 || entries[0].value("role", "") != "input")
    throw Error("malformed manifest: calibration bundle needs exactly one input entry");
  c.inputs = read_tensor(entries[0], p.blobs);
  c.validate();
  return c;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed for " + path.string());
}

}  // namespace

std::string encode_bundle(const ModelBundle& bundle) {
  bundle.validate();
  Writer w;
  for (const auto& l : bundle.layers) {
    auto& e = w.add(l.name, "weight", l.layer_id, l.weight);
    e["flops_per_weight"] = l.flops_per_weight;
    e["kind"] = to_string(l.kind);
    e["prunable"] = l.prunable;
  }
  for (const auto& m : bundle.masks) {
    const auto& l = bundle.layer(m.layer_id);
    auto& e = w.add(l.name + ".mask", "mask", m.layer_id, m.bits);
    e["flops_per_weight"] = l.flops_per_weight;
    e["kind"] = to_string(l.kind);
    e["prunable"] = l.prunable;
  }
  return w.finish(header("model", bundle.meta));
}

std::string encode_bundle(const GradientBundle& bundle) {
  bundle.validate();
  Writer w;
  for (const auto& g : bundle.layers) {
    w.add(g.name, "avg_grad", g.layer_id, g.avg_grad);
    if (g.per_sample) w.add(g.name + ".per_sample", "per_sample_grads", g.layer_id, *g.per_sample);
  }
  auto m = header("gradients", bundle.meta);
  m["lambda"] = {bundle.lambda_used.first, bundle.lambda_used.second};
  m["n_samples"] = bundle.n_samples;
  return w.finish(std::move(m));
}

std::string encode_bundle(const CalibrationSet& calib) {
  calib.validate();
  Writer w;
  w.add("inputs", "input", 0, calib.inputs);
  auto m = header("calibration", calib.meta);
  m["seed"] = calib.seed;
  return w.finish(std::move(m));
}

AnyBundle decode_bundle(const std::string& bytes) {
  const Parsed p = parse(bytes);
  try {
    const auto kind = p.manifest.value("bundle", "");
    if (kind == "model") return decode_model(p);
    if (kind == "gradients") return decode_gradients(p);
    if (kind == "calibration") return decode_calibration(p);
    throw Error("malformed manifest: unknown bundle kind '" + kind + "'");
  } catch (const json::exception& e) {
    throw Error(std::string("malformed manifest: ") + e.what());
  }
}

void save_bundle(const ModelBundle& bundle, const std::filesystem::path& path) {
  write_file(path, encode_bundle(bundle));
}
void save_bundle(const GradientBundle& bundle, const std::filesystem::path& path) {
  write_file(path, encode_bundle(bundle));
}
void save_bundle(const CalibrationSet& calib, const std::filesystem::path& path) {
  write_file(path, encode_bundle(calib));
}

AnyBundle load_bundle(const std::filesystem::path& path) { return decode_bundle(read_file(path)); }

namespace {
template <class T>
T load_as(const std::filesystem::path& path, const char* what) {
  auto any = load_bundle(path);
  if (auto* b = std::get_if<T>(&any)) return std::move(*b);
  throw Error(path.string() + " is not a " + what + " bundle");
}
}  // namespace

ModelBundle load_model(const std::filesystem::path& path) { return load_as<ModelBundle>(path, "model"); }
GradientBundle load_gradients(const std::filesystem::path& path) {
  return load_as<GradientBundle>(path, "gradient");
}
CalibrationSet load_calibration(const std::filesystem::path& path) {
  return load_as<CalibrationSet>(path, "calibration");
}

}  // namespace dmprune
