#include "qlab/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "json.hpp"
#include "qlab/quantizer.hpp"

namespace qlab {

using nlohmann::json;

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_le(const std::uint8_t* p, int n) {
  std::uint64_t v = 0;
  for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

struct Entry {
  std::string name;
  std::string dtype;
  Shape shape;
  std::vector<std::uint8_t> bytes;
  std::string packing;  // levels only
};

Entry f32_entry(std::string name, const Tensor<float>& t) {
  Entry e{std::move(name), "f32", t.shape(), {}, {}};
  e.bytes.reserve(t.size() * 4);
  for (float v : t.values()) put_u32(e.bytes, std::bit_cast<std::uint32_t>(v));
  return e;
}

Entry levels_entry(std::string name, const QuantizedLayer& layer, int bits) {
  Entry e{std::move(name), "u8", layer.params.rounding.shape(), {}, {}};
  if (bits <= 4) {
    e.packing = "nibble";
    e.bytes = pack_quantized(layer.levels, 4);
  } else {
    e.packing = "byte";
    e.bytes = layer.levels;
  }
  return e;
}

json model_config_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},   {"n_heads", c.n_heads},
          {"n_blocks", c.n_blocks},     {"d_ff", c.d_ff},         {"max_seq_len", c.max_seq_len},
          {"seed", c.seed}};
}

std::vector<std::uint8_t> assemble(json meta, const std::vector<Entry>& entries) {
  json tensors = json::array();
  std::uint64_t offset = 0;
  for (const auto& e : entries) {
    json t = {{"name", e.name}, {"dtype", e.dtype}, {"shape", e.shape}, {"offset", offset}, {"length", e.bytes.size()}};
    if (!e.packing.empty()) t["packing"] = e.packing;
    tensors.push_back(std::move(t));
    offset += e.bytes.size();
  }
  meta["tensors"] = std::move(tensors);
  const std::string text = meta.dump();

  std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  put_u32(out, kCheckpointVersion);
  put_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& e : entries) out.insert(out.end(), e.bytes.begin(), e.bytes.end());
  return out;
}

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& bytes, const json& meta, std::size_t payload_start)
      : bytes_(bytes), start_(payload_start) {
    const auto& list = meta.at("tensors");
    std::uint64_t expected = 0;
    for (const auto& t : list) {
      const auto name = t.at("name").get<std::string>();
      const auto offset = t.at("offset").get<std::uint64_t>();
      const auto length = t.at("length").get<std::uint64_t>();
      if (offset != expected) throw CheckpointError("metadata: tensor " + name + " is not laid out contiguously");
      if (start_ + offset + length > bytes_.size())
        throw CheckpointError("truncated payload: tensor " + name + " extends past the end of the file");
      expected += length;
      index_.emplace(name, t);
    }
    if (start_ + expected != bytes_.size()) throw CheckpointError("payload: trailing bytes after the last tensor");
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  Tensor<float> f32(const std::string& name, const Shape& expected) const {
    const json& t = find(name);
    if (t.at("dtype") != "f32") throw CheckpointError("tensor " + name + ": expected dtype f32");
    const Shape shape = t.at("shape").get<Shape>();
    if (shape != expected)
      throw CheckpointError("tensor " + name + ": shape " + to_string(shape) + ", expected " + to_string(expected));
    const auto length = t.at("length").get<std::uint64_t>();
    if (length != numel(shape) * 4) throw CheckpointError("tensor " + name + ": length does not match its shape");
    const std::uint8_t* p = bytes_.data() + start_ + t.at("offset").get<std::uint64_t>();
    std::vector<float> v(numel(shape));
    for (std::size_t i = 0; i < v.size(); ++i)
      v[i] = std::bit_cast<float>(static_cast<std::uint32_t>(get_le(p + 4 * i, 4)));
    return Tensor<float>(shape, std::move(v));
  }

  std::vector<std::uint8_t> levels(const std::string& name, const Shape& expected, int bits) const {
    const json& t = find(name);
    if (t.at("dtype") != "u8") throw CheckpointError("tensor " + name + ": expected dtype u8");
    const Shape shape = t.at("shape").get<Shape>();
    if (shape != expected)
      throw CheckpointError("tensor " + name + ": shape " + to_string(shape) + ", expected " + to_string(expected));
    const std::size_t count = numel(shape);
    const auto offset = t.at("offset").get<std::uint64_t>();
    const auto length = t.at("length").get<std::uint64_t>();
    std::vector<std::uint8_t> raw(bytes_.begin() + static_cast<std::ptrdiff_t>(start_ + offset),
                                  bytes_.begin() + static_cast<std::ptrdiff_t>(start_ + offset + length));
    const std::string packing = t.value("packing", "");
    if (packing != (bits <= 4 ? "nibble" : "byte"))
      throw CheckpointError("tensor " + name + ": packing '" + packing + "' does not match " + std::to_string(bits) +
                            "-bit levels");
    std::vector<std::uint8_t> out;
    try {
      out = bits <= 4 ? unpack_quantized(raw, count, 4) : raw;
    } catch (const std::invalid_argument& e) {
      throw CheckpointError("tensor " + name + ": " + e.what());
    }
    if (out.size() != count) throw CheckpointError("tensor " + name + ": length does not match its shape");
    const int qmax = (1 << bits) - 1;
    for (auto q : out)
      if (q > qmax) throw CheckpointError("tensor " + name + ": grid index outside the " + std::to_string(bits) + "-bit range");
    return out;
  }

 private:
  const json& find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw CheckpointError("metadata: tensor " + name + " is missing");
    return it->second;
  }

  const std::vector<std::uint8_t>& bytes_;
  std::size_t start_;
  std::map<std::string, json> index_;
};

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Model<float>& model,
                                               const std::map<std::string, std::string>& info) {
  std::vector<Entry> entries;
  for (const auto& [name, t] : model.parameters()) entries.push_back(f32_entry(name, *t));
  json meta = {{"kind", "model"}, {"model", model_config_json(model.config)}, {"info", info}};
  return assemble(std::move(meta), entries);
}

std::vector<std::uint8_t> serialize_checkpoint(const QuantizedModel& q) {
  std::vector<Entry> entries;
  std::vector<std::string> quantized;
  for (const auto& [name, t] : q.model.parameters()) {
    const bool is_weight = name.size() > 7 && name.compare(name.size() - 7, 7, ".weight") == 0;
    const std::string layer = is_weight ? name.substr(0, name.size() - 7) : std::string();
    auto it = is_weight ? q.layers.find(layer) : q.layers.end();
    if (it == q.layers.end()) {
      entries.push_back(f32_entry(name, *t));
      continue;
    }
    const QuantizedLayer& ql = it->second;
    quantized.push_back(layer);
    entries.push_back(levels_entry(layer + ".levels", ql, q.quant.bits));
    entries.push_back(f32_entry(layer + ".scale", ql.scale));
    entries.push_back(f32_entry(layer + ".zero", ql.zero));
    entries.push_back(f32_entry(layer + ".alpha", ql.params.alpha));
    entries.push_back(f32_entry(layer + ".beta", ql.params.beta));
    entries.push_back(f32_entry(layer + ".rounding", ql.params.rounding));
  }
  if (quantized.size() != q.layers.size())
    throw std::invalid_argument("serialize_checkpoint: quantized layer set does not match the model");
  json meta = {{"kind", "quantized"},
               {"model", model_config_json(q.model.config)},
               {"quant", {{"bits", q.quant.bits}, {"group_size", q.quant.group_size}, {"mode", to_string(q.quant.mode)}}},
               {"quantized_layers", quantized},
               {"info", q.info}};
  return assemble(std::move(meta), entries);
}

LoadedCheckpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
    throw CheckpointError("bad magic: not a BQCK checkpoint");
  if (bytes.size() < 8) throw CheckpointError("truncated header: missing version");
  const auto version = static_cast<std::uint32_t>(get_le(bytes.data() + 4, 4));
  if (version != kCheckpointVersion)
    throw CheckpointError("unsupported version " + std::to_string(version) + " (this build reads version " +
                          std::to_string(kCheckpointVersion) + ")");
  if (bytes.size() < 16) throw CheckpointError("truncated header: missing metadata length");
  const std::uint64_t meta_len = get_le(bytes.data() + 8, 8);
  if (meta_len > bytes.size() - 16) throw CheckpointError("truncated metadata: file ends inside the metadata block");

  json meta;
  try {
    meta = json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(meta_len));
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("metadata: malformed JSON: ") + e.what());
  }

  LoadedCheckpoint out;
  try {
    const std::string kind = meta.at("kind").get<std::string>();
    if (kind != "model" && kind != "quantized") throw CheckpointError("metadata: unknown kind '" + kind + "'");
    out.kind = kind == "model" ? CheckpointKind::model : CheckpointKind::quantized;
    out.info = meta.at("info").get<std::map<std::string, std::string>>();

    const json& mc = meta.at("model");
    ModelConfig cfg;
    cfg.vocab_size = mc.at("vocab_size").get<std::size_t>();
    cfg.d_model = mc.at("d_model").get<std::size_t>();
    cfg.n_heads = mc.at("n_heads").get<std::size_t>();
    cfg.n_blocks = mc.at("n_blocks").get<std::size_t>();
    cfg.d_ff = mc.at("d_ff").get<std::size_t>();
    cfg.max_seq_len = mc.at("max_seq_len").get<std::size_t>();
    cfg.seed = mc.at("seed").get<std::uint64_t>();

    const Reader reader(bytes, meta, 16 + meta_len);
    Model<float> model = build_model<float>(cfg);

    QuantConfig quant;
    std::set<std::string> quantized;
    if (out.kind == CheckpointKind::quantized) {
      const json& qc = meta.at("quant");
      quant.bits = qc.at("bits").get<int>();
      quant.group_size = qc.at("group_size").get<std::size_t>();
      quant.mode = parse_quant_mode(qc.at("mode").get<std::string>());
      quant.validate();
      for (const auto& name : meta.at("quantized_layers")) quantized.insert(name.get<std::string>());
    }

    QuantizedModel qm{{}, quant, {}, out.info};
    for (auto& [name, t] : model.parameters()) {
      const std::string layer = name.size() > 7 ? name.substr(0, name.size() - 7) : std::string();
      if (!quantized.count(layer) || name.compare(name.size() - 7, 7, ".weight") != 0) {
        *t = reader.f32(name, t->shape());
        continue;
      }
      const Shape shape = t->shape();
      const Shape grid{shape[0], quant.groups(shape[1])};
      QuantizedLayer ql;
      ql.levels = reader.levels(layer + ".levels", shape, quant.bits);
      ql.scale = reader.f32(layer + ".scale", grid);
      ql.zero = reader.f32(layer + ".zero", grid);
      ql.params = {reader.f32(layer + ".alpha", grid), reader.f32(layer + ".beta", grid),
                   reader.f32(layer + ".rounding", shape), quant.group_size};
      *t = dequantize_levels<float>(ql.levels, ql.scale, ql.zero, shape[0], shape[1], quant.group_size);
      qm.layers.emplace(layer, std::move(ql));
    }
    if (qm.layers.size() != quantized.size()) throw CheckpointError("metadata: unknown quantized layer listed");
    out.model = model;
    if (out.kind == CheckpointKind::quantized) {
      qm.model = std::move(model);
      out.quantized = std::move(qm);
    }
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("metadata: ") + e.what());
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("metadata: ") + e.what());
  }
  return out;
}

namespace {

void write_bytes(const std::vector<std::uint8_t>& bytes, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("write failed for checkpoint " + path.string());
}

}  // namespace

void save_checkpoint(const Model<float>& model, const std::filesystem::path& path,
                     const std::map<std::string, std::string>& info) {
  write_bytes(serialize_checkpoint(model, info), path);
}

void save_checkpoint(const QuantizedModel& quantized, const std::filesystem::path& path) {
  write_bytes(serialize_checkpoint(quantized), path);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return deserialize_checkpoint(bytes);
  } catch (const CheckpointError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
}

Model<float> load_model(const std::filesystem::path& path) { return load_checkpoint(path).model; }

QuantizedModel load_quantized(const std::filesystem::path& path) {
  auto c = load_checkpoint(path);
  if (!c.quantized) throw CheckpointError(path.string() + ": not a quantized checkpoint");
  return std::move(*c.quantized);
}

}  // namespace qlab
