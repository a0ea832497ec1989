#pragma once

// Model file format (little-endian):
//   magic "CALR" | format version u32 | config JSON (u32 length prefix) |
//   tensor count u32 | per tensor: name (u32 length + UTF-8), rows u32,
//   cols u32, data f32 row-major. No padding between sections.
//
// The config JSON carries the model dimensions plus a "compression" list
// describing which layers hold factored FFNs / projections, so the loader
// can rebuild the exact structure before filling in tensors.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "calr/error.hpp"
#include "calr/model.hpp"

namespace calr {

constexpr uint32_t kModelFormatVersion = 1;
constexpr char kModelMagic[4] = {'C', 'A', 'L', 'R'};

// ---------------------------------------------------------------------------
// Config <-> JSON
// ---------------------------------------------------------------------------

inline nlohmann::json model_config_to_json(const TransformerModel& model) {
  const ModelConfig& c = model.config;
  nlohmann::json j{
      {"d_model", c.d_model},     {"n_layers", c.n_layers},
      {"n_heads", c.n_heads},     {"d_ff", c.d_ff},
      {"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len},
      {"seed", c.seed},
  };
  nlohmann::json compression = nlohmann::json::array();
  for (size_t i = 0; i < model.blocks.size(); ++i) {
    const TransformerBlock& block = model.blocks[i];
    if (!block.ffn_compressed()) continue;
    const CompressedFfn& comp = std::get<CompressedFfn>(block.ffn);
    nlohmann::json entry{
        {"layer", i},
        {"mode", to_string(comp.mode)},
        {"r", comp.g.rank},
        {"r_c", comp.corrective ? comp.corrective->rank : 0},
        {"corrective", to_string(comp.corrective_kind)},
        {"qkv", block.qkv_compressed()},
    };
    if (block.qkv_compressed()) {
      entry["qkv_r"] = std::get<CompressedLinear>(block.wq).w.rank;
    }
    compression.push_back(entry);
  }
  j["compression"] = compression;
  return j;
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.d_model = j.at("d_model").get<int>();
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  c.seed = j.at("seed").get<uint64_t>();
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Save
// ---------------------------------------------------------------------------

namespace detail {

inline void write_u32(std::string& buf, uint32_t v) {
  char bytes[4];
  std::memcpy(bytes, &v, 4);
  buf.append(bytes, 4);
}

inline void write_tensor(std::string& buf, const std::string& name,
                         const Matrix& m) {
  write_u32(buf, static_cast<uint32_t>(name.size()));
  buf.append(name);
  write_u32(buf, static_cast<uint32_t>(m.rows()));
  write_u32(buf, static_cast<uint32_t>(m.cols()));
  for (size_t i = 0; i < m.size(); ++i) {
    float f = static_cast<float>(m.data()[i]);
    char bytes[4];
    std::memcpy(bytes, &f, 4);
    buf.append(bytes, 4);
  }
}

}  // namespace detail

inline std::string serialize_model(const TransformerModel& model) {
  std::string buf;
  buf.append(kModelMagic, 4);
  detail::write_u32(buf, kModelFormatVersion);
  std::string config = model_config_to_json(model).dump();
  detail::write_u32(buf, static_cast<uint32_t>(config.size()));
  buf.append(config);

  uint32_t count = 0;
  visit_tensors(model, [&count](const std::string&, const Matrix&) { ++count; });
  detail::write_u32(buf, count);
  visit_tensors(model, [&buf](const std::string& name, const Matrix& m) {
    detail::write_tensor(buf, name, m);
  });
  return buf;
}

inline void save_model(const TransformerModel& model,
                       const std::filesystem::path& path) {
  std::string buf = serialize_model(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw Error(ErrorCode::kIoFailure, "save_model: cannot open " + path.string());
  }
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) {
    throw Error(ErrorCode::kIoFailure, "save_model: write failed for " + path.string());
  }
}

// ---------------------------------------------------------------------------
// Load
// ---------------------------------------------------------------------------

namespace detail {

struct Cursor {
  const char* data;
  size_t size;
  size_t pos = 0;
  std::string context = "header";

  void require(size_t n) const {
    if (pos + n > size) {
      throw Error(ErrorCode::kTruncatedTensor,
                  "load_model: file truncated while reading " + context);
    }
  }
  uint32_t u32() {
    require(4);
    uint32_t v;
    std::memcpy(&v, data + pos, 4);
    pos += 4;
    return v;
  }
  std::string bytes(size_t n) {
    require(n);
    std::string out(data + pos, n);
    pos += n;
    return out;
  }
};

inline Matrix read_tensor_data(Cursor& cur, uint32_t rows, uint32_t cols) {
  Matrix m(static_cast<int>(rows), static_cast<int>(cols));
  cur.require(static_cast<size_t>(rows) * cols * 4);
  for (size_t i = 0; i < m.size(); ++i) {
    float f;
    std::memcpy(&f, cur.data + cur.pos, 4);
    cur.pos += 4;
    m.data()[i] = static_cast<double>(f);
  }
  return m;
}

inline Matrix take_tensor(std::map<std::string, Matrix>& tensors,
                          const std::string& name, int rows, int cols) {
  auto it = tensors.find(name);
  if (it == tensors.end()) {
    throw Error(ErrorCode::kBadConfig, "load_model: missing tensor " + name);
  }
  if (it->second.rows() != rows || it->second.cols() != cols) {
    throw Error(ErrorCode::kBadConfig,
                "load_model: tensor " + name + " has shape " +
                    it->second.shape_str() + ", expected " +
                    std::to_string(rows) + "x" + std::to_string(cols));
  }
  Matrix out = std::move(it->second);
  tensors.erase(it);
  return out;
}

}  // namespace detail

inline TransformerModel deserialize_model(const std::string& buf) {
  detail::Cursor cur{buf.data(), buf.size()};
  if (cur.bytes(4) != std::string(kModelMagic, 4)) {
    throw Error(ErrorCode::kBadMagic, "load_model: bad magic bytes");
  }
  uint32_t version = cur.u32();
  if (version != kModelFormatVersion) {
    throw Error(ErrorCode::kBadVersion,
                "load_model: format version " + std::to_string(version) +
                    ", expected " + std::to_string(kModelFormatVersion));
  }
  cur.context = "config";
  uint32_t config_len = cur.u32();
  nlohmann::json config_json;
  try {
    config_json = nlohmann::json::parse(cur.bytes(config_len));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kBadConfig,
                std::string("load_model: config parse error: ") + e.what());
  }
  ModelConfig config = model_config_from_json(config_json);

  cur.context = "tensor count";
  uint32_t count = cur.u32();
  std::map<std::string, Matrix> tensors;
  for (uint32_t i = 0; i < count; ++i) {
    cur.context = "tensor " + std::to_string(i) + " name";
    uint32_t name_len = cur.u32();
    std::string name = cur.bytes(name_len);
    cur.context = "tensor " + name;
    uint32_t rows = cur.u32();
    uint32_t cols = cur.u32();
    tensors.emplace(name, detail::read_tensor_data(cur, rows, cols));
  }
  if (cur.pos != cur.size) {
    throw Error(ErrorCode::kBadConfig, "load_model: trailing bytes after tensors");
  }

  TransformerModel model;
  model.config = config;
  const int d = config.d_model, f = config.d_ff;
  model.embedding = detail::take_tensor(tensors, "embedding", config.vocab_size, d);
  model.blocks.resize(config.n_layers);

  std::map<int, nlohmann::json> compressed_layers;
  for (const auto& entry : config_json.value("compression", nlohmann::json::array())) {
    compressed_layers[entry.at("layer").get<int>()] = entry;
  }

  for (int i = 0; i < config.n_layers; ++i) {
    TransformerBlock& block = model.blocks[i];
    std::string prefix = "blocks." + std::to_string(i) + ".";
    auto it = compressed_layers.find(i);
    bool qkv = it != compressed_layers.end() && it->second.value("qkv", false);

    auto load_proj = [&](const char* name) -> ProjSlot {
      if (!qkv) return detail::take_tensor(tensors, prefix + "attn." + name, d, d);
      const nlohmann::json& meta = it->second;
      CompressedLinear lin;
      lin.mode = compression_mode_from_string(meta.at("mode").get<std::string>());
      int r = meta.at("qkv_r").get<int>();
      lin.w.rank = r;
      lin.w.a = detail::take_tensor(tensors, prefix + "attn." + name + ".a", d, r);
      lin.w.b = detail::take_tensor(tensors, prefix + "attn." + name + ".b", r, d);
      std::string corr_a = prefix + "attn." + name + ".corr.a";
      if (tensors.count(corr_a)) {
        CorrectiveModule corr;
        int rc = meta.at("r_c").get<int>();
        corr.rank = rc;
        corr.a = detail::take_tensor(tensors, corr_a, d, rc);
        corr.b = detail::take_tensor(tensors, prefix + "attn." + name + ".corr.b", rc, d);
        lin.corrective = std::move(corr);
      }
      return lin;
    };
    block.wq = load_proj("wq");
    block.wk = load_proj("wk");
    block.wv = load_proj("wv");
    block.wo = detail::take_tensor(tensors, prefix + "attn.wo", d, d);
    block.norm_attn = detail::take_tensor(tensors, prefix + "norm_attn", 1, d);
    block.norm_ffn = detail::take_tensor(tensors, prefix + "norm_ffn", 1, d);

    if (it == compressed_layers.end()) {
      GatedFfn dense;
      dense.w_g = detail::take_tensor(tensors, prefix + "ffn.w_g", d, f);
      dense.w_u = detail::take_tensor(tensors, prefix + "ffn.w_u", d, f);
      dense.w_d = detail::take_tensor(tensors, prefix + "ffn.w_d", f, d);
      block.ffn = std::move(dense);
    } else {
      const nlohmann::json& meta = it->second;
      CompressedFfn comp;
      comp.mode = compression_mode_from_string(meta.at("mode").get<std::string>());
      comp.corrective_kind =
          corrective_kind_from_string(meta.at("corrective").get<std::string>());
      int r = meta.at("r").get<int>();
      comp.g.rank = comp.u.rank = comp.d.rank = r;
      comp.g.a = detail::take_tensor(tensors, prefix + "ffn.g.a", d, r);
      comp.g.b = detail::take_tensor(tensors, prefix + "ffn.g.b", r, f);
      comp.u.a = detail::take_tensor(tensors, prefix + "ffn.u.a", d, r);
      comp.u.b = detail::take_tensor(tensors, prefix + "ffn.u.b", r, f);
      comp.d.a = detail::take_tensor(tensors, prefix + "ffn.d.a", f, r);
      comp.d.b = detail::take_tensor(tensors, prefix + "ffn.d.b", r, d);
      if (comp.corrective_kind == CorrectiveKind::kDense) {
        CorrectiveModule corr;
        corr.rank = meta.at("r_c").get<int>();
        corr.a = detail::take_tensor(tensors, prefix + "ffn.corr.a", d, corr.rank);
        corr.b = detail::take_tensor(tensors, prefix + "ffn.corr.b", corr.rank, d);
        comp.corrective = std::move(corr);
      } else if (comp.corrective_kind == CorrectiveKind::kSparse) {
        SparseCorrective sp;
        sp.s = detail::take_tensor(tensors, prefix + "ffn.sparse.s", d, d);
        sp.mask = detail::take_tensor(tensors, prefix + "ffn.sparse.mask", d, d);
        sp.density = static_cast<double>(sp.nonzero_count()) / sp.mask.size();
        comp.sparse = std::move(sp);
      }
      block.ffn = std::move(comp);
    }
  }
  model.final_norm = detail::take_tensor(tensors, "final_norm", 1, d);
  if (!tensors.empty()) {
    throw Error(ErrorCode::kBadConfig,
                "load_model: unexpected tensor " + tensors.begin()->first);
  }
  return model;
}

inline TransformerModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw Error(ErrorCode::kIoFailure, "load_model: cannot open " + path.string());
  }
  std::string buf((std::istreambuf_iterator<char>(in)),
                  std::istreambuf_iterator<char>());
  return deserialize_model(buf);
}

}  // namespace calr
