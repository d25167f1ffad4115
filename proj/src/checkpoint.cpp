// SPDX-License-Identifier: Apache-2.0
// Copyright (C) 2026 mmfer contributors

#include "mmfer/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <set>

#include "mmfer/error.hpp"

namespace mmfer {

static_assert(std::endian::native == std::endian::little, "checkpoints are little-endian");

namespace {

class Writer {
 public:
  explicit Writer(const std::filesystem::path& path) : path_(path), out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) throw FormatError("cannot write checkpoint '" + path.string() + "'");
  }
  template <typename U>
  void put(U v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof(U));
  }
  void bytes(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
  void finish() {
    out_.flush();
    if (!out_) throw FormatError("write to checkpoint '" + path_.string() + "' failed");
  }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path) : path_(path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("checkpoint '" + path.string() + "' is missing or unreadable");
    buf_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }
  bool at_end() const { return pos_ == buf_.size(); }
  std::size_t offset() const { return pos_; }
  [[noreturn]] void fail(const std::string& what) const {
    throw FormatError("checkpoint '" + path_.string() + "' at offset " + std::to_string(pos_) + ": " + what);
  }
  void need(std::size_t n, const char* what) const {
    if (buf_.size() - pos_ < n) {
      fail(std::string("truncated while reading ") + what + " (need " + std::to_string(n) + " bytes, " +
           std::to_string(buf_.size() - pos_) + " left)");
    }
  }
  template <typename U>
  U get(const char* what) {
    need(sizeof(U), what);
    U v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  void floats(float* dst, std::size_t n, const char* what) {
    need(n * sizeof(float), what);
    std::memcpy(dst, buf_.data() + pos_, n * sizeof(float));
    pos_ += n * sizeof(float);
  }

 private:
  std::filesystem::path path_;
  std::vector<char> buf_;
  std::size_t pos_ = 0;
};

std::uint32_t u32(std::size_t v, const char* what) {
  if (v > std::numeric_limits<std::uint32_t>::max()) throw ConfigError(std::string(what) + " does not fit in u32");
  return static_cast<std::uint32_t>(v);
}

// The shortest decimal that reads back as `f`, so 0.1f loads as 0.1.
double shortest_double(float f) {
  char buf[32];
  for (int digits = 1; digits <= 9; ++digits) {
    std::snprintf(buf, sizeof buf, "%.*g", digits, static_cast<double>(f));
    const double d = std::strtod(buf, nullptr);
    if (static_cast<float>(d) == f) return d;
  }
  return f;
}

ModelConfig read_config(Reader& r) {
  const std::string magic = r.str(4, "magic");
  if (magic != std::string(kCheckpointMagic.data(), 4)) r.fail("bad magic (not an MMCK checkpoint)");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) r.fail("unsupported version " + std::to_string(version));
  ModelConfig c;
  c.d_model = r.get<std::uint32_t>("d_model");
  c.n_layers = r.get<std::uint32_t>("n_layers");
  c.n_heads = r.get<std::uint32_t>("n_heads");
  c.d_ff = r.get<std::uint32_t>("d_ff");
  c.dropout = shortest_double(r.get<float>("dropout"));
  const auto fusion = r.get<std::uint32_t>("fusion");
  if (fusion >= kFusionModes.size()) r.fail("unknown fusion code " + std::to_string(fusion));
  c.fusion = kFusionModes[fusion];
  c.decision_hidden = r.get<std::uint32_t>("decision_hidden");
  c.n_classes = r.get<std::uint32_t>("n_classes");
  try {
    c.validate();
  } catch (const ConfigError& e) {
    r.fail(std::string("invalid config block: ") + e.what());
  }
  return c;
}

struct Entry {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

Entry read_entry(Reader& r) {
  Entry e;
  const auto len = r.get<std::uint16_t>("name length");
  e.name = r.str(len, "name");
  const auto rank = r.get<std::uint8_t>("rank");
  for (std::uint8_t i = 0; i < rank; ++i) {
    const auto extent = r.get<std::uint32_t>("extent");
    if (extent == 0) r.fail("zero extent in '" + e.name + "'");
    e.shape.push_back(extent);
  }
  e.data.resize(shape_size(e.shape));
  r.floats(e.data.data(), e.data.size(), "tensor data");
  return e;
}

// Reads and checks every entry against the model; nothing is written to the
// model until the whole file has been validated.
template <typename T>
std::vector<std::pair<Tensor<T>*, Entry>> read_entries(Model<T>& model, Reader& r) {
  std::map<std::string, Tensor<T>*> slots;
  for (auto& p : model.parameters()) slots[p.name] = &p.value;
  for (auto& [name, t] : model.buffers()) slots[name] = t;
  std::vector<std::pair<Tensor<T>*, Entry>> out;
  std::set<std::string> seen;
  while (!r.at_end()) {
    const std::size_t start = r.offset();
    Entry e = read_entry(r);
    auto it = slots.find(e.name);
    if (it == slots.end()) {
      throw ConfigError("checkpoint parameter '" + e.name + "' (offset " + std::to_string(start) + ") does not exist in a " +
                        std::string(fusion_name(model.config().fusion)) + " model with this config");
    }
    if (e.shape != it->second->shape()) {
      throw ConfigError("checkpoint parameter '" + e.name + "' has shape " + shape_str(e.shape) +
                        " but the model expects " + shape_str(it->second->shape()));
    }
    if (!seen.insert(e.name).second) r.fail("duplicate parameter '" + e.name + "'");
    out.emplace_back(it->second, std::move(e));
  }
  for (const auto& [name, t] : slots) {
    if (!seen.contains(name)) throw ConfigError("checkpoint is missing parameter '" + name + "'");
  }
  return out;
}

template <typename T>
void assign(std::vector<std::pair<Tensor<T>*, Entry>>& entries) {
  for (auto& [dst, e] : entries) {
    T* d = dst->ptr();
    for (std::size_t i = 0; i < e.data.size(); ++i) d[i] = static_cast<T>(e.data[i]);
  }
}

}  // namespace

template <typename T>
void save_checkpoint(const Model<T>& model, const std::filesystem::path& path) {
  Writer w(path);
  const ModelConfig& c = model.config();
  w.bytes(kCheckpointMagic.data(), 4);
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put(u32(c.d_model, "d_model"));
  w.put(u32(c.n_layers, "n_layers"));
  w.put(u32(c.n_heads, "n_heads"));
  w.put(u32(c.d_ff, "d_ff"));
  w.put(static_cast<float>(c.dropout));
  w.put(static_cast<std::uint32_t>(c.fusion));
  w.put(u32(c.decision_hidden, "decision_hidden"));
  w.put(u32(c.n_classes, "n_classes"));
  auto entry = [&](const std::string& name, const Tensor<T>& t) {
    w.put(static_cast<std::uint16_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.put(static_cast<std::uint8_t>(t.rank()));
    for (std::size_t d : t.shape()) w.put(u32(d, "extent"));
    const auto f = t.template cast<float>();
    w.bytes(f.ptr(), f.size() * sizeof(float));
  };
  for (const auto& p : model.parameters()) entry(p.name, p.value);
  for (const auto& [name, t] : model.buffers()) entry(name, *t);
  w.finish();
}

ModelConfig read_checkpoint_config(const std::filesystem::path& path) {
  Reader r(path);
  return read_config(r);
}

template <typename T>
Model<T> load_checkpoint(const std::filesystem::path& path) {
  Reader r(path);
  Model<T> model(read_config(r));
  auto entries = read_entries(model, r);
  assign(entries);
  return model;
}

template <typename T>
void load_checkpoint_into(Model<T>& model, const std::filesystem::path& path) {
  Reader r(path);
  const ModelConfig stored = read_config(r);
  auto entries = read_entries(model, r);
  const ModelConfig& c = model.config();
  auto mismatch = [&](const char* field, auto a, auto b) {
    if (a != b) {
      throw ConfigError(std::string("checkpoint config field '") + field + "' is " + std::to_string(a) +
                        " but the model uses " + std::to_string(b));
    }
  };
  mismatch("n_heads", stored.n_heads, c.n_heads);
  mismatch("dropout", static_cast<float>(stored.dropout), static_cast<float>(c.dropout));
  assign(entries);
}

template void save_checkpoint<float>(const Model<float>&, const std::filesystem::path&);
template void save_checkpoint<double>(const Model<double>&, const std::filesystem::path&);
template Model<float> load_checkpoint<float>(const std::filesystem::path&);
template Model<double> load_checkpoint<double>(const std::filesystem::path&);
template void load_checkpoint_into<float>(Model<float>&, const std::filesystem::path&);
template void load_checkpoint_into<double>(Model<double>&, const std::filesystem::path&);

}  // namespace mmfer
