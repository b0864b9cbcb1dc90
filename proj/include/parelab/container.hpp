#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "parelab/nn.hpp"
#include "parelab/tensor.hpp"

namespace parelab {

// Self-describing named-array container.
//
// Layout: 8-byte magic "PARELAB1", little-endian u64 header length, JSON
// header, raw array payloads. The header carries version, an optional
// config hash, free-form metadata, and one entry per array with dtype,
// shape and payload offset (relative to the end of the header). All
// payloads are little-endian; f64/f32 floats, i32/i64 integers, u8 bytes.

constexpr char kContainerMagic[8] = {'P', 'A', 'R', 'E', 'L', 'A', 'B', '1'};
constexpr int kContainerVersion = 1;

enum class DType { f64, f32, i32, i64, u8 };

inline const char* dtype_name(DType t) {
  switch (t) {
    case DType::f64: return "f64";
    case DType::f32: return "f32";
    case DType::i32: return "i32";
    case DType::i64: return "i64";
    case DType::u8: return "u8";
  }
  return "?";
}

inline DType dtype_from_name(const std::string& s) {
  if (s == "f64") return DType::f64;
  if (s == "f32") return DType::f32;
  if (s == "i32") return DType::i32;
  if (s == "i64") return DType::i64;
  if (s == "u8") return DType::u8;
  tensor_error("container: unknown dtype '" + s + "'");
}

inline size_t dtype_size(DType t) {
  switch (t) {
    case DType::f64: return 8;
    case DType::f32: return 4;
    case DType::i32: return 4;
    case DType::i64: return 8;
    case DType::u8: return 1;
  }
  return 0;
}

struct NamedArray {
  DType dtype = DType::f64;
  Shape shape;
  std::vector<uint8_t> bytes;

  int64_t numel() const { return shape_numel(shape); }

  template <class T>
  static NamedArray from_vector(DType dt, Shape shape, const std::vector<T>& v);

  template <class T>
  std::vector<T> as_vector() const;
};

template <class Src, class Dst>
static std::vector<Dst> convert_vec(const std::vector<uint8_t>& bytes) {
  std::vector<Dst> out(bytes.size() / sizeof(Src));
  const Src* p = reinterpret_cast<const Src*>(bytes.data());
  for (size_t i = 0; i < out.size(); ++i) out[i] = Dst(p[i]);
  return out;
}

template <class T>
NamedArray NamedArray::from_vector(DType dt, Shape shape,
                                   const std::vector<T>& v) {
  if (shape_numel(shape) != int64_t(v.size()))
    tensor_error("container: shape " + shape_str(shape) + " vs " +
                 std::to_string(v.size()) + " values");
  NamedArray a;
  a.dtype = dt;
  a.shape = std::move(shape);
  a.bytes.resize(v.size() * dtype_size(dt));
  switch (dt) {
    case DType::f64: {
      double* p = reinterpret_cast<double*>(a.bytes.data());
      for (size_t i = 0; i < v.size(); ++i) p[i] = double(v[i]);
      break;
    }
    case DType::f32: {
      float* p = reinterpret_cast<float*>(a.bytes.data());
      for (size_t i = 0; i < v.size(); ++i) p[i] = float(v[i]);
      break;
    }
    case DType::i32: {
      int32_t* p = reinterpret_cast<int32_t*>(a.bytes.data());
      for (size_t i = 0; i < v.size(); ++i) p[i] = int32_t(v[i]);
      break;
    }
    case DType::i64: {
      int64_t* p = reinterpret_cast<int64_t*>(a.bytes.data());
      for (size_t i = 0; i < v.size(); ++i) p[i] = int64_t(v[i]);
      break;
    }
    case DType::u8: {
      for (size_t i = 0; i < v.size(); ++i) a.bytes[i] = uint8_t(v[i]);
      break;
    }
  }
  return a;
}

template <class T>
std::vector<T> NamedArray::as_vector() const {
  switch (dtype) {
    case DType::f64: return convert_vec<double, T>(bytes);
    case DType::f32: return convert_vec<float, T>(bytes);
    case DType::i32: return convert_vec<int32_t, T>(bytes);
    case DType::i64: return convert_vec<int64_t, T>(bytes);
    case DType::u8: return convert_vec<uint8_t, T>(bytes);
  }
  tensor_error("container: bad dtype");
}

class Container {
public:
  std::string config_hash;
  nlohmann::json meta;  // free-form, serialized into the header

  void put(const std::string& name, NamedArray arr) {
    if (!arrays_.count(name)) order_.push_back(name);
    arrays_[name] = std::move(arr);
  }

  template <class T>
  void put_vector(const std::string& name, DType dt, Shape shape,
                  const std::vector<T>& v) {
    put(name, NamedArray::from_vector<T>(dt, std::move(shape), v));
  }

  bool has(const std::string& name) const { return arrays_.count(name) > 0; }

  const NamedArray& get(const std::string& name) const {
    auto it = arrays_.find(name);
    if (it == arrays_.end())
      tensor_error("container: missing array '" + name + "'");
    return it->second;
  }

  const std::vector<std::string>& names() const { return order_; }

  void save(const std::string& path) const {
    nlohmann::json header;
    header["version"] = kContainerVersion;
    header["config_hash"] = config_hash;
    header["meta"] = meta.is_null() ? nlohmann::json::object() : meta;
    nlohmann::json arrs = nlohmann::json::array();
    uint64_t offset = 0;
    for (const auto& name : order_) {
      const auto& a = arrays_.at(name);
      nlohmann::json e;
      e["name"] = name;
      e["dtype"] = dtype_name(a.dtype);
      e["shape"] = a.shape;
      e["offset"] = offset;
      e["nbytes"] = a.bytes.size();
      arrs.push_back(e);
      offset += a.bytes.size();
    }
    header["arrays"] = arrs;
    std::string hs = header.dump();

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) tensor_error("container: cannot open '" + path + "' for writing");
    f.write(kContainerMagic, 8);
    uint64_t hlen = hs.size();
    f.write(reinterpret_cast<const char*>(&hlen), 8);
    f.write(hs.data(), std::streamsize(hs.size()));
    for (const auto& name : order_) {
      const auto& a = arrays_.at(name);
      f.write(reinterpret_cast<const char*>(a.bytes.data()),
              std::streamsize(a.bytes.size()));
    }
    if (!f) tensor_error("container: write failed for '" + path + "'");
  }

  static Container load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) tensor_error("container: cannot open '" + path + "'");
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, kContainerMagic, 8) != 0)
      tensor_error("container: '" + path + "' has a bad magic string");
    uint64_t hlen = 0;
    f.read(reinterpret_cast<char*>(&hlen), 8);
    if (!f || hlen == 0 || hlen > (1ull << 30))
      tensor_error("container: '" + path + "' has a corrupt header length");
    std::string hs(hlen, '\0');
    f.read(hs.data(), std::streamsize(hlen));
    if (!f) tensor_error("container: '" + path + "' header truncated");
    nlohmann::json header;
    try {
      header = nlohmann::json::parse(hs);
    } catch (const std::exception& e) {
      tensor_error("container: '" + path + "' header is not valid JSON: " +
                   e.what());
    }
    if (int(header.value("version", -1)) != kContainerVersion)
      tensor_error("container: '" + path + "' has unsupported version");

    Container c;
    c.config_hash = header.value("config_hash", std::string());
    c.meta = header.value("meta", nlohmann::json::object());
    uint64_t base = 16 + hlen;
    for (const auto& e : header.at("arrays")) {
      NamedArray a;
      a.dtype = dtype_from_name(e.at("dtype").get<std::string>());
      a.shape = e.at("shape").get<Shape>();
      uint64_t nbytes = e.at("nbytes").get<uint64_t>();
      if (nbytes != uint64_t(a.numel()) * dtype_size(a.dtype))
        tensor_error("container: array '" + e.at("name").get<std::string>() +
                     "' byte count disagrees with shape");
      a.bytes.resize(nbytes);
      f.seekg(std::streamoff(base + e.at("offset").get<uint64_t>()));
      f.read(reinterpret_cast<char*>(a.bytes.data()), std::streamsize(nbytes));
      if (!f) tensor_error("container: array '" +
                           e.at("name").get<std::string>() + "' truncated");
      c.put(e.at("name").get<std::string>(), std::move(a));
    }
    return c;
  }

private:
  std::map<std::string, NamedArray> arrays_;
  std::vector<std::string> order_;
};

// FNV-1a over a string; used for config hashes.
inline std::string fnv1a_hex(const std::string& s) {
  uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

// ---- ParamStore <-> container ----

template <class T>
void save_params(const ParamStore<T>& store_const, Container& c) {
  auto& store = const_cast<ParamStore<T>&>(store_const);
  for (const auto& name : store.names()) {
    auto& e = store.entry(name);
    c.put_vector("param/" + name, DType::f64, e.param.shape(), e.param.data());
    c.put_vector("adam_m/" + name, DType::f64, e.param.shape(), e.m);
    c.put_vector("adam_v/" + name, DType::f64, e.param.shape(), e.v);
  }
  for (const auto& name : store.buffer_names()) {
    auto* b = store.buffer(name);
    c.put_vector("buffer/" + name, DType::f64,
                 Shape{int64_t(b->size())}, *b);
  }
  c.meta["adam_step"] = store.step_count();
}

template <class T>
void load_params(ParamStore<T>& store, const Container& c) {
  for (const auto& name : store.names()) {
    auto& e = store.entry(name);
    const auto& pa = c.get("param/" + name);
    if (pa.shape != e.param.shape())
      tensor_error("checkpoint: parameter '" + name + "' has shape " +
                   shape_str(pa.shape) + ", model expects " +
                   shape_str(e.param.shape()));
    e.param.mutable_data() = pa.template as_vector<T>();
    e.m = c.get("adam_m/" + name).template as_vector<T>();
    e.v = c.get("adam_v/" + name).template as_vector<T>();
  }
  for (const auto& name : store.buffer_names())
    *store.buffer(name) = c.get("buffer/" + name).template as_vector<T>();
  store.set_step_count(c.meta.value("adam_step", int64_t(0)));
}

// Path-level convenience: write / read a checkpoint file in one call.
template <class T>
void save_params(const ParamStore<T>& store, const std::string& path,
                 const std::string& config_hash, nlohmann::json meta) {
  Container c;
  c.config_hash = config_hash;
  c.meta = std::move(meta);
  save_params(store, c);
  c.save(path);
}

// Returns the checkpoint header: {"config_hash": ..., "meta": {...}}.
template <class T>
nlohmann::json load_params(ParamStore<T>& store, const std::string& path) {
  Container c = Container::load(path);
  load_params(store, c);
  return nlohmann::json{{"config_hash", c.config_hash}, {"meta", c.meta}};
}

}  // namespace parelab
