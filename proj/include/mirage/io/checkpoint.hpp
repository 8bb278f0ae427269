#pragma once

// Binary tensor container:
//   "SKMI" | u32 version | u32 count | count x entry
//   entry: u16 name length | name bytes | u8 dtype (0 f32, 1 f64) | u8 rank |
//          rank x u32 extent | payload, row-major
// All integers and payload elements are little-endian. Entries are written in
// name order, so equal contents produce equal bytes.
//
// Metadata rides along as one-element f64 entries named "__meta__:<key>:<value>".

#include <bit>
#include <map>
#include <variant>

#include "mirage/data/idx.hpp"
#include "mirage/nn/params.hpp"

namespace mirage::io {

inline constexpr std::uint32_t container_version = 1;
inline constexpr char container_magic[4] = {'S', 'K', 'M', 'I'};

using AnyTensor = std::variant<Tensor<float>, Tensor<double>>;

struct Container {
  std::map<std::string, AnyTensor> tensors;
  std::map<std::string, std::string> meta;
};

namespace detail {

class Writer {
 public:
  std::vector<std::uint8_t> bytes;
  template <std::unsigned_integral U>
  void put(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void put_raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes.insert(bytes.end(), b, b + n);
  }
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}
  template <std::unsigned_integral U>
  U get(const char* what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(b_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return v;
  }
  std::string get_string(std::size_t n) {
    need(n, "name");
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return b_.size() - pos_; }
  void need(std::size_t n, const char* what) const {
    if (remaining() < n) throw FormatError(std::string("checkpoint: truncated ") + what, b_.size());
  }

 private:
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

template <Scalar T>
void put_tensor(Writer& w, const std::string& name, const Tensor<T>& t) {
  if (name.size() > 0xffff) throw ConfigError("checkpoint: tensor name longer than 65535 bytes");
  if (t.rank() > 0xff) throw ConfigError("checkpoint: rank above 255");
  w.put(static_cast<std::uint16_t>(name.size()));
  w.put_raw(name.data(), name.size());
  w.put(dtype_traits<T>::code);
  w.put(static_cast<std::uint8_t>(t.rank()));
  for (auto e : t.shape()) {
    if (e > 0xffffffffULL) throw ConfigError("checkpoint: extent does not fit in u32");
    w.put(static_cast<std::uint32_t>(e));
  }
  using Bits = std::conditional_t<std::is_same_v<T, float>, std::uint32_t, std::uint64_t>;
  for (T v : t.data()) w.put(std::bit_cast<Bits>(v));
}

template <Scalar T>
Tensor<T> get_payload(Reader& r, Shape shape) {
  using Bits = std::conditional_t<std::is_same_v<T, float>, std::uint32_t, std::uint64_t>;
  const std::size_t n = shape_numel(shape);
  r.need(n * sizeof(T), "payload");
  std::vector<T> v(n);
  for (auto& x : v) x = std::bit_cast<T>(r.get<Bits>("payload"));
  return Tensor<T>(std::move(shape), std::move(v));
}

inline std::string meta_name(const std::string& k, const std::string& v) { return "__meta__:" + k + ":" + v; }

}  // namespace detail

inline std::vector<std::uint8_t> encode(const Container& c) {
  detail::Writer w;
  w.put_raw(container_magic, 4);
  w.put(container_version);
  std::map<std::string, const AnyTensor*> all;
  const AnyTensor marker = Tensor<double>::scalar(0.0);
  for (const auto& [k, v] : c.meta) {
    if (k.find(':') != std::string::npos) throw ConfigError("checkpoint: metadata key '" + k + "' contains ':'");
    all.emplace(detail::meta_name(k, v), &marker);
  }
  for (const auto& [k, t] : c.tensors) {
    if (k.rfind("__meta__:", 0) == 0) throw ConfigError("checkpoint: tensor name '" + k + "' is reserved");
    all.emplace(k, &t);
  }
  if (all.size() > 0xffffffffULL) throw ConfigError("checkpoint: too many tensors");
  w.put(static_cast<std::uint32_t>(all.size()));
  for (const auto& [k, t] : all) std::visit([&](const auto& x) { detail::put_tensor(w, k, x); }, *t);
  return std::move(w.bytes);
}

// Parses the whole buffer before returning anything; any defect raises
// FormatError with the byte offset where it was detected.
inline Container decode(std::span<const std::uint8_t> b) {
  detail::Reader r(b);
  r.need(4, "magic");
  if (!std::equal(container_magic, container_magic + 4, b.begin()))
    throw FormatError("checkpoint: bad magic (expected SKMI)", 0);
  r.get_string(4);
  const auto ver = r.get<std::uint32_t>("version");
  if (ver != container_version)
    throw FormatError("checkpoint: unsupported format version " + std::to_string(ver), 4);
  const auto count = r.get<std::uint32_t>("tensor count");
  Container c;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t at = r.pos();
    const auto len = r.get<std::uint16_t>("name length");
    const std::string name = r.get_string(len);
    const auto dtype = r.get<std::uint8_t>("dtype");
    const auto rank = r.get<std::uint8_t>("rank");
    if (dtype > 1) throw FormatError("checkpoint: unknown dtype code " + std::to_string(dtype) + " for '" + name + "'", at);
    if (rank == 0) throw FormatError("checkpoint: rank 0 tensor '" + name + "'", at);
    Shape shape;
    for (std::uint8_t k = 0; k < rank; ++k) {
      const auto e = r.get<std::uint32_t>("extent");
      if (e == 0) throw FormatError("checkpoint: zero extent in '" + name + "'", at);
      shape.push_back(e);
    }
    if (name.rfind("__meta__:", 0) == 0) {
      const auto rest = name.substr(9);
      const auto colon = rest.find(':');
      if (colon == std::string::npos) throw FormatError("checkpoint: malformed metadata entry '" + name + "'", at);
      dtype == 0 ? (void)detail::get_payload<float>(r, shape) : (void)detail::get_payload<double>(r, shape);
      c.meta[rest.substr(0, colon)] = rest.substr(colon + 1);
      continue;
    }
    if (c.tensors.count(name)) throw FormatError("checkpoint: duplicate tensor '" + name + "'", at);
    if (dtype == 0)
      c.tensors.emplace(name, detail::get_payload<float>(r, std::move(shape)));
    else
      c.tensors.emplace(name, detail::get_payload<double>(r, std::move(shape)));
  }
  if (r.remaining() != 0) throw FormatError("checkpoint: trailing bytes after the last tensor", r.pos());
  return c;
}

inline void save(const Container& c, const std::string& path) { data::idx_detail::write_file(path, encode(c)); }

inline Container load(const std::string& path) { return decode(data::idx_detail::read_file(path)); }

// ModelParams <-> container. Loading requires every tensor to have dtype T.
template <Scalar T>
Container to_container(const nn::ModelParams<T>& p, std::map<std::string, std::string> meta = {}) {
  Container c;
  c.meta = std::move(meta);
  for (const auto& [k, t] : p.tensors) c.tensors.emplace(k, t);
  return c;
}

template <Scalar T>
nn::ModelParams<T> params_from(const Container& c) {
  nn::ModelParams<T> p;
  for (const auto& [k, t] : c.tensors) {
    const auto* v = std::get_if<Tensor<T>>(&t);
    if (!v) throw FormatError("checkpoint: tensor '" + k + "' is not " + dtype_traits<T>::name, 0);
    p.tensors.emplace(k, *v);
  }
  return p;
}

template <Scalar T>
void save_params(const nn::ModelParams<T>& p, const std::string& path, std::map<std::string, std::string> meta = {}) {
  save(to_container(p, std::move(meta)), path);
}

template <Scalar T>
nn::ModelParams<T> load_params(const std::string& path, std::map<std::string, std::string>* meta = nullptr) {
  auto c = load(path);
  auto p = params_from<T>(c);
  if (meta) *meta = std::move(c.meta);
  return p;
}

// Dataset cache: tensors `images` (f32) and `labels`, `sample_ids`,
// `source_class` (f64, exact for integers below 2^53).
inline Container dataset_container(const data::LabeledImageSet& s, std::map<std::string, std::string> meta = {}) {
  s.validate();
  auto as_f64 = [](const auto& v) {
    std::vector<double> d(v.begin(), v.end());
    if (d.empty()) d.push_back(0.0);  // placeholder; the count lives in metadata
    const std::size_t n = d.size();
    return Tensor<double>({n}, std::move(d));
  };
  Container c;
  c.meta = std::move(meta);
  c.meta["num_classes"] = std::to_string(s.num_classes);
  c.meta["size"] = std::to_string(s.size());
  c.meta["source_classes"] = std::to_string(s.source_class.size());
  c.tensors.emplace("images", s.images);
  c.tensors.emplace("labels", as_f64(s.labels));
  c.tensors.emplace("sample_ids", as_f64(s.sample_ids));
  c.tensors.emplace("source_class", as_f64(s.source_class));
  return c;
}

inline data::LabeledImageSet dataset_from(const Container& c) {
  auto get = [&](const std::string& k) -> const AnyTensor& {
    auto it = c.tensors.find(k);
    if (it == c.tensors.end()) throw FormatError("dataset cache: missing tensor '" + k + "'", 0);
    return it->second;
  };
  auto meta = [&](const std::string& k) -> std::size_t {
    auto it = c.meta.find(k);
    if (it == c.meta.end()) throw FormatError("dataset cache: missing metadata '" + k + "'", 0);
    return std::stoull(it->second);
  };
  auto ints = [&](const std::string& k, std::size_t n) {
    const auto* t = std::get_if<Tensor<double>>(&get(k));
    if (!t) throw FormatError("dataset cache: '" + k + "' must be float64", 0);
    std::vector<std::uint64_t> v;
    for (std::size_t i = 0; i < n && i < t->size(); ++i) v.push_back(static_cast<std::uint64_t>((*t)[i]));
    return v;
  };
  data::LabeledImageSet s;
  const auto* img = std::get_if<Tensor<float>>(&get("images"));
  if (!img) throw FormatError("dataset cache: 'images' must be float32", 0);
  s.images = *img;
  const std::size_t n = meta("size");
  s.num_classes = meta("num_classes");
  for (auto v : ints("labels", n)) s.labels.push_back(v);
  s.sample_ids = ints("sample_ids", n);
  for (auto v : ints("source_class", meta("source_classes"))) s.source_class.push_back(v);
  s.validate();
  return s;
}

}  // namespace mirage::io
