#pragma once

// IDX image/label files (big-endian header, unsigned-byte payload).
//
//   magic 0x00000803  images  [N, H, W]     (one channel)
//   magic 0x00000804  images  [N, C, H, W]  (multi-channel extension)
//   magic 0x00000801  labels  [N]
//
// Pixels load as q / 255 and are written as round(255 v).

#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "mirage/data/dataset.hpp"

namespace mirage::data {

namespace idx_detail {

inline std::uint32_t be32(std::span<const std::uint8_t> b, std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

inline void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

struct Header {
  std::vector<std::size_t> dims;
  std::size_t payload_offset = 0;
};

inline Header parse_header(std::span<const std::uint8_t> b, std::size_t min_rank, std::size_t max_rank,
                           const char* what) {
  if (b.size() < 4) throw FormatError(std::string(what) + ": file shorter than the 4-byte magic", b.size());
  if (b[0] != 0 || b[1] != 0) throw FormatError(std::string(what) + ": bad magic (leading bytes must be zero)", 0);
  if (b[2] != 0x08) throw FormatError(std::string(what) + ": unsupported element type (only unsigned byte)", 2);
  const std::size_t rank = b[3];
  if (rank < min_rank || rank > max_rank)
    throw FormatError(std::string(what) + ": bad magic (rank " + std::to_string(rank) + ")", 3);
  Header h;
  for (std::size_t k = 0; k < rank; ++k) {
    const std::size_t off = 4 + 4 * k;
    if (b.size() < off + 4) throw FormatError(std::string(what) + ": truncated header", b.size());
    const std::uint32_t d = be32(b, off);
    if (d == 0) throw FormatError(std::string(what) + ": zero extent in header", off);
    h.dims.push_back(d);
  }
  h.payload_offset = 4 + 4 * rank;
  std::size_t n = 1;
  for (auto d : h.dims) n *= d;
  if (b.size() < h.payload_offset + n)
    throw FormatError(std::string(what) + ": truncated payload, expected " + std::to_string(n) + " bytes", b.size());
  if (b.size() > h.payload_offset + n)
    throw FormatError(std::string(what) + ": trailing bytes after payload", h.payload_offset + n);
  return h;
}

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write to '" + path + "' failed");
}

}  // namespace idx_detail

inline Tensor<float> parse_idx_images(std::span<const std::uint8_t> b) {
  const auto h = idx_detail::parse_header(b, 3, 4, "idx images");
  Shape s = h.dims.size() == 3 ? Shape{h.dims[0], 1, h.dims[1], h.dims[2]} : Shape(h.dims.begin(), h.dims.end());
  Tensor<float> t(s);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(b[h.payload_offset + i]) / 255.0f;
  return t;
}

inline std::vector<std::size_t> parse_idx_labels(std::span<const std::uint8_t> b) {
  const auto h = idx_detail::parse_header(b, 1, 1, "idx labels");
  std::vector<std::size_t> l(h.dims[0]);
  for (std::size_t i = 0; i < l.size(); ++i) l[i] = b[h.payload_offset + i];
  return l;
}

inline LabeledImageSet idx_to_set(std::span<const std::uint8_t> images, std::span<const std::uint8_t> labels) {
  LabeledImageSet s;
  s.images = parse_idx_images(images);
  s.labels = parse_idx_labels(labels);
  if (s.labels.size() != s.images.extent(0))
    throw FormatError("idx: label count " + std::to_string(s.labels.size()) + " != image count " +
                          std::to_string(s.images.extent(0)),
                      4);
  std::size_t k = 0;
  for (auto l : s.labels) k = std::max(k, l + 1);
  s.num_classes = std::max<std::size_t>(k, 1);
  for (std::size_t i = 0; i < s.labels.size(); ++i) s.sample_ids.push_back(i);
  for (std::size_t c = 0; c < s.num_classes; ++c) s.source_class.push_back(c);
  return s;
}

inline LabeledImageSet load_idx(const std::string& images_path, const std::string& labels_path) {
  const auto ib = idx_detail::read_file(images_path);
  const auto lb = idx_detail::read_file(labels_path);
  return idx_to_set(ib, lb);
}

// One-channel sets use 0x803; others 0x804. Labels must fit in a byte.
inline std::vector<std::uint8_t> encode_idx_images(const Tensor<float>& images) {
  if (images.rank() != 4) throw DimensionError("idx: images must be [N,C,H,W]");
  std::vector<std::uint8_t> out{0, 0, 0x08};
  const bool mono = images.extent(1) == 1;
  out.push_back(mono ? 3 : 4);
  for (std::size_t k = 0; k < 4; ++k)
    if (!(mono && k == 1)) idx_detail::put_be32(out, static_cast<std::uint32_t>(images.extent(k)));
  for (float v : images.data()) {
    if (!(v >= 0.f && v <= 1.f)) throw NumericError("idx: pixel outside [0,1]");
    out.push_back(static_cast<std::uint8_t>(std::lround(static_cast<double>(v) * 255.0)));
  }
  return out;
}

inline std::vector<std::uint8_t> encode_idx_labels(const std::vector<std::size_t>& labels) {
  std::vector<std::uint8_t> out{0, 0, 0x08, 1};
  idx_detail::put_be32(out, static_cast<std::uint32_t>(labels.size()));
  for (auto l : labels) {
    if (l > 255) throw LabelError("idx: label " + std::to_string(l) + " does not fit in a byte");
    out.push_back(static_cast<std::uint8_t>(l));
  }
  return out;
}

inline void write_idx(const LabeledImageSet& s, const std::string& images_path, const std::string& labels_path) {
  idx_detail::write_file(images_path, encode_idx_images(s.images));
  idx_detail::write_file(labels_path, encode_idx_labels(s.labels));
}

}  // namespace mirage::data
