#pragma once

// SHT1 binary tensor files.
//
//   offset 0   "SHT1"                 4 bytes magic
//   offset 4   dtype                  u8   (0 = f32, 1 = u8)
//   offset 5   rank                   u8   (1..8)
//   offset 6   dims[rank]             u32 little-endian each, slowest first
//   then       payload                prod(dims) elements, little-endian, C-order
//
// FeatureMap and ProbMap are rank-3 f32 (C,H,W / K,H,W). LabelMap is rank-2 u8.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "shape/core.hpp"

namespace shape {

enum class DType : std::uint8_t { F32 = 0, U8 = 1 };

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class ParseErrorKind {
  BadMagic,
  TruncatedHeader,
  TruncatedPayload,
  TrailingBytes,
  UnknownDtype,
  BadRank,
  DimsOverflow,
  DtypeMismatch,
  RankMismatch,
};

inline const char* to_string(ParseErrorKind k) {
  switch (k) {
    case ParseErrorKind::BadMagic: return "BadMagic";
    case ParseErrorKind::TruncatedHeader: return "TruncatedHeader";
    case ParseErrorKind::TruncatedPayload: return "TruncatedPayload";
    case ParseErrorKind::TrailingBytes: return "TrailingBytes";
    case ParseErrorKind::UnknownDtype: return "UnknownDtype";
    case ParseErrorKind::BadRank: return "BadRank";
    case ParseErrorKind::DimsOverflow: return "DimsOverflow";
    case ParseErrorKind::DtypeMismatch: return "DtypeMismatch";
    case ParseErrorKind::RankMismatch: return "RankMismatch";
  }
  return "?";
}

struct ParseError : std::runtime_error {
  ParseError(ParseErrorKind k, const std::string& what)
      : std::runtime_error(std::string(to_string(k)) + ": " + what), kind(k) {}
  ParseErrorKind kind;
};

// Untyped tensor as stored on disk.
struct RawTensor {
  DType dtype = DType::F32;
  std::vector<std::uint32_t> dims;
  std::vector<float> f32;         // used when dtype == F32
  std::vector<std::uint8_t> u8;   // used when dtype == U8

  std::size_t element_count() const {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }
};

namespace detail {

inline constexpr std::array<char, 4> kMagic = {'S', 'H', 'T', '1'};
inline constexpr std::size_t kMaxRank = 8;
// 2^32 elements; anything larger is treated as a corrupt header.
inline constexpr std::uint64_t kMaxElements = std::uint64_t(1) << 32;

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint32_t get_u32(const std::uint8_t* p) {
  return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) |
         (std::uint32_t(p[3]) << 24);
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_tensor(const RawTensor& t) {
  if (t.dims.empty() || t.dims.size() > detail::kMaxRank) {
    throw ValidationError("tensor rank must be in [1, 8]");
  }
  const std::size_t n = t.element_count();
  if (t.dtype == DType::F32 ? t.f32.size() != n : t.u8.size() != n) {
    throw ValidationError("tensor payload does not match dims");
  }
  std::vector<std::uint8_t> out(detail::kMagic.begin(), detail::kMagic.end());
  out.push_back(static_cast<std::uint8_t>(t.dtype));
  out.push_back(static_cast<std::uint8_t>(t.dims.size()));
  for (auto d : t.dims) detail::put_u32(out, d);
  if (t.dtype == DType::F32) {
    out.reserve(out.size() + 4 * n);
    for (float f : t.f32) detail::put_u32(out, std::bit_cast<std::uint32_t>(f));
  } else {
    out.insert(out.end(), t.u8.begin(), t.u8.end());
  }
  return out;
}

inline RawTensor decode_tensor(std::span<const std::uint8_t> bytes) {
  using K = ParseErrorKind;
  if (bytes.size() < 6) {
    if (bytes.size() >= 4 && std::memcmp(bytes.data(), detail::kMagic.data(), 4) != 0) {
      throw ParseError(K::BadMagic, "missing SHT1 magic");
    }
    throw ParseError(K::TruncatedHeader, "file shorter than fixed header");
  }
  if (std::memcmp(bytes.data(), detail::kMagic.data(), 4) != 0) {
    throw ParseError(K::BadMagic, "missing SHT1 magic");
  }
  RawTensor t;
  const std::uint8_t code = bytes[4];
  if (code > 1) throw ParseError(K::UnknownDtype, "dtype code " + std::to_string(code));
  t.dtype = static_cast<DType>(code);
  const std::size_t rank = bytes[5];
  if (rank == 0 || rank > detail::kMaxRank) {
    throw ParseError(K::BadRank, "rank " + std::to_string(rank));
  }
  const std::size_t header = 6 + 4 * rank;
  if (bytes.size() < header) throw ParseError(K::TruncatedHeader, "dims cut short");
  std::uint64_t n = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    const std::uint32_t d = detail::get_u32(bytes.data() + 6 + 4 * i);
    if (d == 0) throw ParseError(K::DimsOverflow, "zero-length dimension");
    n *= d;
    if (n > detail::kMaxElements) throw ParseError(K::DimsOverflow, "element count exceeds 2^32");
    t.dims.push_back(d);
  }
  const std::uint64_t elem = t.dtype == DType::F32 ? 4 : 1;
  const std::uint64_t expect = header + n * elem;
  if (bytes.size() < expect) {
    throw ParseError(K::TruncatedPayload, "expected " + std::to_string(expect) + " bytes, got " +
                                              std::to_string(bytes.size()));
  }
  if (bytes.size() > expect) throw ParseError(K::TrailingBytes, "unexpected bytes after payload");
  const std::uint8_t* p = bytes.data() + header;
  if (t.dtype == DType::F32) {
    t.f32.resize(n);
    for (std::size_t i = 0; i < n; ++i) t.f32[i] = std::bit_cast<float>(detail::get_u32(p + 4 * i));
  } else {
    t.u8.assign(p, p + n);
  }
  return t;
}

inline void write_raw(const std::filesystem::path& path, const RawTensor& t) {
  const auto bytes = encode_tensor(t);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("write failed: " + path.string());
}

inline RawTensor read_raw(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  try {
    return decode_tensor(bytes);
  } catch (const ParseError& e) {
    throw ParseError(e.kind, path.string() + ": " + e.what());
  }
}

// Typed conversions ----------------------------------------------------------

template <std::floating_point T>
RawTensor to_raw(const FeatureMap<T>& f) {
  RawTensor t;
  t.dtype = DType::F32;
  t.dims = {static_cast<std::uint32_t>(f.channels()), static_cast<std::uint32_t>(f.height()),
            static_cast<std::uint32_t>(f.width())};
  t.f32.assign(f.values().begin(), f.values().end());
  return t;
}

inline RawTensor to_raw(const LabelMap& m) {
  RawTensor t;
  t.dtype = DType::U8;
  t.dims = {static_cast<std::uint32_t>(m.height()), static_cast<std::uint32_t>(m.width())};
  t.u8.assign(m.values().begin(), m.values().end());
  return t;
}

namespace detail {
inline void expect_layout(const RawTensor& t, DType dtype, std::size_t rank, const std::string& what) {
  if (t.dtype != dtype) throw ParseError(ParseErrorKind::DtypeMismatch, what + " has wrong dtype");
  if (t.dims.size() != rank) throw ParseError(ParseErrorKind::RankMismatch, what + " has wrong rank");
}
}  // namespace detail

template <std::floating_point T = float>
FeatureMap<T> feature_map_from_raw(const RawTensor& t) {
  detail::expect_layout(t, DType::F32, 3, "FeatureMap");
  FeatureMap<T> f(t.dims[0], t.dims[1], t.dims[2]);
  std::copy(t.f32.begin(), t.f32.end(), f.values().begin());
  if (!f.all_finite()) throw ValidationError("FeatureMap contains non-finite values");
  return f;
}

inline LabelMap label_map_from_raw(const RawTensor& t, int num_classes) {
  detail::expect_layout(t, DType::U8, 2, "LabelMap");
  LabelMap m(t.dims[0], t.dims[1], num_classes);
  std::copy(t.u8.begin(), t.u8.end(), m.values().begin());
  m.validate();
  return m;
}

// Feature maps of any precision are stored as f32.
template <std::floating_point T>
void write_tensor(const std::filesystem::path& path, const FeatureMap<T>& f) {
  if (!f.all_finite()) throw ValidationError("refusing to write non-finite FeatureMap");
  write_raw(path, to_raw(f));
}

template <std::floating_point T>
void write_tensor(const std::filesystem::path& path, const ProbMap<T>& p) {
  p.validate();
  write_raw(path, to_raw(p.raw()));
}

inline void write_tensor(const std::filesystem::path& path, const LabelMap& m) {
  m.validate();
  write_raw(path, to_raw(m));
}

template <std::floating_point T = float>
FeatureMap<T> read_feature_map(const std::filesystem::path& path) {
  return feature_map_from_raw<T>(read_raw(path));
}

template <std::floating_point T = float>
ProbMap<T> read_prob_map(const std::filesystem::path& path) {
  ProbMap<T> p(feature_map_from_raw<T>(read_raw(path)));
  p.validate();
  return p;
}

inline LabelMap read_label_map(const std::filesystem::path& path, int num_classes) {
  return label_map_from_raw(read_raw(path), num_classes);
}

}  // namespace shape
