#pragma once

// Tensor container file format.
//
//   offset  size          field
//   0       4             magic "IGPK"
//   4       4             format version, u32 little-endian (currently 1)
//   8       8             header length in bytes, u64 little-endian
//   16      header_len    header, UTF-8 text
//   16+h    ...           payload, contiguous little-endian tensor data
//
// The header is flat key=value lines ('\n' terminated, sorted by key). Keys
// and values escape backslash as "\\", newline as "\n", carriage return as
// "\r"; keys additionally escape '=' as "\e". Per tensor <name> the header
// carries four keys:
//
//   tensor.<name>.dtype   f32 | f64
//   tensor.<name>.shape   dims joined by 'x', e.g. "4x2"
//   tensor.<name>.offset  byte offset into the payload, decimal
//   tensor.<name>.bytes   byte length, decimal
//
// Free-form attributes are stored as attr.<key>=<value>. Offsets are assigned
// contiguously in sorted-name order, so save -> load -> save is byte-exact.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <map>
#include <string>
#include <vector>

#include <unistd.h>

#include "igpk/errors.hpp"
#include "igpk/tensor.hpp"

namespace igpk {

enum class Dtype { f32, f64 };

inline std::size_t dtype_size(Dtype d) { return d == Dtype::f32 ? 4 : 8; }

using TensorMap = std::map<std::string, Tensor>;
using AttrMap = std::map<std::string, std::string>;

struct Container {
  TensorMap tensors;
  AttrMap attrs;
};

namespace detail {

inline std::string escape_header(const std::string& s, bool is_key) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) {
    switch (c) {
      case '\\': out += "\\\\"; break;
      case '\n': out += "\\n"; break;
      case '\r': out += "\\r"; break;
      case '=':
        if (is_key) out += "\\e";
        else out += c;
        break;
      default: out += c;
    }
  }
  return out;
}

inline std::string unescape_header(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '\\') {
      out += s[i];
      continue;
    }
    if (i + 1 >= s.size()) throw IoError(IoErrc::parse, "dangling escape in header");
    switch (s[++i]) {
      case '\\': out += '\\'; break;
      case 'n': out += '\n'; break;
      case 'r': out += '\r'; break;
      case 'e': out += '='; break;
      default: throw IoError(IoErrc::parse, "unknown escape in header");
    }
  }
  return out;
}

inline void put_u32_le(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out += static_cast<char>((v >> (8 * i)) & 0xFF);
}

inline void put_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out += static_cast<char>((v >> (8 * i)) & 0xFF);
}

inline std::uint32_t get_u32_le(const unsigned char* p) {
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

inline std::uint64_t get_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

inline void append_f64_le(std::string& out, double x) {
  std::uint64_t bits;
  std::memcpy(&bits, &x, 8);
  put_u64_le(out, bits);
}

inline void append_f32_le(std::string& out, float x) {
  std::uint32_t bits;
  std::memcpy(&bits, &x, 4);
  put_u32_le(out, bits);
}

inline std::uint64_t parse_u64(const std::string& s, const std::string& what) {
  if (s.empty()) throw IoError(IoErrc::parse, "empty " + what);
  for (char c : s) {
    if (c < '0' || c > '9') throw IoError(IoErrc::parse, "bad " + what + " '" + s + "'");
  }
  try {
    return std::stoull(s);
  } catch (const std::exception&) {
    throw IoError(IoErrc::parse, "bad " + what + " '" + s + "'");
  }
}

inline std::string shape_to_header(const std::vector<std::size_t>& shape) {
  std::string s;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += 'x';
    s += std::to_string(shape[i]);
  }
  return s;
}

inline std::vector<std::size_t> shape_from_header(const std::string& s) {
  std::vector<std::size_t> shape;
  std::size_t pos = 0;
  while (pos <= s.size()) {
    const std::size_t x = s.find('x', pos);
    const std::string part = s.substr(pos, x == std::string::npos ? std::string::npos : x - pos);
    shape.push_back(static_cast<std::size_t>(parse_u64(part, "shape dimension")));
    if (x == std::string::npos) break;
    pos = x + 1;
  }
  return shape;
}

}  // namespace detail

constexpr std::uint32_t kContainerVersion = 1;
inline constexpr char kContainerMagic[4] = {'I', 'G', 'P', 'K'};

// Serializes to the exact byte layout documented above. dtype applies to all
// tensors (f32 storage rounds to single precision; computation stays double).
inline std::string serialize_container(const TensorMap& tensors, const AttrMap& attrs,
                                       Dtype dtype = Dtype::f64) {
  std::map<std::string, std::string> lines;  // key -> escaped line
  std::string payload;
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    const std::uint64_t bytes = t.numel() * dtype_size(dtype);
    const std::string base = "tensor." + detail::escape_header(name, true);
    lines[base + ".dtype"] = dtype == Dtype::f32 ? "f32" : "f64";
    lines[base + ".shape"] = detail::shape_to_header(t.shape());
    lines[base + ".offset"] = std::to_string(offset);
    lines[base + ".bytes"] = std::to_string(bytes);
    for (std::size_t i = 0; i < t.numel(); ++i) {
      if (dtype == Dtype::f64) detail::append_f64_le(payload, t[i]);
      else detail::append_f32_le(payload, static_cast<float>(t[i]));
    }
    offset += bytes;
  }
  for (const auto& [key, value] : attrs) {
    lines["attr." + detail::escape_header(key, true)] = detail::escape_header(value, false);
  }

  std::string header;
  for (const auto& [key, value] : lines) {
    header += key;
    header += '=';
    header += value;
    header += '\n';
  }

  std::string out;
  out.append(kContainerMagic, 4);
  detail::put_u32_le(out, kContainerVersion);
  detail::put_u64_le(out, header.size());
  out += header;
  out += payload;
  return out;
}

inline void save_container(const std::string& path, const TensorMap& tensors,
                           const AttrMap& attrs, Dtype dtype = Dtype::f64) {
  const std::string bytes = serialize_container(tensors, attrs, dtype);
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw IoError(IoErrc::open_failed, "cannot open '" + path + "' for writing");
  const std::size_t written = std::fwrite(bytes.data(), 1, bytes.size(), f);
  if (written != bytes.size()) {
    std::fclose(f);
    throw IoError(IoErrc::write_failed, "short write to '" + path + "'");
  }
  if (std::fflush(f) != 0 || ::fsync(fileno(f)) != 0) {
    std::fclose(f);
    throw IoError(IoErrc::write_failed, "flush failed for '" + path + "'");
  }
  std::fclose(f);
}

// Parses and fully validates (magic, version, header bounds, offsets) before
// exposing any tensor.
inline Container parse_container(const std::string& bytes) {
  if (bytes.size() < 16) throw IoError(IoErrc::truncated, "file shorter than fixed header");
  if (std::memcmp(bytes.data(), kContainerMagic, 4) != 0) {
    throw IoError(IoErrc::bad_magic, "bad magic");
  }
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::uint32_t version = detail::get_u32_le(p + 4);
  if (version != kContainerVersion) {
    throw IoError(IoErrc::bad_version, "unsupported version " + std::to_string(version));
  }
  const std::uint64_t header_len = detail::get_u64_le(p + 8);
  if (16 + header_len > bytes.size()) {
    throw IoError(IoErrc::truncated, "header extends past end of file");
  }
  const std::string header = bytes.substr(16, header_len);
  const std::size_t payload_off = 16 + header_len;
  const std::size_t payload_len = bytes.size() - payload_off;

  // Parse header lines.
  std::map<std::string, std::string> kv;
  std::size_t pos = 0;
  int lineno = 0;
  while (pos < header.size()) {
    ++lineno;
    std::size_t eol = header.find('\n', pos);
    if (eol == std::string::npos) throw IoError(IoErrc::parse, "unterminated header line");
    const std::string line = header.substr(pos, eol - pos);
    pos = eol + 1;
    if (line.empty()) continue;
    // First unescaped '='.
    std::size_t eq = std::string::npos;
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (line[i] == '\\') {
        ++i;
        continue;
      }
      if (line[i] == '=') {
        eq = i;
        break;
      }
    }
    if (eq == std::string::npos) {
      throw IoError(IoErrc::parse, "header line " + std::to_string(lineno) + " has no '='");
    }
    const std::string key = detail::unescape_header(line.substr(0, eq));
    const std::string value = detail::unescape_header(line.substr(eq + 1));
    if (!kv.emplace(key, value).second) {
      throw IoError(IoErrc::duplicate_name, "duplicate header key '" + key + "'");
    }
  }

  Container c;
  struct Meta {
    std::string dtype, shape, offset, bytes;
  };
  std::map<std::string, Meta> metas;
  for (const auto& [key, value] : kv) {
    if (key.rfind("attr.", 0) == 0) {
      c.attrs[key.substr(5)] = value;
      continue;
    }
    if (key.rfind("tensor.", 0) != 0) {
      throw IoError(IoErrc::parse, "unknown header key '" + key + "'");
    }
    const std::string rest = key.substr(7);
    const std::size_t dot = rest.rfind('.');
    if (dot == std::string::npos) throw IoError(IoErrc::parse, "malformed tensor key '" + key + "'");
    const std::string name = rest.substr(0, dot);
    const std::string field = rest.substr(dot + 1);
    Meta& m = metas[name];
    if (field == "dtype") m.dtype = value;
    else if (field == "shape") m.shape = value;
    else if (field == "offset") m.offset = value;
    else if (field == "bytes") m.bytes = value;
    else throw IoError(IoErrc::parse, "unknown tensor field '" + field + "'");
  }

  // Bounds and overlap checks before materializing anything.
  std::vector<std::pair<std::uint64_t, std::uint64_t>> extents;  // offset, end
  for (const auto& [name, m] : metas) {
    if (m.dtype.empty() || m.shape.empty() || m.offset.empty() || m.bytes.empty()) {
      throw IoError(IoErrc::parse, "incomplete metadata for tensor '" + name + "'");
    }
    Dtype dt;
    if (m.dtype == "f32") dt = Dtype::f32;
    else if (m.dtype == "f64") dt = Dtype::f64;
    else throw IoError(IoErrc::parse, "unknown dtype '" + m.dtype + "' for '" + name + "'");
    const auto shape = detail::shape_from_header(m.shape);
    std::uint64_t numel = 1;
    for (std::size_t d : shape) numel *= d;
    const std::uint64_t offset = detail::parse_u64(m.offset, "tensor offset");
    const std::uint64_t nbytes = detail::parse_u64(m.bytes, "tensor byte length");
    if (nbytes != numel * dtype_size(dt)) {
      throw IoError(IoErrc::bounds, "byte length does not match shape for tensor '" + name + "'");
    }
    if (offset + nbytes > payload_len) {
      throw IoError(IoErrc::bounds, "tensor '" + name + "' extends past payload end");
    }
    extents.emplace_back(offset, offset + nbytes);

    std::vector<double> data(numel);
    const auto* src = reinterpret_cast<const unsigned char*>(bytes.data()) + payload_off + offset;
    for (std::uint64_t i = 0; i < numel; ++i) {
      if (dt == Dtype::f64) {
        const std::uint64_t bits = detail::get_u64_le(src + i * 8);
        double x;
        std::memcpy(&x, &bits, 8);
        data[i] = x;
      } else {
        const std::uint32_t bits = detail::get_u32_le(src + i * 4);
        float x;
        std::memcpy(&x, &bits, 4);
        data[i] = static_cast<double>(x);
      }
    }
    c.tensors.emplace(name, Tensor(shape, std::move(data)));
  }

  std::sort(extents.begin(), extents.end());
  for (std::size_t i = 1; i < extents.size(); ++i) {
    if (extents[i].first < extents[i - 1].second) {
      throw IoError(IoErrc::bounds, "overlapping tensor extents in payload");
    }
  }
  return c;
}

inline Container load_container(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw IoError(IoErrc::open_failed, "cannot open '" + path + "'");
  std::string bytes;
  char buf[1 << 16];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, f)) > 0) bytes.append(buf, n);
  std::fclose(f);
  return parse_container(bytes);
}

}  // namespace igpk
