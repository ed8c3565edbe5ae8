#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "arccap/common.hpp"

namespace arccap::data {

// `ARCC` tensor container: magic, u32-LE version, then records of
// (name length u32-LE, name UTF-8, rank u32-LE, dims u32-LE each,
// payload of f64-LE values). Records run to end of file.
struct TensorRecord {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<double> values;
};

namespace detail {

constexpr char kMagic[4] = {'A', 'R', 'C', 'C'};
constexpr std::uint32_t kVersion = 1;

inline void put_u32(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 24) & 0xff));
}

inline void put_f64(std::string& out, double d) {
  std::uint64_t v = std::bit_cast<std::uint64_t>(d);
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xff));
}

struct Reader {
  const std::string& buf;
  std::size_t pos = 0;

  bool done() const { return pos >= buf.size(); }

  void need(std::size_t bytes, const char* what) const {
    if (pos + bytes > buf.size())
      throw FormatError(std::string("container: truncated ") + what + " at byte offset " +
                        std::to_string(pos));
  }

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int b = 0; b < 4; ++b)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + b])) << (8 * b);
    pos += 4;
    return v;
  }

  double f64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int b = 0; b < 8; ++b)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + b])) << (8 * b);
    pos += 8;
    return std::bit_cast<double>(v);
  }
};

}  // namespace detail

inline std::string encode_container(const std::vector<TensorRecord>& records) {
  std::string out(detail::kMagic, 4);
  detail::put_u32(out, detail::kVersion);
  for (const TensorRecord& rec : records) {
    std::size_t expected = 1;
    for (std::uint32_t d : rec.dims) expected *= d;
    if (expected != rec.values.size())
      throw ValidationError("container: tensor '" + rec.name + "' has " +
                            std::to_string(rec.values.size()) + " values but dims imply " +
                            std::to_string(expected));
    detail::put_u32(out, static_cast<std::uint32_t>(rec.name.size()));
    out += rec.name;
    detail::put_u32(out, static_cast<std::uint32_t>(rec.dims.size()));
    for (std::uint32_t d : rec.dims) detail::put_u32(out, d);
    for (double v : rec.values) detail::put_f64(out, v);
  }
  return out;
}

inline std::vector<TensorRecord> decode_container(const std::string& buf) {
  if (buf.size() < 4 || buf.compare(0, 4, detail::kMagic, 4) != 0)
    throw FormatError("container: bad magic at byte offset 0");
  detail::Reader reader{buf, 4};
  std::uint32_t version = reader.u32("version");
  if (version != detail::kVersion)
    throw FormatError("container: unsupported version " + std::to_string(version) +
                      " at byte offset 4");
  std::vector<TensorRecord> records;
  while (!reader.done()) {
    TensorRecord rec;
    std::uint32_t name_len = reader.u32("record name length");
    reader.need(name_len, "record name");
    rec.name.assign(buf, reader.pos, name_len);
    reader.pos += name_len;
    std::uint32_t rank = reader.u32("record rank");
    std::size_t count = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      std::uint32_t d = reader.u32("record dim");
      rec.dims.push_back(d);
      count *= d;
      if (count > buf.size())  // payload cannot exceed the file itself
        throw FormatError("container: truncated record payload at byte offset " +
                          std::to_string(reader.pos));
    }
    reader.need(count * 8, "record payload");
    rec.values.resize(count);
    for (std::size_t i = 0; i < count; ++i) rec.values[i] = reader.f64("record payload");
    records.push_back(std::move(rec));
  }
  return records;
}

// Single-writer atomic file update: write a sibling temp file, then rename.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open for write: " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("short write: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open for read: " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

inline void write_container(const std::filesystem::path& path,
                            const std::vector<TensorRecord>& records) {
  write_file_atomic(path, encode_container(records));
}

inline std::vector<TensorRecord> read_container(const std::filesystem::path& path) {
  return decode_container(read_file(path));
}

inline const TensorRecord& find_record(const std::vector<TensorRecord>& records,
                                       const std::string& name) {
  for (const TensorRecord& rec : records)
    if (rec.name == name) return rec;
  throw FormatError("container: missing tensor '" + name + "'");
}

}  // namespace arccap::data
