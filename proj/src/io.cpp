#include "cdfnet/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <limits>

namespace cdfnet {

namespace {

constexpr char kTensorMagic[4] = {'C', 'D', 'F', 'T'};
constexpr char kCheckpointMagic[4] = {'C', 'D', 'F', 'C'};
constexpr std::uint8_t kVersion = 0x01;

void put_u8(std::string& buf, std::uint8_t v) {
  buf.push_back(static_cast<char>(v));
}

void put_u32le(std::string& buf, std::uint32_t v) {
  buf.push_back(static_cast<char>(v & 0xFF));
  buf.push_back(static_cast<char>((v >> 8) & 0xFF));
  buf.push_back(static_cast<char>((v >> 16) & 0xFF));
  buf.push_back(static_cast<char>((v >> 24) & 0xFF));
}

void put_u64le(std::string& buf, std::uint64_t v) {
  put_u32le(buf, static_cast<std::uint32_t>(v & 0xFFFFFFFFULL));
  put_u32le(buf, static_cast<std::uint32_t>(v >> 32));
}

void encode_header(std::string& buf, Dtype dtype,
                   const std::vector<std::uint32_t>& extents) {
  buf.append(kTensorMagic, 4);
  put_u8(buf, kVersion);
  put_u8(buf, static_cast<std::uint8_t>(dtype));
  put_u8(buf, static_cast<std::uint8_t>(extents.size()));
  for (std::uint32_t e : extents) put_u32le(buf, e);
}

std::string encode_record(const Tensor<float>& t) {
  std::string buf;
  encode_header(buf, Dtype::kReal32,
                {static_cast<std::uint32_t>(t.shape.n),
                 static_cast<std::uint32_t>(t.shape.c),
                 static_cast<std::uint32_t>(t.shape.h),
                 static_cast<std::uint32_t>(t.shape.w)});
  for (float v : t.data) put_u32le(buf, std::bit_cast<std::uint32_t>(v));
  return buf;
}

std::string encode_record(const Tensor<double>& t) {
  std::string buf;
  encode_header(buf, Dtype::kReal64,
                {static_cast<std::uint32_t>(t.shape.n),
                 static_cast<std::uint32_t>(t.shape.c),
                 static_cast<std::uint32_t>(t.shape.h),
                 static_cast<std::uint32_t>(t.shape.w)});
  for (double v : t.data) put_u64le(buf, std::bit_cast<std::uint64_t>(v));
  return buf;
}

std::string encode_record(const LabelMap& m) {
  std::string buf;
  encode_header(buf, Dtype::kLabels,
                {static_cast<std::uint32_t>(m.n),
                 static_cast<std::uint32_t>(m.h),
                 static_cast<std::uint32_t>(m.w)});
  for (std::uint32_t v : m.data) put_u32le(buf, v);
  return buf;
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open for writing: " + path);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("write failed: " + path);
}

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary | std::ios::ate);
  if (!is) throw IoError("cannot open for reading: " + path);
  const std::streamsize size = is.tellg();
  is.seekg(0);
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(size));
  if (size > 0) is.read(reinterpret_cast<char*>(bytes.data()), size);
  if (!is) throw IoError("read failed: " + path);
  return bytes;
}

struct Cursor {
  const std::uint8_t* p;
  const std::uint8_t* end;
  std::string where;

  std::size_t remaining() const { return static_cast<std::size_t>(end - p); }

  void need(std::size_t k, const char* what) const {
    if (remaining() < k)
      throw LengthError("truncated " + std::string(what) + " in " + where);
  }

  std::uint8_t u8(const char* what) {
    need(1, what);
    return *p++;
  }

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = static_cast<std::uint32_t>(p[0]) |
                      (static_cast<std::uint32_t>(p[1]) << 8) |
                      (static_cast<std::uint32_t>(p[2]) << 16) |
                      (static_cast<std::uint32_t>(p[3]) << 24);
    p += 4;
    return v;
  }

  std::uint64_t u64(const char* what) {
    std::uint64_t lo = u32(what);
    std::uint64_t hi = u32(what);
    return lo | (hi << 32);
  }
};

LoadedRecord parse_record(Cursor& c) {
  c.need(4, "magic");
  if (std::memcmp(c.p, kTensorMagic, 4) != 0)
    throw FormatError("bad magic in " + c.where + " (expected \"CDFT\")");
  c.p += 4;
  const std::uint8_t version = c.u8("version");
  if (version != kVersion)
    throw VersionError("unsupported record version " + std::to_string(version) +
                       " in " + c.where);
  const std::uint8_t dtype = c.u8("dtype");
  if (dtype != 0x01 && dtype != 0x02 && dtype != 0x03)
    throw VersionError("unknown dtype byte " + std::to_string(dtype) + " in " +
                       c.where);
  const std::uint8_t ndim = c.u8("ndim");
  const std::uint8_t want_ndim = (dtype == 0x03) ? 3 : 4;
  if (ndim != want_ndim)
    throw FormatError("dtype " + std::to_string(dtype) + " requires ndim " +
                      std::to_string(want_ndim) + ", got " +
                      std::to_string(ndim) + " in " + c.where);

  std::vector<std::uint32_t> extents(ndim);
  std::uint64_t count = 1;
  for (int i = 0; i < ndim; ++i) {
    extents[i] = c.u32("extent");
    if (extents[i] < 1)
      throw FormatError("extent " + std::to_string(i) + " is zero in " +
                        c.where);
    if (extents[i] > static_cast<std::uint32_t>(std::numeric_limits<int>::max()))
      throw FormatError("extent " + std::to_string(i) + " too large in " +
                        c.where);
    count *= extents[i];
  }

  if (dtype == 0x01) {
    Tensor<float> t(Shape{static_cast<int>(extents[0]),
                          static_cast<int>(extents[1]),
                          static_cast<int>(extents[2]),
                          static_cast<int>(extents[3])});
    for (std::uint64_t i = 0; i < count; ++i)
      t.data[i] = std::bit_cast<float>(c.u32("payload"));
    return t;
  }
  if (dtype == 0x02) {
    Tensor<double> t(Shape{static_cast<int>(extents[0]),
                           static_cast<int>(extents[1]),
                           static_cast<int>(extents[2]),
                           static_cast<int>(extents[3])});
    for (std::uint64_t i = 0; i < count; ++i)
      t.data[i] = std::bit_cast<double>(c.u64("payload"));
    return t;
  }
  LabelMap m(static_cast<int>(extents[0]), static_cast<int>(extents[1]),
             static_cast<int>(extents[2]));
  for (std::uint64_t i = 0; i < count; ++i) m.data[i] = c.u32("payload");
  return m;
}

}  // namespace

void write_tensor(const std::string& path, const Tensor<float>& t) {
  write_file(path, encode_record(t));
}

void write_tensor(const std::string& path, const Tensor<double>& t) {
  write_file(path, encode_record(t));
}

void write_label_map(const std::string& path, const LabelMap& m) {
  write_file(path, encode_record(m));
}

void write_record(std::ostream& os, const Tensor<float>& t) {
  const std::string buf = encode_record(t);
  os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

void write_record(std::ostream& os, const Tensor<double>& t) {
  const std::string buf = encode_record(t);
  os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

void write_record(std::ostream& os, const LabelMap& m) {
  const std::string buf = encode_record(m);
  os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

LoadedRecord read_record(const std::string& path) {
  const std::vector<std::uint8_t> bytes = read_file(path);
  Cursor c{bytes.data(), bytes.data() + bytes.size(), path};
  LoadedRecord rec = parse_record(c);
  if (c.remaining() != 0)
    throw LengthError("trailing bytes after record in " + path);
  return rec;
}

template <typename T>
Tensor<T> read_tensor(const std::string& path) {
  LoadedRecord rec = read_record(path);
  if (auto* t = std::get_if<Tensor<T>>(&rec)) return std::move(*t);
  throw FormatError("record in " + path + " does not hold the requested dtype");
}

template Tensor<float> read_tensor<float>(const std::string&);
template Tensor<double> read_tensor<double>(const std::string&);

LabelMap read_label_map(const std::string& path) {
  LoadedRecord rec = read_record(path);
  if (auto* m = std::get_if<LabelMap>(&rec)) return std::move(*m);
  throw FormatError("record in " + path + " is not a label map");
}

template <typename T>
void write_checkpoint(
    const std::string& path,
    const std::vector<std::pair<std::string, const Tensor<T>*>>& entries) {
  std::string buf;
  buf.append(kCheckpointMagic, 4);
  put_u8(buf, kVersion);
  put_u32le(buf, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, tensor] : entries) {
    put_u32le(buf, static_cast<std::uint32_t>(name.size()));
    buf.append(name);
    buf += encode_record(*tensor);
  }
  write_file(path, buf);
}

template void write_checkpoint<float>(
    const std::string&,
    const std::vector<std::pair<std::string, const Tensor<float>*>>&);
template void write_checkpoint<double>(
    const std::string&,
    const std::vector<std::pair<std::string, const Tensor<double>*>>&);

std::vector<CheckpointEntry> read_checkpoint(const std::string& path) {
  const std::vector<std::uint8_t> bytes = read_file(path);
  Cursor c{bytes.data(), bytes.data() + bytes.size(), path};
  c.need(4, "magic");
  if (std::memcmp(c.p, kCheckpointMagic, 4) != 0)
    throw FormatError("bad magic in " + path + " (expected \"CDFC\")");
  c.p += 4;
  const std::uint8_t version = c.u8("version");
  if (version != kVersion)
    throw VersionError("unsupported checkpoint version " +
                       std::to_string(version) + " in " + path);
  const std::uint32_t count = c.u32("entry count");
  std::vector<CheckpointEntry> entries;
  entries.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = c.u32("name length");
    c.need(name_len, "entry name");
    std::string name(reinterpret_cast<const char*>(c.p), name_len);
    c.p += name_len;
    entries.push_back({std::move(name), parse_record(c)});
  }
  if (c.remaining() != 0)
    throw LengthError("trailing bytes after checkpoint entries in " + path);
  return entries;
}

std::uint64_t fnv1a64(const void* bytes, std::size_t len) {
  const std::uint8_t* p = static_cast<const std::uint8_t*>(bytes);
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001B3ULL;
  }
  return h;
}

std::uint64_t fnv1a64_file(const std::string& path) {
  const std::vector<std::uint8_t> bytes = read_file(path);
  return fnv1a64(bytes.data(), bytes.size());
}

std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[v & 0xF];
    v >>= 4;
  }
  return s;
}

}  // namespace cdfnet
