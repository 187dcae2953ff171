#include "minidrive/serialize.hpp"

#include <array>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "minidrive/sha1.hpp"

namespace minidrive {

namespace {

constexpr char kTensorMagic[4] = {'M', 'D', 'T', 'N'};
constexpr char kContainerMagic[4] = {'M', 'D', 'C', 'N'};

void put_u32(std::ostream& os, uint32_t v) {
  std::array<unsigned char, 4> b{static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                 static_cast<unsigned char>(v >> 16),
                                 static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b.data()), 4);
}

void put_u64(std::ostream& os, uint64_t v) {
  put_u32(os, static_cast<uint32_t>(v));
  put_u32(os, static_cast<uint32_t>(v >> 32));
}

void put_u16(std::ostream& os, uint16_t v) {
  std::array<unsigned char, 2> b{static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
  os.write(reinterpret_cast<const char*>(b.data()), 2);
}

uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw IoError("tensor record: truncated u32");
  return static_cast<uint32_t>(b[0]) | static_cast<uint32_t>(b[1]) << 8 |
         static_cast<uint32_t>(b[2]) << 16 | static_cast<uint32_t>(b[3]) << 24;
}

uint64_t get_u64(std::istream& is) {
  const uint64_t lo = get_u32(is);
  return lo | static_cast<uint64_t>(get_u32(is)) << 32;
}

uint16_t get_u16(std::istream& is) {
  unsigned char b[2];
  if (!is.read(reinterpret_cast<char*>(b), 2)) throw IoError("container: truncated u16");
  return static_cast<uint16_t>(b[0] | b[1] << 8);
}

}  // namespace

void write_tensor_record(std::ostream& os, const Shape& shape, const std::vector<float>& data) {
  os.write(kTensorMagic, 4);
  put_u32(os, static_cast<uint32_t>(shape.size()));
  uint64_t n = 1;
  for (int e : shape) {
    put_u64(os, static_cast<uint64_t>(e));
    n *= static_cast<uint64_t>(e);
  }
  if (n != data.size()) throw IoError("tensor record: payload does not match extents");
  for (float v : data) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(os, bits);
  }
}

NamedTensor read_tensor_record(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kTensorMagic, 4) != 0)
    throw IoError("tensor record: bad magic (expected MDTN)");
  NamedTensor t;
  const uint32_t rank = get_u32(is);
  if (rank > 8) throw IoError("tensor record: implausible rank");
  uint64_t n = 1;
  for (uint32_t i = 0; i < rank; ++i) {
    const uint64_t e = get_u64(is);
    if (e == 0 || e > (1u << 30)) throw IoError("tensor record: implausible extent");
    t.shape.push_back(static_cast<int>(e));
    n *= e;
  }
  t.data.resize(n);
  for (uint64_t i = 0; i < n; ++i) {
    const uint32_t bits = get_u32(is);
    std::memcpy(&t.data[i], &bits, 4);
  }
  return t;
}

void write_tensor_file(const std::string& path, const Shape& shape,
                       const std::vector<float>& data) {
  std::ostringstream os(std::ios::binary);
  write_tensor_record(os, shape, data);
  atomic_write_file(path, os.str());
}

NamedTensor read_tensor_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open tensor file: " + path);
  return read_tensor_record(is);
}

void write_container(const std::string& path, const std::vector<NamedTensor>& tensors) {
  std::ostringstream os(std::ios::binary);
  os.write(kContainerMagic, 4);
  put_u32(os, static_cast<uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    if (t.name.size() > 0xffff) throw IoError("container: tensor name too long");
    put_u16(os, static_cast<uint16_t>(t.name.size()));
    os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    write_tensor_record(os, t.shape, t.data);
  }
  atomic_write_file(path, os.str());
}

std::vector<NamedTensor> read_container(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint container: " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kContainerMagic, 4) != 0)
    throw IoError("checkpoint container: bad magic (expected MDCN): " + path);
  const uint32_t count = get_u32(is);
  std::vector<NamedTensor> out;
  out.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    const uint16_t len = get_u16(is);
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw IoError("checkpoint container: truncated name");
    NamedTensor t = read_tensor_record(is);
    t.name = std::move(name);
    out.push_back(std::move(t));
  }
  return out;
}

std::string git_blob_hash(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open file for hashing: " + path);
  std::ostringstream body;
  body << is.rdbuf();
  const std::string bytes = body.str();
  Sha1 h;
  const std::string header = "blob " + std::to_string(bytes.size()) + '\0';
  h.update(header.data(), header.size());
  h.update(bytes.data(), bytes.size());
  return h.hex_digest();
}

void atomic_write_file(const std::string& path, const std::string& bytes) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  const fs::path tmp = target.parent_path() / (target.filename().string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open for writing: " + tmp.string());
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw IoError("short write: " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) throw IoError("atomic rename failed for " + path + ": " + ec.message());
}

}  // namespace minidrive
