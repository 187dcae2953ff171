#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "minidrive/tensor.hpp"

namespace minidrive {

// Tensor wire format ("MDTN"): magic, u32 rank, u64 extents, f32 payload,
// all little-endian. Checkpoints store a sequence of named records under
// a container header ("MDCN", u32 count, [u16 name_len, name, record]).

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

void write_tensor_record(std::ostream& os, const Shape& shape, const std::vector<float>& data);
NamedTensor read_tensor_record(std::istream& is);  // name left empty

void write_tensor_file(const std::string& path, const Shape& shape,
                       const std::vector<float>& data);
NamedTensor read_tensor_file(const std::string& path);

void write_container(const std::string& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> read_container(const std::string& path);

/// Git-style blob hash (sha1 over "blob <len>\0" + bytes) of a file,
/// lower-case hex. Used to stamp checkpoints into eval reports.
std::string git_blob_hash(const std::string& path);

/// Atomically replace `path` with `bytes` (write temp + rename).
void atomic_write_file(const std::string& path, const std::string& bytes);

template <class S>
NamedTensor to_named(const std::string& name, const Tensor<S>& t) {
  NamedTensor n;
  n.name = name;
  n.shape = t.shape;
  n.data.reserve(t.data.size());
  for (S v : t.data) n.data.push_back(static_cast<float>(v));
  return n;
}

}  // namespace minidrive
