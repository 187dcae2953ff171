#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

namespace minidrive {

/// Streaming SHA-1 (FIPS 180-1), used only as a content checksum.
class Sha1 {
 public:
  Sha1() { reset(); }
  void reset();
  void update(const void* data, size_t len);
  std::string hex_digest();  // finalizes

 private:
  void process_block(const unsigned char* block);
  uint32_t h_[5];
  unsigned char buf_[64];
  size_t buf_len_ = 0;
  uint64_t total_ = 0;
};

}  // namespace minidrive
