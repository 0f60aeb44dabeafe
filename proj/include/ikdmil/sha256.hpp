#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

namespace ikdmil {

// Minimal SHA-256, used for parameter checksums and config content hashes.
class Sha256 {
 public:
  Sha256();
  void update(const void* data, size_t len);
  // Finalizes and returns the lowercase hex digest. The object must not be
  // updated afterwards.
  std::string hex_digest();

 private:
  void process_block(const uint8_t* block);
  uint32_t h_[8];
  uint8_t buffer_[64];
  size_t buffer_len_ = 0;
  uint64_t total_len_ = 0;
  bool finalized_ = false;
};

std::string sha256_hex(const void* data, size_t len);
std::string sha256_hex(const std::string& s);

}  // namespace ikdmil
