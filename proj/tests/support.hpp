#pragma once

#include <cstdint>
#include <filesystem>
#include <ostream>
#include <random>
#include <string>

#include <torch/torch.h>

// c10 defines a glog-style CHECK; the test macros take precedence.
#undef CHECK
#include "doctest.h"
#include "maskany/masking.hpp"

namespace maskany {

// Readable failure messages; c10 provides a generic vector printer that needs
// element printers.
inline std::ostream& operator<<(std::ostream& os, const BlockPos& p) {
  return os << "(" << p.row << "," << p.col << ")";
}
inline std::ostream& operator<<(std::ostream& os, const MaskSpec& s) {
  return os << to_string(s.strategy) << " " << s.height << "x" << s.width << "/" << s.block_size
            << " masked " << s.masked_count();
}

}  // namespace maskany

namespace testing {

inline torch::Tensor random_image(std::int64_t c, std::int64_t h, std::int64_t w,
                                  std::uint64_t seed) {
  torch::manual_seed(seed);
  return torch::rand({c, h, w});
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("maskany_" + tag + "_" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace testing
