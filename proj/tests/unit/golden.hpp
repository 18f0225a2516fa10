#pragma once

// Golden-file comparison. Set DMPRUNE_UPDATE_GOLDEN=1 to rewrite the files
// from the current build instead of comparing.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>

namespace golden {

inline std::filesystem::path path(const std::string& name) { return std::filesystem::path(DMPRUNE_GOLDEN_DIR) / name; }

inline bool updating() {
  const char* v = std::getenv("DMPRUNE_UPDATE_GOLDEN");
  return v && std::string(v) == "1";
}

inline std::string read(const std::string& name) {
  std::ifstream in(path(name), std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Returns true when `actual` matches the stored file (or was just written).
inline bool matches(const std::string& name, const std::string& actual) {
  if (updating()) {
    std::filesystem::create_directories(path(name).parent_path());
    std::ofstream(path(name), std::ios::binary | std::ios::trunc) << actual;
    return true;
  }
  return std::filesystem::exists(path(name)) && read(name) == actual;
}

}  // namespace golden
