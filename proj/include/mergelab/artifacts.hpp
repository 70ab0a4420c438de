// Atomic artifact emission: every file is written to a temp name and
// renamed into place, and a manifest listing path, size, and content hash is
// produced at the end of a command. Timestamps live only in the manifest.
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace mergelab {

class ArtifactWriter {
 public:
  explicit ArtifactWriter(std::filesystem::path out_dir);

  const std::filesystem::path& dir() const { return dir_; }

  // Writes bytes atomically and records the artifact in the manifest.
  void write(const std::string& rel_path, const std::string& bytes);
  // Records a note (e.g. a divergence flag) against the manifest.
  void note(const std::string& line);
  // Writes manifest.txt itself (not atomic-recorded recursively).
  void finalize();

  struct Entry {
    std::string rel_path;
    std::uint64_t bytes = 0;
    std::uint64_t hash = 0;
  };
  const std::vector<Entry>& entries() const { return entries_; }

 private:
  std::filesystem::path dir_;
  std::vector<Entry> entries_;
  std::vector<std::string> notes_;
};

}  // namespace mergelab
