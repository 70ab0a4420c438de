#include "mergelab/artifacts.hpp"

#include <chrono>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "mergelab/rng.hpp"

namespace mergelab {

namespace fs = std::filesystem;

ArtifactWriter::ArtifactWriter(fs::path out_dir) : dir_(std::move(out_dir)) {
  fs::create_directories(dir_);
}

void ArtifactWriter::write(const std::string& rel_path, const std::string& bytes) {
  const fs::path target = dir_ / rel_path;
  fs::create_directories(target.parent_path());
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("short write to " + tmp.string());
  }
  fs::rename(tmp, target);
  entries_.push_back(Entry{rel_path, bytes.size(), fnv1a64(bytes)});
}

void ArtifactWriter::note(const std::string& line) { notes_.push_back(line); }

void ArtifactWriter::finalize() {
  std::ostringstream out;
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  char stamp[32];
  std::strftime(stamp, sizeof(stamp), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  out << "# manifest written " << stamp << "\n";
  out << "# columns: fnv1a64 bytes path\n";
  for (const Entry& e : entries_) {
    char hex[17];
    std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(e.hash));
    out << hex << ' ' << e.bytes << ' ' << e.rel_path << '\n';
  }
  for (const std::string& n : notes_) out << "# note: " << n << '\n';
  const fs::path target = dir_ / "manifest.txt";
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + tmp.string());
    const std::string s = out.str();
    f.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  fs::rename(tmp, target);
}

}  // namespace mergelab
