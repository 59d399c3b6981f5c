#pragma once

#include <filesystem>
#include <random>
#include <string>

namespace gazedrop::test {

// Scratch directory removed at scope exit.
class TempDir {
 public:
  TempDir() {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("gazedrop_test_" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace gazedrop::test

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

namespace gazedrop::test {

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

inline void spit(const std::filesystem::path& p, const std::string& text) {
  std::ofstream(p, std::ios::binary) << text;
}

struct Run {
  int code = -1;
  std::string output;  // stdout and stderr interleaved
};

// Runs a shell command, capturing its combined output and exit status.
inline Run run_shell(const std::string& cmd, const std::filesystem::path& capture) {
  const int status = std::system((cmd + " > '" + capture.string() + "' 2>&1").c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.output = slurp(capture);
  return r;
}

}  // namespace gazedrop::test
