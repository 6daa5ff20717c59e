#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <string>

// Tiny harness for the acceptance binaries: each sub-check prints its own
// line, the binary ends with a single PASS/FAIL verdict line and exits 0
// only when every check held.
struct Acc {
  const char* name;
  bool ok = true;
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();

  explicit Acc(const char* n) : name(n) {}

  void check(bool cond, const std::string& what) {
    std::printf("  [%s] %s\n", cond ? "ok" : "FAIL", what.c_str());
    std::fflush(stdout);
    if (!cond) ok = false;
  }

  void note(const std::string& what) {
    std::printf("  [--] %s\n", what.c_str());
    std::fflush(stdout);
  }

  int done(const std::string& summary) {
    const double secs = std::chrono::duration<double>(
                            std::chrono::steady_clock::now() - t0)
                            .count();
    std::printf("%s: %s - %s (%.1f s)\n", name, ok ? "PASS" : "FAIL",
                summary.c_str(), secs);
    return ok ? 0 : 1;
  }
};

inline std::string sci(double x) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3g", x);
  return buf;
}

// Shared scratch root passed by ctest; runs dropped here are content
// addressed, so binaries that request identical work reuse each other's
// results instead of recomputing.
inline std::string acc_root(int argc, char** argv) {
  namespace fs = std::filesystem;
  const fs::path root =
      argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "cbct_acc";
  fs::create_directories(root);
  return root.string();
}

inline std::string acc_subdir(int argc, char** argv, const char* leaf) {
  namespace fs = std::filesystem;
  const fs::path p = fs::path(acc_root(argc, argv)) / leaf;
  fs::create_directories(p);
  return p.string();
}
