// Shared fixtures for the unit suites.
#pragma once

#include "dmar/panel.hpp"

#include <filesystem>
#include <fstream>
#include <random>
#include <string>

namespace dmar::testing {

inline std::filesystem::path temp_path(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "dmar_tests";
  std::filesystem::create_directories(dir);
  return dir / name;
}

inline std::filesystem::path write_text(const std::string& name, const std::string& text) {
  const auto p = temp_path(name);
  std::ofstream(p) << text;
  return p;
}

inline std::vector<std::string> core_columns() { return {kCoreColumns.begin(), kCoreColumns.end()}; }

/// Complete tau = 3 cohort with random strategies and covariates; nobody is
/// censored.
inline Cohort random_cohort(int n, std::uint64_t seed) {
  Cohort c([&] {
    std::vector<long> ids;
    for (int i = 1; i <= n; ++i) ids.push_back(i);
    return ids;
  }(), 3, core_columns());
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> z;
  std::uniform_int_distribution<int> s(0, 2);
  for (int i = 0; i < n; ++i) {
    const double a0 = s(rng) == 0 ? 0.0 : 1.0;
    for (int t = 0; t <= 3; ++t) {
      c.set(c.column_index("xi"), i, t, 1.0);
      c.set(c.column_index("A0"), i, t, a0);
      c.set(c.column_index("K1"), i, t, 5 + z(rng));
      c.set(c.column_index("K2"), i, t, 4 + z(rng));
      c.set(c.column_index("Y"), i, t, 200 + 10 * z(rng));
      const int k = t == 0 ? (a0 > 0 ? 2 : 1) : s(rng);
      if (t < 3) {
        c.set(c.column_index("dN"), i, t, k > 0 ? 1.0 : 0.0);
        c.set(c.column_index("A"), i, t, k == 2 ? 1.0 : 0.0);
      }
    }
    c.set(c.column_index("Y_final"), i, 3, 200 + 10 * z(rng));
  }
  return c;
}

}  // namespace dmar::testing
