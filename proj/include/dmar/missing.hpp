// Completion of missing covariate cells: last observation carried forward
// and sequential (time-ordered) normal-linear multiple imputation. Also
// pooling of regimes fitted on imputed datasets.
#pragma once

#include "dmar/engine.hpp"
#include "dmar/panel.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace dmar {

/// Columns never imputed nor carried forward.
inline const std::vector<std::string> kDesignColumns = {"dN", "A", "xi", "Y_final"};

/// Fills each missing cell of `columns` (default: every non-design column)
/// with the subject's most recent observed value. Only times at which the
/// column is recorded for someone are touched.
Cohort locf_complete(const Cohort& cohort, const std::vector<std::string>& columns = {});

struct ImputationConfig {
  int m = 25;
  bool noise = true;
  std::uint64_t seed = 1;
  std::vector<std::string> columns;             // empty: every column with gaps
  std::vector<std::string> excluded_predictors;
  int workers = 1;
};

struct ImputationManifest {
  std::vector<std::uint64_t> seeds;
  std::map<std::string, long> fill_counts;  // "col@t" -> cells filled per dataset

  void write(const std::filesystem::path& path) const;
};

struct ImputationResult {
  std::vector<Cohort> datasets;
  ImputationManifest manifest;
};

/// Sweeps times in ascending order. At each time every column with gaps is
/// regressed on all completed earlier-time columns and the fully observed
/// current-time columns; missing rows get the prediction plus (if
/// `config.noise`) a normal draw with the residual SD.
ImputationResult sequential_impute(const Cohort& cohort, const ImputationConfig& config);

/// Coefficient-wise mean. Stage structure and coefficient names must agree.
FittedRegime pool_regimes(const std::vector<FittedRegime>& regimes);

}  // namespace dmar
