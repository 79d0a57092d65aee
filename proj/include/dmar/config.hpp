// Model configuration for fitting a regime from a cohort file.
//
//   [model]   stages, visit_modifiers, addon_modifiers, treatment_free,
//             treatment_free_<t>, propensity, propensity_source,
//             addon_covariates, ipt_truncation, positivity_floor,
//             override_positivity, ridge_fallback
//   [ipcw]    mode (none | time_fixed | time_dependent), covariates,
//             stabilized, risk_times
//   [roles]   confounders, visit_covariates, visit_modifiers,
//             addon_modifiers, treatment_free (plain column names)
#pragma once

#include "dmar/engine.hpp"

#include <filesystem>
#include <optional>

namespace dmar {

enum class IpcwMode { none, time_fixed, time_dependent };
std::string to_string(IpcwMode m);
IpcwMode ipcw_mode_from_string(const std::string& s);

struct ModelConfig {
  BlipSpec spec;
  ColumnRoleMap roles;
  PropensitySource propensity_source = PropensitySource::joint;
  std::vector<Term> propensity;
  std::vector<Term> addon_covariates;
  std::optional<Truncation> ipt_truncation;
  double positivity_floor = 0.01;
  bool override_positivity = false;
  bool ridge_fallback = false;

  IpcwMode ipcw = IpcwMode::none;
  std::vector<Term> ipcw_covariates;
  IpcwOptions ipcw_options;

  RegimeOptions options(Method method, WeightKind kind) const;
  /// Censoring weights for `cohort`, or nullopt when mode is none.
  std::optional<WeightVector> censoring_weights(const Cohort& cohort) const;
};

ModelConfig load_model_config(const std::filesystem::path& path);

}  // namespace dmar
