// Monte Carlo replication studies over the six estimator variants and the
// reports built from them.
#pragma once

#include "dmar/engine.hpp"
#include "dmar/sim.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace dmar::study {

/// One of the six estimators: outcome model correct (Oc) or wrong (On),
/// unweighted or weighted with a correct (Wc) or wrong (Wn) propensity model.
struct Variant {
  std::string label;
  sim::ModelSpec outcome = sim::ModelSpec::correct;
  std::optional<sim::ModelSpec> weights;  // nullopt = unweighted (QLOMA)

  Method method() const { return weights ? Method::woma : Method::qloma; }
};

inline const std::array<std::string, 6> kVariantLabels = {"On", "Oc", "On-Wc", "Oc-Wn", "Oc-Wc", "On-Wn"};
inline const std::array<std::string, 6> kParameterLabels = {"gamma0", "gammaK", "gammaY",
                                                            "gamma0*", "gammaK*", "gammaY*"};

Variant parse_variant(const std::string& label);

enum class MissingMethod { none, locf, mice };
std::string to_string(MissingMethod m);
MissingMethod missing_method_from_string(const std::string& s);

struct StudyConfig {
  sim::DgmScenario scenario = sim::scenario_preset("A");
  int replications = 100;
  std::uint64_t seed = 20240101;
  int workers = 0;
  std::vector<std::string> variants{kVariantLabels.begin(), kVariantLabels.end()};
  std::vector<WeightKind> weight_kinds{WeightKind::overlap};
  MissingMethod missing = MissingMethod::none;
  int imputations = 25;
  PropensitySource propensity = PropensitySource::joint;
  std::vector<int> stages{1, 2};
  bool ipcw_stabilized = false;
  std::filesystem::path output_dir = "study_out";

  // Value report.
  int value_fit_n = 50000;
  int value_eval_n = 200000;
  std::vector<std::string> value_variants{"Oc-Wc"};

  static StudyConfig load(const std::filesystem::path& path);
  void validate() const;
};

/// One estimator column of the results: variant x weight kind. Unweighted
/// variants appear once with kind `none`.
struct Column {
  Variant variant;
  WeightKind kind = WeightKind::none;
  std::string name() const;
};

std::vector<Column> study_columns(const StudyConfig& cfg);

/// Inverse of Column::name(), e.g. "Oc-Wc[ipt]".
Column parse_column(const std::string& name);

using Estimate = std::array<double, 6>;  // last-stage (gamma, gamma*)

struct Replication {
  int index = 0;
  std::uint64_t seed = 0;
  bool ok = true;
  std::string error;
  double censored_fraction = 0;
  double missing_fraction = 0;
  std::vector<Estimate> estimates;  // per column
};

struct Summary {
  Estimate mean{}, bias{}, sd{};
  int count = 0;
};

struct StudyBundle {
  StudyConfig config;
  std::vector<Column> columns;
  std::vector<Replication> replications;

  int aborted() const;
  bool failed() const { return aborted() * 100 > static_cast<int>(replications.size()); }
  std::vector<Summary> summarize() const;
  double mean_censored_fraction() const;
};

/// Regime for one column, fitted on each completed dataset (one, or m for
/// multiple imputation) and pooled. Censoring weights follow the scenario.
FittedRegime fit_column(const std::vector<Cohort>& datasets, const StudyConfig& cfg, const Column& column);

/// Last-stage blip estimates of every column.
std::vector<Estimate> estimate_columns(const std::vector<Cohort>& datasets, const StudyConfig& cfg,
                                       const std::vector<Column>& columns);

/// Generated, censored/masked and completed datasets for replication seed
/// `seed`.
std::vector<Cohort> replicate_datasets(const StudyConfig& cfg, std::uint64_t seed, Replication* record = nullptr);

StudyBundle run_study(const StudyConfig& cfg);

/// Bias block then SD block; one row per blip parameter, one column per
/// estimator column.
void emit_bias_table(const StudyBundle& bundle, std::ostream& out);
void emit_estimates(const StudyBundle& bundle, std::ostream& out);

/// JSON form of a bundle: configuration summary, columns and per-replication
/// estimates.
void write_bundle(const StudyBundle& bundle, const std::filesystem::path& path);
StudyBundle read_bundle(const std::filesystem::path& path);

struct ValueRow {
  std::string policy;
  double value = 0, se = 0, difference = 0, difference_se = 0;
};

struct ValueReport {
  int fit_n = 0, eval_n = 0;
  std::vector<ValueRow> rows;  // first row: observational
  const ValueRow& row(const std::string& policy) const;
};

ValueReport run_value_study(const StudyConfig& cfg);
void emit_value_report(const ValueReport& report, std::ostream& out);

}  // namespace dmar::study
