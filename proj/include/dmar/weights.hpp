// Propensities for the three-way strategy, balancing weights (overlap,
// inverse probability of treatment), inverse probability of censoring
// weights and weighted covariate balance.
#pragma once

#include "dmar/glm.hpp"
#include "dmar/panel.hpp"
#include "dmar/terms.hpp"

#include <array>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

namespace dmar {

enum class PropensitySource { joint, factorized };

/// Strategy probabilities at one decision time. Rows of `e` follow subject
/// order; subjects outside `rows` hold NaN.
struct PropensityEstimates {
  int t = 0;
  PropensitySource source = PropensitySource::joint;
  Eigen::MatrixXd e;                 // n x 3: (0,0), (1,0), (1,1)
  std::vector<int> rows;             // subjects used for the fit
  std::vector<Term> covariates;      // joint / visit model covariates
  std::vector<Term> addon_covariates;
  glm::FitResult<double> fit;        // joint multinomial, or the visit model
  glm::FitResult<double> addon_fit;  // factorized only
  int clipped = 0;                   // rows touched by the probability floor
};

inline constexpr double kPropensityFloor = 1e-6;

/// Clips each probability to [floor, 1 - floor] and renormalizes the row.
/// Returns the number of rows changed.
int clip_propensities(Eigen::MatrixXd& e, double floor = kPropensityFloor);

/// Multinomial model of the strategy at `t` among subjects in study at `t`.
PropensityEstimates estimate_propensities_joint(const Cohort& cohort, int t, const std::vector<Term>& covariates);

/// Visit model on everyone in study at `t`, add-on model among visitors.
PropensityEstimates estimate_propensities_factorized(const Cohort& cohort, int t, const std::vector<Term>& visit_covs,
                                                     const std::vector<Term>& addon_covs);

/// Re-evaluates the propensity model at parameter vector `theta` (stacked as
/// in the multinomial fit). Used for numerical derivatives.
Eigen::MatrixXd joint_propensities_at(const Cohort& cohort, const PropensityEstimates& pe, const Eigen::VectorXd& theta);

enum class WeightKind { none, overlap, ipt, ipcw, product };

std::string to_string(WeightKind k);
WeightKind weight_kind_from_string(const std::string& s);

/// Per-subject, per-time weights (n x (tau+1)). Censoring weights are
/// constant over time within a subject.
struct WeightVector {
  WeightKind kind = WeightKind::none;
  Eigen::MatrixXd w;
  std::string notice;

  static WeightVector ones(const Cohort& c);
  double operator()(int subject, int t) const { return w(subject, t); }
};

/// 1 / (1/e0 + 1/e1 + 1/e2), the part of the overlap weight that does not
/// depend on the received strategy.
inline double harmonic_term(double e0, double e1, double e2) { return 1.0 / (1.0 / e0 + 1.0 / e1 + 1.0 / e2); }

inline double overlap_weight(double e0, double e1, double e2, StrategyCode received) {
  const double e[3] = {e0, e1, e2};
  return harmonic_term(e0, e1, e2) / e[received.index()];
}

/// Overlap weights at time pe.t for every subject in pe.rows.
WeightVector overlap_weights(const Cohort& cohort, const PropensityEstimates& pe);

struct Truncation {
  double lower = 0.01;  // percentiles in [0,1]
  double upper = 0.99;
};

WeightVector ipt_weights(const Cohort& cohort, const PropensityEstimates& pe,
                         std::optional<Truncation> truncation = std::nullopt);

/// One logistic model of "censored by tau" on baseline covariates. Completers
/// get 1 / P(uncensored), censored subjects 0.
WeightVector ipcw_time_fixed(const Cohort& cohort, const std::vector<Term>& baseline_covs);

struct IpcwOptions {
  bool stabilized = false;
  // Months at which the pooled hazard is modelled. Empty = months with at
  // least one observed censoring event.
  std::vector<int> risk_times;
};

/// Pooled logistic hazard over person-months; covariate terms are relative
/// to the month (e.g. "Y@t-1").
WeightVector ipcw_time_dependent(const Cohort& cohort, const std::vector<Term>& timevarying_covs,
                                 const IpcwOptions& opt = {});

/// Elementwise product; the result is of kind `product` unless one factor is
/// all ones.
WeightVector multiply(const WeightVector& a, const WeightVector& b);

struct BalanceRow {
  std::string covariate;
  std::array<double, 3> mean{};
  std::array<double, 3> sd{};
  std::array<double, 3> smd{};  // (0,1), (0,2), (1,2)
};

struct BalanceTable {
  int t = 0;
  std::vector<BalanceRow> rows;
  double max_abs_smd() const;
};

/// Weighted mean and SD per strategy group at `t` with pairwise
/// standardized mean differences (pooled SD = sqrt((s_a^2 + s_b^2)/2)).
BalanceTable balance_diagnostics(const Cohort& cohort, int t, const WeightVector& w, const std::vector<Term>& covariates);

/// covariate,group,weighted_mean,weighted_sd,smd_01,smd_02,smd_12
void write_balance_csv(const BalanceTable& table, std::ostream& out);

}  // namespace dmar
