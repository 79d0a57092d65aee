// Stage-wise regression estimators for three-way monitoring/add-on regimes.
//
// At stage t the outcome (or pseudo-outcome) is regressed on
//   [(intercept), h(t), dN, dN*q_V(t)..., dN*A, dN*A*q_VA(t)...]
// The visit blip is gamma0 + gamma' q_V and the add-on blip is
// gamma0* + gamma*' q_VA. Stages are fitted backwards; later stages enter
// earlier ones through the pseudo-outcome.
#pragma once

#include "dmar/glm.hpp"
#include "dmar/panel.hpp"
#include "dmar/terms.hpp"
#include "dmar/weights.hpp"

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace dmar {

struct BlipSpec {
  std::vector<Term> visit_modifiers;  // q_V, usually relative ("K1@t")
  std::vector<Term> addon_modifiers;  // q_VA
  // Treatment-free predictors per stage; stages without an entry use
  // `default_treatment_free`.
  std::map<int, std::vector<Term>> treatment_free;
  std::vector<Term> default_treatment_free;
  std::vector<int> stages;  // strictly increasing, within 1..tau-1

  const std::vector<Term>& treatment_free_at(int t) const;
  /// Binds every term to `columns`; throws on unknown columns or bad stages.
  BlipSpec resolved(const std::vector<std::string>& columns, int tau) const;
};

inline double blip_visit(const Eigen::VectorXd& gamma, const Eigen::VectorXd& q) {
  if (gamma.size() != q.size() + 1) throw std::invalid_argument("blip_visit: dimension mismatch");
  return gamma(0) + gamma.tail(q.size()).dot(q);
}

inline double blip_addon(const Eigen::VectorXd& gamma_star, const Eigen::VectorXd& q) {
  if (gamma_star.size() != q.size() + 1) throw std::invalid_argument("blip_addon: dimension mismatch");
  return gamma_star(0) + gamma_star.tail(q.size()).dot(q);
}

/// Argmax over {0, b_v, b_v + b_va}; ties go to the lesser intervention.
inline StrategyCode decide(double b_v, double b_va) {
  StrategyCode best{0, 0};
  double value = 0.0;
  if (b_v > value) {
    best = {1, 0};
    value = b_v;
  }
  if (b_v + b_va > value) best = {1, 1};
  return best;
}

struct StageFit {
  int t = 0;
  std::vector<std::string> beta_names, gamma_names, gamma_star_names;
  Eigen::VectorXd beta, gamma, gamma_star;
  glm::FitResult<double> fit;
  int rows = 0;
  double weight_sum = 0;
  int clipped = 0;
};

enum class Method { woma, qloma };
std::string to_string(Method m);
Method method_from_string(const std::string& s);

struct FittedRegime {
  std::vector<StageFit> stages;  // ascending t
  Method method = Method::woma;
  WeightKind weight_kind = WeightKind::overlap;
  bool ipcw = false;
  int pooled_from = 1;
  BlipSpec spec;

  const StageFit& stage(int t) const;
  std::optional<std::size_t> find_stage(int t) const;
};

/// Stage regression rows: in study at `t` with a finite outcome.
glm::DesignMatrix<double> stage_design(const Cohort& cohort, int t, const BlipSpec& spec, const std::vector<int>& rows);

/// Blip values of `fit` for `subject` at its stage. Throws if a modifier is
/// unavailable.
std::array<double, 2> stage_blips(const StageFit& fit, const BlipSpec& spec, const Cohort& cohort, int subject);

/// `pseudo_y` has one entry per subject, NaN for subjects without an
/// outcome. `w` (if given) supplies the weight column at `t`.
StageFit fit_stage(const Cohort& cohort, int t, const Eigen::VectorXd& pseudo_y, const BlipSpec& spec,
                   const WeightVector* w = nullptr, const glm::WlsOptions& wls = {});

/// y + sum over later stages of [max(0, b_v, b_v + b_va) - (dN b_v + dN A b_va)].
Eigen::VectorXd pseudo_outcome(const Eigen::VectorXd& y, const std::vector<StageFit>& later, const Cohort& cohort,
                               const BlipSpec& spec);

/// Final outcome per subject, NaN for the censored.
Eigen::VectorXd final_outcome(const Cohort& cohort);

struct RegimeOptions {
  Method method = Method::woma;
  WeightKind weight_kind = WeightKind::overlap;  // overlap | ipt
  PropensitySource propensity = PropensitySource::joint;
  std::vector<Term> propensity_covariates;       // joint / visit model
  std::vector<Term> addon_covariates;            // factorized add-on model
  std::optional<Truncation> ipt_truncation;
  const WeightVector* ipcw = nullptr;
  bool override_positivity = false;
  double positivity_floor = 0.01;
  glm::WlsOptions wls;
};

/// Raised when a stage fails; carries the stages already fitted.
class StageFailure : public std::runtime_error {
 public:
  StageFailure(const std::string& what, int stage, std::vector<StageFit> partial)
      : std::runtime_error(what), stage(stage), partial(std::move(partial)) {}
  int stage;
  std::vector<StageFit> partial;
};

/// Propensities for `t` according to `opt`.
PropensityEstimates stage_propensities(const Cohort& cohort, int t, const RegimeOptions& opt);

/// Treatment weights at `t` (overlap or IPT) from `pe`.
WeightVector treatment_weights(const Cohort& cohort, const PropensityEstimates& pe, const RegimeOptions& opt);

FittedRegime fit_regime(const Cohort& cohort, const BlipSpec& spec, const RegimeOptions& opt);

struct StageDecisions {
  int t = 0;
  std::vector<std::optional<StrategyCode>> optimal;  // per subject; empty when not in study
  std::array<std::array<int, 3>, 3> table{};         // [received][optimal]
  int total() const;
};

std::vector<StageDecisions> apply_regime(const FittedRegime& regime, const Cohort& cohort);

/// Two-step M-estimator covariance for a single-stage fit whose weights come
/// from the joint multinomial `pe` (or unit weights when `kind` is none).
/// Returns Cov(theta) = Sigma / n over the stage coefficients, in design
/// column order.
Eigen::MatrixXd sandwich_variance_one_stage(const Cohort& cohort, const BlipSpec& spec, const StageFit& fit,
                                            const PropensityEstimates* pe, WeightKind kind);

void write_regime(const FittedRegime& regime, const std::filesystem::path& path);
FittedRegime read_regime(const std::filesystem::path& path);
std::string regime_to_json(const FittedRegime& regime);
FittedRegime regime_from_json(const std::string& text);

}  // namespace dmar
