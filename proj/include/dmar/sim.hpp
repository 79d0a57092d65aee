// Two-stage simulation of a monitored cohort (times 0..3, decisions at
// months 1 and 2, outcome at month 3) with optional MAR removal of tailoring
// variables, censoring, counterfactual generation under a policy and
// Monte Carlo value evaluation.
#pragma once

#include "dmar/engine.hpp"
#include "dmar/panel.hpp"
#include "dmar/terms.hpp"

#include <array>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace dmar::sim {

inline constexpr int kTau = 3;

enum class Missingness { none, mar };
enum class Censoring { none, time_fixed, time_dependent };
enum class ModelSpec { correct, wrong };

std::string to_string(Missingness m);
std::string to_string(Censoring c);
std::string to_string(ModelSpec m);
Missingness missingness_from_string(const std::string& s);
Censoring censoring_from_string(const std::string& s);
ModelSpec model_spec_from_string(const std::string& s);

struct DgmScenario {
  std::string name = "A";
  int n = 50000;
  std::uint64_t seed = 1;
  Missingness missingness = Missingness::none;
  Censoring censoring = Censoring::none;
  ModelSpec outcome_model = ModelSpec::correct;
  ModelSpec weight_model = ModelSpec::correct;
  int workers = 0;
};

/// A: complete data. B: MAR tailoring variables. C: time-fixed censoring.
/// D: time-dependent censoring.
DgmScenario scenario_preset(const std::string& name);

/// Stage-2 blip coefficients of the month-3 outcome model, on (1, K1(2), Y(2)).
struct TrueBlipParams {
  static constexpr std::array<double, 3> gamma{1.0, 1.0, 0.01};
  static constexpr std::array<double, 3> gamma_star{1.5, -1.2, 0.01};
};

/// Terms of the month-3 outcome model that involve the stage-2 strategy.
struct OutcomeStage2Coefficients {
  double dN2 = 1.0, dN2_K1 = 1.0, dN2_Y = 0.01;
  double dN2A2 = 1.5, dN2A2_K1 = -1.2, dN2A2_Y = 0.01;
};
inline constexpr OutcomeStage2Coefficients kOutcomeStage2{};

static_assert(kOutcomeStage2.dN2 == TrueBlipParams::gamma[0] && kOutcomeStage2.dN2_K1 == TrueBlipParams::gamma[1] &&
              kOutcomeStage2.dN2_Y == TrueBlipParams::gamma[2]);
static_assert(kOutcomeStage2.dN2A2 == TrueBlipParams::gamma_star[0] &&
              kOutcomeStage2.dN2A2_K1 == TrueBlipParams::gamma_star[1] &&
              kOutcomeStage2.dN2A2_Y == TrueBlipParams::gamma_star[2]);

/// One subject's trajectory, indexed by time 0..3. Cells not generated yet
/// hold NaN.
struct SubjectState {
  static constexpr double kUnset = std::numeric_limits<double>::quiet_NaN();
  std::array<double, 4> K1{kUnset, kUnset, kUnset, kUnset}, K2 = K1, Y = K1, dN = K1, A = K1;
  double A0 = kUnset;
  double Y_final = kUnset;

  /// Cell accessor in kCoreColumns order (dN, A, xi, K1, K2, Y, A0, Y_final).
  double get(int column, int t) const;
};

/// Returns the strategy to impose at `stage`, or nullopt to keep the
/// observational draw.
using Policy = std::function<std::optional<StrategyCode>(int stage, const SubjectState&)>;

/// Complete trajectories under `policy` (observational when empty). Subject i
/// always consumes the same random stream, so policies share noise.
std::vector<SubjectState> simulate(int n, std::uint64_t seed, const Policy& policy = {}, int workers = 0);

Cohort to_cohort(const std::vector<SubjectState>& subjects);

/// Generated cohort with the scenario's censoring and missingness applied.
Cohort generate_cohort(const DgmScenario& scenario);

Cohort generate_under_policy(const DgmScenario& scenario, const Policy& policy);

/// Removes K1(t) and Y(t) wherever dN(t) = 0, t >= 1.
Cohort apply_mar_missingness(const Cohort& cohort);

/// Draws censoring at months 2 and 3 and masks everything from the
/// censoring month on.
Cohort apply_censoring(const Cohort& cohort, Censoring mode, std::uint64_t seed);

struct ValueEstimate {
  double mean = 0;
  double se = 0;
  int n = 0;
};

/// Mean final outcome over `n_eval` fresh subjects generated under `policy`.
ValueEstimate value_function(const Policy& policy, int n_eval, std::uint64_t seed, int workers = 0);

/// Per-subject final outcomes under `policy`; subject i shares its noise
/// across policies for the same seed.
Eigen::VectorXd simulate_outcomes(const Policy& policy, int n_eval, std::uint64_t seed, int workers = 0);

/// Decides with the regime's blips on the subject's true modifiers at the
/// regime's stages; other stages stay observational.
Policy regime_policy(const FittedRegime& regime);

/// True stage-2 blips, observational stage 1.
Policy true_stage2_policy();

// Model presets ------------------------------------------------------------

std::map<int, std::vector<Term>> treatment_free_preset(ModelSpec spec);
std::vector<Term> modifier_preset();
std::vector<Term> propensity_preset(ModelSpec spec);
std::vector<Term> ipcw_preset(Censoring mode);
BlipSpec blip_spec_preset(ModelSpec outcome, std::vector<int> stages = {1, 2});

}  // namespace dmar::sim
