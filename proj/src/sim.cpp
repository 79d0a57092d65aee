#include "dmar/sim.hpp"

#include "dmar/parallel.hpp"
#include "dmar/random.hpp"

#include <cmath>

namespace dmar::sim {

namespace {

double expit(double x) { return 1.0 / (1.0 + std::exp(-x)); }

enum Col { kDN = 0, kA, kXi, kK1, kK2, kY, kA0, kYFinal };

// Stream tags keep the censoring draws independent of the trajectory draws.
constexpr std::uint64_t kTrajectoryStream = 0;
constexpr std::uint64_t kCensoringStream = 1;

struct Shocks {
  double K10, K20, Y0, uA0;
  double eK11, eK21, eY1, ud1, ua1;
  double eK12, eK22, eY2, ud2, ua2;
  double eY3;
};

Shocks draw_shocks(std::mt19937_64& rng) {
  std::normal_distribution<double> z(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Shocks s{};
  s.K10 = z(rng);
  s.K20 = z(rng);
  s.Y0 = z(rng);
  s.uA0 = u(rng);
  s.eK11 = z(rng);
  s.eK21 = z(rng);
  s.eY1 = z(rng);
  s.ud1 = u(rng);
  s.ua1 = u(rng);
  s.eK12 = z(rng);
  s.eK22 = z(rng);
  s.eY2 = z(rng);
  s.ud2 = u(rng);
  s.ua2 = u(rng);
  s.eY3 = z(rng);
  return s;
}

void apply_policy(const Policy& policy, int stage, SubjectState& st) {
  if (!policy) return;
  if (auto r = policy(stage, st)) {
    const auto code = StrategyCode::make(r->visit, r->addon);
    st.dN[static_cast<std::size_t>(stage)] = code.visit;
    st.A[static_cast<std::size_t>(stage)] = code.addon;
  }
}

SubjectState simulate_one(std::uint64_t seed, std::uint64_t subject, const Policy& policy) {
  auto rng = make_stream(derive_seed(seed, kTrajectoryStream), subject);
  const Shocks e = draw_shocks(rng);
  SubjectState st;

  // Baseline.
  const double K10 = 4.0 + 3.0 * e.K10, K20 = 5.0 + 1.4 * e.K20, Y0 = 120.0 + 13.0 * e.Y0;
  const double A0 = e.uA0 < 0.5 ? 1.0 : 0.0;
  st.K1[0] = K10;
  st.K2[0] = K20;
  st.Y[0] = Y0;
  st.A0 = A0;
  st.dN[0] = 1.0;
  st.A[0] = A0;

  // Month 1.
  const double K11 = -23.0 + 0.8 * K10 + 0.2 * Y0 + 0.1 * A0 + 3.0 * e.eK11;
  const double K21 = -43.0 + K20 + 0.2 * Y0 - 0.1 * A0 + 3.0 * e.eK21;
  const double base1 = 0.05 * A0 - 0.005 * Y0 + 0.02 * K10 + 0.02 * A0 * K10 + 0.004 * A0 * Y0 + 0.02 * Y0 * K10;
  const double Y1 = 118.0 + base1 + 3.0 * e.eY1;
  st.K1[1] = K11;
  st.K2[1] = K21;
  st.Y[1] = Y1;
  const double pd1 = expit(-2.0 + 0.3 * K10 - 0.8 * K20 + 0.1 * A0 + 0.02 * Y0);
  const double pa1 = expit(0.4 * K10 - 0.05 * K20 + 0.2 * A0 - 0.04 * Y0);
  st.dN[1] = e.ud1 < pd1 ? 1.0 : 0.0;
  st.A[1] = st.dN[1] == 1.0 && e.ua1 < pa1 ? 1.0 : 0.0;
  apply_policy(policy, 1, st);
  const double d1 = st.dN[1], a1 = st.A[1];

  // Month 2. The constant -0.0005 of the outcome mean is folded into the intercept.
  const double K12 = -26.0 + 0.8 * K11 + 0.2 * Y1 + 0.1 * a1 + 0.1 * d1 + 3.0 * e.eK12;
  const double K22 = -43.0 + K21 + 0.2 * Y1 + 0.1 * a1 - 0.1 * d1 + 3.0 * e.eK22;
  const double hist1 = 0.02 * K11 - 1.4 * a1 * d1 + 0.002 * d1 * Y1 + 0.1 * a1 * d1 * K11 + 0.04 * a1 * d1 * Y1;
  const double Y2 = 121.9995 + base1 + hist1 + K11 * d1 + Y1 + 3.0 * e.eY2;
  st.K1[2] = K12;
  st.K2[2] = K22;
  st.Y[2] = Y2;
  const double pd2 = expit(-18.0 + 0.3 * K11 - 0.8 * K21 + 0.1 * a1 + 0.02 * Y1);
  const double pa2 = expit(0.4 * K11 - 0.05 * K21 + 0.2 * a1 - 0.04 * Y1);
  st.dN[2] = e.ud2 < pd2 ? 1.0 : 0.0;
  st.A[2] = st.dN[2] == 1.0 && e.ua2 < pa2 ? 1.0 : 0.0;
  apply_policy(policy, 2, st);
  const double d2 = st.dN[2], a2 = st.A[2];

  // Month 3 outcome.
  const auto& g = kOutcomeStage2;
  double mu = 134.0 + base1 - 0.6 * K20 + hist1 - 1.5 * K21 - 0.005 * Y1 + 0.18 * K11 * d1;
  mu += -0.005 * Y2 + 0.02 * K12 - 1.5 * K22;
  mu += d2 * (g.dN2 + g.dN2_K1 * K12 + g.dN2_Y * Y2);
  mu += d2 * a2 * (g.dN2A2 + g.dN2A2_K1 * K12 + g.dN2A2_Y * Y2);
  st.Y_final = mu + 3.0 * e.eY3;
  return st;
}

}  // namespace

double SubjectState::get(int column, int t) const {
  const auto k = static_cast<std::size_t>(t);
  if (t < 0 || t > kTau) return kUnset;
  switch (column) {
    case kDN: return t < kTau ? dN[k] : kUnset;
    case kA: return t < kTau ? A[k] : kUnset;
    case kXi: return 1.0;
    case kK1: return t < kTau ? K1[k] : kUnset;
    case kK2: return t < kTau ? K2[k] : kUnset;
    case kY: return t < kTau ? Y[k] : kUnset;
    case kA0: return A0;
    case kYFinal: return t == kTau ? Y_final : kUnset;
    default: return kUnset;
  }
}

std::string to_string(Missingness m) { return m == Missingness::none ? "none" : "mar"; }

std::string to_string(Censoring c) {
  switch (c) {
    case Censoring::none: return "none";
    case Censoring::time_fixed: return "time-fixed";
    case Censoring::time_dependent: return "time-dependent";
  }
  return "none";
}

std::string to_string(ModelSpec m) { return m == ModelSpec::correct ? "correct" : "wrong"; }

Missingness missingness_from_string(const std::string& s) {
  if (s == "none") return Missingness::none;
  if (s == "mar" || s == "MAR") return Missingness::mar;
  throw DataError("unknown missingness '" + s + "'");
}

Censoring censoring_from_string(const std::string& s) {
  if (s == "none") return Censoring::none;
  if (s == "time-fixed" || s == "time_fixed" || s == "fixed") return Censoring::time_fixed;
  if (s == "time-dependent" || s == "time_dependent" || s == "dependent") return Censoring::time_dependent;
  throw DataError("unknown censoring mode '" + s + "'");
}

ModelSpec model_spec_from_string(const std::string& s) {
  if (s == "correct") return ModelSpec::correct;
  if (s == "wrong") return ModelSpec::wrong;
  throw DataError("unknown model specification '" + s + "'");
}

DgmScenario scenario_preset(const std::string& name) {
  DgmScenario s;
  s.name = name;
  if (name == "A") return s;
  if (name == "B") {
    s.missingness = Missingness::mar;
    return s;
  }
  if (name == "C") {
    s.censoring = Censoring::time_fixed;
    return s;
  }
  if (name == "D") {
    s.censoring = Censoring::time_dependent;
    return s;
  }
  throw DataError("unknown scenario '" + name + "' (expected A, B, C or D)");
}

std::vector<SubjectState> simulate(int n, std::uint64_t seed, const Policy& policy, int workers) {
  if (n < 1) throw DataError("cohort size must be at least 1");
  std::vector<SubjectState> out(static_cast<std::size_t>(n));
  constexpr int kChunk = 4096;
  const int chunks = (n + kChunk - 1) / kChunk;
  parallel_for(chunks, workers, [&](int c) {
    const int lo = c * kChunk, hi = std::min(n, lo + kChunk);
    for (int i = lo; i < hi; ++i)
      out[static_cast<std::size_t>(i)] = simulate_one(seed, static_cast<std::uint64_t>(i), policy);
  });
  return out;
}

Cohort to_cohort(const std::vector<SubjectState>& subjects) {
  std::vector<long> ids(subjects.size());
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<long>(i + 1);
  Cohort c(ids, kTau, std::vector<std::string>(kCoreColumns.begin(), kCoreColumns.end()));
  for (std::size_t k = 0; k < subjects.size(); ++k) {
    const auto& s = subjects[k];
    const int i = static_cast<int>(k);
    for (int t = 0; t <= kTau; ++t)
      for (int col = 0; col < static_cast<int>(kCoreColumns.size()); ++col) {
        const double v = s.get(col, t);
        if (!std::isnan(v)) c.set(col, i, t, v);
      }
  }
  return c;
}

Cohort generate_under_policy(const DgmScenario& sc, const Policy& policy) {
  Cohort c = to_cohort(simulate(sc.n, sc.seed, policy, sc.workers));
  if (sc.censoring != Censoring::none) c = apply_censoring(c, sc.censoring, sc.seed);
  if (sc.missingness == Missingness::mar) c = apply_mar_missingness(c);
  return c;
}

Cohort generate_cohort(const DgmScenario& sc) { return generate_under_policy(sc, {}); }

Cohort apply_mar_missingness(const Cohort& in) {
  Cohort c = in;
  const int dn = c.column_index("dN"), k1 = c.column_index("K1"), y = c.column_index("Y");
  for (int i = 0; i < c.n(); ++i)
    for (int t = 1; t < c.tau(); ++t)
      if (c.in_study(i, t) && c.value(dn, i, t) == 0.0) {
        c.clear(k1, i, t);
        c.clear(y, i, t);
      }
  return c;
}

Cohort apply_censoring(const Cohort& in, Censoring mode, std::uint64_t seed) {
  if (mode == Censoring::none) return in;
  Cohort c = in;
  const int xi = c.column_index("xi"), a = c.column_index("A"), y = c.column_index("Y"), k1 = c.column_index("K1"),
            a0 = c.column_index("A0");
  auto cell = [&](int col, int i, int t) {
    if (!has_value(c.flag(col, i, t))) throw DataError("censoring hazard needs an unavailable cell");
    return c.value(col, i, t);
  };
  for (int i = 0; i < c.n(); ++i) {
    if (!c.completer(i)) continue;
    auto rng = make_stream(derive_seed(seed, kCensoringStream), static_cast<std::uint64_t>(i));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int t = 2; t <= c.tau(); ++t) {
      const double draw = u(rng);
      double h = 0;
      if (mode == Censoring::time_fixed) {
        const double A0 = cell(a0, i, 0), Y0 = cell(y, i, 0), K10 = cell(k1, i, 0);
        h = t == 2 ? expit(10.0 - 0.2 * A0 - 0.1 * Y0 + 0.1 * K10) : expit(8.0 + 0.2 * A0 - 0.1 * Y0 + 0.2 * K10);
      } else {
        h = expit(10.0 - 0.2 * cell(a, i, t - 1) - 0.1 * cell(y, i, t - 1) + 0.1 * cell(k1, i, t - 1));
      }
      if (draw < h) {
        c.set(xi, i, t, 0.0);
        break;
      }
    }
  }
  c.apply_censoring_mask();
  return c;
}

Eigen::VectorXd simulate_outcomes(const Policy& policy, int n_eval, std::uint64_t seed, int workers) {
  const auto subjects = simulate(n_eval, seed, policy, workers);
  Eigen::VectorXd y(n_eval);
  for (int i = 0; i < n_eval; ++i) y(i) = subjects[static_cast<std::size_t>(i)].Y_final;
  return y;
}

ValueEstimate value_function(const Policy& policy, int n_eval, std::uint64_t seed, int workers) {
  const Eigen::VectorXd y = simulate_outcomes(policy, n_eval, seed, workers);
  double mean = 0, m2 = 0;
  int k = 0;
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    ++k;
    const double d = y(i) - mean;
    mean += d / k;
    m2 += d * (y(i) - mean);
  }
  ValueEstimate v;
  v.n = n_eval;
  v.mean = mean;
  v.se = k > 1 ? std::sqrt(m2 / (k - 1) / k) : 0.0;
  return v;
}

Policy regime_policy(const FittedRegime& regime) {
  BlipSpec spec = regime.spec;
  spec.stages.clear();
  for (const auto& s : regime.stages) spec.stages.push_back(s.t);
  spec = spec.resolved(std::vector<std::string>(kCoreColumns.begin(), kCoreColumns.end()), kTau);
  auto stages = regime.stages;
  return [spec, stages](int stage, const SubjectState& st) -> std::optional<StrategyCode> {
    for (const auto& fit : stages) {
      if (fit.t != stage) continue;
      auto get = [&](int col, int t) { return st.get(col, t); };
      Eigen::VectorXd qv(static_cast<Eigen::Index>(spec.visit_modifiers.size()));
      Eigen::VectorXd qa(static_cast<Eigen::Index>(spec.addon_modifiers.size()));
      for (std::size_t k = 0; k < spec.visit_modifiers.size(); ++k)
        qv(static_cast<Eigen::Index>(k)) = spec.visit_modifiers[k].evaluate(get, stage, kTau);
      for (std::size_t k = 0; k < spec.addon_modifiers.size(); ++k)
        qa(static_cast<Eigen::Index>(k)) = spec.addon_modifiers[k].evaluate(get, stage, kTau);
      if (qv.hasNaN() || qa.hasNaN()) throw DataError("policy modifiers unavailable at stage " + std::to_string(stage));
      return decide(blip_visit(fit.gamma, qv), blip_addon(fit.gamma_star, qa));
    }
    return std::nullopt;
  };
}

Policy true_stage2_policy() {
  return [](int stage, const SubjectState& st) -> std::optional<StrategyCode> {
    if (stage != 2) return std::nullopt;
    const auto& g = TrueBlipParams::gamma;
    const auto& gs = TrueBlipParams::gamma_star;
    return decide(g[0] + g[1] * st.K1[2] + g[2] * st.Y[2], gs[0] + gs[1] * st.K1[2] + gs[2] * st.Y[2]);
  };
}

std::map<int, std::vector<Term>> treatment_free_preset(ModelSpec spec) {
  const std::string stage1 = "A0@0, K1@0, K2@0, Y@0, A0@0*K1@0, A0@0*Y@0, Y@0*K1@0, K1@1, K2@1, Y@1";
  const std::string stage2 =
      stage1 + ", dN@1, A@1, K1@1*dN@1, dN@1*Y@1, A@1*K1@1, A@1*Y@1, K1@2, K2@2, Y@2";
  std::map<int, std::vector<Term>> out{{1, parse_terms(stage1)}, {2, parse_terms(stage2)}};
  if (spec == ModelSpec::wrong)
    for (auto& [t, terms] : out)
      std::erase_if(terms, [](const Term& term) {
        for (const auto& f : term.factors)
          if (f.column == "K2") return true;
        return false;
      });
  return out;
}

std::vector<Term> modifier_preset() { return parse_terms("K1@t, Y@t"); }

std::vector<Term> propensity_preset(ModelSpec spec) {
  return parse_terms(spec == ModelSpec::correct ? "K1@t-1, K2@t-1, A@t-1, Y@t-1" : "K1@t-1, A@t-1, Y@t-1");
}

std::vector<Term> ipcw_preset(Censoring mode) {
  switch (mode) {
    case Censoring::time_fixed: return parse_terms("A0@0, Y@0, K1@0");
    case Censoring::time_dependent: return parse_terms("A@t-1, Y@t-1, K1@t-1");
    case Censoring::none: break;
  }
  return {};
}

BlipSpec blip_spec_preset(ModelSpec outcome, std::vector<int> stages) {
  BlipSpec spec;
  spec.visit_modifiers = modifier_preset();
  spec.addon_modifiers = modifier_preset();
  spec.treatment_free = treatment_free_preset(outcome);
  spec.stages = std::move(stages);
  return spec;
}

}  // namespace dmar::sim
