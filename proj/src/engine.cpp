#include "dmar/engine.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

namespace dmar {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

Eigen::VectorXd modifier_values(const std::vector<Term>& terms, const Cohort& c, int subject, int t) {
  Eigen::VectorXd q(static_cast<Eigen::Index>(terms.size()));
  for (std::size_t k = 0; k < terms.size(); ++k) {
    q(static_cast<Eigen::Index>(k)) = evaluate(terms[k], c, subject, t);
    if (std::isnan(q(static_cast<Eigen::Index>(k))))
      throw DataError("modifier '" + terms[k].label(t) + "' unavailable for subject " +
                      std::to_string(c.ids()[static_cast<std::size_t>(subject)]));
  }
  return q;
}

std::vector<int> stage_rows(const Cohort& c, int t, const Eigen::VectorXd& y, const WeightVector* w) {
  std::vector<int> rows;
  for (int i = 0; i < c.n(); ++i)
    if (c.in_study(i, t) && std::isfinite(y(i)) && (w == nullptr || (*w)(i, t) > 0)) rows.push_back(i);
  return rows;
}

}  // namespace

const std::vector<Term>& BlipSpec::treatment_free_at(int t) const {
  auto it = treatment_free.find(t);
  return it == treatment_free.end() ? default_treatment_free : it->second;
}

BlipSpec BlipSpec::resolved(const std::vector<std::string>& columns, int tau) const {
  if (stages.empty()) throw DataError("blip specification lists no stages");
  for (std::size_t k = 0; k < stages.size(); ++k) {
    if (stages[k] < 1 || stages[k] >= tau) throw DataError("stage " + std::to_string(stages[k]) + " outside 1..tau-1");
    if (k > 0 && stages[k] <= stages[k - 1]) throw DataError("stages must be strictly increasing");
  }
  BlipSpec out = *this;
  out.visit_modifiers = resolve_all(visit_modifiers, columns);
  out.addon_modifiers = resolve_all(addon_modifiers, columns);
  out.default_treatment_free = resolve_all(default_treatment_free, columns);
  for (auto& [t, terms] : out.treatment_free) terms = resolve_all(terms, columns);
  return out;
}

std::string to_string(Method m) { return m == Method::woma ? "woma" : "qloma"; }

Method method_from_string(const std::string& s) {
  if (s == "woma") return Method::woma;
  if (s == "qloma") return Method::qloma;
  throw DataError("unknown method '" + s + "'");
}

std::optional<std::size_t> FittedRegime::find_stage(int t) const {
  for (std::size_t k = 0; k < stages.size(); ++k)
    if (stages[k].t == t) return k;
  return std::nullopt;
}

const StageFit& FittedRegime::stage(int t) const {
  if (auto k = find_stage(t)) return stages[*k];
  throw DataError("regime has no stage " + std::to_string(t));
}

glm::DesignMatrix<double> stage_design(const Cohort& c, int t, const BlipSpec& spec, const std::vector<int>& rows) {
  const auto& h = spec.treatment_free_at(t);
  glm::DesignMatrix<double> X;
  X.names.push_back("(intercept)");
  for (const auto& term : h) X.names.push_back(term.label(t));
  X.names.push_back("dN");
  for (const auto& q : spec.visit_modifiers) X.names.push_back("dN*" + q.label(t));
  X.names.push_back("dN*A");
  for (const auto& q : spec.addon_modifiers) X.names.push_back("dN*A*" + q.label(t));

  const auto nh = static_cast<Eigen::Index>(h.size()), nv = static_cast<Eigen::Index>(spec.visit_modifiers.size()),
             na = static_cast<Eigen::Index>(spec.addon_modifiers.size());
  X.values = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(rows.size()), 3 + nh + nv + na);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const int i = rows[r];
    const auto ri = static_cast<Eigen::Index>(r);
    X.values(ri, 0) = 1.0;
    for (Eigen::Index k = 0; k < nh; ++k) {
      const double v = evaluate(h[static_cast<std::size_t>(k)], c, i, t);
      if (std::isnan(v))
        throw DataError("treatment-free term '" + h[static_cast<std::size_t>(k)].label(t) +
                        "' unavailable for subject " + std::to_string(c.ids()[static_cast<std::size_t>(i)]));
      X.values(ri, 1 + k) = v;
    }
    const auto s = c.strategy(i, t);
    if (!s.visit) continue;
    const Eigen::Index vb = 1 + nh, ab = vb + 1 + nv;
    X.values(ri, vb) = 1.0;
    X.values.block(ri, vb + 1, 1, nv) = modifier_values(spec.visit_modifiers, c, i, t).transpose();
    if (!s.addon) continue;
    X.values(ri, ab) = 1.0;
    X.values.block(ri, ab + 1, 1, na) = modifier_values(spec.addon_modifiers, c, i, t).transpose();
  }
  return X;
}

std::array<double, 2> stage_blips(const StageFit& fit, const BlipSpec& spec, const Cohort& c, int subject) {
  return {blip_visit(fit.gamma, modifier_values(spec.visit_modifiers, c, subject, fit.t)),
          blip_addon(fit.gamma_star, modifier_values(spec.addon_modifiers, c, subject, fit.t))};
}

StageFit fit_stage(const Cohort& c, int t, const Eigen::VectorXd& y, const BlipSpec& spec, const WeightVector* w,
                   const glm::WlsOptions& wls) {
  if (y.size() != c.n()) throw DataError("fit_stage: outcome length does not match cohort size");
  const auto rows = stage_rows(c, t, y, w);
  if (rows.empty()) throw DataError("fit_stage: no usable rows at t=" + std::to_string(t));
  const auto X = stage_design(c, t, spec, rows);
  Eigen::VectorXd yy(static_cast<Eigen::Index>(rows.size())), ww;
  for (std::size_t r = 0; r < rows.size(); ++r) yy(static_cast<Eigen::Index>(r)) = y(rows[r]);
  if (w) {
    ww.resize(yy.size());
    for (std::size_t r = 0; r < rows.size(); ++r) ww(static_cast<Eigen::Index>(r)) = (*w)(rows[r], t);
  }

  StageFit out;
  out.t = t;
  out.fit = glm::fit_wls<double>(X, yy, ww, wls);
  out.rows = static_cast<int>(rows.size());
  out.weight_sum = w ? ww.sum() : static_cast<double>(rows.size());
  const auto nh = static_cast<Eigen::Index>(spec.treatment_free_at(t).size()) + 1;
  const auto nv = static_cast<Eigen::Index>(spec.visit_modifiers.size()) + 1;
  const auto na = static_cast<Eigen::Index>(spec.addon_modifiers.size()) + 1;
  const Eigen::VectorXd b = out.fit.coef();
  out.beta = b.head(nh);
  out.gamma = b.segment(nh, nv);
  out.gamma_star = b.segment(nh + nv, na);
  out.beta_names.assign(X.names.begin(), X.names.begin() + nh);
  out.gamma_names.assign(X.names.begin() + nh, X.names.begin() + nh + nv);
  out.gamma_star_names.assign(X.names.begin() + nh + nv, X.names.end());
  return out;
}

Eigen::VectorXd pseudo_outcome(const Eigen::VectorXd& y, const std::vector<StageFit>& later, const Cohort& c,
                               const BlipSpec& spec) {
  Eigen::VectorXd out = y;
  for (int i = 0; i < c.n(); ++i) {
    if (!std::isfinite(y(i))) continue;
    for (const auto& fit : later) {
      if (!c.in_study(i, fit.t)) continue;
      const auto [bv, bva] = stage_blips(fit, spec, c, i);
      const auto s = c.strategy(i, fit.t);
      const double best = std::max({0.0, bv, bv + bva});
      out(i) += best - (s.visit * bv + s.visit * s.addon * bva);
    }
  }
  return out;
}

Eigen::VectorXd final_outcome(const Cohort& c) {
  const int yf = c.column_index("Y_final");
  Eigen::VectorXd y(c.n());
  for (int i = 0; i < c.n(); ++i)
    y(i) = c.completer(i) && has_value(c.flag(yf, i, c.tau())) ? c.value(yf, i, c.tau()) : kNaN;
  return y;
}

PropensityEstimates stage_propensities(const Cohort& c, int t, const RegimeOptions& opt) {
  if (opt.propensity == PropensitySource::joint) return estimate_propensities_joint(c, t, opt.propensity_covariates);
  const auto& addon = opt.addon_covariates.empty() ? opt.propensity_covariates : opt.addon_covariates;
  return estimate_propensities_factorized(c, t, opt.propensity_covariates, addon);
}

WeightVector treatment_weights(const Cohort& c, const PropensityEstimates& pe, const RegimeOptions& opt) {
  switch (opt.weight_kind) {
    case WeightKind::overlap: return overlap_weights(c, pe);
    case WeightKind::ipt: return ipt_weights(c, pe, opt.ipt_truncation);
    default: throw DataError("treatment weights must be overlap or ipt, got " + to_string(opt.weight_kind));
  }
}

FittedRegime fit_regime(const Cohort& c, const BlipSpec& spec_in, const RegimeOptions& opt) {
  const BlipSpec spec = spec_in.resolved(c.columns(), c.tau());
  if (!opt.override_positivity) {
    const auto diag = validate_cohort(c, opt.positivity_floor);
    for (const auto& w : diag.warnings)
      if (std::find(spec.stages.begin(), spec.stages.end(), w.t) != spec.stages.end()) {
        std::ostringstream msg;
        msg << "positivity check failed: strategy " << to_string(w.strategy) << " has share " << w.proportion
            << " at t=" << w.t << " (floor " << opt.positivity_floor << ")";
        throw DataError(msg.str());
      }
  }
  FittedRegime regime;
  regime.method = opt.method;
  regime.weight_kind = opt.method == Method::woma ? opt.weight_kind : WeightKind::none;
  regime.ipcw = opt.ipcw != nullptr;
  regime.spec = spec_in;

  const Eigen::VectorXd y = final_outcome(c);
  std::vector<StageFit> fitted;  // ascending
  for (auto it = spec.stages.rbegin(); it != spec.stages.rend(); ++it) {
    const int t = *it;
    try {
      const Eigen::VectorXd py = pseudo_outcome(y, fitted, c, spec);
      std::optional<WeightVector> w;
      int clipped = 0;
      if (opt.method == Method::woma) {
        const auto pe = stage_propensities(c, t, opt);
        clipped = pe.clipped;
        w = treatment_weights(c, pe, opt);
        if (opt.ipcw) w = multiply(*w, *opt.ipcw);
      } else if (opt.ipcw) {
        w = *opt.ipcw;
      }
      auto fit = fit_stage(c, t, py, spec, w ? &*w : nullptr, opt.wls);
      fit.clipped = clipped;
      fitted.insert(fitted.begin(), std::move(fit));
    } catch (const std::exception& e) {
      throw StageFailure("stage " + std::to_string(t) + ": " + e.what(), t, fitted);
    }
  }
  regime.stages = std::move(fitted);
  return regime;
}

int StageDecisions::total() const {
  int s = 0;
  for (const auto& r : table)
    for (int v : r) s += v;
  return s;
}

std::vector<StageDecisions> apply_regime(const FittedRegime& regime, const Cohort& c) {
  BlipSpec spec = regime.spec;
  spec.stages.clear();
  for (const auto& s : regime.stages) spec.stages.push_back(s.t);
  spec = spec.resolved(c.columns(), c.tau());
  std::vector<StageDecisions> out;
  for (const auto& fit : regime.stages) {
    StageDecisions d;
    d.t = fit.t;
    d.optimal.assign(static_cast<std::size_t>(c.n()), std::nullopt);
    for (int i = 0; i < c.n(); ++i) {
      if (!c.in_study(i, fit.t)) continue;
      const auto [bv, bva] = stage_blips(fit, spec, c, i);
      const auto best = decide(bv, bva);
      d.optimal[static_cast<std::size_t>(i)] = best;
      ++d.table[static_cast<std::size_t>(c.strategy(i, fit.t).index())][static_cast<std::size_t>(best.index())];
    }
    out.push_back(std::move(d));
  }
  return out;
}

Eigen::MatrixXd sandwich_variance_one_stage(const Cohort& c, const BlipSpec& spec_in, const StageFit& fit,
                                            const PropensityEstimates* pe, WeightKind kind) {
  const BlipSpec spec = spec_in.resolved(c.columns(), c.tau());
  const int t = fit.t;
  const Eigen::VectorXd y = final_outcome(c);
  const bool weighted = kind == WeightKind::overlap || kind == WeightKind::ipt;
  if (weighted && (pe == nullptr || pe->source != PropensitySource::joint || pe->t != t))
    throw DataError("sandwich: weighted fits need the joint propensity model of the same stage");

  // Per-subject weights at the propensity parameters `phi`.
  auto weights_at = [&](const Eigen::MatrixXd& e) {
    Eigen::VectorXd w = Eigen::VectorXd::Zero(c.n());
    for (int i : pe->rows) {
      const auto s = c.strategy(i, t);
      w(i) = kind == WeightKind::overlap ? overlap_weight(e(i, 0), e(i, 1), e(i, 2), s) : 1.0 / e(i, s.index());
    }
    return w;
  };

  std::vector<int> rows;
  for (int i = 0; i < c.n(); ++i)
    if (c.in_study(i, t) && std::isfinite(y(i))) rows.push_back(i);
  const auto X = stage_design(c, t, spec, rows);
  const Eigen::VectorXd theta = fit.fit.coef();
  if (theta.size() != X.cols()) throw DataError("sandwich: fit does not match the stage design");
  const Eigen::Index p = X.cols();
  Eigen::VectorXd resid(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t r = 0; r < rows.size(); ++r)
    resid(static_cast<Eigen::Index>(r)) = y(rows[r]) - X.values.row(static_cast<Eigen::Index>(r)).dot(theta);

  // Subjects contributing estimating functions: the propensity risk set for
  // weighted fits, the regression rows otherwise.
  std::vector<int> units = weighted ? pe->rows : rows;
  std::vector<int> pos(static_cast<std::size_t>(c.n()), -1);
  for (std::size_t r = 0; r < rows.size(); ++r) pos[static_cast<std::size_t>(rows[r])] = static_cast<int>(r);
  const double n = static_cast<double>(units.size());

  Eigen::VectorXd w0 = Eigen::VectorXd::Ones(c.n());
  if (weighted) w0 = weights_at(pe->e);

  auto g_sum = [&](const Eigen::VectorXd& w) {
    Eigen::VectorXd s = Eigen::VectorXd::Zero(p);
    for (std::size_t r = 0; r < rows.size(); ++r)
      s += w(rows[r]) * resid(static_cast<Eigen::Index>(r)) * X.values.row(static_cast<Eigen::Index>(r)).transpose();
    return s;
  };

  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(p, p);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto x = X.values.row(static_cast<Eigen::Index>(r));
    A.noalias() -= w0(rows[r]) * x.transpose() * x;
  }
  A /= n;
  // Equilibrated by the diagonal so the rank test ignores column scale.
  const Eigen::VectorXd dscale = A.diagonal().cwiseAbs().cwiseMax(1e-300).cwiseSqrt().cwiseInverse();
  Eigen::FullPivLU<Eigen::MatrixXd> lu(dscale.asDiagonal() * A * dscale.asDiagonal());
  if (!lu.isInvertible()) throw DataError("sandwich: singular derivative of the estimating equations");

  Eigen::MatrixXd U = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(units.size()), p);
  for (std::size_t u = 0; u < units.size(); ++u) {
    const int r = pos[static_cast<std::size_t>(units[u])];
    if (r < 0) continue;
    U.row(static_cast<Eigen::Index>(u)) = w0(units[u]) * resid(r) * X.values.row(r);
  }

  if (weighted) {
    const Eigen::VectorXd phi = Eigen::Map<const Eigen::VectorXd>(pe->fit.coefficients.data(), pe->fit.coefficients.size());
    const Eigen::Index q = phi.size();
    Eigen::MatrixXd Gphi(p, q);
    for (Eigen::Index j = 0; j < q; ++j) {
      const double h = 1e-5 * std::max(1.0, std::abs(phi(j)));
      Eigen::VectorXd up = phi, dn = phi;
      up(j) += h;
      dn(j) -= h;
      Gphi.col(j) = (g_sum(weights_at(joint_propensities_at(c, *pe, up))) -
                     g_sum(weights_at(joint_propensities_at(c, *pe, dn)))) / (2.0 * h * n);
    }
    const auto Xp = term_matrix(c, pe->rows, t, pe->covariates);
    std::vector<int> strat(pe->rows.size());
    for (std::size_t r = 0; r < pe->rows.size(); ++r) strat[r] = c.strategy(pe->rows[r], t).index();
    const Eigen::VectorXd ones = Eigen::VectorXd::Ones(Xp.rows());
    const Eigen::MatrixXd m = glm::multinomial_scores<double>(Xp.values, strat, ones, pe->fit.coefficients);
    const Eigen::MatrixXd M = -glm::multinomial_information<double>(Xp.values, ones, pe->fit.coefficients) / n;
    const Eigen::MatrixXd correction = Gphi * M.ldlt().solve(m.transpose());  // p x n
    U -= correction.transpose();
  }

  const Eigen::MatrixXd B = U.transpose() * U / n;
  const Eigen::MatrixXd Ainv = dscale.asDiagonal() * lu.inverse() * dscale.asDiagonal();
  Eigen::MatrixXd sigma = Ainv * B * Ainv.transpose();
  sigma = (sigma + sigma.transpose()) / 2.0;
  return sigma / n;
}

// ---------------------------------------------------------------------------
// Regime files
// ---------------------------------------------------------------------------

namespace {

nlohmann::json named(const std::vector<std::string>& names, const Eigen::VectorXd& v) {
  return {{"names", names}, {"values", std::vector<double>(v.data(), v.data() + v.size())}};
}

void unnamed(const nlohmann::json& j, std::vector<std::string>& names, Eigen::VectorXd& v) {
  names = j.at("names").get<std::vector<std::string>>();
  const auto vals = j.at("values").get<std::vector<double>>();
  if (vals.size() != names.size()) throw DataError("regime file: names and values differ in length");
  v = Eigen::Map<const Eigen::VectorXd>(vals.data(), static_cast<Eigen::Index>(vals.size()));
}

}  // namespace

std::string regime_to_json(const FittedRegime& r) {
  nlohmann::json spec{{"visit_modifiers", join_terms(r.spec.visit_modifiers)},
                      {"addon_modifiers", join_terms(r.spec.addon_modifiers)},
                      {"default_treatment_free", join_terms(r.spec.default_treatment_free)},
                      {"stages", r.spec.stages}};
  nlohmann::json tf = nlohmann::json::object();
  for (const auto& [t, terms] : r.spec.treatment_free) tf[std::to_string(t)] = join_terms(terms);
  spec["treatment_free"] = tf;
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& s : r.stages)
    stages.push_back({{"t", s.t},
                      {"beta", named(s.beta_names, s.beta)},
                      {"gamma", named(s.gamma_names, s.gamma)},
                      {"gamma_star", named(s.gamma_star_names, s.gamma_star)},
                      {"rows", s.rows},
                      {"weight_sum", s.weight_sum},
                      {"clipped", s.clipped}});
  nlohmann::json j{{"method", to_string(r.method)},
                   {"weight_kind", to_string(r.weight_kind)},
                   {"ipcw", r.ipcw},
                   {"pooled_from", r.pooled_from},
                   {"spec", spec},
                   {"stages", stages}};
  return j.dump(2);
}

FittedRegime regime_from_json(const std::string& text) {
  FittedRegime r;
  try {
    const auto j = nlohmann::json::parse(text);
    r.method = method_from_string(j.at("method").get<std::string>());
    r.weight_kind = weight_kind_from_string(j.at("weight_kind").get<std::string>());
    r.ipcw = j.at("ipcw").get<bool>();
    r.pooled_from = j.value("pooled_from", 1);
    const auto& spec = j.at("spec");
    r.spec.visit_modifiers = parse_terms(spec.at("visit_modifiers").get<std::string>());
    r.spec.addon_modifiers = parse_terms(spec.at("addon_modifiers").get<std::string>());
    r.spec.default_treatment_free = parse_terms(spec.at("default_treatment_free").get<std::string>());
    r.spec.stages = spec.at("stages").get<std::vector<int>>();
    for (const auto& [k, v] : spec.at("treatment_free").items())
      r.spec.treatment_free[std::stoi(k)] = parse_terms(v.get<std::string>());
    for (const auto& s : j.at("stages")) {
      StageFit f;
      f.t = s.at("t").get<int>();
      unnamed(s.at("beta"), f.beta_names, f.beta);
      unnamed(s.at("gamma"), f.gamma_names, f.gamma);
      unnamed(s.at("gamma_star"), f.gamma_star_names, f.gamma_star);
      f.rows = s.value("rows", 0);
      f.weight_sum = s.value("weight_sum", 0.0);
      f.clipped = s.value("clipped", 0);
      if (f.gamma.size() != static_cast<Eigen::Index>(r.spec.visit_modifiers.size()) + 1 ||
          f.gamma_star.size() != static_cast<Eigen::Index>(r.spec.addon_modifiers.size()) + 1)
        throw DataError("regime file: blip coefficients do not match the modifiers");
      r.stages.push_back(std::move(f));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("regime file: ") + e.what());
  }
  return r;
}

void write_regime(const FittedRegime& regime, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << regime_to_json(regime) << '\n';
}

FittedRegime read_regime(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return regime_from_json(ss.str());
}

}  // namespace dmar
