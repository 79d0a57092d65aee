#include "dmar/weights.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace dmar {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::vector<int> at_risk(const Cohort& c, int t) {
  if (t < 1 || t >= c.tau()) throw DataError("decision time " + std::to_string(t) + " outside 1..tau-1");
  std::vector<int> rows;
  for (int i = 0; i < c.n(); ++i)
    if (c.in_study(i, t)) rows.push_back(i);
  if (rows.empty()) throw DataError("nobody in study at t=" + std::to_string(t));
  return rows;
}

double quantile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

}  // namespace

int clip_propensities(Eigen::MatrixXd& e, double floor) {
  int changed = 0;
  for (Eigen::Index i = 0; i < e.rows(); ++i) {
    if (e.row(i).hasNaN()) continue;
    bool touched = false;
    for (Eigen::Index k = 0; k < e.cols(); ++k) {
      const double c = std::clamp(e(i, k), floor, 1.0 - floor);
      if (c != e(i, k)) {
        e(i, k) = c;
        touched = true;
      }
    }
    if (touched) {
      e.row(i) /= e.row(i).sum();
      ++changed;
    }
  }
  return changed;
}

PropensityEstimates estimate_propensities_joint(const Cohort& c, int t, const std::vector<Term>& covariates) {
  PropensityEstimates pe;
  pe.t = t;
  pe.source = PropensitySource::joint;
  pe.rows = at_risk(c, t);
  pe.covariates = resolve_all(covariates, c.columns());
  const auto X = term_matrix(c, pe.rows, t, pe.covariates);
  std::vector<int> y(pe.rows.size());
  for (std::size_t r = 0; r < pe.rows.size(); ++r) y[r] = c.strategy(pe.rows[r], t).index();
  pe.fit = glm::fit_multinomial<double>(X, y, 3);
  const Eigen::MatrixXd p = glm::predict_proba(pe.fit, X);
  pe.e = Eigen::MatrixXd::Constant(c.n(), 3, kNaN);
  for (std::size_t r = 0; r < pe.rows.size(); ++r) pe.e.row(pe.rows[r]) = p.row(static_cast<Eigen::Index>(r));
  pe.clipped = clip_propensities(pe.e);
  return pe;
}

PropensityEstimates estimate_propensities_factorized(const Cohort& c, int t, const std::vector<Term>& visit_covs,
                                                     const std::vector<Term>& addon_covs) {
  PropensityEstimates pe;
  pe.t = t;
  pe.source = PropensitySource::factorized;
  pe.rows = at_risk(c, t);
  pe.covariates = resolve_all(visit_covs, c.columns());
  pe.addon_covariates = resolve_all(addon_covs, c.columns());

  const auto Xv = term_matrix(c, pe.rows, t, pe.covariates);
  Eigen::VectorXd dn(static_cast<Eigen::Index>(pe.rows.size()));
  std::vector<int> visitors;
  for (std::size_t r = 0; r < pe.rows.size(); ++r) {
    const auto s = c.strategy(pe.rows[r], t);
    dn(static_cast<Eigen::Index>(r)) = s.visit;
    if (s.visit) visitors.push_back(pe.rows[r]);
  }
  if (visitors.empty()) throw DataError("no visitors at t=" + std::to_string(t));
  pe.fit = glm::fit_logistic<double>(Xv, dn);

  const auto Xa = term_matrix(c, visitors, t, pe.addon_covariates);
  Eigen::VectorXd a(static_cast<Eigen::Index>(visitors.size()));
  for (std::size_t r = 0; r < visitors.size(); ++r) a(static_cast<Eigen::Index>(r)) = c.strategy(visitors[r], t).addon;
  pe.addon_fit = glm::fit_logistic<double>(Xa, a);

  const Eigen::VectorXd pd = glm::predict_proba(pe.fit, Xv);
  const Eigen::VectorXd pa = glm::predict_proba(pe.addon_fit, term_matrix(c, pe.rows, t, pe.addon_covariates));
  pe.e = Eigen::MatrixXd::Constant(c.n(), 3, kNaN);
  for (std::size_t r = 0; r < pe.rows.size(); ++r) {
    const auto ri = static_cast<Eigen::Index>(r);
    pe.e.row(pe.rows[r]) << 1.0 - pd(ri), pd(ri) * (1.0 - pa(ri)), pd(ri) * pa(ri);
  }
  pe.clipped = clip_propensities(pe.e);
  return pe;
}

Eigen::MatrixXd joint_propensities_at(const Cohort& c, const PropensityEstimates& pe, const Eigen::VectorXd& theta) {
  if (pe.source != PropensitySource::joint) throw DataError("joint_propensities_at: factorized estimates");
  const auto X = term_matrix(c, pe.rows, pe.t, pe.covariates);
  const Eigen::Index p = X.cols();
  const Eigen::MatrixXd B = Eigen::Map<const Eigen::MatrixXd>(theta.data(), p, theta.size() / p);
  const Eigen::MatrixXd prob = glm::detail::softmax_with_reference<double>(X.values * B);
  Eigen::MatrixXd e = Eigen::MatrixXd::Constant(c.n(), 3, kNaN);
  for (std::size_t r = 0; r < pe.rows.size(); ++r) e.row(pe.rows[r]) = prob.row(static_cast<Eigen::Index>(r));
  clip_propensities(e);
  return e;
}

std::string to_string(WeightKind k) {
  switch (k) {
    case WeightKind::none: return "none";
    case WeightKind::overlap: return "overlap";
    case WeightKind::ipt: return "ipt";
    case WeightKind::ipcw: return "ipcw";
    case WeightKind::product: return "product";
  }
  return "none";
}

WeightKind weight_kind_from_string(const std::string& s) {
  for (auto k : {WeightKind::none, WeightKind::overlap, WeightKind::ipt, WeightKind::ipcw, WeightKind::product})
    if (to_string(k) == s) return k;
  throw DataError("unknown weight kind '" + s + "'");
}

WeightVector WeightVector::ones(const Cohort& c) {
  return {WeightKind::none, Eigen::MatrixXd::Ones(c.n(), c.tau() + 1), {}};
}

WeightVector overlap_weights(const Cohort& c, const PropensityEstimates& pe) {
  WeightVector out{WeightKind::overlap, Eigen::MatrixXd::Zero(c.n(), c.tau() + 1), {}};
  for (int i : pe.rows)
    out.w(i, pe.t) = overlap_weight(pe.e(i, 0), pe.e(i, 1), pe.e(i, 2), c.strategy(i, pe.t));
  return out;
}

WeightVector ipt_weights(const Cohort& c, const PropensityEstimates& pe, std::optional<Truncation> truncation) {
  WeightVector out{WeightKind::ipt, Eigen::MatrixXd::Zero(c.n(), c.tau() + 1), {}};
  std::vector<double> all;
  all.reserve(pe.rows.size());
  for (int i : pe.rows) {
    out.w(i, pe.t) = 1.0 / pe.e(i, c.strategy(i, pe.t).index());
    all.push_back(out.w(i, pe.t));
  }
  if (truncation) {
    const double lo = quantile(all, truncation->lower), hi = quantile(all, truncation->upper);
    for (int i : pe.rows) out.w(i, pe.t) = std::clamp(out.w(i, pe.t), lo, hi);
  }
  return out;
}

WeightVector ipcw_time_fixed(const Cohort& c, const std::vector<Term>& baseline_covs) {
  WeightVector out{WeightKind::ipcw, Eigen::MatrixXd::Ones(c.n(), c.tau() + 1), {}};
  const int done = c.completers();
  if (done == c.n()) {
    out.notice = "no censoring; all censoring weights set to 1";
    return out;
  }
  if (done == 0) throw DataError("ipcw: every subject is censored");
  std::vector<int> rows(static_cast<std::size_t>(c.n()));
  for (int i = 0; i < c.n(); ++i) rows[static_cast<std::size_t>(i)] = i;
  const auto terms = resolve_all(baseline_covs, c.columns());
  const auto X = term_matrix(c, rows, 0, terms);
  Eigen::VectorXd y(c.n());
  for (int i = 0; i < c.n(); ++i) y(i) = c.completer(i) ? 0.0 : 1.0;
  const auto fit = glm::fit_logistic<double>(X, y);
  const Eigen::VectorXd p = glm::predict_proba(fit, X);
  for (int i = 0; i < c.n(); ++i)
    out.w.row(i).setConstant(c.completer(i) ? 1.0 / std::max(1.0 - p(i), kPropensityFloor) : 0.0);
  return out;
}

WeightVector ipcw_time_dependent(const Cohort& c, const std::vector<Term>& covs, const IpcwOptions& opt) {
  WeightVector out{WeightKind::ipcw, Eigen::MatrixXd::Ones(c.n(), c.tau() + 1), {}};
  const int done = c.completers();
  if (done == c.n()) {
    out.notice = "no censoring; all censoring weights set to 1";
    return out;
  }
  if (done == 0) throw DataError("ipcw: every subject is censored");
  const int xi = c.column_index("xi");

  std::vector<int> times = opt.risk_times;
  if (times.empty()) {
    for (int t = 1; t <= c.tau(); ++t)
      for (int i = 0; i < c.n(); ++i)
        if (c.in_study(i, t - 1) && c.last_row(i) == t && c.value(xi, i, t) == 0.0) {
          times.push_back(t);
          break;
        }
  }
  const auto terms = resolve_all(covs, c.columns());

  // Person-months at risk: in study at t-1, censored (event) or not at t.
  std::vector<int> subj, when;
  std::vector<double> event;
  for (int t : times)
    for (int i = 0; i < c.n(); ++i)
      if (c.in_study(i, t - 1) && t <= c.last_row(i)) {
        subj.push_back(i);
        when.push_back(t);
        event.push_back(c.value(xi, i, t) == 0.0 ? 1.0 : 0.0);
      }
  const auto m = static_cast<Eigen::Index>(subj.size());
  glm::DesignMatrix<double> X, X0;
  X.names.push_back("(intercept)");
  for (const auto& term : terms) X.names.push_back(term.to_string());
  X.values.resize(m, static_cast<Eigen::Index>(terms.size()) + 1);
  for (Eigen::Index r = 0; r < m; ++r) {
    X.values(r, 0) = 1.0;
    for (std::size_t k = 0; k < terms.size(); ++k) {
      const double v = evaluate(terms[k], c, subj[static_cast<std::size_t>(r)], when[static_cast<std::size_t>(r)]);
      if (std::isnan(v)) throw DataError("ipcw: covariate '" + terms[k].to_string() + "' unavailable");
      X.values(r, static_cast<Eigen::Index>(k) + 1) = v;
    }
  }
  const Eigen::VectorXd y = Eigen::Map<const Eigen::VectorXd>(event.data(), m);
  const auto fit = glm::fit_logistic<double>(X, y);
  const Eigen::VectorXd h = glm::predict_proba(fit, X);
  Eigen::VectorXd h0;
  if (opt.stabilized) {
    X0.names = {"(intercept)"};
    X0.values = Eigen::MatrixXd::Ones(m, 1);
    h0 = glm::predict_proba(glm::fit_logistic<double>(X0, y), X0);
  }

  Eigen::VectorXd surv = Eigen::VectorXd::Ones(c.n()), surv0 = Eigen::VectorXd::Ones(c.n());
  for (Eigen::Index r = 0; r < m; ++r) {
    const int i = subj[static_cast<std::size_t>(r)];
    surv(i) *= 1.0 - h(r);
    if (opt.stabilized) surv0(i) *= 1.0 - h0(r);
  }
  for (int i = 0; i < c.n(); ++i) {
    const double w = c.completer(i) ? surv0(i) / std::max(surv(i), kPropensityFloor) : 0.0;
    out.w.row(i).setConstant(w);
  }
  return out;
}

WeightVector multiply(const WeightVector& a, const WeightVector& b) {
  if (a.w.rows() != b.w.rows() || a.w.cols() != b.w.cols()) throw DataError("weight shapes differ");
  WeightVector out;
  out.w = a.w.cwiseProduct(b.w);
  if (a.kind == WeightKind::none) out.kind = b.kind;
  else if (b.kind == WeightKind::none) out.kind = a.kind;
  else out.kind = WeightKind::product;
  out.notice = a.notice.empty() ? b.notice : a.notice;
  return out;
}

double BalanceTable::max_abs_smd() const {
  double m = 0;
  for (const auto& r : rows)
    for (double s : r.smd) m = std::max(m, std::abs(s));
  return m;
}

BalanceTable balance_diagnostics(const Cohort& c, int t, const WeightVector& w, const std::vector<Term>& covariates) {
  const auto rows = at_risk(c, t);
  const auto terms = resolve_all(covariates, c.columns());
  const auto X = term_matrix(c, rows, t, terms, false);
  BalanceTable table;
  table.t = t;
  for (std::size_t k = 0; k < terms.size(); ++k) {
    BalanceRow br;
    br.covariate = terms[k].label(t);
    std::array<double, 3> sw{}, sx{}, sxx{};
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const double wi = w(rows[r], t);
      if (!(wi > 0)) continue;
      const auto g = static_cast<std::size_t>(c.strategy(rows[r], t).index());
      const double x = X.values(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k));
      sw[g] += wi;
      sx[g] += wi * x;
    }
    for (std::size_t g = 0; g < 3; ++g) {
      if (sw[g] <= 0) throw DataError("balance: empty strategy group " + to_string(StrategyCode::from_index(static_cast<int>(g))) +
                                      " at t=" + std::to_string(t));
      br.mean[g] = sx[g] / sw[g];
    }
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const double wi = w(rows[r], t);
      if (!(wi > 0)) continue;
      const auto g = static_cast<std::size_t>(c.strategy(rows[r], t).index());
      const double d = X.values(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) - br.mean[g];
      sxx[g] += wi * d * d;
    }
    for (std::size_t g = 0; g < 3; ++g) br.sd[g] = std::sqrt(sxx[g] / sw[g]);
    const std::pair<int, int> pairs[3] = {{0, 1}, {0, 2}, {1, 2}};
    for (std::size_t p = 0; p < 3; ++p) {
      const auto a = static_cast<std::size_t>(pairs[p].first), b = static_cast<std::size_t>(pairs[p].second);
      const double pooled = std::sqrt((br.sd[a] * br.sd[a] + br.sd[b] * br.sd[b]) / 2.0);
      br.smd[p] = pooled > 0 ? (br.mean[a] - br.mean[b]) / pooled : 0.0;
    }
    table.rows.push_back(br);
  }
  return table;
}

void write_balance_csv(const BalanceTable& table, std::ostream& out) {
  out << "covariate,group,weighted_mean,weighted_sd,smd_01,smd_02,smd_12\n";
  out.precision(10);
  for (const auto& r : table.rows)
    for (int g = 0; g < 3; ++g)
      out << r.covariate << ',' << (g == 0 ? "00" : g == 1 ? "10" : "11") << ',' << r.mean[static_cast<std::size_t>(g)]
          << ',' << r.sd[static_cast<std::size_t>(g)] << ',' << r.smd[0] << ',' << r.smd[1] << ',' << r.smd[2] << '\n';
}

}  // namespace dmar
