#include "dmar/missing.hpp"

#include "dmar/parallel.hpp"
#include "dmar/random.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace dmar {

namespace {

bool is_design(const std::string& c) {
  return std::find(kDesignColumns.begin(), kDesignColumns.end(), c) != kDesignColumns.end();
}

// Whether column `col` is recorded at time `t` for at least one subject.
bool recorded_at(const Cohort& c, int col, int t) {
  for (int i = 0; i < c.n(); ++i)
    if (has_value(c.flag(col, i, t))) return true;
  return false;
}

std::vector<int> target_columns(const Cohort& c, const std::vector<std::string>& names) {
  std::vector<int> out;
  if (names.empty()) {
    for (std::size_t j = 0; j < c.columns().size(); ++j)
      if (!is_design(c.columns()[j])) out.push_back(static_cast<int>(j));
  } else {
    for (const auto& n : names) {
      if (is_design(n)) throw DataError("design column '" + n + "' cannot be imputed");
      out.push_back(c.column_index(n));
    }
  }
  return out;
}

std::string cell_key(const Cohort& c, int col, int t) {
  return c.columns()[static_cast<std::size_t>(col)] + "@" + std::to_string(t);
}

struct Plan {
  int t;
  int col;
  std::vector<int> observed, missing;
};

// Which (time, column) pairs have gaps among subjects in study.
std::vector<Plan> plan_imputation(const Cohort& c, const std::vector<int>& targets) {
  std::vector<Plan> plans;
  for (int t = 0; t <= c.tau(); ++t)
    for (int col : targets) {
      if (!recorded_at(c, col, t)) continue;
      Plan p{t, col, {}, {}};
      for (int i = 0; i < c.n(); ++i) {
        if (!c.in_study(i, t)) continue;
        (has_value(c.flag(col, i, t)) ? p.observed : p.missing).push_back(i);
      }
      if (p.missing.empty()) continue;
      if (p.observed.empty()) throw DataError("column '" + cell_key(c, col, t) + "' has no observed values");
      plans.push_back(std::move(p));
    }
  return plans;
}

}  // namespace

Cohort locf_complete(const Cohort& in, const std::vector<std::string>& columns) {
  Cohort c = in;
  const auto targets = target_columns(c, columns);
  for (int col : targets) {
    std::vector<bool> recorded(static_cast<std::size_t>(c.tau() + 1));
    for (int t = 0; t <= c.tau(); ++t) recorded[static_cast<std::size_t>(t)] = recorded_at(c, col, t);
    for (int i = 0; i < c.n(); ++i) {
      double last = std::nan("");
      for (int t = 0; t <= c.last_row(i); ++t) {
        if (!recorded[static_cast<std::size_t>(t)] || !c.in_study(i, t)) continue;
        if (has_value(c.flag(col, i, t))) {
          last = c.value(col, i, t);
          continue;
        }
        if (std::isnan(last))
          throw DataError("LOCF: no earlier observation of '" + cell_key(c, col, t) + "' for subject " +
                          std::to_string(c.ids()[static_cast<std::size_t>(i)]));
        c.set(col, i, t, last, CellFlag::imputed_locf);
      }
    }
  }
  return c;
}

namespace {

Cohort impute_once(const Cohort& in, const ImputationConfig& cfg, const std::vector<Plan>& plans, std::uint64_t seed) {
  Cohort c = in;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<bool> predictor_ok(c.columns().size(), true);
  for (std::size_t j = 0; j < c.columns().size(); ++j) {
    const auto& name = c.columns()[j];
    if (name == "xi" || name == "Y_final" ||
        std::find(cfg.excluded_predictors.begin(), cfg.excluded_predictors.end(), name) != cfg.excluded_predictors.end())
      predictor_ok[j] = false;
  }

  for (const auto& plan : plans) {
    const int t = plan.t;
    std::vector<int> rows = plan.observed;
    rows.insert(rows.end(), plan.missing.begin(), plan.missing.end());

    // Candidate predictors: (column, time) pairs complete on `rows`, earlier
    // times first, then fully observed current-time columns.
    std::vector<Eigen::VectorXd> cols;
    std::vector<std::string> names;
    auto consider = [&](int col, int s) {
      if (!predictor_ok[static_cast<std::size_t>(col)]) return;
      if (s == t && col == plan.col) return;
      Eigen::VectorXd v(static_cast<Eigen::Index>(rows.size()));
      for (std::size_t r = 0; r < rows.size(); ++r) {
        if (!has_value(c.flag(col, rows[r], s))) return;
        if (s == t && c.flag(col, rows[r], s) != CellFlag::observed) return;
        v(static_cast<Eigen::Index>(r)) = c.value(col, rows[r], s);
      }
      // Constant on the observed rows (e.g. dN(t) when gaps follow non-visits):
      // not estimable, and absorbed by the intercept.
      const auto nobs = static_cast<Eigen::Index>(plan.observed.size());
      if (nobs == 0 || (v.head(nobs).array() == v(0)).all()) return;
      for (const auto& u : cols)
        if (u == v) return;  // exact duplicate (e.g. a baseline column repeated over time)
      cols.push_back(std::move(v));
      names.push_back(cell_key(c, col, s));
    };
    for (int s = 0; s < t; ++s)
      for (int col = 0; col < static_cast<int>(c.columns().size()); ++col) consider(col, s);
    for (int col = 0; col < static_cast<int>(c.columns().size()); ++col) consider(col, t);

    const auto nobs = static_cast<Eigen::Index>(plan.observed.size());
    glm::DesignMatrix<double> X;
    X.names.push_back("(intercept)");
    X.names.insert(X.names.end(), names.begin(), names.end());
    X.values.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols.size()) + 1);
    X.values.col(0).setOnes();
    for (std::size_t k = 0; k < cols.size(); ++k) X.values.col(static_cast<Eigen::Index>(k) + 1) = cols[k];
    Eigen::VectorXd y(nobs);
    for (Eigen::Index r = 0; r < nobs; ++r) y(r) = c.value(plan.col, rows[static_cast<std::size_t>(r)], t);
    glm::DesignMatrix<double> Xo{X.names, X.values.topRows(nobs)};
    if (nobs <= Xo.cols()) throw DataError("imputation of '" + cell_key(c, plan.col, t) + "': too few observed rows");
    glm::FitResult<double> fit;
    try {
      fit = glm::fit_wls<double>(Xo, y);
    } catch (const glm::RankDeficientError& e) {
      throw DataError("imputation of '" + cell_key(c, plan.col, t) + "': degenerate predictor design (" + e.what() + ")");
    }
    const double sigma = std::sqrt(fit.objective / static_cast<double>(nobs - Xo.cols()));
    const Eigen::VectorXd pred = X.values.bottomRows(static_cast<Eigen::Index>(plan.missing.size())) * fit.coef();
    for (std::size_t r = 0; r < plan.missing.size(); ++r) {
      double v = pred(static_cast<Eigen::Index>(r));
      if (cfg.noise) v += sigma * normal(rng);
      c.set(plan.col, plan.missing[r], t, v, CellFlag::imputed_model);
    }
  }
  return c;
}

}  // namespace

ImputationResult sequential_impute(const Cohort& cohort, const ImputationConfig& cfg) {
  if (cfg.m < 1) throw DataError("imputation count m must be at least 1");
  const auto plans = plan_imputation(cohort, target_columns(cohort, cfg.columns));
  ImputationResult res;
  for (int j = 0; j < cfg.m; ++j) res.manifest.seeds.push_back(derive_seed(cfg.seed, static_cast<std::uint64_t>(j)));
  for (const auto& p : plans) res.manifest.fill_counts[cell_key(cohort, p.col, p.t)] = static_cast<long>(p.missing.size());
  res.datasets.resize(static_cast<std::size_t>(cfg.m));
  parallel_for(cfg.m, cfg.workers, [&](int j) {
    res.datasets[static_cast<std::size_t>(j)] = impute_once(cohort, cfg, plans, res.manifest.seeds[static_cast<std::size_t>(j)]);
  });
  return res;
}

void ImputationManifest::write(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  nlohmann::json j{{"m", seeds.size()}, {"seeds", seeds}, {"fill_counts", fill_counts}};
  out << j.dump(2) << '\n';
}

namespace {

Eigen::VectorXd mean_of(std::vector<const Eigen::VectorXd*> vs) {
  Eigen::VectorXd out(vs.front()->size());
  std::vector<double> col(vs.size());
  for (Eigen::Index k = 0; k < out.size(); ++k) {
    for (std::size_t r = 0; r < vs.size(); ++r) col[r] = (*vs[r])(k);
    std::sort(col.begin(), col.end());  // order-free sum
    double s = 0;
    for (double v : col) s += v;
    out(k) = s / static_cast<double>(vs.size());
  }
  return out;
}

}  // namespace

FittedRegime pool_regimes(const std::vector<FittedRegime>& regimes) {
  if (regimes.empty()) throw DataError("pool_regimes: nothing to pool");
  const auto& first = regimes.front();
  for (const auto& r : regimes) {
    if (r.stages.size() != first.stages.size()) throw DataError("pool_regimes: stage structure differs");
    for (std::size_t s = 0; s < r.stages.size(); ++s) {
      const auto& a = r.stages[s];
      const auto& b = first.stages[s];
      if (a.t != b.t || a.beta_names != b.beta_names || a.gamma_names != b.gamma_names ||
          a.gamma_star_names != b.gamma_star_names)
        throw DataError("pool_regimes: coefficient structure differs at stage " + std::to_string(b.t));
    }
  }
  FittedRegime out = first;
  out.pooled_from = 0;
  for (const auto& r : regimes) out.pooled_from += r.pooled_from;
  for (std::size_t s = 0; s < out.stages.size(); ++s) {
    std::vector<const Eigen::VectorXd*> beta, gamma, gamma_star;
    for (const auto& r : regimes) {
      beta.push_back(&r.stages[s].beta);
      gamma.push_back(&r.stages[s].gamma);
      gamma_star.push_back(&r.stages[s].gamma_star);
    }
    auto& st = out.stages[s];
    st.beta = mean_of(beta);
    st.gamma = mean_of(gamma);
    st.gamma_star = mean_of(gamma_star);
    Eigen::VectorXd all(st.beta.size() + st.gamma.size() + st.gamma_star.size());
    all << st.beta, st.gamma, st.gamma_star;
    st.fit.coefficients = all;
  }
  return out;
}

}  // namespace dmar
