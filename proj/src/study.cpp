#include "dmar/study.hpp"

#include "dmar/missing.hpp"
#include "dmar/parallel.hpp"
#include "dmar/random.hpp"

#include "json.hpp"

#include <boost/algorithm/string.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

namespace dmar::study {

namespace {

// Like ptree::get with a default, but a present value that does not parse is
// an error instead of silently falling back.
template <typename T>
T read(const boost::property_tree::ptree& pt, const std::string& key, T fallback) {
  if (!pt.get_optional<std::string>(key)) return fallback;
  return pt.get<T>(key);
}

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// Seed streams derived from the base seed.
constexpr std::uint64_t kReplicationStream = 1;
constexpr std::uint64_t kImputationStream = 2;
constexpr std::uint64_t kValueFitStream = 3;
constexpr std::uint64_t kValueEvalStream = 4;

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> parts;
  boost::split(parts, s, boost::is_any_of(","));
  std::vector<std::string> out;
  for (auto& p : parts) {
    boost::trim(p);
    if (!p.empty()) out.push_back(p);
  }
  return out;
}

Estimate last_stage(const FittedRegime& r) {
  const auto& s = r.stages.back();
  if (s.gamma.size() != 3 || s.gamma_star.size() != 3) throw DataError("study: expected two blip modifiers");
  return {s.gamma(0), s.gamma(1), s.gamma(2), s.gamma_star(0), s.gamma_star(1), s.gamma_star(2)};
}

Estimate truth() {
  const auto& g = sim::TrueBlipParams::gamma;
  const auto& gs = sim::TrueBlipParams::gamma_star;
  return {g[0], g[1], g[2], gs[0], gs[1], gs[2]};
}

}  // namespace

Variant parse_variant(const std::string& label) {
  Variant v;
  v.label = label;
  if (label == "On" || label == "Oc") {
    v.outcome = label == "On" ? sim::ModelSpec::wrong : sim::ModelSpec::correct;
    return v;
  }
  if (label.size() == 5 && label[2] == '-' && label[3] == 'W' && (label.substr(0, 2) == "On" || label.substr(0, 2) == "Oc") &&
      (label[4] == 'c' || label[4] == 'n')) {
    v.outcome = label[1] == 'n' ? sim::ModelSpec::wrong : sim::ModelSpec::correct;
    v.weights = label[4] == 'n' ? sim::ModelSpec::wrong : sim::ModelSpec::correct;
    return v;
  }
  throw DataError("unknown estimator variant '" + label + "' (expected one of On, Oc, On-Wc, Oc-Wn, Oc-Wc, On-Wn)");
}

std::string to_string(MissingMethod m) {
  switch (m) {
    case MissingMethod::none: return "none";
    case MissingMethod::locf: return "locf";
    case MissingMethod::mice: return "mice";
  }
  return "none";
}

MissingMethod missing_method_from_string(const std::string& s) {
  if (s == "none") return MissingMethod::none;
  if (s == "locf") return MissingMethod::locf;
  if (s == "mice" || s == "sequential") return MissingMethod::mice;
  throw DataError("unknown missing-data method '" + s + "'");
}

StudyConfig StudyConfig::load(const std::filesystem::path& path) {
  boost::property_tree::ptree pt;
  try {
    boost::property_tree::ini_parser::read_ini(path.string(), pt);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw DataError(std::string("config: ") + e.what());
  }
  StudyConfig c;
  try {
    c.scenario = sim::scenario_preset(pt.get<std::string>("study.scenario", "A"));
    if (auto m = pt.get_optional<std::string>("scenario.missingness")) c.scenario.missingness = sim::missingness_from_string(*m);
    if (auto m = pt.get_optional<std::string>("scenario.censoring")) c.scenario.censoring = sim::censoring_from_string(*m);
    c.scenario.n = read<int>(pt, "study.n", c.scenario.n);
    c.replications = read<int>(pt, "study.replications", c.replications);
    c.seed = read<std::uint64_t>(pt, "study.seed", c.seed);
    c.workers = read<int>(pt, "study.workers", c.workers);
    if (auto v = pt.get_optional<std::string>("study.variants")) c.variants = split_list(*v);
    if (auto v = pt.get_optional<std::string>("study.weights")) {
      c.weight_kinds.clear();
      for (const auto& k : split_list(*v)) c.weight_kinds.push_back(weight_kind_from_string(k));
    }
    c.missing = missing_method_from_string(pt.get<std::string>("study.missing", "none"));
    c.imputations = read<int>(pt, "study.imputations", c.imputations);
    const auto prop = pt.get<std::string>("study.propensity", "joint");
    if (prop != "joint" && prop != "factorized") throw DataError("config: propensity must be joint or factorized");
    c.propensity = prop == "joint" ? PropensitySource::joint : PropensitySource::factorized;
    if (auto v = pt.get_optional<std::string>("study.stages")) {
      c.stages.clear();
      for (const auto& s : split_list(*v)) c.stages.push_back(std::stoi(s));
    }
    c.ipcw_stabilized = read<bool>(pt, "study.ipcw_stabilized", c.ipcw_stabilized);
    c.output_dir = pt.get<std::string>("study.output", c.output_dir.string());
    c.value_fit_n = read<int>(pt, "value.fit_n", c.value_fit_n);
    c.value_eval_n = read<int>(pt, "value.eval_n", c.value_eval_n);
    if (auto v = pt.get_optional<std::string>("value.variants")) c.value_variants = split_list(*v);
  } catch (const boost::property_tree::ptree_error& e) {
    throw DataError(std::string("config: ") + e.what());
  } catch (const std::logic_error& e) {
    throw DataError(std::string("config: bad number (") + e.what() + ")");
  }
  c.validate();
  return c;
}

void StudyConfig::validate() const {
  if (replications < 1) throw DataError("config: replications must be at least 1");
  if (scenario.n < 10) throw DataError("config: n must be at least 10");
  if (variants.empty()) throw DataError("config: no estimator variants");
  for (const auto& v : variants) parse_variant(v);
  for (const auto& v : value_variants) parse_variant(v);
  for (auto k : weight_kinds)
    if (k != WeightKind::overlap && k != WeightKind::ipt) throw DataError("config: weights must be overlap or ipt");
  if (missing == MissingMethod::mice && imputations < 1) throw DataError("config: imputations must be at least 1");
  if (stages.empty()) throw DataError("config: no stages");
}

std::string Column::name() const {
  return kind == WeightKind::none ? variant.label : variant.label + "[" + to_string(kind) + "]";
}

std::vector<Column> study_columns(const StudyConfig& cfg) {
  std::vector<Column> out;
  for (const auto& label : cfg.variants) {
    const auto v = parse_variant(label);
    if (!v.weights) {
      out.push_back({v, WeightKind::none});
      continue;
    }
    for (auto k : cfg.weight_kinds) out.push_back({v, k});
  }
  return out;
}

Column parse_column(const std::string& name) {
  const auto open = name.find('[');
  if (open == std::string::npos) {
    Column c{parse_variant(name), WeightKind::none};
    if (c.variant.weights) throw DataError("column '" + name + "' needs a weight kind");
    return c;
  }
  if (name.back() != ']') throw DataError("malformed column name '" + name + "'");
  Column c{parse_variant(name.substr(0, open)), weight_kind_from_string(name.substr(open + 1, name.size() - open - 2))};
  if (!c.variant.weights) throw DataError("unweighted column '" + name + "' cannot carry a weight kind");
  return c;
}

FittedRegime fit_column(const std::vector<Cohort>& datasets, const StudyConfig& cfg, const Column& column) {
  const auto spec = sim::blip_spec_preset(column.variant.outcome, cfg.stages);
  std::vector<FittedRegime> fits;
  for (const auto& d : datasets) {
    std::optional<WeightVector> ipcw;
    const auto covs = sim::ipcw_preset(cfg.scenario.censoring);
    if (cfg.scenario.censoring == sim::Censoring::time_fixed) ipcw = ipcw_time_fixed(d, covs);
    if (cfg.scenario.censoring == sim::Censoring::time_dependent)
      ipcw = ipcw_time_dependent(d, covs, IpcwOptions{cfg.ipcw_stabilized, {}});
    RegimeOptions opt;
    opt.method = column.variant.method();
    opt.weight_kind = column.kind == WeightKind::none ? WeightKind::overlap : column.kind;
    opt.propensity = cfg.propensity;
    opt.propensity_covariates = sim::propensity_preset(column.variant.weights.value_or(sim::ModelSpec::correct));
    opt.ipcw = ipcw ? &*ipcw : nullptr;
    fits.push_back(fit_regime(d, spec, opt));
  }
  return fits.size() == 1 ? fits.front() : pool_regimes(fits);
}

std::vector<Estimate> estimate_columns(const std::vector<Cohort>& datasets, const StudyConfig& cfg,
                                       const std::vector<Column>& columns) {
  std::vector<Estimate> out;
  for (const auto& col : columns) out.push_back(last_stage(fit_column(datasets, cfg, col)));
  return out;
}

std::vector<Cohort> replicate_datasets(const StudyConfig& cfg, std::uint64_t seed, Replication* record) {
  auto sc = cfg.scenario;
  sc.seed = seed;
  sc.workers = 1;
  Cohort c = sim::generate_cohort(sc);
  if (record) {
    record->censored_fraction = 1.0 - static_cast<double>(c.completers()) / c.n();
    long missing = 0, cells = 0;
    const int k1 = c.column_index("K1");
    for (int i = 0; i < c.n(); ++i)
      for (int t = 1; t < c.tau(); ++t)
        if (c.in_study(i, t)) {
          ++cells;
          missing += has_value(c.flag(k1, i, t)) ? 0 : 1;
        }
    record->missing_fraction = cells ? static_cast<double>(missing) / static_cast<double>(cells) : 0.0;
  }
  switch (cfg.missing) {
    case MissingMethod::none: return {std::move(c)};
    case MissingMethod::locf: return {locf_complete(c)};
    case MissingMethod::mice: {
      ImputationConfig ic;
      ic.m = cfg.imputations;
      ic.seed = derive_seed(seed, kImputationStream);
      ic.workers = 1;
      return sequential_impute(c, ic).datasets;
    }
  }
  return {std::move(c)};
}

StudyBundle run_study(const StudyConfig& cfg) {
  cfg.validate();
  StudyBundle b;
  b.config = cfg;
  b.columns = study_columns(cfg);
  b.replications.resize(static_cast<std::size_t>(cfg.replications));
  parallel_for(cfg.replications, cfg.workers, [&](int r) {
    auto& rep = b.replications[static_cast<std::size_t>(r)];
    rep.index = r;
    rep.seed = derive_seed(cfg.seed, kReplicationStream, static_cast<std::uint64_t>(r));
    try {
      rep.estimates = estimate_columns(replicate_datasets(cfg, rep.seed, &rep), cfg, b.columns);
    } catch (const std::exception& e) {
      rep.ok = false;
      rep.error = e.what();
      rep.estimates.assign(b.columns.size(), Estimate{kNaN, kNaN, kNaN, kNaN, kNaN, kNaN});
    }
  });
  return b;
}

int StudyBundle::aborted() const {
  int a = 0;
  for (const auto& r : replications) a += r.ok ? 0 : 1;
  return a;
}

double StudyBundle::mean_censored_fraction() const {
  double s = 0;
  int k = 0;
  for (const auto& r : replications)
    if (r.ok) {
      s += r.censored_fraction;
      ++k;
    }
  return k ? s / k : kNaN;
}

std::vector<Summary> StudyBundle::summarize() const {
  const Estimate tru = truth();
  std::vector<Summary> out(columns.size());
  for (std::size_t c = 0; c < columns.size(); ++c) {
    auto& s = out[c];
    for (const auto& r : replications)
      if (r.ok) {
        ++s.count;
        for (std::size_t p = 0; p < 6; ++p) s.mean[p] += r.estimates[c][p];
      }
    for (std::size_t p = 0; p < 6; ++p) {
      s.mean[p] = s.count ? s.mean[p] / s.count : kNaN;
      s.bias[p] = s.mean[p] - tru[p];
      double ss = 0;
      for (const auto& r : replications)
        if (r.ok) ss += (r.estimates[c][p] - s.mean[p]) * (r.estimates[c][p] - s.mean[p]);
      s.sd[p] = s.count > 1 ? std::sqrt(ss / (s.count - 1)) : 0.0;
    }
  }
  return out;
}

void emit_bias_table(const StudyBundle& b, std::ostream& out) {
  if (b.replications.empty() || b.columns.empty()) throw DataError("bias table: empty bundle");
  const auto sum = b.summarize();
  out << "block,parameter";
  for (const auto& c : b.columns) out << ',' << c.name();
  out << '\n';
  out.precision(6);
  for (const char* block : {"bias", "sd"})
    for (std::size_t p = 0; p < 6; ++p) {
      out << block << ',' << kParameterLabels[p];
      for (const auto& s : sum) out << ',' << (std::string(block) == "bias" ? s.bias[p] : s.sd[p]);
      out << '\n';
    }
}

void emit_estimates(const StudyBundle& b, std::ostream& out) {
  out << "replication,seed,column,ok";
  for (const auto& p : kParameterLabels) out << ',' << p;
  out << ",censored_fraction\n";
  out.precision(17);
  for (const auto& r : b.replications)
    for (std::size_t c = 0; c < b.columns.size(); ++c) {
      out << r.index << ',' << r.seed << ',' << b.columns[c].name() << ',' << (r.ok ? 1 : 0);
      for (double v : r.estimates[c]) out << ',' << v;
      out << ',' << r.censored_fraction << '\n';
    }
}

void write_bundle(const StudyBundle& b, const std::filesystem::path& path) {
  using nlohmann::json;
  const auto& c = b.config;
  json cfg{{"scenario", c.scenario.name},
           {"n", c.scenario.n},
           {"missingness", sim::to_string(c.scenario.missingness)},
           {"censoring", sim::to_string(c.scenario.censoring)},
           {"replications", c.replications},
           {"seed", c.seed},
           {"missing", to_string(c.missing)},
           {"imputations", c.imputations},
           {"stages", c.stages},
           {"ipcw_stabilized", c.ipcw_stabilized}};
  json cols = json::array();
  for (const auto& col : b.columns) cols.push_back(col.name());
  json reps = json::array();
  for (const auto& r : b.replications) {
    json est = json::array();
    for (const auto& e : r.estimates) {
      json row = json::array();
      for (double v : e) row.push_back(std::isfinite(v) ? json(v) : json(nullptr));
      est.push_back(row);
    }
    reps.push_back({{"index", r.index},
                    {"seed", r.seed},
                    {"ok", r.ok},
                    {"error", r.error},
                    {"censored_fraction", r.censored_fraction},
                    {"missing_fraction", r.missing_fraction},
                    {"estimates", est}});
  }
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << json{{"config", cfg}, {"columns", cols}, {"replications", reps}}.dump(1) << '\n';
}

StudyBundle read_bundle(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read '" + path.string() + "'");
  StudyBundle b;
  try {
    const auto j = nlohmann::json::parse(in);
    const auto& cfg = j.at("config");
    b.config.scenario = sim::scenario_preset(cfg.at("scenario").get<std::string>());
    b.config.scenario.n = cfg.at("n").get<int>();
    b.config.scenario.missingness = sim::missingness_from_string(cfg.at("missingness").get<std::string>());
    b.config.scenario.censoring = sim::censoring_from_string(cfg.at("censoring").get<std::string>());
    b.config.replications = cfg.at("replications").get<int>();
    b.config.seed = cfg.at("seed").get<std::uint64_t>();
    b.config.missing = missing_method_from_string(cfg.at("missing").get<std::string>());
    b.config.imputations = cfg.at("imputations").get<int>();
    b.config.stages = cfg.at("stages").get<std::vector<int>>();
    b.config.ipcw_stabilized = cfg.at("ipcw_stabilized").get<bool>();
    b.config.variants.clear();
    for (const auto& name : j.at("columns")) {
      b.columns.push_back(parse_column(name.get<std::string>()));
      const auto& label = b.columns.back().variant.label;
      if (std::find(b.config.variants.begin(), b.config.variants.end(), label) == b.config.variants.end())
        b.config.variants.push_back(label);
    }
    for (const auto& r : j.at("replications")) {
      Replication rep;
      rep.index = r.at("index").get<int>();
      rep.seed = r.at("seed").get<std::uint64_t>();
      rep.ok = r.at("ok").get<bool>();
      rep.error = r.at("error").get<std::string>();
      rep.censored_fraction = r.at("censored_fraction").get<double>();
      rep.missing_fraction = r.at("missing_fraction").get<double>();
      for (const auto& e : r.at("estimates")) {
        if (e.size() != 6) throw DataError("bundle: estimate rows need 6 entries");
        Estimate est;
        for (std::size_t p = 0; p < 6; ++p) est[p] = e[p].is_null() ? kNaN : e[p].get<double>();
        rep.estimates.push_back(est);
      }
      if (rep.estimates.size() != b.columns.size()) throw DataError("bundle: estimate count differs from columns");
      b.replications.push_back(std::move(rep));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("bundle '" + path.string() + "': " + e.what());
  }
  return b;
}

const ValueRow& ValueReport::row(const std::string& policy) const {
  for (const auto& r : rows)
    if (r.policy == policy) return r;
  throw DataError("value report has no policy '" + policy + "'");
}

ValueReport run_value_study(const StudyConfig& cfg) {
  ValueReport rep;
  rep.fit_n = cfg.value_fit_n;
  rep.eval_n = cfg.value_eval_n;
  StudyConfig fc = cfg;
  fc.scenario.n = cfg.value_fit_n;
  fc.variants = cfg.value_variants;
  fc.stages = {1, 2};
  const auto datasets = replicate_datasets(fc, derive_seed(cfg.seed, kValueFitStream));
  const std::uint64_t eval_seed = derive_seed(cfg.seed, kValueEvalStream);

  const Eigen::VectorXd base = sim::simulate_outcomes({}, cfg.value_eval_n, eval_seed, cfg.workers);
  const double n = static_cast<double>(base.size());
  auto row_for = [&](const std::string& name, const Eigen::VectorXd& y) {
    ValueRow r;
    r.policy = name;
    r.value = y.mean();
    r.se = std::sqrt((y.array() - r.value).square().sum() / (n - 1) / n);
    const Eigen::VectorXd d = y - base;
    r.difference = d.mean();
    r.difference_se = std::sqrt((d.array() - r.difference).square().sum() / (n - 1) / n);
    return r;
  };
  rep.rows.push_back(row_for("observational", base));
  for (const auto& col : study_columns(fc)) {
    const auto regime = fit_column(datasets, fc, col);
    rep.rows.push_back(
        row_for(col.name(), sim::simulate_outcomes(sim::regime_policy(regime), cfg.value_eval_n, eval_seed, cfg.workers)));
  }
  rep.rows.push_back(
      row_for("true-stage2", sim::simulate_outcomes(sim::true_stage2_policy(), cfg.value_eval_n, eval_seed, cfg.workers)));
  return rep;
}

void emit_value_report(const ValueReport& rep, std::ostream& out) {
  out << "policy,value,se,difference,difference_se,fit_n,eval_n\n";
  out.precision(8);
  for (const auto& r : rep.rows)
    out << r.policy << ',' << r.value << ',' << r.se << ',' << r.difference << ',' << r.difference_se << ','
        << rep.fit_n << ',' << rep.eval_n << '\n';
}

}  // namespace dmar::study
