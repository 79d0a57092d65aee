#include "dmar/config.hpp"

#include <boost/algorithm/string.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

namespace dmar {

namespace {

// Like ptree::get with a default, but a present value that does not parse is
// an error instead of silently falling back.
template <typename T>
T read(const boost::property_tree::ptree& pt, const std::string& key, T fallback) {
  if (!pt.get_optional<std::string>(key)) return fallback;
  return pt.get<T>(key);
}

std::vector<std::string> names(const std::string& s) {
  std::vector<std::string> parts, out;
  boost::split(parts, s, boost::is_any_of(","));
  for (auto& p : parts) {
    boost::trim(p);
    if (!p.empty()) out.push_back(p);
  }
  return out;
}

std::vector<int> ints(const std::string& s) {
  std::vector<int> out;
  for (const auto& p : names(s)) {
    try {
      out.push_back(std::stoi(p));
    } catch (const std::exception&) {
      throw DataError("config: '" + p + "' is not an integer");
    }
  }
  return out;
}

}  // namespace

std::string to_string(IpcwMode m) {
  switch (m) {
    case IpcwMode::none: return "none";
    case IpcwMode::time_fixed: return "time_fixed";
    case IpcwMode::time_dependent: return "time_dependent";
  }
  return "none";
}

IpcwMode ipcw_mode_from_string(const std::string& s) {
  if (s == "none") return IpcwMode::none;
  if (s == "time_fixed" || s == "time-fixed") return IpcwMode::time_fixed;
  if (s == "time_dependent" || s == "time-dependent") return IpcwMode::time_dependent;
  throw DataError("unknown ipcw mode '" + s + "'");
}

ModelConfig load_model_config(const std::filesystem::path& path) {
  boost::property_tree::ptree pt;
  try {
    boost::property_tree::ini_parser::read_ini(path.string(), pt);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw DataError(std::string("config: ") + e.what());
  }
  ModelConfig m;
  try {
    const auto& model = pt.get_child("model");
    m.spec.stages = ints(model.get<std::string>("stages", "1"));
    m.spec.visit_modifiers = parse_terms(model.get<std::string>("visit_modifiers", ""));
    m.spec.addon_modifiers = parse_terms(model.get<std::string>("addon_modifiers", ""));
    m.spec.default_treatment_free = parse_terms(model.get<std::string>("treatment_free", ""));
    for (const auto& [key, value] : model) {
      if (!key.starts_with("treatment_free_")) continue;
      const auto t = ints(key.substr(std::string("treatment_free_").size()));
      if (t.size() != 1) throw DataError("config: bad key '" + key + "'");
      m.spec.treatment_free[t.front()] = parse_terms(value.data());
    }
    m.propensity = parse_terms(model.get<std::string>("propensity", ""));
    m.addon_covariates = parse_terms(model.get<std::string>("addon_covariates", ""));
    const auto src = model.get<std::string>("propensity_source", "joint");
    if (src != "joint" && src != "factorized") throw DataError("config: propensity_source must be joint or factorized");
    m.propensity_source = src == "joint" ? PropensitySource::joint : PropensitySource::factorized;
    if (auto tr = model.get_optional<std::string>("ipt_truncation")) {
      const auto q = names(*tr);
      if (q.size() != 2) throw DataError("config: ipt_truncation needs two percentiles");
      m.ipt_truncation = Truncation{std::stod(q[0]), std::stod(q[1])};
    }
    m.positivity_floor = read<double>(model, "positivity_floor", m.positivity_floor);
    m.override_positivity = read<bool>(model, "override_positivity", false);
    m.ridge_fallback = read<bool>(model, "ridge_fallback", false);

    m.ipcw = ipcw_mode_from_string(pt.get<std::string>("ipcw.mode", "none"));
    m.ipcw_covariates = parse_terms(pt.get<std::string>("ipcw.covariates", ""));
    m.ipcw_options.stabilized = read<bool>(pt, "ipcw.stabilized", false);
    m.ipcw_options.risk_times = ints(pt.get<std::string>("ipcw.risk_times", ""));
    if (m.ipcw != IpcwMode::none && m.ipcw_covariates.empty())
      throw DataError("config: ipcw.covariates is required when ipcw.mode is set");

    m.roles.confounders = names(pt.get<std::string>("roles.confounders", ""));
    m.roles.visit_covariates = names(pt.get<std::string>("roles.visit_covariates", ""));
    m.roles.visit_modifiers = names(pt.get<std::string>("roles.visit_modifiers", ""));
    m.roles.addon_modifiers = names(pt.get<std::string>("roles.addon_modifiers", ""));
    m.roles.treatment_free = names(pt.get<std::string>("roles.treatment_free", ""));
  } catch (const boost::property_tree::ptree_error& e) {
    throw DataError(std::string("config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw DataError(std::string("config: ") + e.what());
  }
  return m;
}

RegimeOptions ModelConfig::options(Method method, WeightKind kind) const {
  RegimeOptions o;
  o.method = method;
  o.weight_kind = kind;
  o.propensity = propensity_source;
  o.propensity_covariates = propensity;
  o.addon_covariates = addon_covariates;
  o.ipt_truncation = ipt_truncation;
  o.override_positivity = override_positivity;
  o.positivity_floor = positivity_floor;
  o.wls.ridge_fallback = ridge_fallback;
  return o;
}

std::optional<WeightVector> ModelConfig::censoring_weights(const Cohort& cohort) const {
  switch (ipcw) {
    case IpcwMode::none: return std::nullopt;
    case IpcwMode::time_fixed: return ipcw_time_fixed(cohort, ipcw_covariates);
    case IpcwMode::time_dependent: return ipcw_time_dependent(cohort, ipcw_covariates, ipcw_options);
  }
  return std::nullopt;
}

}  // namespace dmar
