#include "dmar/panel.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>

namespace dmar {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

std::vector<std::string_view> split(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const auto pos = line.find(',', start);
    out.push_back(trim(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

template <typename T>
T parse_number(std::string_view s, long line_no, std::string_view what) {
  T v{};
  const auto* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || p != end)
    throw DataError("malformed CSV at line " + std::to_string(line_no) + ": cannot parse " + std::string(what) +
                    " '" + std::string(s) + "'");
  return v;
}

void append_number(std::string& out, double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  out.append(buf, p);
}

bool is_binary(double v) { return v == 0.0 || v == 1.0; }

}  // namespace

StrategyCode StrategyCode::make(int visit, int addon) {
  if ((visit != 0 && visit != 1) || (addon != 0 && addon != 1))
    throw DataError("strategy indicators must be binary");
  if (addon == 1 && visit == 0) throw DataError("illegal strategy (0,1): add-on without a visit");
  return StrategyCode{static_cast<std::uint8_t>(visit), static_cast<std::uint8_t>(addon)};
}

StrategyCode StrategyCode::from_index(int k) {
  switch (k) {
    case 0: return {0, 0};
    case 1: return {1, 0};
    case 2: return {1, 1};
    default: throw DataError("strategy index out of range: " + std::to_string(k));
  }
}

std::string to_string(StrategyCode s) {
  return "(" + std::to_string(s.visit) + "," + std::to_string(s.addon) + ")";
}

std::vector<std::string> ColumnRoleMap::all() const {
  std::vector<std::string> out;
  for (const auto* v : {&confounders, &visit_covariates, &visit_modifiers, &addon_modifiers, &treatment_free})
    out.insert(out.end(), v->begin(), v->end());
  return out;
}

std::vector<std::string> ColumnRoleMap::modifiers() const {
  std::vector<std::string> out = visit_modifiers;
  for (const auto& c : addon_modifiers)
    if (std::find(out.begin(), out.end(), c) == out.end()) out.push_back(c);
  return out;
}

// ---------------------------------------------------------------------------
// Cohort
// ---------------------------------------------------------------------------

Cohort::Cohort(std::vector<long> ids, int tau, std::vector<std::string> columns)
    : ids_(std::move(ids)), tau_(tau), columns_(std::move(columns)) {
  if (tau_ < 2) throw DataError("tau must be at least 2");
  for (auto core : kCoreColumns)
    if (std::find(columns_.begin(), columns_.end(), core) == columns_.end())
      throw DataError("cohort is missing core column '" + std::string(core) + "'");
  std::set<std::string> seen;
  for (const auto& c : columns_)
    if (!seen.insert(c).second) throw DataError("duplicate column '" + c + "'");
  const auto n = static_cast<Eigen::Index>(ids_.size());
  values_.assign(columns_.size(), Eigen::MatrixXd::Constant(n, tau_ + 1, kNaN));
  flags_.assign(columns_.size(), Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>::Zero(n, tau_ + 1));
  last_row_.assign(ids_.size(), -1);
  xi_col_ = column_index("xi");
  dn_col_ = column_index("dN");
  a_col_ = column_index("A");
}

std::optional<int> Cohort::find_column(std::string_view name) const {
  for (std::size_t j = 0; j < columns_.size(); ++j)
    if (columns_[j] == name) return static_cast<int>(j);
  return std::nullopt;
}

int Cohort::column_index(std::string_view name) const {
  if (auto j = find_column(name)) return *j;
  throw DataError("unknown column '" + std::string(name) + "'");
}

void Cohort::set(int col, int subject, int t, double v, CellFlag f) {
  if (f == CellFlag::missing || std::isnan(v)) {
    clear(col, subject, t);
    return;
  }
  values_[static_cast<std::size_t>(col)](subject, t) = v;
  flags_[static_cast<std::size_t>(col)](subject, t) = static_cast<std::uint8_t>(f);
  if (col == xi_col_ && t > last_row_[static_cast<std::size_t>(subject)]) last_row_[static_cast<std::size_t>(subject)] = t;
}

void Cohort::clear(int col, int subject, int t) {
  values_[static_cast<std::size_t>(col)](subject, t) = kNaN;
  flags_[static_cast<std::size_t>(col)](subject, t) = 0;
  if (col == xi_col_) refresh_rows();
}

bool Cohort::in_study(int subject, int t) const {
  return t <= last_row(subject) && has_value(flag(xi_col_, subject, t)) && value(xi_col_, subject, t) == 1.0;
}

int Cohort::completers() const {
  int c = 0;
  for (int i = 0; i < n(); ++i) c += completer(i) ? 1 : 0;
  return c;
}

StrategyCode Cohort::strategy(int subject, int t) const {
  const double d = value(dn_col_, subject, t), a = value(a_col_, subject, t);
  if (std::isnan(d) || std::isnan(a))
    throw DataError("strategy unavailable for subject " + std::to_string(ids_[static_cast<std::size_t>(subject)]) +
                    " at t=" + std::to_string(t));
  return StrategyCode::make(static_cast<int>(d), static_cast<int>(a));
}

void Cohort::refresh_rows() {
  for (int i = 0; i < n(); ++i) {
    int last = -1;
    for (int t = 0; t <= tau_; ++t)
      if (has_value(flag(xi_col_, i, t))) last = t;
    last_row_[static_cast<std::size_t>(i)] = last;
  }
}

void Cohort::apply_censoring_mask() {
  for (int i = 0; i < n(); ++i) {
    int first_out = -1;
    for (int t = 0; t <= tau_; ++t)
      if (has_value(flag(xi_col_, i, t)) && value(xi_col_, i, t) == 0.0) {
        first_out = t;
        break;
      }
    if (first_out < 0) continue;
    for (int t = first_out; t <= tau_; ++t)
      for (std::size_t c = 0; c < columns_.size(); ++c) {
        if (static_cast<int>(c) == xi_col_ && t == first_out) continue;
        values_[c](i, t) = kNaN;
        flags_[c](i, t) = 0;
      }
    values_[static_cast<std::size_t>(xi_col_)](i, first_out) = 0.0;
    flags_[static_cast<std::size_t>(xi_col_)](i, first_out) = static_cast<std::uint8_t>(CellFlag::observed);
  }
  refresh_rows();
}

long Cohort::row_count() const {
  long r = 0;
  for (int i = 0; i < n(); ++i) r += last_row(i) + 1;
  return r;
}

bool Cohort::operator==(const Cohort& o) const {
  if (ids_ != o.ids_ || tau_ != o.tau_ || columns_ != o.columns_ || last_row_ != o.last_row_) return false;
  for (std::size_t c = 0; c < columns_.size(); ++c) {
    if (flags_[c] != o.flags_[c]) return false;
    for (Eigen::Index i = 0; i < values_[c].rows(); ++i)
      for (Eigen::Index t = 0; t < values_[c].cols(); ++t) {
        const double a = values_[c](i, t), b = o.values_[c](i, t);
        if (std::isnan(a) != std::isnan(b)) return false;
        if (!std::isnan(a) && a != b) return false;
      }
  }
  return true;
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

void check_structure(const Cohort& c, const ColumnRoleMap& roles) {
  for (const auto& name : roles.all())
    if (!c.find_column(name)) throw DataError("unknown column role: '" + name + "' is not a cohort column");
  const int xi = c.column_index("xi"), dn = c.column_index("dN"), a = c.column_index("A"),
            yf = c.column_index("Y_final");
  const auto mods = roles.modifiers();
  std::vector<bool> may_miss(c.columns().size(), mods.empty());
  for (const auto& m : mods) may_miss[static_cast<std::size_t>(c.column_index(m))] = true;
  may_miss[static_cast<std::size_t>(yf)] = true;  // checked separately

  for (int i = 0; i < c.n(); ++i) {
    const long id = c.ids()[static_cast<std::size_t>(i)];
    const int last = c.last_row(i);
    if (last < 0) throw DataError("subject " + std::to_string(id) + " has no rows");
    for (int t = 0; t <= last; ++t) {
      if (!has_value(c.flag(xi, i, t)))
        throw DataError("subject " + std::to_string(id) + ": missing row at t=" + std::to_string(t));
      const double x = c.value(xi, i, t);
      if (!is_binary(x)) throw DataError("xi must be binary");
      if (x == 0.0 && t < last)
        throw DataError("non-monotone censoring for subject " + std::to_string(id) + " at t=" + std::to_string(t));
    }
    if (last < c.tau() && c.value(xi, i, last) != 0.0)
      throw DataError("subject " + std::to_string(id) + " leaves follow-up without a censoring row");
    for (int t = 0; t <= last; ++t) {
      if (!c.in_study(i, t)) continue;
      if (t >= 1 && t < c.tau()) {
        for (int col : {dn, a})
          if (!has_value(c.flag(col, i, t)) || !is_binary(c.value(col, i, t)))
            throw DataError("subject " + std::to_string(id) + ": design column '" + c.columns()[static_cast<std::size_t>(col)] +
                            "' missing or non-binary at t=" + std::to_string(t));
        if (c.value(a, i, t) == 1.0 && c.value(dn, i, t) == 0.0)
          throw DataError("subject " + std::to_string(id) + ": add-on without a visit at t=" + std::to_string(t));
        for (std::size_t col = 0; col < c.columns().size(); ++col)
          if (!may_miss[col] && static_cast<int>(col) != xi && !has_value(c.flag(static_cast<int>(col), i, t)))
            throw DataError("subject " + std::to_string(id) + ": non-modifier column '" + c.columns()[col] +
                            "' missing at t=" + std::to_string(t));
      }
    }
    const bool done = c.completer(i);
    if (done != has_value(c.flag(yf, i, c.tau())))
      throw DataError("subject " + std::to_string(id) + ": final outcome must be present exactly when xi(tau)=1");
  }
}

DiagnosticsReport validate_cohort(const Cohort& c, double floor) {
  DiagnosticsReport rep;
  for (int t = 1; t < c.tau(); ++t) {
    StrategyFrequency f;
    f.t = t;
    for (int i = 0; i < c.n(); ++i) {
      if (!c.in_study(i, t)) continue;
      ++f.at_risk;
      ++f.counts[static_cast<std::size_t>(c.strategy(i, t).index())];
    }
    for (std::size_t k = 0; k < 3; ++k) {
      f.proportions[k] = f.at_risk > 0 ? static_cast<double>(f.counts[k]) / f.at_risk : 0.0;
      if (f.proportions[k] < floor)
        rep.warnings.push_back({t, StrategyCode::from_index(static_cast<int>(k)), f.proportions[k]});
    }
    rep.frequencies.push_back(f);
  }
  rep.completers = c.completers();
  rep.censored = c.n() - rep.completers;
  return rep;
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

Cohort load_cohort(const std::filesystem::path& path, const ColumnRoleMap& roles) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line)) throw DataError("malformed CSV: empty file");
  const auto header = split(line);
  std::map<std::string, std::size_t, std::less<>> pos;
  for (std::size_t j = 0; j < header.size(); ++j)
    if (!pos.emplace(std::string(header[j]), j).second)
      throw DataError("malformed CSV: duplicate header '" + std::string(header[j]) + "'");
  for (auto req : {"id", "time"})
    if (!pos.count(req)) throw DataError(std::string("malformed CSV: missing column '") + req + "'");
  std::vector<std::string> columns(kCoreColumns.begin(), kCoreColumns.end());
  for (auto core : kCoreColumns)
    if (!pos.count(core)) throw DataError("malformed CSV: missing column '" + std::string(core) + "'");
  for (const auto& h : header)
    if (h != "id" && h != "time" && std::find(columns.begin(), columns.end(), h) == columns.end())
      columns.emplace_back(h);

  struct Row {
    long id;
    int time;
    std::vector<double> v;  // in `columns` order, NaN = empty
  };
  std::vector<Row> rows;
  long line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto f = split(line);
    if (f.size() != header.size())
      throw DataError("malformed CSV at line " + std::to_string(line_no) + ": expected " +
                      std::to_string(header.size()) + " fields, got " + std::to_string(f.size()));
    Row r;
    r.id = parse_number<long>(f[pos.at("id")], line_no, "id");
    r.time = parse_number<int>(f[pos.at("time")], line_no, "time");
    if (r.time < 0) throw DataError("malformed CSV at line " + std::to_string(line_no) + ": negative time");
    r.v.reserve(columns.size());
    for (const auto& col : columns) {
      const auto cell = f[pos.at(col)];
      r.v.push_back(cell.empty() ? kNaN : parse_number<double>(cell, line_no, col));
    }
    rows.push_back(std::move(r));
  }
  if (rows.empty()) throw DataError("malformed CSV: no data rows");
  std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
    return a.id != b.id ? a.id < b.id : a.time < b.time;
  });
  int tau = 0;
  std::vector<long> ids;
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (k > 0 && rows[k].id == rows[k - 1].id && rows[k].time == rows[k - 1].time)
      throw DataError("duplicate (id,time) = (" + std::to_string(rows[k].id) + "," + std::to_string(rows[k].time) + ")");
    if (ids.empty() || ids.back() != rows[k].id) ids.push_back(rows[k].id);
    tau = std::max(tau, rows[k].time);
  }
  Cohort c(ids, tau, columns);
  const int dn = c.column_index("dN"), a = c.column_index("A");
  int repairs = 0;
  int subject = -1;
  long prev_id = 0;
  for (const auto& r : rows) {
    if (subject < 0 || r.id != prev_id) {
      ++subject;
      prev_id = r.id;
    }
    for (std::size_t j = 0; j < columns.size(); ++j)
      if (!std::isnan(r.v[j])) c.set(static_cast<int>(j), subject, r.time, r.v[j]);
    if (c.value(a, subject, r.time) == 1.0 && c.value(dn, subject, r.time) == 0.0) {
      c.set(dn, subject, r.time, 1.0);
      ++repairs;
    }
  }
  c.refresh_rows();
  c.set_ingest_repairs(repairs);
  check_structure(c, roles);
  return c;
}

void write_cohort(const Cohort& c, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  std::string buf = "id,time";
  for (const auto& col : c.columns()) buf += "," + col;
  buf += '\n';
  const auto ncol = static_cast<int>(c.columns().size());
  for (int i = 0; i < c.n(); ++i) {
    for (int t = 0; t <= c.last_row(i); ++t) {
      buf += std::to_string(c.ids()[static_cast<std::size_t>(i)]);
      buf += ',';
      buf += std::to_string(t);
      for (int j = 0; j < ncol; ++j) {
        buf += ',';
        if (has_value(c.flag(j, i, t))) append_number(buf, c.value(j, i, t));
      }
      buf += '\n';
    }
    if (buf.size() > (1u << 20)) {
      out << buf;
      buf.clear();
    }
  }
  out << buf;
  if (!out) throw DataError("failed writing '" + path.string() + "'");
}

}  // namespace dmar
