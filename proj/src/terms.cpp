#include "dmar/terms.hpp"

#include <charconv>
#include <cmath>

namespace dmar {

namespace {

std::string_view strip(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

int to_int(std::string_view s, std::string_view whole) {
  int v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size() || s.empty())
    throw DataError("bad time reference in term '" + std::string(whole) + "'");
  return v;
}

Factor parse_factor(std::string_view text, std::string_view whole) {
  text = strip(text);
  Factor f;
  const auto at = text.find('@');
  f.column = std::string(strip(text.substr(0, at)));
  if (f.column.empty()) throw DataError("empty column in term '" + std::string(whole) + "'");
  if (at == std::string_view::npos) return f;
  auto ref = strip(text.substr(at + 1));
  if (!ref.empty() && ref.front() == 't') {
    ref.remove_prefix(1);
    if (ref.empty()) return f;
    if (ref.front() != '+' && ref.front() != '-') throw DataError("bad time reference in term '" + std::string(whole) + "'");
    const int sign = ref.front() == '-' ? -1 : 1;
    f.offset = sign * to_int(ref.substr(1), whole);
    return f;
  }
  f.relative = false;
  f.offset = to_int(ref, whole);
  return f;
}

std::string factor_text(const Factor& f) {
  if (!f.relative) return f.column + "@" + std::to_string(f.offset);
  if (f.offset == 0) return f.column + "@t";
  return f.column + "@t" + (f.offset > 0 ? "+" : "-") + std::to_string(std::abs(f.offset));
}

}  // namespace

Term Term::parse(std::string_view text) {
  Term term;
  std::size_t start = 0;
  for (;;) {
    const auto pos = text.find('*', start);
    term.factors.push_back(parse_factor(text.substr(start, pos == std::string_view::npos ? pos : pos - start), text));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return term;
}

std::string Term::to_string() const {
  std::string s;
  for (std::size_t k = 0; k < factors.size(); ++k) s += (k ? "*" : "") + factor_text(factors[k]);
  return s;
}

std::string Term::label(int stage) const {
  std::string s;
  for (std::size_t k = 0; k < factors.size(); ++k)
    s += (k ? "*" : "") + factors[k].column + "@" + std::to_string(factors[k].time_at(stage));
  return s;
}

Term Term::resolved(const std::vector<std::string>& columns) const {
  Term out = *this;
  for (auto& f : out.factors) {
    f.index = -1;
    for (std::size_t j = 0; j < columns.size(); ++j)
      if (columns[j] == f.column) f.index = static_cast<int>(j);
    if (f.index < 0) throw DataError("term '" + to_string() + "' names unknown column '" + f.column + "'");
  }
  return out;
}

std::vector<Term> parse_terms(std::string_view text) {
  std::vector<Term> out;
  std::size_t start = 0;
  for (;;) {
    const auto pos = text.find(',', start);
    const auto piece = strip(text.substr(start, pos == std::string_view::npos ? pos : pos - start));
    if (!piece.empty()) out.push_back(Term::parse(piece));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

std::vector<Term> resolve_all(const std::vector<Term>& terms, const std::vector<std::string>& columns) {
  std::vector<Term> out;
  out.reserve(terms.size());
  for (const auto& t : terms) out.push_back(t.resolved(columns));
  return out;
}

std::string join_terms(const std::vector<Term>& terms) {
  std::string s;
  for (std::size_t k = 0; k < terms.size(); ++k) s += (k ? "," : "") + terms[k].to_string();
  return s;
}

double evaluate(const Term& term, const Cohort& cohort, int subject, int stage) {
  return term.evaluate(
      [&](int col, int t) {
        return has_value(cohort.flag(col, subject, t)) ? cohort.value(col, subject, t)
                                                       : std::numeric_limits<double>::quiet_NaN();
      },
      stage, cohort.tau());
}

glm::DesignMatrix<double> term_matrix(const Cohort& cohort, const std::vector<int>& rows, int stage,
                                      const std::vector<Term>& terms, bool intercept) {
  glm::DesignMatrix<double> X;
  if (intercept) X.names.push_back("(intercept)");
  for (const auto& t : terms) X.names.push_back(t.to_string());
  const int off = intercept ? 1 : 0;
  X.values.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(terms.size()) + off);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto ri = static_cast<Eigen::Index>(r);
    if (intercept) X.values(ri, 0) = 1.0;
    for (std::size_t k = 0; k < terms.size(); ++k) {
      const double v = evaluate(terms[k], cohort, rows[r], stage);
      if (std::isnan(v))
        throw DataError("term '" + terms[k].label(stage) + "' unavailable for subject " +
                        std::to_string(cohort.ids()[static_cast<std::size_t>(rows[r])]));
      X.values(ri, static_cast<Eigen::Index>(k) + off) = v;
    }
  }
  return X;
}

}  // namespace dmar
