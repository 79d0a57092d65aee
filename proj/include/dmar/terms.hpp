// Covariate terms: products of cohort columns read at absolute or
// stage-relative times, e.g. "K1@0", "Y@t-1", "A@1*dN@1".
#pragma once

#include "dmar/glm.hpp"
#include "dmar/panel.hpp"

#include <limits>
#include <string>
#include <string_view>
#include <vector>

namespace dmar {

struct Factor {
  std::string column;
  bool relative = true;  // time = stage + offset, else time = offset
  int offset = 0;
  int index = -1;        // resolved column index

  int time_at(int stage) const { return relative ? stage + offset : offset; }
};

struct Term {
  std::vector<Factor> factors;

  static Term parse(std::string_view text);
  std::string to_string() const;
  /// Name with relative times replaced by absolute ones, e.g. "K1@2".
  std::string label(int stage) const;
  /// Binds column names to `cohort`'s column indices.
  Term resolved(const std::vector<std::string>& columns) const;

  /// Product of the factor values. `get(col, t)` returns NaN for unavailable
  /// cells; out-of-range times yield NaN.
  template <typename Get>
  double evaluate(Get&& get, int stage, int tau) const {
    double v = 1.0;
    for (const auto& f : factors) {
      const int t = f.time_at(stage);
      if (t < 0 || t > tau) return std::numeric_limits<double>::quiet_NaN();
      v *= get(f.index, t);
    }
    return v;
  }
};

std::vector<Term> parse_terms(std::string_view comma_separated);
std::vector<Term> resolve_all(const std::vector<Term>& terms, const std::vector<std::string>& columns);
std::string join_terms(const std::vector<Term>& terms);

/// Value of `term` for `subject` at `stage`, NaN if any factor is unavailable.
double evaluate(const Term& resolved_term, const Cohort& cohort, int subject, int stage);

/// Design matrix over `rows` at `stage`: optional "(intercept)" column, then
/// one column per term named by its relative form. Throws DataError naming
/// the first unavailable cell.
glm::DesignMatrix<double> term_matrix(const Cohort& cohort, const std::vector<int>& rows, int stage,
                                      const std::vector<Term>& resolved_terms, bool intercept = true);

}  // namespace dmar
