// Longitudinal panel data: subjects x discrete times, with visit/add-on
// strategy indicators, a still-in-study indicator and per-cell observation
// flags.
#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace dmar {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Three-way action at a decision time: no visit, visit, visit + add-on.
struct StrategyCode {
  std::uint8_t visit = 0;
  std::uint8_t addon = 0;

  static StrategyCode make(int visit, int addon);
  static StrategyCode from_index(int k);
  /// 0 = (0,0), 1 = (1,0), 2 = (1,1).
  int index() const { return visit + addon; }
  friend bool operator==(StrategyCode, StrategyCode) = default;
};

std::string to_string(StrategyCode s);

enum class CellFlag : std::uint8_t { missing = 0, observed = 1, imputed_locf = 2, imputed_model = 3 };

inline bool has_value(CellFlag f) { return f != CellFlag::missing; }

/// Columns every cohort carries, in file order.
inline constexpr std::array<std::string_view, 8> kCoreColumns = {"dN", "A", "xi", "K1", "K2", "Y", "A0", "Y_final"};

/// Columns by role. Names refer to cohort columns; the blip specification
/// decides at which times they are read.
struct ColumnRoleMap {
  std::vector<std::string> confounders;         // K(t)
  std::vector<std::string> visit_covariates;    // V(t)
  std::vector<std::string> visit_modifiers;     // Q_V(t)
  std::vector<std::string> addon_modifiers;     // Q_{V,A}(t)
  std::vector<std::string> treatment_free;      // h(t)

  std::vector<std::string> all() const;
  std::vector<std::string> modifiers() const;
};

class Cohort {
 public:
  Cohort() = default;
  /// Allocates an all-missing panel. `columns` must include kCoreColumns.
  Cohort(std::vector<long> ids, int tau, std::vector<std::string> columns);

  int n() const { return static_cast<int>(ids_.size()); }
  int tau() const { return tau_; }
  const std::vector<long>& ids() const { return ids_; }
  const std::vector<std::string>& columns() const { return columns_; }

  int column_index(std::string_view name) const;
  std::optional<int> find_column(std::string_view name) const;

  double value(int col, int subject, int t) const { return values_[static_cast<std::size_t>(col)](subject, t); }
  CellFlag flag(int col, int subject, int t) const {
    return static_cast<CellFlag>(flags_[static_cast<std::size_t>(col)](subject, t));
  }
  double value(std::string_view col, int subject, int t) const { return value(column_index(col), subject, t); }

  void set(int col, int subject, int t, double v, CellFlag f = CellFlag::observed);
  void clear(int col, int subject, int t);

  /// Last time with a row on file: tau for completers, the censoring time otherwise.
  int last_row(int subject) const { return last_row_[static_cast<std::size_t>(subject)]; }
  /// xi(t) = 1.
  bool in_study(int subject, int t) const;
  bool completer(int subject) const { return in_study(subject, tau_); }
  int completers() const;
  StrategyCode strategy(int subject, int t) const;

  /// Recomputes last rows from xi; called after xi edits.
  void refresh_rows();
  /// Marks every field unavailable at and after the first xi = 0.
  void apply_censoring_mask();

  /// Number of rows repaired at ingestion (A = 1 with dN = 0 forced to dN = 1).
  int ingest_repairs() const { return repairs_; }
  void set_ingest_repairs(int r) { repairs_ = r; }

  /// Total rows present (what the long CSV holds).
  long row_count() const;

  bool operator==(const Cohort& other) const;

 private:
  std::vector<long> ids_;
  int tau_ = 0;
  std::vector<std::string> columns_;
  std::vector<Eigen::MatrixXd> values_;
  std::vector<Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>> flags_;
  std::vector<int> last_row_;
  int repairs_ = 0;
  int xi_col_ = -1;
  int dn_col_ = -1;
  int a_col_ = -1;
};

/// Structural checks: monotone xi, add-on implies visit, design columns
/// present while in study, missing cells confined to `roles`' modifier
/// columns (if any are named). Throws DataError.
void check_structure(const Cohort& cohort, const ColumnRoleMap& roles = {});

Cohort load_cohort(const std::filesystem::path& path, const ColumnRoleMap& roles = {});
void write_cohort(const Cohort& cohort, const std::filesystem::path& path);

struct StrategyFrequency {
  int t = 0;
  int at_risk = 0;
  std::array<int, 3> counts{};
  std::array<double, 3> proportions{};
};

struct PositivityWarning {
  int t = 0;
  StrategyCode strategy;
  double proportion = 0;
};

struct DiagnosticsReport {
  std::vector<StrategyFrequency> frequencies;
  std::vector<PositivityWarning> warnings;
  int censored = 0;
  int completers = 0;
  bool ok() const { return warnings.empty(); }
};

/// Per-time strategy frequencies over decision times 1..tau-1 with a
/// positivity warning for every strategy whose share falls below `floor`.
DiagnosticsReport validate_cohort(const Cohort& cohort, double floor = 0.01);

}  // namespace dmar
