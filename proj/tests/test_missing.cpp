#include "doctest.h"

#include "dmar/missing.hpp"
#include "support.hpp"

#include <algorithm>
#include <cmath>

using namespace dmar;

TEST_CASE("locf carries the last observation forward") {
  auto c = dmar::testing::random_cohort(10, 1);
  const int k1 = c.column_index("K1");
  c.clear(k1, 2, 1);
  c.clear(k1, 2, 2);
  c.clear(k1, 4, 2);
  const auto f = locf_complete(c);
  CHECK(f.value(k1, 2, 1) == c.value(k1, 2, 0));
  CHECK(f.value(k1, 2, 2) == c.value(k1, 2, 0));
  CHECK(f.value(k1, 4, 2) == c.value(k1, 4, 1));
  CHECK(f.flag(k1, 4, 2) == CellFlag::imputed_locf);
  CHECK(f.flag(k1, 4, 1) == CellFlag::observed);

  auto lead = c;
  lead.clear(k1, 0, 0);
  CHECK_THROWS_AS(locf_complete(lead), DataError);
  CHECK_THROWS_AS(locf_complete(c, {"dN"}), DataError);
}

TEST_CASE("sequential imputation recovers an exact linear relation") {
  auto c = dmar::testing::random_cohort(200, 2);
  const int k1 = c.column_index("K1");
  for (int i = 0; i < c.n(); ++i)
    c.set(k1, i, 2, 1.0 + 0.5 * c.value("K2", i, 1) - 0.02 * c.value("Y", i, 0));
  const auto truth = c;
  for (int i = 0; i < 200; i += 7) c.clear(k1, i, 2);
  ImputationConfig cfg;
  cfg.m = 2;
  cfg.noise = false;
  const auto res = sequential_impute(c, cfg);
  REQUIRE(res.datasets.size() == 2);
  CHECK(res.manifest.fill_counts.at("K1@2") == 29);
  for (int i = 0; i < 200; i += 7) {
    CHECK(res.datasets[0].value(k1, i, 2) == doctest::Approx(truth.value(k1, i, 2)).epsilon(1e-8));
    CHECK(res.datasets[0].flag(k1, i, 2) == CellFlag::imputed_model);
  }
}

TEST_CASE("imputation is seeded per replicate and independent of workers") {
  auto c = dmar::testing::random_cohort(150, 3);
  const int k1 = c.column_index("K1"), y = c.column_index("Y");
  for (int i = 0; i < 150; i += 3) {
    c.clear(k1, i, 1);
    c.clear(y, i, 2);
  }
  ImputationConfig cfg;
  cfg.m = 4;
  cfg.seed = 77;
  const auto a = sequential_impute(c, cfg);
  cfg.workers = 3;
  const auto b = sequential_impute(c, cfg);
  for (int j = 0; j < 4; ++j) CHECK(a.datasets[static_cast<std::size_t>(j)] == b.datasets[static_cast<std::size_t>(j)]);
  CHECK_FALSE(a.datasets[0] == a.datasets[1]);
  CHECK(a.manifest.seeds.size() == 4);

  const auto p = dmar::testing::temp_path("manifest.json");
  a.manifest.write(p);
  CHECK(std::filesystem::file_size(p) > 0);

  // A column absent at a time for everyone is not imputed there.
  auto absent = c;
  for (int i = 0; i < 150; ++i) absent.clear(k1, i, 1);
  const auto r = sequential_impute(absent, cfg);
  CHECK(r.manifest.fill_counts.count("K1@1") == 0);
  CHECK_FALSE(has_value(r.datasets[0].flag(k1, 0, 1)));
}

TEST_CASE("pooling is an order-free coefficient mean") {
  const auto c = dmar::testing::random_cohort(300, 4);
  BlipSpec spec;
  spec.visit_modifiers = parse_terms("K1@t");
  spec.addon_modifiers = parse_terms("K1@t");
  spec.default_treatment_free = parse_terms("K2@t");
  spec.stages = {1, 2};
  RegimeOptions opt;
  opt.method = Method::qloma;
  std::vector<FittedRegime> fits;
  for (std::uint64_t s = 0; s < 5; ++s) fits.push_back(fit_regime(dmar::testing::random_cohort(300, 10 + s), spec, opt));
  const auto pooled = pool_regimes(fits);
  CHECK(pooled.pooled_from == 5);
  double mean = 0;
  for (const auto& f : fits) mean += f.stage(2).gamma(1);
  CHECK(pooled.stage(2).gamma(1) == doctest::Approx(mean / 5).epsilon(1e-12));
  auto shuffled = fits;
  std::reverse(shuffled.begin(), shuffled.end());
  std::swap(shuffled[0], shuffled[2]);
  const auto again = pool_regimes(shuffled);
  for (std::size_t s = 0; s < 2; ++s) {
    CHECK((again.stages[s].gamma - pooled.stages[s].gamma).norm() == 0.0);
    CHECK((again.stages[s].beta - pooled.stages[s].beta).norm() == 0.0);
  }
  auto other = spec;
  other.visit_modifiers = parse_terms("Y@t");
  fits.push_back(fit_regime(c, other, opt));
  CHECK_THROWS_AS(pool_regimes(fits), DataError);
  CHECK_THROWS_AS(pool_regimes({}), DataError);
}
