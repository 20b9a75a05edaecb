#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "heritkit/design.hpp"
#include "heritkit/geno.hpp"
#include "heritkit/herit.hpp"
#include "heritkit/reml.hpp"
#include "oracles.hpp"

using namespace heritkit;

namespace {

geno::KinshipMatrix random_kinship(int n, int p, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> freq(0.2, 0.8);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  geno::GenotypeMatrix g;
  g.mode = geno::GenoMode::inbred;
  g.calls.resize(n, p);
  for (int j = 0; j < p; ++j) {
    double f = freq(rng);
    for (int i = 0; i < n; ++i) g.calls(i, j) = unif(rng) < f ? 2.0 : 0.0;
    g.markers.push_back("m" + std::to_string(j));
  }
  for (int i = 0; i < n; ++i) {
    std::string id = std::to_string(i);
    g.accessions.push_back("g" + std::string(2 - id.size(), '0') + id);
  }
  auto f = geno::allele_frequencies(g, 0.05);
  auto k = geno::compute_kinship(g, f);
  geno::scale_kinship(k);
  return k;
}

Vector mvn_from_cov(const Matrix& cov, std::mt19937_64& rng) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(cov);
  Vector lam = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  std::normal_distribution<double> nd;
  Vector z(cov.rows());
  for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = nd(rng);
  return es.eigenvectors() * lam.asDiagonal() * z;
}

design::PhenotypeTable balanced_table(const std::vector<std::string>& ids, int r,
                                      const Vector& g_eff, double sigma_e,
                                      std::mt19937_64& rng) {
  design::PhenotypeTable t;
  std::normal_distribution<double> nd(0.0, sigma_e);
  t.value.resize(static_cast<Eigen::Index>(ids.size()) * r);
  Eigen::Index row = 0;
  for (std::size_t i = 0; i < ids.size(); ++i)
    for (int j = 0; j < r; ++j) {
      t.genotype.push_back(ids[i]);
      t.value(row++) = g_eff(static_cast<Eigen::Index>(i)) + nd(rng);
    }
  return t;
}

design::PhenotypeTable table_from_values(const std::vector<std::string>& genos,
                                         const std::vector<double>& vals) {
  design::PhenotypeTable t;
  t.genotype = genos;
  t.value = Eigen::Map<const Vector>(vals.data(), static_cast<Eigen::Index>(vals.size()));
  return t;
}

constexpr double kZ975 = 1.9599639845400545;

}  // namespace

TEST_CASE("delta method interval matches hand computation", "[herit]") {
  Matrix cov = 0.01 * Matrix::Identity(2, 2);
  double sd = herit::delta_sd(1.0, 1.0, cov);
  // b = (1, -1)/4, so var = 0.01 * 2/16
  REQUIRE(sd == Catch::Approx(std::sqrt(0.00125)).margin(1e-12));
  REQUIRE(sd == Catch::Approx(0.0353553391).margin(1e-9));

  auto ci = herit::ci_delta_standard(0.5, sd, 0.05);
  REQUIRE(ci.lo == Catch::Approx(0.5 - kZ975 * sd).margin(1e-9));
  REQUIRE(ci.hi == Catch::Approx(0.5 + kZ975 * sd).margin(1e-9));
}

TEST_CASE("log-scale interval back-transforms through the logistic map", "[herit]") {
  Matrix cov = 0.01 * Matrix::Identity(2, 2);
  auto ci = herit::ci_delta_log(1.0, 1.0, cov, 0.05);
  double s = kZ975 * std::sqrt(0.02);
  REQUIRE(ci.lo == Catch::Approx(1.0 / (1.0 + std::exp(s))).margin(1e-9));
  REQUIRE(ci.hi == Catch::Approx(1.0 / (1.0 + std::exp(-s))).margin(1e-9));
  // symmetric around 1/2 when sigma_A2 = sigma_E2, and never leaves (0,1)
  REQUIRE(ci.hi - 0.5 == Catch::Approx(0.5 - ci.lo).margin(1e-12));
  REQUIRE(ci.lo > 0.0);
  REQUIRE(ci.hi < 1.0);

  // asymmetric case keeps ordering
  auto ci2 = herit::ci_delta_log(3.0, 1.0, cov, 0.05);
  REQUIRE(ci2.lo < 0.75);
  REQUIRE(ci2.hi > 0.75);
}

TEST_CASE("standard interval clips to the unit range", "[herit]") {
  auto hi = herit::ci_delta_standard(0.98, 0.05, 0.05);
  REQUIRE(hi.hi == 1.0);
  REQUIRE(hi.lo == Catch::Approx(0.98 - kZ975 * 0.05).margin(1e-12));
  auto lo = herit::ci_delta_standard(0.02, 0.05, 0.05);
  REQUIRE(lo.lo == 0.0);
}

TEST_CASE("anova estimator matches one-way sums of squares", "[herit]") {
  auto t = table_from_values({"a", "a", "b", "b", "c", "c"}, {1, 3, 4, 6, 7, 11});
  auto est = herit::broad_sense_h2(t, 0.05);

  double m = (2.0 + 5.0 + 9.0) / 3.0;
  double ss_g = 2.0 * (std::pow(2 - m, 2) + std::pow(5 - m, 2) + std::pow(9 - m, 2));
  double ms_g = ss_g / 2.0;
  double ms_e = 12.0 / 3.0;
  double sigma_g2 = (ms_g - ms_e) / 2.0;
  REQUIRE(est.sigma_a2 == Catch::Approx(sigma_g2).margin(1e-10));
  REQUIRE(est.sigma_e2 == Catch::Approx(ms_e).margin(1e-10));
  REQUIRE(est.h2 == Catch::Approx(sigma_g2 / (sigma_g2 + ms_e)).margin(1e-10));

  double f = ms_g / ms_e;
  double fq_hi = stats::f_quantile(0.975, 2.0, 3.0);
  double fq_lo = stats::f_quantile(0.025, 2.0, 3.0);
  auto bound = [&](double fq) {
    return std::clamp((f / fq - 1.0) / (f / fq + 1.0), 0.0, 1.0);
  };
  REQUIRE(est.ci_standard.lo == Catch::Approx(bound(fq_hi)).margin(1e-10));
  REQUIRE(est.ci_standard.hi == Catch::Approx(bound(fq_lo)).margin(1e-10));
  REQUIRE(est.method == "anova");
}

TEST_CASE("negative genetic variance is truncated at zero", "[herit]") {
  auto t = table_from_values({"a", "a", "b", "b", "c", "c"}, {0, 10, 1, 9, 2, 8});
  auto est = herit::broad_sense_h2(t, 0.05);
  REQUIRE(est.sigma_a2 == 0.0);
  REQUIRE(est.h2 == 0.0);
  REQUIRE(est.ci_standard.lo == 0.0);
}

TEST_CASE("zero environmental mean square gives a degenerate unit interval", "[herit]") {
  auto t = table_from_values({"a", "a", "b", "b", "c", "c"}, {1, 1, 2, 2, 3, 3});
  auto est = herit::broad_sense_h2(t, 0.05);
  REQUIRE(est.h2 == 1.0);
  REQUIRE(est.ci_standard.lo == 1.0);
  REQUIRE(est.ci_standard.hi == 1.0);
}

TEST_CASE("replicates and anova estimators coincide for balanced identity kinship",
          "[herit]") {
  const int n = 50, r = 3;
  geno::KinshipMatrix kin;
  kin.values = Matrix::Identity(n, n);
  std::vector<std::string> ids;
  for (int i = 0; i < n; ++i) {
    std::string s = std::to_string(i);
    ids.push_back("g" + std::string(2 - s.size(), '0') + s);
  }
  kin.accessions = ids;

  std::mt19937_64 rng(404);
  Vector g_eff = mvn_from_cov(kin.values, rng);
  auto t = balanced_table(ids, r, g_eff, 1.0, rng);

  auto est_r = herit::h2_replicates(t, kin);
  auto est_a = herit::broad_sense_h2(t);
  REQUIRE(est_r.fit.converged);
  REQUIRE_FALSE(est_r.monotone);
  REQUIRE(est_r.h2 > 0.1);
  REQUIRE(est_r.h2 < 0.9);
  REQUIRE(est_r.h2 == Catch::Approx(est_a.h2).margin(1e-6));
  REQUIRE(est_r.sigma_a2 == Catch::Approx(est_a.sigma_a2).margin(1e-6));
}

TEST_CASE("estimates are invariant to kinship ordering and extra accessions", "[herit]") {
  auto kin = random_kinship(12, 400, 77);
  std::vector<int> pick = {9, 2, 11, 4, 0, 7, 5, 3};
  std::vector<std::string> ids;
  for (int i : pick) ids.push_back(kin.accessions[static_cast<std::size_t>(i)]);

  std::mt19937_64 rng(55);
  Matrix ksub(pick.size(), pick.size());
  for (std::size_t a = 0; a < pick.size(); ++a)
    for (std::size_t b = 0; b < pick.size(); ++b)
      ksub(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) =
          kin.values(pick[a], pick[b]);
  Vector g_eff = mvn_from_cov(2.0 * ksub, rng);
  auto t = balanced_table(ids, 3, g_eff, 1.0, rng);

  // reference run: kinship already restricted, in its own file order
  std::vector<int> order = pick;
  std::sort(order.begin(), order.end());
  geno::KinshipMatrix ref;
  for (int i : order) ref.accessions.push_back(kin.accessions[static_cast<std::size_t>(i)]);
  ref.values.resize(static_cast<Eigen::Index>(order.size()),
                    static_cast<Eigen::Index>(order.size()));
  for (std::size_t a = 0; a < order.size(); ++a)
    for (std::size_t b = 0; b < order.size(); ++b)
      ref.values(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) =
          kin.values(order[a], order[b]);

  auto full = herit::h2_replicates(t, kin);
  auto sub = herit::h2_replicates(t, ref);
  REQUIRE(full.h2 == Catch::Approx(sub.h2).margin(1e-10));
  REQUIRE(full.sigma_a2 == Catch::Approx(sub.sigma_a2).margin(1e-10));

  auto dm = design::build_design(t);
  auto means = design::compute_blues(dm, t.value);
  auto m_full = herit::h2_means(means, kin);
  auto m_sub = herit::h2_means(means, ref);
  REQUIRE(m_full.h2 == Catch::Approx(m_sub.h2).margin(1e-10));
}

TEST_CASE("phenotype genotype absent from the kinship matrix is reported by name",
          "[herit]") {
  auto kin = random_kinship(5, 200, 3);
  auto t = table_from_values({kin.accessions[0], kin.accessions[0], "zz9", "zz9"},
                             {1.0, 2.0, 3.0, 4.0});
  REQUIRE_THROWS_WITH(herit::h2_replicates(t, kin),
                      Catch::Matchers::ContainsSubstring("zz9"));
}

TEST_CASE("means estimator matches a dense grid search", "[herit]") {
  const int n = 40, r = 2;
  auto kin = random_kinship(n, 600, 2024);
  std::mt19937_64 rng(99);
  Vector g_eff = mvn_from_cov(1.5 * kin.values, rng);
  auto t = balanced_table(kin.accessions, r, g_eff, 1.0, rng);

  auto dm = design::build_design(t);
  auto means = design::compute_blues(dm, t.value);
  auto est = herit::h2_means(means, kin);
  REQUIRE(est.fit.converged);

  // construction order is already kinship order here
  Matrix x = Matrix::Ones(n, 1);
  double h_grid = oracle::grid_argmax_h2(means.means, x, kin.values, means.r, 2001);
  if (!est.monotone) REQUIRE(est.h2 == Catch::Approx(h_grid).margin(1.5e-3));
}

TEST_CASE("asymptotic sd agrees with the dense information matrix", "[herit]") {
  const int n = 25;
  auto kin = random_kinship(n, 500, 11);
  IntVector reps;
  for (int i = 0; i < n; ++i) reps.push_back(1 + i % 3);
  const double sa2 = 0.6, se2 = 0.4;

  Eigen::Index n_obs = 0;
  for (int r : reps) n_obs += r;
  Matrix z = Matrix::Zero(n_obs, n);
  Eigen::Index row = 0;
  for (int i = 0; i < n; ++i)
    for (int r = 0; r < reps[static_cast<std::size_t>(i)]; ++r) z(row++, i) = 1.0;

  auto delta_from_info = [&](const Matrix& info) {
    Matrix cov = info.llt().solve(Matrix::Identity(2, 2));
    return herit::delta_sd(sa2, se2, cov);
  };

  Matrix g0 = z * kin.values * z.transpose();
  Matrix info_i = oracle::dense_fisher(Matrix::Ones(n_obs, 1), g0,
                                        Matrix::Identity(n_obs, n_obs), sa2, se2);
  double sd_i = herit::asymptotic_sd(kin.values, reps, sa2, se2, reml::Stage::individual);
  REQUIRE(sd_i == Catch::Approx(delta_from_info(info_i)).margin(1e-8));

  Vector rinv(n);
  for (int i = 0; i < n; ++i) rinv(i) = 1.0 / reps[static_cast<std::size_t>(i)];
  Matrix info_m = oracle::dense_fisher(Matrix::Ones(n, 1), kin.values,
                                        Matrix(rinv.asDiagonal()), sa2, se2);
  double sd_m = herit::asymptotic_sd(kin.values, reps, sa2, se2, reml::Stage::means);
  REQUIRE(sd_m == Catch::Approx(delta_from_info(info_m)).margin(1e-8));

  // replication adds information beyond the means
  IntVector r3(n, 3);
  double sd_i3 = herit::asymptotic_sd(kin.values, r3, sa2, se2, reml::Stage::individual);
  double sd_m3 = herit::asymptotic_sd(kin.values, r3, sa2, se2, reml::Stage::means);
  REQUIRE(sd_m3 > sd_i3);
}

TEST_CASE("asymptotic sd is scale invariant and stage-free at one replicate", "[herit]") {
  auto kin = random_kinship(30, 500, 21);
  IntVector ones(30, 1);
  double a = herit::asymptotic_sd(kin.values, ones, 0.5, 0.5, reml::Stage::individual);
  double b = herit::asymptotic_sd(kin.values, ones, 0.5, 0.5, reml::Stage::means);
  REQUIRE(a == Catch::Approx(b).margin(1e-8));
  REQUIRE(a == Catch::Approx(herit::asymptotic_sd(kin.values, 1, 0.5,
                                                  reml::Stage::individual))
                  .margin(1e-12));

  double c = herit::asymptotic_sd(kin.values, ones, 0.5 * 3.7, 0.5 * 3.7,
                                  reml::Stage::individual);
  REQUIRE(a == Catch::Approx(c).margin(1e-10));
}

TEST_CASE("monotone fits report unit heritability with a full interval", "[herit]") {
  auto kin = random_kinship(12, 300, 8);
  design::PhenotypeTable t;
  for (std::size_t i = 0; i < kin.accessions.size(); ++i)
    for (int j = 0; j < 2; ++j) t.genotype.push_back(kin.accessions[i]);
  t.value.resize(24);
  for (Eigen::Index i = 0; i < 24; ++i) t.value(i) = static_cast<double>(i / 2);

  auto est = herit::h2_replicates(t, kin);
  REQUIRE(est.monotone);
  REQUIRE(est.h2 == 1.0);
  REQUIRE(est.ci_standard.lo == 0.0);
  REQUIRE(est.ci_standard.hi == 1.0);
  REQUIRE(est.ci_log.lo == 0.0);
  REQUIRE(est.ci_log.hi == 1.0);
  REQUIRE(est.fit.boundary == "sigma_E2");
}
