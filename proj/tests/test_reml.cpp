#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "heritkit/design.hpp"
#include "heritkit/geno.hpp"
#include "heritkit/reml.hpp"
#include "oracles.hpp"

using namespace heritkit;

namespace {

Matrix random_kinship(Eigen::Index n, Eigen::Index p, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> freq(0.15, 0.85);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  Matrix calls(n, p);
  for (Eigen::Index j = 0; j < p; ++j) {
    double f = freq(rng);
    for (Eigen::Index i = 0; i < n; ++i) calls(i, j) = unif(rng) < f ? 2.0 : 0.0;
  }
  geno::GenotypeMatrix g;
  g.mode = geno::GenoMode::inbred;
  g.calls = calls;
  for (Eigen::Index i = 0; i < n; ++i) g.accessions.push_back("a" + std::to_string(i));
  for (Eigen::Index j = 0; j < p; ++j) g.markers.push_back("m" + std::to_string(j));
  auto f = geno::allele_frequencies(g);
  auto k = geno::compute_kinship(g, f);
  geno::scale_kinship(k);
  return k.values;
}

struct IndividualData {
  reml::VarianceModel vm;
  Matrix g0;  // dense Z K Z' for oracles
  Matrix r0;
};

// Simulated replicated trial on a structured kinship.
IndividualData individual_instance(Eigen::Index n, const IntVector& reps, double sa2,
                                   double se2, unsigned seed, bool covariate = false) {
  IndividualData d;
  d.vm.stage = reml::Stage::individual;
  d.vm.k = random_kinship(n, 4 * n, seed);

  Eigen::SelfAdjointEigenSolver<Matrix> eig(d.vm.k);
  Vector lam = eig.eigenvalues().cwiseMax(0.0);
  std::mt19937_64 rng(seed + 1);
  std::normal_distribution<double> norm(0.0, 1.0);
  Vector zg(n);
  for (Eigen::Index i = 0; i < n; ++i) zg(i) = norm(rng);
  Vector g = eig.eigenvectors() * lam.cwiseSqrt().cwiseProduct(zg) * std::sqrt(sa2);

  Eigen::Index n_obs = 0;
  for (int r : reps) n_obs += r;
  d.vm.y.resize(n_obs);
  d.vm.groups.clear();
  Eigen::Index row = 0;
  for (Eigen::Index i = 0; i < n; ++i)
    for (int r = 0; r < reps[static_cast<std::size_t>(i)]; ++r) {
      d.vm.groups.push_back(static_cast<int>(i));
      d.vm.y(row++) = 2.0 + g(i) + std::sqrt(se2) * norm(rng);
    }
  d.vm.x.resize(n_obs, covariate ? 2 : 1);
  d.vm.x.col(0).setOnes();
  if (covariate) {
    for (Eigen::Index i = 0; i < n_obs; ++i) d.vm.x(i, 1) = norm(rng);
    d.vm.y += 0.7 * d.vm.x.col(1);
  }

  Matrix z = Matrix::Zero(n_obs, n);
  for (Eigen::Index i = 0; i < n_obs; ++i) z(i, d.vm.groups[static_cast<std::size_t>(i)]) = 1.0;
  d.g0 = z * d.vm.k * z.transpose();
  d.r0 = Matrix::Identity(n_obs, n_obs);
  return d;
}

}  // namespace

TEST_CASE("individual-stage likelihood matches the dense oracle", "[reml]") {
  IntVector reps = {3, 1, 2, 3, 2, 1, 3, 2, 2, 3, 1, 2, 3, 2, 1, 3, 2, 2, 3, 1,
                    2, 3, 2, 1, 3};
  auto d = individual_instance(25, reps, 1.0, 1.0, 11, true);
  auto sm = reml::spectral_prepare(d.vm);
  for (auto [sa2, se2] : {std::pair{0.5, 1.5}, {1.0, 1.0}, {2.3, 0.4}, {0.05, 2.0}}) {
    double mine = reml::evaluate(sm, sa2, se2).loglik;
    double ref = oracle::dense_restricted_loglik(d.vm.y, d.vm.x, d.g0, d.r0, sa2, se2);
    REQUIRE(mine == Catch::Approx(ref).margin(1e-8));
  }
}

TEST_CASE("means-stage likelihood matches the dense oracle", "[reml]") {
  Matrix k = random_kinship(20, 120, 3);
  std::mt19937_64 rng(4);
  std::normal_distribution<double> norm(0.0, 1.0);
  Matrix b = Matrix::Zero(20, 20);
  for (Eigen::Index i = 0; i < 20; ++i)
    for (Eigen::Index j = 0; j < 20; ++j) b(i, j) = 0.1 * norm(rng);
  Matrix r0 = 0.4 * Matrix::Identity(20, 20) + b * b.transpose();

  reml::VarianceModel vm;
  vm.stage = reml::Stage::means;
  vm.k = k;
  vm.r0 = r0;
  vm.x = Matrix::Ones(20, 1);
  vm.y.resize(20);
  for (Eigen::Index i = 0; i < 20; ++i) vm.y(i) = norm(rng);

  auto sm = reml::spectral_prepare(vm);
  for (auto [sa2, se2] : {std::pair{0.8, 1.2}, {1.0, 0.3}, {0.1, 2.4}}) {
    double mine = reml::evaluate(sm, sa2, se2).loglik;
    double ref = oracle::dense_restricted_loglik(vm.y, vm.x, k, r0, sa2, se2);
    REQUIRE(mine == Catch::Approx(ref).margin(1e-8));
  }
}

TEST_CASE("profile likelihood matches the dense profile oracle", "[reml]") {
  IntVector reps(30, 2);
  auto d = individual_instance(30, reps, 1.2, 0.8, 17);
  auto sm = reml::spectral_prepare(d.vm);
  for (double h2 : {0.1, 0.35, 0.5, 0.72, 0.9}) {
    double mine = reml::profile_loglik_at(sm, h2);
    double ref = oracle::dense_profile_loglik(d.vm.y, d.vm.x, d.g0, d.r0, h2);
    REQUIRE(mine == Catch::Approx(ref).margin(1e-8));
  }
}

TEST_CASE("fit lands on the grid-search argmax", "[reml]") {
  IntVector reps(40, 3);
  auto d = individual_instance(40, reps, 1.0, 1.0, 23);
  auto fit = reml::reml_fit(d.vm);
  double grid = oracle::grid_argmax_h2(d.vm.y, d.vm.x, d.g0, d.r0, 999);
  REQUIRE(fit.converged);
  REQUIRE(std::abs(fit.h2 - grid) <= 1e-3);
  REQUIRE(fit.h2 == Catch::Approx(fit.sigma_a2 / (fit.sigma_a2 + fit.sigma_e2)).margin(1e-12));
}

TEST_CASE("balanced one-way REML with identity kinship equals ANOVA", "[reml]") {
  const Eigen::Index n = 40;
  const int r = 3;
  design::PhenotypeTable t;
  std::mt19937_64 rng(31);
  std::normal_distribution<double> norm(0.0, 1.0);
  std::vector<double> vals;
  for (Eigen::Index i = 0; i < n; ++i) {
    double g = 1.3 * norm(rng);
    for (int j = 0; j < r; ++j) {
      t.genotype.push_back("g" + std::to_string(100 + i));
      vals.push_back(g + norm(rng));
    }
  }
  t.value = Eigen::Map<Vector>(vals.data(), static_cast<Eigen::Index>(vals.size()));
  auto dm = design::build_design(t);
  auto anova = design::anova_summary(dm, t.value);
  REQUIRE(anova.ms_g > anova.ms_env);

  reml::VarianceModel vm;
  vm.stage = reml::Stage::individual;
  vm.k = Matrix::Identity(n, n);
  vm.y = t.value;
  vm.x = Matrix::Ones(t.value.size(), 1);
  vm.groups = dm.obs_genotype;
  auto fit = reml::reml_fit(vm);

  double sg_anova = (anova.ms_g - anova.ms_env) / r;
  REQUIRE(fit.sigma_a2 == Catch::Approx(sg_anova).margin(1e-6));
  REQUIRE(fit.sigma_e2 == Catch::Approx(anova.ms_env).margin(1e-6));
}

TEST_CASE("individual and means likelihoods differ by a constant at fixed residual variance",
          "[reml]") {
  const Eigen::Index n = 25;
  const int r = 3;
  IntVector reps(static_cast<std::size_t>(n), r);
  auto d = individual_instance(n, reps, 1.0, 1.0, 41);
  auto sm_ind = reml::spectral_prepare(d.vm);

  design::PhenotypeTable t;
  for (std::size_t i = 0; i < d.vm.groups.size(); ++i)
    t.genotype.push_back("g" + std::to_string(100 + d.vm.groups[i]));
  t.value = d.vm.y;
  auto dm = design::build_design(t);
  auto means = design::compute_blues(dm, t.value);

  reml::VarianceModel vm_m;
  vm_m.stage = reml::Stage::means;
  vm_m.k = d.vm.k;
  vm_m.r0 = means.r;
  vm_m.y = means.means;
  vm_m.x = Matrix::Ones(n, 1);
  auto sm_means = reml::spectral_prepare(vm_m);

  double first_diff = 0.0;
  for (int i = 0; i <= 10; ++i) {
    double sa2 = 0.2 + 0.28 * i;
    double diff = reml::evaluate(sm_ind, sa2, 1.0).loglik -
                  reml::evaluate(sm_means, sa2, 1.0).loglik;
    if (i == 0)
      first_diff = diff;
    else
      REQUIRE(diff == Catch::Approx(first_diff).margin(1e-8));
  }
}

TEST_CASE("compound-symmetry kinship gives a flat profile and a monotone fit", "[reml]") {
  const Eigen::Index n = 60;
  Matrix k = Matrix::Identity(n, n) + 0.5 * Matrix::Ones(n, n);
  reml::VarianceModel vm;
  vm.stage = reml::Stage::means;
  vm.k = k;
  vm.r0 = (1.0 / 3.0) * Matrix::Identity(n, n);
  vm.x = Matrix::Ones(n, 1);
  std::mt19937_64 rng(7);
  std::normal_distribution<double> norm(0.0, 1.0);
  vm.y.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) vm.y(i) = norm(rng);

  auto sm = reml::spectral_prepare(vm);
  Vector grid(99);
  for (int i = 0; i < 99; ++i) grid(i) = 1e-6 + (1.0 - 2e-6) * i / 98.0;
  Vector prof = reml::profile_loglik(sm, grid);
  REQUIRE(prof.maxCoeff() - prof.minCoeff() < 1e-6);

  auto fit = reml::reml_fit(sm);
  REQUIRE(fit.monotone);
  REQUIRE(fit.boundary == "sigma_E2");
}

TEST_CASE("zero within-genotype variance drives the fit to the upper boundary", "[reml]") {
  const Eigen::Index n = 30;
  Matrix k = random_kinship(n, 90, 47);
  reml::VarianceModel vm;
  vm.stage = reml::Stage::individual;
  vm.k = k;
  std::mt19937_64 rng(8);
  std::normal_distribution<double> norm(0.0, 1.0);
  Vector g(n);
  for (Eigen::Index i = 0; i < n; ++i) g(i) = norm(rng);
  vm.y.resize(2 * n);
  for (Eigen::Index i = 0; i < n; ++i) {
    vm.groups.push_back(static_cast<int>(i));
    vm.groups.push_back(static_cast<int>(i));
    vm.y(2 * i) = g(i);
    vm.y(2 * i + 1) = g(i);
  }
  vm.x = Matrix::Ones(2 * n, 1);
  auto fit = reml::reml_fit(vm);
  REQUIRE(fit.monotone);
  REQUIRE(fit.h2 > 0.999);
}

TEST_CASE("location and scale behaviour of the fit", "[reml]") {
  IntVector reps(35, 2);
  auto d = individual_instance(35, reps, 1.0, 1.0, 53);
  auto base = reml::reml_fit(d.vm);

  auto shifted = d.vm;
  shifted.y.array() += 11.0;
  auto fit_shift = reml::reml_fit(shifted);
  REQUIRE(fit_shift.h2 == Catch::Approx(base.h2).margin(1e-9));
  REQUIRE(fit_shift.sigma_a2 == Catch::Approx(base.sigma_a2).margin(1e-7));

  auto scaled = d.vm;
  scaled.y *= 5.3;
  auto fit_scale = reml::reml_fit(scaled);
  REQUIRE(fit_scale.h2 == Catch::Approx(base.h2).margin(1e-9));
  REQUIRE(fit_scale.sigma_a2 == Catch::Approx(base.sigma_a2 * 5.3 * 5.3).epsilon(1e-6));
}

TEST_CASE("fisher information matches the dense trace oracle", "[reml]") {
  IntVector reps = {2, 3, 1, 2, 3, 2, 1, 3, 2, 2, 1, 3, 2, 3, 2};
  auto d = individual_instance(15, reps, 1.0, 1.0, 61, true);
  auto sm = reml::spectral_prepare(d.vm);
  for (auto [sa2, se2] : {std::pair{0.7, 1.1}, {1.5, 0.5}}) {
    Matrix mine = reml::fisher_information(sm, sa2, se2);
    Matrix ref = oracle::dense_fisher(d.vm.x, d.g0, d.r0, sa2, se2);
    REQUIRE((mine - ref).cwiseAbs().maxCoeff() < 1e-8);
  }

  reml::VarianceModel vm;
  vm.stage = reml::Stage::means;
  vm.k = random_kinship(18, 100, 67);
  vm.r0 = 0.25 * Matrix::Identity(18, 18);
  vm.x = Matrix::Ones(18, 1);
  vm.y = Vector::Zero(18);
  auto smm = reml::spectral_prepare(vm);
  Matrix mine = reml::fisher_information(smm, 0.5, 0.5);
  Matrix ref = oracle::dense_fisher(vm.x, vm.k, vm.r0, 0.5, 0.5);
  REQUIRE((mine - ref).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("gradient vanishes at an interior optimum", "[reml]") {
  IntVector reps(30, 3);
  auto d = individual_instance(30, reps, 1.0, 1.0, 71);
  auto fit = reml::reml_fit(d.vm);
  REQUIRE(fit.boundary.empty());
  REQUIRE(fit.gradient.cwiseAbs().maxCoeff() < 1e-3 * (1.0 + std::abs(fit.loglik)));
}
