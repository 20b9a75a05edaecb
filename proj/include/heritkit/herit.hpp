#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "heritkit/common.hpp"
#include "heritkit/design.hpp"
#include "heritkit/geno.hpp"
#include "heritkit/reml.hpp"
#include "heritkit/stats.hpp"

namespace heritkit::herit {

struct Interval {
  double lo = std::numeric_limits<double>::quiet_NaN();
  double hi = std::numeric_limits<double>::quiet_NaN();
};

struct HeritabilityEstimate {
  std::string method;  // replicates | means | anova
  double h2 = std::numeric_limits<double>::quiet_NaN();
  double sigma_a2 = std::numeric_limits<double>::quiet_NaN();
  double sigma_e2 = std::numeric_limits<double>::quiet_NaN();
  double sd = std::numeric_limits<double>::quiet_NaN();
  Interval ci_standard;
  Interval ci_log;
  bool monotone = false;
  reml::RemlFit fit;
};

struct HeritOptions {
  double alpha = 0.05;
  reml::RemlOptions reml;
};

// Gradient of h2 = sA2/(sA2+sE2) with respect to (sA2, sE2).
inline Vector h2_gradient(double sigma_a2, double sigma_e2) {
  double t = sigma_a2 + sigma_e2;
  Vector b(2);
  b << sigma_e2 / (t * t), -sigma_a2 / (t * t);
  return b;
}

inline double delta_sd(double sigma_a2, double sigma_e2, const Matrix& cov) {
  Vector b = h2_gradient(sigma_a2, sigma_e2);
  double v = b.dot(cov * b);
  return v > 0.0 && std::isfinite(v) ? std::sqrt(v) : std::numeric_limits<double>::quiet_NaN();
}

inline Interval ci_delta_standard(double h2, double sd, double alpha = 0.05) {
  double z = stats::normal_quantile(1.0 - alpha / 2.0);
  Interval ci;
  ci.lo = std::max(0.0, h2 - z * sd);
  ci.hi = std::min(1.0, h2 + z * sd);
  return ci;
}

// Delta method on log(sigma_A2/sigma_E2), mapped back through t -> e^t/(1+e^t).
inline Interval ci_delta_log(double sigma_a2, double sigma_e2, const Matrix& cov,
                             double alpha = 0.05) {
  Vector g(2);
  g << 1.0 / sigma_a2, -1.0 / sigma_e2;
  double v = g.dot(cov * g);
  Interval ci;
  if (!(v > 0.0) || !std::isfinite(v)) return ci;
  double z = stats::normal_quantile(1.0 - alpha / 2.0);
  double t0 = std::log(sigma_a2 / sigma_e2);
  double lo = t0 - z * std::sqrt(v);
  double hi = t0 + z * std::sqrt(v);
  ci.lo = 1.0 / (1.0 + std::exp(-lo));
  ci.hi = 1.0 / (1.0 + std::exp(-hi));
  return ci;
}

namespace detail {

inline HeritabilityEstimate from_fit(const std::string& method, const reml::RemlFit& fit,
                                     double alpha) {
  HeritabilityEstimate est;
  est.method = method;
  est.fit = fit;
  est.monotone = fit.monotone;
  est.sigma_a2 = fit.sigma_a2;
  est.sigma_e2 = fit.sigma_e2;
  if (fit.monotone) {
    est.h2 = 1.0;
    est.ci_standard = {0.0, 1.0};
    est.ci_log = {0.0, 1.0};
    return est;
  }
  est.h2 = fit.h2;
  est.sd = delta_sd(fit.sigma_a2, fit.sigma_e2, fit.ai_cov);
  if (std::isfinite(est.sd)) {
    est.ci_standard = ci_delta_standard(est.h2, est.sd, alpha);
    est.ci_log = ci_delta_log(fit.sigma_a2, fit.sigma_e2, fit.ai_cov, alpha);
  }
  return est;
}

}  // namespace detail

// Individual-level REML on replicated records: y = X beta + Z g + e with
// g ~ N(0, sigma_A^2 K).
inline HeritabilityEstimate h2_replicates(const design::PhenotypeTable& table,
                                          const geno::KinshipMatrix& kin,
                                          const HeritOptions& opt = {}) {
  auto dm = design::build_design(table);
  design::check_estimable(dm);

  auto al = geno::align_to_kinship(dm.genotype_ids, kin);
  const auto& geno_to_model = al.query_to_model;

  reml::VarianceModel vm;
  vm.stage = reml::Stage::individual;
  vm.k = geno::kinship_submatrix(kin.values, al.kin_rows);
  vm.y = table.value;
  vm.x.resize(dm.n_obs, 1 + dm.xc.cols());
  vm.x.col(0).setOnes();
  if (dm.xc.cols() > 0) vm.x.rightCols(dm.xc.cols()) = dm.xc;
  vm.groups.reserve(dm.obs_genotype.size());
  for (int g : dm.obs_genotype)
    vm.groups.push_back(geno_to_model[static_cast<std::size_t>(g)]);

  auto fit = reml::reml_fit(vm, opt.reml);
  return detail::from_fit("replicates", fit, opt.alpha);
}

// Means-level REML on first-stage BLUEs: g_hat = mu 1 + g + eps,
// eps ~ N(0, sigma_E^2 R).
inline HeritabilityEstimate h2_means(const design::GenotypicMeans& means,
                                     const geno::KinshipMatrix& kin,
                                     const HeritOptions& opt = {}) {
  auto al = geno::align_to_kinship(means.genotype_ids, kin);
  const auto& means_to_model = al.query_to_model;
  const Eigen::Index n = static_cast<Eigen::Index>(means.genotype_ids.size());

  reml::VarianceModel vm;
  vm.stage = reml::Stage::means;
  vm.k = geno::kinship_submatrix(kin.values, al.kin_rows);
  vm.y.resize(n);
  vm.r0.resize(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    int mi = means_to_model[static_cast<std::size_t>(i)];
    vm.y(mi) = means.means(i);
    for (Eigen::Index j = 0; j < n; ++j)
      vm.r0(mi, means_to_model[static_cast<std::size_t>(j)]) = means.r(i, j);
  }
  vm.x = Matrix::Ones(n, 1);

  auto fit = reml::reml_fit(vm, opt.reml);
  return detail::from_fit("means", fit, opt.alpha);
}

// F-quantile interval for the ANOVA estimator.
inline Interval ci_broad_sense(double f_ratio, double df_g, double df_env, double r_bar,
                               double alpha = 0.05) {
  double f_hi = stats::f_quantile(1.0 - alpha / 2.0, df_g, df_env);
  double f_lo = stats::f_quantile(alpha / 2.0, df_g, df_env);
  auto bound = [&](double fq) {
    double ratio = f_ratio / fq;
    return (ratio - 1.0) / (ratio + r_bar - 1.0);
  };
  Interval ci;
  ci.lo = std::clamp(bound(f_hi), 0.0, 1.0);
  ci.hi = std::clamp(bound(f_lo), 0.0, 1.0);
  return ci;
}

// sigma_G2 = max(0, (MS_G - MS_Env)/r_bar), H2 = sigma_G2/(sigma_G2 + MS_Env).
inline HeritabilityEstimate broad_sense_h2(const design::AnovaSummary& anova, double r_bar,
                                           double alpha = 0.05) {
  HeritabilityEstimate est;
  est.method = "anova";
  if (anova.ms_env <= 0.0 && anova.ms_g <= 0.0)
    throw ModelError("both ANOVA mean squares are zero; heritability is undefined");
  double sigma_g2 = std::max(0.0, (anova.ms_g - anova.ms_env) / r_bar);
  est.sigma_a2 = sigma_g2;
  est.sigma_e2 = anova.ms_env;
  if (anova.ms_env <= 0.0) {
    est.h2 = 1.0;
    est.ci_standard = {1.0, 1.0};  // F -> inf limit of the quantile bounds
    return est;
  }
  est.h2 = sigma_g2 / (sigma_g2 + anova.ms_env);
  est.ci_standard = ci_broad_sense(anova.ms_g / anova.ms_env, anova.df_g, anova.df_env,
                                   r_bar, alpha);
  return est;
}

inline HeritabilityEstimate broad_sense_h2(const design::PhenotypeTable& table,
                                           double alpha = 0.05) {
  auto dm = design::build_design(table);
  auto anova = design::anova_summary(dm, table.value);
  return broad_sense_h2(anova, design::effective_replicates(dm.replicates), alpha);
}

// Asymptotic sd of the heritability estimator at true variance components
// (sigma_a2, sigma_e2): delta method over the inverse Fisher information.
inline double asymptotic_sd(const Matrix& k_scaled, const IntVector& reps, double sigma_a2,
                            double sigma_e2, reml::Stage stage) {
  const Eigen::Index n = k_scaled.rows();
  if (static_cast<Eigen::Index>(reps.size()) != n)
    throw DataError("replicate counts do not match the kinship dimension");

  reml::VarianceModel vm;
  vm.k = k_scaled;
  vm.stage = stage;
  if (stage == reml::Stage::individual) {
    Eigen::Index n_obs = 0;
    for (int r : reps) {
      if (r <= 0) throw DataError("replicate counts must be positive");
      n_obs += r;
    }
    vm.groups.reserve(static_cast<std::size_t>(n_obs));
    for (Eigen::Index i = 0; i < n; ++i)
      for (int r = 0; r < reps[static_cast<std::size_t>(i)]; ++r)
        vm.groups.push_back(static_cast<int>(i));
    vm.y = Vector::Zero(n_obs);
    vm.x = Matrix::Ones(n_obs, 1);
  } else {
    Vector rinv(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      if (reps[static_cast<std::size_t>(i)] <= 0)
        throw DataError("replicate counts must be positive");
      rinv(i) = 1.0 / static_cast<double>(reps[static_cast<std::size_t>(i)]);
    }
    vm.r0 = rinv.asDiagonal();
    vm.y = Vector::Zero(n);
    vm.x = Matrix::Ones(n, 1);
  }
  auto sm = reml::spectral_prepare(vm);
  Matrix info = reml::fisher_information(sm, sigma_a2, sigma_e2);
  Eigen::FullPivLU<Matrix> lu(info);
  if (!lu.isInvertible())
    throw ModelError("information matrix is singular; asymptotic sd undefined");
  Matrix cov = lu.solve(Matrix::Identity(2, 2));
  return delta_sd(sigma_a2, sigma_e2, cov);
}

inline double asymptotic_sd(const Matrix& k_scaled, int r, double h2, reml::Stage stage) {
  IntVector reps(static_cast<std::size_t>(k_scaled.rows()), r);
  return asymptotic_sd(k_scaled, reps, h2, 1.0 - h2, stage);
}

}  // namespace heritkit::herit
