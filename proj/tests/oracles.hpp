#pragma once

// Deliberately naive reference implementations used only by tests. These
// follow the defining formulas directly (dense algebra, explicit loops) and
// share no code with the library paths they check.

#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include <Eigen/Dense>

namespace oracle {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// Triple-loop kinship from folded calls and frequencies.
inline MatrixXd naive_kinship(const MatrixXd& calls, const VectorXd& f, double c) {
  const Eigen::Index n = calls.rows();
  const Eigen::Index p = calls.cols();
  MatrixXd k = MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) {
      double acc = 0.0;
      for (Eigen::Index l = 0; l < p; ++l) {
        double d = c * f(l) * (1.0 - f(l));
        acc += (calls(i, l) - 2.0 * f(l)) * (calls(j, l) - 2.0 * f(l)) / d;
      }
      k(i, j) = acc / static_cast<double>(p);
    }
  return k;
}

// Restricted log-likelihood evaluated with dense factorizations only:
// -0.5 [ log|V| + log|X'V^-1 X| + y'Py + (N-q) log 2pi ].
inline double dense_restricted_loglik(const VectorXd& y, const MatrixXd& x,
                                      const MatrixXd& g0, const MatrixXd& r0,
                                      double sigma_a2, double sigma_e2) {
  const Eigen::Index n = y.size();
  const Eigen::Index q = x.cols();
  MatrixXd v = sigma_a2 * g0 + sigma_e2 * r0;
  Eigen::LLT<MatrixXd> llt(v);
  if (llt.info() != Eigen::Success) return -std::numeric_limits<double>::infinity();
  double logdet_v = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) logdet_v += 2.0 * std::log(llt.matrixL()(i, i));
  MatrixXd vinv_x = llt.solve(x);
  VectorXd vinv_y = llt.solve(y);
  MatrixXd xtvx = x.transpose() * vinv_x;
  double logdet_xtvx;
  double ytpy;
  if (q > 0) {
    Eigen::LLT<MatrixXd> lx(xtvx);
    if (lx.info() != Eigen::Success) return -std::numeric_limits<double>::infinity();
    logdet_xtvx = 0.0;
    for (Eigen::Index i = 0; i < q; ++i) logdet_xtvx += 2.0 * std::log(lx.matrixL()(i, i));
    VectorXd xty = x.transpose() * vinv_y;
    ytpy = y.dot(vinv_y) - xty.dot(lx.solve(xty));
  } else {
    logdet_xtvx = 0.0;
    ytpy = y.dot(vinv_y);
  }
  double df = static_cast<double>(n - q);
  return -0.5 * (logdet_v + logdet_xtvx + ytpy + df * std::log(2.0 * M_PI));
}

// Profile over the total variance at fixed h2: sigma2_hat = y'P0y/(N-q) with
// V0 = h2 G0 + (1-h2) R0.
inline double dense_profile_loglik(const VectorXd& y, const MatrixXd& x,
                                   const MatrixXd& g0, const MatrixXd& r0, double h2) {
  const Eigen::Index n = y.size();
  const Eigen::Index q = x.cols();
  MatrixXd v0 = h2 * g0 + (1.0 - h2) * r0;
  Eigen::LLT<MatrixXd> llt(v0);
  if (llt.info() != Eigen::Success) return -std::numeric_limits<double>::infinity();
  double logdet_v0 = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) logdet_v0 += 2.0 * std::log(llt.matrixL()(i, i));
  MatrixXd vinv_x = llt.solve(x);
  VectorXd vinv_y = llt.solve(y);
  double logdet_xtvx = 0.0;
  double ytpy;
  if (q > 0) {
    MatrixXd xtvx = x.transpose() * vinv_x;
    Eigen::LLT<MatrixXd> lx(xtvx);
    if (lx.info() != Eigen::Success) return -std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < q; ++i) logdet_xtvx += 2.0 * std::log(lx.matrixL()(i, i));
    VectorXd xty = x.transpose() * vinv_y;
    ytpy = y.dot(vinv_y) - xty.dot(lx.solve(xty));
  } else {
    ytpy = y.dot(vinv_y);
  }
  double df = static_cast<double>(n - q);
  double sigma2 = ytpy / df;
  return -0.5 * (df * std::log(sigma2) + logdet_v0 + logdet_xtvx + df +
                 df * std::log(2.0 * M_PI));
}

// Argmax of the dense profile likelihood over an equispaced h2 grid on
// [lo, hi] with `points` points.
inline double grid_argmax_h2(const VectorXd& y, const MatrixXd& x, const MatrixXd& g0,
                             const MatrixXd& r0, int points, double lo = 1e-6,
                             double hi = 1.0 - 1e-6) {
  double best_h = lo;
  double best_ll = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < points; ++i) {
    double h = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(points - 1);
    double ll = dense_profile_loglik(y, x, g0, r0, h);
    if (ll > best_ll) {
      best_ll = ll;
      best_h = h;
    }
  }
  return best_h;
}

// Dense GLS for fixed V: returns (beta, cov_unscaled = (X'V^-1X)^-1, gRSS).
struct GlsResult {
  VectorXd beta;
  MatrixXd cov;
  double grss;
};

inline GlsResult dense_gls(const VectorXd& y, const MatrixXd& x, const MatrixXd& v) {
  Eigen::LLT<MatrixXd> llt(v);
  MatrixXd vinv_x = llt.solve(x);
  MatrixXd xtvx = x.transpose() * vinv_x;
  Eigen::LLT<MatrixXd> lx(xtvx);
  VectorXd xty = vinv_x.transpose() * y;
  GlsResult r;
  r.beta = lx.solve(xty);
  r.cov = lx.solve(MatrixXd::Identity(x.cols(), x.cols()));
  VectorXd resid = y - x * r.beta;
  r.grss = resid.dot(llt.solve(resid));
  return r;
}

// Dense BLUP closed form: G_hat = d K Z' (d Z K Z' + I)^-1 (y - X beta_gls).
inline VectorXd dense_blup(const VectorXd& y, const MatrixXd& x, const MatrixXd& z,
                           const MatrixXd& k, double sigma_a2, double sigma_e2) {
  const Eigen::Index n_obs = y.size();
  double d = sigma_a2 / sigma_e2;
  MatrixXd zkz = z * k * z.transpose();
  MatrixXd m = d * zkz + MatrixXd::Identity(n_obs, n_obs);
  Eigen::LLT<MatrixXd> llt(m);
  VectorXd resid = y;
  if (x.cols() > 0) {
    MatrixXd v = sigma_a2 * zkz + sigma_e2 * MatrixXd::Identity(n_obs, n_obs);
    GlsResult gls = dense_gls(y, x, v);
    resid -= x * gls.beta;
  }
  return d * k * z.transpose() * llt.solve(resid);
}

// 0.5 tr(P V_j P V_k) with P formed explicitly.
inline MatrixXd dense_fisher(const MatrixXd& x, const MatrixXd& g0, const MatrixXd& r0,
                             double sigma_a2, double sigma_e2) {
  const Eigen::Index n = g0.rows();
  MatrixXd v = sigma_a2 * g0 + sigma_e2 * r0;
  MatrixXd vinv = v.llt().solve(MatrixXd::Identity(n, n));
  MatrixXd p = vinv;
  if (x.cols() > 0) {
    MatrixXd vx = vinv * x;
    MatrixXd xtvx = x.transpose() * vx;
    p -= vx * xtvx.llt().solve(vx.transpose());
  }
  MatrixXd pg = p * g0;
  MatrixXd pr = p * r0;
  MatrixXd info(2, 2);
  info(0, 0) = 0.5 * (pg * pg).trace();
  info(0, 1) = 0.5 * (pg * pr).trace();
  info(1, 0) = info(0, 1);
  info(1, 1) = 0.5 * (pr * pr).trace();
  return info;
}

// Central-difference Hessian of the dense restricted log-likelihood.
inline MatrixXd numerical_hessian(const VectorXd& y, const MatrixXd& x, const MatrixXd& g0,
                                  const MatrixXd& r0, double sigma_a2, double sigma_e2,
                                  double rel_step = 1e-4) {
  auto f = [&](double a, double e) { return dense_restricted_loglik(y, x, g0, r0, a, e); };
  double ha = rel_step * std::max(sigma_a2, 1e-3);
  double he = rel_step * std::max(sigma_e2, 1e-3);
  MatrixXd h(2, 2);
  h(0, 0) = (f(sigma_a2 + ha, sigma_e2) - 2.0 * f(sigma_a2, sigma_e2) +
             f(sigma_a2 - ha, sigma_e2)) / (ha * ha);
  h(1, 1) = (f(sigma_a2, sigma_e2 + he) - 2.0 * f(sigma_a2, sigma_e2) +
             f(sigma_a2, sigma_e2 - he)) / (he * he);
  h(0, 1) = (f(sigma_a2 + ha, sigma_e2 + he) - f(sigma_a2 + ha, sigma_e2 - he) -
             f(sigma_a2 - ha, sigma_e2 + he) + f(sigma_a2 - ha, sigma_e2 - he)) /
            (4.0 * ha * he);
  h(1, 0) = h(0, 1);
  return h;
}

inline double pearson(const VectorXd& a, const VectorXd& b) {
  double ma = a.mean();
  double mb = b.mean();
  VectorXd ca = a.array() - ma;
  VectorXd cb = b.array() - mb;
  return ca.dot(cb) / std::sqrt(ca.squaredNorm() * cb.squaredNorm());
}

// Training PEV as the inverse coefficient block of the mixed-model equations
// with fixed effects absorbed; needs K invertible, residual structure I.
inline MatrixXd mme_pev(const MatrixXd& z, const MatrixXd& x, const MatrixXd& k,
                        double sigma_a2, double sigma_e2) {
  MatrixXd kinv = k.llt().solve(MatrixXd::Identity(k.rows(), k.rows()));
  MatrixXd c = z.transpose() * z + (sigma_e2 / sigma_a2) * kinv;
  if (x.cols() > 0) {
    MatrixXd xtx = x.transpose() * x;
    c -= z.transpose() * x * xtx.llt().solve(x.transpose() * z);
  }
  return sigma_e2 * c.llt().solve(MatrixXd::Identity(c.rows(), c.rows()));
}

}  // namespace oracle
