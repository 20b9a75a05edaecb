#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "heritkit/common.hpp"

namespace heritkit::reml {

enum class Stage { individual, means };

// Two-variance-component model y ~ N(X beta, sigma_A^2 G0 + sigma_E^2 R0).
// Individual stage: G0 = Z K Z' with Z the genotype incidence, R0 = I.
// Means stage: G0 = K, R0 = R from the first-stage least squares.
struct VarianceModel {
  Stage stage = Stage::individual;
  Vector y;
  Matrix x;         // fixed effects; zero columns means a known zero mean
  Matrix k;         // n x n genetic covariance structure
  IntVector groups; // individual stage: observation -> row of k
  Matrix r0;        // means stage residual structure (ignored for individual)
};

// Y-independent part of the spectral reduction: coordinates in which G0 is
// diagonal and R0 is the identity.
struct SpectralBasis {
  Vector lam;          // eigenvalues of the genetic part, length m
  Matrix u;            // n x m eigenvectors in whitened coordinates
  IntVector groups;    // individual stage incidence
  Vector inv_sqrt_r;   // individual stage: 1/sqrt(r_i)
  Matrix chol_l;       // means stage: lower Cholesky factor of R0
  double logdet_r0 = 0.0;
  Eigen::Index n_total = 0;
  bool whitened = false;  // true when a non-identity R0 was folded in

  // U' (L^-1 v) resp. U' D_{1/sqrt r} Z' v.
  Vector project(const Vector& v) const {
    if (whitened) return u.transpose() * chol_l.triangularView<Eigen::Lower>().solve(v);
    Vector tmp = Vector::Zero(u.rows());
    for (Eigen::Index i = 0; i < v.size(); ++i) tmp(groups[static_cast<std::size_t>(i)]) += v(i);
    tmp.array() *= inv_sqrt_r.array();
    return u.transpose() * tmp;
  }

  // Adjoint map back to observation space: Z D_{1/sqrt r} U w resp. L^-T U w.
  Vector lift(const Vector& w) const {
    Vector tmp = u * w;
    if (whitened) return chol_l.transpose().triangularView<Eigen::Upper>().solve(tmp);
    tmp.array() *= inv_sqrt_r.array();
    Vector out(n_total);
    for (Eigen::Index i = 0; i < n_total; ++i) out(i) = tmp(groups[static_cast<std::size_t>(i)]);
    return out;
  }
};

// Model data in spectral coordinates. When exact_block is set the rotation
// spans the whole space and the remainder terms are identically zero.
struct SpectralModel {
  Vector lam;
  Matrix x1;     // m x q
  Vector y1;     // m
  Matrix xtx;    // q x q totals in whitened coordinates
  Vector xty;
  double yty = 0.0;
  Eigen::Index n_total = 0;
  Eigen::Index q = 0;
  double logdet_r0 = 0.0;
  bool exact_block = true;
  double var_y = 0.0;
};

namespace detail {

inline void clip_small_negatives(Vector& lam) {
  for (Eigen::Index i = 0; i < lam.size(); ++i) {
    if (lam(i) < 0.0) {
      if (lam(i) < -1e-8)
        throw ModelError("genetic covariance structure is not positive semidefinite "
                         "(eigenvalue " + std::to_string(lam(i)) + ")");
      lam(i) = 0.0;
    }
  }
}

}  // namespace detail

inline SpectralBasis make_basis(const VarianceModel& vm) {
  SpectralBasis b;
  const Eigen::Index n = vm.k.rows();
  if (n == 0 || vm.k.cols() != n) throw DataError("kinship matrix must be square");
  if (vm.stage == Stage::individual) {
    b.n_total = vm.y.size();
    if (static_cast<Eigen::Index>(vm.groups.size()) != b.n_total)
      throw DataError("group index length does not match observations");
    IntVector counts(static_cast<std::size_t>(n), 0);
    for (int g : vm.groups) {
      if (g < 0 || g >= n) throw DataError("group index out of range");
      ++counts[static_cast<std::size_t>(g)];
    }
    b.inv_sqrt_r.resize(n);
    Vector sqrt_r(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      int c = counts[static_cast<std::size_t>(i)];
      if (c == 0) throw DataError("genotype without observations in the model");
      sqrt_r(i) = std::sqrt(static_cast<double>(c));
      b.inv_sqrt_r(i) = 1.0 / sqrt_r(i);
    }
    Matrix a = sqrt_r.asDiagonal() * vm.k * sqrt_r.asDiagonal();
    Eigen::SelfAdjointEigenSolver<Matrix> eig(a);
    if (eig.info() != Eigen::Success) throw ModelError("eigendecomposition failed");
    b.lam = eig.eigenvalues();
    detail::clip_small_negatives(b.lam);
    b.u = eig.eigenvectors();
    b.groups = vm.groups;
    b.whitened = false;
    b.logdet_r0 = 0.0;
  } else {
    if (vm.y.size() != n) throw DataError("means vector does not match kinship dimension");
    Matrix r0 = vm.r0.size() > 0 ? vm.r0 : Matrix(Matrix::Identity(n, n));
    Eigen::LLT<Matrix> llt(r0);
    if (llt.info() != Eigen::Success)
      throw ModelError("residual structure R is not positive definite");
    b.chol_l = llt.matrixL();
    b.logdet_r0 = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) b.logdet_r0 += 2.0 * std::log(b.chol_l(i, i));
    Matrix g = b.chol_l.triangularView<Eigen::Lower>().solve(vm.k);
    g = b.chol_l.triangularView<Eigen::Lower>().solve(Matrix(g.transpose()));
    g = 0.5 * (g + g.transpose());
    Eigen::SelfAdjointEigenSolver<Matrix> eig(g);
    if (eig.info() != Eigen::Success) throw ModelError("eigendecomposition failed");
    b.lam = eig.eigenvalues();
    detail::clip_small_negatives(b.lam);
    b.u = eig.eigenvectors();
    b.whitened = true;
    b.n_total = n;
  }
  return b;
}

inline SpectralModel assemble(const SpectralBasis& b, const Matrix& x, const Vector& y) {
  SpectralModel sm;
  sm.lam = b.lam;
  sm.n_total = b.n_total;
  sm.q = x.cols();
  sm.logdet_r0 = b.logdet_r0;
  if (sm.n_total <= sm.q) throw ModelError("model has no residual degrees of freedom");
  sm.y1 = b.project(y);
  sm.x1.resize(b.lam.size(), sm.q);
  for (Eigen::Index j = 0; j < sm.q; ++j) sm.x1.col(j) = b.project(x.col(j));
  sm.exact_block = (b.lam.size() == b.n_total);
  if (sm.exact_block) {
    sm.xtx = sm.x1.transpose() * sm.x1;
    sm.xty = sm.x1.transpose() * sm.y1;
    sm.yty = sm.y1.squaredNorm();
  } else {
    sm.xtx = x.transpose() * x;
    sm.xty = x.transpose() * y;
    sm.yty = y.squaredNorm();
  }
  double mean = y.mean();
  sm.var_y = (y.array() - mean).square().sum() / std::max<double>(1.0, y.size() - 1);
  return sm;
}

inline SpectralModel spectral_prepare(const VarianceModel& vm) {
  return assemble(make_basis(vm), vm.x, vm.y);
}

struct Evaluation {
  double loglik = -std::numeric_limits<double>::infinity();
  Vector grad;   // d loglik / d (sigma_A2, sigma_E2)
  Matrix ai;     // average information, 2 x 2
  double ytpy = 0.0;
  bool ok = false;
};

// Restricted log-likelihood, gradient and average information at
// (sigma_a2, sigma_e2), all in the diagonalized coordinates.
inline Evaluation evaluate(const SpectralModel& sm, double sigma_a2, double sigma_e2,
                           bool derivs = false) {
  Evaluation ev;
  const Eigen::Index m = sm.lam.size();
  const Eigen::Index q = sm.q;
  const double rem = static_cast<double>(sm.n_total - m);
  if (sigma_e2 <= 0.0 || sigma_a2 < 0.0) return ev;

  Vector d = (sigma_a2 * sm.lam.array() + sigma_e2).matrix();
  if (d.minCoeff() <= 0.0) return ev;
  Vector dinv = d.cwiseInverse();

  double logdet_v = d.array().log().sum() + rem * std::log(sigma_e2) + sm.logdet_r0;

  Matrix xtvx;
  Vector xtvy;
  Matrix a_inv;                 // (X'V^-1X)^-1
  Eigen::LLT<Matrix> llt_x;
  double logdet_xtvx = 0.0;
  Vector alpha;                 // GLS coefficients
  if (q > 0) {
    xtvx = sm.x1.transpose() * dinv.asDiagonal() * sm.x1;
    xtvy = sm.x1.transpose() * dinv.cwiseProduct(sm.y1);
    if (!sm.exact_block) {
      xtvx += (sm.xtx - sm.x1.transpose() * sm.x1) / sigma_e2;
      xtvy += (sm.xty - sm.x1.transpose() * sm.y1) / sigma_e2;
    }
    llt_x.compute(xtvx);
    if (llt_x.info() != Eigen::Success) return ev;
    for (Eigen::Index i = 0; i < q; ++i) logdet_xtvx += 2.0 * std::log(llt_x.matrixL()(i, i));
    alpha = llt_x.solve(xtvy);
    a_inv = llt_x.solve(Matrix::Identity(q, q));
  }

  double ytvy = sm.y1.cwiseProduct(dinv).dot(sm.y1);
  if (!sm.exact_block) ytvy += (sm.yty - sm.y1.squaredNorm()) / sigma_e2;
  double ytpy = q > 0 ? ytvy - xtvy.dot(alpha) : ytvy;

  double df = static_cast<double>(sm.n_total - q);
  ev.loglik = -0.5 * (logdet_v + logdet_xtvx + ytpy + df * std::log(2.0 * M_PI));
  ev.ytpy = ytpy;
  ev.ok = std::isfinite(ev.loglik);
  if (!derivs || !ev.ok) return ev;

  Vector u1 = q > 0 ? Vector(dinv.cwiseProduct(sm.y1 - sm.x1 * alpha))
                    : Vector(dinv.cwiseProduct(sm.y1));
  double rem_ss = 0.0;  // || y_rem - X_rem alpha ||^2
  if (!sm.exact_block) {
    rem_ss = sm.yty - sm.y1.squaredNorm();
    if (q > 0) {
      Vector rem_xy = sm.xty - sm.x1.transpose() * sm.y1;
      Matrix rem_xx = sm.xtx - sm.x1.transpose() * sm.x1;
      rem_ss += -2.0 * alpha.dot(rem_xy) + alpha.dot(rem_xx * alpha);
    }
    rem_ss = std::max(0.0, rem_ss);
  }

  // tr(P V_k) and y'P V_k P y, V_1 = genetic part, V_2 = residual part.
  double tr_v1 = sm.lam.cwiseProduct(dinv).sum();
  double tr_v2 = dinv.sum() + rem / sigma_e2;
  if (q > 0) {
    Matrix m1 = sm.x1.transpose() * (sm.lam.array() * dinv.array().square()).matrix().asDiagonal() * sm.x1;
    Matrix m2 = sm.x1.transpose() * dinv.array().square().matrix().asDiagonal() * sm.x1;
    if (!sm.exact_block)
      m2 += (sm.xtx - sm.x1.transpose() * sm.x1) / (sigma_e2 * sigma_e2);
    tr_v1 -= (a_inv * m1).trace();
    tr_v2 -= (a_inv * m2).trace();
  }
  double ypv1py = sm.lam.cwiseProduct(u1).dot(u1);
  double ypv2py = u1.squaredNorm() + rem_ss / (sigma_e2 * sigma_e2);

  ev.grad.resize(2);
  ev.grad(0) = -0.5 * (tr_v1 - ypv1py);
  ev.grad(1) = -0.5 * (tr_v2 - ypv2py);

  // AI_jk = 0.5 (V_j u)' P (V_k u) with u = Py.
  Vector v1u = sm.lam.cwiseProduct(u1);
  Vector z1 = v1u;
  Vector w1, w2;
  if (q > 0) {
    w1 = sm.x1.transpose() * dinv.cwiseProduct(v1u);
    Vector x1tu = sm.x1.transpose() * u1;
    w2 = sm.x1.transpose() * dinv.cwiseProduct(u1);
    if (!sm.exact_block) w2 -= x1tu / sigma_e2;  // X'_rem u_rem = -X'_1 u_1
  }
  double ai11, ai12, ai22;
  if (q > 0) {
    Vector c1 = llt_x.solve(w1);
    Vector c2 = llt_x.solve(w2);
    Vector pz1 = dinv.cwiseProduct(v1u - sm.x1 * c1);
    Vector pz2 = dinv.cwiseProduct(u1 - sm.x1 * c2);
    ai11 = 0.5 * v1u.dot(pz1);
    ai12 = 0.5 * v1u.dot(pz2);
    double utvu = u1.cwiseProduct(dinv).dot(u1) +
                  rem_ss / (sigma_e2 * sigma_e2 * sigma_e2);
    ai22 = 0.5 * (utvu - w2.dot(llt_x.solve(w2)));
  } else {
    ai11 = 0.5 * v1u.dot(dinv.cwiseProduct(v1u));
    ai12 = 0.5 * v1u.dot(dinv.cwiseProduct(u1));
    double utvu = u1.cwiseProduct(dinv).dot(u1) +
                  rem_ss / (sigma_e2 * sigma_e2 * sigma_e2);
    ai22 = 0.5 * utvu;
  }
  ev.ai.resize(2, 2);
  ev.ai << ai11, ai12, ai12, ai22;
  return ev;
}

// Log-likelihood at fixed h2 with the total variance profiled out:
// sigma2_hat = y'P0y/(N-q) for V0 = h2 G + (1-h2) I (whitened coordinates).
inline double profile_loglik_at(const SpectralModel& sm, double h2,
                                double* sigma2_out = nullptr) {
  const Eigen::Index q = sm.q;
  const double rem = static_cast<double>(sm.n_total - sm.lam.size());
  if (h2 <= 0.0 || h2 >= 1.0) return -std::numeric_limits<double>::infinity();
  Vector d = (h2 * sm.lam.array() + (1.0 - h2)).matrix();
  if (d.minCoeff() <= 0.0) return -std::numeric_limits<double>::infinity();
  Vector dinv = d.cwiseInverse();
  double logdet_v0 = d.array().log().sum() + rem * std::log(1.0 - h2) + sm.logdet_r0;

  double logdet_xtvx = 0.0;
  double ytpy;
  double ytvy = sm.y1.cwiseProduct(dinv).dot(sm.y1);
  if (!sm.exact_block) ytvy += (sm.yty - sm.y1.squaredNorm()) / (1.0 - h2);
  if (q > 0) {
    Matrix xtvx = sm.x1.transpose() * dinv.asDiagonal() * sm.x1;
    Vector xtvy = sm.x1.transpose() * dinv.cwiseProduct(sm.y1);
    if (!sm.exact_block) {
      xtvx += (sm.xtx - sm.x1.transpose() * sm.x1) / (1.0 - h2);
      xtvy += (sm.xty - sm.x1.transpose() * sm.y1) / (1.0 - h2);
    }
    Eigen::LLT<Matrix> llt(xtvx);
    if (llt.info() != Eigen::Success) return -std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < q; ++i) logdet_xtvx += 2.0 * std::log(llt.matrixL()(i, i));
    ytpy = ytvy - xtvy.dot(llt.solve(xtvy));
  } else {
    ytpy = ytvy;
  }
  double df = static_cast<double>(sm.n_total - q);
  if (ytpy <= 0.0) return -std::numeric_limits<double>::infinity();
  double sigma2 = ytpy / df;
  if (sigma2_out) *sigma2_out = sigma2;
  return -0.5 * (df * std::log(sigma2) + logdet_v0 + logdet_xtvx + df +
                 df * std::log(2.0 * M_PI));
}

inline Vector profile_loglik(const SpectralModel& sm, const Vector& h2_grid) {
  Vector out(h2_grid.size());
  for (Eigen::Index i = 0; i < h2_grid.size(); ++i)
    out(i) = profile_loglik_at(sm, h2_grid(i));
  return out;
}

// Expected (Fisher) information for (sigma_A2, sigma_E2):
// I_jk = 0.5 tr(P V_j P V_k).
inline Matrix fisher_information(const SpectralModel& sm, double sigma_a2, double sigma_e2) {
  const Eigen::Index q = sm.q;
  const double rem = static_cast<double>(sm.n_total - sm.lam.size());
  Vector d = (sigma_a2 * sm.lam.array() + sigma_e2).matrix();
  if (d.minCoeff() <= 0.0 || sigma_e2 <= 0.0)
    throw ModelError("information matrix requested at a singular V");
  Vector dinv = d.cwiseInverse();
  Vector d2 = dinv.array().square().matrix();
  Vector d3 = dinv.array().cube().matrix();

  double t11 = sm.lam.array().square().matrix().dot(d2);
  double t12 = sm.lam.dot(d2);
  double t22 = d2.sum() + rem / (sigma_e2 * sigma_e2);

  if (q > 0) {
    Matrix rem_xx;
    if (!sm.exact_block) rem_xx = sm.xtx - sm.x1.transpose() * sm.x1;
    Matrix xtvx = sm.x1.transpose() * dinv.asDiagonal() * sm.x1;
    if (!sm.exact_block) xtvx += rem_xx / sigma_e2;
    Eigen::LLT<Matrix> llt(xtvx);
    if (llt.info() != Eigen::Success) throw ModelError("X'V^-1X is singular");
    Matrix a = llt.solve(Matrix::Identity(q, q));

    Matrix m1 = sm.x1.transpose() * sm.lam.cwiseProduct(d2).asDiagonal() * sm.x1;
    Matrix m2 = sm.x1.transpose() * d2.asDiagonal() * sm.x1;
    if (!sm.exact_block) m2 += rem_xx / (sigma_e2 * sigma_e2);
    Matrix m11 = sm.x1.transpose() * sm.lam.array().square().matrix().cwiseProduct(d3).asDiagonal() * sm.x1;
    Matrix m12 = sm.x1.transpose() * sm.lam.cwiseProduct(d3).asDiagonal() * sm.x1;
    Matrix m22 = sm.x1.transpose() * d3.asDiagonal() * sm.x1;
    if (!sm.exact_block) m22 += rem_xx / (sigma_e2 * sigma_e2 * sigma_e2);

    t11 += -2.0 * (a * m11).trace() + (a * m1 * a * m1).trace();
    t12 += -2.0 * (a * m12).trace() + (a * m1 * a * m2).trace();
    t22 += -2.0 * (a * m22).trace() + (a * m2 * a * m2).trace();
  }
  Matrix info(2, 2);
  info << 0.5 * t11, 0.5 * t12, 0.5 * t12, 0.5 * t22;
  return info;
}

struct RemlOptions {
  int max_iterations = 100;
  double loglik_tol = 1e-8;
  double param_tol = 1e-6;
  double h2_min = 1e-6;
  double h2_max = 1.0 - 1e-6;
  double floor_fraction = 1e-10;  // of Var(y)
};

struct RemlFit {
  double sigma_a2 = 0.0;
  double sigma_e2 = 0.0;
  double h2 = 0.0;
  double loglik = 0.0;
  Matrix ai_cov;    // estimated covariance of (sigma_a2_hat, sigma_e2_hat)
  Vector gradient;
  int iterations = 0;
  bool converged = false;
  bool monotone = false;
  std::string boundary;  // "", "sigma_A2" or "sigma_E2"
};

namespace detail {

// Bounded scalar maximization (golden section with parabolic steps).
template <typename F>
double brent_max(F f, double lo, double hi, double tol, int max_iter = 200) {
  const double gold = 0.3819660112501051;
  double a = lo, b = hi;
  double x = a + gold * (b - a);
  double w = x, v = x;
  double fx = f(x), fw = fx, fv = fx;
  double d = 0.0, e = 0.0;
  for (int it = 0; it < max_iter; ++it) {
    double mid = 0.5 * (a + b);
    double tol1 = tol * std::abs(x) + 1e-12;
    if (std::abs(x - mid) <= 2.0 * tol1 - 0.5 * (b - a)) break;
    bool parabolic = false;
    if (std::abs(e) > tol1) {
      double r = (x - w) * (fx - fv);
      double qq = (x - v) * (fx - fw);
      double p = (x - v) * qq - (x - w) * r;
      double q2 = 2.0 * (qq - r);
      if (q2 > 0.0) p = -p;
      q2 = std::abs(q2);
      double etmp = e;
      e = d;
      if (std::abs(p) < std::abs(0.5 * q2 * etmp) && p > q2 * (a - x) && p < q2 * (b - x)) {
        parabolic = true;
        d = p / q2;
        double u = x + d;
        if (u - a < 2.0 * tol1 || b - u < 2.0 * tol1) d = (mid > x ? tol1 : -tol1);
      }
    }
    if (!parabolic) {
      e = (x >= mid ? a - x : b - x);
      d = gold * e;
    }
    double u = std::abs(d) >= tol1 ? x + d : x + (d > 0 ? tol1 : -tol1);
    double fu = f(u);
    if (fu >= fx) {
      if (u >= x) a = x; else b = x;
      v = w; fv = fw;
      w = x; fw = fx;
      x = u; fx = fu;
    } else {
      if (u < x) a = u; else b = u;
      if (fu >= fw || w == x) {
        v = w; fv = fw;
        w = u; fw = fu;
      } else if (fu >= fv || v == x || v == w) {
        v = u; fv = fu;
      }
    }
  }
  return x;
}

}  // namespace detail

// AI-REML with analytic profiling of the total variance, followed by a
// one-dimensional polish of the profile likelihood in h2.
inline RemlFit reml_fit(const SpectralModel& sm, const RemlOptions& opt = {}) {
  RemlFit fit;
  const double var_y = std::max(sm.var_y, std::numeric_limits<double>::min());
  const double floor = opt.floor_fraction * var_y;

  auto clamp_params = [&](double& sa2, double& se2) {
    sa2 = std::max(sa2, floor);
    se2 = std::max(se2, floor);
    double total = sa2 + se2;
    double h = sa2 / total;
    h = std::clamp(h, opt.h2_min, opt.h2_max);
    sa2 = h * total;
    se2 = (1.0 - h) * total;
  };
  auto reprofile = [&](double& sa2, double& se2) {
    double h = sa2 / (sa2 + se2);
    double s2 = 0.0;
    double ll = profile_loglik_at(sm, h, &s2);
    if (std::isfinite(ll) && s2 > 0.0) {
      sa2 = h * s2;
      se2 = (1.0 - h) * s2;
    }
    return ll;
  };

  double sa2 = 0.5 * var_y;
  double se2 = 0.5 * var_y;
  clamp_params(sa2, se2);
  reprofile(sa2, se2);
  Evaluation cur = evaluate(sm, sa2, se2, true);
  if (!cur.ok) throw ModelError("restricted likelihood is not finite at the start values");

  bool tol_met = false;
  int it = 0;
  for (; it < opt.max_iterations && !tol_met; ++it) {
    Vector step;
    Eigen::FullPivLU<Matrix> lu(cur.ai);
    if (lu.isInvertible()) {
      step = lu.solve(cur.grad);
    } else {
      double scale = std::max(1.0, cur.grad.cwiseAbs().maxCoeff());
      step = cur.grad * (0.1 * var_y / scale);
    }
    if (step.dot(cur.grad) <= 0.0) {
      double scale = std::max(1.0, cur.grad.cwiseAbs().maxCoeff());
      step = cur.grad * (0.1 * var_y / scale);
    }

    double lambda = 1.0;
    double na = sa2, ne = se2;
    Evaluation trial;
    bool accepted = false;
    for (int half = 0; half < 30; ++half) {
      na = sa2 + lambda * step(0);
      ne = se2 + lambda * step(1);
      clamp_params(na, ne);
      reprofile(na, ne);
      trial = evaluate(sm, na, ne, true);
      if (trial.ok && trial.loglik >= cur.loglik - 1e-12 * (1.0 + std::abs(cur.loglik))) {
        accepted = true;
        break;
      }
      lambda *= 0.5;
    }
    if (!accepted) break;

    double dll = std::abs(trial.loglik - cur.loglik);
    double dpar = std::max(std::abs(na - sa2) / (std::abs(sa2) + floor),
                           std::abs(ne - se2) / (std::abs(se2) + floor));
    sa2 = na;
    se2 = ne;
    cur = trial;
    if (dll <= opt.loglik_tol * (1.0 + std::abs(cur.loglik)) && dpar <= opt.param_tol)
      tol_met = true;
  }
  fit.iterations = it;

  // Polish in h2: coarse grid guard plus Brent around the best candidate.
  double h_cur = sa2 / (sa2 + se2);
  const int coarse_n = 33;
  double best_h = h_cur;
  double best_ll = profile_loglik_at(sm, h_cur);
  double grid_min = best_ll, grid_max = best_ll;
  for (int i = 0; i < coarse_n; ++i) {
    double h = opt.h2_min +
               (opt.h2_max - opt.h2_min) * static_cast<double>(i) / (coarse_n - 1);
    double ll = profile_loglik_at(sm, h);
    grid_min = std::min(grid_min, ll);
    grid_max = std::max(grid_max, ll);
    if (ll > best_ll) {
      best_ll = ll;
      best_h = h;
    }
  }
  double width = (opt.h2_max - opt.h2_min) / (coarse_n - 1);
  double lo = std::max(opt.h2_min, best_h - width);
  double hi = std::min(opt.h2_max, best_h + width);
  double h_opt = detail::brent_max([&](double h) { return profile_loglik_at(sm, h); },
                                   lo, hi, 1e-10);
  if (profile_loglik_at(sm, h_opt) < best_ll) h_opt = best_h;

  double flat_tol = 1e-9 * std::max(1.0, std::abs(grid_max));
  bool flat = (grid_max - grid_min) < std::max(flat_tol, 1e-9);
  bool at_top = h_opt >= 1.0 - 1e-4;
  bool at_bottom = h_opt <= opt.h2_min * (1.0 + 1e-9);

  fit.monotone = false;
  if (at_top || flat) {
    // Confirm against a fine grid: nondecreasing within numerical wiggle.
    const int fine_n = 99;
    double prev = -std::numeric_limits<double>::infinity();
    bool nondecreasing = true;
    double lmax = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < fine_n; ++i) {
      double h = opt.h2_min +
                 (opt.h2_max - opt.h2_min) * static_cast<double>(i) / (fine_n - 1);
      double ll = profile_loglik_at(sm, h);
      lmax = std::max(lmax, ll);
      if (i > 0 && ll < prev - 1e-8 * (1.0 + std::abs(lmax))) {
        nondecreasing = false;
        break;
      }
      prev = ll;
    }
    fit.monotone = nondecreasing;
  }

  if (fit.monotone) {
    double s2 = 0.0;
    profile_loglik_at(sm, opt.h2_max, &s2);
    fit.sigma_e2 = floor;
    fit.sigma_a2 = std::max(floor, s2 - floor);
    fit.boundary = "sigma_E2";
    fit.h2 = fit.sigma_a2 / (fit.sigma_a2 + fit.sigma_e2);
    fit.loglik = profile_loglik_at(sm, opt.h2_max);
    fit.converged = true;
  } else {
    double s2 = 0.0;
    fit.loglik = profile_loglik_at(sm, h_opt, &s2);
    fit.sigma_a2 = h_opt * s2;
    fit.sigma_e2 = (1.0 - h_opt) * s2;
    fit.h2 = h_opt;
    if (at_bottom) fit.boundary = "sigma_A2";
    else if (h_opt >= opt.h2_max * (1.0 - 1e-12)) fit.boundary = "sigma_E2";
    fit.converged = std::isfinite(fit.loglik);
  }
  if (!std::isfinite(fit.loglik))
    throw ModelError("REML did not reach a finite optimum");

  Evaluation final_ev = evaluate(sm, fit.sigma_a2, fit.sigma_e2, true);
  if (final_ev.ok) {
    fit.gradient = final_ev.grad;
    Eigen::FullPivLU<Matrix> lu(final_ev.ai);
    if (lu.isInvertible() && lu.rcond() > 1e-14) {
      fit.ai_cov = lu.solve(Matrix::Identity(2, 2));
    } else {
      fit.ai_cov = Matrix::Constant(2, 2, std::numeric_limits<double>::infinity());
    }
  } else {
    fit.gradient = Vector::Zero(2);
    fit.ai_cov = Matrix::Constant(2, 2, std::numeric_limits<double>::infinity());
  }
  return fit;
}

inline RemlFit reml_fit(const VarianceModel& vm, const RemlOptions& opt = {}) {
  return reml_fit(spectral_prepare(vm), opt);
}

}  // namespace heritkit::reml
