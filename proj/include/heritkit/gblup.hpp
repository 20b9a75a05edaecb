#pragma once

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "heritkit/common.hpp"
#include "heritkit/design.hpp"
#include "heritkit/geno.hpp"
#include "heritkit/reml.hpp"

namespace heritkit::gblup {

struct BlupFit {
  reml::Stage stage = reml::Stage::individual;
  double sigma_a2 = 0.0;
  double sigma_e2 = 0.0;
  double delta = 0.0;
  Vector g_hat;
  Vector beta;
  Vector alpha;  // Z' V^-1 (y - X beta)
  Matrix ztpz;   // Z' P Z with P the GLS projector
  std::vector<std::string> genotype_ids;
};

struct PredictionSet {
  Matrix k_pred_obs;
  Matrix k_pred_pred;
  Vector g_pred_hat;
  Matrix pev;
};

inline BlupFit fit_blup(reml::Stage stage, const reml::SpectralBasis& basis,
                        const reml::SpectralModel& sm, const Matrix& k, double sigma_a2,
                        double sigma_e2) {
  if (sigma_a2 < 0.0 || sigma_e2 < 0.0 || sigma_a2 + sigma_e2 <= 0.0)
    throw ModelError("variance components must be nonnegative and not both zero");
  if (sigma_e2 <= 0.0 && !sm.exact_block && sm.q > 0)
    throw ModelError("zero residual variance is not identifiable with replicated "
                     "records and fixed effects");
  if (k.rows() != basis.u.rows()) throw DataError("kinship does not match the basis");
  Vector d = (sigma_a2 * sm.lam.array() + sigma_e2).matrix();
  if (d.minCoeff() <= 0.0) throw ModelError("covariance matrix V is singular");
  Vector dinv = d.cwiseInverse();

  // Z'V^-1 v = M D^-1 (U1' v); the remainder block cancels because U is square.
  Matrix m;
  if (basis.whitened)
    m = basis.chol_l.transpose().triangularView<Eigen::Upper>().solve(basis.u);
  else
    m = basis.inv_sqrt_r.cwiseInverse().asDiagonal() * basis.u;
  Matrix md = m * dinv.asDiagonal();

  BlupFit fit;
  fit.stage = stage;
  fit.sigma_a2 = sigma_a2;
  fit.sigma_e2 = sigma_e2;
  fit.delta = sigma_e2 > 0.0 ? sigma_a2 / sigma_e2
                             : std::numeric_limits<double>::infinity();
  fit.ztpz = md * m.transpose();
  if (sm.q > 0) {
    Matrix a = sm.x1.transpose() * dinv.asDiagonal() * sm.x1;
    Vector b = sm.x1.transpose() * (sm.y1.array() * dinv.array()).matrix();
    if (!sm.exact_block) {
      a += (sm.xtx - sm.x1.transpose() * sm.x1) / sigma_e2;
      b += (sm.xty - sm.x1.transpose() * sm.y1) / sigma_e2;
    }
    Eigen::LLT<Matrix> lla(a);
    if (lla.info() != Eigen::Success)
      throw ModelError("X'V^-1X is singular; fixed effects are not estimable");
    fit.beta = lla.solve(b);
    Matrix ztvx = md * sm.x1;
    fit.ztpz -= ztvx * lla.solve(ztvx.transpose());
    fit.alpha = md * (sm.y1 - sm.x1 * fit.beta);
  } else {
    fit.alpha = md * sm.y1;
  }
  fit.ztpz = (0.5 * (fit.ztpz + fit.ztpz.transpose())).eval();
  fit.g_hat = sigma_a2 * (k * fit.alpha);
  return fit;
}

inline BlupFit fit_blup(const reml::VarianceModel& vm, double sigma_a2, double sigma_e2) {
  auto basis = reml::make_basis(vm);
  auto sm = reml::assemble(basis, vm.x, vm.y);
  return fit_blup(vm.stage, basis, sm, vm.k, sigma_a2, sigma_e2);
}

inline BlupFit fit_blup(const reml::VarianceModel& vm, const reml::RemlFit& rf) {
  return fit_blup(vm, rf.sigma_a2, rf.sigma_e2);
}

inline Vector predict_unobserved(const BlupFit& fit, const Matrix& k_pred_obs) {
  if (k_pred_obs.cols() != fit.alpha.size())
    throw DataError("cross-kinship has " + std::to_string(k_pred_obs.cols()) +
                    " columns for " + std::to_string(fit.alpha.size()) +
                    " training genotypes");
  return fit.sigma_a2 * (k_pred_obs * fit.alpha);
}

// Var(G_hat - G) over the training genotypes; delta treated as known.
inline Matrix pev_training(const BlupFit& fit, const Matrix& k) {
  if (k.rows() != fit.alpha.size()) throw DataError("kinship does not match the fit");
  double s4 = fit.sigma_a2 * fit.sigma_a2;
  Matrix out = fit.sigma_a2 * k - s4 * k * fit.ztpz * k;
  return 0.5 * (out + out.transpose());
}

inline Matrix pev_validation(const BlupFit& fit, const Matrix& k_pred_obs,
                             const Matrix& k_pred_pred) {
  if (k_pred_obs.cols() != fit.alpha.size() || k_pred_pred.rows() != k_pred_obs.rows())
    throw DataError("prediction kinship blocks have inconsistent dimensions");
  double s4 = fit.sigma_a2 * fit.sigma_a2;
  Matrix out = fit.sigma_a2 * k_pred_pred -
               s4 * k_pred_obs * fit.ztpz * k_pred_obs.transpose();
  return 0.5 * (out + out.transpose());
}

inline void predict_unobserved(const BlupFit& fit, PredictionSet& set,
                               bool want_pev = false) {
  set.g_pred_hat = predict_unobserved(fit, set.k_pred_obs);
  if (want_pev) set.pev = pev_validation(fit, set.k_pred_obs, set.k_pred_pred);
}

// Y_hat = X beta + G[group] + offset; pass stage-one covariate effects as the
// offset for means-stage fits.
inline Vector predict_observations(const BlupFit& fit, const Matrix& x_pred,
                                   const IntVector& groups, const Vector& g,
                                   const Vector& offset = Vector()) {
  const Eigen::Index n = static_cast<Eigen::Index>(groups.size());
  if (x_pred.rows() != n && x_pred.cols() > 0)
    throw DataError("prediction design does not match the observation count");
  if (x_pred.cols() != fit.beta.size())
    throw DataError("prediction design has " + std::to_string(x_pred.cols()) +
                    " columns for " + std::to_string(fit.beta.size()) +
                    " fixed effects");
  Vector out = x_pred.cols() > 0 ? Vector(x_pred * fit.beta) : Vector(Vector::Zero(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    int gi = groups[static_cast<std::size_t>(i)];
    if (gi < 0 || gi >= g.size()) throw DataError("group index out of range");
    out(i) += g(gi);
  }
  if (offset.size() > 0) {
    if (offset.size() != n) throw DataError("offset length does not match observations");
    out += offset;
  }
  return out;
}

// Var(G_hat - G) for the balanced means model with known zero mean when the
// shrinkage uses (sa2_hat, se2_hat) while the data follow (sa2, se2); R = I/r.
inline Matrix shrinkage_variance(const Matrix& k, double r, double sa2_hat,
                                 double se2_hat, double sa2, double se2) {
  const Eigen::Index n = k.rows();
  if (r <= 0.0) throw DataError("replicate count must be positive");
  Matrix w = sa2_hat * k + (se2_hat / r) * Matrix::Identity(n, n);
  Eigen::LLT<Matrix> llt(w);
  if (llt.info() != Eigen::Success)
    throw ModelError("shrinkage system is singular; kinship must be invertible");
  Matrix s = sa2_hat * k * llt.solve(Matrix::Identity(n, n));
  Matrix ka = sa2 * k;
  Matrix truth = ka + (se2 / r) * Matrix::Identity(n, n);
  Matrix out = ka - s * ka - ka * s.transpose() + s * truth * s.transpose();
  return 0.5 * (out + out.transpose());
}

struct CvOptions {
  int folds = 5;
  int repeats = 1;
  std::uint64_t seed = 0;
  reml::RemlOptions reml;
};

struct CvRecord {
  int repeat = 0;
  reml::Stage stage = reml::Stage::individual;
  double h2_hat = std::numeric_limits<double>::quiet_NaN();
  double r_train = std::numeric_limits<double>::quiet_NaN();
  double r_valid = std::numeric_limits<double>::quiet_NaN();
};

namespace detail {

inline double pearson(const Vector& a, const Vector& b) {
  double ma = a.mean(), mb = b.mean();
  Vector ca = a.array() - ma, cb = b.array() - mb;
  double den = ca.norm() * cb.norm();
  if (den <= 0.0) return std::numeric_limits<double>::quiet_NaN();
  return ca.dot(cb) / den;
}

}  // namespace detail

// Per repeat: hold out 1/folds of the genotypes, fit both stages on the rest,
// predict the held-out observations.
inline std::vector<CvRecord> cross_validate(const design::PhenotypeTable& table,
                                            const geno::KinshipMatrix& kin,
                                            const CvOptions& opt = {}) {
  if (opt.folds < 2) throw DataError("folds must be at least 2");
  if (opt.repeats < 1) throw DataError("repeats must be at least 1");

  auto dm = design::build_design(table);
  auto al = geno::align_to_kinship(dm.genotype_ids, kin);
  Matrix k_all = geno::kinship_submatrix(kin.values, al.kin_rows);
  const int n_geno = static_cast<int>(dm.genotype_ids.size());
  const int n_hold = n_geno / opt.folds;
  if (n_hold < 2 || n_geno - n_hold < 2)
    throw ModelError("cross-validation needs at least two genotypes on each side of "
                     "the partition");

  std::vector<std::string> model_ids(static_cast<std::size_t>(n_geno));
  for (int g = 0; g < n_geno; ++g)
    model_ids[static_cast<std::size_t>(al.query_to_model[static_cast<std::size_t>(g)])] =
        dm.genotype_ids[static_cast<std::size_t>(g)];

  std::vector<CvRecord> records;
  for (int rep = 0; rep < opt.repeats; ++rep) {
    auto rng = substream(opt.seed, static_cast<std::uint64_t>(rep));
    std::vector<int> perm(static_cast<std::size_t>(n_geno));
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<int> valid_model(perm.begin(), perm.begin() + n_hold);
    std::vector<int> train_model(perm.begin() + n_hold, perm.end());
    std::sort(valid_model.begin(), valid_model.end());
    std::sort(train_model.begin(), train_model.end());

    std::vector<int> train_local(static_cast<std::size_t>(n_geno), -1);
    std::vector<int> valid_local(static_cast<std::size_t>(n_geno), -1);
    for (std::size_t i = 0; i < train_model.size(); ++i)
      train_local[static_cast<std::size_t>(train_model[i])] = static_cast<int>(i);
    for (std::size_t i = 0; i < valid_model.size(); ++i)
      valid_local[static_cast<std::size_t>(valid_model[i])] = static_cast<int>(i);

    std::vector<Eigen::Index> rows_t, rows_v;
    for (Eigen::Index i = 0; i < dm.n_obs; ++i) {
      int mi = al.query_to_model[static_cast<std::size_t>(
          dm.obs_genotype[static_cast<std::size_t>(i)])];
      if (train_local[static_cast<std::size_t>(mi)] >= 0)
        rows_t.push_back(i);
      else
        rows_v.push_back(i);
    }

    design::DesignMatrices dsub;
    dsub.n_obs = static_cast<Eigen::Index>(rows_t.size());
    for (int mi : train_model)
      dsub.genotype_ids.push_back(model_ids[static_cast<std::size_t>(mi)]);
    dsub.replicates.assign(train_model.size(), 0);
    dsub.xc.resize(dsub.n_obs, dm.xc.cols());
    dsub.xc_names = dm.xc_names;
    Vector y_t(dsub.n_obs);
    for (std::size_t i = 0; i < rows_t.size(); ++i) {
      int mi = al.query_to_model[static_cast<std::size_t>(
          dm.obs_genotype[static_cast<std::size_t>(rows_t[i])])];
      int li = train_local[static_cast<std::size_t>(mi)];
      dsub.obs_genotype.push_back(li);
      ++dsub.replicates[static_cast<std::size_t>(li)];
      if (dm.xc.cols() > 0) dsub.xc.row(static_cast<Eigen::Index>(i)) = dm.xc.row(rows_t[i]);
      y_t(static_cast<Eigen::Index>(i)) = table.value(rows_t[i]);
    }

    Matrix xc_v(static_cast<Eigen::Index>(rows_v.size()), dm.xc.cols());
    Vector y_v(static_cast<Eigen::Index>(rows_v.size()));
    IntVector groups_v;
    for (std::size_t i = 0; i < rows_v.size(); ++i) {
      int mi = al.query_to_model[static_cast<std::size_t>(
          dm.obs_genotype[static_cast<std::size_t>(rows_v[i])])];
      groups_v.push_back(valid_local[static_cast<std::size_t>(mi)]);
      if (dm.xc.cols() > 0) xc_v.row(static_cast<Eigen::Index>(i)) = dm.xc.row(rows_v[i]);
      y_v(static_cast<Eigen::Index>(i)) = table.value(rows_v[i]);
    }

    Matrix k_t = Matrix(static_cast<Eigen::Index>(train_model.size()),
                        static_cast<Eigen::Index>(train_model.size()));
    for (std::size_t a = 0; a < train_model.size(); ++a)
      for (std::size_t b = 0; b < train_model.size(); ++b)
        k_t(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) =
            k_all(train_model[a], train_model[b]);
    Matrix k_po(static_cast<Eigen::Index>(valid_model.size()),
                static_cast<Eigen::Index>(train_model.size()));
    for (std::size_t a = 0; a < valid_model.size(); ++a)
      for (std::size_t b = 0; b < train_model.size(); ++b)
        k_po(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) =
            k_all(valid_model[a], train_model[b]);

    try {
      design::check_estimable(dsub);

      Matrix x_t(dsub.n_obs, 1 + dm.xc.cols());
      x_t.col(0).setOnes();
      if (dm.xc.cols() > 0) x_t.rightCols(dm.xc.cols()) = dsub.xc;
      Matrix x_v(static_cast<Eigen::Index>(rows_v.size()), x_t.cols());
      x_v.col(0).setOnes();
      if (dm.xc.cols() > 0) x_v.rightCols(dm.xc.cols()) = xc_v;

      reml::VarianceModel vm1;
      vm1.stage = reml::Stage::individual;
      vm1.y = y_t;
      vm1.x = x_t;
      vm1.k = k_t;
      vm1.groups = dsub.obs_genotype;
      auto basis1 = reml::make_basis(vm1);
      auto sm1 = reml::assemble(basis1, vm1.x, vm1.y);
      auto rf1 = reml::reml_fit(sm1, opt.reml);
      auto bf1 = fit_blup(reml::Stage::individual, basis1, sm1, k_t, rf1.sigma_a2,
                          rf1.sigma_e2);
      Vector fitted1 = predict_observations(bf1, x_t, dsub.obs_genotype, bf1.g_hat);
      Vector gpred1 = predict_unobserved(bf1, k_po);
      Vector pred1 = predict_observations(bf1, x_v, groups_v, gpred1);
      records.push_back({rep, reml::Stage::individual,
                         rf1.monotone ? 1.0 : rf1.h2, detail::pearson(fitted1, y_t),
                         detail::pearson(pred1, y_v)});

      auto blues = design::compute_blues(dsub, y_t);
      reml::VarianceModel vm2;
      vm2.stage = reml::Stage::means;
      vm2.y = blues.means;
      vm2.x = Matrix::Ones(blues.means.size(), 1);
      vm2.k = k_t;
      vm2.r0 = blues.r;
      auto basis2 = reml::make_basis(vm2);
      auto sm2 = reml::assemble(basis2, vm2.x, vm2.y);
      auto rf2 = reml::reml_fit(sm2, opt.reml);
      auto bf2 = fit_blup(reml::Stage::means, basis2, sm2, k_t, rf2.sigma_a2,
                          rf2.sigma_e2);
      Vector off_t = dm.xc.cols() > 0 ? Vector(dsub.xc * blues.beta) : Vector();
      Vector off_v = dm.xc.cols() > 0 ? Vector(xc_v * blues.beta) : Vector();
      Vector fitted2 = predict_observations(bf2, Matrix::Ones(dsub.n_obs, 1),
                                            dsub.obs_genotype, bf2.g_hat, off_t);
      Vector gpred2 = predict_unobserved(bf2, k_po);
      Vector pred2 = predict_observations(
          bf2, Matrix::Ones(static_cast<Eigen::Index>(rows_v.size()), 1), groups_v,
          gpred2, off_v);
      records.push_back({rep, reml::Stage::means, rf2.monotone ? 1.0 : rf2.h2,
                         detail::pearson(fitted2, y_t), detail::pearson(pred2, y_v)});
    } catch (const ModelError& e) {
      std::cerr << "warning: repeat " << rep << " dropped: " << e.what() << "\n";
    }
  }
  return records;
}

}  // namespace heritkit::gblup
