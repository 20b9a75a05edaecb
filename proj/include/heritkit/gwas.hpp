#pragma once

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "heritkit/common.hpp"
#include "heritkit/design.hpp"
#include "heritkit/geno.hpp"
#include "heritkit/herit.hpp"
#include "heritkit/reml.hpp"
#include "heritkit/stats.hpp"

namespace heritkit::gwas {

struct MarkerResult {
  std::string marker;
  double maf = std::numeric_limits<double>::quiet_NaN();
  double effect = std::numeric_limits<double>::quiet_NaN();
  double se = std::numeric_limits<double>::quiet_NaN();
  double f_stat = std::numeric_limits<double>::quiet_NaN();
  double p = std::numeric_limits<double>::quiet_NaN();
  bool testable = false;
};

struct ScanResult {
  std::vector<MarkerResult> rows;
  reml::Stage stage = reml::Stage::individual;
  double sigma_a2 = 0.0;
  double sigma_e2 = 0.0;
  double df_den = 0.0;
};

struct ScanOptions {
  double maf_min = 0.05;
  int threads = 1;
};

inline reml::RemlFit fit_null(const design::PhenotypeTable& table,
                              const geno::KinshipMatrix& kin,
                              const reml::RemlOptions& opt = {}) {
  herit::HeritOptions ho;
  ho.reml = opt;
  return herit::h2_replicates(table, kin, ho).fit;
}

inline reml::RemlFit fit_null(const design::GenotypicMeans& means,
                              const geno::KinshipMatrix& kin,
                              const reml::RemlOptions& opt = {}) {
  herit::HeritOptions ho;
  ho.reml = opt;
  return herit::h2_means(means, kin, ho).fit;
}

namespace detail {

// Marker scores per model-order genotype.
inline Matrix marker_block(const std::vector<std::string>& model_ids,
                           const geno::GenotypeMatrix& g) {
  std::map<std::string, Eigen::Index> row_of;
  for (std::size_t i = 0; i < g.accessions.size(); ++i)
    row_of.emplace(g.accessions[i], static_cast<Eigen::Index>(i));
  Matrix out(static_cast<Eigen::Index>(model_ids.size()), g.calls.cols());
  for (std::size_t i = 0; i < model_ids.size(); ++i) {
    auto it = row_of.find(model_ids[i]);
    if (it == row_of.end())
      throw DataError("genotype '" + model_ids[i] + "' is not present in the marker "
                      "matrix");
    out.row(static_cast<Eigen::Index>(i)) = g.calls.row(it->second);
  }
  return out;
}

struct ScanCore {
  Matrix rot;        // m1 = rot * x
  Vector dinv;
  Matrix x1;         // rotated base design
  Vector y1;
  Eigen::LLT<Matrix> lla;  // X'V^-1X of the base design
  Vector ainv_b;
  double grss_base = 0.0;
  double se2 = 0.0;
  bool exact = true;
  // one-stage totals
  Vector r_counts;
  Vector zt_y;
  Matrix zt_b;
};

inline void scan_markers(const ScanCore& core, const Matrix& markers,
                         const std::vector<std::string>& names, double df_den,
                         double maf_min, int threads, ScanResult* out) {
  const Eigen::Index p = markers.cols();
  const Eigen::Index n = markers.rows();
  out->rows.assign(static_cast<std::size_t>(p), MarkerResult{});
  const double double_n = 2.0 * static_cast<double>(n);

  parallel_for(static_cast<std::size_t>(p), resolve_threads(threads), [&](std::size_t j) {
    MarkerResult& row = out->rows[j];
    row.marker = names[j];
    Vector x = markers.col(static_cast<Eigen::Index>(j));
    double fhat = x.sum() / double_n;
    row.maf = std::min(fhat, 1.0 - fhat);
    if (row.maf < maf_min) return;

    Vector m1 = core.rot * x;
    Vector dm = (m1.array() * core.dinv.array()).matrix();
    double d = m1.dot(dm);
    Vector u = core.x1.transpose() * dm;
    double c = core.y1.dot(dm);
    if (!core.exact) {
      double d_tot = (core.r_counts.array() * x.array().square()).sum();
      d += (d_tot - m1.squaredNorm()) / core.se2;
      u += (core.zt_b.transpose() * x - core.x1.transpose() * m1) / core.se2;
      c += (core.zt_y.dot(x) - core.y1.dot(m1)) / core.se2;
    }
    if (d <= 0.0) return;
    double s_m = d - u.dot(core.lla.solve(u));
    if (s_m <= 1e-10 * d) return;  // collinear with the base design

    double gamma = (c - u.dot(core.ainv_b)) / s_m;
    double grss = std::max(core.grss_base - gamma * gamma * s_m, 1e-300);
    double s2 = grss / df_den;
    row.effect = gamma;
    row.se = std::sqrt(s2 / s_m);
    row.f_stat = gamma * gamma * s_m / s2;
    row.p = stats::f_sf(row.f_stat, 1.0, df_den);
    row.testable = true;
  });
}

inline ScanCore make_core(const reml::SpectralModel& sm, double sigma_a2,
                          double sigma_e2) {
  ScanCore core;
  core.se2 = sigma_e2;
  core.exact = sm.exact_block;
  core.dinv = (sigma_a2 * sm.lam.array() + sigma_e2).inverse().matrix();
  if (!(core.dinv.array().isFinite().all()) || core.dinv.minCoeff() <= 0.0)
    throw ModelError("covariance matrix V from the null model is singular");
  core.x1 = sm.x1;
  core.y1 = sm.y1;

  Matrix a = sm.x1.transpose() * core.dinv.asDiagonal() * sm.x1;
  Vector b = sm.x1.transpose() * (sm.y1.array() * core.dinv.array()).matrix();
  double ytvy = (sm.y1.array().square() * core.dinv.array()).sum();
  if (!sm.exact_block) {
    a += (sm.xtx - sm.x1.transpose() * sm.x1) / sigma_e2;
    b += (sm.xty - sm.x1.transpose() * sm.y1) / sigma_e2;
    ytvy += (sm.yty - sm.y1.squaredNorm()) / sigma_e2;
  }
  core.lla.compute(a);
  if (core.lla.info() != Eigen::Success)
    throw ModelError("base design is not estimable under the null covariance");
  core.ainv_b = core.lla.solve(b);
  core.grss_base = ytvy - b.dot(core.ainv_b);
  return core;
}

}  // namespace detail

inline ScanResult gls_scan(const design::PhenotypeTable& table,
                           const geno::KinshipMatrix& kin, const geno::GenotypeMatrix& g,
                           const reml::RemlFit& null_fit, const ScanOptions& opt = {}) {
  if (null_fit.monotone)
    std::cerr << "warning: null model is monotone; scanning with boundary variance "
                 "components\n";
  auto dm = design::build_design(table);
  design::check_estimable(dm);
  auto al = geno::align_to_kinship(dm.genotype_ids, kin);
  const Eigen::Index n = static_cast<Eigen::Index>(al.kin_rows.size());

  std::vector<std::string> model_ids(static_cast<std::size_t>(n));
  for (std::size_t gi = 0; gi < dm.genotype_ids.size(); ++gi)
    model_ids[static_cast<std::size_t>(al.query_to_model[gi])] = dm.genotype_ids[gi];

  reml::VarianceModel vm;
  vm.stage = reml::Stage::individual;
  vm.k = geno::kinship_submatrix(kin.values, al.kin_rows);
  vm.y = table.value;
  vm.x.resize(dm.n_obs, 1 + dm.xc.cols());
  vm.x.col(0).setOnes();
  if (dm.xc.cols() > 0) vm.x.rightCols(dm.xc.cols()) = dm.xc;
  for (int gi : dm.obs_genotype)
    vm.groups.push_back(al.query_to_model[static_cast<std::size_t>(gi)]);

  auto basis = reml::make_basis(vm);
  auto sm = reml::assemble(basis, vm.x, vm.y);
  auto core = detail::make_core(sm, null_fit.sigma_a2, null_fit.sigma_e2);
  core.rot = basis.u.transpose() * basis.inv_sqrt_r.cwiseInverse().asDiagonal();
  core.r_counts = basis.inv_sqrt_r.array().square().inverse().matrix();
  core.zt_y = Vector::Zero(n);
  core.zt_b = Matrix::Zero(n, vm.x.cols());
  for (Eigen::Index i = 0; i < dm.n_obs; ++i) {
    int mi = vm.groups[static_cast<std::size_t>(i)];
    core.zt_y(mi) += vm.y(i);
    core.zt_b.row(mi) += vm.x.row(i);
  }

  ScanResult out;
  out.stage = reml::Stage::individual;
  out.sigma_a2 = null_fit.sigma_a2;
  out.sigma_e2 = null_fit.sigma_e2;
  out.df_den = static_cast<double>(dm.n_obs - vm.x.cols() - 1);
  if (out.df_den <= 0.0)
    throw ModelError("not enough residual degrees of freedom for the scan");

  Matrix markers = detail::marker_block(model_ids, g);
  detail::scan_markers(core, markers, g.markers, out.df_den, opt.maf_min, opt.threads,
                       &out);
  return out;
}

inline ScanResult gls_scan(const design::GenotypicMeans& means,
                           const geno::KinshipMatrix& kin, const geno::GenotypeMatrix& g,
                           const reml::RemlFit& null_fit, const ScanOptions& opt = {}) {
  if (null_fit.monotone)
    std::cerr << "warning: null model is monotone; scanning with boundary variance "
                 "components\n";
  auto al = geno::align_to_kinship(means.genotype_ids, kin);
  const Eigen::Index n = static_cast<Eigen::Index>(means.genotype_ids.size());

  std::vector<std::string> model_ids(static_cast<std::size_t>(n));
  reml::VarianceModel vm;
  vm.stage = reml::Stage::means;
  vm.k = geno::kinship_submatrix(kin.values, al.kin_rows);
  vm.y.resize(n);
  vm.r0.resize(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    int mi = al.query_to_model[static_cast<std::size_t>(i)];
    model_ids[static_cast<std::size_t>(mi)] = means.genotype_ids[static_cast<std::size_t>(i)];
    vm.y(mi) = means.means(i);
    for (Eigen::Index j = 0; j < n; ++j)
      vm.r0(mi, al.query_to_model[static_cast<std::size_t>(j)]) = means.r(i, j);
  }
  vm.x = Matrix::Ones(n, 1);

  auto basis = reml::make_basis(vm);
  auto sm = reml::assemble(basis, vm.x, vm.y);
  auto core = detail::make_core(sm, null_fit.sigma_a2, null_fit.sigma_e2);
  Matrix linv = basis.chol_l.triangularView<Eigen::Lower>().solve(Matrix::Identity(n, n));
  core.rot = basis.u.transpose() * linv;

  ScanResult out;
  out.stage = reml::Stage::means;
  out.sigma_a2 = null_fit.sigma_a2;
  out.sigma_e2 = null_fit.sigma_e2;
  out.df_den = static_cast<double>(n - 2);
  if (out.df_den <= 0.0)
    throw ModelError("not enough residual degrees of freedom for the scan");

  Matrix markers = detail::marker_block(model_ids, g);
  detail::scan_markers(core, markers, g.markers, out.df_den, opt.maf_min, opt.threads,
                       &out);
  return out;
}

struct RocPoint {
  double threshold = 0.0;
  int fp = 0;
  int tp = 0;
};

// Threshold sweep over scan p-values; a significant marker within `window`
// positions of a true QTL counts as a true positive.
inline std::vector<RocPoint> roc_curve(const ScanResult& scan,
                                       const std::vector<std::string>& true_ids,
                                       int window = 0) {
  if (true_ids.empty()) throw DataError("true QTL set is empty");
  const int p = static_cast<int>(scan.rows.size());
  std::vector<bool> is_true(static_cast<std::size_t>(p), false);
  std::map<std::string, int> index_of;
  for (int i = 0; i < p; ++i) index_of.emplace(scan.rows[static_cast<std::size_t>(i)].marker, i);
  for (const auto& id : true_ids) {
    auto it = index_of.find(id);
    if (it == index_of.end()) continue;
    int lo = std::max(0, it->second - window);
    int hi = std::min(p - 1, it->second + window);
    for (int i = lo; i <= hi; ++i) is_true[static_cast<std::size_t>(i)] = true;
  }

  std::vector<std::pair<double, bool>> tested;
  for (int i = 0; i < p; ++i) {
    const auto& row = scan.rows[static_cast<std::size_t>(i)];
    if (row.testable && std::isfinite(row.p))
      tested.emplace_back(row.p, is_true[static_cast<std::size_t>(i)]);
  }
  std::sort(tested.begin(), tested.end());

  std::vector<RocPoint> curve;
  int tp = 0, fp = 0;
  for (std::size_t i = 0; i < tested.size(); ++i) {
    if (tested[i].second)
      ++tp;
    else
      ++fp;
    bool last_at_threshold = i + 1 == tested.size() || tested[i + 1].first != tested[i].first;
    if (last_at_threshold) curve.push_back({tested[i].first, fp, tp});
  }
  return curve;
}

// Area under (fp, tp) normalized to the unit square.
inline double roc_auc(const std::vector<RocPoint>& curve) {
  if (curve.empty()) return 0.0;
  const double fp_max = curve.back().fp;
  const double tp_max = curve.back().tp;
  if (tp_max == 0.0) return 0.0;
  if (fp_max == 0.0) return 1.0;
  double auc = 0.0;
  int prev_fp = 0, prev_tp = 0;
  for (const auto& pt : curve) {
    auc += (pt.fp - prev_fp) / fp_max * (pt.tp + prev_tp) / (2.0 * tp_max);
    prev_fp = pt.fp;
    prev_tp = pt.tp;
  }
  return auc;
}

}  // namespace heritkit::gwas
