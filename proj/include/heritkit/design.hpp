#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "heritkit/common.hpp"
#include "heritkit/csv.hpp"

namespace heritkit::design {

struct CovariateColumn {
  std::string name;
  bool is_factor = false;
  std::vector<std::string> raw;
  Vector numeric;
};

// One record per plot/plant: genotype id, trait value, optional covariates.
struct PhenotypeTable {
  std::vector<std::string> genotype;
  Vector value;
  std::vector<CovariateColumn> covariates;
};

// Phenotype CSV: header genotype,value[,cov1,...]; columns named in `factors`
// are treated as discrete, all other covariates as numeric.
inline PhenotypeTable load_phenotypes(const std::string& path,
                                      const std::vector<std::string>& factors = {}) {
  auto rows = csv::read_table(path);
  const auto& header = rows[0];
  if (header.size() < 2) throw DataError("phenotype file needs genotype,value columns: " + path);
  std::set<std::string> factor_set(factors.begin(), factors.end());
  for (const auto& name : factors)
    if (std::find(header.begin() + 2, header.end(), name) == header.end())
      throw DataError("factor '" + name + "' is not a column of " + path);

  PhenotypeTable t;
  const std::size_t n = rows.size() - 1;
  if (n == 0) throw DataError("phenotype file has no records: " + path);
  t.value.resize(static_cast<Eigen::Index>(n));
  t.covariates.resize(header.size() - 2);
  for (std::size_t c = 0; c < t.covariates.size(); ++c) {
    t.covariates[c].name = header[c + 2];
    t.covariates[c].is_factor = factor_set.count(header[c + 2]) > 0;
    if (t.covariates[c].is_factor)
      t.covariates[c].raw.reserve(n);
    else
      t.covariates[c].numeric.resize(static_cast<Eigen::Index>(n));
  }
  for (std::size_t i = 0; i < n; ++i) {
    const auto& r = rows[i + 1];
    if (r.size() != header.size())
      throw DataError("phenotype row " + std::to_string(i + 2) + " has " +
                      std::to_string(r.size()) + " fields, expected " +
                      std::to_string(header.size()) + ": " + path);
    if (r[0].empty()) throw DataError("empty genotype id at row " + std::to_string(i + 2));
    t.genotype.push_back(r[0]);
    t.value(static_cast<Eigen::Index>(i)) =
        csv::parse_double(r[1], "value at row " + std::to_string(i + 2) + " of " + path);
    for (std::size_t c = 0; c < t.covariates.size(); ++c) {
      if (t.covariates[c].is_factor)
        t.covariates[c].raw.push_back(r[c + 2]);
      else
        t.covariates[c].numeric(static_cast<Eigen::Index>(i)) = csv::parse_double(
            r[c + 2], t.covariates[c].name + " at row " + std::to_string(i + 2) + " of " + path);
    }
  }
  return t;
}

// Genotype incidence (kept as an index vector) plus dense covariate columns.
// Genotype ids are sorted; factor covariates are dummy coded dropping the
// first level, since the genotype incidence absorbs the intercept.
struct DesignMatrices {
  std::vector<std::string> genotype_ids;
  IntVector obs_genotype;
  IntVector replicates;
  Matrix xc;
  std::vector<std::string> xc_names;
  Eigen::Index n_obs = 0;
};

inline DesignMatrices build_design(const PhenotypeTable& t) {
  DesignMatrices d;
  d.n_obs = static_cast<Eigen::Index>(t.genotype.size());
  if (d.n_obs == 0) throw DataError("no phenotype records");

  std::map<std::string, int> index;
  for (const auto& id : t.genotype) index.emplace(id, 0);
  int next = 0;
  for (auto& [id, idx] : index) {
    idx = next++;
    d.genotype_ids.push_back(id);
  }
  d.replicates.assign(d.genotype_ids.size(), 0);
  d.obs_genotype.reserve(t.genotype.size());
  for (const auto& id : t.genotype) {
    int idx = index.at(id);
    d.obs_genotype.push_back(idx);
    ++d.replicates[static_cast<std::size_t>(idx)];
  }

  std::vector<Vector> cols;
  for (const auto& cov : t.covariates) {
    if (!cov.is_factor) {
      cols.push_back(cov.numeric);
      d.xc_names.push_back(cov.name);
      continue;
    }
    std::set<std::string> levels(cov.raw.begin(), cov.raw.end());
    if (levels.size() < 2)
      throw DataError("factor '" + cov.name + "' has a single level");
    bool first = true;
    for (const auto& lev : levels) {
      if (first) {  // reference level
        first = false;
        continue;
      }
      Vector col = Vector::Zero(d.n_obs);
      for (Eigen::Index i = 0; i < d.n_obs; ++i)
        if (cov.raw[static_cast<std::size_t>(i)] == lev) col(i) = 1.0;
      cols.push_back(col);
      d.xc_names.push_back(cov.name + "=" + lev);
    }
  }
  d.xc.resize(d.n_obs, static_cast<Eigen::Index>(cols.size()));
  for (std::size_t j = 0; j < cols.size(); ++j)
    d.xc.col(static_cast<Eigen::Index>(j)) = cols[j];
  return d;
}

// Dense [X_G X_C] for rank checks and test oracles.
inline Matrix dense_design(const DesignMatrices& d) {
  const Eigen::Index n = static_cast<Eigen::Index>(d.genotype_ids.size());
  Matrix x = Matrix::Zero(d.n_obs, n + d.xc.cols());
  for (Eigen::Index i = 0; i < d.n_obs; ++i)
    x(i, d.obs_genotype[static_cast<std::size_t>(i)]) = 1.0;
  x.rightCols(d.xc.cols()) = d.xc;
  return x;
}

inline void check_estimable(const DesignMatrices& d) {
  if (d.xc.cols() == 0) return;  // incidence columns are independent by construction
  const Eigen::Index full = static_cast<Eigen::Index>(d.genotype_ids.size()) + d.xc.cols();
  if (d.n_obs < full)
    throw ModelError("design has " + std::to_string(d.n_obs) + " observations for " +
                     std::to_string(full) + " fixed-effect columns");
  Eigen::ColPivHouseholderQR<Matrix> qr(dense_design(d));
  qr.setThreshold(1e-10);
  if (qr.rank() < full)
    throw ModelError("design is rank deficient (genotype and covariate effects are "
                     "not jointly estimable)");
}

// First-stage results: adjusted genotypic means g_hat, their variance
// structure R (Var(g_hat) = sigma_E^2 R), covariate effects, and the
// stage-one residual variance estimate.
struct GenotypicMeans {
  std::vector<std::string> genotype_ids;
  IntVector replicates;
  Vector means;
  Matrix r;
  Vector beta;
  std::vector<std::string> beta_names;
  double sigma_e2_stage1 = std::numeric_limits<double>::quiet_NaN();
  Eigen::Index df_resid = 0;
};

// Least squares for y = X_G g + X_C beta + e via block elimination on the
// normal equations; R is the genotype block of (X'X)^-1.
inline GenotypicMeans compute_blues(const DesignMatrices& d, const Vector& y) {
  if (y.size() != d.n_obs) throw DataError("phenotype length does not match design");
  check_estimable(d);
  const Eigen::Index n = static_cast<Eigen::Index>(d.genotype_ids.size());
  const Eigen::Index k = d.xc.cols();

  Vector rinv(n);
  for (Eigen::Index i = 0; i < n; ++i)
    rinv(i) = 1.0 / static_cast<double>(d.replicates[static_cast<std::size_t>(i)]);

  Vector yg = Vector::Zero(n);
  for (Eigen::Index i = 0; i < d.n_obs; ++i)
    yg(d.obs_genotype[static_cast<std::size_t>(i)]) += y(i);

  GenotypicMeans out;
  out.genotype_ids = d.genotype_ids;
  out.replicates = d.replicates;
  out.beta_names = d.xc_names;

  if (k == 0) {
    out.means = rinv.cwiseProduct(yg);
    out.r = rinv.asDiagonal();
    out.beta = Vector();
  } else {
    Matrix b = Matrix::Zero(n, k);
    for (Eigen::Index i = 0; i < d.n_obs; ++i)
      b.row(d.obs_genotype[static_cast<std::size_t>(i)]) += d.xc.row(i);
    Matrix c = d.xc.transpose() * d.xc;
    Vector yc = d.xc.transpose() * y;

    Matrix dinv_b = rinv.asDiagonal() * b;
    Matrix s = c - b.transpose() * dinv_b;
    Eigen::LLT<Matrix> llt_s(s);
    if (llt_s.info() != Eigen::Success)
      throw ModelError("covariate block is singular after genotype adjustment");
    out.beta = llt_s.solve(yc - dinv_b.transpose() * yg);
    out.means = rinv.cwiseProduct(yg - b * out.beta);

    Eigen::LLT<Matrix> llt_c(c);
    if (llt_c.info() != Eigen::Success) throw ModelError("covariate cross-product is singular");
    Matrix m = Matrix(rinv.cwiseInverse().asDiagonal()) - b * llt_c.solve(b.transpose());
    Eigen::LLT<Matrix> llt_m(m);
    if (llt_m.info() != Eigen::Success)
      throw ModelError("genotype block is singular; means are not estimable");
    out.r = llt_m.solve(Matrix::Identity(n, n));
    out.r = 0.5 * (out.r + out.r.transpose());
  }

  double rss = y.squaredNorm() - out.means.dot(yg);
  if (k > 0) rss -= out.beta.dot(d.xc.transpose() * y);
  out.df_resid = d.n_obs - n - k;
  if (out.df_resid > 0)
    out.sigma_e2_stage1 = std::max(0.0, rss) / static_cast<double>(out.df_resid);
  return out;
}

// (n-1)^-1 [ sum r_i - sum r_i^2 / sum r_i ]
inline double effective_replicates(const IntVector& counts) {
  const std::size_t n = counts.size();
  if (n < 2) throw ModelError("effective replicates needs at least two genotypes");
  double s1 = 0.0, s2 = 0.0;
  for (int r : counts) {
    if (r <= 0) throw DataError("genotype with zero replicates");
    s1 += r;
    s2 += static_cast<double>(r) * r;
  }
  return (s1 - s2 / s1) / static_cast<double>(n - 1);
}

struct AnovaSummary {
  double ss_g = 0.0, ss_env = 0.0;
  double ms_g = 0.0, ms_env = 0.0;
  double df_g = 0.0, df_env = 0.0;
};

// Sequential decomposition: covariates (with intercept) first, genotype last.
inline AnovaSummary anova_summary(const DesignMatrices& d, const Vector& y) {
  if (y.size() != d.n_obs) throw DataError("phenotype length does not match design");
  check_estimable(d);
  const Eigen::Index n = static_cast<Eigen::Index>(d.genotype_ids.size());
  const Eigen::Index k = d.xc.cols();
  if (n < 2) throw ModelError("ANOVA needs at least two genotypes");

  AnovaSummary a;
  a.df_g = static_cast<double>(n - 1);
  a.df_env = static_cast<double>(d.n_obs - n - k);
  if (a.df_env <= 0)
    throw ModelError("no residual degrees of freedom (single replicate per genotype)");

  Matrix x0(d.n_obs, 1 + k);
  x0.col(0).setOnes();
  if (k > 0) x0.rightCols(k) = d.xc;
  Eigen::ColPivHouseholderQR<Matrix> qr0(x0);
  double rss0 = (y - x0 * qr0.solve(y)).squaredNorm();

  Matrix x1 = dense_design(d);
  Eigen::ColPivHouseholderQR<Matrix> qr1(x1);
  double rss1 = (y - x1 * qr1.solve(y)).squaredNorm();

  a.ss_g = std::max(0.0, rss0 - rss1);
  a.ss_env = rss1;
  a.ms_g = a.ss_g / a.df_g;
  a.ms_env = a.ss_env / a.df_env;
  return a;
}

}  // namespace heritkit::design
