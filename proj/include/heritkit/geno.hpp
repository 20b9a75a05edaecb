#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "heritkit/common.hpp"
#include "heritkit/csv.hpp"

namespace heritkit::geno {

enum class GenoMode { inbred, outbred };

// Allele calls per accession (rows) and marker (columns). Observed calls are
// 0/2 for inbred lines and 0/1/2 outbred; mean-imputed cells may be fractional.
struct GenotypeMatrix {
  std::vector<std::string> accessions;
  std::vector<std::string> markers;
  Matrix calls;
  GenoMode mode = GenoMode::inbred;
};

// Minor-allele frequencies, folded to (0, 0.5].
struct AlleleFrequencies {
  std::vector<std::string> markers;
  Vector f;
};

struct KinshipMatrix {
  std::vector<std::string> accessions;
  Matrix values;
};

namespace detail {

inline bool valid_call(double v, GenoMode mode) {
  if (v == 0.0 || v == 2.0) return true;
  return mode == GenoMode::outbred && v == 1.0;
}

}  // namespace detail

// Reads the accession-by-marker call matrix. Header: accession,<marker ids>;
// with markers_as_rows the file is transposed (header carries accession ids).
// Empty cells are missing: rejected unless impute_mean, which substitutes the
// marker mean call (2f from non-missing entries).
inline GenotypeMatrix load_genotypes(const std::string& path, GenoMode mode,
                                     bool markers_as_rows = false,
                                     bool impute_mean = false) {
  auto rows = csv::read_table(path);
  const auto& header = rows[0];
  if (header.size() < 2) throw DataError("genotype file needs at least one marker: " + path);

  GenotypeMatrix g;
  g.mode = mode;
  std::size_t nr = rows.size() - 1;
  std::size_t nc = header.size() - 1;
  if (markers_as_rows) {
    g.accessions.assign(header.begin() + 1, header.end());
    g.markers.reserve(nr);
  } else {
    g.markers.assign(header.begin() + 1, header.end());
    g.accessions.reserve(nr);
  }

  Matrix raw(nr, nc);
  std::vector<std::pair<std::size_t, std::size_t>> missing;
  for (std::size_t i = 0; i < nr; ++i) {
    const auto& r = rows[i + 1];
    if (r.size() != header.size())
      throw DataError("row " + std::to_string(i + 2) + " has " + std::to_string(r.size()) +
                      " fields, expected " + std::to_string(header.size()) + ": " + path);
    if (markers_as_rows)
      g.markers.push_back(r[0]);
    else
      g.accessions.push_back(r[0]);
    for (std::size_t j = 0; j < nc; ++j) {
      const std::string& cell = r[j + 1];
      if (cell.empty()) {
        missing.emplace_back(i, j);
        raw(i, j) = std::numeric_limits<double>::quiet_NaN();
        continue;
      }
      double v = csv::parse_double(cell, "row " + std::to_string(i + 2) + " of " + path);
      if (!detail::valid_call(v, mode))
        throw DataError("invalid call " + cell + " at row " + std::to_string(i + 2) +
                        ", column " + std::to_string(j + 2) + " of " + path +
                        (mode == GenoMode::inbred ? " (inbred data allows 0 or 2)"
                                                  : " (outbred data allows 0, 1 or 2)"));
      raw(i, j) = v;
    }
  }

  if (markers_as_rows) raw.transposeInPlace();
  if (!missing.empty() && !impute_mean) {
    auto [i, j] = missing.front();
    throw DataError("missing call at data row " + std::to_string(i + 1) + ", column " +
                    std::to_string(j + 2) + " of " + path + " (" +
                    std::to_string(missing.size()) + " missing total; use --impute-mean)");
  }
  if (impute_mean) {
    for (Eigen::Index j = 0; j < raw.cols(); ++j) {
      double sum = 0.0;
      Eigen::Index cnt = 0;
      for (Eigen::Index i = 0; i < raw.rows(); ++i)
        if (!std::isnan(raw(i, j))) { sum += raw(i, j); ++cnt; }
      if (cnt == 0)
        throw DataError("marker " + g.markers[static_cast<std::size_t>(j)] +
                        " has no observed calls: " + path);
      double mean = sum / static_cast<double>(cnt);
      for (Eigen::Index i = 0; i < raw.rows(); ++i)
        if (std::isnan(raw(i, j))) raw(i, j) = mean;
    }
  }

  g.calls = std::move(raw);
  if (g.accessions.size() != static_cast<std::size_t>(g.calls.rows()) ||
      g.markers.size() != static_cast<std::size_t>(g.calls.cols()))
    throw DataError("inconsistent genotype dimensions: " + path);
  return g;
}

// Computes minor-allele frequencies, folding columns with f > 0.5 (calls are
// recoded x <- 2 - x) and removing monomorphic markers plus any below min_maf.
// The matrix is modified in place to the folded, filtered set.
inline AlleleFrequencies allele_frequencies(GenotypeMatrix& g, double min_maf = 0.0) {
  const Eigen::Index n = g.calls.rows();
  if (n == 0) throw DataError("no accessions");
  std::vector<Eigen::Index> keep;
  Vector f_all(g.calls.cols());
  for (Eigen::Index j = 0; j < g.calls.cols(); ++j) {
    double f = g.calls.col(j).mean() / 2.0;
    if (f > 0.5) {
      g.calls.col(j) = (2.0 - g.calls.col(j).array()).matrix();
      f = 1.0 - f;
    }
    f_all(j) = f;
    if (f > 0.0 && f >= min_maf) keep.push_back(j);
  }
  AlleleFrequencies out;
  out.f.resize(static_cast<Eigen::Index>(keep.size()));
  out.markers.reserve(keep.size());
  Matrix filtered(n, static_cast<Eigen::Index>(keep.size()));
  for (std::size_t k = 0; k < keep.size(); ++k) {
    filtered.col(static_cast<Eigen::Index>(k)) = g.calls.col(keep[k]);
    out.f(static_cast<Eigen::Index>(k)) = f_all(keep[k]);
    out.markers.push_back(g.markers[static_cast<std::size_t>(keep[k])]);
  }
  g.calls = std::move(filtered);
  g.markers = out.markers;
  return out;
}

// K_ij = (1/p) sum_l (x_il - 2 f_l)(x_jl - 2 f_l) / (c f_l (1 - f_l)),
// c = 4 for inbred lines, 2 for outbred material. Marker blocks accumulate
// independently and are summed in block order, so the result does not depend
// on the thread count.
inline KinshipMatrix compute_kinship(const GenotypeMatrix& g, const AlleleFrequencies& freq,
                                     unsigned threads = 1) {
  const Eigen::Index n = g.calls.rows();
  const Eigen::Index p = g.calls.cols();
  if (p == 0) throw ModelError("no polymorphic markers for kinship");
  if (freq.f.size() != p) throw DataError("allele frequencies do not match marker count");
  const double c = g.mode == GenoMode::inbred ? 4.0 : 2.0;

  constexpr Eigen::Index kBlock = 256;
  const std::size_t nblocks = static_cast<std::size_t>((p + kBlock - 1) / kBlock);
  std::vector<Matrix> partial(nblocks);
  parallel_for(nblocks, threads, [&](std::size_t b) {
    Eigen::Index lo = static_cast<Eigen::Index>(b) * kBlock;
    Eigen::Index len = std::min(kBlock, p - lo);
    Matrix w = g.calls.middleCols(lo, len);
    for (Eigen::Index j = 0; j < len; ++j) {
      double f = freq.f(lo + j);
      double denom = std::sqrt(c * f * (1.0 - f));
      w.col(j) = (w.col(j).array() - 2.0 * f) / denom;
    }
    Matrix acc = Matrix::Zero(n, n);
    acc.selfadjointView<Eigen::Lower>().rankUpdate(w);
    partial[b] = std::move(acc);
  });

  Matrix k = Matrix::Zero(n, n);
  for (const auto& part : partial) k += part;
  k /= static_cast<double>(p);
  k.triangularView<Eigen::StrictlyUpper>() = k.transpose();

  KinshipMatrix out;
  out.accessions = g.accessions;
  out.values = std::move(k);
  return out;
}

// Divides K by tr(PKP)/(n-1), P = I - 11'/n, so the centered trace equals n-1.
// Returns the factor applied.
inline double scale_kinship(KinshipMatrix& k) {
  const Eigen::Index n = k.values.rows();
  if (n < 2) throw ModelError("kinship scaling needs at least two accessions");
  double trace_centered = k.values.trace() - k.values.sum() / static_cast<double>(n);
  double factor = trace_centered / static_cast<double>(n - 1);
  if (factor <= 1e-12)
    throw ModelError("kinship has no centered variation (tr(PKP) <= 1e-12); cannot scale");
  k.values /= factor;
  return factor;
}

// Kinship CSV: header row of accession ids, then an n x n block of values.
inline KinshipMatrix load_kinship(const std::string& path) {
  auto rows = csv::read_table(path);
  KinshipMatrix k;
  k.accessions = rows[0];
  const std::size_t n = k.accessions.size();
  if (rows.size() != n + 1)
    throw DataError("kinship file has " + std::to_string(rows.size() - 1) + " rows for " +
                    std::to_string(n) + " accessions: " + path);
  k.values.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    if (rows[i + 1].size() != n)
      throw DataError("kinship row " + std::to_string(i + 2) + " has " +
                      std::to_string(rows[i + 1].size()) + " fields, expected " +
                      std::to_string(n) + ": " + path);
    for (std::size_t j = 0; j < n; ++j)
      k.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          csv::parse_double(rows[i + 1][j], "kinship row " + std::to_string(i + 2));
  }
  return k;
}

inline void save_kinship(const std::string& path, const KinshipMatrix& k) {
  csv::Writer w(path);
  w.row(k.accessions);
  std::vector<std::string> fields(static_cast<std::size_t>(k.values.cols()));
  for (Eigen::Index i = 0; i < k.values.rows(); ++i) {
    for (Eigen::Index j = 0; j < k.values.cols(); ++j)
      fields[static_cast<std::size_t>(j)] = csv::format_num(k.values(i, j));
    w.row(fields);
  }
}

// Kinship-file order restricted to the queried ids; model order is the order
// of kin_rows.
struct KinshipAlignment {
  std::vector<int> kin_rows;
  std::vector<int> query_to_model;
};

inline KinshipAlignment align_to_kinship(const std::vector<std::string>& query_ids,
                                         const KinshipMatrix& kin) {
  std::map<std::string, int> kin_index;
  for (std::size_t i = 0; i < kin.accessions.size(); ++i)
    kin_index.emplace(kin.accessions[i], static_cast<int>(i));
  for (const auto& id : query_ids)
    if (!kin_index.count(id))
      throw DataError("genotype '" + id + "' is not present in the kinship matrix");

  std::map<std::string, int> query_index;
  for (std::size_t i = 0; i < query_ids.size(); ++i)
    query_index.emplace(query_ids[i], static_cast<int>(i));

  KinshipAlignment al;
  al.query_to_model.assign(query_ids.size(), -1);
  int next = 0;
  for (std::size_t i = 0; i < kin.accessions.size(); ++i) {
    auto it = query_index.find(kin.accessions[i]);
    if (it == query_index.end()) continue;
    al.kin_rows.push_back(static_cast<int>(i));
    al.query_to_model[static_cast<std::size_t>(it->second)] = next++;
  }
  return al;
}

inline Matrix kinship_submatrix(const Matrix& k, const std::vector<int>& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows.size(); ++j)
      out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = k(rows[i], rows[j]);
  return out;
}

}  // namespace heritkit::geno
