#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <istream>
#include <limits>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "heritkit/common.hpp"
#include "heritkit/design.hpp"
#include "heritkit/gblup.hpp"
#include "heritkit/geno.hpp"
#include "heritkit/herit.hpp"
#include "heritkit/reml.hpp"

namespace heritkit::sim {

struct SimConfig {
  int n = 0;             // training genotypes
  int m = 0;             // validation genotypes
  int r = 1;             // replicates per training genotype
  int q = 0;             // QTLs
  double gamma = 0.0;    // QTL share of the genetic variance
  double h2_target = 0.5;
  double maf_min = 0.10;
  double le_ratio = 0.97;
  double sigma_e2 = 1.0;
  std::uint64_t seed = 0;
};

struct QtlSet {
  std::vector<std::string> ids;
  std::vector<int> cols;
  Vector effects;
  double v1 = 0.0;  // variance under linkage equilibrium
  double v2 = 0.0;  // variance under the sample covariance of the scores
};

struct SimulatedTrait {
  design::PhenotypeTable phenotypes;
  Vector true_g;  // length n + m
  QtlSet qtl;
  double sigma_a2_total = 0.0;  // calibrated total genetic variance
  double sigma_a2_poly = 0.0;   // polygenic part
};

namespace detail {

inline void validate(const SimConfig& cfg) {
  if (cfg.n < 2) throw DataError("simulation needs at least two training genotypes");
  if (cfg.m < 0 || cfg.r < 1 || cfg.q < 0) throw DataError("invalid simulation size");
  if (cfg.gamma < 0.0 || cfg.gamma > 1.0)
    throw DataError("QTL variance share must lie in [0, 1]");
  if (cfg.h2_target <= 0.0 || cfg.h2_target >= 1.0)
    throw DataError("target heritability must lie in (0, 1)");
  if (cfg.sigma_e2 <= 0.0) throw DataError("error variance must be positive");
}

inline double total_genetic_variance(const SimConfig& cfg) {
  double n = static_cast<double>(cfg.n);
  return cfg.sigma_e2 * cfg.h2_target * (n - 1.0) / ((1.0 - cfg.h2_target) * n);
}

}  // namespace detail

// Marker panel drawn from `subpops` populations whose allele frequencies
// diverge from a common ancestral frequency with the given fixation index.
inline geno::GenotypeMatrix sample_population(int n_acc, int n_markers, int subpops,
                                              double fst, std::mt19937_64& rng,
                                              const std::string& prefix = "g") {
  if (n_acc < 1 || n_markers < 1) throw DataError("population size must be positive");
  if (subpops < 1) throw DataError("need at least one subpopulation");
  geno::GenotypeMatrix g;
  g.mode = geno::GenoMode::inbred;
  g.calls.resize(n_acc, n_markers);
  int width = static_cast<int>(std::to_string(n_acc - 1).size());
  for (int i = 0; i < n_acc; ++i) {
    std::string id = std::to_string(i);
    g.accessions.push_back(prefix + std::string(width - static_cast<int>(id.size()), '0') +
                           id);
  }

  std::uniform_real_distribution<double> ancestral(0.1, 0.9);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const bool structured = subpops > 1 && fst > 0.0;
  for (int j = 0; j < n_markers; ++j) {
    double p = ancestral(rng);
    std::vector<double> f(static_cast<std::size_t>(subpops), p);
    if (structured) {
      double c = (1.0 - fst) / fst;
      std::gamma_distribution<double> ga(p * c, 1.0);
      std::gamma_distribution<double> gb((1.0 - p) * c, 1.0);
      for (int s = 0; s < subpops; ++s) {
        double a = ga(rng), b = gb(rng);
        f[static_cast<std::size_t>(s)] =
            (a + b) > 0.0 ? a / (a + b) : p;
      }
    }
    for (int i = 0; i < n_acc; ++i) {
      int s = i * subpops / n_acc;
      g.calls(i, j) = unif(rng) < f[static_cast<std::size_t>(s)] ? 2.0 : 0.0;
    }
    g.markers.push_back("m" + std::to_string(j));
  }
  return g;
}

inline geno::GenotypeMatrix take_rows(const geno::GenotypeMatrix& g, int from, int count) {
  geno::GenotypeMatrix out;
  out.mode = g.mode;
  out.markers = g.markers;
  out.calls = g.calls.middleRows(from, count);
  out.accessions.assign(g.accessions.begin() + from, g.accessions.begin() + from + count);
  return out;
}

// Scale a combined kinship matrix so that the training block satisfies the
// centered-trace normalization tr(P K P) = n_train - 1.
inline void scale_to_training_block(Matrix& k_total, Eigen::Index n_train) {
  if (n_train < 2 || k_total.rows() < n_train)
    throw DataError("training block does not fit the kinship matrix");
  Matrix blk = k_total.topLeftCorner(n_train, n_train);
  double trace = blk.trace() - blk.sum() / static_cast<double>(n_train);
  if (trace <= 0.0) throw ModelError("kinship has no variation to scale against");
  k_total *= static_cast<double>(n_train - 1) / trace;
}

inline QtlSet sample_qtls(const geno::GenotypeMatrix& g, const SimConfig& cfg,
                          std::mt19937_64& rng) {
  detail::validate(cfg);
  QtlSet set;
  if (cfg.q == 0 || cfg.gamma == 0.0) return set;

  const Eigen::Index n = g.calls.rows();
  const double c = g.mode == geno::GenoMode::inbred ? 4.0 : 2.0;
  std::vector<int> eligible;
  Vector f_all(g.calls.cols());
  for (Eigen::Index j = 0; j < g.calls.cols(); ++j) {
    double f = g.calls.col(j).mean() / 2.0;
    f_all(j) = std::min(f, 1.0 - f);
    if (f_all(j) > cfg.maf_min) eligible.push_back(static_cast<int>(j));
  }
  if (static_cast<int>(eligible.size()) < cfg.q)
    throw DataError("not enough markers above the QTL allele-frequency threshold");

  const double sigma_a2_total = detail::total_genetic_variance(cfg);
  const double target = cfg.gamma * sigma_a2_total;
  std::uniform_int_distribution<int> coin(0, 1);
  const int max_attempts = 10000;
  for (int attempt = 0; attempt < max_attempts; ++attempt) {
    // partial Fisher-Yates for a uniform subset
    std::vector<int> pool = eligible;
    std::vector<int> cols;
    for (int t = 0; t < cfg.q; ++t) {
      std::uniform_int_distribution<std::size_t> pickd(t, pool.size() - 1);
      std::swap(pool[static_cast<std::size_t>(t)], pool[pickd(rng)]);
      cols.push_back(pool[static_cast<std::size_t>(t)]);
    }
    Vector effects(cfg.q);
    for (int t = 0; t < cfg.q; ++t) {
      double f = f_all(cols[static_cast<std::size_t>(t)]);
      double a2 = target / (c * static_cast<double>(cfg.q) * f * (1.0 - f));
      effects(t) = (coin(rng) == 0 ? 1.0 : -1.0) * std::sqrt(a2);
    }

    double v1 = 0.0;
    Matrix scores(n, cfg.q);
    for (int t = 0; t < cfg.q; ++t) {
      double f = f_all(cols[static_cast<std::size_t>(t)]);
      v1 += c * f * (1.0 - f) * effects(t) * effects(t);
      scores.col(t) = g.calls.col(cols[static_cast<std::size_t>(t)]);
    }
    Matrix centered = scores.rowwise() - scores.colwise().mean();
    Matrix s_cov = centered.transpose() * centered / static_cast<double>(n);
    double v2 = effects.dot(s_cov * effects);
    double ratio = std::min(v1, v2) / std::max(v1, v2);
    if (v2 > 0.0 && ratio > cfg.le_ratio) {
      set.cols = cols;
      set.effects = effects;
      set.v1 = v1;
      set.v2 = v2;
      for (int col : cols) set.ids.push_back(g.markers[static_cast<std::size_t>(col)]);
      return set;
    }
  }
  std::ostringstream msg;
  msg << "QTL sampling did not reach the linkage-equilibrium acceptance ratio "
      << cfg.le_ratio << " after " << max_attempts << " attempts";
  throw DataError(msg.str());
}

namespace detail {

// Symmetric square root of a PSD matrix; eigenvalues in (-1e-8, 0) clip to 0.
inline Matrix psd_half(const Matrix& k) {
  Eigen::SelfAdjointEigenSolver<Matrix> eig(k);
  if (eig.info() != Eigen::Success) throw ModelError("eigendecomposition failed");
  Vector lam = eig.eigenvalues();
  for (Eigen::Index i = 0; i < lam.size(); ++i) {
    if (lam(i) < -1e-8)
      throw ModelError("total kinship matrix is not positive semidefinite");
    if (lam(i) < 0.0) lam(i) = 0.0;
  }
  return eig.eigenvectors() * lam.cwiseSqrt().asDiagonal();
}

inline SimulatedTrait simulate_with_half(const geno::GenotypeMatrix& g_train,
                                         const geno::GenotypeMatrix& g_valid,
                                         const Matrix& k_half, const SimConfig& cfg,
                                         std::mt19937_64& rng) {
  validate(cfg);
  const int n = cfg.n, m = cfg.m;
  if (g_train.calls.rows() != n || g_valid.calls.rows() != m)
    throw DataError("panel sizes do not match the simulation config");
  if (m > 0 && g_valid.calls.cols() != g_train.calls.cols())
    throw DataError("training and validation panels must share markers");
  if (k_half.rows() != n + m)
    throw DataError("total kinship must cover training and validation genotypes");

  SimulatedTrait trait;
  trait.sigma_a2_total = total_genetic_variance(cfg);
  trait.sigma_a2_poly = (1.0 - cfg.gamma) * trait.sigma_a2_total;
  trait.qtl = sample_qtls(g_train, cfg, rng);

  std::normal_distribution<double> nd;
  Vector z(n + m);
  for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = nd(rng);
  trait.true_g = std::sqrt(trait.sigma_a2_poly) * (k_half * z);
  for (std::size_t t = 0; t < trait.qtl.cols.size(); ++t) {
    int col = trait.qtl.cols[t];
    trait.true_g.head(n) += trait.qtl.effects(static_cast<Eigen::Index>(t)) *
                            g_train.calls.col(col);
    if (m > 0)
      trait.true_g.tail(m) += trait.qtl.effects(static_cast<Eigen::Index>(t)) *
                              g_valid.calls.col(col);
  }

  const double sd_e = std::sqrt(cfg.sigma_e2);
  trait.phenotypes.value.resize(static_cast<Eigen::Index>(n) * cfg.r);
  Eigen::Index row = 0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < cfg.r; ++j) {
      trait.phenotypes.genotype.push_back(g_train.accessions[static_cast<std::size_t>(i)]);
      trait.phenotypes.value(row++) = trait.true_g(i) + sd_e * nd(rng);
    }
  return trait;
}

}  // namespace detail

inline SimulatedTrait simulate_trait(const geno::GenotypeMatrix& g_train,
                                     const geno::GenotypeMatrix& g_valid,
                                     const Matrix& k_total, const SimConfig& cfg,
                                     std::mt19937_64& rng) {
  return detail::simulate_with_half(g_train, g_valid, detail::psd_half(k_total), cfg,
                                    rng);
}

inline SimulatedTrait simulate_trait(const geno::GenotypeMatrix& g_train,
                                     const geno::GenotypeMatrix& g_valid,
                                     const Matrix& k_total, const SimConfig& cfg) {
  std::mt19937_64 rng(splitmix64(cfg.seed));
  return simulate_trait(g_train, g_valid, k_total, cfg, rng);
}

struct Scenario {
  // population
  int n = 0, m = 0, markers = 0, subpops = 1;
  double fst = 0.0;
  // trait
  int q = 0, r = 1;
  double gamma = 0.0;
  std::vector<double> h2;
  double maf_min = 0.10;
  double le_ratio = 0.97;
  // study
  int n_sims = 0;
  std::vector<std::string> estimators;
  std::uint64_t seed = 0;
};

namespace detail {

inline std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s + ",") {
    if (ch == ',' || ch == ' ' || ch == '\t') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  return out;
}

}  // namespace detail

inline Scenario parse_scenario(std::istream& in) {
  Scenario sc;
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string s = detail::trim(line);
    if (s.empty() || s[0] == '#') continue;
    if (s.front() == '[' && s.back() == ']') {
      section = s.substr(1, s.size() - 2);
      if (section != "population" && section != "trait" && section != "study")
        throw DataError("unknown scenario section [" + section + "]");
      continue;
    }
    auto eq = s.find('=');
    if (eq == std::string::npos)
      throw DataError("scenario line " + std::to_string(lineno) +
                      " is not a key = value pair");
    std::string key = detail::trim(s.substr(0, eq));
    std::string val = detail::trim(s.substr(eq + 1));
    try {
      if (section == "population") {
        if (key == "n") sc.n = std::stoi(val);
        else if (key == "m") sc.m = std::stoi(val);
        else if (key == "markers") sc.markers = std::stoi(val);
        else if (key == "fst") sc.fst = std::stod(val);
        else if (key == "subpops") sc.subpops = std::stoi(val);
        else throw DataError("unknown population key '" + key + "'");
      } else if (section == "trait") {
        if (key == "q") sc.q = std::stoi(val);
        else if (key == "r") sc.r = std::stoi(val);
        else if (key == "gamma") sc.gamma = std::stod(val);
        else if (key == "maf_min") sc.maf_min = std::stod(val);
        else if (key == "le_ratio") sc.le_ratio = std::stod(val);
        else if (key == "h2") {
          for (const auto& tok : detail::split_list(val)) sc.h2.push_back(std::stod(tok));
        } else throw DataError("unknown trait key '" + key + "'");
      } else if (section == "study") {
        if (key == "n_sims") sc.n_sims = std::stoi(val);
        else if (key == "seed") sc.seed = std::stoull(val);
        else if (key == "estimators") sc.estimators = detail::split_list(val);
        else throw DataError("unknown study key '" + key + "'");
      } else {
        throw DataError("scenario key '" + key + "' appears before any section");
      }
    } catch (const std::invalid_argument&) {
      throw DataError("scenario value for '" + key + "' is not a number: " + val);
    } catch (const std::out_of_range&) {
      throw DataError("scenario value for '" + key + "' is out of range: " + val);
    }
  }
  if (sc.h2.empty()) sc.h2.push_back(0.5);
  return sc;
}

inline Scenario load_scenario(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open scenario file: " + path);
  return parse_scenario(in);
}

struct EstimatorRow {
  std::string method;
  double h2_true = 0.0;
  int n_ok = 0;
  int n_fail = 0;
  double bias = std::numeric_limits<double>::quiet_NaN();
  double sd = std::numeric_limits<double>::quiet_NaN();
  double coverage_std = std::numeric_limits<double>::quiet_NaN();
  double width_std = std::numeric_limits<double>::quiet_NaN();
  double coverage_log = std::numeric_limits<double>::quiet_NaN();
  double width_log = std::numeric_limits<double>::quiet_NaN();
};

struct PredictionRow {
  std::string stage;  // "one" or "two"
  double h2_true = 0.0;
  int n_ok = 0;
  int n_fail = 0;
  double mean_r_train = std::numeric_limits<double>::quiet_NaN();
  double mean_r_valid = std::numeric_limits<double>::quiet_NaN();
  double sd_r_valid = std::numeric_limits<double>::quiet_NaN();
};

struct StudyReport {
  std::vector<EstimatorRow> estimates;
  std::vector<PredictionRow> predictions;
};

namespace detail {

struct CiSample {
  bool ok = false;
  double h2 = 0.0;
  herit::Interval ci_std, ci_log;
};

struct PredSample {
  bool ok = false;
  double r_train = 0.0, r_valid = 0.0;
};

}  // namespace detail

// Called once per successfully simulated trait, in (level, index) order;
// accessions lists the panel ids (training first, then validation).
using TraitSink = std::function<void(std::size_t level, std::size_t index,
                                     const SimulatedTrait&,
                                     const std::vector<std::string>& accessions)>;

inline StudyReport run_study(const Scenario& sc, int threads = 1,
                             const TraitSink& keep = {}) {
  std::vector<std::string> wanted =
      sc.estimators.empty()
          ? std::vector<std::string>{"replicates", "means", "anova"}
          : sc.estimators;
  bool want_rep = false, want_mea = false, want_anova = false, want_p1 = false,
       want_p2 = false;
  for (const auto& e : wanted) {
    if (e == "replicates") want_rep = true;
    else if (e == "means") want_mea = true;
    else if (e == "anova") want_anova = true;
    else if (e == "prediction_one") want_p1 = true;
    else if (e == "prediction_two") want_p2 = true;
    else throw DataError("unknown estimator '" + e + "'");
  }
  if ((want_p1 || want_p2) && sc.m < 2)
    throw DataError("prediction accuracy needs a validation set");

  StudyReport report;
  if (sc.n_sims <= 0 || sc.h2.empty()) return report;

  // one marker panel per study
  std::mt19937_64 pop_rng = substream(sc.seed, 0);
  auto g_all = sample_population(sc.n + sc.m, sc.markers, sc.subpops, sc.fst, pop_rng);
  auto g_work = g_all;
  auto freqs = geno::allele_frequencies(g_work, 0.01);
  auto kin_all = geno::compute_kinship(g_work, freqs);
  scale_to_training_block(kin_all.values, sc.n);
  Matrix k_half = detail::psd_half(kin_all.values);
  Matrix k_train = kin_all.values.topLeftCorner(sc.n, sc.n);
  Matrix k_po = kin_all.values.block(sc.n, 0, sc.m, sc.n);
  auto g_train = take_rows(g_all, 0, sc.n);
  auto g_valid = take_rows(g_all, sc.n, sc.m);

  geno::KinshipMatrix kin;
  kin.accessions = g_train.accessions;
  kin.values = k_train;

  struct Slot {
    detail::CiSample rep, mea, anova;
    detail::PredSample p1, p2;
    std::unique_ptr<SimulatedTrait> kept;
  };

  for (std::size_t lv = 0; lv < sc.h2.size(); ++lv) {
    SimConfig cfg;
    cfg.n = sc.n;
    cfg.m = sc.m;
    cfg.r = sc.r;
    cfg.q = sc.q;
    cfg.gamma = sc.gamma;
    cfg.h2_target = sc.h2[lv];
    cfg.maf_min = sc.maf_min;
    cfg.le_ratio = sc.le_ratio;

    std::vector<Slot> slots(static_cast<std::size_t>(sc.n_sims));
    parallel_for(static_cast<std::size_t>(sc.n_sims), resolve_threads(threads),
                 [&](std::size_t t) {
      Slot& slot = slots[t];
      std::mt19937_64 rng =
          substream(sc.seed, 1 + lv * static_cast<std::size_t>(sc.n_sims) + t);
      SimulatedTrait trait;
      try {
        trait = detail::simulate_with_half(g_train, g_valid, k_half, cfg, rng);
      } catch (const std::runtime_error&) {
        return;  // every method records the failure
      }
      if (keep) slot.kept = std::make_unique<SimulatedTrait>(trait);
      const auto& table = trait.phenotypes;
      if (want_rep) {
        try {
          auto est = herit::h2_replicates(table, kin);
          slot.rep = {true, est.h2, est.ci_standard, est.ci_log};
        } catch (const std::runtime_error&) {
        }
      }
      if (want_mea || want_p2) {
        try {
          auto dm = design::build_design(table);
          auto blues = design::compute_blues(dm, table.value);
          if (want_mea) {
            auto est = herit::h2_means(blues, kin);
            slot.mea = {true, est.h2, est.ci_standard, est.ci_log};
          }
          if (want_p2) {
            reml::VarianceModel vm;
            vm.stage = reml::Stage::means;
            vm.k = k_train;
            vm.y = blues.means;
            vm.x = Matrix::Ones(sc.n, 1);
            vm.r0 = blues.r;
            auto fit = reml::reml_fit(vm);
            auto bf = gblup::fit_blup(vm, fit);
            Vector pred = gblup::predict_unobserved(bf, k_po);
            slot.p2 = {true,
                       gblup::detail::pearson(bf.g_hat, trait.true_g.head(sc.n)),
                       gblup::detail::pearson(pred, trait.true_g.tail(sc.m))};
          }
        } catch (const std::runtime_error&) {
        }
      }
      if (want_anova) {
        try {
          auto est = herit::broad_sense_h2(table);
          slot.anova = {true, est.h2, est.ci_standard, est.ci_log};
        } catch (const std::runtime_error&) {
        }
      }
      if (want_p1) {
        try {
          reml::VarianceModel vm;
          vm.stage = reml::Stage::individual;
          vm.k = k_train;
          vm.y = table.value;
          vm.x = Matrix::Ones(table.value.size(), 1);
          for (int i = 0; i < sc.n; ++i)
            for (int j = 0; j < sc.r; ++j) vm.groups.push_back(i);
          auto fit = reml::reml_fit(vm);
          auto bf = gblup::fit_blup(vm, fit);
          Vector pred = gblup::predict_unobserved(bf, k_po);
          slot.p1 = {true, gblup::detail::pearson(bf.g_hat, trait.true_g.head(sc.n)),
                     gblup::detail::pearson(pred, trait.true_g.tail(sc.m))};
        } catch (const std::runtime_error&) {
        }
      }
    });

    if (keep)
      for (std::size_t t = 0; t < slots.size(); ++t)
        if (slots[t].kept) keep(lv, t, *slots[t].kept, g_all.accessions);

    auto summarize = [&](const std::string& method,
                         auto pick) {
      EstimatorRow row;
      row.method = method;
      row.h2_true = sc.h2[lv];
      std::vector<double> h2s, ws, wl;
      int cov_s = 0, cov_l = 0, n_s = 0, n_l = 0;
      for (const auto& slot : slots) {
        const detail::CiSample& s = pick(slot);
        if (!s.ok) {
          ++row.n_fail;
          continue;
        }
        ++row.n_ok;
        h2s.push_back(s.h2);
        if (std::isfinite(s.ci_std.lo) && std::isfinite(s.ci_std.hi)) {
          ++n_s;
          ws.push_back(s.ci_std.hi - s.ci_std.lo);
          if (s.ci_std.lo <= row.h2_true && row.h2_true <= s.ci_std.hi) ++cov_s;
        }
        if (std::isfinite(s.ci_log.lo) && std::isfinite(s.ci_log.hi)) {
          ++n_l;
          wl.push_back(s.ci_log.hi - s.ci_log.lo);
          if (s.ci_log.lo <= row.h2_true && row.h2_true <= s.ci_log.hi) ++cov_l;
        }
      }
      if (!h2s.empty()) {
        double mean = 0.0;
        for (double v : h2s) mean += v;
        mean /= static_cast<double>(h2s.size());
        row.bias = mean - row.h2_true;
        if (h2s.size() > 1) {
          double ss = 0.0;
          for (double v : h2s) ss += (v - mean) * (v - mean);
          row.sd = std::sqrt(ss / static_cast<double>(h2s.size() - 1));
        }
      }
      auto mean_of = [](const std::vector<double>& v) {
        if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
        double s = 0.0;
        for (double x : v) s += x;
        return s / static_cast<double>(v.size());
      };
      if (n_s > 0) {
        row.coverage_std = static_cast<double>(cov_s) / n_s;
        row.width_std = mean_of(ws);
      }
      if (n_l > 0) {
        row.coverage_log = static_cast<double>(cov_l) / n_l;
        row.width_log = mean_of(wl);
      }
      report.estimates.push_back(row);
    };

    if (want_rep)
      summarize("replicates", [](const Slot& s) -> const detail::CiSample& { return s.rep; });
    if (want_mea)
      summarize("means", [](const Slot& s) -> const detail::CiSample& { return s.mea; });
    if (want_anova)
      summarize("anova", [](const Slot& s) -> const detail::CiSample& { return s.anova; });

    auto summarize_pred = [&](const std::string& stage, auto pick) {
      PredictionRow row;
      row.stage = stage;
      row.h2_true = sc.h2[lv];
      std::vector<double> rt, rv;
      for (const auto& slot : slots) {
        const detail::PredSample& s = pick(slot);
        if (!s.ok) {
          ++row.n_fail;
          continue;
        }
        ++row.n_ok;
        rt.push_back(s.r_train);
        rv.push_back(s.r_valid);
      }
      if (!rv.empty()) {
        double mt = 0.0, mv = 0.0;
        for (double v : rt) mt += v;
        for (double v : rv) mv += v;
        row.mean_r_train = mt / static_cast<double>(rt.size());
        row.mean_r_valid = mv / static_cast<double>(rv.size());
        if (rv.size() > 1) {
          double ss = 0.0;
          for (double v : rv) ss += (v - row.mean_r_valid) * (v - row.mean_r_valid);
          row.sd_r_valid = std::sqrt(ss / static_cast<double>(rv.size() - 1));
        }
      }
      report.predictions.push_back(row);
    };

    if (want_p1)
      summarize_pred("one", [](const Slot& s) -> const detail::PredSample& { return s.p1; });
    if (want_p2)
      summarize_pred("two", [](const Slot& s) -> const detail::PredSample& { return s.p2; });
  }
  return report;
}

}  // namespace heritkit::sim
