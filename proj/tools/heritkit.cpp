#include <chrono>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "heritkit/common.hpp"
#include "heritkit/csv.hpp"
#include "heritkit/design.hpp"
#include "heritkit/gblup.hpp"
#include "heritkit/geno.hpp"
#include "heritkit/gwas.hpp"
#include "heritkit/herit.hpp"
#include "heritkit/reml.hpp"
#include "heritkit/sim.hpp"

namespace fs = std::filesystem;
using namespace heritkit;

namespace {

std::string digest_hex(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read input file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  const std::string bytes = buf.str();
  char out[17];
  std::snprintf(out, sizeof(out), "%016llx",
                static_cast<unsigned long long>(fnv1a64(bytes.data(), bytes.size())));
  return out;
}

std::string iso_utc_now() {
  std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct Manifest {
  std::string command;
  std::vector<std::string> inputs;
  std::uint64_t seed = 0;
  bool has_seed = false;
};

// wall_time is the run's wall-clock timestamp, the one field allowed to
// differ between otherwise identical reruns.
void write_manifest(const std::string& path, const Manifest& man) {
  nlohmann::ordered_json j;
  j["command"] = man.command;
  auto inputs = nlohmann::ordered_json::object();
  for (const auto& p : man.inputs) inputs[p] = digest_hex(p);
  j["inputs"] = inputs;
  if (man.has_seed)
    j["seed"] = man.seed;
  else
    j["seed"] = nullptr;
  j["version"] = kVersion;
  j["wall_time"] = iso_utc_now();
  std::ofstream out(path);
  if (!out) throw DataError("cannot write file: " + path);
  out << j.dump(2) << '\n';
}

std::string num_or_empty(double v) {
  return std::isfinite(v) ? csv::format_num(v) : std::string();
}

std::string bool_str(bool b) { return b ? "true" : "false"; }

geno::GenoMode parse_mode(const std::string& s) {
  return s == "outbred" ? geno::GenoMode::outbred : geno::GenoMode::inbred;
}

// Comma-separated ids, or a file of whitespace/comma-separated ids.
std::vector<std::string> parse_id_list(const std::string& arg) {
  std::vector<std::string> out;
  auto push_tokens = [&](const std::string& text) {
    std::string tok;
    for (char c : text) {
      if (c == ',' || std::isspace(static_cast<unsigned char>(c))) {
        if (!tok.empty()) {
          out.push_back(tok);
          tok.clear();
        }
      } else {
        tok += c;
      }
    }
    if (!tok.empty()) out.push_back(tok);
  };
  if (fs::exists(arg)) {
    std::ifstream in(arg);
    if (!in) throw DataError("cannot read accession list: " + arg);
    std::ostringstream buf;
    buf << in.rdbuf();
    push_tokens(buf.str());
  } else {
    push_tokens(arg);
  }
  return out;
}

struct ModelBundle {
  reml::VarianceModel vm;
  std::vector<std::string> model_ids;  // kinship-file order
  std::vector<int> kin_rows;
};

ModelBundle individual_model(const design::PhenotypeTable& table,
                             const geno::KinshipMatrix& kin) {
  auto dm = design::build_design(table);
  design::check_estimable(dm);
  auto al = geno::align_to_kinship(dm.genotype_ids, kin);
  ModelBundle m;
  m.vm.stage = reml::Stage::individual;
  m.vm.k = geno::kinship_submatrix(kin.values, al.kin_rows);
  m.vm.y = table.value;
  m.vm.x.resize(dm.n_obs, 1 + dm.xc.cols());
  m.vm.x.col(0).setOnes();
  if (dm.xc.cols() > 0) m.vm.x.rightCols(dm.xc.cols()) = dm.xc;
  m.vm.groups.reserve(dm.obs_genotype.size());
  for (int g : dm.obs_genotype)
    m.vm.groups.push_back(al.query_to_model[static_cast<std::size_t>(g)]);
  m.model_ids.resize(dm.genotype_ids.size());
  for (std::size_t i = 0; i < dm.genotype_ids.size(); ++i)
    m.model_ids[static_cast<std::size_t>(al.query_to_model[i])] = dm.genotype_ids[i];
  m.kin_rows = al.kin_rows;
  return m;
}

ModelBundle means_model(const design::GenotypicMeans& blues,
                        const geno::KinshipMatrix& kin) {
  auto al = geno::align_to_kinship(blues.genotype_ids, kin);
  const Eigen::Index n = static_cast<Eigen::Index>(blues.genotype_ids.size());
  ModelBundle m;
  m.vm.stage = reml::Stage::means;
  m.vm.k = geno::kinship_submatrix(kin.values, al.kin_rows);
  m.vm.y.resize(n);
  m.vm.r0.resize(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    int mi = al.query_to_model[static_cast<std::size_t>(i)];
    m.vm.y(mi) = blues.means(i);
    for (Eigen::Index j = 0; j < n; ++j)
      m.vm.r0(mi, al.query_to_model[static_cast<std::size_t>(j)]) = blues.r(i, j);
  }
  m.vm.x = Matrix::Ones(n, 1);
  m.model_ids.resize(blues.genotype_ids.size());
  for (std::size_t i = 0; i < blues.genotype_ids.size(); ++i)
    m.model_ids[static_cast<std::size_t>(al.query_to_model[i])] = blues.genotype_ids[i];
  m.kin_rows = al.kin_rows;
  return m;
}

void warn_monotone(const std::string& what) {
  std::cerr << "WARNING: restricted likelihood for " << what
            << " is monotone in h2; boundary estimate reported\n";
}

void estimate_row(csv::Writer& w, const herit::HeritabilityEstimate& est) {
  w.row({est.method, csv::format_num(est.h2), csv::format_num(est.sigma_a2),
         csv::format_num(est.sigma_e2), num_or_empty(est.ci_standard.lo),
         num_or_empty(est.ci_standard.hi), num_or_empty(est.ci_log.lo),
         num_or_empty(est.ci_log.hi), bool_str(est.monotone)});
}

void require_converged(const reml::RemlFit& fit, const std::string& what) {
  if (!fit.converged) throw ModelError("REML did not converge for " + what);
}

void dump_profile(const std::string& path, const reml::VarianceModel& vm) {
  auto sm = reml::spectral_prepare(vm);
  csv::Writer w(path);
  w.row({"h2", "loglik"});
  for (int i = 1; i < 200; ++i) {
    double h2 = static_cast<double>(i) / 200.0;
    w.row({csv::format_num(h2), csv::format_num(reml::profile_loglik_at(sm, h2))});
  }
}

}  // namespace

int main(int argc, char** argv) {
  std::string cmdline;
  for (int i = 0; i < argc; ++i) {
    if (i) cmdline += ' ';
    cmdline += argv[i];
  }

  CLI::App app{"heritability, genomic prediction, and association scans for "
               "replicated genotype panels"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);
  app.failure_message(CLI::FailureMessage::help);

  int threads = 0;
  std::uint64_t seed = 0;
  bool verbose = false;
  app.add_option("--threads", threads, "worker threads (default: machine parallelism)");
  auto* seed_opt = app.add_option("--seed", seed, "random seed");
  app.add_flag("--verbose", verbose, "progress notes on stderr");

  // kinship
  auto* ck = app.add_subcommand("kinship", "genomic relationship matrix from marker calls");
  ck->fallthrough();
  std::string k_geno, k_out, k_mode = "inbred";
  double k_maf = 0.0;
  bool k_noscale = false, k_impute = false, k_rows = false;
  ck->add_option("--geno", k_geno, "genotype CSV (accession,marker1,...)")->required();
  ck->add_option("--out", k_out, "output kinship CSV")->required();
  ck->add_option("--mode", k_mode, "call coding: inbred 0/2, outbred 0/1/2")
      ->check(CLI::IsMember({"inbred", "outbred"}));
  ck->add_option("--maf-min", k_maf, "drop markers with minor-allele frequency below this");
  ck->add_flag("--no-scale", k_noscale, "skip scaling to tr(PKP) = n-1");
  ck->add_flag("--impute-mean", k_impute, "mean-impute missing calls");
  ck->add_flag("--markers-as-rows", k_rows, "genotype CSV is transposed");
  ck->callback([&] {
    auto g = geno::load_genotypes(k_geno, parse_mode(k_mode), k_rows, k_impute);
    auto freq = geno::allele_frequencies(g, k_maf);
    auto kin = geno::compute_kinship(g, freq, resolve_threads(threads));
    if (!k_noscale) geno::scale_kinship(kin);
    if (verbose)
      std::cerr << "kinship: " << g.markers.size() << " markers over "
                << kin.accessions.size() << " accessions\n";
    geno::save_kinship(k_out, kin);
    write_manifest(k_out + ".manifest.json", {cmdline, {k_geno}});
  });

  // means
  auto* cm = app.add_subcommand("means", "first-stage genotypic means and their covariance");
  cm->fallthrough();
  std::string m_pheno, m_out_means, m_out_r;
  std::vector<std::string> m_factors;
  cm->add_option("--pheno", m_pheno, "phenotype CSV (genotype,value[,covariates...])")
      ->required();
  cm->add_option("--factors", m_factors, "covariate columns to treat as factors")
      ->delimiter(',');
  cm->add_option("--out-means", m_out_means, "output CSV of genotypic means")->required();
  cm->add_option("--out-R", m_out_r, "output CSV of the means' covariance factor R")
      ->required();
  cm->callback([&] {
    auto table = design::load_phenotypes(m_pheno, m_factors);
    auto dm = design::build_design(table);
    auto blues = design::compute_blues(dm, table.value);
    csv::Writer w(m_out_means);
    w.row({"genotype", "mean", "replicates"});
    for (std::size_t i = 0; i < blues.genotype_ids.size(); ++i)
      w.row({blues.genotype_ids[i],
             csv::format_num(blues.means(static_cast<Eigen::Index>(i))),
             std::to_string(blues.replicates[i])});
    geno::KinshipMatrix rmat;
    rmat.accessions = blues.genotype_ids;
    rmat.values = blues.r;
    geno::save_kinship(m_out_r, rmat);
    if (verbose)
      std::cerr << "means: " << blues.genotype_ids.size()
                << " genotypes, stage-1 sigma_E2 = " << blues.sigma_e2_stage1 << "\n";
    write_manifest(m_out_means + ".manifest.json", {cmdline, {m_pheno}});
    write_manifest(m_out_r + ".manifest.json", {cmdline, {m_pheno}});
  });

  // estimate
  auto* ce = app.add_subcommand("estimate", "heritability estimates with confidence intervals");
  ce->fallthrough();
  std::string e_pheno, e_kin, e_method = "all", e_dump, e_out;
  std::vector<std::string> e_factors;
  double e_alpha = 0.05;
  reml::RemlOptions e_reml;
  ce->add_option("--pheno", e_pheno, "phenotype CSV")->required();
  ce->add_option("--kinship", e_kin, "kinship CSV")->required();
  ce->add_option("--method", e_method, "estimator(s) to run")
      ->check(CLI::IsMember({"replicates", "means", "anova", "all"}));
  ce->add_option("--factors", e_factors, "covariate columns to treat as factors")
      ->delimiter(',');
  ce->add_option("--alpha", e_alpha, "confidence level is 1 - alpha");
  ce->add_option("--max-iter", e_reml.max_iterations, "REML iteration cap");
  ce->add_option("--loglik-tol", e_reml.loglik_tol, "REML log-likelihood tolerance");
  ce->add_option("--param-tol", e_reml.param_tol, "REML parameter tolerance");
  ce->add_option("--dump-profile", e_dump,
                 "write an (h2, loglik) profile grid CSV for the REML model implied by "
                 "--method (means when --method is all)");
  ce->add_option("--out", e_out, "output CSV")->required();
  ce->callback([&] {
    if (!e_dump.empty() && e_method == "anova")
      throw CLI::ValidationError("--dump-profile",
                                 "requires --method replicates, means, or all");
    auto table = design::load_phenotypes(e_pheno, e_factors);
    auto kin = geno::load_kinship(e_kin);
    herit::HeritOptions ho;
    ho.alpha = e_alpha;
    ho.reml = e_reml;
    const bool want_rep = e_method == "replicates" || e_method == "all";
    const bool want_mea = e_method == "means" || e_method == "all";
    const bool want_anova = e_method == "anova" || e_method == "all";

    std::vector<herit::HeritabilityEstimate> ests;
    if (want_rep) {
      auto est = herit::h2_replicates(table, kin, ho);
      require_converged(est.fit, "method 'replicates'");
      ests.push_back(est);
    }
    design::GenotypicMeans blues;
    if (want_mea || !e_dump.empty()) {
      auto dm = design::build_design(table);
      blues = design::compute_blues(dm, table.value);
    }
    if (want_mea) {
      auto est = herit::h2_means(blues, kin, ho);
      require_converged(est.fit, "method 'means'");
      ests.push_back(est);
    }
    if (want_anova) ests.push_back(herit::broad_sense_h2(table, e_alpha));

    csv::Writer w(e_out);
    w.row({"method", "h2", "sigma_A2", "sigma_E2", "ci_std_lo", "ci_std_hi", "ci_log_lo",
           "ci_log_hi", "monotone"});
    for (const auto& est : ests) {
      if (est.monotone) warn_monotone("method '" + est.method + "'");
      estimate_row(w, est);
      if (verbose)
        std::cerr << "estimate: " << est.method << " h2 = " << est.h2 << "\n";
    }
    if (!e_dump.empty()) {
      auto mb = want_mea ? means_model(blues, kin) : individual_model(table, kin);
      dump_profile(e_dump, mb.vm);
      write_manifest(e_dump + ".manifest.json", {cmdline, {e_pheno, e_kin}});
    }
    write_manifest(e_out + ".manifest.json", {cmdline, {e_pheno, e_kin}});
  });

  // asympt
  auto* ca = app.add_subcommand(
      "asympt", "asymptotic sd of the heritability estimators on a kinship");
  ca->fallthrough();
  std::string a_kin, a_out;
  std::vector<int> a_reps{1, 2, 3, 4};
  std::vector<double> a_h2{0.2, 0.5, 0.8};
  ca->add_option("--kinship", a_kin, "kinship CSV (scaled)")->required();
  ca->add_option("--reps", a_reps, "replicate counts")->delimiter(',');
  ca->add_option("--h2", a_h2, "heritability levels")->delimiter(',');
  ca->add_option("--out", a_out, "output CSV")->required();
  ca->callback([&] {
    auto kin = geno::load_kinship(a_kin);
    for (int r : a_reps)
      if (r < 1) throw DataError("replicate counts must be at least 1");
    for (double h : a_h2)
      if (!(h > 0.0 && h < 1.0)) throw DataError("h2 values must lie in (0, 1)");
    csv::Writer w(a_out);
    w.row({"r", "h2", "sd_individual", "sd_means", "ratio"});
    for (int r : a_reps)
      for (double h : a_h2) {
        double sdi = herit::asymptotic_sd(kin.values, r, h, reml::Stage::individual);
        double sdm = herit::asymptotic_sd(kin.values, r, h, reml::Stage::means);
        w.row({std::to_string(r), csv::format_num(h), csv::format_num(sdi),
               csv::format_num(sdm), csv::format_num(sdi / sdm)});
      }
    write_manifest(a_out + ".manifest.json", {cmdline, {a_kin}});
  });

  // gblup
  auto* cg = app.add_subcommand("gblup", "genomic BLUP of genetic effects");
  cg->fallthrough();
  std::string g_pheno, g_kin, g_predict, g_stage = "one", g_out;
  std::vector<std::string> g_factors;
  reml::RemlOptions g_reml;
  cg->add_option("--pheno", g_pheno, "phenotype CSV")->required();
  cg->add_option("--kinship", g_kin, "kinship CSV")->required();
  cg->add_option("--predict", g_predict,
                 "unphenotyped accessions to predict: comma-separated ids or a file");
  cg->add_option("--stage", g_stage, "one: replicate records, two: genotypic means")
      ->check(CLI::IsMember({"one", "two"}));
  cg->add_option("--factors", g_factors, "covariate columns to treat as factors")
      ->delimiter(',');
  cg->add_option("--out", g_out, "output CSV")->required();
  cg->callback([&] {
    auto table = design::load_phenotypes(g_pheno, g_factors);
    auto kin = geno::load_kinship(g_kin);
    ModelBundle mb;
    if (g_stage == "one") {
      mb = individual_model(table, kin);
    } else {
      auto dm = design::build_design(table);
      auto blues = design::compute_blues(dm, table.value);
      mb = means_model(blues, kin);
    }
    auto fit = reml::reml_fit(mb.vm, g_reml);
    require_converged(fit, "the variance model");
    if (fit.monotone) warn_monotone("the variance model");
    auto bf = gblup::fit_blup(mb.vm, fit);
    if (verbose)
      std::cerr << "gblup: h2_hat = " << fit.h2 << ", delta = " << bf.delta << "\n";

    csv::Writer w(g_out);
    w.row({"accession", "g_hat", "set"});
    for (std::size_t i = 0; i < mb.model_ids.size(); ++i)
      w.row({mb.model_ids[i], csv::format_num(bf.g_hat(static_cast<Eigen::Index>(i))),
             "train"});
    std::vector<std::string> inputs{g_pheno, g_kin};
    if (!g_predict.empty()) {
      auto ids = parse_id_list(g_predict);
      if (ids.empty()) throw DataError("prediction list is empty");
      if (fs::exists(g_predict)) inputs.push_back(g_predict);
      auto alp = geno::align_to_kinship(ids, kin);
      Matrix kpo(static_cast<Eigen::Index>(ids.size()),
                 static_cast<Eigen::Index>(mb.kin_rows.size()));
      for (std::size_t i = 0; i < alp.kin_rows.size(); ++i)
        for (std::size_t j = 0; j < mb.kin_rows.size(); ++j)
          kpo(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
              kin.values(alp.kin_rows[i], mb.kin_rows[j]);
      Vector gp = gblup::predict_unobserved(bf, kpo);
      std::vector<std::string> pred_ids(ids.size());
      for (std::size_t i = 0; i < ids.size(); ++i)
        pred_ids[static_cast<std::size_t>(alp.query_to_model[i])] = ids[i];
      for (std::size_t i = 0; i < pred_ids.size(); ++i)
        w.row({pred_ids[i], csv::format_num(gp(static_cast<Eigen::Index>(i))),
               "predicted"});
    }
    write_manifest(g_out + ".manifest.json", {cmdline, inputs});
  });

  // cv
  auto* cc = app.add_subcommand("cv", "cross-validated prediction accuracy of both stages");
  cc->fallthrough();
  std::string c_pheno, c_kin, c_out;
  std::vector<std::string> c_factors;
  int c_folds = 5, c_repeats = 1;
  reml::RemlOptions c_reml;
  cc->add_option("--pheno", c_pheno, "phenotype CSV")->required();
  cc->add_option("--kinship", c_kin, "kinship CSV")->required();
  cc->add_option("--folds", c_folds, "held-out fraction is 1/folds");
  cc->add_option("--repeats", c_repeats, "random partitions to draw");
  cc->add_option("--factors", c_factors, "covariate columns to treat as factors")
      ->delimiter(',');
  cc->add_option("--out", c_out, "output CSV")->required();
  cc->callback([&] {
    auto table = design::load_phenotypes(c_pheno, c_factors);
    auto kin = geno::load_kinship(c_kin);
    gblup::CvOptions opt;
    opt.folds = c_folds;
    opt.repeats = c_repeats;
    opt.seed = seed;
    opt.reml = c_reml;
    auto records = gblup::cross_validate(table, kin, opt);
    csv::Writer w(c_out);
    w.row({"repeat", "stage", "h2_hat", "r_train", "r_valid"});
    for (const auto& rec : records)
      w.row({std::to_string(rec.repeat),
             rec.stage == reml::Stage::individual ? "one" : "two",
             num_or_empty(rec.h2_hat), num_or_empty(rec.r_train),
             num_or_empty(rec.r_valid)});
    write_manifest(c_out + ".manifest.json",
                   {cmdline, {c_pheno, c_kin}, seed, true});
  });

  // gwas
  auto* cw = app.add_subcommand("gwas", "single-marker GLS scan under the null kinship model");
  cw->fallthrough();
  std::string w_pheno, w_geno, w_kin, w_stage = "one", w_mode = "inbred", w_out;
  std::vector<std::string> w_factors;
  double w_maf = 0.05;
  bool w_rows = false, w_impute = false;
  reml::RemlOptions w_reml;
  cw->add_option("--pheno", w_pheno, "phenotype CSV")->required();
  cw->add_option("--geno", w_geno, "genotype CSV")->required();
  cw->add_option("--kinship", w_kin, "kinship CSV")->required();
  cw->add_option("--stage", w_stage, "one: replicate records, two: genotypic means")
      ->check(CLI::IsMember({"one", "two"}));
  cw->add_option("--factors", w_factors, "covariate columns to treat as factors")
      ->delimiter(',');
  cw->add_option("--maf-min", w_maf, "markers below this MAF are reported untestable");
  cw->add_option("--mode", w_mode, "call coding: inbred 0/2, outbred 0/1/2")
      ->check(CLI::IsMember({"inbred", "outbred"}));
  cw->add_flag("--markers-as-rows", w_rows, "genotype CSV is transposed");
  cw->add_flag("--impute-mean", w_impute, "mean-impute missing calls");
  cw->add_option("--out", w_out, "output CSV")->required();
  cw->callback([&] {
    auto table = design::load_phenotypes(w_pheno, w_factors);
    auto g = geno::load_genotypes(w_geno, parse_mode(w_mode), w_rows, w_impute);
    auto kin = geno::load_kinship(w_kin);
    gwas::ScanOptions sopt;
    sopt.maf_min = w_maf;
    sopt.threads = threads;
    gwas::ScanResult scan;
    if (w_stage == "one") {
      auto null = gwas::fit_null(table, kin, w_reml);
      require_converged(null, "the null model");
      scan = gwas::gls_scan(table, kin, g, null, sopt);
    } else {
      auto dm = design::build_design(table);
      auto blues = design::compute_blues(dm, table.value);
      auto null = gwas::fit_null(blues, kin, w_reml);
      require_converged(null, "the null model");
      scan = gwas::gls_scan(blues, kin, g, null, sopt);
    }
    if (verbose)
      std::cerr << "gwas: sigma_A2 = " << scan.sigma_a2 << ", sigma_E2 = " << scan.sigma_e2
                << ", df_den = " << scan.df_den << "\n";
    csv::Writer w(w_out);
    w.row({"marker", "maf", "effect", "se", "F", "p", "testable"});
    for (const auto& r : scan.rows)
      w.row({r.marker, csv::format_num(r.maf), num_or_empty(r.effect), num_or_empty(r.se),
             num_or_empty(r.f_stat), num_or_empty(r.p), bool_str(r.testable)});
    write_manifest(w_out + ".manifest.json", {cmdline, {w_pheno, w_geno, w_kin}});
  });

  // simulate
  auto* cs = app.add_subcommand("simulate", "scenario-driven simulation study");
  cs->fallthrough();
  std::string s_scenario, s_dir;
  bool s_keep = false;
  cs->add_option("--scenario", s_scenario, "scenario config file")->required();
  cs->add_option("--out-dir", s_dir, "output directory")->required();
  cs->add_flag("--keep-traits", s_keep, "write per-trait phenotype and genetic-value CSVs");
  cs->callback([&] {
    auto sc = sim::load_scenario(s_scenario);
    if (seed_opt->count() > 0) sc.seed = seed;
    fs::create_directories(s_dir);
    sim::TraitSink sink;
    if (s_keep) {
      fs::create_directories(s_dir + "/traits");
      sink = [&](std::size_t lv, std::size_t t, const sim::SimulatedTrait& trait,
                 const std::vector<std::string>& accessions) {
        std::string tag = std::to_string(lv) + "_" + std::to_string(t);
        csv::Writer wp(s_dir + "/traits/pheno_" + tag + ".csv");
        wp.row({"genotype", "value"});
        for (std::size_t i = 0; i < trait.phenotypes.genotype.size(); ++i)
          wp.row({trait.phenotypes.genotype[i],
                  csv::format_num(trait.phenotypes.value(static_cast<Eigen::Index>(i)))});
        csv::Writer wg(s_dir + "/traits/genetic_" + tag + ".csv");
        wg.row({"accession", "true_g"});
        for (std::size_t i = 0; i < accessions.size(); ++i)
          wg.row({accessions[i],
                  csv::format_num(trait.true_g(static_cast<Eigen::Index>(i)))});
      };
    }
    auto report = sim::run_study(sc, threads, sink);
    {
      csv::Writer w(s_dir + "/estimates.csv");
      w.row({"method", "h2_true", "n_ok", "n_fail", "bias", "sd", "coverage_std",
             "width_std", "coverage_log", "width_log"});
      for (const auto& r : report.estimates)
        w.row({r.method, csv::format_num(r.h2_true), std::to_string(r.n_ok),
               std::to_string(r.n_fail), num_or_empty(r.bias), num_or_empty(r.sd),
               num_or_empty(r.coverage_std), num_or_empty(r.width_std),
               num_or_empty(r.coverage_log), num_or_empty(r.width_log)});
    }
    {
      csv::Writer w(s_dir + "/predictions.csv");
      w.row({"stage", "h2_true", "n_ok", "n_fail", "mean_r_train", "mean_r_valid",
             "sd_r_valid"});
      for (const auto& r : report.predictions)
        w.row({r.stage, csv::format_num(r.h2_true), std::to_string(r.n_ok),
               std::to_string(r.n_fail), num_or_empty(r.mean_r_train),
               num_or_empty(r.mean_r_valid), num_or_empty(r.sd_r_valid)});
    }
    write_manifest(s_dir + "/manifest.json", {cmdline, {s_scenario}, sc.seed, true});
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  } catch (const std::runtime_error& e) {
    std::cerr << "ERROR: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
