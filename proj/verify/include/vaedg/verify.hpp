#pragma once

// Independent oracles used by the test suites and by `vaedg verify`.

#include <cstdint>
#include <string>
#include <vector>

#include "vaedg/config.hpp"
#include "vaedg/losses.hpp"
#include "vaedg/rng.hpp"

namespace vaedg::verify {

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
  double seconds = 0.0;
};

// ---- KL

/// Monte-Carlo estimate of KL(q || N(0, I)) for row `row` of the posterior:
/// the sample mean of log q(z) - log p(z) with z ~ q.
double kl_monte_carlo(const LatentPosterior<double>& posterior, int row, long samples, Rng& rng);

struct KlOracleStats {
  int posteriors = 0;
  double max_rel_error = 0.0;
  double worst_closed_form = 0.0;
  double worst_estimate = 0.0;
};
KlOracleStats kl_oracle(int posteriors, long samples, std::uint64_t seed);

// ---- gradients

struct GradCheckStats {
  long coordinates = 0;
  long within_tolerance = 0;
  double max_rel_error = 0.0;
  double fraction() const { return coordinates ? double(within_tolerance) / double(coordinates) : 0.0; }
};

/// |a - n| / max(|a|, |n|, floor).
double relative_error(double analytic, double numeric, double floor = 1e-7);

/// Central differences of the full training objective (as configured) with
/// respect to every parameter, on a double-precision model. Sampling noise is
/// replayed identically for every evaluation.
GradCheckStats objective_gradient_check(const ExperimentConfig& config, int batch, double h, double tol,
                                        std::uint64_t seed);
/// The 8x8x1, latent-4, 2-example instance.
ExperimentConfig tiny_gradient_config(Algorithm algorithm = Algorithm::vae_dg);

// ---- statistics

/// Asymptotic two-sample Kolmogorov-Smirnov p-value.
double ks_two_sample_pvalue(std::vector<double> a, std::vector<double> b);
/// Upper tail of the chi-squared distribution.
double chi_squared_upper(double statistic, double dof);
/// Pearson statistic against a uniform expectation over the listed cells.
double chi_squared_uniform(const std::vector<long>& counts);

/// Class frequencies of `draws` draws from a class-balanced stream over a
/// dataset with the given per-class counts.
std::vector<double> resampled_class_frequencies(const std::vector<int>& class_counts, long draws, std::uint64_t seed);

// ---- printed tables

struct PrintedRow {
  std::string name;
  std::vector<double> means;  // APTOS, EyePACS, Messidor, Messidor-2
  std::vector<double> stds;
  double avg = 0.0;
  double avg_std = 0.0;
  double diff = 0.0;  // signed; 0 for rows without a Diff. entry
};
std::vector<PrintedRow> printed_main_table();
std::vector<PrintedRow> printed_ablation_table();
inline const std::vector<std::string> kPrintedDomains{"APTOS", "EyePACS", "Messidor", "Messidor-2"};

// ---- suite

/// Fast oracle checks (KL, gradients, resampling, batches, baseline
/// identities, table arithmetic). `quick` reduces sample counts.
std::vector<CheckResult> run_suite(bool quick);

}  // namespace vaedg::verify
