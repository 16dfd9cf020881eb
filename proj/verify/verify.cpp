#include "vaedg/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

#include <boost/math/distributions/chi_squared.hpp>

#include "vaedg/baselines.hpp"
#include "vaedg/data.hpp"
#include "vaedg/objective.hpp"
#include "vaedg/report.hpp"

namespace vaedg::verify {

double kl_monte_carlo(const LatentPosterior<double>& posterior, int row, long samples, Rng& rng) {
  const int d = posterior.dim;
  const double* mu = posterior.mu.data() + std::size_t(row) * d;
  const double* lv = posterior.logvar.data() + std::size_t(row) * d;
  std::vector<double> sigma(d);
  for (int j = 0; j < d; ++j) sigma[j] = std::exp(0.5 * lv[j]);
  double acc = 0.0;
  for (long s = 0; s < samples; ++s) {
    double log_ratio = 0.0;
    for (int j = 0; j < d; ++j) {
      const double eps = rng.normal();
      const double z = mu[j] + sigma[j] * eps;
      // log N(z; mu, sigma^2) - log N(z; 0, 1), constants cancel.
      log_ratio += -0.5 * eps * eps - 0.5 * lv[j] + 0.5 * z * z;
    }
    acc += log_ratio;
  }
  return acc / static_cast<double>(samples);
}

KlOracleStats kl_oracle(int posteriors, long samples, std::uint64_t seed) {
  KlOracleStats stats;
  Rng rng(counter_seed(seed, 0xc1));
  while (stats.posteriors < posteriors) {
    const int dim = 1 + static_cast<int>(rng.below(8));
    LatentPosterior<double> p(1, dim);
    for (int j = 0; j < dim; ++j) {
      p.mu[j] = rng.uniform(-2.0, 2.0);
      p.logvar[j] = rng.uniform(-2.0, 2.0);
    }
    const double closed = gaussian_kl(p);
    // Near-zero divergences make a relative comparison meaningless.
    if (closed < 0.1) continue;
    Rng mc(counter_seed(seed, 0xc2, static_cast<std::uint64_t>(stats.posteriors)));
    const double est = kl_monte_carlo(p, 0, samples, mc);
    const double rel = std::abs(est - closed) / closed;
    if (rel >= stats.max_rel_error) {
      stats.max_rel_error = rel;
      stats.worst_closed_form = closed;
      stats.worst_estimate = est;
    }
    ++stats.posteriors;
  }
  return stats;
}

double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

ExperimentConfig tiny_gradient_config(Algorithm algorithm) {
  auto c = ExperimentConfig::defaults(Scale::desk, algorithm);
  c.image_side = 8;
  c.channels = 1;
  c.latent_dim = 4;
  c.conv_channels = {4, 8};
  c.head_hidden = 6;
  c.beta = scaled_loss_weight(kFullScaleLossWeight, c.image_side, c.channels);
  c.alpha = c.beta;
  c.fishr_warmup = 0;
  return c;
}

GradCheckStats objective_gradient_check(const ExperimentConfig& config, int batch, double h, double tol,
                                        std::uint64_t seed) {
  VaeModel<double> model(config.model_config(), seed);
  Rng rng(counter_seed(seed, 0x6c));
  Tensor<double> x({batch, config.channels, config.image_side, config.image_side});
  for (auto& v : x.data) v = rng.uniform();
  std::vector<int> labels(batch), domains(batch);
  for (int i = 0; i < batch; ++i) {
    labels[i] = static_cast<int>(rng.below(config.num_classes));
    domains[i] = i % 2;
  }
  ObjectiveState<double> initial{GradientVarianceState(config.fishr_ema), {}};
  initial.frozen_eps.resize(config.latent_dim);
  for (auto& e : initial.frozen_eps) e = rng.normal();
  const std::uint64_t noise_seed = counter_seed(seed, 0x6d);
  const long step = std::max<long>(1, config.fishr_warmup);

  auto loss = [&]() {
    Rng noise(noise_seed);
    auto state = initial;
    return compute_objective(config, model, x, labels, domains, step, noise, state,
                             static_cast<ParameterSet<double>*>(nullptr))
        .total;
  };

  auto grads = model.params().zeros_like();
  {
    Rng noise(noise_seed);
    auto state = initial;
    compute_objective(config, model, x, labels, domains, step, noise, state, &grads);
  }

  GradCheckStats stats;
  auto& params = model.params();
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (std::size_t i = 0; i < params[p].value.size(); ++i) {
      double& w = params[p].value[i];
      const double saved = w;
      w = saved + h;
      const double up = loss();
      w = saved - h;
      const double down = loss();
      w = saved;
      const double rel = relative_error(grads[p].value[i], (up - down) / (2.0 * h));
      ++stats.coordinates;
      if (rel < tol) ++stats.within_tolerance;
      stats.max_rel_error = std::max(stats.max_rel_error, rel);
    }
  }
  return stats;
}

double ks_two_sample_pvalue(std::vector<double> a, std::vector<double> b) {
  require(!a.empty() && !b.empty(), "KS test needs two nonempty samples");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  std::size_t i = 0, j = 0;
  double d = 0.0;
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  while (i < a.size() && j < b.size()) {
    const double v = std::min(a[i], b[j]);
    while (i < a.size() && a[i] == v) ++i;
    while (j < b.size() && b[j] == v) ++j;
    d = std::max(d, std::abs(i / na - j / nb));
  }
  const double ne = na * nb / (na + nb);
  const double lambda = (std::sqrt(ne) + 0.12 + 0.11 / std::sqrt(ne)) * d;
  if (lambda < 1e-3) return 1.0;
  double p = 0.0;
  for (int k = 1; k <= 100; ++k) {
    const double term = 2.0 * ((k % 2) ? 1.0 : -1.0) * std::exp(-2.0 * k * k * lambda * lambda);
    p += term;
    if (std::abs(term) < 1e-12) break;
  }
  return std::clamp(p, 0.0, 1.0);
}

double chi_squared_upper(double statistic, double dof) {
  boost::math::chi_squared dist(dof);
  return boost::math::cdf(boost::math::complement(dist, statistic));
}

double chi_squared_uniform(const std::vector<long>& counts) {
  long total = 0;
  for (long c : counts) total += c;
  const double expected = static_cast<double>(total) / static_cast<double>(counts.size());
  double stat = 0.0;
  for (long c : counts) stat += (c - expected) * (c - expected) / expected;
  return stat;
}

std::vector<double> resampled_class_frequencies(const std::vector<int>& class_counts, long draws, std::uint64_t seed) {
  DomainDataset ds;
  ds.name = "counts";
  ds.image_side = 1;
  ds.channels = 1;
  ds.num_classes = static_cast<int>(class_counts.size());
  for (int k = 0; k < ds.num_classes; ++k)
    for (int i = 0; i < class_counts[k]; ++i) ds.examples.push_back({{0.5f}, k, 0, {}});
  ds.recount();
  ClassBalancedStream stream(ds, seed);
  std::vector<double> freq(class_counts.size(), 0.0);
  for (long n = 0; n < draws; ++n) freq[ds.examples[stream.next()].label] += 1.0;
  for (auto& f : freq) f /= static_cast<double>(draws);
  return freq;
}

std::vector<PrintedRow> printed_main_table() {
  return {
      {"ERM", {63.75, 70.22, 66.11, 67.38}, {5.5, 1.6, 0.8, 1.0}, 66.86, 2.2, 0.0},
      {"DRGen", {57.06, 72.52, 61.25, 49.16}, {0.9, 1.3, 4.2, 16.3}, 60.00, 5.7, 0.0},
      {"Fishr", {62.89, 71.92, 65.69, 63.54}, {5.0, 1.3, 1.1, 3.8}, 66.01, 2.8, 0.0},
      {"VAE-DG", {66.14, 72.74, 65.90, 67.67}, {1.1, 1.0, 0.7, 2.0}, 68.11, 1.2, 0.0},
      {"VAE-DG oracle", {68.54, 74.30, 66.39, 70.27}, {2.5, 0.2, 1.3, 1.2}, 69.87, 1.3, 0.0},
  };
}

std::vector<PrintedRow> printed_ablation_table() {
  return {
      {"VAE-DG ResNet-152", {61.45, 71.44, 65.94, 67.81}, {8.2, 3.1, 1.0, 2.6}, 66.66, 3.7, -1.45},
      {"VAE-DG + SWAD", {55.66, 73.52, 34.24, 16.48}, {8.8, 0.0, 12.2, 12.0}, 44.97, 8.3, -23.14},
      {"ERM + SWAD", {54.93, 71.35, 64.76, 58.48}, {0.6, 0.5, 0.7, 3.1}, 62.38, 1.2, -4.5},
      {"Latent-dim 64", {62.15, 73.80, 66.42, 68.98}, {3.1, 0.4, 2.1, 3.0}, 67.84, 2.2, -0.27},
      {"Latent-dim 128", {62.61, 73.64, 66.60, 66.09}, {3.5, 0.6, 1.9, 2.2}, 67.23, 2.0, -0.88},
      {"Fixed latent space", {63.87, 73.44, 66.46, 69.39}, {0.6, 0.8, 0.6, 0.8}, 68.29, 0.7, 0.18},
      {"beta, alpha = 10,000", {64.38, 73.17, 65.42, 69.27}, {1.8, 0.5, 0.4, 4.0}, 68.06, 1.7, -0.05},
      {"beta, alpha = 100,000", {62.50, 72.30, 66.56, 67.88}, {3.5, 1.6, 1.3, 1.0}, 67.31, 1.8, -0.80},
      {"No Recon Loss", {63.44, 70.62, 66.25, 65.21}, {3.9, 0.8, 0.8, 1.4}, 66.38, 1.7, -1.73},
      {"No KL Divergence", {68.29, 69.98, 66.60, 66.93}, {2.3, 4.3, 1.1, 1.6}, 67.95, 2.3, -0.17},
  };
}

// ---------------------------------------------------------------- suite

namespace {

template <typename F>
CheckResult timed(const std::string& name, F&& body) {
  CheckResult r;
  r.name = name;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    std::ostringstream detail;
    r.pass = body(detail);
    r.detail = detail.str();
  } catch (const std::exception& e) {
    r.pass = false;
    r.detail = std::string("exception: ") + e.what();
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

std::vector<ResultRow> rows_from_printed(const PrintedRow& row) {
  std::vector<ResultRow> out;
  for (std::size_t d = 0; d < row.means.size(); ++d)
    out.push_back({row.name, "printed", static_cast<int>(d), 0, "training_domain_validation", row.means[d] / 100.0});
  return out;
}

}  // namespace

std::vector<CheckResult> run_suite(bool quick) {
  std::vector<CheckResult> out;

  out.push_back(timed("kl_closed_form_vs_monte_carlo", [&](std::ostream& os) {
    const auto s = kl_oracle(quick ? 20 : 100, quick ? 20000 : 100000, 1);
    const bool zero = gaussian_kl(LatentPosterior<double>({0.0, 0.0}, {0.0, 0.0})) == 0.0;
    os << s.posteriors << " posteriors, max relative error " << s.max_rel_error << ", KL(prior)=0: " << zero;
    return zero && s.max_rel_error < 0.05;
  }));

  for (auto alg : {Algorithm::vae_dg, Algorithm::fishr}) {
    out.push_back(timed(std::string("finite_difference_gradients_") + to_string(alg), [&](std::ostream& os) {
      const auto cfg = tiny_gradient_config(alg);
      const auto s = objective_gradient_check(cfg, alg == Algorithm::fishr ? 4 : 2, 1e-4, 1e-3, 3);
      os << s.within_tolerance << "/" << s.coordinates << " coordinates within 1e-3";
      return s.fraction() > 0.99;
    }));
  }

  out.push_back(timed("reduction_identities", [&](std::ostream& os) {
    Rng rng(11);
    ForwardOutputs<double> o;
    Tensor<double> x({3, 1, 4, 4});
    for (auto& v : x.data) v = rng.uniform();
    o.x_prime = Tensor<double>(x.shape);
    for (auto& v : o.x_prime.data) v = rng.uniform();
    o.posterior = LatentPosterior<double>(3, 5);
    for (auto& v : o.posterior.mu) v = rng.normal();
    for (auto& v : o.posterior.logvar) v = rng.uniform(-1.0, 1.0);
    o.logits = Tensor<double>({3, 4});
    for (auto& v : o.logits.data) v = rng.normal();
    std::vector<int> y{0, 3, 1};
    const double vae = vae_loss(x, o);
    const auto a = vae_dg_loss(x, y, o, 1.0, 0.0);
    const auto b = vae_dg_loss(x, y, o, 0.0, 0.0);
    os << "vae_loss=" << vae << " beta1alpha0=" << a.total << " recon_only=" << b.total;
    return a.total == vae && b.total == b.recon;
  }));

  out.push_back(timed("class_balanced_resampling", [&](std::ostream& os) {
    const long draws = 50000;
    const auto f = resampled_class_frequencies({100, 1, 1, 1, 1}, draws, 5);
    std::vector<long> counts;
    bool ok = true;
    for (double v : f) {
      counts.push_back(std::lround(v * draws));
      ok = ok && std::abs(v - 0.2) <= 0.02;
      os << v << " ";
    }
    const double p = chi_squared_upper(chi_squared_uniform(counts), 4.0);
    os << "chi2 p=" << p;
    return ok && p > 0.001;
  }));

  out.push_back(timed("pooled_batch_contract", [&](std::ostream& os) {
    auto spec = ShiftSpec::desk_default(3);
    const auto domains = generate_synthetic_domains(spec, 3, 30, 2);
    std::vector<ClassBalancedStream> streams;
    for (const auto& d : domains) streams.emplace_back(d, counter_seed(2, d.domain_id));
    bool ok = true;
    for (int b = 0; b < 20; ++b) {
      const auto batch = pooled_batch(streams, 22);
      std::map<int, int> per;
      for (int d : batch.domains) ++per[d];
      ok = ok && batch.size() == 66 && batch.images.dim(0) == 66 && per == std::map<int, int>{{0, 22}, {1, 22}, {2, 22}};
    }
    os << "20 batches of 3 x 22";
    return ok;
  }));

  out.push_back(timed("fishr_penalty_properties", [&](std::ostream& os) {
    const double same = fishr_penalty({{0.3, 1.2}, {0.3, 1.2}, {0.3, 1.2}});
    const double fixture = fishr_penalty({{1.0, 1.0}, {3.0, 3.0}});
    const std::vector<std::vector<double>> v{{0.1, 0.7, 0.2}, {0.4, 0.3, 0.9}};
    auto scaled = v;
    for (auto& r : scaled)
      for (auto& e : r) e *= 3.0;
    const double ratio = fishr_penalty(scaled) / fishr_penalty(v);
    os << "identical=" << same << " fixture=" << fixture << " scale3 ratio=" << ratio;
    return same == 0.0 && std::abs(fixture - 1.0) < 1e-12 && std::abs(ratio - 9.0) < 1e-9;
  }));

  out.push_back(timed("swad_average_properties", [&](std::ostream& os) {
    ModelConfig mc;
    mc.latent_dim = 4;
    mc.image_side = 8;
    mc.channels = 1;
    mc.conv_channels = {4};
    VaeModel<float> a(mc, 1), b(mc, 2);
    auto constant = swad_window(10, 0.5);
    for (long s = 5; s <= 10; ++s) swad_absorb(constant, a.params(), s);
    const bool identity = swad_finalize(constant) == a.params();
    auto pair = swad_window(10, 0.5);
    swad_absorb(pair, a.params(), 6);
    swad_absorb(pair, b.params(), 7);
    const auto mid = swad_finalize(pair);
    double worst = 0.0;
    for (std::size_t p = 0; p < mid.size(); ++p)
      for (std::size_t i = 0; i < mid[p].value.size(); ++i)
        worst = std::max(worst, std::abs(double(mid[p].value[i]) -
                                         0.5 * (double(a.params()[p].value[i]) + double(b.params()[p].value[i]))));
    os << "identity=" << identity << " midpoint max error=" << worst;
    return identity && worst <= 1e-7;
  }));

  out.push_back(timed("printed_table_arithmetic", [&](std::ostream& os) {
    bool ok = true;
    auto check_rows = [&](const std::vector<PrintedRow>& rows) {
      for (const auto& r : rows) {
        const auto table = aggregate(rows_from_printed(r));
        std::vector<Cell> cells;
        for (std::size_t d = 0; d < r.means.size(); ++d) cells.push_back({r.means[d], r.stds[d], 3});
        const auto avg = average_cell(cells);
        const bool good = std::abs(table.rows.at(0).average.mean - r.avg) <= 0.01 + 1e-9 &&
                          std::abs(avg.std - r.avg_std) <= 0.05 + 1e-9;
        if (!good) os << r.name << " avg " << table.rows.at(0).average.mean << " vs " << r.avg << "; ";
        ok = ok && good;
      }
    };
    check_rows(printed_main_table());
    check_rows(printed_ablation_table());

    // Diff. column against the main VAE-DG row.
    std::vector<ResultRow> grid = rows_from_printed(printed_main_table()[3]);
    for (const auto& r : printed_ablation_table()) {
      auto rows = rows_from_printed(r);
      grid.insert(grid.end(), rows.begin(), rows.end());
    }
    const auto table = diff_column(aggregate(grid), {"VAE-DG", "printed", "training_domain_validation"});
    const auto* resnet = table.find({"VAE-DG ResNet-152", "printed", "training_domain_validation"});
    const auto* fixed = table.find({"Fixed latent space", "printed", "training_domain_validation"});
    const auto s1 = format_diff(*resnet->diff), s2 = format_diff(*fixed->diff);
    os << "diffs: " << s1 << ", " << s2;
    return ok && s1 == "1.45 (down)" && s2 == "0.18 (up)";
  }));

  return out;
}

}  // namespace vaedg::verify
