#include "vaedg/harness.hpp"

#include <cmath>
#include <fstream>
#include <iostream>
#include <limits>
#include <sstream>

#include "vaedg/checkpoint.hpp"

namespace vaedg {

// ---------------------------------------------------------------- splits

Split make_split(const std::vector<DomainDataset>& domains, int target_id, double val_fraction, std::uint64_t seed) {
  require(domains.size() >= 2, "leave-one-domain-out needs at least 2 domains");
  require(val_fraction > 0.0 && val_fraction < 1.0, "val_fraction must be in (0, 1)");
  Split split;
  split.target_id = target_id;
  bool found = false;
  for (const auto& d : domains) {
    if (d.domain_id == target_id) {
      require(!found, "duplicate domain id " + std::to_string(target_id));
      split.target = d;
      found = true;
      continue;
    }
    d.validate();
    const std::size_t n = d.examples.size();
    const auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(n)));
    require(n_val >= 1 && n_val < n, "domain " + d.name + " is too small for a train/val split");

    // Fisher-Yates with the portable generator.
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(counter_seed(seed, 0x5b117, static_cast<std::uint64_t>(d.domain_id)));
    for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);

    DomainDataset train = d, val = d;
    train.examples.clear();
    val.examples.clear();
    for (std::size_t i = 0; i < n; ++i) (i < n_val ? val : train).examples.push_back(d.examples[order[i]]);
    train.recount();
    val.recount();
    split.train.push_back(std::move(train));
    split.val.push_back(std::move(val));
  }
  require(found, "unknown target domain id " + std::to_string(target_id));
  return split;
}

const char* to_string(Criterion c) {
  return c == Criterion::training_domain_validation ? "training_domain_validation" : "oracle";
}

// ---------------------------------------------------------------- records

namespace {

nlohmann::json loss_json(const LossBreakdown& l, bool with_penalty) {
  nlohmann::json j = {{"recon", l.recon},   {"kl", l.kl},       {"cls", l.cls},
                      {"recon_weight", l.recon_weight},         {"beta", l.beta},
                      {"alpha", l.alpha},   {"total", l.total}};
  if (with_penalty) {
    j["penalty"] = l.penalty;
    j["penalty_weight"] = l.penalty_weight;
  }
  return j;
}

// Non-finite values are written as null.
double number(const nlohmann::json& j, const char* key) {
  const auto& v = j.at(key);
  return v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>();
}

LossBreakdown loss_from_json(const nlohmann::json& j) {
  LossBreakdown l;
  l.recon = number(j, "recon");
  l.kl = number(j, "kl");
  l.cls = number(j, "cls");
  l.recon_weight = j.at("recon_weight");
  l.beta = j.at("beta");
  l.alpha = j.at("alpha");
  l.total = number(j, "total");
  if (j.contains("penalty")) {
    l.penalty = number(j, "penalty");
    l.penalty_weight = j.at("penalty_weight");
  }
  return l;
}

template <typename V>
nlohmann::json int_map_json(const std::map<int, V>& m) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : m) j[std::to_string(k)] = v;
  return j;
}

template <typename V>
std::map<int, V> int_map_from_json(const nlohmann::json& j) {
  std::map<int, V> m;
  for (const auto& [k, v] : j.items()) m[std::stoi(k)] = v.template get<V>();
  return m;
}

}  // namespace

nlohmann::json to_json(const RunRecord& r) {
  nlohmann::json evals = nlohmann::json::array();
  for (const auto& e : r.evals)
    evals.push_back({{"step", e.step},
                     {"loss", loss_json(e.train, r.has_penalty)},
                     {"val_accuracy", e.val_accuracy},
                     {"target_accuracy", e.target_accuracy}});
  nlohmann::json results = nlohmann::json::object();
  for (const auto& [name, res] : r.results)
    results[name] = {{"step", res.step}, {"val_accuracy", res.val_accuracy}, {"target_accuracy", res.target_accuracy}};
  return {{"config_digest", r.config_digest},
          {"config", r.config},
          {"algorithm", r.algorithm},
          {"variant", r.variant},
          {"target_domain", r.target_domain},
          {"target_name", r.target_name},
          {"seed", r.seed},
          {"status", r.status},
          {"diagnostic", r.diagnostic},
          {"has_penalty", r.has_penalty},
          {"evals", evals},
          {"checkpoints", r.checkpoints},
          {"results", results},
          {"train_draws_by_domain", int_map_json(r.train_draws_by_domain)},
          {"val_examples_by_domain", int_map_json(r.val_examples_by_domain)}};
}

RunRecord record_from_json(const nlohmann::json& j) {
  RunRecord r;
  r.config_digest = j.at("config_digest");
  r.config = j.at("config").get<std::map<std::string, std::string>>();
  r.algorithm = j.at("algorithm");
  r.variant = j.at("variant");
  r.target_domain = j.at("target_domain");
  r.target_name = j.at("target_name");
  r.seed = j.at("seed");
  r.status = j.at("status");
  r.diagnostic = j.at("diagnostic");
  r.has_penalty = j.at("has_penalty");
  for (const auto& e : j.at("evals"))
    r.evals.push_back({e.at("step"), loss_from_json(e.at("loss")), e.at("val_accuracy"), e.at("target_accuracy")});
  r.checkpoints = j.at("checkpoints").get<std::map<std::string, long>>();
  for (const auto& [name, v] : j.at("results").items())
    r.results[name] = {v.at("step"), v.at("val_accuracy"), v.at("target_accuracy")};
  r.train_draws_by_domain = int_map_from_json<long>(j.at("train_draws_by_domain"));
  r.val_examples_by_domain = int_map_from_json<long>(j.at("val_examples_by_domain"));
  return r;
}

void save_record(const RunRecord& record, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    require(static_cast<bool>(out), "cannot write run record " + path.string());
    out << to_json(record).dump(2) << "\n";
  }
  std::filesystem::rename(tmp, path);
}

RunRecord load_record(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), "cannot read run record " + path.string());
  try {
    return record_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInput("malformed run record " + path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------- selection

long select_by_validation(std::span<const ValidationPoint> points) {
  require(!points.empty(), "cannot select from an empty record");
  const ValidationPoint* best = &points[0];
  for (const auto& p : points)
    if (p.val_accuracy > best->val_accuracy || (p.val_accuracy == best->val_accuracy && p.step < best->step))
      best = &p;
  return best->step;
}

namespace {

long select_by_target(const std::vector<EvalEntry>& evals) {
  require(!evals.empty(), "cannot select from an empty record");
  const EvalEntry* best = &evals[0];
  for (const auto& e : evals)
    if (e.target_accuracy > best->target_accuracy ||
        (e.target_accuracy == best->target_accuracy && e.step < best->step))
      best = &e;
  return best->step;
}

}  // namespace

long select_model(const RunRecord& record, Criterion criterion) {
  require(!record.evals.empty(), "cannot select from an empty record");
  if (criterion == Criterion::oracle) return select_by_target(record.evals);
  std::vector<ValidationPoint> points;
  for (const auto& e : record.evals) points.push_back({e.step, e.val_accuracy});
  return select_by_validation(points);
}

std::string checkpoint_id(long step) { return "step_" + std::to_string(step); }

// ---------------------------------------------------------------- evaluation

double evaluate(const VaeModel<float>& model, const DomainDataset& dataset) {
  require(!dataset.examples.empty(), "cannot evaluate on an empty dataset");
  const auto batch = make_batch(dataset);
  const auto pred = model.predict(batch.images);
  long correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == batch.labels[i];
  return static_cast<double>(correct) / static_cast<double>(pred.size());
}

double evaluate_mean(const VaeModel<float>& model, const std::vector<DomainDataset>& datasets) {
  require(!datasets.empty(), "no datasets to evaluate");
  double sum = 0.0;
  for (const auto& d : datasets) sum += evaluate(model, d);
  return sum / static_cast<double>(datasets.size());
}

// ---------------------------------------------------------------- training

Trainer::Trainer(const ExperimentConfig& config, const Split& split)
    : config_(config),
      split_(&split),
      model_(config.model_config(), config.seed),
      optimizer_(config.optimizer, config.learning_rate, model_.params()),
      grads_(model_.params().zeros_like()),
      state_{GradientVarianceState(config.fishr_ema), {}},
      sampling_rng_(counter_seed(config.seed, 0x5a3b)) {
  config_.validate();
  require(!split.train.empty(), "split has no source domains");
  for (const auto& d : split.train) {
    require(d.domain_id != split.target_id, "target domain present among training domains");
    streams_.emplace_back(d, counter_seed(config.seed, 0x57, static_cast<std::uint64_t>(d.domain_id)), config.resample);
    probe_streams_.emplace_back(d, counter_seed(config.seed, 0x9b, static_cast<std::uint64_t>(d.domain_id)),
                                config.resample);
  }
  Rng eps_rng(counter_seed(config.seed, 0xf0));
  state_.frozen_eps.resize(config.latent_dim);
  for (auto& e : state_.frozen_eps) e = static_cast<float>(eps_rng.normal());
}

GroupMask Trainer::mask_for_step(long step) const {
  if (!config_.alternate_optimization) return kAllGroups;
  // Even steps: inference model; odd steps: generative model and head.
  if (step % 2 == 0) return {true, false, false};
  return {false, true, true};
}

LossBreakdown Trainer::step() {
  const long next = step_ + 1;
  const Batch batch = pooled_batch(streams_, config_.per_domain);
  for (int d : batch.domains) {
    if (d == split_->target_id) throw std::logic_error("target-domain example drawn by a training iterator");
    ++draws_[d];
  }
  grads_.zero();
  const auto loss = compute_objective(config_, model_, batch.images, batch.labels, batch.domains, next, sampling_rng_,
                                      state_, &grads_);
  if (!std::isfinite(loss.total)) {
    std::ostringstream msg;
    msg << "non-finite loss at step " << next << ": recon=" << loss.recon << " kl=" << loss.kl << " cls=" << loss.cls
        << " penalty=" << loss.penalty << " total=" << loss.total;
    throw DivergenceError(msg.str());
  }
  optimizer_.step(model_.params(), grads_, mask_for_step(next));
  step_ = next;
  return loss;
}

LossBreakdown Trainer::probe_loss() {
  const Batch batch = pooled_batch(probe_streams_, config_.per_domain);
  Rng rng(counter_seed(config_.seed, 0x9c, static_cast<std::uint64_t>(step_)));
  // The Fishr moving averages must not be advanced by a probe.
  ObjectiveState<float> scratch = state_;
  return compute_objective(config_, model_, batch.images, batch.labels, batch.domains, step_, rng, scratch, static_cast<ParameterSet<float>*>(nullptr));
}

namespace {

LossBreakdown mean_loss(const std::vector<LossBreakdown>& losses) {
  LossBreakdown m = losses.back();
  const double n = static_cast<double>(losses.size());
  m.recon = m.kl = m.cls = m.penalty = m.total = 0.0;
  for (const auto& l : losses) {
    m.recon += l.recon / n;
    m.kl += l.kl / n;
    m.cls += l.cls / n;
    m.penalty += l.penalty / n;
    m.total += l.total / n;
  }
  return m;
}

}  // namespace

TrainResult train(const ExperimentConfig& config, const Split& split, const std::filesystem::path& checkpoint_dir,
                  const std::filesystem::path& record_path) {
  Trainer trainer(config, split);
  TrainResult result;
  RunRecord& rec = result.record;
  rec.config_digest = config.digest();
  rec.config = config.to_kv();
  rec.algorithm = to_string(config.algorithm);
  rec.variant = config.variant;
  rec.target_domain = split.target_id;
  rec.target_name = split.target.name;
  rec.seed = config.seed;
  rec.has_penalty = uses_fishr(config.algorithm);
  for (const auto& v : split.val) {
    require(v.domain_id != split.target_id, "target domain present among validation domains");
    rec.val_examples_by_domain[v.domain_id] = static_cast<long>(v.examples.size());
  }

  std::optional<WeightAverageWindow> window;
  if (uses_swad(config.algorithm)) window = swad_window(config.steps, config.swad_start_fraction);

  ParameterSet<float> best_val_params, best_target_params;
  double best_val = -1.0, best_target = -1.0;
  long best_val_step = -1, best_target_step = -1;

  auto record_eval = [&](long step, const LossBreakdown& loss) {
    EvalEntry e;
    e.step = step;
    e.train = loss;
    e.val_accuracy = evaluate_mean(trainer.model(), split.val);
    e.target_accuracy = evaluate(trainer.model(), split.target);
    rec.evals.push_back(e);
    if (e.val_accuracy > best_val) {
      best_val = e.val_accuracy;
      best_val_step = step;
      best_val_params = trainer.model().params();
    }
    if (e.target_accuracy > best_target) {
      best_target = e.target_accuracy;
      best_target_step = step;
      best_target_params = trainer.model().params();
    }
    if (window && step >= window->start_step && step <= window->end_step)
      swad_absorb(*window, trainer.model().params(), step);
  };

  auto fail = [&](const std::string& what) {
    rec.status = "diverged";
    rec.diagnostic = what;
    rec.train_draws_by_domain = trainer.train_draws();
    if (!record_path.empty()) save_record(rec, record_path);
    throw DivergenceError(what);
  };

  try {
    record_eval(0, trainer.probe_loss());
    std::vector<LossBreakdown> interval;
    while (trainer.current_step() < config.steps) {
      interval.push_back(trainer.step());
      const long s = trainer.current_step();
      if (s % config.eval_every == 0 || s == config.steps) {
        record_eval(s, mean_loss(interval));
        interval.clear();
      }
    }
  } catch (const DivergenceError& e) {
    fail(e.what());
  }
  rec.train_draws_by_domain = trainer.train_draws();

  const long tdv_step = select_model(rec, Criterion::training_domain_validation);
  const long oracle_step = select_model(rec, Criterion::oracle);
  if (tdv_step != best_val_step || oracle_step != best_target_step)
    throw std::logic_error("selection disagrees with the checkpoints kept during training");

  auto entry_at = [&](long step) -> const EvalEntry& {
    for (const auto& e : rec.evals)
      if (e.step == step) return e;
    throw std::logic_error("no evaluation at step " + std::to_string(step));
  };
  const auto& tdv = entry_at(tdv_step);
  const auto& orc = entry_at(oracle_step);
  const auto& last = rec.evals.back();
  rec.results["training_domain_validation"] = {tdv_step, tdv.val_accuracy, tdv.target_accuracy};
  rec.results["oracle"] = {oracle_step, orc.val_accuracy, orc.target_accuracy};
  rec.results["last"] = {last.step, last.val_accuracy, last.target_accuracy};

  result.checkpoints[checkpoint_id(tdv_step)] = std::move(best_val_params);
  result.checkpoints[checkpoint_id(oracle_step)] = std::move(best_target_params);
  result.checkpoints[checkpoint_id(last.step)] = trainer.model().params();

  if (window && window->count > 0) {
    VaeModel<float> averaged(config.model_config(), config.seed);
    averaged.set_params(swad_finalize(*window));
    rec.results["swad"] = {-1, evaluate_mean(averaged, split.val), evaluate(averaged, split.target)};
    result.checkpoints["swad"] = averaged.params();
  }

  for (const auto& [id, params] : result.checkpoints) {
    rec.checkpoints[id] = id == "swad" ? -1 : std::stol(id.substr(5));
    if (!checkpoint_dir.empty())
      save_checkpoint(checkpoint_dir / id, params, {rec.checkpoints[id], config.seed, rec.config_digest});
  }
  if (!record_path.empty()) save_record(rec, record_path);
  return result;
}

// ---------------------------------------------------------------- protocol

std::vector<DomainDataset> build_domains(const ExperimentConfig& config) {
  if (config.manifests.empty()) {
    auto spec = ShiftSpec::desk_default(config.num_domains, config.domain_shift, config.data_seed);
    spec.image_side = config.image_side;
    spec.channels = config.channels;
    require(static_cast<int>(spec.classes.size()) == config.num_classes,
            "synthetic domains have " + std::to_string(spec.classes.size()) + " classes");
    return generate_synthetic_domains(spec, config.num_domains, config.domain_size, config.data_seed);
  }
  std::vector<DomainDataset> out;
  std::stringstream ss(config.manifests);
  std::string path;
  int id = 0;
  while (std::getline(ss, path, ',')) {
    ManifestOptions opt{config.image_side, config.channels, config.num_classes, id++};
    out.push_back(load_manifest(path, opt));
  }
  require(out.size() >= 2, "need at least 2 manifests");
  return out;
}

std::string cell_name(const ExperimentConfig& config) {
  return std::string(to_string(config.algorithm)) + "-" + config.variant + "-t" + std::to_string(config.target_domain) +
         "-s" + std::to_string(config.seed);
}

std::vector<RunRecord> run_protocol(const ExperimentConfig& base, const std::vector<DomainDataset>& domains,
                                    std::span<const std::uint64_t> seeds, const ProtocolOptions& options) {
  require(!seeds.empty(), "need at least one seed");
  std::vector<int> targets = options.targets;
  if (targets.empty())
    for (const auto& d : domains) targets.push_back(d.domain_id);

  std::vector<RunRecord> records;
  for (int target : targets) {
    for (auto seed : seeds) {
      ExperimentConfig cfg = base;
      cfg.target_domain = target;
      cfg.seed = seed;
      const auto name = cell_name(cfg);
      std::filesystem::path record_path, ck_dir;
      if (!options.out_dir.empty()) {
        record_path = options.out_dir / "records" / (name + ".json");
        if (options.save_checkpoints) ck_dir = options.out_dir / "checkpoints" / name;
        if (std::filesystem::exists(record_path)) {
          auto existing = load_record(record_path);
          if (existing.status == "ok" && existing.config_digest == cfg.digest()) {
            if (options.verbose) std::cerr << "[protocol] " << name << " already done\n";
            records.push_back(std::move(existing));
            continue;
          }
        }
      }
      if (options.verbose) std::cerr << "[protocol] running " << name << "\n";
      const auto split = make_split(domains, target, cfg.val_fraction, seed);
      records.push_back(train(cfg, split, ck_dir, record_path).record);
    }
  }
  return records;
}

}  // namespace vaedg
