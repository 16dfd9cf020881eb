#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vaedg/baselines.hpp"
#include "vaedg/config.hpp"
#include "vaedg/data.hpp"
#include "vaedg/model.hpp"
#include "vaedg/objective.hpp"
#include "vaedg/optimizer.hpp"

namespace vaedg {

/// Leave-one-domain-out partition. Every source domain is split into
/// disjoint train/val parts; the target domain is kept whole.
struct Split {
  std::vector<DomainDataset> train;
  std::vector<DomainDataset> val;
  DomainDataset target;
  int target_id = 0;
};

Split make_split(const std::vector<DomainDataset>& domains, int target_id, double val_fraction, std::uint64_t seed);

enum class Criterion { training_domain_validation, oracle };
const char* to_string(Criterion c);

struct EvalEntry {
  long step = 0;
  /// Mean training loss over the steps since the previous evaluation
  /// (at step 0: the loss of the initial parameters on a probe batch).
  LossBreakdown train;
  double val_accuracy = 0.0;
  double target_accuracy = 0.0;
};

struct CriterionResult {
  long step = -1;  // -1 for the weight-averaged model
  double val_accuracy = 0.0;
  double target_accuracy = 0.0;
};

struct RunRecord {
  std::string config_digest;
  std::map<std::string, std::string> config;
  std::string algorithm;
  std::string variant;
  int target_domain = 0;
  std::string target_name;
  std::uint64_t seed = 0;
  std::string status = "ok";
  std::string diagnostic;
  bool has_penalty = false;
  std::vector<EvalEntry> evals;
  /// Checkpoint id -> step of every materialized checkpoint.
  std::map<std::string, long> checkpoints;
  /// Result per criterion: training_domain_validation, oracle, last, and swad
  /// for weight-averaging algorithms.
  std::map<std::string, CriterionResult> results;
  std::map<int, long> train_draws_by_domain;
  std::map<int, long> val_examples_by_domain;
};

nlohmann::json to_json(const RunRecord& record);
RunRecord record_from_json(const nlohmann::json& j);
void save_record(const RunRecord& record, const std::filesystem::path& path);
RunRecord load_record(const std::filesystem::path& path);

/// The only information the training-domain-validation selector sees.
struct ValidationPoint {
  long step = 0;
  double val_accuracy = 0.0;
};

/// Step with the highest validation accuracy; ties go to the earliest step.
long select_by_validation(std::span<const ValidationPoint> points);
long select_model(const RunRecord& record, Criterion criterion);
std::string checkpoint_id(long step);

/// Fraction of examples whose argmax logit (z = mu) equals the label.
double evaluate(const VaeModel<float>& model, const DomainDataset& dataset);
/// Mean of the per-domain accuracies.
double evaluate_mean(const VaeModel<float>& model, const std::vector<DomainDataset>& datasets);

/// Steps a model through one leave-one-domain-out cell.
class Trainer {
 public:
  Trainer(const ExperimentConfig& config, const Split& split);

  /// One optimizer update; returns the loss at the pre-update parameters.
  LossBreakdown step();
  /// Loss of the current parameters on a batch from the probe streams.
  LossBreakdown probe_loss();
  long current_step() const { return step_; }
  const VaeModel<float>& model() const { return model_; }
  /// Group mask that step number `step` (1-based) updates.
  GroupMask mask_for_step(long step) const;
  const std::map<int, long>& train_draws() const { return draws_; }

 private:
  ExperimentConfig config_;
  const Split* split_;
  VaeModel<float> model_;
  Optimizer optimizer_;
  ParameterSet<float> grads_;
  ObjectiveState<float> state_;
  std::vector<ClassBalancedStream> streams_;
  std::vector<ClassBalancedStream> probe_streams_;
  Rng sampling_rng_;
  long step_ = 0;
  std::map<int, long> draws_;
};

struct TrainResult {
  RunRecord record;
  /// Checkpoint id -> parameters: the selected steps, the last step and,
  /// when enabled, the weight average ("swad").
  std::map<std::string, ParameterSet<float>> checkpoints;
};

/// Runs config.steps updates, evaluating at step 0, every eval_every steps
/// and at the final step. When checkpoint_dir is non-empty the kept
/// checkpoints are written under it. Throws DivergenceError on a
/// non-finite loss; the partial record is written to record_path if given.
TrainResult train(const ExperimentConfig& config, const Split& split,
                  const std::filesystem::path& checkpoint_dir = {},
                  const std::filesystem::path& record_path = {});

/// Source domains described by the config: synthetic unless manifests are given.
std::vector<DomainDataset> build_domains(const ExperimentConfig& config);

struct ProtocolOptions {
  std::filesystem::path out_dir;   // records/ and checkpoints/ go here; empty keeps everything in memory
  bool save_checkpoints = true;
  std::vector<int> targets;        // empty: every domain
  bool verbose = false;
};

std::string cell_name(const ExperimentConfig& config);

/// One cell per (target, seed). Existing record files with a matching config
/// digest are loaded instead of re-run.
std::vector<RunRecord> run_protocol(const ExperimentConfig& base, const std::vector<DomainDataset>& domains,
                                    std::span<const std::uint64_t> seeds, const ProtocolOptions& options = {});

}  // namespace vaedg
