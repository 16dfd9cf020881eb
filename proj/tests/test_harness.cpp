#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "support/generators.hpp"
#include "vaedg/checkpoint.hpp"
#include "vaedg/harness.hpp"

using namespace vaedg;
namespace fs = std::filesystem;

namespace {

// Examples carry a unique code in their first pixel so partitions can be checked.
std::vector<DomainDataset> coded_domains(int num_domains, int size) {
  std::vector<DomainDataset> out;
  for (int d = 0; d < num_domains; ++d) {
    DomainDataset ds;
    ds.domain_id = d;
    ds.name = "d" + std::to_string(d);
    ds.image_side = 2;
    ds.channels = 1;
    for (int i = 0; i < size; ++i) {
      LabeledExample e;
      e.image = {static_cast<float>(d * size + i) / static_cast<float>(num_domains * size), 0.f, 0.f, 0.f};
      e.label = i % kDefaultNumClasses;
      e.domain_id = d;
      ds.examples.push_back(e);
    }
    ds.recount();
    out.push_back(ds);
  }
  return out;
}

std::multiset<float> codes(const DomainDataset& d) {
  std::multiset<float> s;
  for (const auto& e : d.examples) s.insert(e.image[0]);
  return s;
}

ExperimentConfig tiny_config(Algorithm alg = Algorithm::vae_dg) {
  auto c = ExperimentConfig::defaults(Scale::desk, alg);
  c.image_side = 8;
  c.channels = 1;
  c.conv_channels = {4, 8};
  c.latent_dim = 4;
  c.head_hidden = 6;
  c.per_domain = 4;
  c.steps = 12;
  c.eval_every = 4;
  c.domain_size = 25;
  c.fishr_warmup = 0;
  return c;
}

// A dataset of `labels.size()` blank 8x8x1 images.
DomainDataset labelled(const std::vector<int>& labels) {
  DomainDataset ds;
  ds.image_side = 8;
  ds.channels = 1;
  for (int y : labels) ds.examples.push_back({std::vector<float>(64, 0.5f), y, 0, {}});
  ds.recount();
  return ds;
}

// Model whose logits ignore the input and favour `cls`.
VaeModel<float> constant_predictor(int cls) {
  VaeModel<float> m(tiny_config().model_config(), 0);
  auto& p = m.params();
  p[*p.find("head.out.weight")].value.data.assign(p[*p.find("head.out.weight")].value.size(), 0.f);
  auto& bias = p[*p.find("head.out.bias")].value;
  bias.data.assign(bias.size(), 0.f);
  bias[cls] = 1.f;
  return m;
}

RunRecord record_with(const std::vector<double>& val, const std::vector<double>& target) {
  RunRecord r;
  for (std::size_t i = 0; i < val.size(); ++i) {
    EvalEntry e;
    e.step = static_cast<long>(100 * (i + 1));
    e.val_accuracy = val[i];
    e.target_accuracy = target[i];
    r.evals.push_back(e);
  }
  return r;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("vaedg_test_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

// ---------------------------------------------------------------- splits

TEST(Split, SizesForFourDomainsOfHundred) {
  const auto domains = coded_domains(4, 100);
  const auto s = make_split(domains, 0, 0.2, 0);
  ASSERT_EQ(s.train.size(), 3u);
  ASSERT_EQ(s.val.size(), 3u);
  for (int i = 0; i < 3; ++i) {
    EXPECT_EQ(s.train[i].size(), 80u);
    EXPECT_EQ(s.val[i].size(), 20u);
  }
  EXPECT_EQ(s.target.size(), 100u);
  EXPECT_EQ(s.target, domains[0]);
}

TEST(Split, PartitionIsDisjointAndComplete) {
  const auto domains = coded_domains(3, 37);
  for (int target = 0; target < 3; ++target) {
    const auto s = make_split(domains, target, 0.2, 5);
    for (std::size_t i = 0; i < s.train.size(); ++i) {
      const int id = s.train[i].domain_id;
      EXPECT_NE(id, target);
      EXPECT_EQ(s.val[i].domain_id, id);
      EXPECT_EQ(s.val[i].size(), static_cast<std::size_t>(std::llround(0.2 * 37)));
      auto tr = codes(s.train[i]), va = codes(s.val[i]);
      for (float c : va) EXPECT_EQ(tr.count(c), 0u);
      tr.insert(va.begin(), va.end());
      EXPECT_EQ(tr, codes(domains[id]));
      for (const auto& e : s.train[i].examples) EXPECT_EQ(e.domain_id, id);
    }
  }
}

TEST(Split, DeterministicGivenSeed) {
  const auto domains = coded_domains(4, 50);
  const auto a = make_split(domains, 2, 0.2, 9);
  const auto b = make_split(domains, 2, 0.2, 9);
  const auto c = make_split(domains, 2, 0.2, 10);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.val, b.val);
  EXPECT_NE(a.val, c.val);
}

TEST(Split, FourLeaveOneOutConfigurations) {
  const auto domains = coded_domains(4, 20);
  std::set<std::set<int>> source_sets;
  for (int t = 0; t < 4; ++t) {
    const auto s = make_split(domains, t, 0.2, 0);
    EXPECT_EQ(s.target.domain_id, t);
    std::set<int> ids;
    for (const auto& d : s.train) ids.insert(d.domain_id);
    EXPECT_EQ(ids.size(), 3u);
    EXPECT_FALSE(ids.contains(t));
    source_sets.insert(ids);
  }
  EXPECT_EQ(source_sets.size(), 4u);
}

TEST(Split, Errors) {
  const auto domains = coded_domains(3, 20);
  EXPECT_THROW(make_split(domains, 7, 0.2, 0), InvalidInput);
  EXPECT_THROW(make_split(domains, 0, 0.0, 0), InvalidInput);
  EXPECT_THROW(make_split(domains, 0, 1.0, 0), InvalidInput);
  EXPECT_THROW(make_split({domains[0]}, 0, 0.2, 0), InvalidInput);
}

// ---------------------------------------------------------------- selection

TEST(Selection, ArgmaxOfValidation) {
  const std::vector<ValidationPoint> p{{100, 0.5}, {200, 0.7}, {300, 0.6}};
  EXPECT_EQ(select_by_validation(p), 200);
}

TEST(Selection, TiesGoToEarliestStep) {
  const std::vector<ValidationPoint> p{{100, 0.7}, {200, 0.7}};
  EXPECT_EQ(select_by_validation(p), 100);
  const std::vector<ValidationPoint> shuffled{{300, 0.7}, {200, 0.7}, {100, 0.1}};
  EXPECT_EQ(select_by_validation(shuffled), 200);
  EXPECT_EQ(select_model(record_with({0.1, 0.2}, {0.9, 0.9}), Criterion::oracle), 100);
}

TEST(Selection, EmptyRecordIsAnError) {
  EXPECT_THROW(select_by_validation({}), InvalidInput);
  EXPECT_THROW(select_model(RunRecord{}, Criterion::oracle), InvalidInput);
}

TEST(Selection, CriteriaDisagreeOnConstructedRecord) {
  const auto r = record_with({0.5, 0.8, 0.6}, {0.7, 0.4, 0.6});
  const long tdv = select_model(r, Criterion::training_domain_validation);
  const long orc = select_model(r, Criterion::oracle);
  EXPECT_EQ(tdv, 200);
  EXPECT_EQ(orc, 100);
  auto at = [&](long s) { return r.evals[s / 100 - 1].target_accuracy; };
  EXPECT_GE(at(orc), at(tdv));
}

TEST(Selection, ValidationSelectorBlindToTargetMetrics) {
  Rng rng(11);
  for (int c = 0; c < gen::kCases; ++c) {
    const int n = 1 + static_cast<int>(rng.below(12));
    std::vector<double> val(n), target(n);
    // Coarse grid so ties actually occur.
    for (int i = 0; i < n; ++i) {
      val[i] = static_cast<double>(rng.below(5)) / 4.0;
      target[i] = rng.uniform();
    }
    auto r = record_with(val, target);
    const long before = select_model(r, Criterion::training_domain_validation);
    for (auto& e : r.evals) e.target_accuracy = std::nan("");
    EXPECT_EQ(select_model(r, Criterion::training_domain_validation), before);
    for (auto& e : r.evals) e.target_accuracy = -1.0;
    EXPECT_EQ(select_model(r, Criterion::training_domain_validation), before);
    // Oracle never beats itself on target accuracy.
    const auto fresh = record_with(val, target);
    const long orc = select_model(fresh, Criterion::oracle);
    EXPECT_GE(fresh.evals[orc / 100 - 1].target_accuracy, fresh.evals[before / 100 - 1].target_accuracy);
  }
}

// ---------------------------------------------------------------- evaluation

TEST(Evaluate, AllCorrect) {
  EXPECT_EQ(evaluate(constant_predictor(3), labelled({3, 3, 3, 3})), 1.0);
}

TEST(Evaluate, ConstantPredictorOnUniformLabels) {
  EXPECT_DOUBLE_EQ(evaluate(constant_predictor(2), labelled({0, 1, 2, 3, 4, 0, 1, 2, 3, 4})), 0.2);
}

TEST(Evaluate, SevenOfTen) {
  EXPECT_DOUBLE_EQ(evaluate(constant_predictor(0), labelled({0, 0, 0, 1, 0, 2, 0, 0, 4, 0})), 0.7);
}

TEST(Evaluate, EmptyDatasetIsAnError) {
  DomainDataset empty;
  EXPECT_THROW(evaluate(constant_predictor(0), empty), InvalidInput);
}

TEST(Evaluate, OrderIndependent) {
  auto cfg = tiny_config();
  const auto domains = build_domains(cfg);
  VaeModel<float> m(cfg.model_config(), 4);
  auto shuffled = domains[1];
  Rng rng(2);
  for (std::size_t i = shuffled.examples.size() - 1; i > 0; --i)
    std::swap(shuffled.examples[i], shuffled.examples[rng.below(i + 1)]);
  EXPECT_EQ(evaluate(m, shuffled), evaluate(m, domains[1]));
  EXPECT_DOUBLE_EQ(evaluate_mean(m, {domains[0], domains[1]}), (evaluate(m, domains[0]) + evaluate(m, domains[1])) / 2);
}

// ---------------------------------------------------------------- training

TEST(Train, ZeroStepsRecordsOnlyInitialEvaluation) {
  auto cfg = tiny_config();
  cfg.steps = 0;
  const auto split = make_split(build_domains(cfg), 0, cfg.val_fraction, 0);
  const auto rec = train(cfg, split).record;
  ASSERT_EQ(rec.evals.size(), 1u);
  EXPECT_EQ(rec.evals[0].step, 0);
  EXPECT_EQ(rec.results.at("training_domain_validation").step, 0);
  EXPECT_TRUE(rec.train_draws_by_domain.empty());
}

TEST(Train, RecordIsCompleteAndMonotone) {
  auto cfg = tiny_config();
  cfg.steps = 10;
  const auto split = make_split(build_domains(cfg), 1, cfg.val_fraction, 0);
  const auto res = train(cfg, split);
  const auto& rec = res.record;
  std::vector<long> steps;
  for (const auto& e : rec.evals) steps.push_back(e.step);
  EXPECT_EQ(steps, (std::vector<long>{0, 4, 8, 10}));
  for (const auto& e : rec.evals) {
    EXPECT_TRUE(std::isfinite(e.train.total));
    EXPECT_GE(e.val_accuracy, 0.0);
    EXPECT_LE(e.val_accuracy, 1.0);
  }
  EXPECT_EQ(rec.status, "ok");
  EXPECT_EQ(rec.target_domain, 1);
  EXPECT_TRUE(res.checkpoints.contains(checkpoint_id(10)));
  for (const auto& [id, step] : rec.checkpoints) EXPECT_EQ(checkpoint_id(step), id);
  for (const auto& [d, n] : rec.train_draws_by_domain) {
    EXPECT_NE(d, 1);
    EXPECT_EQ(n, 10 * cfg.per_domain);
  }
}

TEST(Train, CheckpointsReproduceRecordedAccuracy) {
  TempDir tmp("ckpt_fidelity");
  auto cfg = tiny_config();
  const auto split = make_split(build_domains(cfg), 2, cfg.val_fraction, 0);
  const auto rec = train(cfg, split, tmp.path / "ck").record;
  for (const auto& [name, res] : rec.results) {
    if (name == "swad") continue;
    const auto ck = load_checkpoint(tmp.path / "ck" / checkpoint_id(res.step));
    VaeModel<float> m(cfg.model_config(), 99);
    m.set_params(ck.params);
    EXPECT_EQ(evaluate(m, split.target), res.target_accuracy) << name;
    EXPECT_EQ(evaluate_mean(m, split.val), res.val_accuracy) << name;
    EXPECT_EQ(ck.meta.config_digest, cfg.digest());
  }
}

TEST(Train, SwadCheckpointIsEvaluated) {
  auto cfg = tiny_config(Algorithm::vae_dg_swad);
  const auto split = make_split(build_domains(cfg), 0, cfg.val_fraction, 0);
  const auto res = train(cfg, split);
  ASSERT_TRUE(res.record.results.contains("swad"));
  VaeModel<float> m(cfg.model_config(), 0);
  m.set_params(res.checkpoints.at("swad"));
  EXPECT_EQ(evaluate(m, split.target), res.record.results.at("swad").target_accuracy);
}

TEST(Train, AlternateOptimizationMasks) {
  auto cfg = tiny_config();
  cfg.alternate_optimization = true;
  const auto split = make_split(build_domains(cfg), 0, cfg.val_fraction, 0);
  Trainer t(cfg, split);
  EXPECT_EQ(t.mask_for_step(2), (GroupMask{true, false, false}));
  EXPECT_EQ(t.mask_for_step(3), (GroupMask{false, true, true}));
  auto changed = [](const ParameterSet<float>& a, const ParameterSet<float>& b, ParamGroup g) {
    bool any = false;
    for (std::size_t i = 0; i < a.size(); ++i)
      if (a[i].group == g && a[i].value.data != b[i].value.data) any = true;
    return any;
  };
  for (int k = 0; k < 4; ++k) {
    const auto before = t.model().params();
    t.step();
    const auto& after = t.model().params();
    const bool encoder_step = t.current_step() % 2 == 0;
    EXPECT_EQ(changed(before, after, ParamGroup::encoder), encoder_step) << t.current_step();
    EXPECT_EQ(changed(before, after, ParamGroup::decoder), !encoder_step) << t.current_step();
    EXPECT_EQ(changed(before, after, ParamGroup::head), !encoder_step) << t.current_step();
  }
  cfg.alternate_optimization = false;
  Trainer joint(cfg, split);
  EXPECT_EQ(joint.mask_for_step(2), kAllGroups);
}

TEST(Train, TargetAmongSourcesIsRejected) {
  auto cfg = tiny_config();
  auto split = make_split(build_domains(cfg), 0, cfg.val_fraction, 0);
  split.train.push_back(split.target);
  EXPECT_ANY_THROW(Trainer(cfg, split));
}

TEST(Train, TargetExampleInsideSourceDomainTripsRuntimeCheck) {
  auto cfg = tiny_config();
  auto split = make_split(build_domains(cfg), 0, cfg.val_fraction, 0);
  // Relabel every example of one source domain as coming from the target.
  for (auto& e : split.train[0].examples) e.domain_id = 0;
  Trainer t(cfg, split);
  EXPECT_THROW(t.step(), std::logic_error);
}

TEST(Train, NonFiniteLossAbortsWithDiagnosticRecord) {
  TempDir tmp("diverge");
  auto cfg = tiny_config();
  auto split = make_split(build_domains(cfg), 0, cfg.val_fraction, 0);
  for (auto& e : split.train[1].examples) std::fill(e.image.begin(), e.image.end(), std::nanf(""));
  EXPECT_THROW(train(cfg, split, {}, tmp.path / "r.json"), DivergenceError);
  const auto rec = load_record(tmp.path / "r.json");
  EXPECT_EQ(rec.status, "diverged");
  EXPECT_NE(rec.diagnostic.find("step 1"), std::string::npos);
  EXPECT_NE(rec.diagnostic.find("recon="), std::string::npos);
}

TEST(Train, ErmRecordHasNoVaeTerms) {
  auto cfg = tiny_config(Algorithm::erm);
  const auto split = make_split(build_domains(cfg), 3, cfg.val_fraction, 0);
  const auto rec = train(cfg, split).record;
  for (const auto& e : rec.evals) {
    EXPECT_EQ(e.train.recon, 0.0);
    EXPECT_EQ(e.train.kl, 0.0);
    EXPECT_EQ(e.train.total, e.train.alpha * e.train.cls);
  }
}

TEST(Train, ErmFitsSeparableToy) {
  // Two classes that differ in mean brightness.
  std::vector<DomainDataset> domains;
  Rng rng(4);
  for (int d = 0; d < 3; ++d) {
    DomainDataset ds;
    ds.domain_id = d;
    ds.name = "toy" + std::to_string(d);
    ds.image_side = 8;
    ds.channels = 1;
    for (int i = 0; i < 40; ++i) {
      const int y = i % 2;
      std::vector<float> img(64);
      for (auto& v : img) v = static_cast<float>(0.3 * y + 0.35 + 0.05 * rng.uniform());
      ds.examples.push_back({img, y, d, {}});
    }
    ds.recount();
    domains.push_back(ds);
  }
  auto cfg = tiny_config(Algorithm::erm);
  cfg.steps = 400;
  cfg.eval_every = 100;
  const auto split = make_split(domains, 0, cfg.val_fraction, 0);
  const auto res = train(cfg, split);
  VaeModel<float> m(cfg.model_config(), 0);
  m.set_params(res.checkpoints.at(checkpoint_id(400)));
  EXPECT_EQ(evaluate_mean(m, split.train), 1.0);
  EXPECT_EQ(res.record.evals.back().target_accuracy, 1.0);
  EXPECT_LT(res.record.evals.back().train.cls, res.record.evals.front().train.cls);
}

// ---------------------------------------------------------------- records

TEST(Record, JsonRoundTrip) {
  auto cfg = tiny_config(Algorithm::fishr);
  const auto split = make_split(build_domains(cfg), 0, cfg.val_fraction, 0);
  const auto rec = train(cfg, split).record;
  EXPECT_TRUE(rec.has_penalty);
  const auto j = to_json(rec);
  EXPECT_EQ(to_json(record_from_json(j)), j);
  EXPECT_TRUE(j["evals"][0]["loss"].contains("penalty"));
  TempDir tmp("record_io");
  save_record(rec, tmp.path / "a" / "r.json");
  EXPECT_EQ(to_json(load_record(tmp.path / "a" / "r.json")), j);
  EXPECT_FALSE(fs::exists(tmp.path / "a" / "r.json.tmp"));
}

TEST(Record, MalformedFileIsAnError) {
  TempDir tmp("record_bad");
  std::ofstream(tmp.path / "r.json") << "{\"config_digest\": 1";
  EXPECT_THROW(load_record(tmp.path / "r.json"), InvalidInput);
  EXPECT_THROW(load_record(tmp.path / "missing.json"), InvalidInput);
}

TEST(Record, PenaltyFieldsOnlyForFishr) {
  auto cfg = tiny_config();
  cfg.steps = 2;
  const auto split = make_split(build_domains(cfg), 0, cfg.val_fraction, 0);
  const auto j = to_json(train(cfg, split).record);
  EXPECT_FALSE(j["evals"][0]["loss"].contains("penalty"));
}

// ---------------------------------------------------------------- protocol

TEST(Protocol, FourDomainsThreeSeedsWithoutLeakage) {
  auto cfg = tiny_config();
  cfg.steps = 4;
  cfg.eval_every = 2;
  const auto domains = build_domains(cfg);
  const std::vector<std::uint64_t> seeds{0, 1, 2};
  const auto records = run_protocol(cfg, domains, seeds);
  ASSERT_EQ(records.size(), 12u);
  std::set<std::pair<int, std::uint64_t>> cells;
  for (const auto& r : records) {
    cells.insert({r.target_domain, r.seed});
    EXPECT_FALSE(r.train_draws_by_domain.contains(r.target_domain));
    EXPECT_FALSE(r.val_examples_by_domain.contains(r.target_domain));
    EXPECT_EQ(r.train_draws_by_domain.size(), 3u);
    EXPECT_TRUE(r.results.contains("training_domain_validation"));
    EXPECT_GE(r.results.at("oracle").target_accuracy, r.results.at("training_domain_validation").target_accuracy);
  }
  EXPECT_EQ(cells.size(), 12u);
}

TEST(Protocol, TwoDomainsOneSeed) {
  auto cfg = tiny_config();
  cfg.num_domains = 2;
  cfg.steps = 2;
  const std::vector<std::uint64_t> seeds{0};
  EXPECT_EQ(run_protocol(cfg, build_domains(cfg), seeds).size(), 2u);
}

TEST(Protocol, ResumesOnlyMissingCells) {
  TempDir tmp("resume");
  auto cfg = tiny_config();
  cfg.steps = 4;
  const auto domains = build_domains(cfg);
  const std::vector<std::uint64_t> seeds{0, 1};
  ProtocolOptions opt;
  opt.out_dir = tmp.path;
  opt.targets = {0, 1};
  const auto first = run_protocol(cfg, domains, seeds, opt);
  ASSERT_EQ(first.size(), 4u);

  std::map<fs::path, fs::file_time_type> stamps;
  for (const auto& e : fs::directory_iterator(tmp.path / "records")) stamps[e.path()] = e.last_write_time();
  ASSERT_EQ(stamps.size(), 4u);
  auto cell = cfg;
  cell.target_domain = 1;
  cell.seed = 0;
  const auto victim = tmp.path / "records" / (cell_name(cell) + ".json");
  ASSERT_TRUE(fs::exists(victim));
  fs::remove(victim);

  const auto second = run_protocol(cfg, domains, seeds, opt);
  ASSERT_EQ(second.size(), 4u);
  for (const auto& [path, stamp] : stamps) {
    ASSERT_TRUE(fs::exists(path));
    if (path == victim) continue;
    EXPECT_EQ(fs::last_write_time(path), stamp) << path;
  }
  for (std::size_t i = 0; i < first.size(); ++i) EXPECT_EQ(to_json(second[i]), to_json(first[i]));
}

TEST(Protocol, RepeatedRunsAreIdentical) {
  auto cfg = tiny_config(Algorithm::fishr);
  const auto domains = build_domains(cfg);
  const std::vector<std::uint64_t> seeds{3};
  ProtocolOptions opt;
  opt.targets = {2};
  const auto a = run_protocol(cfg, domains, seeds, opt);
  const auto b = run_protocol(cfg, domains, seeds, opt);
  EXPECT_EQ(to_json(a[0]), to_json(b[0]));
}

