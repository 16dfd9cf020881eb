#include <gtest/gtest.h>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <fstream>
#include <set>

#include "vaedg/config.hpp"
#include "vaedg/harness.hpp"

using namespace vaedg;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string output;
};

Result run_cli(const std::string& args) {
  const std::string cmd = std::string("\"") + VAEDG_CLI + "\" " + args + " 2>&1";
  Result r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  std::array<char, 4096> buf{};
  while (fgets(buf.data(), buf.size(), pipe)) r.output += buf.data();
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("vaedg_cli_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

// Small enough that a cell trains in a few milliseconds.
const char* kTinyConfig = R"(# tiny synthetic setup
image_side = 8
channels = 1
conv_channels = 4,8
latent_dim = 4
head_hidden = 6
per_domain = 4
steps = 6
eval_every = 3
domain_size = 20
)";

fs::path write_tiny_config(const fs::path& dir) {
  const auto p = dir / "tiny.cfg";
  std::ofstream(p) << kTinyConfig;
  return p;
}

nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  return nlohmann::json::parse(in);
}

}  // namespace

TEST(Cli, UnknownFlagFailsWithUsage) {
  const auto r = run_cli("--no-such-flag verify --quick");
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.output.find("no-such-flag"), std::string::npos) << r.output;
  EXPECT_NE(r.output.find("Usage"), std::string::npos) << r.output;
}

TEST(Cli, MissingSubcommandFails) {
  const auto r = run_cli("");
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.output.find("Usage"), std::string::npos);
}

TEST(Cli, RuntimeErrorsExitNonzeroWithMessage) {
  TempDir tmp("errors");
  auto r = run_cli("report --csv " + (tmp.path / "missing.csv").string());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("error:"), std::string::npos) << r.output;
  r = run_cli("--out-dir " + tmp.path.string() + " --set no_such_key=1 run");
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.output.find("no_such_key"), std::string::npos) << r.output;
  r = run_cli("--out-dir " + tmp.path.string() + " ablate --preset latent-dim-7");
  EXPECT_NE(r.code, 0);
}

TEST(Cli, VerifyQuickPasses) {
  const auto r = run_cli("verify --quick");
  EXPECT_EQ(r.code, 0) << r.output;
  EXPECT_EQ(r.output.find("FAIL"), std::string::npos) << r.output;
}

TEST(Cli, AblateNoKlKeepsReconAndClassifier) {
  TempDir tmp("nokl");
  const auto cfg = write_tiny_config(tmp.path);
  const auto r = run_cli("--config " + cfg.string() + " --out-dir " + tmp.path.string() +
                         " ablate --preset no-kl --seeds 0 --targets 1 --no-checkpoints");
  ASSERT_EQ(r.code, 0) << r.output;
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(tmp.path / "records")) files.push_back(e.path());
  ASSERT_EQ(files.size(), 1u);
  const auto rec = load_record(files[0]);
  EXPECT_EQ(rec.variant, "no-kl");
  EXPECT_EQ(rec.config.at("beta"), "0");
  for (const auto& e : rec.evals) {
    EXPECT_EQ(e.train.beta, 0.0);
    EXPECT_GT(e.train.recon_weight, 0.0);
    EXPECT_GT(e.train.alpha, 0.0);
    EXPECT_GT(e.train.recon, 0.0);
    EXPECT_GT(e.train.cls, 0.0);
    EXPECT_NEAR(e.train.total, e.train.recon_weight * e.train.recon + e.train.alpha * e.train.cls,
                1e-9 * std::abs(e.train.total));
  }
  EXPECT_TRUE(fs::exists(tmp.path / "results.csv"));
  EXPECT_TRUE(fs::exists(tmp.path / "report.md"));
}

TEST(Cli, EveryPresetIsInvocable) {
  TempDir tmp("presets");
  const auto cfg = write_tiny_config(tmp.path);
  const auto base = ExperimentConfig::from_kv(read_kv_file(cfg));
  for (const auto& p : ablation_presets()) {
    const auto dir = tmp.path / p;
    const auto r = run_cli("--config " + cfg.string() + " --out-dir " + dir.string() + " --set steps=1 ablate --preset " +
                           p + " --seeds 0 --targets 0 --no-checkpoints");
    ASSERT_EQ(r.code, 0) << p << "\n" << r.output;
    auto expected = apply_preset(base, p);
    expected.steps = 1;
    const auto rec = load_record(*fs::directory_iterator(dir / "records"));
    EXPECT_EQ(rec.variant, p);
    EXPECT_EQ(rec.config_digest, expected.digest()) << p;
  }
}

TEST(Cli, ReportOverTwelveRecordGrid) {
  TempDir tmp("report");
  auto cfg = ExperimentConfig::from_kv(parse_kv_text(kTinyConfig));
  cfg.steps = 2;
  const std::vector<std::uint64_t> seeds{0, 1, 2};
  ProtocolOptions opt;
  opt.out_dir = tmp.path;
  opt.save_checkpoints = false;
  ASSERT_EQ(run_protocol(cfg, build_domains(cfg), seeds, opt).size(), 12u);

  const auto r = run_cli("--out-dir " + tmp.path.string() + " report --format markdown");
  ASSERT_EQ(r.code, 0) << r.output;
  const auto header = r.output.substr(0, r.output.find('\n'));
  EXPECT_EQ(header, "| Algorithm | Variant | Selection | synth0 | synth1 | synth2 | synth3 | Avg. |");
  EXPECT_NE(r.output.find("| vae_dg | base | training_domain_validation |"), std::string::npos);
  EXPECT_NE(r.output.find("| vae_dg | base | oracle |"), std::string::npos);

  const auto out = tmp.path / "table.json";
  const auto j = run_cli("--out-dir " + tmp.path.string() + " report --format json --reference vae_dg/base/oracle --output " +
                         out.string());
  ASSERT_EQ(j.code, 0) << j.output;
  const auto table = read_json(out);
  EXPECT_EQ(table.at("targets").size(), 4u);
  EXPECT_EQ(table.at("rows").size(), 2u);

  // A hole in the grid is reported unless seeds may be missing.
  fs::remove(tmp.path / "records" / "vae_dg-base-t2-s1.json");
  auto ragged = run_cli("--out-dir " + tmp.path.string() + " report");
  EXPECT_NE(ragged.code, 0);
  EXPECT_NE(ragged.output.find("target 2 seed 1"), std::string::npos) << ragged.output;
  ragged = run_cli("--out-dir " + tmp.path.string() + " report --allow-missing-seeds");
  EXPECT_EQ(ragged.code, 0) << ragged.output;
}

TEST(Cli, RunIsHermetic) {
  TempDir tmp("hermetic");
  const auto cfg = write_tiny_config(tmp.path);
  for (const char* sub : {"a", "b"}) {
    const auto r = run_cli("--seed 2 --config " + cfg.string() + " --out-dir " + (tmp.path / sub).string() +
                           " run --target 3 --algorithm fishr");
    ASSERT_EQ(r.code, 0) << r.output;
  }
  const auto name = "fishr-base-t3-s2.json";
  EXPECT_EQ(read_json(tmp.path / "a" / "records" / name), read_json(tmp.path / "b" / "records" / name));
  EXPECT_TRUE(fs::exists(tmp.path / "a" / "checkpoints" / "fishr-base-t3-s2"));
}

TEST(Cli, GeneratedDataFeedsManifestRuns) {
  TempDir tmp("manifests");
  const auto cfg = write_tiny_config(tmp.path);
  auto r = run_cli("--config " + cfg.string() + " --out-dir " + tmp.path.string() + " --set num_domains=3 generate-data");
  ASSERT_EQ(r.code, 0) << r.output;
  std::string manifests;
  for (int d = 0; d < 3; ++d)
    manifests += (d ? "," : "") + (tmp.path / "data" / ("synth" + std::to_string(d)) / "manifest.csv").string();
  r = run_cli("--config " + cfg.string() + " --out-dir " + tmp.path.string() + " --set manifests=" + manifests +
              " run --target 2 --no-checkpoints");
  ASSERT_EQ(r.code, 0) << r.output;
  const auto rec = load_record(*fs::directory_iterator(tmp.path / "records"));
  EXPECT_EQ(rec.target_domain, 2);
  EXPECT_EQ(rec.val_examples_by_domain.size(), 2u);
}
