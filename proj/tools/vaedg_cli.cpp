#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "vaedg/checkpoint.hpp"
#include "vaedg/harness.hpp"
#include "vaedg/report.hpp"
#include "vaedg/verify.hpp"

using namespace vaedg;

namespace {

struct Globals {
  std::optional<std::uint64_t> seed;
  std::string config_path;
  std::string out_dir;
  std::vector<std::string> overrides;
  bool verbose = false;
};

std::filesystem::path out_root(const Globals& g) {
  if (!g.out_dir.empty()) return g.out_dir;
  if (const char* env = std::getenv("VAEDG_ARTIFACT_ROOT"); env && *env) return env;
  return "vaedg_out";
}

ExperimentConfig load_config(const Globals& g, const std::string& algorithm = {}) {
  std::map<std::string, std::string> kv;
  if (!g.config_path.empty()) kv = read_kv_file(g.config_path);
  for (const auto& o : g.overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw InvalidInput("--set expects key=value, got '" + o + "'");
    kv[o.substr(0, eq)] = o.substr(eq + 1);
  }
  if (!algorithm.empty()) kv["algorithm"] = algorithm;
  auto cfg = ExperimentConfig::from_kv(kv);
  if (g.seed) cfg.seed = *g.seed;
  cfg.validate();
  return cfg;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw InvalidInput("cannot write " + path.string());
  out << text;
}

std::vector<std::uint64_t> seeds_or_default(const std::vector<std::uint64_t>& given, const Globals& g) {
  if (!given.empty()) return given;
  if (g.seed) return {*g.seed};
  return {0, 1, 2};
}

void print_record(const RunRecord& r) {
  std::cout << r.algorithm << " " << r.variant << " target=" << r.target_name << " seed=" << r.seed;
  for (const auto& [name, res] : r.results) std::cout << " " << name << "=" << res.target_accuracy;
  std::cout << "\n";
}

std::vector<RunRecord> load_records(const std::filesystem::path& dir) {
  require(std::filesystem::is_directory(dir), "no records directory " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<RunRecord> out;
  for (const auto& f : files) out.push_back(load_record(f));
  return out;
}

std::string report_text(const std::vector<RunRecord>& records, ReportFormat format) {
  auto table = aggregate(records_to_rows(records), target_names(records));
  return render(table, format);
}

// Results CSV and markdown report next to the records.
void write_summary(const std::filesystem::path& root) {
  const auto records = load_records(root / "records");
  write_text(root / "results.csv", write_results_csv(records_to_rows(records)));
  write_text(root / "report.md", report_text(records, ReportFormat::markdown));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"vaedg: VAE domain generalization experiments"};
  app.require_subcommand(1);
  Globals g;
  app.add_option_function<std::uint64_t>("--seed", [&](const std::uint64_t& s) { g.seed = s; }, "Run seed");
  app.add_option("--config", g.config_path, "key = value config file")->check(CLI::ExistingFile);
  app.add_option("--out-dir", g.out_dir, "Artifact directory (default $VAEDG_ARTIFACT_ROOT or ./vaedg_out)");
  app.add_option("--set", g.overrides, "Config override key=value (repeatable)");
  app.add_flag("-v,--verbose", g.verbose, "Progress on stderr");

  auto* gen = app.add_subcommand("generate-data", "Export the synthetic domains as PNG files with manifests");

  auto* run = app.add_subcommand("run", "Train and evaluate one (target, seed) cell");
  std::optional<int> run_target;
  std::string run_algorithm;
  bool run_no_ckpt = false;
  run->add_option_function<int>("--target", [&](const int& t) { run_target = t; }, "Target domain id");
  run->add_option("--algorithm", run_algorithm, "vae_dg, erm, fishr, swad, drgen, vae_dg_swad");
  run->add_flag("--no-checkpoints", run_no_ckpt, "Do not write parameter files");

  auto* protocol = app.add_subcommand("protocol", "Leave-one-domain-out grid over targets and seeds");
  std::vector<std::string> proto_algorithms;
  std::vector<std::uint64_t> proto_seeds;
  std::vector<int> proto_targets;
  bool proto_no_ckpt = false;
  protocol->add_option("--algorithm", proto_algorithms, "Algorithms to run (repeatable; default from config)");
  protocol->add_option("--seeds", proto_seeds, "Seeds (default 0 1 2, or --seed)")->delimiter(',');
  protocol->add_option("--targets", proto_targets, "Target domain ids (default all)")->delimiter(',');
  protocol->add_flag("--no-checkpoints", proto_no_ckpt, "Do not write parameter files");

  auto* ablate = app.add_subcommand("ablate", "Run an ablation preset through the protocol");
  std::vector<std::string> presets;
  std::vector<std::uint64_t> ablate_seeds;
  std::vector<int> ablate_targets;
  bool ablate_no_ckpt = false;
  ablate->add_option("--preset", presets, "Preset name (repeatable), or 'all'")->required();
  ablate->add_option("--seeds", ablate_seeds, "Seeds (default 0 1 2, or --seed)")->delimiter(',');
  ablate->add_option("--targets", ablate_targets, "Target domain ids (default all)")->delimiter(',');
  ablate->add_flag("--no-checkpoints", ablate_no_ckpt, "Do not write parameter files");

  auto* report = app.add_subcommand("report", "Aggregate run records into a results table");
  std::string report_records, report_csv, report_format = "markdown", report_reference, report_output;
  bool allow_missing = false;
  report->add_option("--records", report_records, "Directory of run records (default <out-dir>/records)");
  report->add_option("--csv", report_csv, "Results CSV instead of records")->excludes("--records");
  report->add_option("--format", report_format, "markdown, csv or json");
  report->add_option("--reference", report_reference, "Diff. reference row algorithm/variant/criterion");
  report->add_flag("--allow-missing-seeds", allow_missing, "Aggregate cells with fewer seeds");
  report->add_option("--output", report_output, "Write to a file instead of stdout");

  auto* verify_cmd = app.add_subcommand("verify", "Run the invariant and oracle checks");
  bool quick = false;
  verify_cmd->add_flag("--quick", quick, "Smaller sample counts");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return e.get_exit_code() ? e.get_exit_code() : 2;
  }

  try {
    const auto root = out_root(g);
    ProtocolOptions popt;
    popt.out_dir = root;
    popt.verbose = g.verbose;

    if (*gen) {
      const auto cfg = load_config(g);
      require(cfg.manifests.empty(), "generate-data exports synthetic domains; unset manifests");
      for (const auto& d : build_domains(cfg)) {
        const auto manifest = export_dataset(d, root / "data" / d.name);
        std::cout << manifest.string() << "\n";
      }
    } else if (*run) {
      auto cfg = load_config(g, run_algorithm);
      if (run_target) cfg.target_domain = *run_target;
      const auto domains = build_domains(cfg);
      const auto split = make_split(domains, cfg.target_domain, cfg.val_fraction, cfg.seed);
      const auto name = cell_name(cfg);
      const auto result = train(cfg, split, run_no_ckpt ? std::filesystem::path{} : root / "checkpoints" / name,
                                root / "records" / (name + ".json"));
      print_record(result.record);
    } else if (*protocol || *ablate) {
      std::vector<ExperimentConfig> configs;
      std::vector<std::uint64_t> seeds;
      if (*protocol) {
        seeds = seeds_or_default(proto_seeds, g);
        popt.targets = proto_targets;
        popt.save_checkpoints = !proto_no_ckpt;
        if (proto_algorithms.empty()) proto_algorithms.push_back("");
        for (const auto& a : proto_algorithms) configs.push_back(load_config(g, a));
      } else {
        seeds = seeds_or_default(ablate_seeds, g);
        popt.targets = ablate_targets;
        popt.save_checkpoints = !ablate_no_ckpt;
        if (presets.size() == 1 && presets[0] == "all") presets = ablation_presets();
        const auto base = load_config(g);
        for (const auto& p : presets) configs.push_back(apply_preset(base, p));
      }
      for (const auto& cfg : configs) {
        const auto domains = build_domains(cfg);
        for (const auto& r : run_protocol(cfg, domains, seeds, popt)) print_record(r);
      }
      write_summary(root);
      std::cout << "wrote " << (root / "results.csv").string() << " and " << (root / "report.md").string() << "\n";
    } else if (*report) {
      std::vector<ResultRow> rows;
      std::map<int, std::string> names;
      if (!report_csv.empty()) {
        rows = read_results_csv(report_csv);
      } else {
        const auto records = load_records(report_records.empty() ? root / "records" : std::filesystem::path(report_records));
        rows = records_to_rows(records);
        names = target_names(records);
      }
      auto table = aggregate(rows, names,
                             allow_missing ? MissingCellPolicy::allow_missing_seeds : MissingCellPolicy::strict);
      if (!report_reference.empty()) {
        const auto a = report_reference.find('/');
        const auto b = report_reference.find('/', a == std::string::npos ? a : a + 1);
        require(a != std::string::npos && b != std::string::npos,
                "--reference expects algorithm/variant/criterion");
        table = diff_column(std::move(table), {report_reference.substr(0, a), report_reference.substr(a + 1, b - a - 1),
                                               report_reference.substr(b + 1)});
      }
      const auto text = render(table, parse_report_format(report_format));
      if (report_output.empty())
        std::cout << text;
      else
        write_text(report_output, text);
    } else if (*verify_cmd) {
      bool all = true;
      for (const auto& c : verify::run_suite(quick)) {
        std::cout << (c.pass ? "PASS " : "FAIL ") << c.name << " (" << c.seconds << " s): " << c.detail << "\n";
        all = all && c.pass;
      }
      return all ? 0 : 1;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
