// sslpoison: command-line front end of the experiment harness.
//
//   sslpoison run    --config exp.toml [--seed N] [--force] [--sweep key=v1,v2]...
//   sslpoison craft  --config exp.toml          (stops after crafting; likewise
//                                                poison, train, evaluate)
//   sslpoison report --config exp.toml --out report/   or   sslpoison report runs/<hash> ...
//
// Exit status: 0 on success, 1 on usage or config errors, 2 when a stage fails.
#include <torch/torch.h>

#include <CLI11.hpp>
#include <iostream>

#include "sslpoison/harness.hpp"

namespace fs = std::filesystem;
using namespace sslpoison;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  bool force = false;
  bool quiet = false;
  std::vector<std::string> sweeps;
};

std::vector<ExperimentConfig> expand(const Common& c) {
  if (c.config.empty()) throw HarnessError("--config is required");
  std::ifstream in(c.config);
  if (!in) throw HarnessError("cannot read config " + c.config);
  std::stringstream ss;
  ss << in.rdbuf();
  auto base = toml_to_json(ss.str(), c.config);
  if (c.seed) base["seed"] = *c.seed;
  std::vector<ExperimentConfig> out;
  for (const auto& j : expand_sweeps(base, c.sweeps)) {
    auto cfg = config_from_json(j);
    cfg.validate();
    out.push_back(std::move(cfg));
  }
  return out;
}

void print_summary(const ResultRecord& r, const ExperimentConfig& cfg) {
  std::cout << r.config_hash << "  " << r.status;
  if (r.cached) std::cout << " (cached)";
  if (r.failed_stage) std::cout << "  stage=" << to_string(*r.failed_stage) << "  error: " << r.error;
  if (r.status != "failed" && !r.metrics.ca_curve.empty()) {
    std::cout << "  CA=" << r.metrics.ca;
    if (r.metrics.asr) std::cout << "  ASR=" << *r.metrics.asr;
  }
  if (r.metrics.psnr) std::cout << "  PSNR=" << *r.metrics.psnr << "  L-inf=" << *r.metrics.linf;
  std::cout << "  " << (fs::path(cfg.output_dir) / r.config_hash).string() << "\n";
  for (const auto& w : r.warnings) std::cout << "  warning: " << w << "\n";
}

int run_until(const Common& c, Stage until) {
  int status = 0;
  for (const auto& cfg : expand(c)) {
    RunOptions opt;
    opt.force = c.force;
    opt.until = until;
    if (!c.quiet) opt.log = [](const std::string& m) { std::cerr << "[sslpoison] " << m << "\n"; };
    const auto rec = run_experiment(cfg, opt);
    print_summary(rec, cfg);
    if (rec.status == "failed") status = 2;
  }
  return status;
}

std::vector<ResultRecord> collect(const Common& c, const std::vector<std::string>& paths) {
  std::vector<ResultRecord> records;
  if (!c.config.empty()) {
    for (const auto& cfg : expand(c)) {
      const auto dir = fs::path(cfg.output_dir) / config_hash(cfg);
      if (!fs::exists(dir / "result.json")) throw HarnessError("no result for this config yet: " + dir.string());
      records.push_back(load_record(dir));
    }
  }
  for (const auto& p : paths) {
    if (fs::exists(fs::path(p) / "result.json")) {
      records.push_back(load_record(p));
      continue;
    }
    if (!fs::is_directory(p)) throw HarnessError("not a run directory: " + p);
    std::vector<fs::path> dirs;
    for (const auto& entry : fs::directory_iterator(p)) {
      if (entry.is_directory() && fs::exists(entry.path() / "result.json")) dirs.push_back(entry.path());
    }
    std::sort(dirs.begin(), dirs.end());
    for (const auto& d : dirs) records.push_back(load_record(d));
  }
  return records;
}

}  // namespace

int main(int argc, char** argv) {
  torch::set_num_threads(1);
  CLI::App app{"Backdoor poisoning of semi-supervised learning: craft, poison, train, evaluate, defend, report"};
  app.require_subcommand(1);
  Common common;
  std::string out_dir = "report";
  std::vector<std::string> paths;

  const std::vector<std::pair<std::string, Stage>> stages{{"craft", Stage::craft},       {"poison", Stage::poison},
                                                          {"train", Stage::train},       {"evaluate", Stage::evaluate},
                                                          {"defend", Stage::defend},     {"run", Stage::defend}};
  std::map<CLI::App*, Stage> stage_of;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "experiment TOML file");
    sub->add_option("--seed", common.seed, "global seed (overrides the config)");
    sub->add_flag("--force", common.force, "recompute even when a cached result exists");
    sub->add_option("--sweep", common.sweeps, "key=v1,v2,... expanded as a cartesian product")->take_all();
    sub->add_flag("--quiet", common.quiet, "no progress log on stderr");
  };
  for (const auto& [name, stage] : stages) {
    auto* sub = app.add_subcommand(name, name == "run" ? "all stages" : "run up to and including the " + name + " stage");
    add_common(sub);
    stage_of[sub] = stage;
  }
  auto* report = app.add_subcommand("report", "tables and curve plots from finished runs");
  add_common(report);
  report->add_option("--out", out_dir, "output directory");
  report->add_option("runs", paths, "run directories or result roots");

  CLI11_PARSE(app, argc, argv);
  try {
    for (auto* sub : app.get_subcommands()) {
      if (sub == report) {
        const auto records = collect(common, paths);
        write_report(records, out_dir);
        std::cout << "report: " << records.size() << " runs -> " << out_dir << "\n";
        return 0;
      }
      return run_until(common, stage_of.at(sub));
    }
  } catch (const HarnessError& e) {
    std::cerr << "sslpoison: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
