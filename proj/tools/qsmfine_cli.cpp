// Command-line front end; talks to the library only through the C API.
#include <cstdio>
#include <map>
#include <string>

#include "CLI11.hpp"
#include "qsmfine/qsmfine.h"

int main(int argc, char** argv) {
  CLI::App app{"Susceptibility maps from high-pass filtered phase, with test-time fine-tuning"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(qf_version()));

  std::string config, out_dir;
  std::uint64_t seed = 0;
  int jobs = 1;

  using Command = qf_status (*)(const qf_run_options*);
  const std::map<std::string, std::pair<Command, std::string>> commands{
      {"phantom", {qf_cmd_phantom, "Generate the synthetic phantom dataset"}},
      {"train", {qf_cmd_train, "Pretrain the progressive network and the single Unet"}},
      {"eval", {qf_cmd_eval, "Evaluate all methods on the test cases"}},
      {"sweep-fc", {qf_cmd_sweep_fc, "Evaluate at every filter cutoff in the sweep list"}},
      {"sweep-voxel", {qf_cmd_sweep_voxel, "Evaluate at every resampled voxel size"}},
      {"metrics", {qf_cmd_metrics, "Recompute evaluation metrics from stored predictions"}},
      {"report", {qf_cmd_report, "Merge evaluation and sweep summaries into one CSV"}},
  };

  std::map<CLI::App*, Command> handlers;
  for (const auto& [name, entry] : commands) {
    CLI::App* sub = app.add_subcommand(name, entry.second);
    sub->add_option("--config", config, "Experiment config file")->required()->check(CLI::ExistingFile);
    sub->add_option("--out", out_dir, "Output directory (overrides the config)");
    sub->add_option("--seed", seed, "Master seed (overrides the config seeds)");
    sub->add_option("--jobs", jobs, "Worker threads")->check(CLI::PositiveNumber);
    handlers[sub] = entry.first;
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  CLI::App* sub = app.get_subcommands().front();
  qf_run_options opt{};
  opt.config_path = config.c_str();
  opt.out_dir = out_dir.empty() ? nullptr : out_dir.c_str();
  opt.has_seed = sub->count("--seed") > 0;
  opt.seed = seed;
  opt.jobs = jobs;

  const qf_status st = handlers.at(sub)(&opt);
  if (st == QF_OK) return 0;
  std::fprintf(stderr, "qsmfine %s: %s\n", sub->get_name().c_str(), qf_last_error());
  return st == QF_ERR_VALIDATION ? 1 : 2;
}
