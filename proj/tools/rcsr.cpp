#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "rcsr/cli.hpp"

namespace {

using namespace rcsr::cli;

void add_config_options(CLI::App* cmd, ConfigOptions& o) {
  cmd->add_option("-c,--config", o.config_path, "JSON config file (defaults are used when omitted)");
  cmd->add_option("--seed", o.seed, "Master seed");
  cmd->add_option("--mode", o.mode, "Aggregation mode: fedavg, fedprox, rcsr or rcsr_p");
  cmd->add_option("--workers", o.workers, "Parallel client workers");
  cmd->add_option("--rounds", o.rounds, "Communication rounds");
  cmd->add_option("--warmup-rounds", o.warmup_rounds, "FedAvg rounds before the router activates");
  cmd->add_option("--set", o.assignments, "Override any config key, e.g. training.lambda_anchor=0")
      ->type_name("KEY=VALUE");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated cross-modal retrieval simulator"};
  app.require_subcommand(1);

  RunOptions run;
  CLI::App* run_cmd = app.add_subcommand("run", "Train one configuration and write metrics");
  add_config_options(run_cmd, run.config);
  run_cmd->add_option("-o,--output", run.output_dir,
                      std::string("Output directory (default: $") + kOutputDirEnv + " or ./rcsr_out)");
  run_cmd->add_option("--checkpoint-every", run.checkpoint_every, "Write checkpoint.bin every N rounds");
  run_cmd->add_option("--resume", run.resume, "Continue from a checkpoint written with the same config");
  run_cmd->add_flag("-q,--quiet", run.quiet, "Only print errors");

  CompareOptions compare;
  CLI::App* compare_cmd = app.add_subcommand("compare", "Run every (mode, seed) pair and tabulate final R@1");
  add_config_options(compare_cmd, compare.config);
  compare_cmd->add_option("--modes", compare.modes, "Modes to compare")->required()->delimiter(',');
  compare_cmd->add_option("--seeds", compare.seeds, "Seeds to run")->required()->delimiter(',');
  compare_cmd->add_option("-o,--output", compare.output_dir, "Output directory");

  GradcheckOptions gradcheck;
  std::string fault;
  CLI::App* gradcheck_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every loss graph");
  gradcheck_cmd->add_option("--seeds", gradcheck.seeds, "Random seeds per graph")->check(CLI::PositiveNumber);
  gradcheck_cmd->add_option("--inject-fault", fault)->check(CLI::IsMember({"gelu"}))->group("");

  ConfigOptions partition;
  CLI::App* partition_cmd = app.add_subcommand("partition-stats", "Per-client class histograms");
  add_config_options(partition_cmd, partition);

  ConfigOptions describe;
  bool full_scale = false;
  CLI::App* describe_cmd = app.add_subcommand("describe", "Trainable parameter breakdown");
  add_config_options(describe_cmd, describe);
  describe_cmd->add_flag("--full-scale", full_scale, "Use 768/512 widths, 12 blocks, bottleneck 64, embed 512");

  ConfigOptions printed;
  CLI::App* print_cmd = app.add_subcommand("print-config", "Print the fully resolved configuration as JSON");
  add_config_options(print_cmd, printed);

  ConfigOptions export_cfg;
  std::string export_path;
  CLI::App* export_cmd = app.add_subcommand("export-dataset", "Write the train and test sets as binary files");
  add_config_options(export_cmd, export_cfg);
  export_cmd->add_option("path", export_path, "Output path prefix")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  if (*run_cmd) return cmd_run(run, std::cout, std::cerr);
  if (*compare_cmd) return cmd_compare(compare, std::cout, std::cerr);
  if (*gradcheck_cmd) {
    gradcheck.inject_gelu_fault = fault == "gelu";
    return cmd_gradcheck(gradcheck, std::cout);
  }
  if (*partition_cmd) return cmd_partition_stats(partition, std::cout, std::cerr);
  if (*describe_cmd) return cmd_describe(describe, full_scale, std::cout, std::cerr);
  if (*print_cmd) return cmd_print_config(printed, std::cout, std::cerr);
  if (*export_cmd) return cmd_export_dataset(export_cfg, export_path, std::cout, std::cerr);
  return kExitConfig;
}
