#include <iostream>

#include "CLI11.hpp"
#include "cli.hpp"

using namespace torusim;

int main(int argc, char** argv) {
  CLI::App app{"torusim: deterministic simulator of a 3D-torus tile fabric"};
  app.require_subcommand(1);

  cli::RunOptions run_opt;
  auto* run = app.add_subcommand("run", "simulate a configuration and write its artifacts");
  run->add_option("--config", run_opt.config, "run configuration (INI)")->required();
  run->add_option("--fault", run_opt.fault, "fault spec, replacing the one in the config");
  run->add_option("--seed", run_opt.seed, "fault injection seed");
  run->add_option("--until", run_opt.until, "simulate events before this cycle");
  run->add_option("--out", run_opt.out, std::string("output directory (default $") + cli::kOutEnv + " or ./torusim-out)");

  std::vector<std::string> files;
  std::string dims = "2x2x2";
  auto* validate = app.add_subcommand("validate", "parse specs and print their canonical form");
  validate->add_option("files", files, "run configs, app specs, fault specs")->required();
  validate->add_option("--dims", dims, "torus used to check fault specs")->capture_default_str();

  std::string trace;
  std::optional<std::string> csv;
  auto* report = app.add_subcommand("report", "summarize a trace");
  report->add_option("trace", trace, "trace.log from a run")->required();
  report->add_option("--csv", csv, "also write per-link metrics here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : cli::kExitConfig;
  }

  if (*run) return cli::cmd_run(run_opt, std::cout, std::cerr);
  if (*validate) {
    TorusGeometry g;
    try {
      g = TorusGeometry::parse(dims);
    } catch (const std::invalid_argument& e) {
      std::cerr << e.what() << "\n";
      return cli::kExitConfig;
    }
    return cli::cmd_validate(files, g, std::cout, std::cerr);
  }
  return cli::cmd_report(trace, csv, std::cout, std::cerr);
}
