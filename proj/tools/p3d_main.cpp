#include <exception>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "p3d/cli.hpp"

namespace {

template <class F>
int guarded(F&& f) {
  try {
    return f();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

void add_common(CLI::App* cmd, p3d::CliOptions& opt) {
  cmd->add_option("--config", opt.config_path, "run configuration file");
  cmd->add_option("--seed", opt.seed, "override the configured seeds")
      ->each([&opt](const std::string&) { opt.seed_set = true; });
  cmd->add_option("--out", opt.out_dir, "output directory (created if missing)");
}

void add_precision(CLI::App* cmd, p3d::CliOptions& opt) {
  cmd->add_option("--precision", opt.precision, "single or double")
      ->check(CLI::IsMember({"single", "double"}));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"part-wise 3D motion-context sign recognition"};
  app.require_subcommand(1);
  p3d::CliOptions opt;

  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic labelled dataset");
  add_common(synth, opt);

  CLI::App* preprocess =
      app.add_subcommand("preprocess", "convert raw channel files into sequence files");
  add_common(preprocess, opt);
  preprocess->add_option("--input", opt.input, "raw .json file or directory")->required();

  CLI::App* train = app.add_subcommand("train", "train a model");
  add_common(train, opt);
  add_precision(train, opt);
  train->add_option("--checkpoint", opt.checkpoint, "resume from this checkpoint");

  CLI::App* eval = app.add_subcommand("eval", "score a checkpoint on a split");
  add_common(eval, opt);
  add_precision(eval, opt);
  eval->add_option("--checkpoint", opt.checkpoint, "checkpoint to load")->required();
  eval->add_option("--split", opt.split, "train, val or test")
      ->check(CLI::IsMember({"train", "val", "test"}));

  CLI::App* costs = app.add_subcommand("costs", "parameter and FLOP accounting");
  add_common(costs, opt);

  CLI::App* ablate = app.add_subcommand("ablate", "train and score every ablation variant");
  add_common(ablate, opt);
  add_precision(ablate, opt);

  CLI::App* gradcheck =
      app.add_subcommand("gradcheck", "finite-difference audit of the backward pass");
  add_common(gradcheck, opt);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  const bool dbl = opt.precision == "double";
  if (synth->parsed()) return guarded([&] { return p3d::run_synth(opt, std::cout); });
  if (preprocess->parsed()) return guarded([&] { return p3d::run_preprocess(opt, std::cout); });
  if (train->parsed())
    return guarded([&] {
      return dbl ? p3d::run_train_cmd<double>(opt, std::cout)
                 : p3d::run_train_cmd<float>(opt, std::cout);
    });
  if (eval->parsed())
    return guarded([&] {
      return dbl ? p3d::run_eval_cmd<double>(opt, std::cout)
                 : p3d::run_eval_cmd<float>(opt, std::cout);
    });
  if (costs->parsed()) return guarded([&] { return p3d::run_costs(opt, std::cout); });
  if (ablate->parsed())
    return guarded([&] {
      return dbl ? p3d::run_ablate<double>(opt, std::cout)
                 : p3d::run_ablate<float>(opt, std::cout);
    });
  if (gradcheck->parsed()) return guarded([&] { return p3d::run_gradcheck(opt, std::cout); });
  std::cerr << "error: no subcommand\n";
  return 1;
}
