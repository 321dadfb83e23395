// Command-line front end: data generation, training, evaluation, closed-loop
// rollout, self-verification, and parameter counting.
//
// Exit codes: 0 success, 2 validation error, 3 numeric failure, 4 I/O error.

#include <exception>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "precnet/app.hpp"

int main(int argc, char** argv) {
  using namespace precnet;

  CLI::App cli{"Hierarchical predictive-coding video prediction"};
  cli.require_subcommand(1);

  app::GenDataArgs ga;
  CLI::App* gen = cli.add_subcommand("gen-data", "Generate a synthetic bouncing-shapes dataset");
  gen->add_option("--out", ga.out, "output dataset directory")->required();
  gen->add_option("--seed", ga.seed, "generator seed");
  gen->add_option("--sequences", ga.sequences, "number of recordings");
  gen->add_option("--length", ga.length, "frames per recording");
  gen->add_option("--size", ga.size, "square canvas size");
  gen->add_option("--shapes", ga.shapes, "shapes per recording");
  gen->add_option("--speed-min", ga.speed_min, "slowest shape speed, pixels/frame");
  gen->add_option("--speed-max", ga.speed_max, "fastest shape speed, pixels/frame");

  app::TrainRunArgs ta;
  int epochs_override = -1;
  CLI::App* train = cli.add_subcommand("train", "Train from a JSON config file");
  train->add_option("--config", ta.config_path, "training config path")->required();
  train->add_option("--out", ta.out, "output directory")->required();
  train->add_option("--resume", ta.resume, "checkpoint directory to resume from");
  train->add_option("--epochs", epochs_override, "override the config's epoch count");

  app::EvalArgs ea;
  CLI::App* ev = cli.add_subcommand("eval", "Next-frame evaluation of a checkpoint");
  ev->add_option("--checkpoint", ea.checkpoint, "checkpoint directory")->required();
  ev->add_option("--data", ea.data, "dataset directory")->required();
  ev->add_option("--out", ea.out, "output directory")->required();
  ev->add_option("--context", ea.context, "frames fed before scoring");
  ev->add_option("--frame-stride", ea.frame_stride, "keep every n-th frame");

  app::RolloutArgs ra;
  CLI::App* ro = cli.add_subcommand("rollout", "Closed-loop multi-frame generation");
  ro->add_option("--checkpoint", ra.checkpoint, "checkpoint directory")->required();
  ro->add_option("--data", ra.data, "dataset directory")->required();
  ro->add_option("--out", ra.out, "output directory")->required();
  ro->add_option("--horizon", ra.horizon, "frames generated closed-loop");
  ro->add_option("--context", ra.context, "frames fed before generation");
  ro->add_option("--frame-stride", ra.frame_stride, "keep every n-th frame");

  bool thorough = false;
  std::string verify_out;
  CLI::App* ver = cli.add_subcommand("verify", "Run the self-check suite");
  ver->add_flag("--thorough", thorough, "full-density gradient checks");
  ver->add_option("--out", verify_out, "also write the report into this directory");

  std::string pc_preset, pc_config;
  CLI::App* pc = cli.add_subcommand("param-count", "Print the parameter count of a config");
  pc->add_option("--preset", pc_preset, "standard, small, single_lstm, or tiny");
  pc->add_option("--config", pc_config, "JSON network config path");

  try {
    cli.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return cli.exit(e);
  } catch (const CLI::ParseError& e) {
    cli.exit(e);
    return 2;
  }

  try {
    if (*gen) {
      app::gen_data_run(ga);
      std::cout << "wrote " << ga.sequences << " recordings to " << ga.out << "\n";
    } else if (*train) {
      if (train->count("--epochs")) ta.epochs_override = epochs_override;
      const app::TrainOutcome r = app::train_run(ta);
      std::cout << "checkpoint: " << r.checkpoint_dir << "\n";
      if (!r.epoch_rows.empty()) {
        const auto& last = r.epoch_rows.back();
        std::cout << "final epoch " << static_cast<int>(last[0]) << ": train "
                  << format_value(last[1]) << ", val " << format_value(last[2]) << "\n";
      }
    } else if (*ev) {
      const app::NextFrameEval r = app::eval_run(ea);
      std::cout << "windows: " << r.rows.size() << "\n"
                << "model    mse " << format_value(r.model.mse) << "  psnr "
                << format_value(r.model.psnr) << "  ssim " << format_value(r.model.ssim)
                << "\n"
                << "baseline mse " << format_value(r.baseline.mse) << "  psnr "
                << format_value(r.baseline.psnr) << "  ssim "
                << format_value(r.baseline.ssim) << "\n";
    } else if (*ro) {
      const app::RolloutEval r = app::rollout_run(ra);
      for (std::size_t t = 0; t < r.per_t.size(); ++t) {
        std::cout << "T=" << (t + 1) << "  mse " << format_value(r.per_t[t].mse) << "  psnr "
                  << format_value(r.per_t[t].psnr) << "  ssim "
                  << format_value(r.per_t[t].ssim) << "\n";
      }
    } else if (*ver) {
      std::ostringstream report;
      const auto emit = [&] {
        std::cout << report.str();
        if (!verify_out.empty()) {
          app::detail::ensure_dir(verify_out);
          std::ofstream f(verify_out + "/verify_report.txt");
          f << report.str();
        }
      };
      try {
        app::verify_run(report, thorough);
      } catch (...) {
        emit();
        throw;
      }
      emit();
      if (!verify_out.empty())
        app::detail::write_run_manifest(verify_out, "verify", {{"thorough", thorough}});
    } else if (*pc) {
      check(pc_preset.empty() != pc_config.empty(),
            "param-count: give exactly one of --preset or --config");
      app::param_count_run(pc_config.empty() ? pc_preset : pc_config, std::cout);
    }
    return 0;
  } catch (const ValidationError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
