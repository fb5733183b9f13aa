#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cdrop/errors.hpp"
#include "cdrop/experiments.hpp"

namespace {

// Exit codes by error class; 0 is success, 1 an unclassified failure.
constexpr int kConfigExit = 2;
constexpr int kArgumentExit = 3;
constexpr int kDataExit = 4;
constexpr int kFormatExit = 5;
constexpr int kDimensionExit = 6;
constexpr int kStateExit = 7;
constexpr int kTrainingExit = 8;

int fail(const char* kind, const std::exception& e, int code) {
  std::cerr << "error (" << kind << "): " << e.what() << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Concrete-dropout experiment runner"};
  app.get_formatter()->column_width(34);

  cdrop::ExperimentSpec spec;
  std::string from_manifest;
  std::vector<std::uint64_t> seeds;
  std::vector<long long> n_grid, widths;
  long long depth = 0, batch = 0, heldout = 0, calib_points = 0;

  auto* task_opt =
      app.add_option("--task", spec.task,
                     "one of gradcheck, synth, regress, mnist, calibrate");
  app.add_option("--from-manifest", from_manifest,
                 "re-run a recorded experiment exactly; only --out-dir applies "
                 "on top")
      ->excludes(task_opt);
  app.add_option("--seed", seeds, "seed list (repeat or comma-separate)")
      ->delimiter(',');
  app.add_option("--n-grid", n_grid, "dataset-size grid")->delimiter(',');
  app.add_option("--widths", widths, "hidden-width grid")->delimiter(',');
  app.add_option("--depth", depth, "number of hidden layers");
  app.add_option("--epochs", spec.epochs, "training epochs");
  app.add_option("--batch", batch, "minibatch size");
  app.add_option("--lr", spec.lr, "learning rate");
  app.add_option("--mc-samples", spec.mc_samples,
                 "stochastic forward passes per prediction");
  app.add_option("--lengthscale", spec.lengthscale, "prior length-scale");
  app.add_option("--temperature", spec.temperature, "relaxation temperature");
  app.add_option("--precision-mode", spec.precision_mode,
                 "mapem, heteroscedastic or fixed");
  app.add_option("--out-dir", spec.out_dir, "output directory");
  app.add_option("--data", spec.data_path,
                 "csv file (regress) or idx directory (mnist); falls back to "
                 "the CDROP_DATA_DIR environment variable");
  app.add_option("--target", spec.target_column, "csv target column name");
  app.add_option("--splits", spec.csv_splits, "random 90/10 splits (regress)");
  app.add_option("--heldout", heldout, "held-out evaluation points");
  app.add_option("--calib-points", calib_points,
                 "self-consistency sample count (calibrate)");
  app.add_flag("--svg", spec.svg, "emit svg line plots of the trend figures");

  CLI11_PARSE(app, argc, argv);

  spec.seeds = seeds;
  for (long long n : n_grid) spec.n_grid.push_back(static_cast<Eigen::Index>(n));
  for (long long w : widths) spec.widths.push_back(static_cast<Eigen::Index>(w));
  spec.depth = static_cast<Eigen::Index>(depth);
  spec.batch = static_cast<Eigen::Index>(batch);
  spec.heldout = static_cast<Eigen::Index>(heldout);
  spec.calib_points = static_cast<Eigen::Index>(calib_points);

  try {
    if (!from_manifest.empty()) {
      const std::string out_dir = spec.out_dir;
      spec = cdrop::load_manifest(from_manifest);
      spec.out_dir = out_dir;
    } else if (spec.task.empty()) {
      throw cdrop::ConfigError("either --task or --from-manifest is required");
    }
    if (spec.data_path.empty())
      if (const char* env = std::getenv("CDROP_DATA_DIR")) spec.data_path = env;

    cdrop::run_experiment(spec);
    return 0;
  } catch (const cdrop::ConfigError& e) {
    return fail("config", e, kConfigExit);
  } catch (const cdrop::ArgumentError& e) {
    return fail("argument", e, kArgumentExit);
  } catch (const cdrop::DataError& e) {
    return fail("data", e, kDataExit);
  } catch (const cdrop::FormatError& e) {
    return fail("format", e, kFormatExit);
  } catch (const cdrop::DimensionError& e) {
    return fail("dimension", e, kDimensionExit);
  } catch (const cdrop::StateError& e) {
    return fail("state", e, kStateExit);
  } catch (const cdrop::TrainingError& e) {
    return fail("training", e, kTrainingExit);
  } catch (const std::exception& e) {
    return fail("unexpected", e, 1);
  }
}
