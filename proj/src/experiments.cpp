#include "cdrop/experiments.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "cdrop/data.hpp"
#include "cdrop/errors.hpp"
#include "cdrop/train.hpp"
#include "cdrop/uncertainty.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace cdrop {
namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// Decorrelated child seed for a grid cell; `salt` identifies the role.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t salt) {
  return RngStream(base, salt).next_u64();
}

std::string g17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string g6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open output file '" + path + "'");
  return out;
}

PrecisionMode mode_of(const std::string& name) {
  if (name == "mapem") return PrecisionMode::homoscedastic_mapem;
  if (name == "heteroscedastic") return PrecisionMode::heteroscedastic_head;
  if (name == "fixed") return PrecisionMode::fixed;
  throw ConfigError("unknown precision mode '" + name +
                    "' (expected mapem, heteroscedastic or fixed)");
}

Mlp build_model(Eigen::Index input_dim, Eigen::Index width, Eigen::Index depth,
                Eigen::Index output_dim, bool het, double temperature,
                std::uint64_t seed, bool dropout = true) {
  MlpConfig mc;
  mc.input_dim = input_dim;
  mc.hidden.assign(static_cast<std::size_t>(depth), width);
  mc.output_dim = output_dim;
  mc.heteroscedastic = het;
  mc.temperature = temperature;
  mc.dropout = dropout;
  RngStream rng(seed);
  return Mlp::build(mc, rng);
}

std::vector<double> levels_5_to_95() {
  std::vector<double> levels;
  for (int i = 1; i <= 19; ++i) levels.push_back(0.05 * i);
  return levels;
}

void write_p_header(std::ostream& os, Eigen::Index n_layers) {
  for (Eigen::Index k = 0; k < n_layers; ++k) os << ",p_" << k;
}

void write_p_row(std::ostream& os, const std::vector<double>& p,
                 std::size_t n_layers) {
  for (std::size_t k = 0; k < n_layers; ++k)
    os << "," << g17(k < p.size() ? p[k] : kNaN);
}

// ---------------------------------------------------------------------------
// SVG line plots (optional --svg output). Hand-rolled and byte-deterministic:
// fixed canvas, fixed palette, printf-formatted coordinates, no timestamps.

struct Series {
  std::string name;
  std::vector<std::array<double, 2>> pts;
};

std::string coord(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

void write_svg_plot(const std::string& path, const std::string& title,
                    const std::string& xlabel, const std::string& ylabel,
                    const std::vector<Series>& series, bool log_x) {
  static const char* kPalette[] = {"#1f77b4", "#ff7f0e", "#2ca02c",
                                   "#d62728", "#9467bd", "#8c564b"};
  const double W = 640, H = 480, ml = 75, mr = 20, mt = 45, mb = 55;

  auto tx = [&](double x) { return log_x ? std::log10(x) : x; };
  double xmin = 0, xmax = 0, ymin = 0, ymax = 0;
  bool first = true;
  for (const auto& s : series)
    for (const auto& p : s.pts) {
      if (!std::isfinite(p[0]) || !std::isfinite(p[1])) continue;
      const double x = tx(p[0]);
      if (first || x < xmin) xmin = x;
      if (first || x > xmax) xmax = x;
      if (first || p[1] < ymin) ymin = p[1];
      if (first || p[1] > ymax) ymax = p[1];
      first = false;
    }
  if (first) return;  // nothing plottable
  if (xmax - xmin < 1e-12) { xmin -= 0.5; xmax += 0.5; }
  if (ymax - ymin < 1e-12) { ymin -= 0.5; ymax += 0.5; }
  const double ypad = 0.05 * (ymax - ymin);
  ymin -= ypad;
  ymax += ypad;

  auto px = [&](double x) { return ml + (tx(x) - xmin) / (xmax - xmin) * (W - ml - mr); };
  auto py = [&](double y) { return H - mb - (y - ymin) / (ymax - ymin) * (H - mt - mb); };

  std::ofstream out = open_out(path);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W
      << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  out << "<rect width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n";
  out << "<text x=\"" << coord(W / 2) << "\" y=\"22\" text-anchor=\"middle\" "
         "font-size=\"15\">" << title << "</text>\n";

  // Axes.
  out << "<line x1=\"" << coord(ml) << "\" y1=\"" << coord(H - mb) << "\" x2=\""
      << coord(W - mr) << "\" y2=\"" << coord(H - mb)
      << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << coord(ml) << "\" y1=\"" << coord(mt) << "\" x2=\""
      << coord(ml) << "\" y2=\"" << coord(H - mb) << "\" stroke=\"black\"/>\n";

  for (int i = 0; i <= 4; ++i) {
    const double xt = xmin + (xmax - xmin) * i / 4.0;
    const double xv = log_x ? std::pow(10.0, xt) : xt;
    const double X = ml + (xt - xmin) / (xmax - xmin) * (W - ml - mr);
    out << "<line x1=\"" << coord(X) << "\" y1=\"" << coord(H - mb) << "\" x2=\""
        << coord(X) << "\" y2=\"" << coord(H - mb + 5) << "\" stroke=\"black\"/>\n";
    out << "<text x=\"" << coord(X) << "\" y=\"" << coord(H - mb + 18)
        << "\" text-anchor=\"middle\">" << g6(xv) << "</text>\n";
    const double yv = ymin + (ymax - ymin) * i / 4.0;
    const double Y = py(yv);
    out << "<line x1=\"" << coord(ml - 5) << "\" y1=\"" << coord(Y) << "\" x2=\""
        << coord(ml) << "\" y2=\"" << coord(Y) << "\" stroke=\"black\"/>\n";
    out << "<text x=\"" << coord(ml - 8) << "\" y=\"" << coord(Y + 4)
        << "\" text-anchor=\"end\">" << g6(yv) << "</text>\n";
  }
  out << "<text x=\"" << coord((ml + W - mr) / 2) << "\" y=\"" << coord(H - 12)
      << "\" text-anchor=\"middle\">" << xlabel << "</text>\n";
  out << "<text x=\"18\" y=\"" << coord((mt + H - mb) / 2)
      << "\" text-anchor=\"middle\" transform=\"rotate(-90 18 "
      << coord((mt + H - mb) / 2) << ")\">" << ylabel << "</text>\n";

  for (std::size_t si = 0; si < series.size(); ++si) {
    const char* colour = kPalette[si % 6];
    std::ostringstream poly;
    for (const auto& p : series[si].pts) {
      if (!std::isfinite(p[0]) || !std::isfinite(p[1])) continue;
      poly << coord(px(p[0])) << "," << coord(py(p[1])) << " ";
      out << "<circle cx=\"" << coord(px(p[0])) << "\" cy=\"" << coord(py(p[1]))
          << "\" r=\"3\" fill=\"" << colour << "\"/>\n";
    }
    out << "<polyline points=\"" << poly.str() << "\" fill=\"none\" stroke=\""
        << colour << "\" stroke-width=\"1.5\"/>\n";
    out << "<text x=\"" << coord(W - mr - 8) << "\" y=\""
        << coord(mt + 16 + 16 * double(si)) << "\" text-anchor=\"end\" fill=\""
        << colour << "\">" << series[si].name << "</text>\n";
  }
  out << "</svg>\n";
}

}  // namespace

// ---------------------------------------------------------------------------
// Spec resolution and manifest round-trip.

ExperimentSpec resolve_spec(const ExperimentSpec& in) {
  ExperimentSpec s = in;
  if (s.task != "gradcheck" && s.task != "synth" && s.task != "regress" &&
      s.task != "mnist" && s.task != "calibrate")
    throw ConfigError("unknown task '" + s.task +
                      "' (expected gradcheck, synth, regress, mnist or calibrate)");

  if (s.seeds.empty()) s.seeds = {1, 2, 3};

  auto fill = [](auto& field, auto value) {
    if (field == decltype(value){}) field = value;
  };
  if (s.task == "gradcheck") {
    if (s.widths.empty()) s.widths = {8};
    fill(s.depth, Eigen::Index{2});
    fill(s.epochs, 1);
    fill(s.batch, Eigen::Index{4});
    fill(s.precision_mode, std::string("mapem"));
    if (s.n_grid.empty()) s.n_grid = {50};
  } else if (s.task == "synth") {
    if (s.n_grid.empty()) s.n_grid = {10, 100, 1000, 10000};
    if (s.widths.empty()) s.widths = {64};
    fill(s.depth, Eigen::Index{3});
    fill(s.epochs, 250);
    fill(s.batch, Eigen::Index{128});
    fill(s.precision_mode, std::string("heteroscedastic"));
    fill(s.heldout, Eigen::Index{1000});
  } else if (s.task == "regress") {
    if (s.n_grid.empty()) s.n_grid = {0};  // unused; whole file
    if (s.widths.empty()) s.widths = {50};
    fill(s.depth, Eigen::Index{2});
    fill(s.epochs, 400);
    fill(s.batch, Eigen::Index{32});
    fill(s.precision_mode, std::string("mapem"));
  } else if (s.task == "mnist") {
    if (s.n_grid.empty()) s.n_grid = {10000};
    if (s.widths.empty()) s.widths = {128};
    fill(s.depth, Eigen::Index{3});
    fill(s.epochs, 25);
    fill(s.batch, Eigen::Index{128});
    fill(s.precision_mode, std::string("fixed"));
  } else {  // calibrate
    if (s.n_grid.empty()) s.n_grid = {10000};
    if (s.widths.empty()) s.widths = {64};
    fill(s.depth, Eigen::Index{3});
    fill(s.epochs, 250);
    fill(s.batch, Eigen::Index{128});
    fill(s.precision_mode, std::string("heteroscedastic"));
    fill(s.heldout, Eigen::Index{2000});
    fill(s.calib_points, Eigen::Index{10000});
  }

  mode_of(s.precision_mode);  // validates the name
  for (Eigen::Index n : s.n_grid)
    if (n < 0 || (s.task != "regress" && n < 1))
      throw ConfigError("dataset size grid entry " + std::to_string(n) +
                        " must be positive");
  for (Eigen::Index w : s.widths)
    if (w < 1) throw ConfigError("width grid entry " + std::to_string(w) +
                                 " must be positive");
  if (s.depth < 1) throw ConfigError("depth must be >= 1");
  if (s.epochs < 1) throw ConfigError("epochs must be >= 1");
  if (s.batch < 1) throw ConfigError("batch must be >= 1");
  if (!(s.lr > 0.0)) throw ConfigError("learning rate must be > 0");
  if (s.mc_samples < 2) throw ConfigError("mc samples must be >= 2");
  if (!(s.lengthscale > 0.0)) throw ConfigError("lengthscale must be > 0");
  if (!(s.temperature > 0.0)) throw ConfigError("temperature must be > 0");
  if (s.csv_splits < 1) throw ConfigError("csv splits must be >= 1");
  if (s.task == "synth" || s.task == "calibrate") {
    if (s.heldout < 2) throw ConfigError("heldout size must be >= 2");
  }
  if (s.task == "calibrate" && s.calib_points < 10)
    throw ConfigError("calibration sample count must be >= 10");
  return s;
}

void write_manifest(const ExperimentSpec& s, const std::string& path) {
  ojson j;
  j["task"] = s.task;
  j["seeds"] = s.seeds;
  j["n_grid"] = ojson::array();
  for (Eigen::Index n : s.n_grid) j["n_grid"].push_back(static_cast<std::int64_t>(n));
  j["widths"] = ojson::array();
  for (Eigen::Index w : s.widths) j["widths"].push_back(static_cast<std::int64_t>(w));
  j["depth"] = static_cast<std::int64_t>(s.depth);
  j["epochs"] = s.epochs;
  j["batch"] = static_cast<std::int64_t>(s.batch);
  j["lr"] = s.lr;
  j["mc_samples"] = s.mc_samples;
  j["lengthscale"] = s.lengthscale;
  j["temperature"] = s.temperature;
  j["precision_mode"] = s.precision_mode;
  j["data"] = s.data_path;
  j["target_column"] = s.target_column;
  j["csv_splits"] = s.csv_splits;
  j["heldout"] = static_cast<std::int64_t>(s.heldout);
  j["calib_points"] = static_cast<std::int64_t>(s.calib_points);
  j["svg"] = s.svg;
  std::ofstream out = open_out(path);
  out << j.dump(2) << "\n";
}

ExperimentSpec load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest '" + path + "'");
  ojson j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest '" + path + "' is not valid json: " + e.what());
  }
  ExperimentSpec s;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "task") s.task = value.get<std::string>();
      else if (key == "seeds") s.seeds = value.get<std::vector<std::uint64_t>>();
      else if (key == "n_grid") {
        s.n_grid.clear();
        for (const auto& v : value)
          s.n_grid.push_back(static_cast<Eigen::Index>(v.get<std::int64_t>()));
      } else if (key == "widths") {
        s.widths.clear();
        for (const auto& v : value)
          s.widths.push_back(static_cast<Eigen::Index>(v.get<std::int64_t>()));
      } else if (key == "depth") s.depth = static_cast<Eigen::Index>(value.get<std::int64_t>());
      else if (key == "epochs") s.epochs = value.get<int>();
      else if (key == "batch") s.batch = static_cast<Eigen::Index>(value.get<std::int64_t>());
      else if (key == "lr") s.lr = value.get<double>();
      else if (key == "mc_samples") s.mc_samples = value.get<int>();
      else if (key == "lengthscale") s.lengthscale = value.get<double>();
      else if (key == "temperature") s.temperature = value.get<double>();
      else if (key == "precision_mode") s.precision_mode = value.get<std::string>();
      else if (key == "data") s.data_path = value.get<std::string>();
      else if (key == "target_column") s.target_column = value.get<std::string>();
      else if (key == "csv_splits") s.csv_splits = value.get<int>();
      else if (key == "heldout") s.heldout = static_cast<Eigen::Index>(value.get<std::int64_t>());
      else if (key == "calib_points") s.calib_points = static_cast<Eigen::Index>(value.get<std::int64_t>());
      else if (key == "svg") s.svg = value.get<bool>();
      else throw ConfigError("manifest '" + path + "' has unknown key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest '" + path + "' has a wrongly typed value: " +
                      e.what());
  }
  return s;
}

// ---------------------------------------------------------------------------
// gradcheck

void run_gradcheck(const ExperimentSpec& s) {
  fs::create_directories(s.out_dir);
  const std::uint64_t base = s.seeds.front();
  std::ofstream out = open_out(s.out_dir + "/gradcheck.csv");
  out << "variant,group,max_rel_err\n";

  struct Variant {
    const char* name;
    bool dropout, het;
    PrecisionMode mode;
  };
  const Variant variants[] = {
      {"dense", false, false, PrecisionMode::homoscedastic_mapem},
      {"concrete", true, false, PrecisionMode::homoscedastic_mapem},
      {"heteroscedastic", true, true, PrecisionMode::heteroscedastic_head},
  };

  const double h = 1e-5;
  double worst = 0.0;
  for (const Variant& v : variants) {
    Mlp model = build_model(3, s.widths.front(), s.depth, 2, v.het,
                            s.temperature, derive_seed(base, 11), v.dropout);
    ObjectiveConfig obj;
    obj.N = s.n_grid.front();
    obj.lengthscale = s.lengthscale;
    obj.precision_mode = v.mode;
    configure_regularisation(model, obj);

    RngStream data_rng(derive_seed(base, 22));
    const Matrix X = gaussian(data_rng, s.batch, 3);
    const Matrix Y = gaussian(data_rng, s.batch, 2);

    // Central differences need the loss smooth within +-h; take the first
    // noise stream whose relu preactivations clear the kinks by >> h.
    RngStream noise(derive_seed(base, 33));
    double margin = relu_kink_margin(model, X, noise);
    for (std::uint64_t attempt = 1; margin < 100.0 * h && attempt < 64;
         ++attempt) {
      noise = RngStream(derive_seed(base, 33 + 1000 * attempt));
      margin = relu_kink_margin(model, X, noise);
    }

    const GradCheckReport report =
        grad_check(model, X, Targets::regression(Y), obj, noise, h);
    for (const GradCheckGroup& g : report.groups)
      out << v.name << "," << g.name << "," << g17(g.max_rel_err) << "\n";
    out << v.name << ",relu_kink_margin," << g17(margin) << "\n";
    worst = std::max(worst, report.max_rel_err);
  }
  out << "overall,all," << g17(worst) << "\n";
}

// ---------------------------------------------------------------------------
// synth

namespace {

struct SynthCell {
  Eigen::Index n = 0;
  std::uint64_t seed = 0;
  bool diverged = false;
  double epi = kNaN, ale = kNaN, pred = kNaN, gap = kNaN, loss = kNaN;
  std::vector<double> p;
};

SynthCell run_synth_cell(const ExperimentSpec& s, std::uint64_t seed,
                         std::size_t ni, const Dataset& heldout) {
  SynthCell cell;
  cell.n = s.n_grid[ni];
  cell.seed = seed;

  const PrecisionMode mode = mode_of(s.precision_mode);
  const bool het = mode == PrecisionMode::heteroscedastic_head;
  const Dataset data =
      synth_generate(cell.n, derive_seed(seed, 101 + std::uint64_t(ni)));

  Mlp model = build_model(1, s.widths.front(), s.depth, 1, het, s.temperature,
                          derive_seed(seed, 202 + std::uint64_t(ni)));
  ObjectiveConfig obj;
  obj.N = cell.n;
  obj.lengthscale = s.lengthscale;
  obj.precision_mode = mode;

  TrainConfig tc;
  tc.epochs = s.epochs;
  tc.batch_size = s.batch;
  tc.learning_rate = s.lr;
  tc.seed = derive_seed(seed, 404 + std::uint64_t(ni));

  try {
    const TrainTrace trace =
        train(model, data.X, Targets::regression(data.Y), obj, tc);
    cell.p = trace.converged_p();
    cell.loss = trace.rows.back().loss;
  } catch (const TrainingError&) {
    cell.diverged = true;
    return cell;
  }

  RngStream mc_rng(derive_seed(seed, 505 + std::uint64_t(ni)));
  const PredictiveSamples ps =
      mc_predict(model, heldout.X, s.mc_samples, mc_rng);
  const UncertaintyDecomposition d = decompose(ps);
  cell.epi = mean(d.epistemic_std());
  cell.ale = mean(d.aleatoric_std());
  cell.pred = mean(d.predictive_std());
  cell.gap =
      (d.predictive_var - (d.epistemic_var + d.aleatoric_var)).cwiseAbs().maxCoeff();
  return cell;
}

}  // namespace

void run_synth(const ExperimentSpec& s) {
  fs::create_directories(s.out_dir);
  const std::size_t n_layers = static_cast<std::size_t>(s.depth) + 1;

  std::vector<SynthCell> cells;
  for (std::uint64_t seed : s.seeds) {
    const Dataset heldout = synth_generate(s.heldout, derive_seed(seed, 303));
    for (std::size_t ni = 0; ni < s.n_grid.size(); ++ni)
      cells.push_back(run_synth_cell(s, seed, ni, heldout));
  }

  std::ofstream out = open_out(s.out_dir + "/synth_results.csv");
  out << "n,seed,epistemic_std,aleatoric_std,predictive_std,additivity_gap,"
         "final_loss,diverged";
  write_p_header(out, static_cast<Eigen::Index>(n_layers));
  out << "\n";
  for (const SynthCell& c : cells) {
    out << c.n << "," << c.seed << "," << g17(c.epi) << "," << g17(c.ale) << ","
        << g17(c.pred) << "," << g17(c.gap) << "," << g17(c.loss) << ","
        << (c.diverged ? 1 : 0);
    write_p_row(out, c.p, n_layers);
    out << "\n";
  }

  std::ofstream agg = open_out(s.out_dir + "/synth_aggregate.csv");
  agg << "n,seeds_used,mean_epistemic_std,mean_aleatoric_std,mean_predictive_std,"
         "max_additivity_gap,mean_p";
  write_p_header(agg, static_cast<Eigen::Index>(n_layers));
  agg << "\n";

  std::vector<Series> std_series(3), p_series(n_layers);
  std_series[0].name = "epistemic std";
  std_series[1].name = "aleatoric std";
  std_series[2].name = "predictive std";
  for (std::size_t k = 0; k < n_layers; ++k)
    p_series[k].name = "layer " + std::to_string(k);

  for (Eigen::Index n : s.n_grid) {
    int used = 0;
    double epi = 0, ale = 0, pred = 0, gap = 0;
    std::vector<double> p(n_layers, 0.0);
    for (const SynthCell& c : cells) {
      if (c.n != n || c.diverged) continue;
      ++used;
      epi += c.epi;
      ale += c.ale;
      pred += c.pred;
      gap = std::max(gap, c.gap);
      for (std::size_t k = 0; k < n_layers; ++k) p[k] += c.p[k];
    }
    double mean_p = kNaN;
    if (used > 0) {
      epi /= used;
      ale /= used;
      pred /= used;
      double acc = 0.0;
      for (std::size_t k = 0; k < n_layers; ++k) {
        p[k] /= used;
        acc += p[k];
      }
      mean_p = acc / double(n_layers);
    } else {
      epi = ale = pred = gap = kNaN;
      p.assign(n_layers, kNaN);
    }
    agg << n << "," << used << "," << g17(epi) << "," << g17(ale) << ","
        << g17(pred) << "," << g17(gap) << "," << g17(mean_p);
    write_p_row(agg, p, n_layers);
    agg << "\n";

    std_series[0].pts.push_back({double(n), epi});
    std_series[1].pts.push_back({double(n), ale});
    std_series[2].pts.push_back({double(n), pred});
    for (std::size_t k = 0; k < n_layers; ++k)
      p_series[k].pts.push_back({double(n), p[k]});
  }

  if (s.svg) {
    write_svg_plot(s.out_dir + "/synth_stds.svg",
                   "Uncertainty versus dataset size", "dataset size",
                   "mean held-out std", std_series, true);
    write_svg_plot(s.out_dir + "/synth_p.svg",
                   "Converged dropout probability versus dataset size",
                   "dataset size", "dropout probability", p_series, true);
  }
}

// ---------------------------------------------------------------------------
// regress

void run_regress(const ExperimentSpec& s) {
  if (s.data_path.empty())
    throw ConfigError("regress needs a csv file via --data");
  fs::create_directories(s.out_dir);
  const Dataset data = load_csv(s.data_path, s.target_column);
  const PrecisionMode mode = mode_of(s.precision_mode);
  const bool het = mode == PrecisionMode::heteroscedastic_head;
  const std::uint64_t base = s.seeds.front();
  const std::size_t n_layers = static_cast<std::size_t>(s.depth) + 1;

  std::ofstream out = open_out(s.out_dir + "/regress_results.csv");
  out << "split,n_train,n_test,rmse,nll,log_tau,final_loss,diverged";
  write_p_header(out, static_cast<Eigen::Index>(n_layers));
  out << "\n";

  int used = 0, diverged_count = 0;
  double rmse_sum = 0, rmse_sq = 0, nll_sum = 0, nll_sq = 0;
  std::vector<double> p_sum(n_layers, 0.0);

  for (int i = 0; i < s.csv_splits; ++i) {
    const SplitResult sp =
        split(data, 0.9, 0.0, 0.1, derive_seed(base, 700 + std::uint64_t(i)));
    const Normalisation nx = fit_normalisation(sp.train.X);
    const Normalisation ny = fit_normalisation(sp.train.Y);
    const Matrix Xtr = apply_normalisation(sp.train.X, nx);
    const Matrix Ytr = apply_normalisation(sp.train.Y, ny);
    const Matrix Xte = apply_normalisation(sp.test.X, nx);

    Mlp model = build_model(data.X.cols(), s.widths.front(), s.depth,
                            sp.train.Y.cols(), het, s.temperature,
                            derive_seed(base, 800 + std::uint64_t(i)));
    ObjectiveConfig obj;
    obj.N = sp.train.X.rows();
    obj.lengthscale = s.lengthscale;
    obj.precision_mode = mode;

    TrainConfig tc;
    tc.epochs = s.epochs;
    tc.batch_size = s.batch;
    tc.learning_rate = s.lr;
    tc.seed = derive_seed(base, 900 + std::uint64_t(i));

    double rmse = kNaN, nll = kNaN, loss = kNaN;
    std::vector<double> p;
    bool diverged = false;
    try {
      const TrainTrace trace =
          train(model, Xtr, Targets::regression(Ytr), obj, tc);
      p = trace.converged_p();
      loss = trace.rows.back().loss;

      RngStream mc_rng(derive_seed(base, 1000 + std::uint64_t(i)));
      const PredictiveSamples ps = mc_predict(model, Xte, s.mc_samples, mc_rng);
      const UncertaintyDecomposition d = decompose(ps);
      // Report in the original target units: denormalise the predictive mean
      // and fold the target scale back into the variance before scoring.
      const Matrix mean_orig = invert_normalisation(mean_prediction(ps), ny);
      Matrix log_var_orig(d.predictive_var.rows(), d.predictive_var.cols());
      for (Eigen::Index r = 0; r < log_var_orig.rows(); ++r)
        for (Eigen::Index c = 0; c < log_var_orig.cols(); ++c)
          log_var_orig(r, c) =
              std::log(d.predictive_var(r, c) * ny.std(c) * ny.std(c));
      const Matrix err = sp.test.Y - mean_orig;
      rmse = std::sqrt(mean(err.cwiseProduct(err)));
      nll = gaussian_nll(sp.test.Y, mean_orig, log_var_orig);

      ++used;
      rmse_sum += rmse;
      rmse_sq += rmse * rmse;
      nll_sum += nll;
      nll_sq += nll * nll;
      for (std::size_t k = 0; k < n_layers; ++k) p_sum[k] += p[k];
    } catch (const TrainingError&) {
      diverged = true;
      ++diverged_count;
    }

    out << i << "," << sp.train.X.rows() << "," << sp.test.X.rows() << ","
        << g17(rmse) << "," << g17(nll) << "," << g17(model.log_tau) << ","
        << g17(loss) << "," << (diverged ? 1 : 0);
    write_p_row(out, p, n_layers);
    out << "\n";
  }

  std::ofstream agg = open_out(s.out_dir + "/regress_aggregate.csv");
  agg << "splits_used,diverged,mean_rmse,std_rmse,mean_nll,std_nll";
  write_p_header(agg, static_cast<Eigen::Index>(n_layers));
  agg << "\n";
  double mean_rmse = kNaN, std_rmse = kNaN, mean_nll = kNaN, std_nll = kNaN;
  std::vector<double> p_mean(n_layers, kNaN);
  if (used > 0) {
    mean_rmse = rmse_sum / used;
    std_rmse = std::sqrt(std::max(0.0, rmse_sq / used - mean_rmse * mean_rmse));
    mean_nll = nll_sum / used;
    std_nll = std::sqrt(std::max(0.0, nll_sq / used - mean_nll * mean_nll));
    for (std::size_t k = 0; k < n_layers; ++k) p_mean[k] = p_sum[k] / used;
  }
  agg << used << "," << diverged_count << "," << g17(mean_rmse) << ","
      << g17(std_rmse) << "," << g17(mean_nll) << "," << g17(std_nll);
  write_p_row(agg, p_mean, n_layers);
  agg << "\n";
}

// ---------------------------------------------------------------------------
// mnist

namespace {

double test_accuracy(Mlp& model, const Dataset& test, int S, RngStream& rng) {
  const Matrix probs = classification_predict(model, test.X, S, rng);
  Eigen::Index hits = 0;
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < probs.cols(); ++c)
      if (probs(i, c) > probs(i, best)) best = c;
    if (best == test.labels[static_cast<std::size_t>(i)]) ++hits;
  }
  return double(hits) / double(probs.rows());
}

}  // namespace

void run_mnist(const ExperimentSpec& s) {
  if (s.data_path.empty())
    throw ConfigError("mnist needs an idx directory via --data or the data-dir "
                      "environment variable");
  fs::create_directories(s.out_dir);
  const std::string dir = s.data_path;
  const Dataset train_all = load_idx(dir + "/train-images-idx3-ubyte",
                                     dir + "/train-labels-idx1-ubyte");
  const Dataset test_set = load_idx(dir + "/t10k-images-idx3-ubyte",
                                    dir + "/t10k-labels-idx1-ubyte");
  int n_classes = 0;
  for (int l : train_all.labels) n_classes = std::max(n_classes, l + 1);
  for (int l : test_set.labels) n_classes = std::max(n_classes, l + 1);

  const std::size_t n_layers = static_cast<std::size_t>(s.depth) + 1;
  std::ofstream out = open_out(s.out_dir + "/mnist_results.csv");
  out << "width,n_train,seed,accuracy,final_loss,diverged";
  write_p_header(out, static_cast<Eigen::Index>(n_layers));
  out << "\n";

  struct Cell {
    Eigen::Index width, n;
    bool diverged;
    double acc;
    std::vector<double> p;
  };
  std::vector<Cell> cells;

  for (std::size_t wi = 0; wi < s.widths.size(); ++wi)
    for (std::size_t ni = 0; ni < s.n_grid.size(); ++ni)
      for (std::uint64_t seed : s.seeds) {
        const Eigen::Index width = s.widths[wi];
        const Eigen::Index n = s.n_grid[ni];
        if (n > train_all.size())
          throw DataError("requested training subset " + std::to_string(n) +
                          " exceeds the " + std::to_string(train_all.size()) +
                          " available images");
        const std::uint64_t salt = 77 * std::uint64_t(wi) + std::uint64_t(ni);
        const Matrix Xtr = train_all.X.topRows(n);
        const std::vector<int> labels(train_all.labels.begin(),
                                      train_all.labels.begin() + n);

        Mlp model = build_model(train_all.X.cols(), width, s.depth, n_classes,
                                false, s.temperature,
                                derive_seed(seed, 11 + salt));
        ObjectiveConfig obj;
        obj.N = n;
        obj.lengthscale = s.lengthscale;
        obj.precision_mode = PrecisionMode::fixed;
        obj.loss_kind = LossKind::cross_entropy;

        TrainConfig tc;
        tc.epochs = s.epochs;
        tc.batch_size = s.batch;
        tc.learning_rate = s.lr;
        tc.seed = derive_seed(seed, 211 + salt);

        Cell cell{width, n, false, kNaN, {}};
        double loss = kNaN;
        try {
          const TrainTrace trace =
              train(model, Xtr, Targets::classes(labels), obj, tc);
          cell.p = trace.converged_p();
          loss = trace.rows.back().loss;
          RngStream mc_rng(derive_seed(seed, 311 + salt));
          cell.acc = test_accuracy(model, test_set, s.mc_samples, mc_rng);
        } catch (const TrainingError&) {
          cell.diverged = true;
        }
        cells.push_back(cell);

        out << width << "," << n << "," << seed << "," << g17(cell.acc) << ","
            << g17(loss) << "," << (cell.diverged ? 1 : 0);
        write_p_row(out, cell.p, n_layers);
        out << "\n";
      }

  std::ofstream agg = open_out(s.out_dir + "/mnist_aggregate.csv");
  agg << "width,n_train,seeds_used,mean_accuracy";
  write_p_header(agg, static_cast<Eigen::Index>(n_layers));
  agg << "\n";

  std::vector<Series> width_series(n_layers), size_series(n_layers);
  for (std::size_t k = 0; k < n_layers; ++k) {
    width_series[k].name = "layer " + std::to_string(k);
    size_series[k].name = "layer " + std::to_string(k);
  }

  for (Eigen::Index width : s.widths)
    for (Eigen::Index n : s.n_grid) {
      int used = 0;
      double acc = 0.0;
      std::vector<double> p(n_layers, 0.0);
      for (const Cell& c : cells) {
        if (c.width != width || c.n != n || c.diverged) continue;
        ++used;
        acc += c.acc;
        for (std::size_t k = 0; k < n_layers; ++k) p[k] += c.p[k];
      }
      if (used > 0) {
        acc /= used;
        for (std::size_t k = 0; k < n_layers; ++k) p[k] /= used;
      } else {
        acc = kNaN;
        p.assign(n_layers, kNaN);
      }
      agg << width << "," << n << "," << used << "," << g17(acc);
      write_p_row(agg, p, n_layers);
      agg << "\n";
      if (n == s.n_grid.back())
        for (std::size_t k = 0; k < n_layers; ++k)
          width_series[k].pts.push_back({double(width), p[k]});
      if (width == s.widths.back())
        for (std::size_t k = 0; k < n_layers; ++k)
          size_series[k].pts.push_back({double(n), p[k]});
    }

  if (s.svg) {
    if (s.widths.size() > 1)
      write_svg_plot(s.out_dir + "/mnist_p_width.svg",
                     "Converged dropout probability versus width",
                     "hidden width", "dropout probability", width_series, true);
    if (s.n_grid.size() > 1)
      write_svg_plot(s.out_dir + "/mnist_p_size.svg",
                     "Converged dropout probability versus training-set size",
                     "training images", "dropout probability", size_series, true);
  }
}

// ---------------------------------------------------------------------------
// calibrate

void run_calibrate(const ExperimentSpec& s) {
  fs::create_directories(s.out_dir);
  const std::uint64_t base = s.seeds.front();
  const PrecisionMode mode = mode_of(s.precision_mode);
  const bool het = mode == PrecisionMode::heteroscedastic_head;
  const Eigen::Index N = s.n_grid.back();

  const Dataset data = synth_generate(N, derive_seed(base, 101));
  Mlp model = build_model(1, s.widths.front(), s.depth, 1, het, s.temperature,
                          derive_seed(base, 202));
  ObjectiveConfig obj;
  obj.N = N;
  obj.lengthscale = s.lengthscale;
  obj.precision_mode = mode;

  TrainConfig tc;
  tc.epochs = s.epochs;
  tc.batch_size = s.batch;
  tc.learning_rate = s.lr;
  tc.seed = derive_seed(base, 404);
  train(model, data.X, Targets::regression(data.Y), obj, tc);

  const std::vector<double> levels = levels_5_to_95();
  auto write_curve = [&](const std::string& path, const CalibrationCurve& cc) {
    std::ofstream out = open_out(path);
    out << "level,empirical,count\n";
    for (const CalibrationBin& b : cc.bins)
      out << g17(b.level) << "," << g17(b.empirical) << "," << b.count << "\n";
  };

  // Held-out targets from the true generating process.
  const Dataset held = synth_generate(s.heldout, derive_seed(base, 303));
  RngStream mc_a(derive_seed(base, 505));
  const PredictiveSamples ps_a = mc_predict(model, held.X, s.mc_samples, mc_a);
  const UncertaintyDecomposition d_a = decompose(ps_a);
  const Vector means_a = mean_prediction(ps_a).col(0);
  const CalibrationCurve trained =
      calibration_curve(d_a, means_a, held.Y.col(0), levels);
  write_curve(s.out_dir + "/calibration_trained.csv", trained);

  // Self-consistency: targets resampled from the model's own predictive
  // Gaussians must land on the diagonal up to binomial noise.
  const Dataset self_inputs = synth_generate(s.calib_points, derive_seed(base, 606));
  RngStream mc_b(derive_seed(base, 707));
  const PredictiveSamples ps_b =
      mc_predict(model, self_inputs.X, s.mc_samples, mc_b);
  const UncertaintyDecomposition d_b = decompose(ps_b);
  const Vector means_b = mean_prediction(ps_b).col(0);
  RngStream draw_rng(derive_seed(base, 808));
  Vector drawn(s.calib_points);
  for (Eigen::Index i = 0; i < s.calib_points; ++i)
    drawn(i) = draw_rng.next_gaussian(means_b(i),
                                      std::sqrt(d_b.predictive_var(i, 0)));
  const CalibrationCurve self = calibration_curve(d_b, means_b, drawn, levels);
  write_curve(s.out_dir + "/calibration_self.csv", self);

  std::ofstream summary = open_out(s.out_dir + "/calibration_summary.csv");
  summary << "n_train,heldout,self_points,rmse_trained,rmse_self\n";
  summary << N << "," << s.heldout << "," << s.calib_points << ","
          << g17(trained.rmse) << "," << g17(self.rmse) << "\n";
}

// ---------------------------------------------------------------------------

void run_experiment(const ExperimentSpec& spec) {
  const ExperimentSpec s = resolve_spec(spec);
  fs::create_directories(s.out_dir);
  write_manifest(s, s.out_dir + "/manifest.json");
  if (s.task == "gradcheck") run_gradcheck(s);
  else if (s.task == "synth") run_synth(s);
  else if (s.task == "regress") run_regress(s);
  else if (s.task == "mnist") run_mnist(s);
  else run_calibrate(s);
}

}  // namespace cdrop
