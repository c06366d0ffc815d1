// cdfnet: generate scenes, train and evaluate the four variants, check
// gradients, and report parameter budgets. Exit codes: 0 success, 2 bad
// usage or configuration, 3 training divergence, 4 checkpoint mismatch,
// 5 failed gradient check, 1 anything else.
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "CLI11.hpp"
#include "cdfnet/errors.hpp"
#include "cdfnet/gradcheck.hpp"
#include "cdfnet/loss.hpp"
#include "cdfnet/network.hpp"
#include "cdfnet/synthdata.hpp"
#include "cdfnet/trainer.hpp"

namespace fs = std::filesystem;
using namespace cdfnet;

namespace {

void apply_threads(int n) {
  if (n < 1) throw ConfigError("--threads must be at least 1");
#ifdef _OPENMP
  omp_set_num_threads(n);
#else
  if (n > 1)
    std::fprintf(stderr, "note: built without OpenMP, running serial\n");
#endif
}

struct GenArgs {
  std::string preset = "easy";
  int n = 0, n_val = 0, n_test = 0;
  std::uint64_t seed = 0;
  std::string out;
};

int cmd_gen_data(const GenArgs& a) {
  synth::SceneSpec spec = synth::SceneSpec::preset(a.preset);
  synth::Dataset ds = synth::generate(spec, a.n, a.seed, a.n_val, a.n_test);
  synth::export_dataset(ds, a.out);
  std::printf("wrote %d samples (%d train, %d val, %d test), %d classes, "
              "%dx%d, preset %s -> %s\n",
              ds.size(), (int)ds.train_idx.size(), (int)ds.val_idx.size(),
              (int)ds.test_idx.size(), ds.num_classes, spec.height, spec.width,
              a.preset.c_str(), a.out.c_str());
  return 0;
}

struct TrainArgs {
  std::string variant;
  std::string data;
  std::string out;
  std::string config;
  int width = 8;
  int epochs = 40;
  int batch = 4;
  double lr = 0.01;
  std::uint64_t seed = 0;
  bool augment = false;
  int threads = 1;
  int checkpoint_every = 0;
  bool dump_csv = false;
};

std::string trim(const std::string& s) {
  const std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  return s.substr(a, s.find_last_not_of(" \t\r") - a + 1);
}

long long parse_ll(const std::string& s, const std::string& key) {
  std::size_t used = 0;
  long long v = 0;
  try {
    v = std::stoll(s, &used);
  } catch (const std::exception&) {
    used = std::string::npos;
  }
  if (used != s.size())
    throw ConfigError("config key " + key + " needs an integer, got \"" + s +
                      "\"");
  return v;
}

double parse_dbl(const std::string& s, const std::string& key) {
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = std::string::npos;
  }
  if (used != s.size())
    throw ConfigError("config key " + key + " needs a number, got \"" + s +
                      "\"");
  return v;
}

bool parse_onoff(const std::string& s, const std::string& key) {
  if (s == "true" || s == "1" || s == "on" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "off" || s == "no") return false;
  throw ConfigError("config key " + key + " needs true or false, got \"" + s +
                    "\"");
}

/// Plain `key = value` lines with # comments. Values fill in only for
/// options the command line left untouched, so flags always win.
void merge_config_file(TrainArgs& a, const CLI::App& tr) {
  std::ifstream f(a.config);
  if (!f) throw ConfigError("cannot read config file " + a.config);
  const auto untouched = [&](const char* flag) {
    return tr.count(flag) == 0;
  };
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    if (trim(line).empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) +
                        " is not key = value: \"" + trim(line) + "\"");
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    if (key.empty())
      throw ConfigError("config line " + std::to_string(lineno) +
                        " has an empty key");
    if (key == "variant") {
      if (untouched("--variant")) a.variant = val;
    } else if (key == "data") {
      if (untouched("--data")) a.data = val;
    } else if (key == "out") {
      if (untouched("--out")) a.out = val;
    } else if (key == "base-width") {
      if (untouched("--base-width")) a.width = (int)parse_ll(val, key);
    } else if (key == "epochs") {
      if (untouched("--epochs")) a.epochs = (int)parse_ll(val, key);
    } else if (key == "batch") {
      if (untouched("--batch")) a.batch = (int)parse_ll(val, key);
    } else if (key == "lr") {
      if (untouched("--lr")) a.lr = parse_dbl(val, key);
    } else if (key == "seed") {
      if (untouched("--seed"))
        a.seed = (std::uint64_t)parse_ll(val, key);
    } else if (key == "augment") {
      if (untouched("--augment")) a.augment = parse_onoff(val, key);
    } else if (key == "threads") {
      if (untouched("--threads")) a.threads = (int)parse_ll(val, key);
    } else if (key == "checkpoint-every") {
      if (untouched("--checkpoint-every"))
        a.checkpoint_every = (int)parse_ll(val, key);
    } else if (key == "dump-csv") {
      if (untouched("--dump-csv")) a.dump_csv = parse_onoff(val, key);
    } else {
      throw ConfigError("unknown config key \"" + key + "\" on line " +
                        std::to_string(lineno));
    }
  }
}

std::string resolved_config(const TrainArgs& a) {
  char buf[64];
  std::string s;
  s += "variant = " + a.variant + "\n";
  s += "data = " + a.data + "\n";
  s += "out = " + a.out + "\n";
  s += "base-width = " + std::to_string(a.width) + "\n";
  s += "epochs = " + std::to_string(a.epochs) + "\n";
  s += "batch = " + std::to_string(a.batch) + "\n";
  std::snprintf(buf, sizeof(buf), "%.17g", a.lr);
  s += std::string("lr = ") + buf + "\n";
  s += "seed = " + std::to_string(a.seed) + "\n";
  s += std::string("augment = ") + (a.augment ? "true" : "false") + "\n";
  s += "threads = " + std::to_string(a.threads) + "\n";
  s += "checkpoint-every = " + std::to_string(a.checkpoint_every) + "\n";
  s += std::string("dump-csv = ") + (a.dump_csv ? "true" : "false") + "\n";
  return s;
}

int cmd_train(const TrainArgs& a) {
  if (a.variant.empty())
    throw UsageError("--variant is required (flag or config file)");
  if (a.data.empty())
    throw UsageError("--data is required (flag or config file)");
  if (a.out.empty())
    throw UsageError("--out is required (flag or config file)");
  apply_threads(a.threads);
  VariantSpec v = VariantSpec::parse(a.variant);
  synth::Dataset ds = synth::import_dataset(a.data);

  fs::create_directories(a.out);
  std::ofstream echo(fs::path(a.out) / "config.txt", std::ios::trunc);
  echo << resolved_config(a);
  echo.close();

  Model<float> model = Model<float>::build(v, 1, ds.num_classes, a.width,
                                           a.seed);
  train::TrainConfig cfg;
  cfg.epochs = a.epochs;
  cfg.batch_size = a.batch;
  cfg.lr0 = a.lr;
  cfg.seed = a.seed;
  cfg.augment = a.augment;
  cfg.checkpoint_every = a.checkpoint_every;
  cfg.out_dir = a.out;

  train::TrainResult res = train::train(model, ds, cfg);

  if (a.dump_csv) {
    std::ofstream csv(fs::path(a.out) / "curve.csv", std::ios::trunc);
    csv << "epoch,lr,mean_loss,seconds\n";
    char line[160];
    for (const auto& e : res.curve) {
      std::snprintf(line, sizeof(line), "%d,%.17g,%.17g,%.3f\n", e.epoch,
                    e.lr, e.mean_loss, e.seconds);
      csv << line;
    }
  }

  if (!res.curve.empty())
    std::printf("trained %s for %d epochs: loss %.5f -> %.5f\n",
                v.name.c_str(), (int)res.curve.size(),
                res.curve.front().mean_loss, res.curve.back().mean_loss);
  else
    std::printf("trained %s for 0 epochs\n", v.name.c_str());
  std::printf("model saved to %s/model.cdfc\n", a.out.c_str());
  if (res.evaluated) {
    std::printf("held-out metrics:\n%s", res.held_out.to_text().c_str());
  }
  return 0;
}

struct EvalArgs {
  std::string data;
  std::string split = "test";
  std::vector<std::string> checkpoints;
  std::string variant;  // optional consistency check
  double rare_threshold = 0.01;
  int threads = 1;
};

struct EvalColumn {
  std::string label;
  MetricsReport agg;
  // per class: mean and spread of the per-sample overlap, samples scored
  std::vector<double> mean, stddev;
  std::vector<int> scored;
};

std::string col_label(const std::string& path) {
  return fs::path(path).stem().string();
}

int cmd_eval(const EvalArgs& a) {
  apply_threads(a.threads);
  synth::Dataset ds = synth::import_dataset(a.data);
  synth::SplitView view = synth::split_view(ds, a.split);
  if (view.size() == 0)
    throw ConfigError("split \"" + a.split + "\" is empty");
  const int K = ds.num_classes;
  const int h = view.labels[0]->h, w = view.labels[0]->w;

  std::vector<EvalColumn> cols;
  for (const std::string& path : a.checkpoints) {
    Model<float> m = Model<float>::load(path);
    if (!a.variant.empty() && m.variant.name != a.variant)
      throw CheckpointError("checkpoint " + path + " holds variant " +
                            m.variant.name + ", expected " + a.variant);
    if (m.num_classes != K)
      throw CheckpointError("checkpoint " + path + " predicts " +
                            std::to_string(m.num_classes) +
                            " classes but the dataset has " +
                            std::to_string(K));

    EvalColumn col;
    col.label = col_label(path);
    col.mean.assign(K, 0.0);
    col.stddev.assign(K, 0.0);
    col.scored.assign(K, 0);
    std::vector<std::vector<double>> per_sample(K);

    LabelMap pred_all(view.size(), h, w), truth_all(view.size(), h, w);
    const std::int64_t px = (std::int64_t)h * w;
    for (int s = 0; s < view.size(); ++s) {
      Tensor<float> logits = m.forward(*view.images[s], Mode::kEval);
      LabelMap pred = argmax_predictions(logits);
      std::copy(pred.data.begin(), pred.data.end(),
                pred_all.data.begin() + s * px);
      std::copy(view.labels[s]->data.begin(), view.labels[s]->data.end(),
                truth_all.data.begin() + s * px);
      MetricsReport one = evaluate_segmentation(pred, *view.labels[s], K,
                                                a.rare_threshold);
      for (int c = 0; c < K; ++c)
        if (one.dice[c] >= 0.0) per_sample[c].push_back(one.dice[c]);
    }
    col.agg = evaluate_segmentation(pred_all, truth_all, K, a.rare_threshold);
    for (int c = 0; c < K; ++c) {
      const auto& xs = per_sample[c];
      col.scored[c] = (int)xs.size();
      if (xs.empty()) continue;
      double mu = 0;
      for (double x : xs) mu += x;
      mu /= xs.size();
      double var = 0;
      for (double x : xs) var += (x - mu) * (x - mu);
      col.mean[c] = mu;
      col.stddev[c] = std::sqrt(var / xs.size());
    }
    cols.push_back(std::move(col));
  }

  std::printf("split %s: %d samples, %d classes, %dx%d\n", a.split.c_str(),
              view.size(), K, h, w);
  std::printf("%-7s %-8s", "class", "freq");
  for (const auto& c : cols) std::printf("  %-24s", c.label.c_str());
  std::printf("\n");
  for (int c = 1; c < K; ++c) {
    std::printf("%-7d %-8.4f", c, cols.front().agg.truth_freq[c]);
    for (const auto& col : cols) {
      if (col.agg.dice[c] < 0.0 && col.scored[c] == 0) {
        std::printf("  %-24s", "n/a");
      } else {
        char cell[40];
        std::snprintf(cell, sizeof(cell), "%.4f (%.4f +/- %.4f)",
                      col.agg.dice[c], col.mean[c], col.stddev[c]);
        std::printf("  %-24s", cell);
      }
    }
    std::printf("\n");
  }
  auto summary_row = [&](const char* name, auto pick) {
    std::printf("%-16s", name);
    for (const auto& col : cols) {
      const double v = pick(col.agg);
      char cell[40];
      if (v < 0.0)
        std::snprintf(cell, sizeof(cell), "n/a");
      else
        std::snprintf(cell, sizeof(cell), "%.4f", v);
      std::printf("  %-24s", cell);
    }
    std::printf("\n");
  };
  summary_row("foreground", [](const MetricsReport& r) {
    return r.foreground_dice;
  });
  summary_row("mean", [](const MetricsReport& r) { return r.mean_dice; });
  summary_row("rare", [](const MetricsReport& r) { return r.rare_dice; });
  summary_row("frequent", [](const MetricsReport& r) {
    return r.frequent_dice;
  });
  summary_row("pixel acc", [](const MetricsReport& r) {
    return r.pixel_accuracy;
  });
  return 0;
}

struct GradcheckArgs {
  std::string unit;
  int width = 2;
  std::uint64_t seed = 1;
  int threads = 1;
};

int cmd_gradcheck(const GradcheckArgs& a) {
  apply_threads(a.threads);
  std::vector<gradcheck::CheckResult> results =
      gradcheck::run_units(a.unit, a.width, a.seed);
  bool ok = true;
  std::vector<std::string> bad;
  for (const auto& r : results) {
    std::printf("%s\n", r.summary().c_str());
    if (!r.pass) {
      ok = false;
      for (const std::string& t : r.failing()) bad.push_back(r.unit + ":" + t);
    }
  }
  if (!ok) {
    std::printf("failing tensors:");
    for (const auto& t : bad) std::printf(" %s", t.c_str());
    std::printf("\n");
    return 5;
  }
  std::printf("all gradients match finite differences\n");
  return 0;
}

int cmd_params(std::vector<int> widths) {
  if (widths.empty()) widths = {2, 4, 8, 16};
  const auto variants = VariantSpec::all();
  std::printf("%-7s", "width");
  for (const auto& v : variants) std::printf(" %10s", v.name.c_str());
  std::printf("\n");
  for (int w : widths) {
    if (w < 1) throw ConfigError("--base-width must be at least 1");
    std::printf("%-7d", w);
    for (const auto& v : variants) {
      Model<float> m = Model<float>::build(v, 1, 2, w, 0);
      std::printf(" %10lld", (long long)m.param_count());
    }
    std::printf("\n");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"competitive dense segmentation networks"};
  app.require_subcommand(1);

  GenArgs ga;
  CLI::App* gen = app.add_subcommand("gen-data", "render a synthetic dataset");
  gen->option_defaults()->always_capture_default(true);
  gen->add_option("--preset", ga.preset,
                  "scene family: easy, imbalanced or occluded");
  gen->add_option("--n", ga.n, "training samples")->required();
  gen->add_option("--n-val", ga.n_val, "validation samples");
  gen->add_option("--n-test", ga.n_test, "test samples");
  gen->add_option("--seed", ga.seed, "scene seed");
  gen->add_option("--out", ga.out, "output directory")->required();

  TrainArgs ta;
  CLI::App* tr = app.add_subcommand("train", "fit a variant to a dataset");
  tr->option_defaults()->always_capture_default(true);
  tr->add_option("--variant", ta.variant, "bl0, bl1, bl2 or cdfnet");
  tr->add_option("--data", ta.data, "dataset directory");
  tr->add_option("--out", ta.out, "output directory");
  tr->add_option("--base-width", ta.width, "feature channels per block");
  tr->add_option("--epochs", ta.epochs, "epoch budget");
  tr->add_option("--batch", ta.batch, "mini-batch size");
  tr->add_option("--lr", ta.lr, "initial learning rate");
  tr->add_option("--seed", ta.seed, "training seed");
  tr->add_flag("--augment", ta.augment, "random affine augmentation");
  tr->add_option("--threads", ta.threads, "worker threads");
  tr->add_option("--checkpoint-every", ta.checkpoint_every,
                 "save every N epochs");
  tr->add_flag("--dump-csv", ta.dump_csv, "write the loss curve as CSV");
  tr->add_option("--config", ta.config,
                 "key = value file; flags given here override it");

  EvalArgs ea;
  CLI::App* ev = app.add_subcommand("eval", "score checkpoints on a split");
  ev->option_defaults()->always_capture_default(true);
  ev->add_option("--data", ea.data, "dataset directory")->required();
  ev->add_option("--split", ea.split, "train, val or test");
  ev->add_option("--checkpoint", ea.checkpoints,
                 "model file; repeat to compare")
      ->required();
  ev->add_option("--variant", ea.variant, "require this variant");
  ev->add_option("--rare-threshold", ea.rare_threshold,
                 "truth frequency separating rare from frequent");
  ev->add_option("--threads", ea.threads, "worker threads");

  GradcheckArgs ca;
  CLI::App* gc = app.add_subcommand(
      "gradcheck", "compare analytic gradients with finite differences");
  gc->option_defaults()->always_capture_default(true);
  gc->add_option("--unit", ca.unit,
                 "layer:<name>, block:<name>, net:<variant>, or a group: "
                 "layers, blocks, nets, all")
      ->required();
  gc->add_option("--base-width", ca.width, "network width for net units");
  gc->add_option("--seed", ca.seed, "probe seed");
  gc->add_option("--threads", ca.threads, "worker threads");

  std::vector<int> widths;
  CLI::App* pa = app.add_subcommand("params", "parameter counts per variant");
  pa->option_defaults()->always_capture_default(true);
  pa->add_option("--base-width", widths, "width column; repeat for more");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(ga);
    if (tr->parsed()) {
      if (!ta.config.empty()) merge_config_file(ta, *tr);
      return cmd_train(ta);
    }
    if (ev->parsed()) return cmd_eval(ea);
    if (gc->parsed()) return cmd_gradcheck(ca);
    if (pa->parsed()) return cmd_params(widths);
  } catch (const DivergenceError& e) {
    std::fprintf(stderr, "diverged: %s\n", e.what());
    return 3;
  } catch (const CheckpointError& e) {
    std::fprintf(stderr, "checkpoint error: %s\n", e.what());
    return 4;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
