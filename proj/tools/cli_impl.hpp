#pragma once
// Command-line front end: dataset, train, generate, lyapunov, diverge, pr,
// project. Every run writes its artifacts plus a manifest listing inputs,
// seed and content hashes into the output directory. Exit codes: 0 success,
// 1 usage or configuration error, 2 runtime failure.

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ccgn/data.hpp"
#include "ccgn/dynamics.hpp"
#include "ccgn/evaluation.hpp"
#include "ccgn/model.hpp"
#include "ccgn/report.hpp"
#include "ccgn/training.hpp"

namespace ccgn::cli {

namespace fs = std::filesystem;

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Flat key=value configuration with per-command schema validation

class RunConfig {
 public:
  void declare(const std::string& key, const std::string& default_value) {
    schema_[key] = default_value;
  }

  void load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError(path + ": cannot open config file");
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      const auto trim = [](std::string s) {
        const auto a = s.find_first_not_of(" \t\r");
        if (a == std::string::npos) return std::string();
        const auto b = s.find_last_not_of(" \t\r");
        return s.substr(a, b - a + 1);
      };
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key = value");
      const std::string key = trim(line.substr(0, eq));
      const std::string value = trim(line.substr(eq + 1));
      if (schema_.find(key) == schema_.end())
        throw ConfigError(path + ":" + std::to_string(lineno) + ": unknown key \"" + key + "\"");
      values_[key] = value;
    }
  }

  void set(const std::string& key, const std::string& value) {
    if (schema_.find(key) == schema_.end())
      throw ConfigError("unknown configuration key \"" + key + "\"");
    values_[key] = value;
  }

  bool has(const std::string& key) const {
    auto it = values_.find(key);
    if (it != values_.end() && !it->second.empty()) return true;
    auto sc = schema_.find(key);
    return sc != schema_.end() && !sc->second.empty();
  }

  std::string str(const std::string& key) const {
    auto it = values_.find(key);
    if (it != values_.end()) return it->second;
    auto sc = schema_.find(key);
    if (sc == schema_.end()) throw ConfigError("undeclared key \"" + key + "\"");
    if (sc->second.empty()) throw ConfigError("missing required key \"" + key + "\"");
    return sc->second;
  }

  long long integer(const std::string& key) const {
    try {
      return std::stoll(str(key));
    } catch (const ConfigError&) {
      throw;
    } catch (...) {
      throw ConfigError("key \"" + key + "\" must be an integer, got \"" + str(key) + "\"");
    }
  }

  double real(const std::string& key) const {
    try {
      return std::stod(str(key));
    } catch (const ConfigError&) {
      throw;
    } catch (...) {
      throw ConfigError("key \"" + key + "\" must be a number, got \"" + str(key) + "\"");
    }
  }

  std::array<int, 3> label_triple(const std::string& key) const {
    const std::string v = str(key);
    std::array<int, 3> out{};
    if (std::sscanf(v.c_str(), "%d,%d,%d", &out[0], &out[1], &out[2]) != 3)
      throw ConfigError("key \"" + key + "\" must be three comma-separated labels, got \"" + v + "\"");
    return out;
  }

  const std::map<std::string, std::string>& schema() const { return schema_; }
  std::map<std::string, std::string> effective() const {
    std::map<std::string, std::string> out = schema_;
    for (const auto& [k, v] : values_) out[k] = v;
    return out;
  }

 private:
  std::map<std::string, std::string> schema_;  // key -> default ("" = required)
  std::map<std::string, std::string> values_;
};

// ---------------------------------------------------------------------------
// Manifest

class Manifest {
 public:
  Manifest(std::string command, const RunConfig& cfg, std::string out_dir)
      : command_(std::move(command)), out_dir_(std::move(out_dir)) {
    for (const auto& [k, v] : cfg.effective()) config_[k] = v;
  }

  void add_input(const std::string& path) { inputs_.push_back(path); }
  void add_output(const std::string& path) { outputs_.push_back(path); }

  std::string out_path(const std::string& name) {
    const std::string p = (fs::path(out_dir_) / name).string();
    add_output(p);
    return p;
  }

  void write() const {
    nlohmann::ordered_json j;
    j["command"] = command_;
    j["config"] = config_;
    auto hash_list = [](const std::vector<std::string>& paths) {
      nlohmann::ordered_json arr = nlohmann::ordered_json::array();
      for (const std::string& p : paths) {
        char hex[24];
        std::snprintf(hex, sizeof(hex), "%016llx",
                      static_cast<unsigned long long>(report::fnv1a_file(p)));
        arr.push_back({{"path", p}, {"fnv64", hex}});
      }
      return arr;
    };
    j["inputs"] = hash_list(inputs_);
    j["outputs"] = hash_list(outputs_);
    std::ofstream out(fs::path(out_dir_) / "manifest.json");
    if (!out) throw FormatError(out_dir_ + "/manifest.json: cannot open for writing");
    out << j.dump(2) << "\n";
  }

 private:
  std::string command_;
  std::string out_dir_;
  nlohmann::ordered_json config_ = nlohmann::ordered_json::object();
  std::vector<std::string> inputs_;
  std::vector<std::string> outputs_;
};

// ---------------------------------------------------------------------------
// Shared helpers

inline TriDomain load_tridomain(RunConfig& cfg, const std::string& images_key,
                                const std::string& labels_key, Manifest& manifest) {
  const std::string img = cfg.str(images_key);
  const std::string lab = cfg.str(labels_key);
  manifest.add_input(img);
  manifest.add_input(lab);
  return select_tridomain(load_idx(img, lab), cfg.label_triple("labels"));
}

inline ArchConfig arch_from(const RunConfig& cfg) {
  ArchConfig a;
  a.base_channels = static_cast<int>(cfg.integer("base_channels"));
  a.n_resblocks = static_cast<int>(cfg.integer("n_resblocks"));
  a.n_downsamples = static_cast<int>(cfg.integer("n_downsamples"));
  a.dropout_rate = static_cast<float>(cfg.real("dropout_rate"));
  a.leaky_slope = static_cast<float>(cfg.real("leaky_slope"));
  return a;
}

inline void declare_arch(RunConfig& cfg) {
  cfg.declare("base_channels", "16");
  cfg.declare("n_resblocks", "4");
  cfg.declare("n_downsamples", "2");
  cfg.declare("dropout_rate", "0.3");
  cfg.declare("leaky_slope", "0.2");
}

inline std::vector<Tensor> domain_images(const TriDomain& tri, int domain) {
  switch (domain) {
    case 0: return tri.X.images;
    case 1: return tri.Y.images;
    default: return domain == 2 ? tri.Z.images : std::vector<Tensor>{};
  }
}

inline std::vector<Tensor> all_images(const TriDomain& tri) {
  std::vector<Tensor> out = tri.X.images;
  out.insert(out.end(), tri.Y.images.begin(), tri.Y.images.end());
  out.insert(out.end(), tri.Z.images.begin(), tri.Z.images.end());
  return out;
}

// ---------------------------------------------------------------------------
// dataset

inline int cmd_dataset(RunConfig& cfg) {
  const std::string out_dir = cfg.str("out");
  fs::create_directories(out_dir);
  Manifest manifest("dataset", cfg, out_dir);
  const std::string kind = cfg.str("kind");

  if (kind == "synth") {
    const int size = static_cast<int>(cfg.integer("size"));
    const int n_train = static_cast<int>(cfg.integer("train_per_class"));
    const int n_test = static_cast<int>(cfg.integer("test_per_class"));
    const std::uint64_t seed = static_cast<std::uint64_t>(cfg.integer("seed"));

    auto flatten = [](TriDomain tri, const char* split) {
      LabeledImages all;
      all.split = split;
      for (LabeledImages* d : {&tri.X, &tri.Y, &tri.Z}) {
        for (int i = 0; i < d->count(); ++i) {
          all.images.push_back(std::move(d->images[i]));
          all.labels.push_back(d->labels[i]);
        }
      }
      return all;
    };
    const LabeledImages train = flatten(synth_tridomain(n_train, size, seed), "train");
    const LabeledImages test = flatten(synth_tridomain(n_test, size, hash_mix(seed, 0x7e57ull)), "test");
    write_idx(train, manifest.out_path("train-images.idx"), manifest.out_path("train-labels.idx"));
    write_idx(test, manifest.out_path("test-images.idx"), manifest.out_path("test-labels.idx"));
    std::fprintf(stderr, "dataset: wrote %d train and %d test images per class at %dx%d\n",
                 n_train, n_test, size, size);
  } else if (kind == "import") {
    const std::string img = cfg.str("images");
    const std::string lab = cfg.str("labels_file");
    manifest.add_input(img);
    manifest.add_input(lab);
    const LabeledImages data = load_idx(img, lab);
    std::map<int, int> counts;
    for (int l : data.labels) counts[l]++;
    report::CsvTable t;
    t.columns = {"label", "count"};
    for (const auto& [l, c] : counts) t.rows.push_back({static_cast<double>(l), static_cast<double>(c)});
    t.write(manifest.out_path("summary.csv"));
    std::fprintf(stderr, "dataset: verified %d images of %dx%d, %zu labels\n", data.count(),
                 data.height(), data.width(), counts.size());
  } else {
    throw ConfigError("kind must be synth or import, got \"" + kind + "\"");
  }
  manifest.write();
  return 0;
}

// ---------------------------------------------------------------------------
// train

inline int cmd_train(RunConfig& cfg) {
  const std::string out_dir = cfg.str("out");
  fs::create_directories(out_dir);
  Manifest manifest("train", cfg, out_dir);
  const TriDomain tri = load_tridomain(cfg, "train_images", "train_labels", manifest);

  TrainConfig tc;
  tc.lambda = static_cast<float>(cfg.real("lambda"));
  tc.epochs = static_cast<int>(cfg.integer("epochs"));
  tc.batch = static_cast<int>(cfg.integer("batch"));
  tc.lr = static_cast<float>(cfg.real("lr"));
  tc.beta1 = static_cast<float>(cfg.real("beta1"));
  tc.beta2 = static_cast<float>(cfg.real("beta2"));
  tc.seed = static_cast<std::uint64_t>(cfg.integer("seed"));
  tc.eps_log = static_cast<float>(cfg.real("eps_log"));
  tc.checkpoint_interval = static_cast<int>(cfg.integer("checkpoint_interval"));
  const std::string eq7 = cfg.str("eq7_last_term_discriminator");
  if (eq7 == "as_printed") tc.eq7_last_term = Eq7LastTerm::AsPrinted;
  else if (eq7 == "figure_consistent") tc.eq7_last_term = Eq7LastTerm::FigureConsistent;
  else throw ConfigError("eq7_last_term_discriminator must be as_printed or figure_consistent");

  const ArchConfig arch = arch_from(cfg);
  fs::create_directories(fs::path(out_dir) / "checkpoints");

  TrainResult result = train(tc, arch, tri, [&](int epoch, const TrainState& s, const EpochLoss& el) {
    std::fprintf(stderr, "epoch %4d/%d  adv %.4f  cyc %.4f\n", epoch, tc.epochs, el.adv_total,
                 el.cyc_total);
    if (tc.checkpoint_interval > 0 && epoch % tc.checkpoint_interval == 0 && epoch < tc.epochs) {
      char name[64];
      std::snprintf(name, sizeof(name), "checkpoints/epoch_%04d.ccgn", epoch);
      Checkpoint partial = checkpoint_from_state(s, tc);
      save_checkpoint(manifest.out_path(name), partial);
    }
  });

  save_checkpoint(manifest.out_path("checkpoint.ccgn"), result.checkpoint);

  report::CsvTable loss;
  loss.columns = {"epoch", "adv_total", "cyc_total"};
  for (int h = 0; h < 6; ++h) loss.columns.push_back("adv_" + std::to_string(h + 1));
  for (int h = 0; h < 6; ++h) loss.columns.push_back("cyc_" + std::to_string(h + 1));
  for (std::size_t e = 0; e < result.history.size(); ++e) {
    std::vector<double> row{static_cast<double>(e + 1), result.history[e].adv_total,
                            result.history[e].cyc_total};
    for (double v : result.history[e].adv) row.push_back(v);
    for (double v : result.history[e].cyc) row.push_back(v);
    loss.rows.push_back(std::move(row));
  }
  loss.write(manifest.out_path("loss.csv"));
  manifest.write();
  return 0;
}

// ---------------------------------------------------------------------------
// generate

inline int cmd_generate(RunConfig& cfg) {
  const std::string out_dir = cfg.str("out");
  fs::create_directories(out_dir);
  Manifest manifest("generate", cfg, out_dir);
  const std::string ck_path = cfg.str("checkpoint");
  manifest.add_input(ck_path);
  const Checkpoint ck = load_checkpoint(ck_path);
  const TriDomain tri = load_tridomain(cfg, "images", "labels_file", manifest);

  const int rows = static_cast<int>(cfg.integer("rows"));
  const int steps = static_cast<int>(cfg.integer("steps"));
  const int init_label = static_cast<int>(cfg.integer("init_label"));
  const std::vector<Tensor> inits = domain_images(tri, init_label);
  if (static_cast<int>(inits.size()) < rows)
    throw ValueError("generate: only " + std::to_string(inits.size()) +
                     " images available for the initial column");

  fs::create_directories(fs::path(out_dir) / "pgm");
  std::vector<std::vector<Tensor>> grid;
  for (int r = 0; r < rows; ++r) {
    std::vector<Tensor> row{inits[r]};
    for (int s = 0; s < steps; ++s) row.push_back(infer(ck.G, row.back()));
    for (int c = 0; c <= steps; ++c) {
      char name[64];
      std::snprintf(name, sizeof(name), "pgm/row%02d_step%03d.pgm", r, c);
      report::write_pgm(manifest.out_path(name), row[c]);
    }
    grid.push_back(std::move(row));
  }
  report::write_image_grid_svg(manifest.out_path("grid.svg"), grid, 40,
                               "orbit of the generator, one sequence per row");
  manifest.write();
  return 0;
}

// ---------------------------------------------------------------------------
// lyapunov

inline std::unique_ptr<DynMap> make_benchmark(const std::string& name, const RunConfig& cfg) {
  if (name == "henon")
    return std::make_unique<HenonMap>(cfg.real("henon_a"), cfg.real("henon_b"));
  if (name == "logistic") return std::make_unique<LogisticMap>(cfg.real("logistic_r"));
  return nullptr;
}

// On-attractor initial conditions: sample a long orbit instead of drawing
// raw points, which can land outside the basin of attraction.
inline std::vector<std::vector<double>> benchmark_initials(const DynMap& map, int count,
                                                           std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> x0(map.dimension(), 0.1);
  const int spacing = 7;
  Trajectory t = iterate(map, x0, count * spacing, 1000 + rng.uniform_int(256));
  std::vector<std::vector<double>> out;
  for (int i = 0; i < count; ++i)
    out.push_back(t.states[static_cast<std::size_t>(i) * spacing]);
  return out;
}

inline int cmd_lyapunov(RunConfig& cfg) {
  const std::string out_dir = cfg.str("out");
  fs::create_directories(out_dir);
  Manifest manifest("lyapunov", cfg, out_dir);

  const std::string map_name = cfg.str("map");
  std::unique_ptr<DynMap> bench = make_benchmark(map_name, cfg);
  std::unique_ptr<GeneratorMap> gen_map;
  std::vector<std::vector<double>> initials;
  const int traj = static_cast<int>(cfg.integer("traj"));
  int transient = static_cast<int>(cfg.integer("transient"));
  int steps = static_cast<int>(cfg.integer("steps"));

  const DynMap* map = nullptr;
  if (bench) {
    map = bench.get();
    initials = benchmark_initials(*map, traj, static_cast<std::uint64_t>(cfg.integer("seed")));
  } else if (map_name == "checkpoint") {
    const std::string ck_path = cfg.str("checkpoint");
    manifest.add_input(ck_path);
    const Checkpoint ck = load_checkpoint(ck_path);
    gen_map = std::make_unique<GeneratorMap>(ck.G);
    map = gen_map.get();
    const TriDomain tri = load_tridomain(cfg, "images", "labels_file", manifest);
    const std::vector<Tensor> imgs = domain_images(tri, static_cast<int>(cfg.integer("init_label")));
    for (int i = 0; i < traj && i < static_cast<int>(imgs.size()); ++i)
      initials.push_back(gen_map->flatten(imgs[i]));
  } else {
    throw ConfigError("map must be checkpoint, henon or logistic, got \"" + map_name + "\"");
  }
  int m = static_cast<int>(cfg.integer("m"));
  if (m <= 0) m = std::min(map->dimension(), 32);

  const SpectrumEnsemble ens = spectrum_ensemble(*map, initials, transient, steps, m);
  const LyapunovDimension dim = lyapunov_dimension(ens.mean);

  report::CsvTable spec;
  spec.columns = {"index", "lambda_mean", "lambda_std"};
  for (int i = 0; i < m; ++i)
    spec.rows.push_back({static_cast<double>(i + 1), ens.mean[i], ens.stddev[i]});
  spec.write(manifest.out_path("spectrum.csv"));

  report::CsvTable per;
  per.columns = {"trajectory"};
  for (int i = 0; i < m; ++i) per.columns.push_back("lambda_" + std::to_string(i + 1));
  for (std::size_t t = 0; t < ens.per_trajectory.size(); ++t) {
    std::vector<double> row{static_cast<double>(t)};
    row.insert(row.end(), ens.per_trajectory[t].begin(), ens.per_trajectory[t].end());
    per.rows.push_back(std::move(row));
  }
  per.write(manifest.out_path("exponents.csv"));

  double sum = 0;
  for (double l : ens.mean) sum += l;
  report::CsvTable summary;
  summary.columns = {"metric", "value"};
  // metric ids: 0 lambda1_mean, 1 lambda1_std, 2 exponent_sum, 3 dimension,
  // 4 saturated, 5 trajectories_used, 6 trajectories_failed
  summary.rows = {{0, ens.mean[0]},
                  {1, ens.stddev[0]},
                  {2, sum},
                  {3, dim.value},
                  {4, dim.saturated ? 1.0 : 0.0},
                  {5, static_cast<double>(ens.per_trajectory.size())},
                  {6, static_cast<double>(ens.failed_indices.size())}};
  summary.write(manifest.out_path("summary.csv"));

  report::Plot plot;
  plot.title = "Lyapunov spectrum";
  plot.xlabel = "index";
  plot.ylabel = "exponent";
  report::Series mean_series;
  mean_series.label = "mean";
  for (int i = 0; i < m; ++i) {
    mean_series.x.push_back(i + 1);
    mean_series.y.push_back(ens.mean[i]);
  }
  report::Series zero;
  zero.color = "#999999";
  zero.width = 0.8;
  zero.x = {1.0, static_cast<double>(m)};
  zero.y = {0.0, 0.0};
  plot.series = {zero, mean_series};
  plot.write_svg(manifest.out_path("spectrum.svg"));

  for (int i = 0; i < std::min(m, 5); ++i) {
    std::vector<double> values;
    for (const auto& t : ens.per_trajectory) values.push_back(t[i]);
    report::Plot hist;
    hist.title = "exponent " + std::to_string(i + 1) + " across trajectories";
    hist.xlabel = "exponent";
    hist.ylabel = "count";
    hist.bars.push_back(report::make_histogram(values, 24));
    hist.write_svg(manifest.out_path("hist_lambda" + std::to_string(i + 1) + ".svg"));
  }

  std::fprintf(stderr,
               "lyapunov: lambda1 = %.6f +- %.6f, sum = %.4f, dimension = %.3f%s (%zu/%d ok)\n",
               ens.mean[0], ens.stddev[0], sum, dim.value, dim.saturated ? " (saturated)" : "",
               ens.per_trajectory.size(), traj);
  manifest.write();
  return 0;
}

// ---------------------------------------------------------------------------
// diverge

inline int cmd_diverge(RunConfig& cfg) {
  const std::string out_dir = cfg.str("out");
  fs::create_directories(out_dir);
  Manifest manifest("diverge", cfg, out_dir);

  const std::string map_name = cfg.str("map");
  std::unique_ptr<DynMap> bench = make_benchmark(map_name, cfg);
  std::unique_ptr<GeneratorMap> gen_map;
  const DynMap* map = nullptr;
  std::vector<std::vector<double>> base;
  const int traj = static_cast<int>(cfg.integer("traj"));
  const int transient = static_cast<int>(cfg.integer("transient"));
  const int steps = static_cast<int>(cfg.integer("steps"));
  const double epsilon = cfg.real("epsilon");

  if (bench) {
    map = bench.get();
    for (auto& x0 : benchmark_initials(*map, traj, static_cast<std::uint64_t>(cfg.integer("seed")))) {
      Trajectory t = iterate(*map, x0, 1, transient);
      base.push_back(t.states[0]);
    }
  } else if (map_name == "checkpoint") {
    const std::string ck_path = cfg.str("checkpoint");
    manifest.add_input(ck_path);
    const Checkpoint ck = load_checkpoint(ck_path);
    gen_map = std::make_unique<GeneratorMap>(ck.G);
    map = gen_map.get();
    const TriDomain tri = load_tridomain(cfg, "images", "labels_file", manifest);
    const std::vector<Tensor> imgs = domain_images(tri, static_cast<int>(cfg.integer("init_label")));
    const int n = std::min<int>(traj, static_cast<int>(imgs.size()));
    base.resize(n);
    std::exception_ptr err = nullptr;
#pragma omp parallel for schedule(dynamic)
    for (int i = 0; i < n; ++i) {
      try {
        Trajectory t = iterate(*map, gen_map->flatten(imgs[i]), 1, transient);
        base[i] = t.states[0];
      } catch (...) {
#pragma omp critical
        if (!err) err = std::current_exception();
      }
    }
    if (err) std::rethrow_exception(err);
  } else {
    throw ConfigError("map must be checkpoint, henon or logistic, got \"" + map_name + "\"");
  }

  const DivergenceCurve curve = direct_divergence(*map, base, epsilon, steps);

  report::CsvTable csv;
  csv.columns = {"step", "mean_log_distance"};
  for (std::size_t p = 0; p < curve.per_pair.size(); ++p)
    csv.columns.push_back("pair_" + std::to_string(p));
  for (int s = 0; s <= steps; ++s) {
    std::vector<double> row{static_cast<double>(s), curve.mean_log[s]};
    for (const auto& pair : curve.per_pair) row.push_back(pair[s]);
    csv.rows.push_back(std::move(row));
  }
  csv.write(manifest.out_path("divergence.csv"));

  report::CsvTable summary;
  summary.columns = {"metric", "value"};
  // metric ids: 0 slope, 1 fit_begin, 2 fit_end, 3 attractor_diameter, 4 pairs
  summary.rows = {{0, curve.slope},
                  {1, static_cast<double>(curve.fit_begin)},
                  {2, static_cast<double>(curve.fit_end)},
                  {3, curve.attractor_diameter},
                  {4, static_cast<double>(curve.per_pair.size())}};
  summary.write(manifest.out_path("summary.csv"));

  report::Plot plot;
  plot.title = "trajectory divergence";
  plot.xlabel = "step";
  plot.ylabel = "log distance";
  for (std::size_t p = 0; p < curve.per_pair.size(); p += std::max<std::size_t>(1, curve.per_pair.size() / 60)) {
    report::Series s;
    s.color = "#bbbbbb";
    s.width = 0.5;
    for (int i = 0; i <= steps; ++i) {
      s.x.push_back(i);
      s.y.push_back(curve.per_pair[p][i]);
    }
    plot.series.push_back(std::move(s));
  }
  report::Series mean;
  mean.label = "mean log distance";
  mean.color = "#1f77b4";
  mean.width = 2.0;
  for (int i = 0; i <= steps; ++i) {
    mean.x.push_back(i);
    mean.y.push_back(curve.mean_log[i]);
  }
  plot.series.push_back(std::move(mean));
  report::Series fitline;
  fitline.label = "fitted slope";
  fitline.color = "#2ca02c";
  fitline.width = 2.0;
  const double b0 = curve.mean_log[curve.fit_begin];
  for (int i = curve.fit_begin; i < curve.fit_end; ++i) {
    fitline.x.push_back(i);
    fitline.y.push_back(b0 + curve.slope * (i - curve.fit_begin));
  }
  plot.series.push_back(std::move(fitline));
  plot.write_svg(manifest.out_path("divergence.svg"));

  std::fprintf(stderr, "diverge: slope = %.6f over steps [%d, %d), %zu pairs\n", curve.slope,
               curve.fit_begin, curve.fit_end, curve.per_pair.size());
  manifest.write();
  return 0;
}

// ---------------------------------------------------------------------------
// pr

inline FeatureSet embed_with(const std::string& embedder, const Checkpoint& ck,
                             const std::vector<Tensor>& images) {
  if (embedder == "pixels") return embed_pixels(images);
  if (embedder == "disc:X") return embed_disc_feature(ck.DX, images);
  if (embedder == "disc:Y") return embed_disc_feature(ck.DY, images);
  if (embedder == "disc:Z") return embed_disc_feature(ck.DZ, images);
  throw ConfigError("embedder must be pixels or disc:X|Y|Z, got \"" + embedder + "\"");
}

inline int cmd_pr(RunConfig& cfg) {
  const std::string out_dir = cfg.str("out");
  fs::create_directories(out_dir);
  Manifest manifest("pr", cfg, out_dir);

  const int k_min = static_cast<int>(cfg.integer("k_min"));
  const int k_max = static_cast<int>(cfg.integer("k_max"));

  if (cfg.has("real_features") || cfg.has("gen_features")) {
    // external-feature path: compare two precomputed feature files
    const std::string rp = cfg.str("real_features");
    const std::string gp = cfg.str("gen_features");
    manifest.add_input(rp);
    manifest.add_input(gp);
    const FeatureSet real = load_features_csv(rp);
    const FeatureSet gen = load_features_csv(gp);
    report::CsvTable t;
    t.columns = {"k", "precision", "recall"};
    for (const PRResult& r : pr_vs_k(real, gen, k_min, k_max))
      t.rows.push_back({static_cast<double>(r.k), r.precision, r.recall});
    t.write(manifest.out_path("pr_vs_k.csv"));
    manifest.write();
    return 0;
  }

  const std::string ck_path = cfg.str("checkpoint");
  manifest.add_input(ck_path);
  const Checkpoint ck = load_checkpoint(ck_path);
  const TriDomain tri = load_tridomain(cfg, "images", "labels_file", manifest);
  const std::vector<Tensor> test_set = all_images(tri);
  const std::string embedder = cfg.str("embedder");
  const int init_label = static_cast<int>(cfg.integer("init_label"));
  const int trajectories = static_cast<int>(cfg.integer("trajectories"));
  const std::vector<Tensor> inits = domain_images(tri, init_label);

  // one orbit per initial condition, orbit length = test-set size
  const int M = static_cast<int>(test_set.size());
  const FeatureSet real = embed_with(embedder, ck, test_set);
  const int n_traj = std::min<int>(trajectories, static_cast<int>(inits.size()));
  std::vector<std::vector<PRResult>> per_traj(n_traj);
  std::exception_ptr err = nullptr;

#pragma omp parallel for schedule(dynamic)
  for (int t = 0; t < n_traj; ++t) {
    try {
      std::vector<Tensor> orbit;
      orbit.reserve(M);
      Tensor x = inits[t];
      for (int i = 0; i < M; ++i) {
        x = infer(ck.G, x);
        orbit.push_back(x);
      }
      per_traj[t] = pr_vs_k(real, embed_with(embedder, ck, orbit), k_min, k_max);
    } catch (...) {
#pragma omp critical
      if (!err) err = std::current_exception();
    }
  }
  if (err) std::rethrow_exception(err);

  report::CsvTable tk;
  tk.columns = {"k", "precision_mean", "precision_std", "recall_mean", "recall_std"};
  const int nk = k_max - k_min + 1;
  for (int ki = 0; ki < nk; ++ki) {
    double pm = 0, rm = 0, ps = 0, rs = 0;
    for (int t = 0; t < n_traj; ++t) {
      pm += per_traj[t][ki].precision;
      rm += per_traj[t][ki].recall;
    }
    pm /= n_traj;
    rm /= n_traj;
    for (int t = 0; t < n_traj; ++t) {
      ps += (per_traj[t][ki].precision - pm) * (per_traj[t][ki].precision - pm);
      rs += (per_traj[t][ki].recall - rm) * (per_traj[t][ki].recall - rm);
    }
    ps = n_traj > 1 ? std::sqrt(ps / (n_traj - 1)) : 0;
    rs = n_traj > 1 ? std::sqrt(rs / (n_traj - 1)) : 0;
    tk.rows.push_back({static_cast<double>(k_min + ki), pm, ps, rm, rs});
  }
  tk.write(manifest.out_path("pr_vs_k.csv"));

  report::Plot pk;
  pk.title = "precision and recall vs k";
  pk.xlabel = "k";
  pk.ylabel = "value";
  report::Series pser, rser;
  pser.label = "precision";
  pser.color = "#d62728";
  rser.label = "recall";
  rser.color = "#1f77b4";
  for (const auto& row : tk.rows) {
    pser.x.push_back(row[0]);
    pser.y.push_back(row[1]);
    rser.x.push_back(row[0]);
    rser.y.push_back(row[3]);
  }
  pk.series = {pser, rser};
  pk.write_svg(manifest.out_path("pr_vs_k.svg"));

  // step protocol on the whole test set
  const int k_step = static_cast<int>(cfg.integer("k_step"));
  const int steps = static_cast<int>(cfg.integer("steps"));
  std::vector<PRResult> rows;
  {
    std::vector<Tensor> cur = test_set;
    for (int s = 0; s <= steps; ++s) {
      if (s > 0) {
        std::exception_ptr step_err = nullptr;
#pragma omp parallel for schedule(static)
        for (int i = 0; i < M; ++i) {
          try {
            cur[i] = infer(ck.G, cur[i]);
          } catch (...) {
#pragma omp critical
            if (!step_err) step_err = std::current_exception();
          }
        }
        if (step_err) std::rethrow_exception(step_err);
      }
      rows.push_back(compute_pr(real, embed_with(embedder, ck, cur), k_step));
    }
  }
  report::CsvTable ts;
  ts.columns = {"step", "precision", "recall"};
  for (std::size_t s = 0; s < rows.size(); ++s)
    ts.rows.push_back({static_cast<double>(s), rows[s].precision, rows[s].recall});
  ts.write(manifest.out_path("pr_vs_step.csv"));

  report::Plot pst;
  pst.title = "precision and recall vs step (k = " + std::to_string(k_step) + ")";
  pst.xlabel = "step";
  pst.ylabel = "value";
  report::Series p2, r2;
  p2.label = "precision";
  p2.color = "#d62728";
  r2.label = "recall";
  r2.color = "#1f77b4";
  for (const auto& row : ts.rows) {
    p2.x.push_back(row[0]);
    p2.y.push_back(row[1]);
    r2.x.push_back(row[0]);
    r2.y.push_back(row[2]);
  }
  pst.series = {p2, r2};
  pst.write_svg(manifest.out_path("pr_vs_step.svg"));

  manifest.write();
  return 0;
}

// ---------------------------------------------------------------------------
// project

inline int cmd_project(RunConfig& cfg) {
  const std::string out_dir = cfg.str("out");
  fs::create_directories(out_dir);
  Manifest manifest("project", cfg, out_dir);

  const std::string ck_path = cfg.str("checkpoint");
  manifest.add_input(ck_path);
  const Checkpoint ck = load_checkpoint(ck_path);
  const TriDomain train_tri = load_tridomain(cfg, "train_images", "train_labels", manifest);
  const TriDomain test_tri = load_tridomain(cfg, "test_images", "test_labels", manifest);

  const int steps = static_cast<int>(cfg.integer("steps"));
  const int init_label = static_cast<int>(cfg.integer("init_label"));
  const std::vector<Tensor> inits = domain_images(test_tri, init_label);
  if (inits.empty()) throw ValueError("project: no initial images in the chosen domain");

  std::vector<Tensor> orbit;
  orbit.reserve(steps);
  Tensor x = inits[0];
  for (int i = 0; i < steps; ++i) {
    x = infer(ck.G, x);
    orbit.push_back(x);
  }

  const FeatureSet train_features = embed_pixels(all_images(train_tri));
  FeatureSet gen_features = embed_pixels(orbit);
  gen_features.source = "generated";
  save_features_csv(manifest.out_path("features_train.csv"), train_features);
  save_features_csv(manifest.out_path("features_generated.csv"), gen_features);

  const PcaResult pca = pca_project(train_features, 2);
  if (pca.rank_warning)
    std::fprintf(stderr, "project: warning, training features have rank %d < 2\n",
                 pca.effective_rank);
  const std::vector<double> gen_proj = pca_apply(pca, gen_features);

  report::CsvTable t;
  t.columns = {"x", "y", "set", "label"};  // set: 0,1,2 = train X,Y,Z; 3 = generated
  const LabeledImages* domains[3] = {&train_tri.X, &train_tri.Y, &train_tri.Z};
  int at = 0;
  for (int d = 0; d < 3; ++d)
    for (int i = 0; i < domains[d]->count(); ++i, ++at)
      t.rows.push_back({pca.projected[2 * at], pca.projected[2 * at + 1], static_cast<double>(d),
                        static_cast<double>(domains[d]->labels[i])});
  for (int i = 0; i < steps; ++i)
    t.rows.push_back({gen_proj[2 * i], gen_proj[2 * i + 1], 3.0, -1.0});
  t.write(manifest.out_path("projection.csv"));

  report::CsvTable ev;
  ev.columns = {"component", "explained_variance_ratio"};
  for (int r = 0; r < 2; ++r) ev.rows.push_back({static_cast<double>(r + 1), pca.explained_ratio[r]});
  ev.write(manifest.out_path("explained.csv"));

  report::Plot plot;
  plot.title = "training vs generated points, top principal plane";
  plot.xlabel = "pc1";
  plot.ylabel = "pc2";
  const char* colors[4] = {"#17becf", "#e377c2", "#2ca02c", "#9467bd"};
  const char* names[4] = {"train X", "train Y", "train Z", "generated"};
  std::array<report::Series, 4> sets;
  for (int i = 0; i < 4; ++i) {
    sets[i].label = names[i];
    sets[i].color = colors[i];
    sets[i].scatter = true;
    sets[i].width = 2.0;
  }
  at = 0;
  for (int d = 0; d < 3; ++d)
    for (int i = 0; i < domains[d]->count(); ++i, ++at) {
      sets[d].x.push_back(pca.projected[2 * at]);
      sets[d].y.push_back(pca.projected[2 * at + 1]);
    }
  for (int i = 0; i < steps; ++i) {
    sets[3].x.push_back(gen_proj[2 * i]);
    sets[3].y.push_back(gen_proj[2 * i + 1]);
  }
  for (auto& s : sets) plot.series.push_back(std::move(s));
  plot.write_svg(manifest.out_path("projection.svg"));

  manifest.write();
  return 0;
}

// ---------------------------------------------------------------------------
// entry point

inline int run(int argc, char** argv) {
  CLI::App app{"cyclic three-domain image translation and chaos analysis"};
  app.require_subcommand(1);

  struct Common {
    std::string config, out = "out", seed;
    std::vector<std::string> sets;
  };

  std::map<std::string, RunConfig> configs;
  std::map<std::string, Common> commons;
  std::map<std::string, std::map<std::string, std::string>> flag_values;

  auto add_common = [&](CLI::App* sub, const std::string& name) {
    Common& c = commons[name];
    sub->add_option("--config", c.config, "key=value configuration file");
    sub->add_option("--out", c.out, "output directory");
    sub->add_option("--seed", c.seed, "global seed override");
    sub->add_option("--set", c.sets, "override any config key, key=value")->take_all();
  };
  auto add_flag_option = [&](CLI::App* sub, const std::string& cmd, const std::string& flag,
                             const std::string& key, const std::string& help) {
    sub->add_option_function<std::string>(
        flag, [&flag_values, cmd, key](const std::string& v) { flag_values[cmd][key] = v; }, help);
  };

  // dataset
  {
    RunConfig& c = configs["dataset"];
    c.declare("kind", "synth");
    c.declare("size", "16");
    c.declare("train_per_class", "1000");
    c.declare("test_per_class", "200");
    c.declare("images", "");
    c.declare("labels_file", "");
    c.declare("seed", "1");
    c.declare("out", "");
    CLI::App* sub = app.add_subcommand("dataset", "generate the synthetic corpus or verify an IDX pair");
    add_common(sub, "dataset");
    add_flag_option(sub, "dataset", "--kind", "kind", "synth or import");
    add_flag_option(sub, "dataset", "--size", "size", "image size in pixels");
  }
  // train
  {
    RunConfig& c = configs["train"];
    c.declare("train_images", "");
    c.declare("train_labels", "");
    c.declare("labels", "0,1,2");
    declare_arch(c);
    c.declare("epochs", "300");
    c.declare("batch", "16");
    c.declare("lr", "0.0002");
    c.declare("beta1", "0.5");
    c.declare("beta2", "0.999");
    c.declare("lambda", "10");
    c.declare("eps_log", "1e-7");
    c.declare("eq7_last_term_discriminator", "as_printed");
    c.declare("checkpoint_interval", "50");
    c.declare("seed", "1");
    c.declare("out", "");
    CLI::App* sub = app.add_subcommand("train", "train the cyclic translation model");
    add_common(sub, "train");
    add_flag_option(sub, "train", "--epochs", "epochs", "training epochs");
    add_flag_option(sub, "train", "--lambda", "lambda", "cycle-consistency weight");
    add_flag_option(sub, "train", "--batch", "batch", "batch size");
  }
  // generate
  {
    RunConfig& c = configs["generate"];
    c.declare("checkpoint", "");
    c.declare("images", "");
    c.declare("labels_file", "");
    c.declare("labels", "0,1,2");
    c.declare("init_label", "0");
    c.declare("rows", "8");
    c.declare("steps", "12");
    c.declare("seed", "1");
    c.declare("out", "");
    CLI::App* sub = app.add_subcommand("generate", "iterate the generator and render image grids");
    add_common(sub, "generate");
    add_flag_option(sub, "generate", "--steps", "steps", "iterations per row");
    add_flag_option(sub, "generate", "--rows", "rows", "number of sequences");
    add_flag_option(sub, "generate", "--checkpoint", "checkpoint", "trained checkpoint");
  }
  // lyapunov
  {
    RunConfig& c = configs["lyapunov"];
    c.declare("map", "checkpoint");
    c.declare("checkpoint", "");
    c.declare("images", "");
    c.declare("labels_file", "");
    c.declare("labels", "0,1,2");
    c.declare("init_label", "0");
    c.declare("traj", "100");
    c.declare("transient", "500");
    c.declare("steps", "500");
    c.declare("m", "0");
    c.declare("henon_a", "1.4");
    c.declare("henon_b", "0.3");
    c.declare("logistic_r", "4.0");
    c.declare("seed", "1");
    c.declare("out", "");
    CLI::App* sub = app.add_subcommand("lyapunov", "estimate the Lyapunov spectrum and dimension");
    add_common(sub, "lyapunov");
    add_flag_option(sub, "lyapunov", "--map", "map", "checkpoint, henon or logistic");
    add_flag_option(sub, "lyapunov", "--checkpoint", "checkpoint", "trained checkpoint");
    add_flag_option(sub, "lyapunov", "--steps", "steps", "measured steps per trajectory");
    add_flag_option(sub, "lyapunov", "--transient", "transient", "discarded steps");
    add_flag_option(sub, "lyapunov", "--traj", "traj", "number of trajectories");
    add_flag_option(sub, "lyapunov", "--m", "m", "number of exponents (0 = min(N,32))");
  }
  // diverge
  {
    RunConfig& c = configs["diverge"];
    c.declare("map", "checkpoint");
    c.declare("checkpoint", "");
    c.declare("images", "");
    c.declare("labels_file", "");
    c.declare("labels", "0,1,2");
    c.declare("init_label", "0");
    c.declare("traj", "100");
    c.declare("transient", "500");
    c.declare("steps", "40");
    c.declare("epsilon", "1e-5");
    c.declare("henon_a", "1.4");
    c.declare("henon_b", "0.3");
    c.declare("logistic_r", "4.0");
    c.declare("seed", "1");
    c.declare("out", "");
    CLI::App* sub = app.add_subcommand("diverge", "largest exponent from direct trajectory divergence");
    add_common(sub, "diverge");
    add_flag_option(sub, "diverge", "--map", "map", "checkpoint, henon or logistic");
    add_flag_option(sub, "diverge", "--checkpoint", "checkpoint", "trained checkpoint");
    add_flag_option(sub, "diverge", "--epsilon", "epsilon", "perturbation strength");
    add_flag_option(sub, "diverge", "--steps", "steps", "steps to follow each pair");
    add_flag_option(sub, "diverge", "--transient", "transient", "discarded steps");
    add_flag_option(sub, "diverge", "--traj", "traj", "number of base points");
  }
  // pr
  {
    RunConfig& c = configs["pr"];
    c.declare("checkpoint", "");
    c.declare("images", "");
    c.declare("labels_file", "");
    c.declare("labels", "0,1,2");
    c.declare("init_label", "0");
    c.declare("k_min", "1");
    c.declare("k_max", "10");
    c.declare("k_step", "7");
    c.declare("steps", "15");
    c.declare("trajectories", "100");
    c.declare("embedder", "pixels");
    c.declare("real_features", "");
    c.declare("gen_features", "");
    c.declare("seed", "1");
    c.declare("out", "");
    CLI::App* sub = app.add_subcommand("pr", "manifold precision and recall sweeps");
    add_common(sub, "pr");
    add_flag_option(sub, "pr", "--checkpoint", "checkpoint", "trained checkpoint");
    add_flag_option(sub, "pr", "--k", "k_step", "k for the step sweep");
    add_flag_option(sub, "pr", "--steps", "steps", "steps in the step sweep");
    add_flag_option(sub, "pr", "--embedder", "embedder", "pixels or disc:X|Y|Z");
  }
  // project
  {
    RunConfig& c = configs["project"];
    c.declare("checkpoint", "");
    c.declare("train_images", "");
    c.declare("train_labels", "");
    c.declare("test_images", "");
    c.declare("test_labels", "");
    c.declare("labels", "0,1,2");
    c.declare("init_label", "0");
    c.declare("steps", "1000");
    c.declare("seed", "1");
    c.declare("out", "");
    CLI::App* sub = app.add_subcommand("project", "PCA scatter of training vs generated points");
    add_common(sub, "project");
    add_flag_option(sub, "project", "--checkpoint", "checkpoint", "trained checkpoint");
    add_flag_option(sub, "project", "--steps", "steps", "orbit length");
  }

  CLI11_PARSE(app, argc, argv);

  const std::string name = app.get_subcommands().front()->get_name();
  RunConfig& cfg = configs[name];
  const Common& common = commons[name];

  try {
    if (!common.config.empty()) cfg.load_file(common.config);
    for (const std::string& kv : common.sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got \"" + kv + "\"");
      cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    for (const auto& [key, value] : flag_values[name]) cfg.set(key, value);
    if (!common.seed.empty()) cfg.set("seed", common.seed);
    if (!common.out.empty()) cfg.set("out", common.out);
    if (cfg.str("out").empty()) throw ConfigError("an output directory is required (--out)");
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 1;
  }

  try {
    if (name == "dataset") return cmd_dataset(cfg);
    if (name == "train") return cmd_train(cfg);
    if (name == "generate") return cmd_generate(cfg);
    if (name == "lyapunov") return cmd_lyapunov(cfg);
    if (name == "diverge") return cmd_diverge(cfg);
    if (name == "pr") return cmd_pr(cfg);
    if (name == "project") return cmd_project(cfg);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 1;
}

}  // namespace ccgn::cli
