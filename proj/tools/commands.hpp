#pragma once

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mambastyle/blas.hpp"
#include "mambastyle/checkpoint.hpp"
#include "mambastyle/config.hpp"
#include "mambastyle/cost.hpp"
#include "mambastyle/image_io.hpp"
#include "mambastyle/metrics.hpp"
#include "mambastyle/pipeline.hpp"
#include "mambastyle/training.hpp"

namespace mambastyle::cli {

namespace fs = std::filesystem;
using Pair = training::TrainPair<float>;

struct Globals {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  int threads = 1;
};

inline PipelineConfig apply_overrides(PipelineConfig cfg, const Globals& g) {
  for (const auto& kv : g.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    cfg.set(PipelineConfig::trim(kv.substr(0, eq)), PipelineConfig::trim(kv.substr(eq + 1)));
  }
  if (g.seed) cfg.seed = *g.seed;
  cfg.validate();
  return cfg;
}

inline PipelineConfig resolve_config(const Globals& g) {
  auto cfg = g.config_path.empty() ? PipelineConfig{} : PipelineConfig::load(g.config_path);
  return apply_overrides(std::move(cfg), g);
}

/// Model rebuilt from a checkpoint's embedded config and weights.
inline Model load_model(const std::string& path) {
  const auto ck = checkpoint::load(path);
  Model m(PipelineConfig::parse(ck.config));
  checkpoint::restore(ck, m.inference_params());
  return m;
}

inline void write_image(const std::string& path, const Tensor& img) {
  if (path.size() >= 4 && path.compare(path.size() - 4, 4, ".png") == 0) {
    io::write_png(path, img);
  } else {
    io::write_blob(path, img, "image");
  }
}

/// d * scale with signed zeros folded to +0, so scale 0 is the zero direction.
inline Tensor scaled_direction(const Tensor& d, double scale) {
  Tensor out(d.shape());
  for (std::size_t i = 0; i < d.size(); ++i) out[i] = static_cast<float>(d[i] * scale) + 0.0f;
  return out;
}

// ---- datasets on disk ----------------------------------------------------

inline std::string pair_file(std::size_t i, const std::string& what) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%04zu_", i);
  return buf + what;
}

inline void save_dataset(const fs::path& dir, const std::vector<Pair>& data, const PipelineConfig& cfg) {
  fs::create_directories(dir);
  nlohmann::json index;
  index["config"] = cfg.to_text();
  index["pairs"] = nlohmann::json::array();
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& p = data[i];
    io::write_blob((dir / pair_file(i, "z.blob")).string(), p.z, "z");
    io::write_blob((dir / pair_file(i, "d.blob")).string(), p.d, "d");
    io::write_blob((dir / pair_file(i, "w.blob")).string(), p.w_plus, "w_plus");
    io::write_blob((dir / pair_file(i, "x.blob")).string(), p.x, "x");
    io::write_blob((dir / pair_file(i, "xe.blob")).string(), p.x_e, "x_e");
    io::write_png((dir / pair_file(i, "x.png")).string(), p.x);
    io::write_png((dir / pair_file(i, "xe.png")).string(), p.x_e);
    index["pairs"].push_back({{"id", i}, {"edit", p.is_edit()}});
  }
  std::ofstream(dir / "index.json") << index.dump(2) << '\n';
}

inline std::vector<Pair> load_dataset(const fs::path& dir) {
  std::ifstream f(dir / "index.json");
  if (!f) throw ConfigError("no index.json in " + dir.string());
  nlohmann::json index;
  try {
    index = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError(std::string("index.json: ") + e.what());
  }
  std::vector<Pair> out;
  for (std::size_t i = 0; i < index.at("pairs").size(); ++i) {
    Pair p;
    p.z = io::read_blob((dir / pair_file(i, "z.blob")).string());
    p.d = io::read_blob((dir / pair_file(i, "d.blob")).string());
    p.w_plus = io::read_blob((dir / pair_file(i, "w.blob")).string());
    p.w_plus_e = p.w_plus;
    for (std::size_t j = 0; j < p.d.size(); ++j) p.w_plus_e[j] += p.d[j];
    p.x = io::read_blob((dir / pair_file(i, "x.blob")).string());
    p.x_e = io::read_blob((dir / pair_file(i, "xe.blob")).string());
    out.push_back(std::move(p));
  }
  if (out.empty()) throw ConfigError("dataset " + dir.string() + " is empty");
  return out;
}

inline std::vector<Pair> dataset_for(const Model& m, const std::string& data_dir, std::size_t split) {
  if (!data_dir.empty()) return load_dataset(data_dir);
  return training::synth_dataset(m, m.config().pairs, Rng(m.config().seed).split(split));
}

// Split streams: 4 is the training set, 6 a held-out set.
inline constexpr std::size_t kTrainSplit = 4;
inline constexpr std::size_t kTestSplit = 6;

// ---- tables ----------------------------------------------------------------

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  [[nodiscard]] std::string csv() const {
    std::string out;
    auto line = [&out](const std::vector<std::string>& r) {
      for (std::size_t i = 0; i < r.size(); ++i) out += (i ? "," : "") + r[i];
      out += '\n';
    };
    line(header);
    for (const auto& r : rows) line(r);
    return out;
  }

  [[nodiscard]] std::string text() const {
    std::vector<std::size_t> width(header.size());
    for (std::size_t i = 0; i < header.size(); ++i) width[i] = header[i].size();
    for (const auto& r : rows) {
      for (std::size_t i = 0; i < r.size(); ++i) width[i] = std::max(width[i], r[i].size());
    }
    std::ostringstream os;
    auto line = [&](const std::vector<std::string>& r) {
      for (std::size_t i = 0; i < r.size(); ++i) {
        os << (i ? "  " : "") << (i ? std::right : std::left) << std::setw(static_cast<int>(width[i])) << r[i];
      }
      os << '\n';
    };
    line(header);
    std::size_t total = 0;
    for (auto w : width) total += w;
    os << std::string(total + 2 * (width.size() - 1), '-') << '\n';
    for (const auto& r : rows) line(r);
    return os.str();
  }
};

inline std::string num(double v, int digits = 4) {
  std::ostringstream os;
  os << std::setprecision(digits) << v;
  return os.str();
}

inline void emit(const Table& t, const std::string& csv_path) {
  std::cout << t.text();
  if (!csv_path.empty()) {
    std::ofstream f(csv_path);
    if (!f) throw ConfigError("cannot write " + csv_path);
    f << t.csv();
  }
}

// ---- evaluation --------------------------------------------------------------

struct Report {
  double lpips_proxy = 0.0;
  double l2 = 0.0;
  double fid_proxy = 0.0;
  double ms_ssim = 0.0;
  double loss_edit = 0.0;
  std::vector<double> edit_fd;  // one per evaluated bank direction
  cost::CostReport cost;
};

/// Inversion scores, inversion FD, per-direction editing FD and cost on `data`.
inline Report evaluate_report(const Model& m, const std::vector<Pair>& data, std::size_t directions,
                              metrics::Reference against, std::size_t trials) {
  Report r;
  const auto summary = training::evaluate(m, data);
  r.lpips_proxy = summary.inversion_perceptual;
  r.l2 = summary.inversion_mse;
  r.ms_ssim = summary.inversion_ms_ssim;
  r.loss_edit = summary.loss_edit;

  std::vector<Tensor> real, inverted, latents;
  for (const auto& p : data) {
    real.push_back(p.x);
    inverted.push_back(m.invert(p.x));
    latents.push_back(p.w_plus);
  }
  r.fid_proxy = metrics::frechet_distance(metrics::image_stats(real, m.features()),
                                          metrics::image_stats(inverted, m.features()));

  const auto& cfg = m.config();
  for (std::size_t k = 0; k < std::min(directions, m.bank().size()); ++k) {
    const auto split = metrics::split_by_attribute(latents, m.bank().unit(k));
    std::vector<Tensor> set_a, set_b;
    for (auto i : split[0]) set_a.push_back(real[i]);
    for (auto i : split[1]) set_b.push_back(real[i]);
    const auto d = m.bank().direction(k, cfg.edit_norm_max);
    if (set_b.empty() || (against == metrics::Reference::other && set_a.empty())) {
      r.edit_fd.push_back(std::numeric_limits<double>::quiet_NaN());
      continue;
    }
    r.edit_fd.push_back(metrics::editing_quality(set_a, set_b, m, d, against));
  }
  r.cost = cost::measure(m, trials, trials > 0 ? 5 : 0);
  return r;
}

inline std::vector<std::string> report_header(std::size_t directions) {
  std::vector<std::string> h = {"method", "LPIPS-proxy", "L2", "FID-proxy", "MS-SSIM", "loss_edit"};
  for (std::size_t k = 0; k < directions; ++k) h.push_back("edit-FID-proxy(+d" + std::to_string(k) + ")");
  for (const char* c : {"params(M)", "GMACs", "time(s)"}) h.emplace_back(c);
  return h;
}

inline std::vector<std::string> report_row(const std::string& name, const Report& r) {
  std::vector<std::string> row = {name, num(r.lpips_proxy), num(r.l2), num(r.fid_proxy), num(r.ms_ssim),
                                  num(r.loss_edit)};
  for (double fd : r.edit_fd) row.push_back(num(fd));
  row.push_back(num(static_cast<double>(r.cost.params) / 1e6));
  row.push_back(num(r.cost.gmacs()));
  row.push_back(num(r.cost.latency_ms / 1000.0));
  return row;
}

// ---- commands ----------------------------------------------------------------

inline void train_model(Model& m, const std::vector<Pair>& data, std::size_t steps, const std::string& log_path) {
  std::ofstream log;
  training::TrainOptions opt;
  opt.steps = steps;
  if (!log_path.empty()) {
    log.open(log_path);
    if (!log) throw ConfigError("cannot write " + log_path);
    opt.log = &log;
  }
  const std::size_t every = std::max<std::size_t>(1, steps / 20);
  opt.on_step = [&](std::size_t step, const training::StepStats& s) {
    if ((step + 1) % every == 0 || step + 1 == steps) {
      std::cerr << "step " << step + 1 << "/" << steps << " loss " << s.loss << " rec " << s.rec << " edit "
                << s.edit << '\n';
    }
  };
  training::train(m, data, opt);
}

inline int run(int argc, char** argv) {
  CLI::App app{"Latent inversion and editing with selective state-space encoders"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config_path, "key=value config file")->check(CLI::ExistingFile);
  app.add_option("--set", g.overrides, "override one config key (key=value), repeatable");
  app.add_option("--seed", g.seed, "training and sampling seed");
  app.add_option("--threads", g.threads, "BLAS threads; 1 keeps results reproducible")->check(CLI::PositiveNumber);

  std::string out, data_dir, model_path, input, direction_path, log_path, csv_path;
  std::size_t steps = 0, pairs = 0, directions = 2, trials = 30;
  double scale = 1.0;
  bool against_a = false;
  std::vector<std::size_t> lengths = {256, 1024, 4096};
  std::size_t channels = 32, states = 16;

  auto* gen = app.add_subcommand("gen-data", "synthesize (X, X_e, w+, d) pairs");
  gen->add_option("--out", out, "output directory")->required();
  gen->add_option("--pairs", pairs, "number of pairs (default: config)");

  auto* train = app.add_subcommand("train", "train encoder and fuser");
  train->add_option("--out", out, "checkpoint path")->required();
  train->add_option("--data", data_dir, "dataset from gen-data (default: synthesize)");
  train->add_option("--steps", steps, "training steps (default: config)");
  train->add_option("--log", log_path, "JSON-lines training log");

  auto* invert = app.add_subcommand("invert", "reconstruct an image");
  invert->add_option("--model", model_path, "checkpoint")->required()->check(CLI::ExistingFile);
  invert->add_option("--input", input, "image (.png or blob)")->required()->check(CLI::ExistingFile);
  invert->add_option("--out", out, "output (.png or blob)")->required();

  auto* edit = app.add_subcommand("edit", "reconstruct an image with a latent direction");
  edit->add_option("--model", model_path, "checkpoint")->required()->check(CLI::ExistingFile);
  edit->add_option("--input", input, "image (.png or blob)")->required()->check(CLI::ExistingFile);
  edit->add_option("--direction", direction_path, "direction blob [layers, d_w]")->required()->check(
      CLI::ExistingFile);
  edit->add_option("--scale", scale, "direction multiplier");
  edit->add_option("--out", out, "output (.png or blob)")->required();

  auto* direction = app.add_subcommand("direction", "export a bank direction as a blob");
  std::size_t index = 0;
  double norm = 1.0;
  direction->add_option("--model", model_path, "checkpoint")->required()->check(CLI::ExistingFile);
  direction->add_option("--index", index, "bank index");
  direction->add_option("--norm", norm, "per-row norm");
  direction->add_option("--out", out, "blob path")->required();

  auto* eval = app.add_subcommand("eval", "inversion, editing and cost report");
  eval->add_option("--model", model_path, "checkpoint")->required()->check(CLI::ExistingFile);
  eval->add_option("--data", data_dir, "dataset from gen-data (default: synthesized held-out set)");
  eval->add_option("--directions", directions, "bank directions used for editing FD");
  eval->add_option("--trials", trials, "timed latency trials");
  eval->add_flag("--against-a", against_a, "editing FD against the attribute set A instead of B");
  eval->add_option("--csv", csv_path, "also write the table as CSV");

  auto* bench = app.add_subcommand("bench", "cost report and scan scaling table");
  bench->add_option("--lengths", lengths, "scan lengths")->delimiter(',');
  bench->add_option("--channels", channels, "scan channels");
  bench->add_option("--states", states, "scan states");
  bench->add_option("--trials", trials, "timed trials");
  bench->add_option("--csv", csv_path, "also write the scaling table as CSV");

  auto* ablate = app.add_subcommand("ablate", "train and compare the ablation variants");
  ablate->add_option("--steps", steps, "training steps per variant (default: config)");
  ablate->add_option("--directions", directions, "bank directions used for editing FD");
  ablate->add_option("--trials", trials, "timed latency trials");
  ablate->add_option("--csv", csv_path, "also write the table as CSV");

  for (auto* sub : app.get_subcommands({})) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    blas::set_threads(g.threads);
    if (*gen) {
      const auto cfg = resolve_config(g);
      Model m(cfg);
      const auto data = training::synth_dataset(m, pairs ? pairs : cfg.pairs, Rng(cfg.seed).split(kTrainSplit));
      save_dataset(out, data, cfg);
      std::cout << "wrote " << data.size() << " pairs to " << out << '\n';
    } else if (*train) {
      const auto cfg = resolve_config(g);
      Model m(cfg);
      const auto data = dataset_for(m, data_dir, kTrainSplit);
      const std::size_t n = steps ? steps : cfg.steps;
      train_model(m, data, n, log_path);
      auto ck = checkpoint::capture(m.inference_params(), cfg.to_text());
      ck.meta["steps"] = n;
      ck.meta["pairs"] = data.size();
      checkpoint::save(out, ck);
      const auto s = training::evaluate(m, data);
      std::cout << "train mse " << s.inversion_mse << " ms-ssim " << s.inversion_ms_ssim << " loss_edit "
                << s.loss_edit << '\n';
    } else if (*invert) {
      const auto m = load_model(model_path);
      write_image(out, m.invert(io::read_image(input)));
    } else if (*edit) {
      const auto m = load_model(model_path);
      const auto d = io::read_blob(direction_path);
      if (d.shape() != m.latent_shape()) {
        throw ShapeError("direction is " + shape_str(d.shape()) + ", model expects " + shape_str(m.latent_shape()));
      }
      write_image(out, m.edit(io::read_image(input), scaled_direction(d, scale)));
    } else if (*direction) {
      const auto m = load_model(model_path);
      if (index >= m.bank().size()) throw ConfigError("direction index out of range");
      io::write_blob(out, m.bank().direction(index, norm), "direction");
    } else if (*eval) {
      const auto m = load_model(model_path);
      const auto data = dataset_for(m, data_dir, kTestSplit);
      const auto against = against_a ? metrics::Reference::other : metrics::Reference::source;
      const auto r = evaluate_report(m, data, directions, against, trials);
      Table t{report_header(r.edit_fd.size()), {report_row("MambaStyle", r)}};
      emit(t, csv_path);
    } else if (*bench) {
      const auto cfg = resolve_config(g);
      Model m(cfg);
      const auto c = cost::measure(m, trials, 5);
      std::cout << "params " << c.params << "  GMACs " << num(c.gmacs(), 6) << "  latency_ms "
                << num(c.latency_ms) << "  (MACs per scan state: " << cost::kScanMacsPerState << ")\n\n";
      Table t{{"L", "median_ms", "ratio"}, {}};
      for (const auto& row : cost::scan_scaling(lengths, channels, states, cfg.scan_algo, trials, 5)) {
        t.rows.push_back({std::to_string(row.length), num(row.median_ms), row.ratio > 0 ? num(row.ratio) : "-"});
      }
      emit(t, csv_path);
    } else if (*ablate) {
      const auto base = resolve_config(g);
      struct Variant {
        const char* name;
        void (*apply)(PipelineConfig&);
      };
      const Variant variants[] = {
          {"Base (conv encoder)", [](PipelineConfig& c) { c.disable_vssm = true; }},
          {"ViT blocks", [](PipelineConfig& c) { c.vit_blocks = true; }},
          {"W/o Fuser", [](PipelineConfig& c) { c.disable_fuser = true; }},
          {"W/o SS2D", [](PipelineConfig& c) { c.disable_ss2d = true; }},
          {"W/o L_e", [](PipelineConfig& c) { c.disable_loss_edit = true; }},
          {"MambaStyle", [](PipelineConfig&) {}},
      };
      Table t{report_header(std::min(directions, base.bank_size)), {}};
      for (const auto& v : variants) {
        auto cfg = base;
        v.apply(cfg);
        Model m(cfg);
        const auto train_set = training::synth_dataset(m, cfg.pairs, Rng(cfg.seed).split(kTrainSplit));
        std::cerr << "== " << v.name << '\n';
        train_model(m, train_set, steps ? steps : cfg.steps, "");
        const auto test_set = training::synth_dataset(m, cfg.pairs, Rng(cfg.seed).split(kTestSplit));
        t.rows.push_back(report_row(v.name, evaluate_report(m, test_set, directions, metrics::Reference::source,
                                                            trials)));
      }
      emit(t, csv_path);
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}

}  // namespace mambastyle::cli
