#pragma once

#include <charconv>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mambastyle/errors.hpp"
#include "mambastyle/ssm.hpp"

namespace mambastyle {

enum class LrSchedule { constant, cosine };

/// Every hyperparameter of the pipeline. Defaults describe the R=64 desk
/// configuration; `tiny()` is the R=16 one used by gradient checks.
struct PipelineConfig {
  // generator
  std::size_t d_z = 64;
  std::size_t d_w = 64;
  std::size_t layers = 10;  // L_g
  std::size_t resolution = 64;
  std::vector<std::size_t> gen_channels = {64, 64, 48, 32, 16};  // per resolution 4, 8, ...
  std::size_t inject_layer = 7;
  bool noise = false;

  // encoder
  std::vector<std::size_t> enc_channels = {32, 64, 128};
  std::size_t enc_stem = 16;
  std::size_t patch = 8;
  std::size_t states = 8;
  std::size_t expand = 1;
  bool shared_routes = false;

  // fuser
  std::size_t fuser_channels = 32;

  // selective scan
  ssm::ZohMode zoh = ssm::ZohMode::simplified;
  ssm::ScanAlgo scan_algo = ssm::ScanAlgo::sequential;

  // direction bank
  std::size_t bank_size = 8;
  double edit_norm_min = 0.5;
  double edit_norm_max = 2.0;

  // training
  std::size_t pairs = 64;
  std::size_t steps = 5000;
  std::size_t batch = 4;
  double lr = 2e-4;
  LrSchedule lr_schedule = LrSchedule::cosine;
  std::size_t warmup = 100;
  double grad_clip = 1.0;  // joint gradient norm bound, 0 = off
  double beta1 = 0.9;
  double beta2 = 0.999;
  double p_inv = 0.5;
  double lambda_rec = 1.0;
  double lambda_perc = 0.8;
  double lambda_id = 0.0;
  double lambda_struct = 0.0;
  double lambda_edit = 1.0;

  // seeds
  std::uint64_t seed = 1;
  std::uint64_t generator_seed = 1234;
  std::uint64_t feature_seed = 4321;

  // ablations
  bool disable_fuser = false;
  bool disable_ss2d = false;
  bool disable_loss_edit = false;
  bool disable_vssm = false;
  bool vit_blocks = false;

  static PipelineConfig tiny() {
    PipelineConfig c;
    c.d_z = 8;
    c.d_w = 8;
    c.layers = 5;
    c.resolution = 16;
    c.gen_channels = {6, 5, 4};
    c.inject_layer = 3;
    c.enc_channels = {4, 6, 8};
    c.enc_stem = 3;
    c.states = 4;
    c.fuser_channels = 4;
    c.bank_size = 2;
    c.pairs = 4;
    c.batch = 2;
    return c;
  }

  // ---- derived geometry -------------------------------------------------

  [[nodiscard]] std::size_t layer_resolution(std::size_t i) const { return std::size_t{4} << (i / 2); }
  [[nodiscard]] std::size_t layer_channels(std::size_t i) const { return gen_channels.at(i / 2); }
  [[nodiscard]] std::size_t resolutions() const { return (layers + 1) / 2; }
  [[nodiscard]] std::size_t h3_side() const { return resolution / 16; }

  /// Style rows produced by encoder heads 1..3 (coarse, middle, fine).
  [[nodiscard]] std::vector<std::size_t> head_rows() const {
    const std::size_t third = layers / 3;
    return {third, third, layers - 2 * third};
  }

  /// Throws ConfigError on any violated cross-module contract.
  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("config: " + m); };
    if (layers < 3) fail("layers must be >= 3");
    if (d_z == 0 || d_w == 0 || states == 0 || expand == 0 || fuser_channels == 0 || enc_stem == 0) {
      fail("dimensions must be positive");
    }
    if (resolution != layer_resolution(layers - 1)) {
      fail("resolution " + std::to_string(resolution) + " does not match " + std::to_string(layers) +
           " generator layers (expected " + std::to_string(layer_resolution(layers - 1)) + ")");
    }
    if (gen_channels.size() != resolutions()) {
      fail("gen_channels needs one entry per resolution (" + std::to_string(resolutions()) + ")");
    }
    for (auto c : gen_channels) {
      if (c == 0) fail("gen_channels entries must be positive");
    }
    if (inject_layer < 1 || inject_layer >= layers) fail("inject_layer must satisfy 1 <= k < layers");
    if (enc_channels.size() != 3) fail("enc_channels needs three stage widths");
    for (auto c : enc_channels) {
      if (c == 0) fail("enc_channels entries must be positive");
    }
    if (resolution % 16 != 0) fail("resolution must be a multiple of 16");
    if (patch == 0 || resolution % patch != 0) fail("patch size must divide the resolution");
    if (resolution / patch != resolution / 8) fail("patch grid must match the stride-8 feature map (patch = 8)");
    const std::size_t cells = h3_side() * h3_side();
    if (d_w % cells != 0 || !is_pow2(d_w / cells)) {
      fail("d_w / (H3*W3) must be a power of two for the direction branch");
    }
    const std::size_t rk = layer_resolution(inject_layer);
    if (rk < h3_side() || rk % h3_side() != 0 || !is_pow2(rk / h3_side())) {
      fail("injection resolution must be a power-of-two multiple of the H3 grid");
    }
    if (edit_norm_min < 0.0 || edit_norm_max < edit_norm_min) fail("edit norm range invalid");
    if (bank_size == 0 || bank_size > d_w) fail("bank_size must be in [1, d_w]");
    if (p_inv < 0.0 || p_inv > 1.0) fail("p_inv must be in [0, 1]");
    if (batch == 0 || pairs == 0) fail("batch and pairs must be positive");
    for (double l : {lambda_rec, lambda_perc, lambda_id, lambda_struct, lambda_edit}) {
      if (l < 0.0) fail("loss weights must be nonnegative");
    }
    if (lambda_id != 0.0 || lambda_struct != 0.0) fail("lambda_id and lambda_struct need proxy models; keep them 0");
    if (grad_clip < 0.0) fail("grad_clip must be nonnegative");
    if (lr < 0.0 || beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) fail("optimizer settings invalid");
    if (disable_vssm && vit_blocks) fail("disable_vssm and vit_blocks are exclusive");
  }

  // ---- key=value persistence -------------------------------------------

  /// Applies one `key=value` assignment.
  void set(const std::string& key, const std::string& value);

  /// All settings as sorted `key=value` lines.
  [[nodiscard]] std::string to_text() const;

  static PipelineConfig parse(const std::string& text) { return parse(text, PipelineConfig()); }

  static PipelineConfig parse(const std::string& text, PipelineConfig base) {
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
      }
      base.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return base;
  }

  static PipelineConfig load(const std::string& path) { return load(path, PipelineConfig()); }

  static PipelineConfig load(const std::string& path, PipelineConfig base) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse(ss.str(), std::move(base));
  }

  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

 private:
  static bool is_pow2(std::size_t v) { return v != 0 && (v & (v - 1)) == 0; }

  struct Field {
    std::function<void(PipelineConfig&, const std::string&)> set;
    std::function<std::string(const PipelineConfig&)> get;
  };
  static const std::map<std::string, Field>& fields();
};

namespace config_detail {

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty()) {
    throw ConfigError("config: " + key + " expects a nonnegative integer, got '" + v + "'");
  }
  return out;
}

inline double parse_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) {
    throw ConfigError("config: " + key + " expects a number, got '" + v + "'");
  }
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config: " + key + " expects true/false, got '" + v + "'");
}

inline std::vector<std::size_t> parse_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    out.push_back(parse_uint(key, PipelineConfig::trim(item)));
  }
  if (out.empty()) throw ConfigError("config: " + key + " expects a comma-separated list");
  return out;
}

inline std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline std::string format_list(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    s += (i ? "," : "") + std::to_string(v[i]);
  }
  return s;
}

}  // namespace config_detail

inline const std::map<std::string, PipelineConfig::Field>& PipelineConfig::fields() {
  using namespace config_detail;
  using C = PipelineConfig;
  static const std::map<std::string, Field> table = [] {
    std::map<std::string, Field> t;
    auto size_field = [&t](const std::string& k, std::size_t C::*m) {
      t[k] = {[k, m](C& c, const std::string& v) { c.*m = parse_uint(k, v); },
              [m](const C& c) { return std::to_string(c.*m); }};
    };
    auto u64_field = [&t](const std::string& k, std::uint64_t C::*m) {
      t[k] = {[k, m](C& c, const std::string& v) { c.*m = parse_uint(k, v); },
              [m](const C& c) { return std::to_string(c.*m); }};
    };
    auto real_field = [&t](const std::string& k, double C::*m) {
      t[k] = {[k, m](C& c, const std::string& v) { c.*m = parse_double(k, v); },
              [m](const C& c) { return format_double(c.*m); }};
    };
    auto bool_field = [&t](const std::string& k, bool C::*m) {
      t[k] = {[k, m](C& c, const std::string& v) { c.*m = parse_bool(k, v); },
              [m](const C& c) { return std::string(c.*m ? "true" : "false"); }};
    };
    auto list_field = [&t](const std::string& k, std::vector<std::size_t> C::*m) {
      t[k] = {[k, m](C& c, const std::string& v) { c.*m = parse_list(k, v); },
              [m](const C& c) { return format_list(c.*m); }};
    };
    size_field("d_z", &C::d_z);
    size_field("d_w", &C::d_w);
    size_field("layers", &C::layers);
    size_field("resolution", &C::resolution);
    list_field("gen_channels", &C::gen_channels);
    size_field("inject_layer", &C::inject_layer);
    bool_field("noise", &C::noise);
    list_field("enc_channels", &C::enc_channels);
    size_field("enc_stem", &C::enc_stem);
    size_field("patch", &C::patch);
    size_field("states", &C::states);
    size_field("expand", &C::expand);
    bool_field("shared_routes", &C::shared_routes);
    size_field("fuser_channels", &C::fuser_channels);
    t["zoh"] = {[](C& c, const std::string& v) {
                  if (v == "exact") c.zoh = ssm::ZohMode::exact;
                  else if (v == "simplified") c.zoh = ssm::ZohMode::simplified;
                  else throw ConfigError("config: zoh expects exact|simplified, got '" + v + "'");
                },
                [](const C& c) { return std::string(c.zoh == ssm::ZohMode::exact ? "exact" : "simplified"); }};
    t["scan_algo"] = {[](C& c, const std::string& v) {
                        if (v == "sequential") c.scan_algo = ssm::ScanAlgo::sequential;
                        else if (v == "parallel") c.scan_algo = ssm::ScanAlgo::parallel;
                        else throw ConfigError("config: scan_algo expects sequential|parallel, got '" + v + "'");
                      },
                      [](const C& c) {
                        return std::string(c.scan_algo == ssm::ScanAlgo::parallel ? "parallel" : "sequential");
                      }};
    size_field("bank_size", &C::bank_size);
    real_field("edit_norm_min", &C::edit_norm_min);
    real_field("edit_norm_max", &C::edit_norm_max);
    size_field("pairs", &C::pairs);
    size_field("steps", &C::steps);
    size_field("batch", &C::batch);
    real_field("lr", &C::lr);
    t["lr_schedule"] = {[](C& c, const std::string& v) {
                          if (v == "constant") c.lr_schedule = LrSchedule::constant;
                          else if (v == "cosine") c.lr_schedule = LrSchedule::cosine;
                          else throw ConfigError("config: lr_schedule expects constant|cosine, got '" + v + "'");
                        },
                        [](const C& c) {
                          return std::string(c.lr_schedule == LrSchedule::cosine ? "cosine" : "constant");
                        }};
    size_field("warmup", &C::warmup);
    real_field("grad_clip", &C::grad_clip);
    real_field("beta1", &C::beta1);
    real_field("beta2", &C::beta2);
    real_field("p_inv", &C::p_inv);
    real_field("lambda_rec", &C::lambda_rec);
    real_field("lambda_perc", &C::lambda_perc);
    real_field("lambda_id", &C::lambda_id);
    real_field("lambda_struct", &C::lambda_struct);
    real_field("lambda_edit", &C::lambda_edit);
    u64_field("seed", &C::seed);
    u64_field("generator_seed", &C::generator_seed);
    u64_field("feature_seed", &C::feature_seed);
    bool_field("disable_fuser", &C::disable_fuser);
    bool_field("disable_ss2d", &C::disable_ss2d);
    bool_field("disable_loss_edit", &C::disable_loss_edit);
    bool_field("disable_vssm", &C::disable_vssm);
    bool_field("vit_blocks", &C::vit_blocks);
    return t;
  }();
  return table;
}

inline void PipelineConfig::set(const std::string& key, const std::string& value) {
  const auto& f = fields();
  auto it = f.find(key);
  if (it == f.end()) {
    throw ConfigError("config: unknown key '" + key + "'");
  }
  it->second.set(*this, value);
}

inline std::string PipelineConfig::to_text() const {
  std::string out;
  for (const auto& [k, f] : fields()) {
    out += k + "=" + f.get(*this) + "\n";
  }
  return out;
}

}  // namespace mambastyle
