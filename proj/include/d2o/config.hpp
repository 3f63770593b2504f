#pragma once

#include <fstream>
#include <sstream>
#include <variant>

#include "d2o/common.hpp"

namespace d2o {

// Flat key = value text config with dotted section prefixes. Unknown keys
// are errors; parse(serialize(c)) == c.
struct RunConfig {
  // model.*
  int64_t model_img_size = 16;
  int64_t model_channels = 1;
  int64_t model_base_width = 32;
  int64_t model_levels = 2;
  int64_t model_blocks_per_level = 2;
  bool model_attention = true;
  int64_t model_temb_dim = 64;
  int64_t model_num_classes = 4;

  // sched.* / precond.*
  int64_t sched_steps = 18;
  double sched_rho = 7.0;
  double sched_sigma_min = 0.002;
  double sched_sigma_max = 80.0;
  double precond_sigma_data = 0.5;
  double precond_eps = 0.002;

  // train.*
  double train_lr_g = 1e-4;
  double train_lr_d = 1e-4;
  double train_beta1 = 0.0;
  double train_beta2 = 0.99;
  int64_t train_batch = 64;
  double train_gamma_r1 = 1e-4;
  double train_ema_halflife = 50000;
  double train_ema_warmup = 0.05;
  int64_t train_images = 200000;
  double train_lambda_cd = 0.0;
  bool train_augment = false;
  bool train_conditional = false;
  bool train_tune_norm = true;
  bool train_tune_conv = true;
  bool train_tune_qkv = true;
  bool train_tune_skip = true;
  int64_t train_eval_interval = 16000;
  int64_t train_eval_n = 512;
  int64_t train_final_eval_n = 2000;
  double train_target_frechet = 0.0;  // >0: stop once the EMA model reaches it
  int64_t train_inject_nan_at = -1;   // fault-injection hook for tests
  int64_t train_gen_steps = 1;        // k-step generator for divergence teachers
  double train_sigma_mid = -1.0;      // two-step intermediate sigma override
  bool train_scratch = false;         // ignore the initial checkpoint weights

  // data.*
  std::string data_path = "data.d2od";
  int64_t data_n = 20000;
  int64_t data_seed = 1;

  // feat.*
  std::string feat_path = "feat.ckpt";
  int64_t feat_epochs = 8;
  double feat_lr = 1e-3;
  double feat_accuracy_target = 0.90;

  // paths.*
  std::string paths_init = "";
  std::string paths_score = "";

  // eval.*
  int64_t eval_steps = 1;
  std::string eval_solver = "euler";
  int64_t eval_n = 2000;
  int64_t eval_trace_batch = 128;

  // study.*
  std::string study_steps = "1,2,4";
  int64_t study_budget = 48000;
  double study_quality_band = 8.0;  // multiple of the real-halves floor
  int64_t study_seeds = 3;
  std::string study_sigma_mids = "0.05,0.5,5,40";

  bool operator==(const RunConfig&) const = default;
};

namespace detail_cfg {

struct Field {
  std::string key;
  std::variant<int64_t RunConfig::*, double RunConfig::*, bool RunConfig::*,
               std::string RunConfig::*>
      member;
};

inline const std::vector<Field>& fields() {
  static const std::vector<Field> f = {
      {"model.img_size", &RunConfig::model_img_size},
      {"model.channels", &RunConfig::model_channels},
      {"model.base_width", &RunConfig::model_base_width},
      {"model.levels", &RunConfig::model_levels},
      {"model.blocks_per_level", &RunConfig::model_blocks_per_level},
      {"model.attention", &RunConfig::model_attention},
      {"model.temb_dim", &RunConfig::model_temb_dim},
      {"model.num_classes", &RunConfig::model_num_classes},
      {"sched.steps", &RunConfig::sched_steps},
      {"sched.rho", &RunConfig::sched_rho},
      {"sched.sigma_min", &RunConfig::sched_sigma_min},
      {"sched.sigma_max", &RunConfig::sched_sigma_max},
      {"precond.sigma_data", &RunConfig::precond_sigma_data},
      {"precond.eps", &RunConfig::precond_eps},
      {"train.lr_g", &RunConfig::train_lr_g},
      {"train.lr_d", &RunConfig::train_lr_d},
      {"train.beta1", &RunConfig::train_beta1},
      {"train.beta2", &RunConfig::train_beta2},
      {"train.batch", &RunConfig::train_batch},
      {"train.gamma_r1", &RunConfig::train_gamma_r1},
      {"train.ema_halflife", &RunConfig::train_ema_halflife},
      {"train.ema_warmup", &RunConfig::train_ema_warmup},
      {"train.images", &RunConfig::train_images},
      {"train.lambda_cd", &RunConfig::train_lambda_cd},
      {"train.augment", &RunConfig::train_augment},
      {"train.conditional", &RunConfig::train_conditional},
      {"train.tune_norm", &RunConfig::train_tune_norm},
      {"train.tune_conv", &RunConfig::train_tune_conv},
      {"train.tune_qkv", &RunConfig::train_tune_qkv},
      {"train.tune_skip", &RunConfig::train_tune_skip},
      {"train.eval_interval", &RunConfig::train_eval_interval},
      {"train.eval_n", &RunConfig::train_eval_n},
      {"train.final_eval_n", &RunConfig::train_final_eval_n},
      {"train.target_frechet", &RunConfig::train_target_frechet},
      {"train.inject_nan_at", &RunConfig::train_inject_nan_at},
      {"train.gen_steps", &RunConfig::train_gen_steps},
      {"train.sigma_mid", &RunConfig::train_sigma_mid},
      {"train.scratch", &RunConfig::train_scratch},
      {"data.path", &RunConfig::data_path},
      {"data.n", &RunConfig::data_n},
      {"data.seed", &RunConfig::data_seed},
      {"feat.path", &RunConfig::feat_path},
      {"feat.epochs", &RunConfig::feat_epochs},
      {"feat.lr", &RunConfig::feat_lr},
      {"feat.accuracy_target", &RunConfig::feat_accuracy_target},
      {"paths.init", &RunConfig::paths_init},
      {"paths.score", &RunConfig::paths_score},
      {"eval.steps", &RunConfig::eval_steps},
      {"eval.solver", &RunConfig::eval_solver},
      {"eval.n", &RunConfig::eval_n},
      {"eval.trace_batch", &RunConfig::eval_trace_batch},
      {"study.steps", &RunConfig::study_steps},
      {"study.budget", &RunConfig::study_budget},
      {"study.quality_band", &RunConfig::study_quality_band},
      {"study.seeds", &RunConfig::study_seeds},
      {"study.sigma_mids", &RunConfig::study_sigma_mids},
  };
  return f;
}

inline std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  size_t b = s.find_last_not_of(" \t\r");
  return a == std::string::npos ? "" : s.substr(a, b - a + 1);
}

}  // namespace detail_cfg

inline std::string serialize_config(const RunConfig& cfg) {
  std::ostringstream os;
  char buf[64];
  for (const auto& f : detail_cfg::fields()) {
    os << f.key << " = ";
    std::visit(
        [&](auto member) {
          using M = std::decay_t<decltype(cfg.*member)>;
          if constexpr (std::is_same_v<M, double>) {
            std::snprintf(buf, sizeof(buf), "%.17g", cfg.*member);
            os << buf;
          } else if constexpr (std::is_same_v<M, bool>) {
            os << (cfg.*member ? "true" : "false");
          } else {
            os << cfg.*member;
          }
        },
        f.member);
    os << "\n";
  }
  return os.str();
}

inline RunConfig parse_config(const std::string& text) {
  RunConfig cfg;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::string t = detail_cfg::trim(line);
    if (t.empty() || t[0] == '#') continue;
    size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    std::string key = detail_cfg::trim(t.substr(0, eq));
    std::string val = detail_cfg::trim(t.substr(eq + 1));
    bool found = false;
    for (const auto& f : detail_cfg::fields()) {
      if (f.key != key) continue;
      found = true;
      std::visit(
          [&](auto member) {
            using M = std::decay_t<decltype(cfg.*member)>;
            try {
              if constexpr (std::is_same_v<M, int64_t>) {
                cfg.*member = std::stoll(val);
              } else if constexpr (std::is_same_v<M, double>) {
                cfg.*member = std::stod(val);
              } else if constexpr (std::is_same_v<M, bool>) {
                if (val == "true" || val == "1")
                  cfg.*member = true;
                else if (val == "false" || val == "0")
                  cfg.*member = false;
                else
                  throw ConfigError("bad boolean '" + val + "' for " + key);
              } else {
                cfg.*member = val;
              }
            } catch (const ConfigError&) {
              throw;
            } catch (const std::exception&) {
              throw ConfigError("line " + std::to_string(lineno) + ": bad value '" + val +
                                "' for " + key);
            }
          },
          f.member);
      break;
    }
    if (!found) throw ConfigError("unknown config key '" + key + "'");
  }
  return cfg;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config " + path);
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_config(text);
}

inline uint64_t config_hash(const RunConfig& cfg) {
  std::string s = serialize_config(cfg);
  return fnv1a64(s.data(), s.size());
}

inline std::vector<int64_t> parse_int_list(const std::string& s) {
  std::vector<int64_t> out;
  std::istringstream is(s);
  std::string item;
  while (std::getline(is, item, ',')) {
    item = detail_cfg::trim(item);
    if (!item.empty()) out.push_back(std::stoll(item));
  }
  return out;
}

inline std::vector<double> parse_double_list(const std::string& s) {
  std::vector<double> out;
  std::istringstream is(s);
  std::string item;
  while (std::getline(is, item, ',')) {
    item = detail_cfg::trim(item);
    if (!item.empty()) out.push_back(std::stod(item));
  }
  return out;
}

}  // namespace d2o
