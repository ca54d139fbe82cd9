#pragma once

// `key = value` configuration files overriding model and training defaults.

#include <charconv>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "rae/error.hpp"
#include "rae/nn.hpp"
#include "rae/train.hpp"

namespace rae {

struct RunConfig {
  ModelKind model = ModelKind::residual;
  ModelConfig model_cfg;
  TrainConfig train = TrainConfig::defaults_for(ModelKind::residual);
  // Set once max_epochs is given explicitly; otherwise the per-model default applies.
  bool explicit_epochs = false;

  void set_model(ModelKind kind) {
    model = kind;
    if (!explicit_epochs) train.max_epochs = TrainConfig::defaults_for(kind).max_epochs;
  }
};

inline const std::vector<std::string>& valid_config_keys() {
  static const std::vector<std::string> keys{
      "model",           "input_channels",       "input_height",
      "input_width",     "stem_filters",         "rrdb_rdbs",
      "rdb_dense_layers", "rdb_growth_rate",     "rdb_beta", "rdb_init_scale",
      "encoder_stage_out_channels", "baseline_channels", "activation_slope",
      "init_seed",       "max_epochs",           "batch_size",
      "learning_rate",   "adam_beta1",           "adam_beta2",
      "adam_epsilon",    "early_stop_patience",  "early_stop_min_delta",
      "seed",            "checkpoint_every"};
  return keys;
}

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

template <typename T>
T parse_number(std::string_view key, std::string_view v) {
  T out{};
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError("config key '" + std::string(key) + "': invalid number '" + std::string(v) + "'");
  }
  return out;
}

inline std::vector<int> parse_int_list(std::string_view key, std::string_view v) {
  std::vector<int> out;
  while (true) {
    const auto comma = v.find(',');
    out.push_back(parse_number<int>(key, trim(v.substr(0, comma))));
    if (comma == std::string_view::npos) break;
    v.remove_prefix(comma + 1);
  }
  return out;
}

}  // namespace detail

inline void apply_config_value(RunConfig& rc, std::string_view key, std::string_view value) {
  using detail::parse_number;
  auto& m = rc.model_cfg;
  auto& t = rc.train;
  if (key == "model") rc.set_model(parse_model_kind(value));
  else if (key == "input_channels") m.input_channels = parse_number<int>(key, value);
  else if (key == "input_height") m.input_height = parse_number<int>(key, value);
  else if (key == "input_width") m.input_width = parse_number<int>(key, value);
  else if (key == "stem_filters") m.stem_filters = parse_number<int>(key, value);
  else if (key == "rrdb_rdbs") m.rrdb_rdbs = parse_number<int>(key, value);
  else if (key == "rdb_dense_layers") m.rdb.num_dense_layers = parse_number<int>(key, value);
  else if (key == "rdb_growth_rate") m.rdb.growth_rate = parse_number<int>(key, value);
  else if (key == "rdb_beta") m.rdb.beta = parse_number<double>(key, value);
  else if (key == "rdb_init_scale") m.rdb.init_scale = parse_number<double>(key, value);
  else if (key == "encoder_stage_out_channels") m.encoder_stage_out_channels = detail::parse_int_list(key, value);
  else if (key == "baseline_channels") m.baseline_channels = detail::parse_int_list(key, value);
  else if (key == "activation_slope") m.activation_slope = parse_number<double>(key, value);
  else if (key == "init_seed") m.init_seed = parse_number<std::uint64_t>(key, value);
  else if (key == "max_epochs") {
    t.max_epochs = parse_number<int>(key, value);
    rc.explicit_epochs = true;
  } else if (key == "batch_size") t.batch_size = parse_number<int>(key, value);
  else if (key == "learning_rate") t.adam.learning_rate = parse_number<double>(key, value);
  else if (key == "adam_beta1") t.adam.beta1 = parse_number<double>(key, value);
  else if (key == "adam_beta2") t.adam.beta2 = parse_number<double>(key, value);
  else if (key == "adam_epsilon") t.adam.epsilon = parse_number<double>(key, value);
  else if (key == "early_stop_patience") t.early_stop_patience = parse_number<int>(key, value);
  else if (key == "early_stop_min_delta") t.early_stop_min_delta = parse_number<double>(key, value);
  else if (key == "seed") t.seed = parse_number<std::uint64_t>(key, value);
  else if (key == "checkpoint_every") t.checkpoint_every = parse_number<int>(key, value);
  else {
    std::string valid;
    for (const auto& k : valid_config_keys()) valid += (valid.empty() ? "" : ", ") + k;
    throw ConfigError("unknown config key '" + std::string(key) + "'; valid keys: " + valid);
  }
}

// Applies every `key = value` line of `text`; `#` starts a comment.
inline void apply_config_text(RunConfig& rc, std::string_view text, std::string_view source = "config") {
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text.remove_prefix(nl == std::string_view::npos ? text.size() : nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError(std::string(source) + ":" + std::to_string(line_no) + ": expected 'key = value'");
    }
    try {
      apply_config_value(rc, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(std::string(source) + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
}

inline void apply_config_file(RunConfig& rc, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  apply_config_text(rc, text, path.string());
}

}  // namespace rae
