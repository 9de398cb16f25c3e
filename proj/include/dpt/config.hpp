#pragma once

// Experiment configuration: a flat key = value file with CLI overrides.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dpt/data.hpp"
#include "dpt/masks.hpp"
#include "dpt/model.hpp"
#include "dpt/sparse.hpp"

namespace dpt {

enum class DataSource { Synthetic, Jsonl };

struct TrainConfig {
  // run
  TrainMode mode = TrainMode::PrefixTune;
  AttentionDesign design = AttentionDesign::Dense;
  double lr = 5e-5;
  int epochs = 30;
  int batch_size = 8;
  std::vector<std::uint64_t> seeds{13, 42, 2022};
  int beam = 5;
  int max_decode_len = 8;
  std::string select_by = "val_loss";  // or "rouge"
  std::string init_checkpoint;         // backbone to start from; empty = pretrain or random init

  // prefixes and attention design
  int prefix_length = 16;
  ScheduleSpec schedule;
  double prefix_init_std = 1.0;
  int enc_segments = 2;
  int dec_segments = 1;
  int lower_band = -1;
  double top_p = 0.95;
  double tau_trunc = 1.0;
  double tau_soft = 1.0;
  bool renormalize_trunc = false;
  SoftVariant softsa_variant = SoftVariant::RowGumbel;

  // model
  ModelConfig model{4, 4, 4, 64, 128, 0, 64};

  // data
  DataSource data = DataSource::Synthetic;
  std::string train_path, val_path, test_path;
  SyntheticTaskSpec synth{2, 4, 40, 16, 1};
  int n_train = 2000;
  int n_val = 200;
  int n_test = 200;

  // backbone pretraining (cued multi-task corpus for synthetic data)
  int pretrain_epochs = 5;
  double pretrain_lr = 1e-3;
  std::uint64_t pretrain_seed = 7;

  int spectrum_examples = 200;

  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  std::vector<std::string> keys() const;
  std::string to_ini() const;
  void validate() const;

  // Keys absent from the file keep the values of `base`.
  static TrainConfig from_ini(std::istream& is, const TrainConfig& base);
  static TrainConfig from_ini(std::istream& is);
  static TrainConfig load(const std::string& path, const TrainConfig& base);
  static TrainConfig load(const std::string& path);

  BlockSpec block_spec() const { return {enc_segments, dec_segments, lower_band}; }
  SparsityConfig sparsity() const { return {top_p, tau_trunc, tau_soft, renormalize_trunc, softsa_variant}; }
  PrefixConfig prefix_config() const {
    return {mode == TrainMode::PrefixTune ? prefix_length : 0, schedule, prefix_init_std};
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const char* first = value.data();
  const char* last = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(first, last, out);
  if (ec != std::errc() || ptr != last) throw ConfigError("config key '" + key + "': cannot parse '" + value + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + value + "'");
}

inline std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

struct ConfigField {
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

template <class T>
ConfigField int_field(T TrainConfig::*member) {
  return {[member](TrainConfig& c, const std::string& v) { c.*member = parse_number<T>("", v); },
          [member](const TrainConfig& c) { return std::to_string(c.*member); }};
}

inline const std::map<std::string, ConfigField>& config_fields() {
  using C = TrainConfig;
  static const std::map<std::string, ConfigField> fields = [] {
    std::map<std::string, ConfigField> f;
    auto dbl = [](double C::*m) {
      return ConfigField{[m](C& c, const std::string& v) { c.*m = parse_number<double>("", v); },
                         [m](const C& c) { return format_double(c.*m); }};
    };
    auto str = [](std::string C::*m) {
      return ConfigField{[m](C& c, const std::string& v) { c.*m = v; }, [m](const C& c) { return c.*m; }};
    };
    f["mode"] = {[](C& c, const std::string& v) { c.mode = parse_train_mode(v); },
                 [](const C& c) { return std::string(to_string(c.mode)); }};
    f["design"] = {[](C& c, const std::string& v) { c.design = parse_design(v); },
                   [](const C& c) { return std::string(to_string(c.design)); }};
    f["lr"] = dbl(&C::lr);
    f["epochs"] = int_field(&C::epochs);
    f["batch_size"] = int_field(&C::batch_size);
    f["seeds"] = {[](C& c, const std::string& v) {
                    c.seeds.clear();
                    std::stringstream ss(v);
                    for (std::string item; std::getline(ss, item, ',');) {
                      item = trim(item);
                      if (!item.empty()) c.seeds.push_back(parse_number<std::uint64_t>("seeds", item));
                    }
                  },
                  [](const C& c) {
                    std::string out;
                    for (std::size_t i = 0; i < c.seeds.size(); ++i) out += (i ? "," : "") + std::to_string(c.seeds[i]);
                    return out;
                  }};
    f["beam"] = int_field(&C::beam);
    f["max_decode_len"] = int_field(&C::max_decode_len);
    f["select_by"] = str(&C::select_by);
    f["init_checkpoint"] = str(&C::init_checkpoint);
    f["prefix_length"] = int_field(&C::prefix_length);
    f["schedule"] = {[](C& c, const std::string& v) { c.schedule = ScheduleSpec::parse(v); },
                     [](const C& c) { return c.schedule.str(); }};
    f["prefix_init_std"] = dbl(&C::prefix_init_std);
    f["enc_segments"] = int_field(&C::enc_segments);
    f["dec_segments"] = int_field(&C::dec_segments);
    f["lower_band"] = int_field(&C::lower_band);
    f["top_p"] = dbl(&C::top_p);
    f["tau_trunc"] = dbl(&C::tau_trunc);
    f["tau_soft"] = dbl(&C::tau_soft);
    f["renormalize_trunc"] = {[](C& c, const std::string& v) { c.renormalize_trunc = parse_bool("renormalize_trunc", v); },
                              [](const C& c) { return std::string(c.renormalize_trunc ? "true" : "false"); }};
    f["softsa_variant"] = {[](C& c, const std::string& v) { c.softsa_variant = parse_soft_variant(v); },
                           [](const C& c) { return std::string(to_string(c.softsa_variant)); }};
    auto model_int = [](int ModelConfig::*m) {
      return ConfigField{[m](C& c, const std::string& v) { c.model.*m = parse_number<int>("", v); },
                         [m](const C& c) { return std::to_string(c.model.*m); }};
    };
    f["n_layers_enc"] = model_int(&ModelConfig::n_layers_enc);
    f["n_layers_dec"] = model_int(&ModelConfig::n_layers_dec);
    f["n_heads"] = model_int(&ModelConfig::n_heads);
    f["d_model"] = model_int(&ModelConfig::d_model);
    f["d_ff"] = model_int(&ModelConfig::d_ff);
    f["max_seq_len"] = model_int(&ModelConfig::max_seq_len);
    f["data"] = {[](C& c, const std::string& v) {
                   if (v == "synthetic") c.data = DataSource::Synthetic;
                   else if (v == "jsonl") c.data = DataSource::Jsonl;
                   else throw ConfigError("data must be synthetic or jsonl, got '" + v + "'");
                 },
                 [](const C& c) { return std::string(c.data == DataSource::Synthetic ? "synthetic" : "jsonl"); }};
    f["train_path"] = str(&C::train_path);
    f["val_path"] = str(&C::val_path);
    f["test_path"] = str(&C::test_path);
    auto synth_int = [](int SyntheticTaskSpec::*m) {
      return ConfigField{[m](C& c, const std::string& v) { c.synth.*m = parse_number<int>("", v); },
                         [m](const C& c) { return std::to_string(c.synth.*m); }};
    };
    f["synth_segments"] = synth_int(&SyntheticTaskSpec::n_segments);
    f["synth_segment_length"] = synth_int(&SyntheticTaskSpec::segment_length);
    f["synth_distractor_vocab"] = synth_int(&SyntheticTaskSpec::distractor_vocab);
    f["synth_salient_vocab"] = synth_int(&SyntheticTaskSpec::salient_vocab);
    f["synth_seed"] = {[](C& c, const std::string& v) { c.synth.seed = parse_number<std::uint64_t>("", v); },
                       [](const C& c) { return std::to_string(c.synth.seed); }};
    f["n_train"] = int_field(&C::n_train);
    f["n_val"] = int_field(&C::n_val);
    f["n_test"] = int_field(&C::n_test);
    f["pretrain_epochs"] = int_field(&C::pretrain_epochs);
    f["pretrain_lr"] = dbl(&C::pretrain_lr);
    f["pretrain_seed"] = int_field(&C::pretrain_seed);
    f["spectrum_examples"] = int_field(&C::spectrum_examples);
    return f;
  }();
  return fields;
}

}  // namespace detail

inline void TrainConfig::set(const std::string& key, const std::string& value) {
  const auto& fields = detail::config_fields();
  auto it = fields.find(key);
  if (it == fields.end()) throw ConfigError("unknown config key '" + key + "'");
  try {
    it->second.set(*this, detail::trim(value));
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    if (msg.rfind("config key '': ", 0) == 0) throw ConfigError("config key '" + key + "': " + msg.substr(15));
    throw;
  }
}

inline std::string TrainConfig::get(const std::string& key) const {
  const auto& fields = detail::config_fields();
  auto it = fields.find(key);
  if (it == fields.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second.get(*this);
}

inline std::vector<std::string> TrainConfig::keys() const {
  std::vector<std::string> out;
  for (const auto& kv : detail::config_fields()) out.push_back(kv.first);
  return out;
}

inline std::string TrainConfig::to_ini() const {
  std::string out;
  for (const auto& [key, field] : detail::config_fields()) out += key + " = " + field.get(*this) + "\n";
  return out;
}

inline void TrainConfig::validate() const {
  if (lr < 0.0) throw ConfigError("lr must be >= 0");
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (seeds.empty()) throw ConfigError("at least one seed is required");
  if (beam < 1) throw ConfigError("beam must be >= 1");
  if (max_decode_len < 1) throw ConfigError("max_decode_len must be >= 1");
  if (select_by != "val_loss" && select_by != "rouge") throw ConfigError("select_by must be val_loss or rouge");
  if (prefix_length < 0) throw ConfigError("prefix_length must be >= 0");
  if (mode == TrainMode::PrefixTune && prefix_length == 0) throw ConfigError("prefixtune needs prefix_length >= 1");
  if (prefix_init_std <= 0.0) throw ConfigError("prefix_init_std must be positive");
  if (n_train < 1 || n_val < 1 || n_test < 1) throw ConfigError("split sizes must be >= 1");
  if (pretrain_epochs < 0 || pretrain_lr < 0.0) throw ConfigError("pretraining settings must be non-negative");
  if (spectrum_examples < 1) throw ConfigError("spectrum_examples must be >= 1");
  if (data == DataSource::Jsonl && (train_path.empty() || val_path.empty() || test_path.empty()))
    throw ConfigError("jsonl data needs train_path, val_path and test_path");
  if (data == DataSource::Synthetic) synth.validate();
  block_spec().validate(model.n_layers_enc);
  block_spec().validate(model.n_layers_dec);
  sparsity().validate();
  if (mode == TrainMode::PrefixTune) {
    schedule.resolve(model.n_layers_enc);
    schedule.resolve(model.n_layers_dec);
    if (uses_blocking(design) && (prefix_length < enc_segments || prefix_length < dec_segments))
      throw ConfigError("prefix_length must be >= the segment counts for blocking designs");
  }
}

inline TrainConfig TrainConfig::from_ini(std::istream& is, const TrainConfig& base) {
  TrainConfig c = base;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find_first_of("#;");
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty() || line.front() == '[') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    c.set(detail::trim(line.substr(0, eq)), line.substr(eq + 1));
  }
  return c;
}

inline TrainConfig TrainConfig::from_ini(std::istream& is) { return from_ini(is, TrainConfig{}); }

inline TrainConfig TrainConfig::load(const std::string& path, const TrainConfig& base) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path);
  return from_ini(is, base);
}

inline TrainConfig TrainConfig::load(const std::string& path) { return load(path, TrainConfig{}); }

}  // namespace dpt
