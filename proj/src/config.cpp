#include "reinseg/config.hpp"

#include "reinseg/rng.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace reinseg {
namespace {

const std::map<std::string, std::string>& desk_defaults() {
  // The compiled-in key set; set() rejects anything outside it.
  static const std::map<std::string, std::string> kv = {
      {"preset", "desk"},
      {"seed", "42"},
      {"out", "runs/latest"},
      {"single_thread", "true"},
      {"data.dir", "data"},
      {"data.image_size", "96"},
      {"data.train_per_domain", "60"},
      {"data.test_per_domain", "15"},
      {"backbone.kind", "vit_tiny"},
      {"backbone.layers", "12"},
      {"backbone.width", "32"},
      {"backbone.patch", "8"},
      {"backbone.input", "64"},
      {"rein.enabled", "true"},
      {"rein.tokens", "16"},
      {"rein.rank", "4"},
      {"rein.hidden", "0"},
      {"rein.query_dim", "16"},
      {"head.hidden", "16"},
      {"head.threshold", "0.5"},
      {"head.bilinear", "true"},
      {"train.optimizer", "adamw"},
      {"train.lr_backbone", "1e-5"},
      {"train.lr_rein", "5e-3"},
      {"train.lr_head", "2e-3"},
      {"train.iterations", "500"},
      {"train.batch_size", "8"},
      {"train.crop_size", "64"},
      {"train.backbone_frozen", "true"},
      {"train.weight_decay", "0.01"},
      {"train.checkpoint_every", "0"},
      {"train.val_ratio", "0.2"},
  };
  return kv;
}

std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

long long parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    long long x = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("key " + key + " expects an integer, got '" + v + "'");
  }
}

double parse_real(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    double x = std::stod(v, &used);
    if (used != v.size() || !std::isfinite(x)) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("key " + key + " expects a real number, got '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("key " + key + " expects true/false, got '" + v + "'");
}

std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    unsigned long long x = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("key " + key + " expects an unsigned integer, got '" + v + "'");
  }
}

}  // namespace

std::string to_string(Preset p) { return p == Preset::paper ? "paper" : "desk"; }

Preset preset_from_string(const std::string& s) {
  if (s == "paper") return Preset::paper;
  if (s == "desk") return Preset::desk;
  throw ConfigError("unknown preset: " + s + " (expected paper or desk)");
}

int TrainConfig::checkpoint_interval() const {
  return checkpoint_every > 0 ? checkpoint_every : std::max(1, iterations / 5);
}

void TrainConfig::validate() const {
  if (iterations < 1) throw ConfigError("train.iterations must be >= 1");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (crop_size < 1) throw ConfigError("train.crop_size must be >= 1");
  if (lr_backbone < 0 || lr_rein < 0 || lr_head < 0)
    throw ConfigError("learning rates must be nonnegative");
  if (weight_decay < 0) throw ConfigError("train.weight_decay must be nonnegative");
  if (!(val_ratio > 0.0 && val_ratio < 1.0))
    throw ConfigError("train.val_ratio must lie in (0,1)");
  if (preset == Preset::paper && (iterations != 60000 || batch_size != 4 || crop_size != 512))
    throw ConfigError("paper preset pins iterations=60000, batch_size=4, crop_size=512");
}

void DataProtocolConfig::validate() const {
  if (image_size < 16) throw ConfigError("data.image_size must be >= 16");
  if (train_per_domain < 1 || test_per_domain < 1)
    throw ConfigError("per-domain sample counts must be >= 1");
}

RunConfig RunConfig::defaults() {
  RunConfig cfg;
  cfg.kv_ = desk_defaults();
  return cfg;
}

RunConfig RunConfig::from_preset(Preset p) {
  RunConfig cfg = defaults();
  if (p == Preset::paper) {
    cfg.kv_["preset"] = "paper";
    cfg.kv_["data.image_size"] = "1500";
    cfg.kv_["backbone.patch"] = "16";
    cfg.kv_["backbone.input"] = "512";
    cfg.kv_["train.iterations"] = "60000";
    cfg.kv_["train.batch_size"] = "4";
    cfg.kv_["train.crop_size"] = "512";
    cfg.kv_["train.lr_rein"] = "1e-4";
    cfg.kv_["train.lr_head"] = "1e-4";
  }
  return cfg;
}

void RunConfig::apply_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config file: " + path);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) {
      std::ostringstream msg;
      msg << path << ":" << lineno << ": expected 'key = value', got '" << line << "'";
      throw ConfigError(msg.str());
    }
    try {
      set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      std::ostringstream msg;
      msg << path << ":" << lineno << ": " << e.what();
      throw ConfigError(msg.str());
    }
  }
}

void RunConfig::apply_set(const std::string& key_eq_value) {
  auto eq = key_eq_value.find('=');
  if (eq == std::string::npos)
    throw ConfigError("--set expects key=value, got '" + key_eq_value + "'");
  set(trim(key_eq_value.substr(0, eq)), trim(key_eq_value.substr(eq + 1)));
}

void RunConfig::set(const std::string& key, const std::string& value) {
  if (!desk_defaults().count(key)) throw ConfigError("unknown config key: " + key);
  kv_[key] = value;
}

const std::string& RunConfig::get(const std::string& key) const {
  auto it = kv_.find(key);
  if (it == kv_.end()) throw ConfigError("unknown config key: " + key);
  return it->second;
}

bool RunConfig::has(const std::string& key) const { return kv_.count(key) > 0; }

std::uint64_t RunConfig::seed() const { return parse_uint("seed", get("seed")); }
std::string RunConfig::out_dir() const { return get("out"); }
bool RunConfig::single_thread() const { return parse_bool("single_thread", get("single_thread")); }
Preset RunConfig::preset() const { return preset_from_string(get("preset")); }

ModelConfig RunConfig::model() const {
  std::uint64_t master = seed();
  ModelConfig m;
  m.backbone.kind = backbone_kind_from_string(get("backbone.kind"));
  m.backbone.layers = static_cast<int>(parse_int("backbone.layers", get("backbone.layers")));
  m.backbone.width = static_cast<int>(parse_int("backbone.width", get("backbone.width")));
  m.backbone.patch = static_cast<int>(parse_int("backbone.patch", get("backbone.patch")));
  m.backbone.input = static_cast<int>(parse_int("backbone.input", get("backbone.input")));
  m.backbone.seed = derive_seed(master, 0xbb);

  m.rein_enabled = parse_bool("rein.enabled", get("rein.enabled"));
  m.adapter.layers = m.backbone.layers;
  m.adapter.width = m.backbone.width;
  m.adapter.tokens = static_cast<int>(parse_int("rein.tokens", get("rein.tokens")));
  m.adapter.rank = static_cast<int>(parse_int("rein.rank", get("rein.rank")));
  m.adapter.hidden = static_cast<int>(parse_int("rein.hidden", get("rein.hidden")));
  m.adapter.query_dim = static_cast<int>(parse_int("rein.query_dim", get("rein.query_dim")));
  m.adapter.seed = derive_seed(master, 0xad);

  m.head.query_dim = m.adapter.query_dim;
  m.head.width = m.backbone.width;
  m.head.hidden = static_cast<int>(parse_int("head.hidden", get("head.hidden")));
  m.head.out_size = m.backbone.input;
  m.head.expected_queries = m.adapter.tokens;
  m.head.threshold = parse_real("head.threshold", get("head.threshold"));
  m.head.bilinear = parse_bool("head.bilinear", get("head.bilinear"));
  m.head.seed = derive_seed(master, 0x4d);

  m.backbone_frozen = parse_bool("train.backbone_frozen", get("train.backbone_frozen"));
  m.validate();
  return m;
}

TrainConfig RunConfig::train() const {
  TrainConfig t;
  const std::string& opt = get("train.optimizer");
  if (opt != "adamw") throw ConfigError("train.optimizer supports only adamw, got " + opt);
  t.optimizer = Optim::adamw;
  t.lr_backbone = parse_real("train.lr_backbone", get("train.lr_backbone"));
  t.lr_rein = parse_real("train.lr_rein", get("train.lr_rein"));
  t.lr_head = parse_real("train.lr_head", get("train.lr_head"));
  t.iterations = static_cast<int>(parse_int("train.iterations", get("train.iterations")));
  t.batch_size = static_cast<int>(parse_int("train.batch_size", get("train.batch_size")));
  t.crop_size = static_cast<int>(parse_int("train.crop_size", get("train.crop_size")));
  t.backbone_frozen = parse_bool("train.backbone_frozen", get("train.backbone_frozen"));
  t.seed = seed();
  t.preset = preset();
  t.weight_decay = parse_real("train.weight_decay", get("train.weight_decay"));
  t.checkpoint_every =
      static_cast<int>(parse_int("train.checkpoint_every", get("train.checkpoint_every")));
  t.val_ratio = parse_real("train.val_ratio", get("train.val_ratio"));
  t.validate();
  int input = static_cast<int>(parse_int("backbone.input", get("backbone.input")));
  if (t.crop_size != input)
    throw ConfigError("train.crop_size must equal backbone.input (the model consumes "
                      "input-sized crops)");
  return t;
}

DataProtocolConfig RunConfig::data() const {
  DataProtocolConfig d;
  d.dir = get("data.dir");
  d.image_size = static_cast<int>(parse_int("data.image_size", get("data.image_size")));
  d.train_per_domain =
      static_cast<int>(parse_int("data.train_per_domain", get("data.train_per_domain")));
  d.test_per_domain =
      static_cast<int>(parse_int("data.test_per_domain", get("data.test_per_domain")));
  d.validate();
  int crop = static_cast<int>(parse_int("train.crop_size", get("train.crop_size")));
  if (d.image_size < crop) throw ConfigError("data.image_size must be >= train.crop_size");
  return d;
}

std::string RunConfig::serialize() const {
  std::ostringstream out;
  for (const auto& [k, v] : kv_) out << k << " = " << v << "\n";
  return out.str();
}

RunConfig RunConfig::deserialize(const std::string& text) {
  RunConfig cfg = defaults();
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("malformed config line: " + line);
    cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return cfg;
}

}  // namespace reinseg
