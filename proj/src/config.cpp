#include "mtcp/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "mtcp/errors.hpp"

namespace mtcp {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* expected) {
  throw ConfigError("config key '" + key + "': cannot parse '" + value + "' as " + expected);
}

double to_double(const std::string& key, const std::string& value) {
  const std::string v = trim(value);
  double out = 0.0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || ptr != v.data() + v.size() || v.empty()) bad_value(key, value, "a number");
  return out;
}

std::uint64_t to_u64(const std::string& key, const std::string& value) {
  const std::string v = trim(value);
  std::uint64_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || ptr != v.data() + v.size() || v.empty()) bad_value(key, value, "a non-negative integer");
  return out;
}

bool to_bool(const std::string& key, const std::string& value) {
  const std::string v = trim(value);
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  bad_value(key, value, "a boolean");
}

template <class T, class F>
std::vector<T> to_list(const std::string& key, const std::string& value, F parse_one) {
  std::vector<T> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (trim(item).empty()) continue;
    out.push_back(static_cast<T>(parse_one(key, item)));
  }
  return out;
}

std::string fmt_double(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

template <class T>
std::string fmt_list(const std::vector<T>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    if constexpr (std::is_floating_point_v<T>) {
      out += fmt_double(v[i]);
    } else {
      out += std::to_string(v[i]);
    }
  }
  return out;
}

std::string fmt_bool(bool b) { return b ? "true" : "false"; }

struct Key {
  std::string name;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
};

#define MTCP_SIZE_KEY(NAME, FIELD)                                                                     \
  Key {                                                                                                \
    NAME, [](const RunConfig& c) { return std::to_string(c.FIELD); },                                  \
        [](RunConfig& c, const std::string& k, const std::string& v) { c.FIELD = to_u64(k, v); }       \
  }
#define MTCP_DOUBLE_KEY(NAME, FIELD)                                                                   \
  Key {                                                                                                \
    NAME, [](const RunConfig& c) { return fmt_double(c.FIELD); },                                      \
        [](RunConfig& c, const std::string& k, const std::string& v) { c.FIELD = to_double(k, v); }    \
  }
#define MTCP_BOOL_KEY(NAME, FIELD)                                                                     \
  Key {                                                                                                \
    NAME, [](const RunConfig& c) { return fmt_bool(c.FIELD); },                                        \
        [](RunConfig& c, const std::string& k, const std::string& v) { c.FIELD = to_bool(k, v); }      \
  }

const std::vector<Key>& registry() {
  static const std::vector<Key> keys = {
      MTCP_SIZE_KEY("model.backbone.channels", model.backbone.channels),
      MTCP_SIZE_KEY("model.backbone.queries", model.backbone.num_queries),
      MTCP_SIZE_KEY("model.decoder.stages", model.decoder.num_stages),
      Key{"model.decoder.widths", [](const RunConfig& c) { return fmt_list(c.model.decoder.widths); },
          [](RunConfig& c, const std::string& k, const std::string& v) {
            c.model.decoder.widths = to_list<std::size_t>(k, v, to_u64);
          }},
      Key{"model.decoder.blocks", [](const RunConfig& c) { return fmt_list(c.model.decoder.blocks_per_stage); },
          [](RunConfig& c, const std::string& k, const std::string& v) {
            c.model.decoder.blocks_per_stage = to_list<std::size_t>(k, v, to_u64);
          }},
      MTCP_SIZE_KEY("model.decoder.window", model.decoder.window),
      MTCP_SIZE_KEY("model.decoder.heads", model.decoder.heads),
      MTCP_SIZE_KEY("model.decoder.mlp_ratio", model.decoder.mlp_ratio),
      MTCP_SIZE_KEY("model.decoder.out_width", model.decoder.out_width),
      MTCP_SIZE_KEY("model.cbam_reduction", model.cbam_reduction),
      Key{"model.bn_eval", [](const RunConfig& c) { return std::string(c.model.bn_sample_stats ? "sample" : "running"); },
          [](RunConfig& c, const std::string& k, const std::string& v) {
            const std::string t = trim(v);
            if (t != "sample" && t != "running") bad_value(k, v, "'sample' or 'running'");
            c.model.bn_sample_stats = t == "sample";
          }},
      MTCP_BOOL_KEY("cfm.enabled", model.cfm_enabled),
      MTCP_BOOL_KEY("cfm.residual", model.cfm_residual),
      MTCP_BOOL_KEY("srm.enabled", model.srm_enabled),
      Key{"loss.scheme", [](const RunConfig& c) { return std::string(lps::scheme_name(c.scheme)); },
          [](RunConfig& c, const std::string&, const std::string& v) { c.scheme = lps::parse_scheme(trim(v)); }},
      Key{"loss.ma_weights", [](const RunConfig& c) { return fmt_list(c.ma_weights); },
          [](RunConfig& c, const std::string& k, const std::string& v) {
            c.ma_weights = to_list<double>(k, v, to_double);
          }},
      MTCP_DOUBLE_KEY("loss.lambda_cos", lambda_cos),
      MTCP_SIZE_KEY("lps.history", lps.history),
      MTCP_DOUBLE_KEY("lps.kappa", lps.kappa),
      MTCP_DOUBLE_KEY("lps.clamp_lo", lps.clamp_lo),
      MTCP_DOUBLE_KEY("lps.clamp_hi", lps.clamp_hi),
      MTCP_DOUBLE_KEY("optim.lr", optim.lr),
      MTCP_DOUBLE_KEY("optim.weight_decay", optim.weight_decay),
      MTCP_DOUBLE_KEY("optim.beta1", optim.beta1),
      MTCP_DOUBLE_KEY("optim.beta2", optim.beta2),
      MTCP_DOUBLE_KEY("optim.eps", optim.eps),
      MTCP_SIZE_KEY("data.height", data.height),
      MTCP_SIZE_KEY("data.width", data.width),
      MTCP_SIZE_KEY("data.train", data.train_count),
      MTCP_SIZE_KEY("data.val", data.val_count),
      MTCP_SIZE_KEY("data.min_shapes", data.min_shapes),
      MTCP_SIZE_KEY("data.max_shapes", data.max_shapes),
      MTCP_SIZE_KEY("train.epochs", epochs),
      MTCP_SIZE_KEY("train.batch_size", batch_size),
      MTCP_SIZE_KEY("seed", seed),
      Key{"out_dir", [](const RunConfig& c) { return c.out_dir; },
          [](RunConfig& c, const std::string&, const std::string& v) { c.out_dir = trim(v); }},
  };
  return keys;
}

#undef MTCP_SIZE_KEY
#undef MTCP_DOUBLE_KEY
#undef MTCP_BOOL_KEY

}  // namespace

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t x = seed * 0x9e3779b97f4a7c15ULL + stream + 0x632be59bd9b4e019ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

ModelConfig RunConfig::model_config() const {
  ModelConfig m = model;
  m.backbone.height = data.height;
  m.backbone.width = data.width;
  return m;
}

bench::DatasetConfig RunConfig::dataset_config() const {
  bench::DatasetConfig d = data;
  d.seed = derive_seed(seed, 1);
  return d;
}

void RunConfig::validate() const {
  model_config().validate();
  dataset_config().validate();
  if (epochs < 1) throw ConfigError("train.epochs must be at least 1");
  if (batch_size < 1) throw ConfigError("train.batch_size must be at least 1");
  if (optim.lr <= 0.0 || optim.weight_decay < 0.0) throw ConfigError("optim: lr must be positive, decay >= 0");
  if (lambda_cos < 0.0) throw ConfigError("loss.lambda_cos must be non-negative");
  if (lps.history < 1) throw ConfigError("lps.history must be at least 1");
  if (lps.kappa < 0.0) throw ConfigError("lps.kappa must be non-negative");
  if (lps.clamp_lo < 0.0 || lps.clamp_lo > lps.clamp_hi) throw ConfigError("lps clamp bounds must satisfy 0 <= lo <= hi");
  if (scheme == lps::SchemeKind::MA && !ma_weights.empty() && ma_weights.size() != model.tasks.size()) {
    throw ConfigError("loss.ma_weights needs one weight per task");
  }
  if (out_dir.empty()) throw ConfigError("out_dir must not be empty");
}

void set_config_value(RunConfig& config, const std::string& key, const std::string& value) {
  for (const auto& k : registry()) {
    if (k.name == key) {
      k.set(config, key, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

std::vector<std::pair<std::string, std::string>> config_entries(const RunConfig& config) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& k : registry()) out.emplace_back(k.name, k.get(config));
  return out;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& k : registry()) out.push_back(k.name);
  return out;
}

void apply_config_text(RunConfig& config, const std::string& text) {
  std::stringstream ss(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value', got '" + line + "'");
    }
    set_config_value(config, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

void apply_config_file(RunConfig& config, const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  apply_config_text(config, ss.str());
}

std::string config_to_text(const RunConfig& config) {
  std::string out;
  for (const auto& [k, v] : config_entries(config)) out += k + " = " + v + "\n";
  return out;
}

}  // namespace mtcp
