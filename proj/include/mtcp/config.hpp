#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "mtcp/benchkit.hpp"
#include "mtcp/lps.hpp"
#include "mtcp/model.hpp"
#include "mtcp/optim.hpp"

namespace mtcp {

/// Everything a run needs. Every field has a default, so an empty config
/// file is runnable.
struct RunConfig {
  ModelConfig model;
  bench::DatasetConfig data;

  lps::SchemeKind scheme = lps::SchemeKind::LPS;
  lps::LpsParams lps;
  std::vector<double> ma_weights;  // MA scheme only; empty means 1/T each
  double lambda_cos = 1.0;

  AdamWConfig optim{1e-3, 1e-4};
  std::size_t epochs = 30;
  std::size_t batch_size = 2;
  std::uint64_t seed = 0;
  std::string out_dir = "runs/default";

  /// Model config with the input size taken from the dataset.
  ModelConfig model_config() const;
  /// Dataset config with the scene seed derived from the run seed.
  bench::DatasetConfig dataset_config() const;
  void validate() const;
};

/// Independent random streams derived from the run seed.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

/// Sets one dotted key (e.g. "lps.kappa"). Unknown keys and malformed values
/// raise ConfigError.
void set_config_value(RunConfig& config, const std::string& key, const std::string& value);
/// All keys with their current values, in a fixed order.
std::vector<std::pair<std::string, std::string>> config_entries(const RunConfig& config);
std::vector<std::string> config_keys();

/// Parses `key = value` lines; '#' starts a comment.
void apply_config_text(RunConfig& config, const std::string& text);
void apply_config_file(RunConfig& config, const std::filesystem::path& path);
/// One `key = value` line per entry; apply_config_text reads it back.
std::string config_to_text(const RunConfig& config);

}  // namespace mtcp
