#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "edit/infer.hpp"
#include "edit/trainer.hpp"

namespace edit::cli {

// Invalid or unknown configuration entry; key() is the offending snake_case key.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string key, const std::string& message)
      : std::runtime_error(key + ": " + message), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string out_dir = "out";
  std::string checkpoint;  // empty: <out_dir>/model.ckpt
  train::TrainConfig train;
  infer::InferenceConfig infer;
  std::size_t n_samples = 16;
  std::size_t eval_samples = 256;
  std::vector<double> bench_deltas{0.0, 0.05, 0.1, 0.15, 0.2, 0.3};
  std::vector<int> bench_max_reuse{0, 1, 2, 5, 10};
  train::ModelGradCheckConfig gradcheck;

  // Every field in range; throws ConfigError naming the key.
  void validate() const;
  std::filesystem::path checkpoint_path() const;
};

RunConfig parse_config(const std::string& json_text);
RunConfig load_config(const std::filesystem::path& path);
// Effective config with every key present, as pretty-printed JSON.
std::string dump_config(const RunConfig& cfg);

}  // namespace edit::cli
