#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "stgaze/geometry.hpp"
#include "stgaze/losses.hpp"
#include "stgaze/model.hpp"
#include "stgaze/synth.hpp"
#include "stgaze/train.hpp"

namespace stgaze {

// Plain-text `key = value` run configuration (UTF-8, '#' comments). Unknown
// keys are rejected with the offending line number; every key has a
// documented default. Covers the model, training, synthetic scene, screen
// geometry, loss weights and paths.
class RunConfig {
 public:
  RunConfig();  // all defaults

  static RunConfig from_file(const std::string& path);

  // Parses one "key = value" assignment (CLI overrides).
  void set(const std::string& key, const std::string& value, int line = 0);

  std::string get(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::int64_t get_int(const std::string& key) const;
  double get_double(const std::string& key) const;
  std::vector<int> get_int_list(const std::string& key) const;
  std::vector<double> get_double_list(const std::string& key) const;

  ModelConfig model() const;
  TrainConfig train() const;      // weights/threads/out_dir filled from keys
  SceneParams scene() const;
  ScreenGeometry screen() const;
  LossWeights loss_weights() const;
  std::uint64_t data_seed() const;
  int sequence_length() const;

  // One line per key: name, default, description.
  static void print_key_help(std::ostream& os);

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace stgaze
