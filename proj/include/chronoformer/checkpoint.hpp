// Text checkpoints: the model configuration, every named parameter at full
// precision, and the normalization statistics the model was trained under.
// The format is line oriented so diffs and version control stay usable.
#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "chronoformer/blocks.hpp"
#include "chronoformer/data.hpp"

namespace chronoformer {

struct Checkpoint {
  ModelConfig config;
  std::vector<NamedParam> tensors;
  NormStats norm;
};

// `key = value` lines for every model field, in a fixed order. The same
// notation is accepted by the CLI configuration files.
void write_model_config(const ModelConfig& cfg, std::ostream& os);

// Applies one key to the config; returns false when the key is not a model
// key (the CLI layers its own keys on top). Bad values raise ConfigError.
bool apply_model_config_key(ModelConfig& cfg, const std::string& key,
                            const std::string& value);

// Every model key in write order, for nearest-key suggestions.
const std::vector<std::string>& model_config_keys();

void save_checkpoint(const Model& model, const NormStats& norm,
                     std::ostream& os);
void save_checkpoint_file(const Model& model, const NormStats& norm,
                          const std::string& path);
Checkpoint load_checkpoint(std::istream& is);
Checkpoint load_checkpoint_file(const std::string& path);

// Fresh model from the stored configuration with every parameter
// overwritten by the stored values.
Model restore_model(const Checkpoint& ck);

}  // namespace chronoformer
