#pragma once

#include <string>
#include <utility>
#include <vector>

#include "pointcaps/model.hpp"

namespace pointcaps {

// Text checkpoint: `POINTCAPS-CKPT v1` header, then per tensor a
// `name rank d1 ... dk` line followed by 17-significant-digit values.
// Round-trips exactly.
void save_checkpoint(const std::string& path, ModelState& state);

// Fills an already-constructed state; any missing/extra/mismatched tensor is a
// version error (the checkpoint belongs to a different config).
void load_checkpoint(const std::string& path, ModelState& state);

// Flat `key = value` config text; `#` comments. Unknown keys are rejected.
void save_config(const std::string& path, const ModelConfig& config);
ModelConfig load_config(const std::string& path);

// The same key/value pairs the config file uses, for provenance records.
std::vector<std::pair<std::string, std::string>> config_kv(const ModelConfig& config);

}  // namespace pointcaps
