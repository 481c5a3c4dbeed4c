#pragma once

#include "tstream/json_util.hpp"
#include "tstream/transtreamer.hpp"

namespace tstream::model {

Json model_config_to_json(const ModelConfig& config);
// Missing keys keep their defaults; unknown keys and invalid values throw
// ConfigError with the key path.
ModelConfig model_config_from_json(JsonReader reader);

}  // namespace tstream::model
