#pragma once

// JSON forms of the configuration structs. Missing keys keep the value the
// target already holds, so a partial document overlays defaults.

#include "penet/model.h"

#include <json.hpp>

namespace penet::model {

void to_json(nlohmann::json& j, const PENetConfig& cfg);
void from_json(const nlohmann::json& j, PENetConfig& cfg);

} // namespace penet::model

#include "penet/synthgen.h"

namespace penet::synth {

void to_json(nlohmann::json& j, const SynthConfig& cfg);
void from_json(const nlohmann::json& j, SynthConfig& cfg);

} // namespace penet::synth
