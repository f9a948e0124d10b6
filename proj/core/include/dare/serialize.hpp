#pragma once

#include <nlohmann/json.hpp>

#include "dare/drift.hpp"
#include "dare/model.hpp"

namespace dare {

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

void to_json(nlohmann::json& j, const DriftProfile& p);
void from_json(const nlohmann::json& j, DriftProfile& p);

}  // namespace dare
