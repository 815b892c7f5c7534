#pragma once

#include <filesystem>
#include <optional>

#include <json.hpp>

#include "t2tbio/model.hpp"
#include "t2tbio/trainer.hpp"

namespace t2tbio {

// Directory layout: manifest.json (config, tensor names/shapes/dtype/byte
// offsets), weights.bin (raw little-endian tensors in manifest order),
// optimizer.bin (Adam first then second moments, same layout) and rng_state.
nlohmann::ordered_json model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

void save_checkpoint(const std::filesystem::path& dir, const ModelConfig& cfg, const TrainState& state,
                     const nlohmann::json& meta = nlohmann::json::object());

struct LoadedCheckpoint {
    ModelConfig config;
    TrainState state;
    nlohmann::json manifest;
};

// Validates shapes against the config and rejects non-finite tensors.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir);

// Parameters only, for any precision; used by the gradient-check build.
template <typename T>
void save_params(const std::filesystem::path& dir, const ModelConfig& cfg, const ParamStore<T>& params);
template <typename T>
ParamStore<T> load_params(const std::filesystem::path& dir, ModelConfig* cfg_out = nullptr);

}  // namespace t2tbio
