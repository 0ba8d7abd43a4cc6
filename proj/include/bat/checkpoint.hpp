#pragma once

#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "bat/tensor.hpp"

namespace bat {

/// Raw tensor content as stored in a checkpoint.
struct TensorBlob {
  Shape shape;
  std::vector<double> values;
};

using ParamBlobs = std::vector<std::pair<std::string, TensorBlob>>;

/// Binary container: leading magic "BATCKPT1", a JSON metadata block
/// (model config, sensor registry), then name -> shape + little-endian
/// float64 array for every parameter.
void save_checkpoint(const std::string& path, const nlohmann::json& meta,
                     const ParamBlobs& params);

struct CheckpointData {
  nlohmann::json meta;
  ParamBlobs params;

  const TensorBlob* find(const std::string& name) const;
};

CheckpointData load_checkpoint(const std::string& path);

}  // namespace bat
