#pragma once

#include <string>

#include "tubefield/model.hpp"

namespace tubefield {

// "TFCK" checkpoint: magic, u16 version, u32 header length, JSON header
// (hyperparameters + array manifest with names/shapes/offsets), then raw
// little-endian f32 payload in manifest order.
void save_checkpoint(const Params<float>& params, const std::string& path);
Params<float> load_checkpoint(const std::string& path);

} // namespace tubefield
