#pragma once

#include <filesystem>

#include "steerkit/sae.hpp"
#include "steerkit/tensor_io.hpp"

namespace steerkit {

/// Checkpoints use the per-architecture parameter names and orientations the
/// training stack exposes: ReLU/Gated/TopK/BatchTopK store encoder.weight
/// (F x d) and decoder.weight (d x F); JumpReLU stores W_enc (d x F) and
/// W_dec (F x d). Loading restores the in-memory layout.
TensorContainer sae_to_container(const SaeParams& params);
SaeParams sae_from_container(const TensorContainer& c);

void save_sae(const std::filesystem::path& path, const SaeParams& params);
SaeParams load_sae(const std::filesystem::path& path);

}  // namespace steerkit
