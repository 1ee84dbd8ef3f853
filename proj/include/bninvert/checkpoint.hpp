#pragma once

// BNCK v1 checkpoint format: magic `BNCK`, u32 LE version, payload
// (model dims, recursive layer list with per-layer hyperparameters and
// f32 LE parameter buffers), trailing CRC32 of the payload. Round-trips
// are bitwise exact.

#include <cstdint>
#include <string>
#include <vector>

#include "bninvert/layers.hpp"

namespace bninvert {

std::vector<std::uint8_t> serialize_model(const Model& model);
Model deserialize_model(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const Model& model, const std::string& path);
Model load_checkpoint(const std::string& path);

std::string sha256_hex(const void* data, std::size_t len);

// SHA-256 of the serialized model; gradient buffers and requires_grad
// flags are not part of the serialization.
std::string model_sha256(const Model& model);

std::uint32_t crc32_of(const void* data, std::size_t len);

}  // namespace bninvert
