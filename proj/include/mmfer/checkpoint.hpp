// SPDX-License-Identifier: Apache-2.0
// Copyright (C) 2026 mmfer contributors

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>

#include "mmfer/model.hpp"

namespace mmfer {

inline constexpr std::array<char, 4> kCheckpointMagic = {'M', 'M', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Writes every parameter followed by the batch-norm buffers as f32.
template <typename T>
void save_checkpoint(const Model<T>& model, const std::filesystem::path& path);

/// Reads only the config block.
ModelConfig read_checkpoint_config(const std::filesystem::path& path);

/// Builds a model from the stored config and fills every tensor. Truncated
/// or corrupt files raise FormatError with the byte offset.
template <typename T>
Model<T> load_checkpoint(const std::filesystem::path& path);

/// Loads into an existing model. Any entry whose name or shape disagrees with
/// the model raises ConfigError naming that parameter.
template <typename T>
void load_checkpoint_into(Model<T>& model, const std::filesystem::path& path);

}  // namespace mmfer
