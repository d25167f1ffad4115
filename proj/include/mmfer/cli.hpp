// SPDX-License-Identifier: Apache-2.0
// Copyright (C) 2026 mmfer contributors

#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "mmfer/data.hpp"
#include "mmfer/model.hpp"
#include "mmfer/training.hpp"

namespace mmfer {

/// Everything a train / eval / compare-fusion run needs. Filled from a
/// key=value file, then --set overrides, then the dedicated flags.
struct RunConfig {
  std::filesystem::path data;  // manifest
  std::filesystem::path out;   // empty: runs/<timestamp>-seed<seed>
  std::filesystem::path checkpoint;
  std::filesystem::path resume;  // run directory holding last.mmck + train_state.txt
  ModelConfig model;
  TrainConfig train;
  SplitRatios split;
  double threshold = kAmbiguityThreshold;

  /// Keys given explicitly by the user, in any source.
  std::set<std::string> explicit_keys;
};

/// Schema keys in echo order.
const std::vector<std::string>& config_keys();

struct ConfigSource {
  std::string origin;  // "run.cfg:3", "--set", "--seed", ...
  std::string key, value;
  bool malformed = false;  // line without '='
};

/// Parses and validates; every problem found is reported in one ConfigError,
/// one per line.
RunConfig resolve_config(const std::vector<ConfigSource>& entries);

/// Reads `key=value` lines; blank lines and `#` comments are skipped.
std::vector<ConfigSource> read_config_file(const std::filesystem::path& path);

/// The resolved config in config-file syntax; reading it back yields the same config.
std::string render_config(const RunConfig& config);

/// 16 hex digits; FNV-1a over the sorted clip ids.
std::string clip_id_hash(std::span<const ClipFeatures> clips);

/// Entry point behind the mmfer executable. Exit codes: 0 ok, 1 usage,
/// configuration or I/O error, 2 numerical failure.
int run_cli(std::vector<std::string> args, std::ostream& out, std::ostream& err);

}  // namespace mmfer
