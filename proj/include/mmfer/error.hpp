// SPDX-License-Identifier: Apache-2.0
// Copyright (C) 2026 mmfer contributors

#pragma once

#include <stdexcept>
#include <string>

namespace mmfer {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor extents do not fit the operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Malformed or unreadable file (dataset clips, manifests, checkpoints).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration or argument value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf encountered during training or evaluation.
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace mmfer
