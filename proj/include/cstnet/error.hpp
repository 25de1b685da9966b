// Copyright 2026 The cstnet Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace cstnet {

/// Base class for every error thrown by the library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Mismatched tensor extents or an inconsistent token/grid layout.
struct ShapeError : Error {
  using Error::Error;
};

/// Invalid model or run configuration.
struct ConfigError : Error {
  using Error::Error;
};

/// A caller broke an operation's stated precondition.
struct ContractError : Error {
  using Error::Error;
};

/// Non-finite values where finite ones are required.
struct NumericError : Error {
  using Error::Error;
};

/// A function required to be deterministic produced differing results.
struct DeterminismError : Error {
  using Error::Error;
};

/// File-format or filesystem failure.
struct IoError : Error {
  using Error::Error;
};

}  // namespace cstnet
