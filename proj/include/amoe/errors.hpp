// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace amoe {

// Bad configuration, CLI arguments, or malformed input files.
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor dimension disagreements.
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Router / score-mask inconsistencies (e.g. fewer eligible experts than top_k).
struct RoutingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite values where finite ones are required.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed delayed token grids.
struct GridError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Empty datasets or tag/token mismatches while profiling expert loads.
struct ProfileError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace amoe
