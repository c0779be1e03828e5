#pragma once

#include <stdexcept>
#include <string>

namespace rigslam {

/// Base class for all rigslam errors.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Rotation angle too close to pi for a well-conditioned logarithm.
struct AngleNearPi : Error {
  using Error::Error;
};

/// A point landed at or behind the projection plane (Z <= z_min).
struct BehindCamera : Error {
  using Error::Error;
};

struct IndexOutOfRange : Error {
  using Error::Error;
};

struct TooFewMatches : Error {
  using Error::Error;
};

struct UnknownId : Error {
  using Error::Error;
};

/// Damped normal equations unsolvable even at the maximum damping.
struct SingularSystem : Error {
  using Error::Error;
};

struct InsufficientData : Error {
  using Error::Error;
};

/// Descriptor space too crowded to keep the pairwise-separation invariant.
struct SeparationUnsatisfiable : Error {
  using Error::Error;
};

/// Trajectory association produced zero pairs.
struct NoOverlap : Error {
  using Error::Error;
};

/// Alignment input is collinear or coincident.
struct DegenerateGeometry : Error {
  using Error::Error;
};

/// Loop relative-pose solve did not reach the inlier threshold.
struct LoopRejected : Error {
  using Error::Error;
};

struct NotTracking : Error {
  using Error::Error;
};

/// Malformed or inconsistent configuration file. Carries the offending
/// key (and line, when the parser provides one) in the message.
struct ConfigError : Error {
  using Error::Error;
};

}  // namespace rigslam
