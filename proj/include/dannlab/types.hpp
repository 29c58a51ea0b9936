#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

#include <Eigen/Core>

namespace dannlab {

// Samples are rows, features are columns.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;
using Rng = std::mt19937_64;

enum class Mode { Train, Infer };

/// Independent generator for a named sub-stream of a base seed.
inline Rng derive_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return Rng(seq);
}

// Error hierarchy. Everything derives from Error so callers can catch one type.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
  virtual const char* kind() const noexcept { return "error"; }
};

struct ShapeError : Error {
  using Error::Error;
  const char* kind() const noexcept override { return "invalid-shape"; }
};

struct StateError : Error {
  using Error::Error;
  const char* kind() const noexcept override { return "invalid-state"; }
};

struct InputError : Error {
  using Error::Error;
  const char* kind() const noexcept override { return "invalid-input"; }
};

struct NumericError : Error {
  using Error::Error;
  const char* kind() const noexcept override { return "numeric"; }
};

struct SpecError : Error {
  using Error::Error;
  const char* kind() const noexcept override { return "invalid-spec"; }
};

struct ParseError : Error {
  using Error::Error;
  const char* kind() const noexcept override { return "parse"; }
};

}  // namespace dannlab
