#pragma once

#include <cmath>

#include "dannlab/types.hpp"

namespace dannlab {

/// Gradient reversal gate between the shared layers and the domain head.
///
/// Forward is the identity. Backward multiplies the incoming gradient by
/// -lambda, so the shared layers ascend the domain loss that the domain head
/// descends.
class GradientReversal {
 public:
  explicit GradientReversal(double lambda = 0.0) { set_lambda(lambda); }

  double lambda() const { return lambda_; }

  void set_lambda(double lambda) {
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) {
      throw InputError("gradient reversal weight must be finite and non-negative");
    }
    lambda_ = lambda;
  }

  Matrix forward(const Matrix& input) const { return input; }

  Matrix backward(const Matrix& upstream) const { return -lambda_ * upstream; }

 private:
  double lambda_ = 0.0;
};

}  // namespace dannlab
