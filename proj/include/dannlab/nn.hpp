#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dannlab/types.hpp"

namespace dannlab {

/// A trainable (or persisted) tensor together with its most recent gradient.
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  // Rows are per-unit incoming weight vectors and fall under the max-norm constraint.
  bool max_norm_rows = false;
};

/// Rows flowing through a layer stack, kept as two blocks.
///
/// `main` rows define batch statistics and draw dropout masks from the
/// context's primary generator. `aux` rows (possibly empty) ride along: they
/// are normalized with the statistics of `main` and draw from the auxiliary
/// generator. Arithmetic on `main` is therefore independent of `aux`.
struct Batch {
  Matrix main;
  Matrix aux;

  Index rows() const { return main.rows() + aux.rows(); }
  bool has_aux() const { return aux.rows() > 0; }
  Matrix stacked() const;
};

struct ForwardContext {
  Mode mode = Mode::Infer;
  Rng* rng = nullptr;
  Rng* aux_rng = nullptr;
};

class Module {
 public:
  virtual ~Module() = default;

  virtual Batch forward_batch(const Batch& input, const ForwardContext& ctx) = 0;
  virtual Batch backward_batch(const Batch& upstream) = 0;
  virtual void collect_parameters(std::vector<Parameter*>& /*out*/) {}
  // Non-trainable tensors that must be persisted (running statistics).
  virtual void collect_state(std::vector<Parameter*>& /*out*/) {}
  virtual std::string describe() const = 0;

  Matrix forward(const Matrix& input, const ForwardContext& ctx);
  Matrix backward(const Matrix& upstream);
};

class DenseLayer final : public Module {
 public:
  DenseLayer(Index in_units, Index out_units, std::string name = "dense");

  /// Uniform in +-sqrt(6 / (fan_in + fan_out)), zero bias.
  void init_uniform(Rng& rng);

  Batch forward_batch(const Batch& input, const ForwardContext& ctx) override;
  Batch backward_batch(const Batch& upstream) override;
  void collect_parameters(std::vector<Parameter*>& out) override;
  std::string describe() const override;

  Index in_units() const { return weights_.value.cols(); }
  Index out_units() const { return weights_.value.rows(); }
  Matrix& weights() { return weights_.value; }
  const Matrix& weights() const { return weights_.value; }
  // Stored as a 1 x out_units row.
  Matrix& bias() { return bias_.value; }
  const Matrix& bias() const { return bias_.value; }
  const Matrix& weight_grad() const { return weights_.grad; }
  const Matrix& bias_grad() const { return bias_.grad; }

 private:
  Parameter weights_;
  Parameter bias_;
  Batch cached_input_;
  bool has_cache_ = false;
};

class Relu final : public Module {
 public:
  Batch forward_batch(const Batch& input, const ForwardContext& ctx) override;
  Batch backward_batch(const Batch& upstream) override;
  std::string describe() const override { return "relu"; }

 private:
  Batch cached_input_;
  bool has_cache_ = false;
};

struct BatchNormConfig {
  double momentum = 0.99;
  double epsilon = 1e-5;
};

class BatchNorm final : public Module {
 public:
  BatchNorm(Index units, BatchNormConfig config = {}, std::string name = "bn");

  Batch forward_batch(const Batch& input, const ForwardContext& ctx) override;
  Batch backward_batch(const Batch& upstream) override;
  void collect_parameters(std::vector<Parameter*>& out) override;
  void collect_state(std::vector<Parameter*>& out) override;
  std::string describe() const override;

  Matrix& scale() { return scale_.value; }
  Matrix& shift() { return shift_.value; }
  const Matrix& running_mean() const { return running_mean_.value; }
  const Matrix& running_var() const { return running_var_.value; }
  const BatchNormConfig& config() const { return config_; }

 private:
  Parameter scale_;
  Parameter shift_;
  Parameter running_mean_;
  Parameter running_var_;
  BatchNormConfig config_;

  // Backward cache.
  Batch normalized_;
  Matrix inv_std_;  // 1 x units
  Mode cached_mode_ = Mode::Infer;
  bool has_cache_ = false;
};

class Dropout final : public Module {
 public:
  explicit Dropout(double rate);

  Batch forward_batch(const Batch& input, const ForwardContext& ctx) override;
  Batch backward_batch(const Batch& upstream) override;
  std::string describe() const override;

  double rate() const { return rate_; }
  const Batch& last_mask() const { return mask_; }

 private:
  double rate_;
  Batch mask_;  // already scaled by 1 / (1 - rate); empty when the last pass was the identity
  bool identity_ = true;
};

struct DropoutResult {
  Matrix output;
  Matrix mask;  // 0 or 1 / (1 - rate) per element; ones in inference mode
};

/// Elementwise inverted dropout. Inference mode and rate 0 are exact identities.
DropoutResult dropout_forward(double rate, const Matrix& input, Mode mode, Rng& rng);

/// Ordered stack of modules.
class Sequential final : public Module {
 public:
  Sequential() = default;
  Sequential(Sequential&&) = default;
  Sequential& operator=(Sequential&&) = default;

  template <typename M, typename... Args>
  M& add(Args&&... args) {
    auto module = std::make_unique<M>(std::forward<Args>(args)...);
    M& ref = *module;
    modules_.push_back(std::move(module));
    return ref;
  }

  Batch forward_batch(const Batch& input, const ForwardContext& ctx) override;
  Batch backward_batch(const Batch& upstream) override;
  void collect_parameters(std::vector<Parameter*>& out) override;
  void collect_state(std::vector<Parameter*>& out) override;
  std::string describe() const override;

  std::size_t size() const { return modules_.size(); }
  Module& at(std::size_t i) { return *modules_.at(i); }

 private:
  std::vector<std::unique_ptr<Module>> modules_;
};

// ---------------------------------------------------------------------------
// Losses

struct VectorLoss {
  double value = 0.0;
  Vector grad;
};

struct MatrixLoss {
  double value = 0.0;
  Matrix grad;
};

/// Mean squared error; gradient 2 (pred - target) / n.
VectorLoss mse_loss(const Vector& pred, const Vector& target);

/// Row-wise softmax, numerically stabilized.
Matrix softmax(const Matrix& logits);

/// Softmax followed by mean negative log-likelihood over rows.
/// Gradient is (softmax - onehot) / rows.
MatrixLoss crossentropy_loss(const Matrix& logits, const Matrix& onehot);

// ---------------------------------------------------------------------------
// Optimizer

struct AdamConfig {
  double learning_rate = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double max_norm = 4.0;    // <= 0 disables the constraint
  double clip_norm = 10.0;  // <= 0 disables clipping
};

double global_grad_norm(std::span<Parameter* const> params);

/// Rescales every row of `weights` whose Euclidean norm exceeds `max_norm`.
void project_rows_max_norm(Matrix& weights, double max_norm);

/// Adam over one parameter group.
///
/// A step (1) rejects non-finite gradients without touching any state,
/// (2) rescales all gradients by clip_norm / norm when their joint norm exceeds
/// clip_norm, (3) applies the bias-corrected update and (4) projects rows of
/// max-norm constrained tensors back onto the max_norm ball.
class Adam {
 public:
  Adam(std::vector<Parameter*> params, AdamConfig config);

  void step();

  std::int64_t step_count() const { return step_count_; }
  const AdamConfig& config() const { return config_; }
  const std::vector<Matrix>& first_moments() const { return first_; }
  const std::vector<Matrix>& second_moments() const { return second_; }
  // Gradient norm seen by the last step, before clipping.
  double last_grad_norm() const { return last_norm_; }

 private:
  std::vector<Parameter*> params_;
  AdamConfig config_;
  std::vector<Matrix> first_;
  std::vector<Matrix> second_;
  std::int64_t step_count_ = 0;
  double last_norm_ = 0.0;
};

}  // namespace dannlab
