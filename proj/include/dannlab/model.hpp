#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "dannlab/grl.hpp"
#include "dannlab/nn.hpp"

namespace dannlab {

enum class Variant { Deep, Shallow };

std::string to_string(Variant v);
Variant parse_variant(const std::string& text);

/// Layer layout of a domain-adversarial network.
///
/// Counts include the output layer of each head: a deep task head is one
/// hidden block plus the linear regressor, a shallow one is the regressor
/// alone. The domain head is always one hidden block plus a 2-logit layer.
struct NetworkSpec {
  Index input_dim = 0;
  int shared_layers = 1;
  int task_layers = 2;
  int domain_layers = 2;
  Index hidden_width = 256;
  Variant variant = Variant::Deep;
  double dropout_input = 0.2;
  double dropout_hidden = 0.5;
  BatchNormConfig batch_norm{};
  // Baseline networks are built without the domain branch.
  bool domain_head = true;

  static NetworkSpec deep(Index input_dim, int shared_layers);
  static NetworkSpec shallow(Index input_dim);

  void validate() const;
};

struct ObjectiveTerms {
  double task_loss = 0.0;
  double domain_loss = 0.0;
  double composite = 0.0;
};

/// Loss scaling used by `compute_gradients`; the defaults give the training gradient.
struct GradientWeights {
  double task = 1.0;
  double domain = 1.0;
};

struct StepStats {
  double task_loss = 0.0;
  double domain_loss = 0.0;
  double domain_accuracy = 0.0;
};

/// Shared representation, task regressor and domain classifier behind a
/// gradient reversal gate.
class DannModel {
 public:
  static DannModel build(const NetworkSpec& spec, std::uint64_t seed);

  DannModel(DannModel&&) = default;
  DannModel& operator=(DannModel&&) = default;

  const NetworkSpec& spec() const { return spec_; }
  GradientReversal& gate() { return gate_; }
  const GradientReversal& gate() const { return gate_; }
  bool has_domain_head() const { return spec_.domain_head; }

  Vector predict_task(const Matrix& features);
  Matrix predict_domain(const Matrix& features);
  /// Inference-mode output of shared block `layer` (1-based).
  Matrix shared_activations(const Matrix& features, int layer);

  /// Logged value of the adversarial objective: task MSE on the labeled rows
  /// minus lambda times the domain cross-entropy averaged over the union
  /// (source = class 0, target = class 1). Evaluated in inference mode.
  ObjectiveTerms objective(const Matrix& labeled, const Vector& scores, const Matrix& unlabeled,
                           double lambda);

  /// Training-mode forward and backward on one batch, leaving gradients in the
  /// parameters. Without `target` (or without a domain head) only the task
  /// path runs. The gate weight is taken from `gate()`.
  ///
  /// Source rows draw dropout masks from `task_rng`; target rows and the domain
  /// head draw from `domain_rng`. Source rows also supply the batch statistics
  /// of the shared layers, so the task path never depends on target rows.
  StepStats compute_gradients(const Matrix& source, const Vector& scores, const Matrix* target,
                              Rng& task_rng, Rng& domain_rng, GradientWeights weights = {});

  std::vector<Parameter*> feature_parameters();
  std::vector<Parameter*> task_parameters();
  std::vector<Parameter*> domain_parameters();
  std::vector<Parameter*> all_parameters();
  std::vector<Parameter*> state_tensors();

  Sequential& shared_block(int layer) { return shared_.at(static_cast<std::size_t>(layer)); }
  Sequential& task_head() { return task_head_; }
  Sequential& domain_head() { return domain_head_; }
  DenseLayer& task_output() { return *task_output_; }
  DenseLayer& domain_output() { return *domain_output_; }

  /// Text format: "dannlab-v1" tag, the spec, then every named tensor as
  /// `tensor <name> <rows> <cols>` followed by its values in row-major order.
  void save(std::ostream& out);
  static DannModel load(std::istream& in);

 private:
  explicit DannModel(const NetworkSpec& spec);

  Batch forward_shared(const Batch& input, const ForwardContext& ctx);
  void check_input(const Matrix& features) const;

  NetworkSpec spec_;
  std::vector<Sequential> shared_;
  Sequential task_head_;
  Sequential domain_head_;
  DenseLayer* task_output_ = nullptr;
  DenseLayer* domain_output_ = nullptr;
  GradientReversal gate_;
};

}  // namespace dannlab
