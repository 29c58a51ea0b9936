#include "dannlab/nn.hpp"

#include <cmath>
#include <sstream>

namespace dannlab {

namespace {

std::string shape_of(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

// Applies `fn` to the aux block only when it holds rows, otherwise yields an
// empty block with `cols` columns.
template <typename Fn>
Matrix map_aux(const Matrix& aux, Index cols, Fn&& fn) {
  if (aux.rows() == 0) return Matrix(0, cols);
  return fn(aux);
}

Matrix draw_mask(Index rows, Index cols, double rate, Rng& rng) {
  const double keep_scale = 1.0 / (1.0 - rate);
  std::bernoulli_distribution keep(1.0 - rate);
  Matrix mask(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    for (Index j = 0; j < cols; ++j) mask(i, j) = keep(rng) ? keep_scale : 0.0;
  }
  return mask;
}

}  // namespace

Matrix Batch::stacked() const {
  if (!has_aux()) return main;
  Matrix out(main.rows() + aux.rows(), main.cols());
  out.topRows(main.rows()) = main;
  out.bottomRows(aux.rows()) = aux;
  return out;
}

Matrix Module::forward(const Matrix& input, const ForwardContext& ctx) {
  return forward_batch(Batch{input, Matrix(0, input.cols())}, ctx).main;
}

Matrix Module::backward(const Matrix& upstream) {
  return backward_batch(Batch{upstream, Matrix(0, upstream.cols())}).main;
}

// ---------------------------------------------------------------------------
// DenseLayer

DenseLayer::DenseLayer(Index in_units, Index out_units, std::string name) {
  if (in_units <= 0 || out_units <= 0) {
    throw ShapeError("dense layer needs positive unit counts, got " + std::to_string(in_units) +
                     " -> " + std::to_string(out_units));
  }
  weights_ = {name + ".weight", Matrix::Zero(out_units, in_units), Matrix::Zero(out_units, in_units),
              true};
  bias_ = {name + ".bias", Matrix::Zero(1, out_units), Matrix::Zero(1, out_units), false};
}

void DenseLayer::init_uniform(Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(in_units() + out_units()));
  std::uniform_real_distribution<double> dist(-limit, limit);
  for (Index i = 0; i < weights_.value.rows(); ++i) {
    for (Index j = 0; j < weights_.value.cols(); ++j) weights_.value(i, j) = dist(rng);
  }
  bias_.value.setZero();
}

Batch DenseLayer::forward_batch(const Batch& input, const ForwardContext& ctx) {
  if (input.main.cols() != in_units() || (input.has_aux() && input.aux.cols() != in_units())) {
    throw ShapeError(weights_.name + ": expected " + std::to_string(in_units()) +
                     " input columns, got " + shape_of(input.main));
  }
  const auto affine = [this](const Matrix& x) -> Matrix {
    Matrix out = x * weights_.value.transpose();
    out.rowwise() += bias_.value.row(0);
    return out;
  };
  Batch out{affine(input.main), map_aux(input.aux, out_units(), affine)};
  if (ctx.mode == Mode::Train) {
    cached_input_ = input;
    has_cache_ = true;
  }
  return out;
}

Batch DenseLayer::backward_batch(const Batch& upstream) {
  if (!has_cache_) throw StateError(weights_.name + ": backward without a training-mode forward");
  if (upstream.main.rows() != cached_input_.main.rows() ||
      upstream.aux.rows() != cached_input_.aux.rows() || upstream.main.cols() != out_units()) {
    throw ShapeError(weights_.name + ": upstream gradient " + shape_of(upstream.main) +
                     " does not match the cached forward");
  }
  weights_.grad = upstream.main.transpose() * cached_input_.main;
  bias_.grad = upstream.main.colwise().sum();
  if (upstream.has_aux()) {
    weights_.grad += upstream.aux.transpose() * cached_input_.aux;
    bias_.grad += upstream.aux.colwise().sum();
  }
  const auto propagate = [this](const Matrix& g) -> Matrix { return g * weights_.value; };
  return Batch{propagate(upstream.main), map_aux(upstream.aux, in_units(), propagate)};
}

void DenseLayer::collect_parameters(std::vector<Parameter*>& out) {
  out.push_back(&weights_);
  out.push_back(&bias_);
}

std::string DenseLayer::describe() const {
  return "dense(" + std::to_string(in_units()) + "->" + std::to_string(out_units()) + ")";
}

// ---------------------------------------------------------------------------
// Relu

Batch Relu::forward_batch(const Batch& input, const ForwardContext& ctx) {
  if (ctx.mode == Mode::Train) {
    cached_input_ = input;
    has_cache_ = true;
  }
  return Batch{input.main.cwiseMax(0.0), input.aux.cwiseMax(0.0)};
}

Batch Relu::backward_batch(const Batch& upstream) {
  if (!has_cache_) throw StateError("relu: backward without a training-mode forward");
  if (upstream.main.rows() != cached_input_.main.rows() ||
      upstream.main.cols() != cached_input_.main.cols() ||
      upstream.aux.rows() != cached_input_.aux.rows()) {
    throw ShapeError("relu: upstream gradient does not match the cached forward");
  }
  const auto gate = [](const Matrix& g, const Matrix& x) -> Matrix {
    return (x.array() > 0.0).select(g, 0.0);
  };
  Batch out{gate(upstream.main, cached_input_.main), Matrix(0, upstream.main.cols())};
  if (upstream.has_aux()) out.aux = gate(upstream.aux, cached_input_.aux);
  return out;
}

// ---------------------------------------------------------------------------
// BatchNorm

BatchNorm::BatchNorm(Index units, BatchNormConfig config, std::string name) : config_(config) {
  if (units <= 0) throw ShapeError("batch norm needs a positive unit count");
  if (!(config.momentum > 0.0 && config.momentum < 1.0) || !(config.epsilon > 0.0)) {
    throw SpecError("batch norm momentum must lie in (0,1) and epsilon must be positive");
  }
  scale_ = {name + ".scale", Matrix::Ones(1, units), Matrix::Zero(1, units), false};
  shift_ = {name + ".shift", Matrix::Zero(1, units), Matrix::Zero(1, units), false};
  running_mean_ = {name + ".running_mean", Matrix::Zero(1, units), Matrix(), false};
  running_var_ = {name + ".running_var", Matrix::Ones(1, units), Matrix(), false};
}

Batch BatchNorm::forward_batch(const Batch& input, const ForwardContext& ctx) {
  const Index units = scale_.value.cols();
  if (input.main.cols() != units || (input.has_aux() && input.aux.cols() != units)) {
    throw ShapeError(scale_.name + ": expected " + std::to_string(units) + " columns, got " +
                     shape_of(input.main));
  }
  Eigen::RowVectorXd mean;
  Eigen::RowVectorXd var;
  if (ctx.mode == Mode::Train) {
    if (input.main.rows() < 2) {
      throw InputError(scale_.name + ": training batch needs at least 2 rows, got " +
                       std::to_string(input.main.rows()));
    }
    mean = input.main.colwise().mean();
    var = (input.main.rowwise() - mean).array().square().colwise().mean();
    const double m = config_.momentum;
    running_mean_.value.row(0) = m * running_mean_.value.row(0) + (1.0 - m) * mean;
    running_var_.value.row(0) = m * running_var_.value.row(0) + (1.0 - m) * var;
  } else {
    mean = running_mean_.value.row(0);
    var = running_var_.value.row(0);
  }
  const Eigen::RowVectorXd inv_std = (var.array() + config_.epsilon).rsqrt().matrix();

  const auto normalize = [&](const Matrix& x) -> Matrix {
    return ((x.rowwise() - mean).array().rowwise() * inv_std.array()).matrix();
  };
  const auto affine = [&](const Matrix& xhat) -> Matrix {
    Matrix out = (xhat.array().rowwise() * scale_.value.row(0).array()).matrix();
    out.rowwise() += shift_.value.row(0);
    return out;
  };

  normalized_ = Batch{normalize(input.main), map_aux(input.aux, units, normalize)};
  inv_std_ = inv_std;
  cached_mode_ = ctx.mode;
  has_cache_ = true;
  return Batch{affine(normalized_.main), map_aux(normalized_.aux, units, affine)};
}

Batch BatchNorm::backward_batch(const Batch& upstream) {
  if (!has_cache_) throw StateError(scale_.name + ": backward without a forward");
  if (upstream.main.rows() != normalized_.main.rows() ||
      upstream.aux.rows() != normalized_.aux.rows() ||
      upstream.main.cols() != normalized_.main.cols()) {
    throw ShapeError(scale_.name + ": upstream gradient does not match the cached forward");
  }
  const auto& gamma = scale_.value.row(0).array();
  const auto& inv_std = inv_std_.row(0).array();

  Eigen::RowVectorXd grad_scale =
      (upstream.main.array() * normalized_.main.array()).colwise().sum().matrix();
  Eigen::RowVectorXd grad_shift = upstream.main.colwise().sum();
  if (upstream.has_aux()) {
    grad_scale += (upstream.aux.array() * normalized_.aux.array()).colwise().sum().matrix();
    grad_shift += upstream.aux.colwise().sum();
  }
  scale_.grad = grad_scale;
  shift_.grad = grad_shift;

  const Matrix dxhat_main = (upstream.main.array().rowwise() * gamma).matrix();
  const Matrix dxhat_aux =
      upstream.has_aux() ? Matrix((upstream.aux.array().rowwise() * gamma).matrix())
                         : Matrix(0, upstream.main.cols());

  Batch out;
  if (cached_mode_ == Mode::Infer) {
    out.main = (dxhat_main.array().rowwise() * inv_std).matrix();
    out.aux = (dxhat_aux.array().rowwise() * inv_std).matrix();
    return out;
  }

  // Statistics come from the main rows only, but every row's output depends on them.
  const double k = static_cast<double>(normalized_.main.rows());
  Eigen::RowVectorXd sum_dxhat = dxhat_main.colwise().sum();
  Eigen::RowVectorXd sum_dxhat_xhat =
      (dxhat_main.array() * normalized_.main.array()).colwise().sum().matrix();
  if (upstream.has_aux()) {
    sum_dxhat += dxhat_aux.colwise().sum();
    sum_dxhat_xhat += (dxhat_aux.array() * normalized_.aux.array()).colwise().sum().matrix();
  }
  Matrix centered = dxhat_main;
  centered.rowwise() -= sum_dxhat / k;
  centered -= (normalized_.main.array().rowwise() * (sum_dxhat_xhat.array() / k)).matrix();
  out.main = (centered.array().rowwise() * inv_std).matrix();
  out.aux = (dxhat_aux.array().rowwise() * inv_std).matrix();
  return out;
}

void BatchNorm::collect_parameters(std::vector<Parameter*>& out) {
  out.push_back(&scale_);
  out.push_back(&shift_);
}

void BatchNorm::collect_state(std::vector<Parameter*>& out) {
  out.push_back(&running_mean_);
  out.push_back(&running_var_);
}

std::string BatchNorm::describe() const {
  return "batchnorm(" + std::to_string(scale_.value.cols()) + ")";
}

// ---------------------------------------------------------------------------
// Dropout

DropoutResult dropout_forward(double rate, const Matrix& input, Mode mode, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw InputError("dropout rate must lie in [0, 1)");
  if (mode == Mode::Infer || rate == 0.0) {
    return {input, Matrix::Ones(input.rows(), input.cols())};
  }
  Matrix mask = draw_mask(input.rows(), input.cols(), rate, rng);
  return {input.cwiseProduct(mask), std::move(mask)};
}

Dropout::Dropout(double rate) : rate_(rate) {
  if (!(rate >= 0.0 && rate < 1.0)) throw SpecError("dropout rate must lie in [0, 1)");
}

Batch Dropout::forward_batch(const Batch& input, const ForwardContext& ctx) {
  if (ctx.mode == Mode::Infer || rate_ == 0.0) {
    identity_ = true;
    mask_ = Batch{};
    return input;
  }
  if (ctx.rng == nullptr || (input.has_aux() && ctx.aux_rng == nullptr)) {
    throw StateError("dropout: training mode needs a random generator for every block");
  }
  identity_ = false;
  mask_.main = draw_mask(input.main.rows(), input.main.cols(), rate_, *ctx.rng);
  mask_.aux = input.has_aux() ? draw_mask(input.aux.rows(), input.aux.cols(), rate_, *ctx.aux_rng)
                              : Matrix(0, input.main.cols());
  return Batch{input.main.cwiseProduct(mask_.main),
               map_aux(input.aux, input.main.cols(),
                       [this](const Matrix& x) -> Matrix { return x.cwiseProduct(mask_.aux); })};
}

Batch Dropout::backward_batch(const Batch& upstream) {
  if (identity_) return upstream;
  if (upstream.main.rows() != mask_.main.rows() || upstream.aux.rows() != mask_.aux.rows()) {
    throw ShapeError("dropout: upstream gradient does not match the last mask");
  }
  return Batch{upstream.main.cwiseProduct(mask_.main),
               map_aux(upstream.aux, upstream.main.cols(),
                       [this](const Matrix& g) -> Matrix { return g.cwiseProduct(mask_.aux); })};
}

std::string Dropout::describe() const {
  std::ostringstream os;
  os << "dropout(" << rate_ << ")";
  return os.str();
}

// ---------------------------------------------------------------------------
// Sequential

Batch Sequential::forward_batch(const Batch& input, const ForwardContext& ctx) {
  Batch x = input;
  for (auto& m : modules_) x = m->forward_batch(x, ctx);
  return x;
}

Batch Sequential::backward_batch(const Batch& upstream) {
  Batch g = upstream;
  for (auto it = modules_.rbegin(); it != modules_.rend(); ++it) g = (*it)->backward_batch(g);
  return g;
}

void Sequential::collect_parameters(std::vector<Parameter*>& out) {
  for (auto& m : modules_) m->collect_parameters(out);
}

void Sequential::collect_state(std::vector<Parameter*>& out) {
  for (auto& m : modules_) m->collect_state(out);
}

std::string Sequential::describe() const {
  std::string s;
  for (const auto& m : modules_) {
    if (!s.empty()) s += " -> ";
    s += m->describe();
  }
  return s;
}

// ---------------------------------------------------------------------------
// Losses

VectorLoss mse_loss(const Vector& pred, const Vector& target) {
  if (pred.size() == 0) throw InputError("mse_loss: empty input");
  if (pred.size() != target.size()) {
    throw ShapeError("mse_loss: length mismatch " + std::to_string(pred.size()) + " vs " +
                     std::to_string(target.size()));
  }
  const Vector diff = pred - target;
  const double n = static_cast<double>(pred.size());
  return {diff.squaredNorm() / n, (2.0 / n) * diff};
}

Matrix softmax(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Index i = 0; i < logits.rows(); ++i) {
    const double peak = logits.row(i).maxCoeff();
    out.row(i) = (logits.row(i).array() - peak).exp().matrix();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

MatrixLoss crossentropy_loss(const Matrix& logits, const Matrix& onehot) {
  if (logits.rows() == 0) throw InputError("crossentropy_loss: empty batch");
  if (logits.rows() != onehot.rows() || logits.cols() != onehot.cols()) {
    throw ShapeError("crossentropy_loss: logits " + shape_of(logits) + " vs labels " +
                     shape_of(onehot));
  }
  for (Index i = 0; i < onehot.rows(); ++i) {
    int ones = 0;
    for (Index j = 0; j < onehot.cols(); ++j) {
      const double v = onehot(i, j);
      if (v == 1.0) {
        ++ones;
      } else if (v != 0.0) {
        ones = -1;
        break;
      }
    }
    if (ones != 1) throw InputError("invalid label: row " + std::to_string(i) + " is not one-hot");
  }
  const double n = static_cast<double>(logits.rows());
  double total = 0.0;
  for (Index i = 0; i < logits.rows(); ++i) {
    const double peak = logits.row(i).maxCoeff();
    const double log_norm = peak + std::log((logits.row(i).array() - peak).exp().sum());
    total += log_norm - logits.row(i).dot(onehot.row(i));
  }
  return {total / n, (softmax(logits) - onehot) / n};
}

// ---------------------------------------------------------------------------
// Optimizer

double global_grad_norm(std::span<Parameter* const> params) {
  double sq = 0.0;
  for (const Parameter* p : params) sq += p->grad.squaredNorm();
  return std::sqrt(sq);
}

void project_rows_max_norm(Matrix& weights, double max_norm) {
  for (Index i = 0; i < weights.rows(); ++i) {
    const double norm = weights.row(i).norm();
    if (norm > max_norm) weights.row(i) *= max_norm / norm;
  }
}

Adam::Adam(std::vector<Parameter*> params, AdamConfig config)
    : params_(std::move(params)), config_(config) {
  if (!(config.learning_rate > 0.0) || !(config.beta1 >= 0.0 && config.beta1 < 1.0) ||
      !(config.beta2 >= 0.0 && config.beta2 < 1.0) || !(config.epsilon > 0.0)) {
    throw SpecError("adam: invalid hyperparameters");
  }
  first_.reserve(params_.size());
  second_.reserve(params_.size());
  for (const Parameter* p : params_) {
    first_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    second_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
  }
}

void Adam::step() {
  for (const Parameter* p : params_) {
    if (p->grad.rows() != p->value.rows() || p->grad.cols() != p->value.cols()) {
      throw ShapeError("adam: gradient shape of " + p->name + " is " + shape_of(p->grad) +
                       ", parameter is " + shape_of(p->value));
    }
    if (!p->grad.allFinite()) throw NumericError("adam: non-finite gradient in " + p->name);
  }
  last_norm_ = global_grad_norm(params_);
  const double clip = (config_.clip_norm > 0.0 && last_norm_ > config_.clip_norm)
                          ? config_.clip_norm / last_norm_
                          : 1.0;

  ++step_count_;
  const double t = static_cast<double>(step_count_);
  const double correction1 = 1.0 - std::pow(config_.beta1, t);
  const double correction2 = 1.0 - std::pow(config_.beta2, t);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = *params_[i];
    const Matrix g = clip == 1.0 ? p.grad : Matrix(p.grad * clip);
    first_[i] = config_.beta1 * first_[i] + (1.0 - config_.beta1) * g;
    second_[i] = config_.beta2 * second_[i] + (1.0 - config_.beta2) * g.cwiseAbs2();
    const auto m_hat = first_[i].array() / correction1;
    const auto v_hat = second_[i].array() / correction2;
    p.value.array() -= config_.learning_rate * m_hat / (v_hat.sqrt() + config_.epsilon);
    if (p.max_norm_rows && config_.max_norm > 0.0) project_rows_max_norm(p.value, config_.max_norm);
  }
}

}  // namespace dannlab
