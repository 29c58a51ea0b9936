#include "dannlab/model.hpp"

#include <cmath>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>

#include "dannlab/text.hpp"

namespace dannlab {

namespace {

constexpr const char* kFormatTag = "dannlab-v1";

void add_hidden_block(Sequential& seq, Index in, Index out, const NetworkSpec& spec,
                      const std::string& name) {
  seq.add<DenseLayer>(in, out, name + ".dense");
  seq.add<BatchNorm>(out, spec.batch_norm, name + ".bn");
  seq.add<Relu>();
  seq.add<Dropout>(spec.dropout_hidden);
}

void init_dense_layers(Sequential& seq, Rng& rng) {
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (auto* dense = dynamic_cast<DenseLayer*>(&seq.at(i))) dense->init_uniform(rng);
  }
}

}  // namespace

std::string to_string(Variant v) { return v == Variant::Deep ? "deep" : "shallow"; }

Variant parse_variant(const std::string& text) {
  if (text == "deep") return Variant::Deep;
  if (text == "shallow") return Variant::Shallow;
  throw SpecError("unknown network variant '" + text + "' (expected deep or shallow)");
}

NetworkSpec NetworkSpec::deep(Index input_dim, int shared_layers) {
  NetworkSpec spec;
  spec.input_dim = input_dim;
  spec.shared_layers = shared_layers;
  spec.task_layers = 2;
  spec.variant = Variant::Deep;
  return spec;
}

NetworkSpec NetworkSpec::shallow(Index input_dim) {
  NetworkSpec spec;
  spec.input_dim = input_dim;
  spec.shared_layers = 1;
  spec.task_layers = 1;
  spec.variant = Variant::Shallow;
  return spec;
}

void NetworkSpec::validate() const {
  if (input_dim <= 0) throw SpecError("input_dim must be positive");
  if (hidden_width <= 0) throw SpecError("hidden_width must be positive");
  if (shared_layers < 1 || shared_layers > 4) {
    throw SpecError("shared_layers must be in 1..4, got " + std::to_string(shared_layers));
  }
  if (domain_layers != 2) throw SpecError("domain head must have exactly 2 layers");
  if (variant == Variant::Deep && task_layers != 2) {
    throw SpecError("deep variant needs task_layers = 2");
  }
  if (variant == Variant::Shallow && (shared_layers != 1 || task_layers != 1)) {
    throw SpecError("shallow variant needs shared_layers = 1 and task_layers = 1");
  }
  if (!(dropout_input >= 0.0 && dropout_input < 1.0) ||
      !(dropout_hidden >= 0.0 && dropout_hidden < 1.0)) {
    throw SpecError("dropout rates must lie in [0, 1)");
  }
  if (!(batch_norm.momentum > 0.0 && batch_norm.momentum < 1.0) || !(batch_norm.epsilon > 0.0)) {
    throw SpecError("batch norm momentum must lie in (0,1) and epsilon must be positive");
  }
}

DannModel::DannModel(const NetworkSpec& spec) : spec_(spec) {
  spec_.validate();
  const Index w = spec_.hidden_width;
  for (int layer = 0; layer < spec_.shared_layers; ++layer) {
    Sequential block;
    const std::string name = "shared." + std::to_string(layer);
    if (layer == 0) {
      block.add<Dropout>(spec_.dropout_input);
      add_hidden_block(block, spec_.input_dim, w, spec_, name);
    } else {
      add_hidden_block(block, w, w, spec_, name);
    }
    shared_.push_back(std::move(block));
  }
  if (spec_.task_layers == 2) add_hidden_block(task_head_, w, w, spec_, "task.0");
  task_output_ = &task_head_.add<DenseLayer>(w, 1, "task.out");
  if (spec_.domain_head) {
    add_hidden_block(domain_head_, w, w, spec_, "domain.0");
    domain_output_ = &domain_head_.add<DenseLayer>(w, 2, "domain.out");
  }
}

DannModel DannModel::build(const NetworkSpec& spec, std::uint64_t seed) {
  DannModel model(spec);
  // The domain head draws from its own stream so that a baseline without it
  // starts from identical shared and task parameters.
  Rng task_path = derive_rng(seed, 1);
  for (auto& block : model.shared_) init_dense_layers(block, task_path);
  init_dense_layers(model.task_head_, task_path);
  if (spec.domain_head) {
    Rng domain_path = derive_rng(seed, 2);
    init_dense_layers(model.domain_head_, domain_path);
  }
  return model;
}

void DannModel::check_input(const Matrix& features) const {
  if (features.cols() != spec_.input_dim) {
    throw ShapeError("model expects " + std::to_string(spec_.input_dim) + " features, got " +
                     std::to_string(features.cols()));
  }
}

Batch DannModel::forward_shared(const Batch& input, const ForwardContext& ctx) {
  Batch x = input;
  for (auto& block : shared_) x = block.forward_batch(x, ctx);
  return x;
}

Vector DannModel::predict_task(const Matrix& features) {
  check_input(features);
  const ForwardContext ctx{Mode::Infer};
  const Matrix hidden = forward_shared(Batch{features, Matrix(0, features.cols())}, ctx).main;
  return task_head_.forward(hidden, ctx).col(0);
}

Matrix DannModel::predict_domain(const Matrix& features) {
  if (!spec_.domain_head) throw StateError("model was built without a domain head");
  check_input(features);
  const ForwardContext ctx{Mode::Infer};
  const Matrix hidden = forward_shared(Batch{features, Matrix(0, features.cols())}, ctx).main;
  return softmax(domain_head_.forward(gate_.forward(hidden), ctx));
}

Matrix DannModel::shared_activations(const Matrix& features, int layer) {
  if (layer < 1 || layer > spec_.shared_layers) {
    throw InputError("shared layer index " + std::to_string(layer) + " out of range 1.." +
                     std::to_string(spec_.shared_layers));
  }
  check_input(features);
  const ForwardContext ctx{Mode::Infer};
  Matrix x = features;
  for (int i = 0; i < layer; ++i) x = shared_[static_cast<std::size_t>(i)].forward(x, ctx);
  return x;
}

ObjectiveTerms DannModel::objective(const Matrix& labeled, const Vector& scores,
                                    const Matrix& unlabeled, double lambda) {
  if (labeled.rows() == 0) throw InputError("invalid batch: objective needs labeled rows");
  if (labeled.rows() != scores.size()) throw ShapeError("objective: scores do not match rows");
  if (!(lambda >= 0.0)) throw InputError("objective: lambda must be non-negative");
  ObjectiveTerms terms;
  terms.task_loss = mse_loss(predict_task(labeled), scores).value;
  if (spec_.domain_head) {
    const Index n = labeled.rows();
    const Index m = unlabeled.rows();
    Matrix logits(n + m, 2);
    const ForwardContext ctx{Mode::Infer};
    const auto domain_logits = [&](const Matrix& x) -> Matrix {
      check_input(x);
      const Matrix hidden = forward_shared(Batch{x, Matrix(0, x.cols())}, ctx).main;
      return domain_head_.forward(gate_.forward(hidden), ctx);
    };
    logits.topRows(n) = domain_logits(labeled);
    if (m > 0) logits.bottomRows(m) = domain_logits(unlabeled);
    Matrix onehot = Matrix::Zero(n + m, 2);
    onehot.topRows(n).col(0).setOnes();
    onehot.bottomRows(m).col(1).setOnes();
    terms.domain_loss = crossentropy_loss(logits, onehot).value;
  }
  terms.composite = terms.task_loss - lambda * terms.domain_loss;
  return terms;
}

StepStats DannModel::compute_gradients(const Matrix& source, const Vector& scores,
                                       const Matrix* target, Rng& task_rng, Rng& domain_rng,
                                       GradientWeights weights) {
  check_input(source);
  if (source.rows() != scores.size()) {
    throw ShapeError("compute_gradients: " + std::to_string(scores.size()) + " scores for " +
                     std::to_string(source.rows()) + " rows");
  }
  const bool adversarial = spec_.domain_head && target != nullptr && target->rows() > 0;
  if (adversarial) check_input(*target);
  const Index ns = source.rows();
  const Index w = spec_.hidden_width;

  const ForwardContext shared_ctx{Mode::Train, &task_rng, &domain_rng};
  const Batch hidden =
      forward_shared(Batch{source, adversarial ? *target : Matrix(0, source.cols())}, shared_ctx);

  StepStats stats;
  const ForwardContext task_ctx{Mode::Train, &task_rng, nullptr};
  const Matrix pred = task_head_.forward(hidden.main, task_ctx);
  const VectorLoss task = mse_loss(pred.col(0), scores);
  if (!std::isfinite(task.value)) throw NumericError("non-finite task loss");
  stats.task_loss = task.value;
  Batch upstream{task_head_.backward(Matrix(weights.task * task.grad)), Matrix(0, w)};

  if (adversarial) {
    const Index nt = target->rows();
    const ForwardContext domain_ctx{Mode::Train, &domain_rng, nullptr};
    const Matrix logits = domain_head_.forward(gate_.forward(hidden.stacked()), domain_ctx);
    Matrix onehot = Matrix::Zero(ns + nt, 2);
    onehot.topRows(ns).col(0).setOnes();
    onehot.bottomRows(nt).col(1).setOnes();
    const MatrixLoss domain = crossentropy_loss(logits, onehot);
    if (!std::isfinite(domain.value)) throw NumericError("non-finite domain loss");
    stats.domain_loss = domain.value;
    Index correct = 0;
    for (Index i = 0; i < ns + nt; ++i) {
      const int predicted = logits(i, 1) > logits(i, 0) ? 1 : 0;
      correct += predicted == (i < ns ? 0 : 1);
    }
    stats.domain_accuracy = static_cast<double>(correct) / static_cast<double>(ns + nt);

    const Matrix reversed =
        gate_.backward(domain_head_.backward(Matrix(weights.domain * domain.grad)));
    upstream.main += reversed.topRows(ns);
    upstream.aux = reversed.bottomRows(nt);
  } else {
    for (Parameter* p : domain_parameters()) p->grad.setZero();
  }

  for (auto it = shared_.rbegin(); it != shared_.rend(); ++it) upstream = it->backward_batch(upstream);
  return stats;
}

std::vector<Parameter*> DannModel::feature_parameters() {
  std::vector<Parameter*> out;
  for (auto& block : shared_) block.collect_parameters(out);
  return out;
}

std::vector<Parameter*> DannModel::task_parameters() {
  std::vector<Parameter*> out;
  task_head_.collect_parameters(out);
  return out;
}

std::vector<Parameter*> DannModel::domain_parameters() {
  std::vector<Parameter*> out;
  domain_head_.collect_parameters(out);
  return out;
}

std::vector<Parameter*> DannModel::all_parameters() {
  std::vector<Parameter*> out = feature_parameters();
  for (Parameter* p : task_parameters()) out.push_back(p);
  for (Parameter* p : domain_parameters()) out.push_back(p);
  return out;
}

std::vector<Parameter*> DannModel::state_tensors() {
  std::vector<Parameter*> out;
  for (auto& block : shared_) block.collect_state(out);
  task_head_.collect_state(out);
  domain_head_.collect_state(out);
  return out;
}

// ---------------------------------------------------------------------------
// Serialization

void DannModel::save(std::ostream& out) {
  out << kFormatTag << '\n';
  out << "spec input_dim " << spec_.input_dim << " shared_layers " << spec_.shared_layers
      << " task_layers " << spec_.task_layers << " domain_layers " << spec_.domain_layers
      << " hidden_width " << spec_.hidden_width << " variant " << to_string(spec_.variant)
      << " dropout_input " << format_double(spec_.dropout_input) << " dropout_hidden "
      << format_double(spec_.dropout_hidden) << " bn_momentum "
      << format_double(spec_.batch_norm.momentum) << " bn_epsilon "
      << format_double(spec_.batch_norm.epsilon) << " domain_head "
      << (spec_.domain_head ? 1 : 0) << '\n';
  out << "lambda " << format_double(gate_.lambda()) << '\n';
  std::vector<Parameter*> tensors = all_parameters();
  for (Parameter* p : state_tensors()) tensors.push_back(p);
  out << "tensors " << tensors.size() << '\n';
  for (const Parameter* p : tensors) {
    out << "tensor " << p->name << ' ' << p->value.rows() << ' ' << p->value.cols() << '\n';
    for (Index i = 0; i < p->value.rows(); ++i) {
      for (Index j = 0; j < p->value.cols(); ++j) {
        if (j > 0) out << ' ';
        out << format_double(p->value(i, j));
      }
      out << '\n';
    }
  }
  if (!out) throw Error("failed to write model");
}

DannModel DannModel::load(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || trim(line) != kFormatTag) {
    throw ParseError("model file does not start with the " + std::string(kFormatTag) + " tag");
  }
  if (!std::getline(in, line)) throw ParseError("model file: missing spec line");
  std::istringstream spec_line(line);
  std::string word;
  spec_line >> word;
  if (word != "spec") throw ParseError("model file: expected spec line");
  std::map<std::string, std::string> fields;
  std::string key;
  std::string value;
  while (spec_line >> key >> value) fields[key] = value;
  const auto field = [&](const std::string& name) -> const std::string& {
    const auto it = fields.find(name);
    if (it == fields.end()) throw ParseError("model file: spec lacks '" + name + "'");
    return it->second;
  };
  const auto number = [&](const std::string& name) {
    const auto v = parse_double(field(name));
    if (!v) throw ParseError("model file: bad number for '" + name + "'");
    return *v;
  };
  NetworkSpec spec;
  spec.input_dim = static_cast<Index>(number("input_dim"));
  spec.shared_layers = static_cast<int>(number("shared_layers"));
  spec.task_layers = static_cast<int>(number("task_layers"));
  spec.domain_layers = static_cast<int>(number("domain_layers"));
  spec.hidden_width = static_cast<Index>(number("hidden_width"));
  spec.variant = parse_variant(field("variant"));
  spec.dropout_input = number("dropout_input");
  spec.dropout_hidden = number("dropout_hidden");
  spec.batch_norm.momentum = number("bn_momentum");
  spec.batch_norm.epsilon = number("bn_epsilon");
  spec.domain_head = number("domain_head") != 0.0;

  DannModel model(spec);
  if (!(in >> word) || word != "lambda" || !(in >> value) || !parse_double(value)) {
    throw ParseError("model file: missing lambda");
  }
  model.gate_.set_lambda(*parse_double(value));

  std::vector<Parameter*> tensors = model.all_parameters();
  for (Parameter* p : model.state_tensors()) tensors.push_back(p);
  std::size_t count = 0;
  if (!(in >> word) || word != "tensors" || !(in >> count) || count != tensors.size()) {
    throw ParseError("model file: tensor count does not match the spec");
  }
  for (Parameter* p : tensors) {
    std::string name;
    Index rows = 0;
    Index cols = 0;
    if (!(in >> word >> name >> rows >> cols) || word != "tensor") {
      throw ParseError("model file: malformed tensor header");
    }
    if (name != p->name || rows != p->value.rows() || cols != p->value.cols()) {
      throw ParseError("model file: expected tensor " + p->name + ", found " + name);
    }
    for (Index i = 0; i < rows; ++i) {
      for (Index j = 0; j < cols; ++j) {
        if (!(in >> value)) throw ParseError("model file: truncated tensor " + name);
        const auto v = parse_double(value);
        if (!v) throw ParseError("model file: bad value '" + value + "' in " + name);
        p->value(i, j) = *v;
      }
    }
  }
  return model;
}

}  // namespace dannlab
