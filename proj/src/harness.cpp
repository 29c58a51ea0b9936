#include "dannlab/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include <Eigen/Eigenvalues>
#include <json.hpp>

#include "dannlab/text.hpp"

namespace dannlab {

namespace fs = std::filesystem;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr double kSignificance = 0.05;
constexpr std::uint64_t kProbeStream = 300;

// ---------------------------------------------------------------------------
// Config values

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* expected) {
  throw ParseError("config key '" + key + "': cannot read '" + value + "' as " + expected);
}

double read_real(const std::string& key, const std::string& value) {
  const auto v = parse_double(value);
  if (!v || !std::isfinite(*v)) bad_value(key, value, "a finite number");
  return *v;
}

long long read_int(const std::string& key, const std::string& value) {
  const std::string_view text = trim(value);
  long long v = 0;
  const auto r = std::from_chars(text.data(), text.data() + text.size(), v);
  if (text.empty() || r.ec != std::errc{} || r.ptr != text.data() + text.size()) {
    bad_value(key, value, "an integer");
  }
  return v;
}

int read_int32(const std::string& key, const std::string& value) {
  const long long v = read_int(key, value);
  if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max()) {
    bad_value(key, value, "a 32-bit integer");
  }
  return static_cast<int>(v);
}

std::uint64_t read_seed(const std::string& key, const std::string& value) {
  const std::string_view text = trim(value);
  std::uint64_t v = 0;
  const auto r = std::from_chars(text.data(), text.data() + text.size(), v);
  if (text.empty() || r.ec != std::errc{} || r.ptr != text.data() + text.size()) {
    bad_value(key, value, "a non-negative integer");
  }
  return v;
}

bool read_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  bad_value(key, value, "a boolean");
}

std::vector<std::string> read_list(const std::string& value) {
  std::vector<std::string> items;
  for (const auto field : split_fields(value, ',')) {
    const auto item = trim(field);
    if (!item.empty()) items.emplace_back(item);
  }
  return items;
}

ExperimentKind parse_kind(const std::string& text) {
  if (text == "sweep") return ExperimentKind::Sweep;
  if (text == "compare") return ExperimentKind::Compare;
  if (text == "visualize") return ExperimentKind::Visualize;
  throw ParseError("unknown experiment kind '" + text + "' (expected sweep, compare or visualize)");
}

Normalize parse_normalize(const std::string& text) {
  if (text == "per-domain") return Normalize::PerDomain;
  if (text == "none") return Normalize::None;
  throw ParseError("unknown normalization '" + text + "' (expected per-domain or none)");
}

template <typename T, typename F>
std::string join(const std::vector<T>& items, F&& show) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i > 0) out += ',';
    out += show(items[i]);
  }
  return out;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// ---------------------------------------------------------------------------
// Experiments

NetworkSpec network_for(const ExperimentConfig& config, Variant variant, Index input_dim,
                        int shared_layers, bool domain_head) {
  NetworkSpec spec = config.network;
  spec.input_dim = input_dim;
  spec.variant = variant;
  spec.domain_head = domain_head;
  if (variant == Variant::Shallow) {
    spec.shared_layers = 1;
    spec.task_layers = 1;
  } else {
    spec.shared_layers = shared_layers;
    spec.task_layers = 2;
  }
  return spec;
}

Monitor::BatchObserver observe_as(const RunHooks& hooks, const std::string& approach) {
  if (!hooks.on_batch) return {};
  return [&hooks, approach](const std::string& role, const FeatureMatrix& data,
                            std::span<const Index> rows) {
    hooks.on_batch(approach + "/" + role, data, rows);
  };
}

TrialSet run_target_baseline(const ExperimentConfig& config, const ExperimentData& data,
                             const NetworkSpec& spec, const RunHooks& hooks) {
  return run_trials(config.train, [&](int, std::uint64_t seed) {
    DannModel model = DannModel::build(spec, seed);
    Monitor monitor;
    monitor.eval = {{"target", &data.target_test}};
    monitor.dev = &data.target_dev;
    monitor.on_batch = observe_as(hooks, "target");
    return train_baseline(model, data.target_train, config.train, seed, monitor);
  });
}

TrialSet run_source_baseline(const ExperimentConfig& config, const ExperimentData& data,
                             const NetworkSpec& spec, const RunHooks& hooks) {
  return run_trials(config.train, [&](int, std::uint64_t seed) {
    DannModel model = DannModel::build(spec, seed);
    Monitor monitor;
    monitor.eval = {{"source", &data.source_test}, {"target", &data.target_test}};
    monitor.dev = &data.source_dev;
    monitor.on_batch = observe_as(hooks, "src");
    return train_baseline(model, data.source_train, config.train, seed, monitor);
  });
}

TrialSet run_dann(const ExperimentConfig& config, const ExperimentData& data,
                  const NetworkSpec& spec, std::vector<std::pair<std::string, const LabeledDataset*>> eval,
                  const RunHooks& hooks) {
  return run_trials(config.train, [&](int, std::uint64_t seed) {
    DannModel model = DannModel::build(spec, seed);
    Monitor monitor;
    monitor.eval = eval;
    monitor.probe_source = &data.probe_source;
    monitor.probe_target = &data.probe_target;
    monitor.on_batch = observe_as(hooks, "dann");
    return train_dann(model, data.source_train, data.target_pool, config.train, seed, monitor);
  });
}

MetricSummary summary_or_nan(const TrialSet& set, const std::string& name) {
  for (const auto& s : set.aggregate) {
    if (s.name == name) return s;
  }
  return {name, kNaN, kNaN, kNaN, kNaN};
}

TableRow make_row(const ExperimentConfig& config, const TrialSet& set, const std::string& split,
                  const std::string& approach, const std::string& structure, int shared_layers) {
  TableRow row;
  row.source_name = config.source_name;
  row.approach = approach;
  row.structure = structure;
  row.shared_layers = shared_layers;
  row.trials = static_cast<int>(set.reports.size());
  row.failed = set.failed;
  row.rmse = summary_or_nan(set, split + ".rmse");
  row.pr = summary_or_nan(set, split + ".pr");
  row.ccc = summary_or_nan(set, split + ".ccc");
  return row;
}

std::optional<double> improvement_p(std::span<const double> better, std::span<const double> worse) {
  if (better.size() < 2 || worse.size() < 2) return std::nullopt;
  return one_tailed_ttest(better, worse);
}

// ---------------------------------------------------------------------------
// Output

std::ofstream open_output(const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write '" + path.string() + "'");
  return out;
}

void close_output(std::ofstream& out, const fs::path& path) {
  out.close();
  if (!out) throw InputError("failed writing '" + path.string() + "'");
}

std::string cell(double v) { return format_double(v); }

std::string cell(const std::optional<double>& v) { return v ? format_double(*v) : ""; }

std::string fixed(double v, int digits) {
  if (std::isnan(v)) return "failed";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

std::string pad(std::string text, std::size_t width) {
  if (text.size() < width) text.append(width - text.size(), ' ');
  return text;
}

nlohmann::json number(double v) {
  if (!std::isfinite(v)) return nullptr;
  return v;
}

}  // namespace

std::string to_string(ExperimentKind kind) {
  switch (kind) {
    case ExperimentKind::Sweep:
      return "sweep";
    case ExperimentKind::Compare:
      return "compare";
    case ExperimentKind::Visualize:
      return "visualize";
  }
  return "compare";
}

// ---------------------------------------------------------------------------
// ExperimentConfig

ExperimentConfig ExperimentConfig::parse(std::istream& in) {
  ExperimentConfig config;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    const std::string_view text = trim(line);
    if (text.empty() || text.front() == '#') continue;
    const auto eq = text.find('=');
    if (eq == std::string_view::npos) {
      throw ParseError("config line " + std::to_string(number) + ": expected key=value");
    }
    const std::string key(trim(text.substr(0, eq)));
    const std::string value(trim(text.substr(eq + 1)));
    if (key.empty()) throw ParseError("config line " + std::to_string(number) + ": empty key");
    try {
      config.set(key, value);
    } catch (const ParseError& e) {
      throw ParseError("config line " + std::to_string(number) + ": " + e.what());
    }
  }
  return config;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open config '" + path.string() + "'");
  ExperimentConfig config = parse(in);
  // Relative data paths resolve against the config file's directory.
  const fs::path base = path.parent_path();
  for (fs::path* p : {&config.source_csv, &config.target_csv, &config.target_pool_csv}) {
    if (!p->empty() && p->is_relative()) *p = base / *p;
  }
  return config;
}

void ExperimentConfig::set(const std::string& key, const std::string& value) {
  if (key == "experiment.kind") {
    kind = parse_kind(value);
  } else if (key == "experiment.attribute") {
    try {
      attribute = parse_attribute(value);
    } catch (const Error& e) {
      throw ParseError(e.what());
    }
  } else if (key == "experiment.source_name") {
    if (value.empty() || value.find(',') != std::string::npos) {
      bad_value(key, value, "a non-empty name without commas");
    }
    source_name = value;
  } else if (key == "experiment.structures") {
    structures.clear();
    for (const auto& item : read_list(value)) {
      try {
        structures.push_back(parse_variant(item));
      } catch (const Error& e) {
        throw ParseError(e.what());
      }
    }
  } else if (key == "output.dir") {
    out_dir = value;
  } else if (key == "data.synthetic") {
    synthetic = read_bool(key, value);
  } else if (key == "data.source") {
    source_csv = value;
  } else if (key == "data.target") {
    target_csv = value;
  } else if (key == "data.target_pool") {
    target_pool_csv = value;
  } else if (key == "data.normalize") {
    normalize = parse_normalize(value);
  } else if (key == "synthetic.n_source") {
    shift.n_source = read_int(key, value);
  } else if (key == "synthetic.n_target") {
    shift.n_target = read_int(key, value);
  } else if (key == "synthetic.latent_dim") {
    shift.latent_dim = read_int(key, value);
  } else if (key == "synthetic.feature_dim") {
    shift.feature_dim = read_int(key, value);
  } else if (key == "synthetic.rotation_degrees") {
    shift.rotation_degrees = read_real(key, value);
  } else if (key == "synthetic.translation_norm") {
    shift.translation_norm = read_real(key, value);
  } else if (key == "synthetic.noise_std") {
    shift.noise_std = read_real(key, value);
  } else if (key == "synthetic.seed") {
    shift.seed = read_seed(key, value);
  } else if (key == "split.source" || key == "split.target") {
    std::vector<double> fractions;
    for (const auto& item : read_list(value)) fractions.push_back(read_real(key, item));
    (key == "split.source" ? source_split : target_split) = fractions;
  } else if (key == "split.seed") {
    split_seed = read_seed(key, value);
  } else if (key == "network.hidden_width") {
    network.hidden_width = read_int(key, value);
  } else if (key == "network.shared_layers") {
    network.shared_layers = read_int32(key, value);
  } else if (key == "network.dropout_input") {
    network.dropout_input = read_real(key, value);
  } else if (key == "network.dropout_hidden") {
    network.dropout_hidden = read_real(key, value);
  } else if (key == "network.bn_momentum") {
    network.batch_norm.momentum = read_real(key, value);
  } else if (key == "network.bn_epsilon") {
    network.batch_norm.epsilon = read_real(key, value);
  } else if (key == "sweep.shared_layers") {
    sweep_layers.clear();
    for (const auto& item : read_list(value)) sweep_layers.push_back(read_int32(key, item));
  } else if (key == "visualize.samples") {
    visualize_samples = read_int32(key, value);
  } else if (key == "train.epochs") {
    train.epochs = read_int32(key, value);
  } else if (key == "train.batch_size") {
    train.batch_size = read_int32(key, value);
  } else if (key == "train.learning_rate") {
    train.learning_rate = read_real(key, value);
  } else if (key == "train.beta1") {
    train.beta1 = read_real(key, value);
  } else if (key == "train.beta2") {
    train.beta2 = read_real(key, value);
  } else if (key == "train.adam_epsilon") {
    train.adam_epsilon = read_real(key, value);
  } else if (key == "train.max_norm") {
    train.max_norm = read_real(key, value);
  } else if (key == "train.clip_norm") {
    train.clip_norm = read_real(key, value);
  } else if (key == "train.lambda_warmup_epochs") {
    train.lambda_warmup_epochs = read_int32(key, value);
  } else if (key == "train.lambda_final") {
    train.lambda_final = read_real(key, value);
  } else if (key == "train.trials") {
    train.trials = read_int32(key, value);
  } else if (key == "train.seed") {
    train.seed = read_seed(key, value);
  } else if (key == "train.workers") {
    train.workers = read_int32(key, value);
  } else {
    throw ParseError("unknown config key '" + key + "'");
  }
}

Normalize ExperimentConfig::effective_normalize() const {
  return normalize.value_or(synthetic ? Normalize::None : Normalize::PerDomain);
}

void ExperimentConfig::validate() const {
  if (synthetic) {
    try {
      shift.validate();
    } catch (const Error& e) {
      throw SpecError(std::string("synthetic: ") + e.what());
    }
  } else {
    const std::pair<const char*, const fs::path*> files[] = {
        {"data.source", &source_csv}, {"data.target", &target_csv}, {"data.target_pool", &target_pool_csv}};
    for (const auto& [key, path] : files) {
      if (path->empty()) throw SpecError(std::string(key) + " is required when data.synthetic=false");
      if (!fs::is_regular_file(*path)) {
        throw SpecError(std::string(key) + ": no such file '" + path->string() + "'");
      }
    }
  }
  for (const auto* fractions : {&source_split, &target_split}) {
    if (fractions->size() != 3) throw SpecError("split fractions must be train,dev,test");
    double total = 0.0;
    for (double f : *fractions) {
      if (!(f > 0.0)) throw SpecError("split fractions must be positive");
      total += f;
    }
    if (std::abs(total - 1.0) > 1e-9) throw SpecError("split fractions must sum to 1");
  }
  if (structures.empty()) throw SpecError("experiment.structures is empty");
  if (kind == ExperimentKind::Sweep) {
    if (sweep_layers.empty()) throw SpecError("sweep.shared_layers is empty");
    for (int k : sweep_layers) {
      if (k < 1 || k > 4) throw SpecError("sweep.shared_layers must be drawn from {1,2,3,4}");
    }
  }
  if (visualize_samples < 2) throw SpecError("visualize.samples must be at least 2");
  NetworkSpec probe = network_for(*this, Variant::Deep, 1, network.shared_layers, true);
  probe.validate();
  train.validate();
}

std::string ExperimentConfig::canonical() const {
  const auto real = [](double v) { return format_double(v); };
  const auto integer = [](auto v) { return std::to_string(v); };
  std::vector<std::pair<std::string, std::string>> items = {
      {"experiment.kind", to_string(kind)},
      {"experiment.attribute", to_string(attribute)},
      {"experiment.source_name", source_name},
      {"experiment.structures", join(structures, [](Variant v) { return to_string(v); })},
      {"data.synthetic", synthetic ? "true" : "false"},
      {"data.normalize", effective_normalize() == Normalize::PerDomain ? "per-domain" : "none"},
      {"split.source", join(source_split, real)},
      {"split.target", join(target_split, real)},
      {"split.seed", integer(split_seed)},
      {"network.hidden_width", integer(network.hidden_width)},
      {"network.shared_layers", integer(network.shared_layers)},
      {"network.dropout_input", real(network.dropout_input)},
      {"network.dropout_hidden", real(network.dropout_hidden)},
      {"network.bn_momentum", real(network.batch_norm.momentum)},
      {"network.bn_epsilon", real(network.batch_norm.epsilon)},
      {"sweep.shared_layers", join(sweep_layers, integer)},
      {"visualize.samples", integer(visualize_samples)},
      {"train.epochs", integer(train.epochs)},
      {"train.batch_size", integer(train.batch_size)},
      {"train.learning_rate", real(train.learning_rate)},
      {"train.beta1", real(train.beta1)},
      {"train.beta2", real(train.beta2)},
      {"train.adam_epsilon", real(train.adam_epsilon)},
      {"train.max_norm", real(train.max_norm)},
      {"train.clip_norm", real(train.clip_norm)},
      {"train.lambda_warmup_epochs", integer(train.lambda_warmup_epochs)},
      {"train.lambda_final", real(train.lambda_final)},
      {"train.trials", integer(train.trials)},
      {"train.seed", integer(train.seed)},
  };
  if (synthetic) {
    items.insert(items.end(), {
                                  {"synthetic.n_source", integer(shift.n_source)},
                                  {"synthetic.n_target", integer(shift.n_target)},
                                  {"synthetic.latent_dim", integer(shift.latent_dim)},
                                  {"synthetic.feature_dim", integer(shift.feature_dim)},
                                  {"synthetic.rotation_degrees", real(shift.rotation_degrees)},
                                  {"synthetic.translation_norm", real(shift.translation_norm)},
                                  {"synthetic.noise_std", real(shift.noise_std)},
                                  {"synthetic.seed", integer(shift.seed)},
                              });
  } else {
    items.insert(items.end(), {{"data.source", source_csv.string()},
                               {"data.target", target_csv.string()},
                               {"data.target_pool", target_pool_csv.string()}});
  }
  std::sort(items.begin(), items.end());
  std::string out;
  for (const auto& [k, v] : items) out += k + "=" + v + "\n";
  return out;
}

std::uint64_t ExperimentConfig::hash() const { return fnv1a(canonical()); }

// ---------------------------------------------------------------------------
// Data

ExperimentData prepare_data(const ExperimentConfig& config) {
  LabeledDataset source;
  LabeledDataset target;
  FeatureMatrix pool;
  if (config.synthetic) {
    SyntheticShiftSpec spec = config.shift;
    spec.attribute = config.attribute;
    ShiftTask task = generate_shift_task(spec);
    source = std::move(task.source);
    target = std::move(task.target_labeled);
    pool = std::move(task.target_pool);
  } else {
    source = to_labeled(load_csv(config.source_csv, Domain::Source), config.attribute);
    target = to_labeled(load_csv(config.target_csv, Domain::Target), config.attribute);
    pool = load_csv(config.target_pool_csv, Domain::Target).features;
  }
  if (source.features.cols() != target.features.cols() || pool.cols() != source.features.cols()) {
    throw ShapeError("source, target and pool feature counts differ");
  }

  if (config.effective_normalize() == Normalize::PerDomain) {
    const NormalizationStats source_stats = fit_normalization(source.features);
    source.features = apply_normalization(source.features, source_stats);
    FeatureMatrix all_target;
    all_target.domain = Domain::Target;
    all_target.values.resize(target.rows() + pool.rows(), pool.cols());
    all_target.values.topRows(target.rows()) = target.features.values;
    all_target.values.bottomRows(pool.rows()) = pool.values;
    const NormalizationStats target_stats = fit_normalization(all_target);
    target.features = apply_normalization(target.features, target_stats);
    pool = apply_normalization(pool, target_stats);
  }

  auto source_parts = split(source, config.source_split, config.split_seed);
  auto target_parts = split(target, config.target_split, config.split_seed + 1);
  ExperimentData data;
  data.source_train = std::move(source_parts[0]);
  data.source_dev = std::move(source_parts[1]);
  data.source_test = std::move(source_parts[2]);
  data.target_train = std::move(target_parts[0]);
  data.target_dev = std::move(target_parts[1]);
  data.target_test = std::move(target_parts[2]);
  data.target_pool = std::move(pool);

  const Index n = std::min(data.source_test.rows(), data.target_test.rows());
  std::vector<Index> rows(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) rows[static_cast<std::size_t>(i)] = i;
  data.probe_source = data.source_test.features.select(rows);
  data.probe_target = data.target_test.features.select(rows);
  return data;
}

// ---------------------------------------------------------------------------
// Tables

const TableRow& ComparisonTable::row(const std::string& approach, const std::string& structure) const {
  for (const auto& r : rows) {
    if (r.approach == approach && r.structure == structure) return r;
  }
  throw InputError("table has no row " + approach + "/" + structure);
}

bool significant_improvement(std::span<const double> better, std::span<const double> worse) {
  return one_tailed_ttest(better, worse) < kSignificance;
}

ComparisonTable run_sweep(const ExperimentConfig& config, const ExperimentData& data) {
  config.validate();
  ComparisonTable table;
  table.attribute = to_string(config.attribute);
  const Index dim = data.source_train.features.cols();
  double best = -std::numeric_limits<double>::infinity();
  for (int layers : config.sweep_layers) {
    const NetworkSpec spec = network_for(config, Variant::Deep, dim, layers, true);
    TrialSet set = run_dann(config, data, spec, {{"dev", &data.target_dev}}, {});
    TableRow row = make_row(config, set, "dev", "dann", "deep", layers);
    if (!std::isnan(row.ccc.mean) && row.ccc.mean > best) {
      best = row.ccc.mean;
      table.best_layers = layers;
    }
    table.rows.push_back(std::move(row));
    table.trial_sets.emplace("deep/dann/layers=" + std::to_string(layers), std::move(set));
  }
  return table;
}

ComparisonTable run_compare(const ExperimentConfig& config, const ExperimentData& data,
                            const RunHooks& hooks) {
  config.validate();
  ComparisonTable table;
  table.attribute = to_string(config.attribute);
  const Index dim = data.source_train.features.cols();
  for (Variant variant : config.structures) {
    const std::string structure = to_string(variant);
    const NetworkSpec plain = network_for(config, variant, dim, config.network.shared_layers, false);
    const NetworkSpec adversarial = network_for(config, variant, dim, config.network.shared_layers, true);

    TrialSet target = run_target_baseline(config, data, plain, hooks);
    TrialSet src = run_source_baseline(config, data, plain, hooks);
    TrialSet dann = run_dann(config, data, adversarial,
                             {{"source", &data.source_test}, {"target", &data.target_test}}, hooks);

    table.rows.push_back(make_row(config, target, "target", "target", structure, plain.shared_layers));
    table.rows.push_back(make_row(config, src, "target", "src", structure, plain.shared_layers));
    TableRow row = make_row(config, dann, "target", "dann", structure, adversarial.shared_layers);
    const auto d_rmse = dann.values("target", "rmse");
    const auto s_rmse = src.values("target", "rmse");
    const auto d_pr = dann.values("target", "pr");
    const auto s_pr = src.values("target", "pr");
    const auto d_ccc = dann.values("target", "ccc");
    const auto s_ccc = src.values("target", "ccc");
    row.rmse_p = improvement_p(s_rmse, d_rmse);
    row.pr_p = improvement_p(d_pr, s_pr);
    row.ccc_p = improvement_p(d_ccc, s_ccc);
    table.rows.push_back(std::move(row));

    table.trial_sets.emplace(structure + "/target", std::move(target));
    table.trial_sets.emplace(structure + "/src", std::move(src));
    table.trial_sets.emplace(structure + "/dann", std::move(dann));
  }
  return table;
}

// ---------------------------------------------------------------------------
// Representations

Projection pca_project(const Matrix& activations, std::vector<int> domain) {
  if (activations.rows() < 2) throw InputError("projection needs at least two rows");
  if (static_cast<std::size_t>(activations.rows()) != domain.size()) {
    throw InputError("projection: rows and domain labels do not align");
  }
  const Eigen::RowVectorXd mean = activations.colwise().mean();
  const Matrix centered = activations.rowwise() - mean;
  const Eigen::MatrixXd cov =
      (centered.transpose() * centered) / static_cast<double>(activations.rows() - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) throw NumericError("projection: eigen decomposition failed");

  const Index dims = activations.cols();
  const Index keep = std::min<Index>(2, dims);
  Eigen::MatrixXd axes = Eigen::MatrixXd::Zero(dims, 2);
  for (Index k = 0; k < keep; ++k) {
    Eigen::VectorXd axis = solver.eigenvectors().col(dims - 1 - k);
    Index pivot = 0;
    axis.cwiseAbs().maxCoeff(&pivot);
    if (axis(pivot) < 0.0) axis = -axis;
    axes.col(k) = axis;
  }
  Projection out;
  out.points = centered * axes;
  out.domain = std::move(domain);
  return out;
}

Projection dump_representations(DannModel& model, const FeatureMatrix& source_sample,
                                const FeatureMatrix& target_sample, int layer) {
  if (source_sample.rows() == 0 || target_sample.rows() == 0) {
    throw InputError("dump_representations needs rows from both domains");
  }
  const Matrix a = model.shared_activations(source_sample.values, layer);
  const Matrix b = model.shared_activations(target_sample.values, layer);
  Matrix pooled(a.rows() + b.rows(), a.cols());
  pooled.topRows(a.rows()) = a;
  pooled.bottomRows(b.rows()) = b;
  std::vector<int> domain(static_cast<std::size_t>(pooled.rows()), 0);
  std::fill(domain.begin() + a.rows(), domain.end(), 1);
  return pca_project(pooled, std::move(domain));
}

double nearest_centroid_separability(const Projection& projection) {
  const Matrix& p = projection.points;
  if (static_cast<std::size_t>(p.rows()) != projection.domain.size()) {
    throw InputError("separability: rows and domain labels do not align");
  }
  Eigen::RowVectorXd centroid[2] = {Eigen::RowVectorXd::Zero(p.cols()),
                                    Eigen::RowVectorXd::Zero(p.cols())};
  Index count[2] = {0, 0};
  for (Index i = 0; i < p.rows(); ++i) {
    const int d = projection.domain[static_cast<std::size_t>(i)];
    if (d != 0 && d != 1) throw InputError("separability: domain labels must be 0 or 1");
    centroid[d] += p.row(i);
    ++count[d];
  }
  if (count[0] == 0 || count[1] == 0) throw InputError("separability needs points from both domains");
  centroid[0] /= static_cast<double>(count[0]);
  centroid[1] /= static_cast<double>(count[1]);
  Index correct = 0;
  for (Index i = 0; i < p.rows(); ++i) {
    const double d0 = (p.row(i) - centroid[0]).squaredNorm();
    const double d1 = (p.row(i) - centroid[1]).squaredNorm();
    const int guess = d1 < d0 ? 1 : 0;
    correct += guess == projection.domain[static_cast<std::size_t>(i)];
  }
  return static_cast<double>(correct) / static_cast<double>(p.rows());
}

double domain_confusion_probe(DannModel& model, const FeatureMatrix& source,
                              const FeatureMatrix& target) {
  return domain_probe_accuracy(model, source, target);
}

double representation_probe_accuracy(DannModel& model, int layer, const FeatureMatrix& source,
                                      const FeatureMatrix& target, std::uint64_t seed) {
  if (source.rows() != target.rows() || source.rows() < 4) {
    throw InputError("representation probe needs equal source and target counts of at least 4");
  }
  const Index half = source.rows() / 2;
  const Index rest = source.rows() - half;
  const Matrix hs = model.shared_activations(source.values, layer);
  const Matrix ht = model.shared_activations(target.values, layer);

  const auto stack = [](const Matrix& a, const Matrix& b) {
    Matrix out(a.rows() + b.rows(), a.cols());
    out.topRows(a.rows()) = a;
    out.bottomRows(b.rows()) = b;
    return out;
  };
  Matrix train = stack(hs.topRows(half), ht.topRows(half));
  Matrix test = stack(hs.bottomRows(rest), ht.bottomRows(rest));
  const Eigen::RowVectorXd mean = train.colwise().mean();
  const Eigen::RowVectorXd std =
      ((train.rowwise() - mean).array().square().colwise().mean().sqrt()).max(kStdFloor).matrix();
  train = ((train.rowwise() - mean).array().rowwise() / std.array()).matrix();
  test = ((test.rowwise() - mean).array().rowwise() / std.array()).matrix();

  Matrix onehot = Matrix::Zero(train.rows(), 2);
  onehot.topRows(half).col(0).setOnes();
  onehot.bottomRows(half).col(1).setOnes();

  DenseLayer classifier(train.cols(), 2, "probe");
  Rng rng = derive_rng(seed, kProbeStream);
  classifier.init_uniform(rng);
  std::vector<Parameter*> params;
  classifier.collect_parameters(params);
  Adam opt(params, AdamConfig{1e-2, 0.9, 0.999, 1e-8, 0.0, 0.0});
  const ForwardContext ctx{Mode::Train};
  for (int step = 0; step < 300; ++step) {
    const Matrix logits = classifier.forward(train, ctx);
    classifier.backward(crossentropy_loss(logits, onehot).grad);
    opt.step();
  }
  std::vector<int> labels(static_cast<std::size_t>(test.rows()), 0);
  std::fill(labels.begin() + rest, labels.end(), 1);
  return domain_accuracy(softmax(classifier.forward(test, ForwardContext{Mode::Infer})), labels);
}

VisualizeResult run_visualize(const ExperimentConfig& config, const ExperimentData& data) {
  config.validate();
  const Index dim = data.source_train.features.cols();
  const int layers = config.network.shared_layers;
  const std::uint64_t seed = config.train.seed;

  DannModel dann = DannModel::build(network_for(config, Variant::Deep, dim, layers, true), seed);
  Monitor monitor;
  monitor.probe_source = &data.probe_source;
  monitor.probe_target = &data.probe_target;
  const TrialReport dann_report =
      train_dann(dann, data.source_train, data.target_pool, config.train, seed, monitor);
  if (dann_report.failed) throw NumericError("visualize: DANN training failed: " + dann_report.failure);

  DannModel src = DannModel::build(network_for(config, Variant::Deep, dim, layers, false), seed);
  const TrialReport src_report = train_baseline(src, data.source_train, config.train, seed);
  if (src_report.failed) throw NumericError("visualize: baseline training failed: " + src_report.failure);

  const Index n = std::min<Index>(config.visualize_samples, data.probe_source.rows());
  std::vector<Index> rows(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) rows[static_cast<std::size_t>(i)] = i;
  const FeatureMatrix sample_source = data.probe_source.select(rows);
  const FeatureMatrix sample_target = data.probe_target.select(rows);

  VisualizeResult result;
  for (int layer = 1; layer <= layers; ++layer) {
    result.dann.push_back(dump_representations(dann, sample_source, sample_target, layer));
    result.src.push_back(dump_representations(src, sample_source, sample_target, layer));
    result.dann_separability.push_back(nearest_centroid_separability(result.dann.back()));
    result.src_separability.push_back(nearest_centroid_separability(result.src.back()));
  }
  result.dann_domain_accuracy = domain_confusion_probe(dann, data.probe_source, data.probe_target);
  result.src_probe_accuracy =
      representation_probe_accuracy(src, layers, data.probe_source, data.probe_target, seed);
  return result;
}

// ---------------------------------------------------------------------------
// Writers

void write_table_csv(const fs::path& path, const ComparisonTable& table) {
  std::ofstream out = open_output(path);
  out << "attribute,source,structure,approach,shared_layers,trials,failed,"
         "rmse_mean,rmse_std,pr_mean,pr_std,ccc_mean,ccc_std,"
         "rmse_p,pr_p,ccc_p,rmse_significant,pr_significant,ccc_significant,selected\n";
  for (const auto& r : table.rows) {
    const auto flag = [&r](const std::optional<double>& p) -> std::string {
      return p ? (r.significant(p) ? "1" : "0") : "";
    };
    const bool selected = table.best_layers && *table.best_layers == r.shared_layers;
    out << table.attribute << ',' << r.source_name << ',' << r.structure << ',' << r.approach << ','
        << r.shared_layers << ',' << r.trials << ',' << r.failed << ',' << cell(r.rmse.mean) << ','
        << cell(r.rmse.std) << ',' << cell(r.pr.mean) << ',' << cell(r.pr.std) << ','
        << cell(r.ccc.mean) << ',' << cell(r.ccc.std) << ',' << cell(r.rmse_p) << ','
        << cell(r.pr_p) << ',' << cell(r.ccc_p) << ',' << flag(r.rmse_p) << ',' << flag(r.pr_p)
        << ',' << flag(r.ccc_p) << ',' << (selected ? "1" : "0") << '\n';
  }
  close_output(out, path);
}

void write_trials_csv(const fs::path& path, const ComparisonTable& table) {
  static const char* const kSplits[] = {"dev", "source", "target"};
  std::ofstream out = open_output(path);
  out << "set,trial,seed,failed";
  for (const char* split : kSplits) out << ',' << split << "_rmse," << split << "_pr," << split << "_ccc";
  out << ",domain_accuracy,final_lambda\n";
  for (const auto& [name, set] : table.trial_sets) {
    for (const auto& r : set.reports) {
      out << name << ',' << r.trial << ',' << r.trial_seed << ',' << (r.failed ? 1 : 0);
      for (const char* split : kSplits) {
        const auto it = std::find_if(r.splits.begin(), r.splits.end(),
                                     [split](const SplitMetrics& s) { return s.split == split; });
        if (it == r.splits.end()) {
          out << ",,,";
        } else {
          out << ',' << cell(it->metrics.rmse) << ',' << cell(it->metrics.pr) << ','
              << cell(it->metrics.ccc);
        }
      }
      out << ',' << (r.domain_accuracy.empty() ? "" : cell(r.domain_accuracy.back())) << ','
          << cell(r.final_lambda) << '\n';
    }
  }
  close_output(out, path);
}

void write_summary_json(const fs::path& path, const ComparisonTable& table,
                        const ExperimentConfig& config) {
  nlohmann::ordered_json doc;
  doc["attribute"] = table.attribute;
  doc["source"] = config.source_name;
  doc["kind"] = to_string(config.kind);
  doc["config_hash"] = hex64(config.hash());
  doc["trials"] = config.train.trials;
  if (table.best_layers) doc["best_shared_layers"] = *table.best_layers;
  nlohmann::ordered_json metrics = nlohmann::ordered_json::array();
  for (const auto& [name, set] : table.trial_sets) {
    for (const auto& s : set.aggregate) {
      metrics.push_back({{"set", name},
                         {"metric", s.name},
                         {"mean", number(s.mean)},
                         {"std", number(s.std)},
                         {"trials", static_cast<int>(set.reports.size()) - set.failed}});
    }
  }
  doc["metrics"] = std::move(metrics);
  std::ofstream out = open_output(path);
  out << doc.dump(2) << '\n';
  close_output(out, path);
}

void write_summary_text(const fs::path& path, const ComparisonTable& table,
                        const ExperimentConfig& config) {
  std::ofstream out = open_output(path);
  out << "attribute: " << table.attribute << "   source: " << config.source_name
      << "   trials: " << config.train.trials << "   config: " << hex64(config.hash()) << "\n\n";
  const auto metric = [](const MetricSummary& s, bool mark) {
    std::string text = fixed(s.mean, 4);
    if (!std::isnan(s.mean)) text += " +- " + fixed(s.std, 4);
    return text + (mark ? " *" : "");
  };
  out << pad("structure", 10) << pad("approach", 9) << pad("layers", 7) << pad("RMSE", 20)
      << pad("PR", 20) << "CCC\n";
  for (const auto& r : table.rows) {
    out << pad(r.structure, 10) << pad(r.approach, 9) << pad(std::to_string(r.shared_layers), 7)
        << pad(metric(r.rmse, r.significant(r.rmse_p)), 20)
        << pad(metric(r.pr, r.significant(r.pr_p)), 20) << metric(r.ccc, r.significant(r.ccc_p));
    if (table.best_layers && *table.best_layers == r.shared_layers) out << "   <- selected";
    out << '\n';
  }
  out << '\n';
  if (config.kind == ExperimentKind::Sweep) {
    out << "Scores on the target development split.\n";
  } else {
    out << "Scores on the target test split. * dann better than src, one-tailed Welch t-test p < 0.05.\n";
  }
  close_output(out, path);
}

void write_projection_csv(const fs::path& path, const Projection& projection) {
  std::ofstream out = open_output(path);
  out << "x,y,domain\n";
  for (Index i = 0; i < projection.points.rows(); ++i) {
    out << cell(projection.points(i, 0)) << ',' << cell(projection.points(i, 1)) << ','
        << (projection.domain[static_cast<std::size_t>(i)] == 0 ? "source" : "target") << '\n';
  }
  close_output(out, path);
}

std::vector<fs::path> run_experiment(const ExperimentConfig& config) {
  config.validate();
  fs::create_directories(config.out_dir);
  const ExperimentData data = prepare_data(config);
  std::vector<fs::path> written;
  const auto emit = [&written, &config](const std::string& name) {
    written.push_back(config.out_dir / name);
    return written.back();
  };

  switch (config.kind) {
    case ExperimentKind::Sweep: {
      const ComparisonTable table = run_sweep(config, data);
      write_table_csv(emit("sweep.csv"), table);
      write_trials_csv(emit("trials.csv"), table);
      write_summary_json(emit("summary.json"), table, config);
      write_summary_text(emit("summary.txt"), table, config);
      break;
    }
    case ExperimentKind::Compare: {
      const ComparisonTable table = run_compare(config, data);
      write_table_csv(emit("compare.csv"), table);
      write_trials_csv(emit("trials.csv"), table);
      write_summary_json(emit("summary.json"), table, config);
      write_summary_text(emit("summary.txt"), table, config);
      break;
    }
    case ExperimentKind::Visualize: {
      const VisualizeResult result = run_visualize(config, data);
      for (std::size_t k = 0; k < result.dann.size(); ++k) {
        const std::string layer = std::to_string(k + 1);
        write_projection_csv(emit("projection_layer" + layer + ".csv"), result.dann[k]);
        write_projection_csv(emit("projection_src_layer" + layer + ".csv"), result.src[k]);
      }
      const fs::path path = emit("separability.csv");
      std::ofstream out = open_output(path);
      out << "layer,dann_separability,src_separability\n";
      for (std::size_t k = 0; k < result.dann.size(); ++k) {
        out << k + 1 << ',' << cell(result.dann_separability[k]) << ','
            << cell(result.src_separability[k]) << '\n';
      }
      out << "dann_domain_accuracy," << cell(result.dann_domain_accuracy) << '\n';
      out << "src_probe_accuracy," << cell(result.src_probe_accuracy) << '\n';
      close_output(out, path);
      break;
    }
  }
  const fs::path resolved = emit("config.txt");
  std::ofstream out = open_output(resolved);
  out << config.canonical();
  close_output(out, resolved);
  return written;
}

std::vector<fs::path> export_synthetic(const ExperimentConfig& config) {
  if (!config.synthetic) throw SpecError("gen-data needs data.synthetic=true");
  SyntheticShiftSpec spec = config.shift;
  spec.attribute = config.attribute;
  const ShiftTask task = generate_shift_task(spec);
  fs::create_directories(config.out_dir);
  const fs::path files[] = {config.out_dir / "source.csv", config.out_dir / "target.csv",
                            config.out_dir / "target_pool.csv"};
  save_csv(files[0], task.source.features, &task.source.scores);
  save_csv(files[1], task.target_labeled.features, &task.target_labeled.scores);
  save_csv(files[2], task.target_pool);
  return {files[0], files[1], files[2]};
}

}  // namespace dannlab
