#include <doctest.h>

#include <cmath>
#include <random>
#include <set>
#include <vector>

#include "dannlab/trainer.hpp"

using namespace dannlab;

namespace {

TrainConfig quick(int epochs) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch_size = 32;
  c.learning_rate = 1e-3;
  c.lambda_warmup_epochs = 0;
  c.trials = 1;
  return c;
}

NetworkSpec small_net(Index input_dim, bool domain_head = true) {
  NetworkSpec spec = NetworkSpec::deep(input_dim, 2);
  spec.hidden_width = 16;
  spec.domain_head = domain_head;
  return spec;
}

SyntheticShiftSpec small_shift() {
  SyntheticShiftSpec s;
  s.n_source = 200;
  s.n_target = 150;
  s.latent_dim = 3;
  s.feature_dim = 10;
  return s;
}

std::vector<double> flat(DannModel& model, std::vector<Parameter*> params) {
  std::vector<double> out;
  for (Parameter* p : params) out.insert(out.end(), p->value.data(), p->value.data() + p->value.size());
  for (Parameter* p : model.state_tensors()) {
    out.insert(out.end(), p->value.data(), p->value.data() + p->value.size());
  }
  return out;
}

std::vector<double> task_path(DannModel& model) {
  auto params = model.feature_parameters();
  for (Parameter* p : model.task_parameters()) params.push_back(p);
  for (int l = 0; l < model.spec().shared_layers; ++l) model.shared_block(l).collect_state(params);
  model.task_head().collect_state(params);
  std::vector<double> out;
  for (Parameter* p : params) out.insert(out.end(), p->value.data(), p->value.data() + p->value.size());
  return out;
}

}  // namespace

TEST_CASE("lambda schedule") {
  const LambdaSchedule s(10, 100, 1.0);
  CHECK(s.at(1) == 0.0);
  CHECK(s.at(10) == 0.0);
  CHECK(s.at(11) == doctest::Approx(1.0 / 90.0).epsilon(1e-15));
  CHECK(s.at(55) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(s.at(100) == 1.0);
  double previous = 0.0;
  for (int e = 1; e <= 100; ++e) {
    CHECK(s.at(e) >= previous);
    previous = s.at(e);
  }
  CHECK_THROWS_AS(s.at(0), InputError);
  CHECK_THROWS_AS(s.at(101), InputError);
  CHECK_THROWS_AS(LambdaSchedule(10, 10, 1.0), InputError);
  CHECK_THROWS_AS(LambdaSchedule(1, 5, -1.0), InputError);
  CHECK(LambdaSchedule(0, 4, 2.0).at(2) == 1.0);
}

TEST_CASE("train config validation") {
  TrainConfig c = quick(3);
  CHECK_NOTHROW(c.validate());
  c.batch_size = 7;
  CHECK_THROWS_AS(c.validate(), SpecError);
  c = quick(3);
  c.lambda_warmup_epochs = 3;
  CHECK_THROWS_AS(c.validate(), SpecError);
  c = quick(3);
  c.learning_rate = 0;
  CHECK_THROWS_AS(c.validate(), SpecError);
  c = quick(3);
  c.trials = 0;
  CHECK_THROWS_AS(c.validate(), SpecError);
}

TEST_CASE("sample_unlabeled") {
  FeatureMatrix pool;
  pool.values.resize(50, 2);
  for (Index i = 0; i < 50; ++i) {
    pool.ids.push_back(std::to_string(i));
    pool.values.row(i) << static_cast<double>(i), 0.0;
  }
  pool.domain = Domain::Target;
  Rng rng = derive_rng(1, 1);
  const auto part = sample_unlabeled(pool, 30, rng);
  CHECK(part.rows() == 30);
  CHECK(part.domain == Domain::Target);
  CHECK(std::set<std::string>(part.ids.begin(), part.ids.end()).size() == 30);

  const auto over = sample_unlabeled(pool, 120, rng);
  CHECK(over.rows() == 120);
  for (Index i = 0; i < over.rows(); ++i) {
    CHECK(over.values(i, 0) == std::stod(over.ids[static_cast<std::size_t>(i)]));
  }

  Rng a = derive_rng(5, 4), b = derive_rng(5, 4);
  CHECK(sample_unlabeled(pool, 20, a).ids == sample_unlabeled(pool, 20, b).ids);
  CHECK_THROWS_AS(sample_unlabeled(FeatureMatrix{}, 3, rng), InputError);
}

TEST_CASE("zero-lambda DANN follows the baseline trajectory bitwise") {
  const auto task = generate_shift_task(small_shift());
  for (int epochs = 1; epochs <= 3; ++epochs) {
    TrainConfig c = quick(epochs);
    c.lambda_final = 0.0;
    DannModel dann = DannModel::build(small_net(10), 31);
    DannModel base = DannModel::build(small_net(10, false), 31);
    const auto rd = train_dann(dann, task.source, task.target_pool, c, 77);
    const auto rb = train_baseline(base, task.source, c, 77);
    REQUIRE_FALSE(rd.failed);
    REQUIRE_FALSE(rb.failed);
    CHECK(rd.task_loss == rb.task_loss);
    CHECK(task_path(dann) == task_path(base));
    CHECK(dann.predict_task(task.target_labeled.features.values) ==
          base.predict_task(task.target_labeled.features.values));
  }

  // A nonzero lambda does move the shared layers away from the baseline.
  TrainConfig c = quick(2);
  DannModel dann = DannModel::build(small_net(10), 31);
  DannModel base = DannModel::build(small_net(10, false), 31);
  train_dann(dann, task.source, task.target_pool, c, 77);
  train_baseline(base, task.source, c, 77);
  CHECK(task_path(dann) != task_path(base));
}

TEST_CASE("single epoch smoke run") {
  const auto task = generate_shift_task(small_shift());
  DannModel model = DannModel::build(small_net(10), 3);
  Monitor monitor;
  monitor.eval = {{"source", &task.source}, {"target", &task.target_labeled}};
  const auto probe_s = task.source.features.select(std::vector<Index>{0, 1, 2, 3, 4, 5});
  const auto probe_t = task.target_pool.select(std::vector<Index>{0, 1, 2, 3, 4, 5});
  monitor.probe_source = &probe_s;
  monitor.probe_target = &probe_t;
  const auto r = train_dann(model, task.source, task.target_pool, quick(1), 9, monitor);
  REQUIRE_FALSE(r.failed);
  CHECK(r.trial_seed == 9);
  CHECK(r.lambda_trace.size() == 1);
  CHECK(r.domain_accuracy.size() == 1);
  CHECK(r.task_loss.size() == 1);
  CHECK(r.final_lambda == 1.0);
  for (const auto& s : r.splits) {
    CHECK(s.metrics.ccc >= -1.0);
    CHECK(s.metrics.ccc <= 1.0);
    CHECK(s.metrics.rmse >= 0.0);
  }
  CHECK(r.domain_accuracy[0] >= 0.0);
  CHECK(r.domain_accuracy[0] <= 1.0);
  CHECK_NOTHROW(r.metrics("target"));
  CHECK_THROWS_AS(r.metrics("nope"), InputError);
}

TEST_CASE("zero epochs leave the model untouched") {
  const auto task = generate_shift_task(small_shift());
  DannModel model = DannModel::build(small_net(10), 3);
  const auto before = flat(model, model.all_parameters());
  const auto r = train_dann(model, task.source, task.target_pool, quick(0), 1);
  CHECK_FALSE(r.failed);
  CHECK(r.task_loss.empty());
  CHECK(flat(model, model.all_parameters()) == before);
  const auto rb = train_baseline(model, task.source, quick(0), 1);
  CHECK_FALSE(rb.failed);
  CHECK(flat(model, model.all_parameters()) == before);
}

TEST_CASE("training input errors") {
  const auto task = generate_shift_task(small_shift());
  DannModel base = DannModel::build(small_net(10, false), 3);
  CHECK_THROWS_AS(train_dann(base, task.source, task.target_pool, quick(1), 1), StateError);
  DannModel model = DannModel::build(small_net(10), 3);
  CHECK_THROWS_AS(train_dann(model, task.source, FeatureMatrix{}, quick(1), 1), InputError);
  CHECK_THROWS_AS(train_baseline(model, LabeledDataset{}, quick(1), 1), InputError);
}

TEST_CASE("non-finite training is reported as a failed trial") {
  const auto task = generate_shift_task(small_shift());
  TrainConfig blowup = quick(2);
  blowup.learning_rate = 1e300;
  blowup.max_norm = 0.0;
  blowup.clip_norm = 0.0;
  DannModel model = DannModel::build(small_net(10), 3);
  const auto r = train_dann(model, task.source, task.target_pool, blowup, 1);
  CHECK(r.failed);
  CHECK_FALSE(r.failure.empty());
  DannModel base = DannModel::build(small_net(10, false), 3);
  CHECK(train_baseline(base, task.source, blowup, 1).failed);

  TrainConfig c = quick(1);
  c.trials = 3;
  const auto set = run_trials(c, [&](int t, std::uint64_t seed) {
    TrialReport r;
    r.failed = t == 1;
    r.splits.push_back({"x", {0.5, 0.5, static_cast<double>(seed)}});
    return r;
  });
  CHECK(set.failed == 1);
  CHECK(set.values("x", "ccc") == std::vector<double>{17.0, 19.0});
  CHECK(set.summary("x.ccc").mean == 18.0);
  CHECK(set.summary("x.ccc").std == doctest::Approx(std::sqrt(2.0)));
}

TEST_CASE("run_trials seeds and worker independence") {
  const auto task = generate_shift_task(small_shift());
  TrainConfig c = quick(2);
  c.trials = 4;
  c.seed = 40;
  const auto trial = [&](int, std::uint64_t seed) {
    DannModel model = DannModel::build(small_net(10), seed);
    Monitor monitor;
    monitor.eval = {{"target", &task.target_labeled}};
    return train_dann(model, task.source, task.target_pool, c, seed, monitor);
  };
  const auto serial = run_trials(c, trial);
  c.workers = 3;
  const auto parallel = run_trials(c, trial);
  REQUIRE(serial.reports.size() == 4);
  for (int t = 0; t < 4; ++t) {
    const auto& a = serial.reports[static_cast<std::size_t>(t)];
    const auto& b = parallel.reports[static_cast<std::size_t>(t)];
    CHECK(a.trial == t);
    CHECK(a.trial_seed == 40 + static_cast<std::uint64_t>(t));
    CHECK(a.task_loss == b.task_loss);
    CHECK(a.metrics("target").ccc == b.metrics("target").ccc);
  }
  CHECK(serial.values("target", "ccc") == parallel.values("target", "ccc"));
  CHECK(serial.reports[0].task_loss != serial.reports[1].task_loss);
  CHECK_THROWS_AS(serial.values("target", "mae"), InputError);
}

TEST_CASE("a noiseless linear task is learned") {
  std::mt19937_64 rng(12);
  std::normal_distribution<double> n(0, 1);
  LabeledDataset data;
  data.features.values.resize(512, 6);
  data.scores.resize(512);
  Eigen::VectorXd w(6);
  w << 0.6, -0.4, 0.3, 0.2, -0.5, 0.1;
  for (Index i = 0; i < 512; ++i) {
    data.features.ids.push_back(std::to_string(i));
    for (Index j = 0; j < 6; ++j) data.features.values(i, j) = n(rng);
    data.scores(i) = std::clamp(data.features.values.row(i).dot(w), -3.0, 3.0);
  }
  NetworkSpec spec = NetworkSpec::deep(6, 1);
  spec.hidden_width = 32;
  spec.domain_head = false;
  DannModel model = DannModel::build(spec, 5);
  TrainConfig c = quick(100);
  c.batch_size = 64;
  Monitor monitor;
  monitor.eval = {{"train", &data}};
  const auto r = train_baseline(model, data, c, 5, monitor);
  REQUIRE_FALSE(r.failed);
  CHECK(r.metrics("train").ccc > 0.9);
  CHECK(r.task_loss.back() < r.task_loss.front());
}

TEST_CASE("adversarial training confuses the domain classifier") {
  SyntheticShiftSpec s;
  s.n_source = 1200;
  s.n_target = 1200;
  s.feature_dim = 32;
  s.latent_dim = 4;
  const auto task = generate_shift_task(s);
  std::vector<Index> first(200);
  for (Index i = 0; i < 200; ++i) first[static_cast<std::size_t>(i)] = i;
  const auto probe_s = task.source.features.select(first);
  const auto probe_t = task.target_labeled.features.select(first);
  Monitor monitor;
  monitor.probe_source = &probe_s;
  monitor.probe_target = &probe_t;
  NetworkSpec spec = NetworkSpec::deep(32, 2);
  spec.hidden_width = 32;
  // Few steps per epoch: running statistics must keep up.
  spec.batch_norm.momentum = 0.9;
  DannModel model = DannModel::build(spec, 17);
  TrainConfig c = quick(40);
  c.batch_size = 128;
  c.learning_rate = 5e-4;
  c.lambda_warmup_epochs = 10;
  const auto r = train_dann(model, task.source, task.target_pool, c, 17, monitor);
  REQUIRE_FALSE(r.failed);
  REQUIRE(r.domain_accuracy.size() == 40);
  MESSAGE("epoch 11 accuracy " << r.domain_accuracy[10] << ", final " << r.domain_accuracy.back());
  CHECK(r.domain_accuracy[10] > 0.75);
  CHECK(r.domain_accuracy.back() < r.domain_accuracy[10]);
  CHECK(r.lambda_trace[9] == 0.0);
  CHECK(r.lambda_trace.back() == 1.0);
}
