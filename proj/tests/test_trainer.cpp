#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <vector>

#include "eventdistill/error.hpp"
#include "eventdistill/parallel.hpp"
#include "eventdistill/rng.hpp"
#include "eventdistill/trainer.hpp"

using namespace eventdistill;
namespace fs = std::filesystem;

namespace {

TrainConfig small_config() {
  TrainConfig c = preset("desk");
  c.width = 32;
  c.height = 32;
  c.patch = 8;
  c.tau = 4.0;
  c.hidden = 6;
  c.dim = 5;
  c.batch_size = 3;
  c.max_steps = 6;
  c.epochs = 4;
  return c;
}

std::vector<TrainingPair> small_pairs(const TrainConfig& c, std::size_t n = 5, std::uint64_t seed = 17) {
  DatasetOptions options;
  options.scenes = n;
  options.seed = seed;
  options.width = c.width;
  options.height = c.height;
  const TeacherSpec teacher = c.teacher_spec();
  std::vector<TrainingPair> pairs;
  for (const auto& s : generate_samples(options)) {
    pairs.push_back(make_training_pair(s.events, s.frame0, teacher, c));
  }
  return pairs;
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("eventdistill_trainer_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("adamw_update examples") {
  AdamWConfig config;
  config.lr = 0.01;

  SUBCASE("zero gradient at zero stays put") {
    std::vector<double> theta(4, 0.0), grad(4, 0.0), m(4, 0.0), v(4, 0.0);
    adamw_update(theta, grad, m, v, 1, config);
    for (int i = 0; i < 4; ++i) {
      CHECK(theta[i] == 0.0);
      CHECK(m[i] == 0.0);
      CHECK(v[i] == 0.0);
    }
  }
  SUBCASE("first step with unit gradient") {
    std::vector<double> theta(3, 0.0), grad(3, 1.0), m(3, 0.0), v(3, 0.0);
    adamw_update(theta, grad, m, v, 1, config);
    // m_hat = v_hat = 1 after bias correction
    const double expected = -config.lr * 1.0 / (1.0 + config.eps);
    for (double t : theta) CHECK(t == doctest::Approx(expected).epsilon(1e-14));
    CHECK(m[0] == doctest::Approx(0.1));
    CHECK(v[0] == doctest::Approx(0.001));
  }
  SUBCASE("decoupled decay alone") {
    config.weight_decay = 0.5;
    std::vector<double> theta{1.0, -2.0, 3.5}, grad(3, 0.0), m(3, 0.0), v(3, 0.0);
    const std::vector<double> before = theta;
    adamw_update(theta, grad, m, v, 1, config);
    for (int i = 0; i < 3; ++i) CHECK(theta[i] == before[i] * (1.0 - config.lr * config.weight_decay));
  }
  SUBCASE("lr = 0 is the identity") {
    config.lr = 0.0;
    config.weight_decay = 0.3;
    Rng rng(3);
    std::vector<double> theta(8), grad(8), m(8, 0.0), v(8, 0.0);
    for (auto& t : theta) t = rng.normal();
    for (auto& g : grad) g = rng.normal();
    const std::vector<double> before = theta;
    for (std::uint64_t k = 1; k <= 5; ++k) adamw_update(theta, grad, m, v, k, config);
    CHECK(theta == before);
    for (double x : v) CHECK(x >= 0.0);
  }
  SUBCASE("shape and step errors") {
    std::vector<double> a(3), b(2), m(3), v(3);
    CHECK_THROWS_AS(adamw_update(a, b, m, v, 1, config), Error);
    std::vector<double> g(3);
    CHECK_THROWS_AS(adamw_update(a, g, m, v, 0, config), Error);
  }
}

TEST_CASE("adamw_update matches a scalar reference over several steps") {
  AdamWConfig config{0.003, 0.8, 0.95, 1e-6, 0.02};
  Rng rng(9);
  std::vector<double> theta{0.4, -1.2}, m(2, 0.0), v(2, 0.0);
  double ref_theta[2] = {0.4, -1.2}, ref_m[2] = {0, 0}, ref_v[2] = {0, 0};
  for (std::uint64_t k = 1; k <= 7; ++k) {
    std::vector<double> grad{rng.normal(), rng.normal()};
    adamw_update(theta, grad, m, v, k, config);
    for (int i = 0; i < 2; ++i) {
      ref_m[i] = 0.8 * ref_m[i] + 0.2 * grad[i];
      ref_v[i] = 0.95 * ref_v[i] + 0.05 * grad[i] * grad[i];
      const double mh = ref_m[i] / (1 - std::pow(0.8, k));
      const double vh = ref_v[i] / (1 - std::pow(0.95, k));
      ref_theta[i] -= 0.003 * (mh / (std::sqrt(vh) + 1e-6) + 0.02 * ref_theta[i]);
    }
  }
  for (int i = 0; i < 2; ++i) CHECK(theta[i] == doctest::Approx(ref_theta[i]).epsilon(1e-13));
}

TEST_CASE("adamw_step walks every block") {
  const StudentParams init = init_student({4, 2, 3, 2}, 1);
  StudentParams params = init;
  StudentParams grads = zeros_like(params);
  for (auto& layer : grads.layers) std::fill(layer.weight.begin(), layer.weight.end(), 1.0);
  OptimizerState state = OptimizerState::zeros_for(params);
  AdamWConfig config;
  adamw_step(params, grads, state, config);
  CHECK(state.step == 1);
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    for (std::size_t k = 0; k < params.layers[l].weight.size(); ++k) {
      CHECK(params.layers[l].weight[k] == doctest::Approx(init.layers[l].weight[k] - config.lr / (1 + config.eps)));
    }
    CHECK(params.layers[l].bias == init.layers[l].bias);
  }
  OptimizerState wrong;
  CHECK_THROWS_AS(adamw_step(params, grads, wrong, config), Error);
}

TEST_CASE("config presets, parsing and dumping") {
  const TrainConfig paper = preset("paper");
  CHECK(paper.bins == 3);
  CHECK(paper.patch == 16);
  CHECK(paper.tau == 64.0);
  CHECK(paper.lambda_is == 10.0);
  CHECK(paper.lambda_cs == 4.0);
  CHECK(paper.lr == 5e-6);
  CHECK(paper.weight_decay == 1e-4);
  CHECK(paper.epochs == 10);
  CHECK(paper.width == 640);
  CHECK(paper.height == 480);
  CHECK_THROWS_AS(preset("huge"), Error);

  CHECK(parse_config(dump_config(paper), preset("desk")) == paper);
  CHECK(parse_config(dump_config(small_config())) == small_config());

  const TrainConfig c = parse_config("# comment\n lr = 0.5   # trailing\n\nbins=5\n");
  CHECK(c.lr == 0.5);
  CHECK(c.bins == 5);
  CHECK(c.patch == preset("desk").patch);

  CHECK_THROWS_AS(parse_config("nope = 1\n"), Error);
  CHECK_THROWS_AS(parse_config("lr 1\n"), Error);
  CHECK_THROWS_AS(parse_config("lr = fast\n"), Error);
  CHECK_THROWS_AS(parse_config("epochs = 2.5\n"), Error);
  CHECK_THROWS_AS(parse_config("lr = 0\n"), Error);
  CHECK_THROWS_AS(parse_config("beta1 = 1\n"), Error);
  CHECK_THROWS_AS(parse_config("epochs = 0\n"), Error);
  CHECK_THROWS_AS(parse_config("width = 100\n"), Error);  // not divisible by 16
  CHECK_THROWS_AS(parse_config("dtype = f16\n"), Error);
  CHECK_THROWS_AS(parse_config("seed = -1\n"), Error);
}

TEST_CASE("checkpoint round trip") {
  const TrainConfig c = small_config();
  const auto pairs = small_pairs(c);
  const Checkpoint ckpt = pretrain(pairs, c);
  const fs::path dir = scratch("ckpt");
  save_checkpoint(ckpt, dir / "a.ckp1");
  const Checkpoint back = load_checkpoint(dir / "a.ckp1");
  CHECK(back == ckpt);
  save_checkpoint(back, dir / "b.ckp1");
  CHECK(read_file(dir / "a.ckp1") == read_file(dir / "b.ckp1"));

  Bytes broken = read_file(dir / "a.ckp1");
  broken.resize(broken.size() / 2);
  write_file(dir / "c.ckp1", broken);
  try {
    load_checkpoint(dir / "c.ckp1");
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::format);
  }
  auto entries = checkpoint_entries(ckpt);
  entries.erase(entries.begin());
  CHECK_THROWS_AS(checkpoint_from_entries(entries), Error);
}

TEST_CASE("pretrain schedule and determinism") {
  TrainConfig c = small_config();
  const auto pairs = small_pairs(c);

  SUBCASE("zero steps keeps the initialization bit-exactly") {
    c.max_steps = 0;
    const Checkpoint ckpt = pretrain(pairs, c);
    CHECK(ckpt.params == init_student(c.student_shape(), c.seed));
    CHECK(ckpt.state.step == 0);
    CHECK(ckpt.history.empty());
  }
  SUBCASE("step cap and uncapped epochs") {
    const Checkpoint capped = pretrain(pairs, c);
    CHECK(capped.state.step == 6);
    CHECK(capped.history.size() == 6);
    c.max_steps = -1;
    c.epochs = 2;
    const Checkpoint full = pretrain(pairs, c);
    CHECK(full.state.step == 4);  // ceil(5 / 3) batches per epoch
  }
  SUBCASE("same seed, same result; history totals are consistent") {
    const Checkpoint a = pretrain(pairs, c);
    const Checkpoint b = pretrain(pairs, c);
    CHECK(a == b);
    for (const auto& r : a.history) {
      CHECK(r.total == doctest::Approx(r.l1 + c.lambda_is * r.intra + c.lambda_cs * r.cross).epsilon(1e-12));
    }
    TrainConfig other = c;
    other.seed = 1;
    CHECK_FALSE(pretrain(pairs, other).params == a.params);
  }
  SUBCASE("worker count does not change the result") {
    const std::size_t saved = worker_count();
    set_worker_count(1);
    const Checkpoint one = pretrain(pairs, c);
    set_worker_count(3);
    const Checkpoint three = pretrain(pairs, c);
    set_worker_count(saved);
    CHECK(one == three);
  }
  SUBCASE("epoch callback sees each epoch") {
    c.max_steps = -1;
    c.epochs = 3;
    std::vector<std::uint64_t> steps;
    pretrain(pairs, c, [&](const Checkpoint& k) { steps.push_back(k.state.step); });
    CHECK(steps == std::vector<std::uint64_t>{2, 4, 6});
  }
  SUBCASE("non-finite loss aborts with a numeric error") {
    auto bad = pairs;
    // masked-out tokens are zeroed, so poison every input
    for (auto& x : bad[0].volume.data()) x = std::numeric_limits<double>::quiet_NaN();
    REQUIRE(bad[0].mask.active_count() > 0);
    c.batch_size = 5;
    try {
      pretrain(bad, c);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::numeric);
      CHECK(exit_code_for(e.kind()) == 3);
    }
  }
  SUBCASE("empty data") {
    CHECK_THROWS_AS(pretrain(std::vector<TrainingPair>{}, c), Error);
  }
}

TEST_CASE("training lowers the objective") {
  TrainConfig c = small_config();
  c.max_steps = 60;
  c.epochs = 100;
  c.lr = 3e-3;
  const auto pairs = small_pairs(c, 6);
  const StudentParams init = init_student(c.student_shape(), c.seed);
  const Checkpoint ckpt = pretrain(pairs, c);
  const double before = dataset_loss(init, pairs, c.loss_weights()).total;
  const double after = dataset_loss(ckpt.params, pairs, c.loss_weights()).total;
  CHECK(after < before);
  CHECK(eval_structure_discrepancy(ckpt.params, pairs).gram_err <
        eval_structure_discrepancy(init, pairs).gram_err);
}

TEST_CASE("eval_structure_discrepancy") {
  const TrainConfig c = small_config();
  auto pairs = small_pairs(c);
  const StudentParams params = init_student(c.student_shape(), 4);

  SUBCASE("student cloned from the teacher scores zero") {
    for (auto& p : pairs) p.teacher = student_forward(params, p.volume);
    const StructureDiscrepancy d = eval_structure_discrepancy(params, pairs);
    CHECK(d.gram_err == 0.0);
    CHECK(d.l1_err == 0.0);
  }
  SUBCASE("pair order does not matter") {
    const StructureDiscrepancy a = eval_structure_discrepancy(params, pairs);
    std::reverse(pairs.begin(), pairs.end());
    const StructureDiscrepancy b = eval_structure_discrepancy(params, pairs);
    CHECK(a.gram_err == doctest::Approx(b.gram_err).epsilon(1e-14));
    CHECK(a.l1_err == doctest::Approx(b.l1_err).epsilon(1e-14));
    CHECK(a.gram_err > 0.0);
  }
  SUBCASE("independent per-pair oracle") {
    double gram = 0.0;
    for (const auto& p : pairs) {
      const FeatureGrid k = student_forward(params, p.volume);
      const std::size_t T = k.tokens();
      double sum = 0.0;
      for (std::size_t i = 0; i < T; ++i) {
        for (std::size_t j = 0; j < T; ++j) {
          if (!p.mask.active(i) || !p.mask.active(j)) continue;
          double kk = 0.0, qq = 0.0;
          for (int d = 0; d < k.dim(); ++d) {
            kk += k.token(i)[d] * k.token(j)[d];
            qq += p.teacher.token(i)[d] * p.teacher.token(j)[d];
          }
          sum += std::abs(kk - qq);
        }
      }
      gram += sum / static_cast<double>(T * T);
    }
    gram /= static_cast<double>(pairs.size());
    CHECK(eval_structure_discrepancy(params, pairs).gram_err == doctest::Approx(gram).epsilon(1e-12));
  }
  SUBCASE("empty held-out set") {
    CHECK_THROWS_AS(eval_structure_discrepancy(params, std::vector<TrainingPair>{}), Error);
  }
}

TEST_CASE("training pairs check geometry") {
  TrainConfig c = small_config();
  const auto pairs = small_pairs(c, 1);
  FeatureGrid wrong(1, 1, c.dim);
  DatasetOptions options;
  options.scenes = 1;
  options.seed = 17;
  options.width = 32;
  options.height = 32;
  const auto sample = generate_samples(options).front();
  CHECK_THROWS_AS(make_training_pair(sample.events, wrong, c), Error);
  const TrainingPair& p = pairs.front();
  CHECK(p.mask.rows() == 4);
  CHECK(p.teacher.dim() == c.dim);
}

TEST_CASE("pretrain_from_directory writes a loadable checkpoint") {
  TrainConfig c = small_config();
  const fs::path dir = scratch("dir");
  DatasetOptions options;
  options.scenes = 3;
  options.seed = 8;
  options.width = 32;
  options.height = 32;
  generate_dataset(options, dir / "data");
  const Checkpoint ckpt = pretrain_from_directory(dir / "data", c, dir / "out.ckp1");
  CHECK(load_checkpoint(dir / "out.ckp1") == ckpt);

  c.width = 64;
  c.height = 64;
  CHECK_THROWS_AS(pretrain_from_directory(dir / "data", c, dir / "x.ckp1"), Error);
}
