#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "mft/checkpoint.hpp"
#include "mft/error.hpp"
#include "mft/optim.hpp"
#include "support.hpp"

using namespace mft;

namespace {

std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("mft_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

float step_one(OptimizerConfig cfg, float p0, float g) {
  Tensor p = Tensor::scalar(p0, true);
  OptimizerState state(cfg);
  const std::vector<float> grad{g};
  const std::span<const float> gs[1] = {grad};
  Tensor params[1] = {p};
  optimizer_step(params, gs, state);
  return p.item();
}

}  // namespace

TEST_CASE("sgd: one plain step") {
  OptimizerConfig cfg;
  cfg.kind = OptimizerKind::SGD;
  cfg.learning_rate = 0.1f;
  CHECK(step_one(cfg, 1.0f, 0.5f) == doctest::Approx(0.95).epsilon(1e-7));
}

TEST_CASE("sgd: weight decay and momentum follow the recurrence") {
  OptimizerConfig cfg;
  cfg.kind = OptimizerKind::SGD;
  cfg.learning_rate = 0.05f;
  cfg.weight_decay = 0.01f;
  cfg.momentum = 0.9f;
  Tensor p = Tensor::scalar(2.0f, true);
  OptimizerState state(cfg);
  double ref = 2.0, buf = 0.0;
  const float grads[3] = {0.3f, -1.2f, 0.7f};
  for (float g : grads) {
    const std::vector<float> gv{g};
    const std::span<const float> gs[1] = {gv};
    Tensor params[1] = {p};
    optimizer_step(params, gs, state);
    buf = 0.9 * buf + (g + 0.01 * ref);
    ref -= 0.05 * buf;
    CHECK(p.item() == doctest::Approx(ref).epsilon(1e-6));
  }
  CHECK(state.step == 3);
}

TEST_CASE("adam: first step against the hand-expanded bias correction") {
  OptimizerConfig cfg;
  cfg.learning_rate = 0.01f;
  const double g = 2.0, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  const double m_hat = ((1 - b1) * g) / (1 - b1);
  const double v_hat = ((1 - b2) * g * g) / (1 - b2);
  const double expect = 1.0 - 0.01 * m_hat / (std::sqrt(v_hat) + eps);
  CHECK(step_one(cfg, 1.0f, 2.0f) == doctest::Approx(expect).epsilon(1e-7));
  // the first step has magnitude lr regardless of the gradient scale
  for (float gg : {1e-3f, 0.5f, 40.0f, -7.0f})
    CHECK(std::fabs(step_one(cfg, 0.0f, gg)) == doctest::Approx(0.01).epsilon(1e-4));
}

TEST_CASE("adam: decoupled weight decay with a zero gradient shrinks by lr*wd*p") {
  OptimizerConfig cfg;
  cfg.learning_rate = 0.01f;
  cfg.weight_decay = 0.1f;
  CHECK(step_one(cfg, 1.0f, 0.0f) == doctest::Approx(1.0 - 1e-3).epsilon(1e-7));
}

TEST_CASE("adam: several steps against a double-precision recurrence") {
  for (int seed = 0; seed < 20; ++seed) {
    KeyedRng rng({std::uint64_t(seed), 9});
    OptimizerConfig cfg;
    cfg.learning_rate = 3e-3f;
    cfg.weight_decay = 1e-3f;
    Tensor p = test::random_tensor({5}, rng, -1, 1, true);
    std::vector<double> ref(p.data().begin(), p.data().end()), m(5, 0.0), v(5, 0.0);
    OptimizerState state(cfg);
    for (int t = 1; t <= 6; ++t) {
      std::vector<float> g(5);
      for (auto& x : g) x = float(rng.uniform(-2, 2));
      const std::span<const float> gs[1] = {g};
      Tensor params[1] = {p};
      optimizer_step(params, gs, state);
      for (int i = 0; i < 5; ++i) {
        m[i] = 0.9 * m[i] + 0.1 * g[i];
        v[i] = 0.999 * v[i] + 0.001 * double(g[i]) * g[i];
        const double mh = m[i] / (1 - std::pow(0.9, t)), vh = v[i] / (1 - std::pow(0.999, t));
        ref[i] = ref[i] - 3e-3 * mh / (std::sqrt(vh) + 1e-8) - 3e-3 * 1e-3 * ref[i];
      }
    }
    for (int i = 0; i < 5; ++i) CHECK(p[i] == doctest::Approx(ref[i]).epsilon(1e-5));
  }
}

TEST_CASE("optimizer: empty gradient counts as zero, buffers must keep matching") {
  OptimizerConfig cfg;
  cfg.kind = OptimizerKind::SGD;
  Tensor p = Tensor::from({2}, {1, 2}, true);
  OptimizerState state(cfg);
  const std::span<const float> none[1] = {};
  Tensor params[1] = {p};
  optimizer_step(params, none, state);
  CHECK(p[0] == 1.0f);
  Tensor two[2] = {p, Tensor::zeros({3}, true)};
  const std::span<const float> gs[2] = {};
  CHECK_THROWS_AS(optimizer_step(two, gs, state), DimensionError);
}

TEST_CASE("optimizer kind names round-trip") {
  CHECK(parse_optimizer_kind("adam") == OptimizerKind::Adam);
  CHECK(parse_optimizer_kind(optimizer_kind_name(OptimizerKind::SGD)) == OptimizerKind::SGD);
  CHECK_THROWS_AS(parse_optimizer_kind("rmsprop"), ConfigError);
}

TEST_CASE("rng: counter-based streams are reproducible and keyed") {
  KeyedRng a({1, 2, 3}), b({1, 2, 3}), c({1, 2, 4});
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u64();
    CHECK(x == b.next_u64());
    differs |= x != c.next_u64();
  }
  CHECK(differs);
  CHECK(mix_key({1, 2}) != mix_key({2, 1}));
  CHECK(hash_string("near") != hash_string("mid"));

  KeyedRng r(5);
  double total = 0.0;
  std::set<std::uint64_t> seen;
  for (int i = 0; i < 20000; ++i) {
    const double u = r.uniform01();
    CHECK((u >= 0.0 && u < 1.0));
    total += u;
    seen.insert(r.below(7));
  }
  CHECK(total / 20000 == doctest::Approx(0.5).epsilon(0.02));
  CHECK(seen.size() == 7);
}

TEST_CASE("checkpoint: round trip is bit-exact and the manifest is readable text") {
  const auto dir = scratch_dir("ckpt");
  KeyedRng rng({3});
  std::vector<NamedTensor> tensors{{"block0.weight", test::random_tensor({4, 3, 3, 3}, rng, -10, 10)},
                                   {"block0.bias", test::random_tensor({4}, rng)},
                                   {"step", Tensor::scalar(17.0f)}};
  const auto path = dir / "model.ckpt";
  save_checkpoint(path, tensors);
  CHECK(std::filesystem::exists(checkpoint_blob_path(path)));
  CHECK(std::filesystem::file_size(checkpoint_blob_path(path)) == 4 * (108 + 4 + 1));

  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  CHECK(header == kCheckpointHeader);

  const auto loaded = load_checkpoint(path);
  REQUIRE(loaded.size() == tensors.size());
  for (std::size_t i = 0; i < loaded.size(); ++i) {
    CHECK(loaded[i].name == tensors[i].name);
    CHECK(bit_equal(loaded[i].tensor, tensors[i].tensor));
    CHECK_FALSE(loaded[i].tensor.requires_grad());
  }
  CHECK(find_tensor(loaded, "step").item() == 17.0f);
  CHECK_THROWS_AS(find_tensor(loaded, "missing"), IoError);
}

TEST_CASE("checkpoint: damaged or missing files are I/O errors") {
  const auto dir = scratch_dir("ckpt_bad");
  CHECK_THROWS_AS(load_checkpoint(dir / "nope.ckpt"), IoError);
  const std::vector<NamedTensor> one{{"w", Tensor::from({2}, {1, 2})}};
  save_checkpoint(dir / "a.ckpt", one);
  std::filesystem::resize_file(checkpoint_blob_path(dir / "a.ckpt"), 4);
  CHECK_THROWS_AS(load_checkpoint(dir / "a.ckpt"), IoError);
  {
    std::ofstream bad(dir / "b.ckpt");
    bad << "NOT-A-CHECKPOINT\n";
  }
  CHECK_THROWS_AS(load_checkpoint(dir / "b.ckpt"), IoError);
  CHECK_THROWS_AS(save_checkpoint(dir / "no_such_dir" / "c.ckpt", one), IoError);
}
