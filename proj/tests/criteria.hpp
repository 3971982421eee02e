#pragma once

#include <sstream>
#include <string>

#include "fixtures.hpp"
#include "gnn_oracle.hpp"
#include "op_gradients.hpp"
#include "mft/adapt_eval.hpp"
#include "mft/image.hpp"

// Property checks shared by the unit suites and the acceptance run.
namespace mft::test {

struct Verdict {
  bool pass = true;
  std::string detail;

  void fail(const std::string& why) {
    if (pass) detail = why;
    pass = false;
  }
};

/// Central finite differences against the taped gradient of every
/// differentiable op and of a depth-1 GNN, over `n_seeds` seeds.
inline Verdict gradient_correctness(std::size_t n_seeds, double tolerance = 1e-3) {
  Verdict v;
  double worst = 0.0;
  std::string worst_name;
  std::size_t checks = 0;
  auto record = [&](const std::string& name, std::uint64_t seed, double err) {
    ++checks;
    if (err > worst) worst = err, worst_name = name;
    if (!(err < tolerance)) v.fail(name + " seed " + std::to_string(seed) + ": relative error " + std::to_string(err));
  };
  for (std::uint64_t seed = 0; seed < n_seeds; ++seed) {
    for (auto& k : op_cases(seed)) record(k.name, seed, gradient_check(k.fn, k.inputs, seed));
    const auto gnn = oracle::draw_depth1_case(seed, 5e-3);
    record("depth-1 GNN", seed, oracle::depth1_gradient_error(gnn, seed));
  }
  if (v.pass) {
    std::ostringstream os;
    os << checks << " checks over " << n_seeds << " seeds; worst " << worst << " (" << worst_name << ")";
    v.detail = os.str();
  }
  return v;
}

/// With the inner loop disabled, meta_step must reproduce a plain episodic
/// step bit for bit: same losses, same parameters, same optimizer moments.
inline Verdict inner_disabled_degeneracy(std::size_t n_seeds, std::size_t episodes_per_seed) {
  Verdict v;
  for (std::size_t seed = 0; seed < n_seeds; ++seed) {
    const Dataset ds = random_dataset(6, 12, {3, 8, 8}, seed);
    const EpisodeSpec spec{3, 2, 3, seed};
    InnerLoopConfig inner;
    inner.steps = 0;
    const OptimizerConfig outer{seed % 2 ? OptimizerKind::SGD : OptimizerKind::Adam, 1e-2f, 1e-3f, 0.5f};
    MetaState a = MetaState::init(tiny_backbone(), tiny_gnn(3), outer, inner, seed + 1);
    MetaState b = a.clone();
    for (std::size_t e = 0; e < episodes_per_seed; ++e) {
      const Episode ep = sample_episode(ds, spec, e);
      const StepResult ra = meta_step(a, ep);
      const StepResult rb = episodic_step(b, ep);
      std::ostringstream where;
      where << "seed " << seed << " episode " << e << ": ";
      if (ra.loss != rb.loss) v.fail(where.str() + "query losses differ");
      if (!same_values(a.parameters(), b.parameters())) v.fail(where.str() + "parameters differ");
      if (a.outer.first != b.outer.first || a.outer.second != b.outer.second) v.fail(where.str() + "moments differ");
    }
  }
  if (v.pass) {
    std::ostringstream os;
    os << n_seeds << " seeds x " << episodes_per_seed << " episodes bit-identical";
    v.detail = os.str();
  }
  return v;
}

/// Frozen blocks survive inner fine-tuning (training and test time) and the
/// baseline fine-tuning bit for bit, across random architectures and settings.
inline Verdict freeze_invariants(std::size_t n_configs) {
  Verdict v;
  std::size_t moved = 0;
  for (std::size_t cfg_id = 0; cfg_id < n_configs; ++cfg_id) {
    KeyedRng rng({cfg_id, 0x667265657a65ULL});
    const std::size_t blocks = 2 + rng.below(3);
    BackboneConfig bc = tiny_backbone(blocks, 16);
    for (auto& w : bc.widths) w = 1 + rng.below(4);
    InnerLoopConfig inner;
    inner.k = 1 + rng.below(blocks - 1);
    inner.epochs = 1 + rng.below(3);
    inner.batch_size = rng.below(4);
    inner.optimizer.kind = rng.bernoulli(0.5) ? OptimizerKind::Adam : OptimizerKind::SGD;
    inner.optimizer.learning_rate = float(rng.uniform(1e-3, 0.1));
    inner.optimizer.weight_decay = float(rng.uniform(0.0, 0.01));
    inner.optimizer.momentum = float(rng.uniform(0.0, 0.9));
    const std::size_t n_way = 2 + rng.below(3);
    const Dataset ds = random_dataset(n_way + 1, 6, {3, 16, 16}, cfg_id);
    const Episode ep = sample_episode(ds, {n_way, 1 + rng.below(2), 2, cfg_id}, 0);

    MetaState state = MetaState::init(bc, tiny_gnn(n_way), {}, inner, cfg_id);
    const std::size_t first_adapted = blocks - inner.k;
    const std::vector<Tensor> before = snapshot(state.parameters());
    auto frozen_ok = [&](const FeatureExtractor& fe) {
      for (std::size_t i = 0; i < first_adapted; ++i)
        if (!bit_equal(fe.blocks()[i].weight, before[2 * i]) || !bit_equal(fe.blocks()[i].bias, before[2 * i + 1]))
          return false;
      return true;
    };
    std::ostringstream where;
    where << "config " << cfg_id << " (L=" << blocks << ", k=" << inner.k << "): ";

    const SupportPool pool = plain_pool(ep.support_images, ep.support_labels);
    const InnerResult r = inner_finetune(state, pool, n_way, KeyedRng({cfg_id}));
    if (r.adapted.size() != inner.k) v.fail(where.str() + "wrong number of adapted blocks");
    if (!same_values(state.parameters(), before)) v.fail(where.str() + "inner loop wrote to the model");
    if (!bit_equal(r.adapted.back().weight, before[2 * blocks - 2])) ++moved;

    const AdaptedModel adapted = meta_model_adapt(state, augment_support(ep.support_images, ep.support_labels,
                                                                         AugmentationPolicy{2, 2}, cfg_id),
                                                  n_way, cfg_id);
    if (!frozen_ok(adapted.backbone)) v.fail(where.str() + "test-time adaptation changed a frozen block");
    for (const auto& p : adapted.backbone.parameters())
      if (p.requires_grad()) v.fail(where.str() + "adapted model left a parameter trainable");

    BaselineConfig bl;
    bl.epochs = 1 + rng.below(3);
    bl.k = inner.k;
    const BaselineModel base = baseline_finetune(state.backbone, pool, n_way, bl, cfg_id);
    if (!frozen_ok(base.backbone)) v.fail(where.str() + "baseline fine-tuning changed a frozen block");
  }
  // guard against a vacuous pass: the adaptable blocks must actually move
  if (moved * 2 < n_configs) v.fail("only " + std::to_string(moved) + " configurations changed their adapted blocks");
  if (v.pass)
    v.detail = std::to_string(n_configs) + " random configurations, frozen blocks bit-identical (" +
               std::to_string(moved) + " with moved adapted blocks)";
  return v;
}

/// Softmax normalization, identical-model and order-swap properties of the
/// score ensemble on random score matrices.
inline Verdict ensemble_algebra(std::size_t n_matrices) {
  Verdict v;
  double worst_sum = 0.0;
  for (std::size_t m = 0; m < n_matrices; ++m) {
    KeyedRng rng({m, 0x656e73ULL});
    const std::size_t rows = 1 + rng.below(20), cols = 2 + rng.below(9);
    const double spread = rng.uniform(0.1, 30.0);
    const ModelScores a{random_tensor({rows, cols}, rng, -spread, spread), "a"};
    const ModelScores b{random_tensor({rows, cols}, rng, -spread, spread), "b"};
    const Tensor p = softmax(a.scores);
    for (std::size_t r = 0; r < rows; ++r) {
      double total = 0.0;
      for (std::size_t c = 0; c < cols; ++c) total += p[r * cols + c];
      worst_sum = std::max(worst_sum, std::fabs(total - 1.0));
    }
    if (ensemble_predict(a, a) != argmax_rows(a.scores)) v.fail("identical-model ensemble differs from argmax, matrix " + std::to_string(m));
    if (ensemble_predict(a, b) != ensemble_predict(b, a)) v.fail("swapping models changed a prediction, matrix " + std::to_string(m));
  }
  if (worst_sum > 1e-6) v.fail("softmax row sum off by " + std::to_string(worst_sum));
  if (v.pass) {
    std::ostringstream os;
    os << n_matrices << " matrices; max |row sum - 1| = " << worst_sum;
    v.detail = os.str();
  }
  return v;
}

/// Pool size, flip involution and seed determinism of support augmentation.
inline Verdict augmentation_arithmetic(std::size_t n_seeds) {
  Verdict v;
  const AugmentationPolicy policy;  // extra_per_image = 17
  for (std::size_t seed = 0; seed < n_seeds; ++seed) {
    KeyedRng rng({seed, 0x617567ULL});
    const std::size_t ns = 1 + rng.below(25);
    const Tensor images = random_tensor({ns, 3, 12, 12}, rng, 0, 1);
    std::vector<std::size_t> labels(ns);
    for (auto& l : labels) l = rng.below(5);
    const SupportPool a = augment_support(images, labels, policy, seed);
    const SupportPool b = augment_support(images, labels, policy, seed);
    const SupportPool c = augment_support(images, labels, policy, seed + 1000);
    const std::string where = "seed " + std::to_string(seed) + ": ";
    if (a.images.dim(0) != ns * 18 || a.labels.size() != ns * 18) v.fail(where + "pool is not N_s x 18");
    if (a.images.shape() != Shape({ns * 18, 3, 12, 12})) v.fail(where + "augmented images changed shape");
    if (a.entries.size() != ns * (policy.original_weight + 17)) v.fail(where + "unexpected entry count");
    if (!bit_equal(a.images, b.images) || a.entries != b.entries || a.labels != b.labels)
      v.fail(where + "same seed gave a different pool");
    if (bit_equal(a.images, c.images)) v.fail(where + "different seeds gave the same pool");
    for (std::size_t i = 0; i < ns; ++i) {
      const std::size_t idx[1] = {i};
      const Tensor img = reshape(select_rows(reshape(images, {ns, 3 * 12 * 12}), idx), {3, 12, 12});
      if (!bit_equal(flip_horizontal(flip_horizontal(img)), img)) v.fail(where + "double flip is not the identity");
    }
  }
  if (v.pass) v.detail = std::to_string(n_seeds) + " support sets: pool = N_s x 18, flips involutive, pools seed-deterministic";
  return v;
}

/// Pairwise node averaging of a 50-image 5-way support: 25 vertices, a 26x26
/// edge matrix and unchanged per-class means.
inline Verdict node_averaging(std::size_t n_seeds) {
  Verdict v;
  double worst = 0.0;
  for (std::size_t seed = 0; seed < n_seeds; ++seed) {
    KeyedRng rng({seed, 0x6e6f6465ULL});
    std::vector<std::size_t> labels;
    for (std::size_t c = 0; c < 5; ++c)
      for (std::size_t s = 0; s < 10; ++s) labels.push_back(c);
    rng.shuffle(std::span<std::size_t>(labels));
    const Tensor feats = random_tensor({50, 16}, rng, -3, 3);
    const MergedSupport m = average_support_pairs(feats, labels);
    if (m.features.dim(0) != 25) v.fail("got " + std::to_string(m.features.dim(0)) + " support vertices");
    GnnConfig gc;
    gc.feature_dim = 16;
    gc.proj_dim = 8;
    gc.n_way = 5;
    const GnnParams p = GnnParams::init(gc, seed);
    const Tensor q = random_tensor({1, 16}, rng);
    const GraphSignal g = build_node_signal(project_features(m.features, p), m.labels, project_features(q, p), 5);
    const Tensor edges = edge_weights(g.node_features, p.layers.front().edge);
    if (edges.shape() != Shape({26, 26})) v.fail("edge matrix is " + shape_str(edges.shape()));
    for (std::size_t c = 0; c < 5; ++c)
      for (std::size_t t = 0; t < 16; ++t) {
        double before = 0.0, after = 0.0;
        for (std::size_t i = 0; i < 50; ++i)
          if (labels[i] == c) before += feats[i * 16 + t] / 10.0;
        for (std::size_t i = 0; i < 25; ++i)
          if (m.labels[i] == c) after += m.features[i * 16 + t] / 5.0;
        worst = std::max(worst, std::fabs(before - after));
      }
  }
  if (worst > 1e-6) v.fail("class mean moved by " + std::to_string(worst));
  if (v.pass) {
    std::ostringstream os;
    os << n_seeds << " supports: 50 -> 25 vertices, 26x26 edges, max class-mean change " << worst;
    v.detail = os.str();
  }
  return v;
}

}  // namespace mft::test
