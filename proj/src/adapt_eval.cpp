#include "mft/adapt_eval.hpp"

#include <algorithm>
#include <cmath>

#include "mft/error.hpp"
#include "mft/image.hpp"
#include "mft/ops.hpp"
#include "mft/tape.hpp"

namespace mft {

Tensor color_jitter(const Tensor& image, float brightness, float contrast) {
  if (image.ndim() != 3) throw DimensionError("color_jitter: expected [C x H x W], got " + shape_str(image.shape()));
  auto in = image.data();
  double mean = 0.0;
  for (float v : in) mean += v;
  mean /= double(in.size());
  std::vector<float> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) {
    const double v = ((double(in[i]) - mean) * contrast + mean) * brightness;
    out[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
  }
  return Tensor::from(image.shape(), std::move(out));
}

Tensor augment_image(const Tensor& image, const AugmentationPolicy& policy, KeyedRng& rng) {
  const std::size_t h = image.dim(1), w = image.dim(2);
  const float brightness = static_cast<float>(rng.uniform(policy.jitter_min, policy.jitter_max));
  const float contrast = static_cast<float>(rng.uniform(policy.jitter_min, policy.jitter_max));
  Tensor out = color_jitter(image, brightness, contrast);

  const double frac = rng.uniform(policy.crop_min, policy.crop_max);
  const std::size_t ch = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(frac * h)), 1, h);
  const std::size_t cw = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(frac * w)), 1, w);
  const std::size_t top = static_cast<std::size_t>(rng.below(h - ch + 1));
  const std::size_t left = static_cast<std::size_t>(rng.below(w - cw + 1));
  out = resize_bilinear(crop(out, top, left, ch, cw), h, w);

  if (policy.allow_flip && rng.bernoulli(policy.flip_prob)) out = flip_horizontal(out);
  return out;
}

SupportPool augment_support(const Tensor& support_images, std::span<const std::size_t> labels,
                            const AugmentationPolicy& policy, std::uint64_t seed) {
  if (support_images.ndim() != 4 || support_images.dim(0) == 0 || support_images.dim(0) != labels.size())
    throw ContractError("augment_support: " + std::to_string(labels.size()) + " labels for support images " +
                        shape_str(support_images.shape()));
  if (policy.original_weight == 0) throw ContractError("augment_support: original_weight must be >= 1");
  const std::size_t n = labels.size();
  const std::size_t per = support_images.numel() / n;
  Shape image_shape(support_images.shape().begin() + 1, support_images.shape().end());

  std::vector<float> all(support_images.data().begin(), support_images.data().end());
  all.reserve(n * (1 + policy.extra_per_image) * per);
  SupportPool pool;
  pool.labels.assign(labels.begin(), labels.end());
  pool.base_count = n;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t r = 0; r < policy.original_weight; ++r) pool.entries.push_back(i);

  for (std::size_t i = 0; i < n; ++i) {
    auto src = support_images.data().subspan(i * per, per);
    const Tensor original = Tensor::from(image_shape, std::vector<float>(src.begin(), src.end()));
    for (std::size_t e = 0; e < policy.extra_per_image; ++e) {
      KeyedRng rng({seed, i, e, hash_string("augment")});
      const Tensor variant = augment_image(original, policy, rng);
      pool.entries.push_back(pool.labels.size());
      pool.labels.push_back(labels[i]);
      all.insert(all.end(), variant.data().begin(), variant.data().end());
    }
  }
  Shape shape = support_images.shape();
  shape[0] = pool.labels.size();
  pool.images = Tensor::from(std::move(shape), std::move(all));
  return pool;
}

namespace {

void freeze(const std::vector<Tensor>& params) {
  for (auto t : params) t.set_requires_grad(false);
}

}  // namespace

AdaptedModel unadapted_model(const MetaState& state) {
  AdaptedModel m{state.backbone.clone(), state.gnn.clone(), state.node_average_min_shot};
  freeze(m.backbone.parameters());
  freeze(m.gnn.parameters());
  return m;
}

AdaptedModel meta_model_adapt(const MetaState& state, const SupportPool& pool, std::size_t n_way, std::uint64_t seed) {
  KeyedRng rng({seed, hash_string("test-time-inner")});
  InnerResult inner = inner_finetune(state, pool, n_way, rng);
  FeatureExtractor base = state.backbone.clone();
  const std::size_t first_adapted = base.num_blocks() - state.inner.k;
  auto blocks = base.blocks();
  AdaptedModel m{merge_params(base.config(), blocks.subspan(0, first_adapted), inner.adapted), state.gnn.clone(),
                 state.node_average_min_shot};
  freeze(m.backbone.parameters());
  freeze(m.gnn.parameters());
  return m;
}

ModelScores predict_query(const AdaptedModel& model, const Episode& episode, const std::string& model_id) {
  NoGradScope no_grad;
  const Tensor support = model.backbone.forward_batch(episode.support_images);
  const Tensor query = model.backbone.forward_batch(episode.query_images);
  return {score_queries(model.gnn, support, episode.support_labels, query, episode.n_shot, model.node_average_min_shot),
          model_id};
}

BaselineModel baseline_finetune(const FeatureExtractor& pretrained, const SupportPool& pool, std::size_t n_way,
                                const BaselineConfig& cfg, std::uint64_t seed) {
  InnerLoopConfig inner;
  inner.epochs = cfg.epochs;
  inner.k = cfg.k;
  inner.batch_size = cfg.batch_size;
  inner.optimizer = cfg.optimizer;
  InnerResult result = finetune_last_blocks(pretrained, pool, n_way, inner, KeyedRng({seed, hash_string("baseline")}));

  FeatureExtractor base = pretrained.clone();
  const std::size_t first_adapted = base.num_blocks() - cfg.k;
  auto blocks = base.blocks();
  BaselineModel m{merge_params(base.config(), blocks.subspan(0, first_adapted), result.adapted), result.classifier};
  freeze(m.backbone.parameters());
  freeze({m.classifier.weight, m.classifier.bias});
  return m;
}

ModelScores baseline_predict(const BaselineModel& model, const Tensor& query_images, const std::string& model_id) {
  NoGradScope no_grad;
  const Tensor feats = model.backbone.forward_batch(query_images);
  return {linear(feats, model.classifier.weight, model.classifier.bias), model_id};
}

ModelScores baseline_finetune_predict(const FeatureExtractor& pretrained, const SupportPool& pool,
                                      const Tensor& query_images, std::size_t n_way, const BaselineConfig& cfg,
                                      std::uint64_t seed, const std::string& model_id) {
  return baseline_predict(baseline_finetune(pretrained, pool, n_way, cfg, seed), query_images, model_id);
}

std::vector<std::size_t> ensemble_predict(const ModelScores& a, const ModelScores& b) {
  if (a.scores.shape() != b.scores.shape() || a.scores.ndim() != 2)
    throw ContractError("ensemble_predict: score shapes " + shape_str(a.scores.shape()) + " and " +
                        shape_str(b.scores.shape()) + " differ");
  NoGradScope no_grad;
  const Tensor pa = softmax(a.scores);
  const Tensor pb = softmax(b.scores);
  return argmax_rows(add(pa, pb));
}

}  // namespace mft
