#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mft/backbone.hpp"
#include "mft/episodes.hpp"
#include "mft/gnn.hpp"
#include "mft/meta_finetune.hpp"
#include "mft/rng.hpp"

namespace mft {

struct AugmentationPolicy {
  std::size_t extra_per_image = 17;
  std::size_t original_weight = 3;  // entries per original image for each entry of an augmented copy
  float jitter_min = 0.6f;          // brightness and contrast factors are drawn from [min, max]
  float jitter_max = 1.4f;
  float crop_min = 0.7f;  // crop side as a fraction of the image side
  float crop_max = 1.0f;
  float flip_prob = 0.5f;
  bool allow_flip = true;
};

/// Scales brightness and contrast (around the image mean), clamped to [0, 1].
Tensor color_jitter(const Tensor& image, float brightness, float contrast);

/// One randomized variant: jitter, random crop resized back, optional flip.
Tensor augment_image(const Tensor& image, const AugmentationPolicy& policy, KeyedRng& rng);

/// Support images first (entries repeated original_weight times), then
/// extra_per_image variants of each (one entry each). Deterministic in seed.
SupportPool augment_support(const Tensor& support_images, std::span<const std::size_t> labels,
                            const AugmentationPolicy& policy, std::uint64_t seed);

/// Per-query class scores from one model, rows in episode query order.
struct ModelScores {
  Tensor scores;  // [N_q x n_way]
  std::string model_id;
};

/// Backbone + GNN with every parameter frozen, ready for prediction.
struct AdaptedModel {
  FeatureExtractor backbone;
  GnnParams gnn;
  std::size_t node_average_min_shot = 50;
};

/// The trained model as-is, without test-time fine-tuning.
AdaptedModel unadapted_model(const MetaState& state);

/// Runs the training-time inner loop on `pool`, merges the adapted blocks and
/// freezes everything.
AdaptedModel meta_model_adapt(const MetaState& state, const SupportPool& pool, std::size_t n_way, std::uint64_t seed);

/// Scores the episode's base (center-cropped, un-augmented) query images
/// against a graph built on its base support images.
ModelScores predict_query(const AdaptedModel& model, const Episode& episode, const std::string& model_id = "gnn");

struct BaselineConfig {
  std::size_t epochs = 20;
  std::size_t k = 1;
  std::size_t batch_size = 0;
  OptimizerConfig optimizer{OptimizerKind::Adam, 1e-3f, 1e-3f};
};

/// Pretrained backbone with its last k blocks fine-tuned, plus the classifier
/// trained alongside them.
struct BaselineModel {
  FeatureExtractor backbone;
  LinearClassifier classifier;
};

/// Fresh linear classifier on top of a pretrained backbone; the last k blocks
/// and the classifier are fine-tuned on the pool. Everything is frozen after.
BaselineModel baseline_finetune(const FeatureExtractor& pretrained, const SupportPool& pool, std::size_t n_way,
                                const BaselineConfig& cfg, std::uint64_t seed);

/// Query logits straight from the baseline's classifier.
ModelScores baseline_predict(const BaselineModel& model, const Tensor& query_images,
                             const std::string& model_id = "baseline");

ModelScores baseline_finetune_predict(const FeatureExtractor& pretrained, const SupportPool& pool,
                                      const Tensor& query_images, std::size_t n_way, const BaselineConfig& cfg,
                                      std::uint64_t seed, const std::string& model_id = "baseline");

/// softmax(a) + softmax(b) per row, then argmax (lowest index on ties).
std::vector<std::size_t> ensemble_predict(const ModelScores& a, const ModelScores& b);

}  // namespace mft
