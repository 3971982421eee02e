#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "mft/backbone.hpp"
#include "mft/episodes.hpp"
#include "mft/gnn.hpp"
#include "mft/optim.hpp"
#include "mft/rng.hpp"

namespace mft {

/// Fine-tuning of the last k backbone blocks through a throwaway linear
/// classifier. Used inside training episodes and at test time.
struct InnerLoopConfig {
  std::size_t epochs = 5;
  std::size_t batch_size = 0;          // 0: number of original support images
  std::optional<std::size_t> steps;    // overrides the epoch-derived step count
  OptimizerConfig optimizer{OptimizerKind::Adam, 1e-2f};
  std::size_t k = 1;
  /// Rescale the last block after fine-tuning so the RMS feature of the
  /// original support images is what it was before. Fine-tuning through a
  /// linear head inflates feature scale, which a fixed GNN cannot absorb.
  bool match_feature_norm = false;
};

/// Images available to the inner loop. `entries` indexes `images` and may
/// repeat an index to weight that image more; one epoch visits every entry.
struct SupportPool {
  Tensor images;  // [M x C x H x W], distinct images
  std::vector<std::size_t> labels;
  std::vector<std::size_t> entries;
  std::size_t base_count = 0;  // how many of the first images are un-augmented originals
};

/// Pool that visits each support image once.
SupportPool plain_pool(const Tensor& images, std::span<const std::size_t> labels);

struct LinearClassifier {
  Tensor weight;  // [F x n_way]
  Tensor bias;    // [n_way]
};

struct InnerResult {
  std::vector<ConvBlock> adapted;  // copies of the last k blocks after the loop
  LinearClassifier classifier;
  std::size_t steps = 0;
};

/// Number of inner steps the config implies for a pool.
std::size_t inner_step_count(const InnerLoopConfig& cfg, const SupportPool& pool);

/// Runs the inner loop on copies of the last k blocks of `backbone`; the
/// backbone itself is never written. The first L-k blocks run once, without
/// recording, and their activations are reused for every step.
InnerResult finetune_last_blocks(const FeatureExtractor& backbone, const SupportPool& pool, std::size_t n_way,
                                 const InnerLoopConfig& cfg, KeyedRng rng);

/// Backbone parameters, metric module and the outer optimizer that updates
/// all of them.
struct MetaState {
  FeatureExtractor backbone;
  GnnParams gnn;
  OptimizerState outer;
  InnerLoopConfig inner;
  std::size_t node_average_min_shot = 50;  // pairwise node averaging from this shot count; 0 disables
  std::uint64_t seed = 0;

  static MetaState init(const BackboneConfig& backbone, const GnnConfig& gnn, const OptimizerConfig& outer,
                        const InnerLoopConfig& inner, std::uint64_t seed);

  /// Backbone parameters (block order) followed by GNN parameters.
  std::vector<Tensor> parameters() const;
  std::vector<NamedTensor> named_parameters() const;
  MetaState clone() const;
};

InnerResult inner_finetune(const MetaState& state, const SupportPool& pool, std::size_t n_way, KeyedRng rng);

/// Query logits [N_q x n_way] from support/query features, applying pairwise
/// node averaging when n_shot reaches the state's threshold.
Tensor score_queries(const GnnParams& gnn, const Tensor& support_feats, std::span<const std::size_t> support_labels,
                     const Tensor& query_feats, std::size_t n_shot, std::size_t node_average_min_shot);

struct StepResult {
  float loss = 0.0f;
  float accuracy = 0.0f;
  float adapt_gap = 0.0f;  // L2 distance between adapted and initial last-k parameters
};

/// One episode of meta fine-tuning: inner loop on the support set, query loss
/// at the adapted parameters, first-order outer update of every parameter.
StepResult meta_step(MetaState& state, const Episode& episode);

/// Plain episodic training step: query loss at the current parameters.
StepResult episodic_step(MetaState& state, const Episode& episode);

struct TrainRecord {
  std::size_t episode = 0;
  float loss = 0.0f;
  float accuracy = 0.0f;
  float adapt_gap = 0.0f;
};

using EpisodeStream = std::function<Episode(std::size_t)>;
using CheckpointHook = std::function<void(const MetaState&, std::size_t episodes_done)>;

std::vector<TrainRecord> train_meta(MetaState& state, const EpisodeStream& stream, std::size_t n_episodes,
                                    std::size_t checkpoint_every = 0, const CheckpointHook& hook = {});

/// train_meta with the inner loop disabled.
std::vector<TrainRecord> pretrain_episodic(MetaState& state, const EpisodeStream& stream, std::size_t n_episodes,
                                           std::size_t checkpoint_every = 0, const CheckpointHook& hook = {});

/// Saves parameters and outer optimizer state in the checkpoint format.
void save_meta_state(const std::filesystem::path& path, const MetaState& state);
/// Loads values into an already-shaped state. Optimizer moments are restored
/// when present and `with_optimizer` is set.
void load_meta_state(const std::filesystem::path& path, MetaState& state, bool with_optimizer = true);

void write_loss_csv(const std::filesystem::path& path, std::span<const TrainRecord> records);

std::vector<std::size_t> argmax_rows(const Tensor& scores);
float accuracy_of(std::span<const std::size_t> predicted, std::span<const std::size_t> labels);

}  // namespace mft
