#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mft/checkpoint.hpp"
#include "mft/tensor.hpp"

namespace mft {

struct BackboneConfig {
  std::size_t in_channels = 3;
  std::size_t in_height = 32;
  std::size_t in_width = 32;
  std::vector<std::size_t> widths{8, 16, 32, 64};
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 1;

  bool operator==(const BackboneConfig&) const = default;
};

/// conv2d -> relu -> max_pool2
struct ConvBlock {
  Tensor weight;  // [C_out x C_in x k x k]
  Tensor bias;    // [C_out]
};

/// Stack of L conv blocks mapping a [C x H x W] image to a flat feature vector.
class FeatureExtractor {
 public:
  FeatureExtractor() = default;
  /// Validates block shapes against the config; throws ContractError.
  FeatureExtractor(BackboneConfig config, std::vector<ConvBlock> blocks);

  /// Glorot-uniform weights, zero biases, all parameters requiring grad.
  static FeatureExtractor init(const BackboneConfig& config, std::uint64_t seed);

  const BackboneConfig& config() const { return config_; }
  std::size_t num_blocks() const { return blocks_.size(); }
  std::size_t feature_dim() const;
  /// [C x H x W] produced by block `index`.
  Shape block_output_shape(std::size_t index) const;

  /// [N x C x H x W] -> [N x F]
  Tensor forward_batch(const Tensor& images) const;
  /// Runs blocks [first, last) on a batch. Input must have the shape that
  /// block `first` expects; output keeps the 4-D layout.
  Tensor forward_blocks(const Tensor& x, std::size_t first, std::size_t last) const;

  std::span<const ConvBlock> blocks() const { return blocks_; }
  std::span<ConvBlock> blocks() { return blocks_; }

  /// Flat parameter list; block i owns ids 2i (weight) and 2i+1 (bias).
  std::vector<Tensor> parameters() const;
  std::vector<NamedTensor> named_parameters(const std::string& prefix) const;
  /// Replaces parameter values from a checkpoint; shapes must match.
  void load(std::span<const NamedTensor> tensors, const std::string& prefix);

  FeatureExtractor clone() const;

 private:
  BackboneConfig config_;
  std::vector<ConvBlock> blocks_;
};

/// Single image [C x H x W] -> [F]. Records on the active tape if any.
Tensor forward_features(const FeatureExtractor& fe, const Tensor& image);

/// Which parameter ids belong to the frozen first L-k blocks and which to the
/// adaptable last k blocks.
struct ParamPartition {
  std::size_t k = 0;
  std::vector<std::size_t> frozen_ids;
  std::vector<std::size_t> adaptable_ids;
};

/// Requires 1 <= k < L. Marks frozen parameters requires_grad=false and the
/// adaptable ones requires_grad=true on `fe`.
ParamPartition split_params(FeatureExtractor& fe, std::size_t k);

/// Assembles an extractor from the first L-k blocks of one and the last k of
/// another. The result aliases the given tensors (no copy).
FeatureExtractor merge_params(const BackboneConfig& config, std::span<const ConvBlock> frozen,
                              std::span<const ConvBlock> adapted);

}  // namespace mft
