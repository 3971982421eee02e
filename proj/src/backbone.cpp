#include "mft/backbone.hpp"

#include <algorithm>
#include <cmath>

#include "mft/error.hpp"
#include "mft/ops.hpp"
#include "mft/rng.hpp"
#include "mft/tape.hpp"

namespace mft {

namespace {

constexpr std::size_t kInferenceChunk = 64;

Shape expected_weight_shape(const BackboneConfig& cfg, std::size_t block) {
  const std::size_t c_in = block == 0 ? cfg.in_channels : cfg.widths[block - 1];
  return {cfg.widths[block], c_in, cfg.kernel, cfg.kernel};
}

void validate_config(const BackboneConfig& cfg) {
  if (cfg.widths.size() < 2) throw ContractError("backbone needs at least 2 blocks, got " + std::to_string(cfg.widths.size()));
  if (cfg.stride < 1 || cfg.kernel < 1) throw ContractError("backbone kernel and stride must be positive");
  for (auto w : cfg.widths)
    if (w == 0) throw ContractError("backbone block width must be positive");
}

}  // namespace

FeatureExtractor::FeatureExtractor(BackboneConfig config, std::vector<ConvBlock> blocks)
    : config_(std::move(config)), blocks_(std::move(blocks)) {
  validate_config(config_);
  if (blocks_.size() != config_.widths.size())
    throw ContractError("backbone has " + std::to_string(blocks_.size()) + " blocks but config lists " +
                        std::to_string(config_.widths.size()));
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    if (blocks_[i].weight.shape() != expected_weight_shape(config_, i) ||
        blocks_[i].bias.shape() != Shape{config_.widths[i]})
      throw ContractError("block " + std::to_string(i) + " has weight " + shape_str(blocks_[i].weight.shape()) +
                          ", architecture expects " + shape_str(expected_weight_shape(config_, i)));
  }
  (void)block_output_shape(blocks_.size() - 1);
}

FeatureExtractor FeatureExtractor::init(const BackboneConfig& config, std::uint64_t seed) {
  validate_config(config);
  KeyedRng rng({seed, hash_string("backbone-init")});
  std::vector<ConvBlock> blocks;
  for (std::size_t i = 0; i < config.widths.size(); ++i) {
    Shape ws = expected_weight_shape(config, i);
    const double fan_in = double(ws[1] * ws[2] * ws[3]);
    const double fan_out = double(ws[0] * ws[2] * ws[3]);
    const double bound = std::sqrt(6.0 / (fan_in + fan_out));
    std::vector<float> w(shape_numel(ws));
    for (auto& v : w) v = static_cast<float>(rng.uniform(-bound, bound));
    blocks.push_back({Tensor::from(ws, std::move(w), true), Tensor::zeros({config.widths[i]}, true)});
  }
  return FeatureExtractor(config, std::move(blocks));
}

Shape FeatureExtractor::block_output_shape(std::size_t index) const {
  std::size_t h = config_.in_height, w = config_.in_width;
  for (std::size_t i = 0; i <= index; ++i) {
    if (config_.kernel > h + 2 * config_.padding || config_.kernel > w + 2 * config_.padding)
      throw ContractError("backbone input too small for block " + std::to_string(i));
    h = (h + 2 * config_.padding - config_.kernel) / config_.stride + 1;
    w = (w + 2 * config_.padding - config_.kernel) / config_.stride + 1;
    h /= 2;
    w /= 2;
    if (h == 0 || w == 0) throw ContractError("backbone spatial size collapses to zero at block " + std::to_string(i));
  }
  return {config_.widths[index], h, w};
}

std::size_t FeatureExtractor::feature_dim() const { return shape_numel(block_output_shape(blocks_.size() - 1)); }

Tensor FeatureExtractor::forward_blocks(const Tensor& x, std::size_t first, std::size_t last) const {
  if (first > last || last > blocks_.size())
    throw ContractError("forward_blocks: invalid block range [" + std::to_string(first) + ", " +
                        std::to_string(last) + ")");
  if (x.ndim() != 4) throw DimensionError("forward_blocks: expected [N x C x H x W], got " + shape_str(x.shape()));
  const Shape expect = first == 0 ? Shape{config_.in_channels, config_.in_height, config_.in_width}
                                  : block_output_shape(first - 1);
  if (Shape{x.dim(1), x.dim(2), x.dim(3)} != expect)
    throw DimensionError("forward_blocks: block " + std::to_string(first) + " expects " + shape_str(expect) +
                         " per image, got " + shape_str(x.shape()));

  const std::size_t n = x.dim(0);
  if (!active_tape() && n > kInferenceChunk) {
    // Bounds im2col memory on large inference batches.
    std::vector<Tensor> parts;
    for (std::size_t start = 0; start < n; start += kInferenceChunk) {
      std::vector<std::size_t> rows;
      for (std::size_t r = start; r < std::min(n, start + kInferenceChunk); ++r) rows.push_back(r);
      parts.push_back(forward_blocks(select_rows(x, rows), first, last));
    }
    const Shape out_shape = parts[0].shape();
    std::vector<float> all;
    all.reserve(n * parts[0].numel() / parts[0].dim(0));
    for (const auto& p : parts) all.insert(all.end(), p.data().begin(), p.data().end());
    return Tensor::from({n, out_shape[1], out_shape[2], out_shape[3]}, std::move(all));
  }

  Tensor h = x;
  for (std::size_t i = first; i < last; ++i) {
    h = conv2d(h, blocks_[i].weight, blocks_[i].bias, config_.stride, config_.padding);
    h = relu(h);
    h = max_pool2(h);
  }
  return h;
}

Tensor FeatureExtractor::forward_batch(const Tensor& images) const {
  Tensor h = forward_blocks(images, 0, blocks_.size());
  return reshape(h, {images.dim(0), feature_dim()});
}

std::vector<Tensor> FeatureExtractor::parameters() const {
  std::vector<Tensor> params;
  for (const auto& b : blocks_) {
    params.push_back(b.weight);
    params.push_back(b.bias);
  }
  return params;
}

std::vector<NamedTensor> FeatureExtractor::named_parameters(const std::string& prefix) const {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    out.push_back({prefix + "block" + std::to_string(i) + ".weight", blocks_[i].weight});
    out.push_back({prefix + "block" + std::to_string(i) + ".bias", blocks_[i].bias});
  }
  return out;
}

void FeatureExtractor::load(std::span<const NamedTensor> tensors, const std::string& prefix) {
  for (auto& nt : named_parameters(prefix)) {
    const Tensor& src = find_tensor(tensors, nt.name);
    if (src.shape() != nt.tensor.shape())
      throw IoError("checkpoint tensor '" + nt.name + "' has shape " + shape_str(src.shape()) + ", model expects " +
                    shape_str(nt.tensor.shape()));
    auto dst = nt.tensor.mutable_data();
    std::copy(src.data().begin(), src.data().end(), dst.begin());
  }
}

FeatureExtractor FeatureExtractor::clone() const {
  std::vector<ConvBlock> copy;
  for (const auto& b : blocks_) copy.push_back({b.weight.clone(), b.bias.clone()});
  return FeatureExtractor(config_, std::move(copy));
}

Tensor forward_features(const FeatureExtractor& fe, const Tensor& image) {
  if (image.ndim() != 3)
    throw DimensionError("forward_features: expected a [C x H x W] image, got " + shape_str(image.shape()));
  const auto& cfg = fe.config();
  if (image.shape() != Shape{cfg.in_channels, cfg.in_height, cfg.in_width})
    throw DimensionError("forward_features: image " + shape_str(image.shape()) + " does not match input size " +
                         shape_str({cfg.in_channels, cfg.in_height, cfg.in_width}));
  Tensor batch = reshape(image, {1, cfg.in_channels, cfg.in_height, cfg.in_width});
  return reshape(fe.forward_batch(batch), {fe.feature_dim()});
}

ParamPartition split_params(FeatureExtractor& fe, std::size_t k) {
  const std::size_t L = fe.num_blocks();
  if (k < 1 || k >= L)
    throw ContractError("split_params: k=" + std::to_string(k) + " outside [1, " + std::to_string(L - 1) + "]");
  ParamPartition part;
  part.k = k;
  auto blocks = fe.blocks();
  for (std::size_t i = 0; i < L; ++i) {
    const bool adapt = i >= L - k;
    auto& ids = adapt ? part.adaptable_ids : part.frozen_ids;
    ids.push_back(2 * i);
    ids.push_back(2 * i + 1);
    blocks[i].weight.set_requires_grad(adapt);
    blocks[i].bias.set_requires_grad(adapt);
  }
  return part;
}

FeatureExtractor merge_params(const BackboneConfig& config, std::span<const ConvBlock> frozen,
                              std::span<const ConvBlock> adapted) {
  if (frozen.size() + adapted.size() != config.widths.size())
    throw ContractError("merge_params: " + std::to_string(frozen.size()) + " frozen + " +
                        std::to_string(adapted.size()) + " adapted blocks do not make " +
                        std::to_string(config.widths.size()));
  std::vector<ConvBlock> blocks(frozen.begin(), frozen.end());
  blocks.insert(blocks.end(), adapted.begin(), adapted.end());
  return FeatureExtractor(config, std::move(blocks));
}

}  // namespace mft
