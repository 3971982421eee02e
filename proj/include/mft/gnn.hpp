#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mft/checkpoint.hpp"
#include "mft/tensor.hpp"

namespace mft {

struct GnnConfig {
  std::size_t feature_dim = 256;  // F, backbone output width
  std::size_t proj_dim = 64;      // d_k
  std::size_t gc_dim = 32;        // output width of every graph-convolution layer
  std::size_t depth = 2;
  std::size_t edge_hidden = 64;   // width of both edge-MLP hidden layers
  std::size_t n_way = 5;

  bool operator==(const GnnConfig&) const = default;
};

/// Scalar-output MLP applied to |x_i - x_j|: two relu hidden layers.
struct EdgeMlp {
  Tensor w1, b1, w2, b2, w3, b3;
};

/// One graph-convolution layer with its own edge network.
///
/// out = A X W_neighbor + X W_self + bias, relu on every layer but the last.
/// A non-final layer's output is appended to its input, so layer l+1 sees
/// width d_l + gc_dim.
struct GcLayer {
  EdgeMlp edge;
  Tensor w_neighbor;  // [d_l x gc_dim]
  Tensor w_self;      // [d_l x gc_dim]
  Tensor bias;        // [gc_dim]
};

struct GnnParams {
  GnnConfig config;
  Tensor proj_w;  // [F x d_k]
  Tensor proj_b;  // [d_k]
  std::vector<GcLayer> layers;
  Tensor head_w;  // [gc_dim x n_way]
  Tensor head_b;  // [n_way]

  static GnnParams init(const GnnConfig& config, std::uint64_t seed);
  /// Input width seen by layer `index`.
  std::size_t layer_input_dim(std::size_t index) const;
  std::vector<Tensor> parameters() const;
  std::vector<NamedTensor> named_parameters(const std::string& prefix) const;
  void load(std::span<const NamedTensor> tensors, const std::string& prefix);
  GnnParams clone() const;
};

/// Vertex features of one query graph: support rows first, the query last.
struct GraphSignal {
  Tensor node_features;  // [(N_s+1) x (d_k + n_way)]
  std::size_t support_count = 0;
  std::size_t way_count = 0;
};

/// Rowwise affine map [n x F] -> [n x d_k].
Tensor project_features(const Tensor& features, const GnnParams& params);

/// Appends one-hot label blocks to support rows and a uniform 1/n_way block
/// to the query row.
GraphSignal build_node_signal(const Tensor& support_feats, std::span<const std::size_t> support_labels,
                              const Tensor& query_feat, std::size_t n_way);

/// Pre-normalization edge scores MLP(|x_i - x_j|) as a [V x V] matrix.
Tensor edge_logits(const Tensor& node_features, const EdgeMlp& mlp);
/// Edge scores softmax-normalized over j != i; zero diagonal.
Tensor edge_weights(const Tensor& node_features, const EdgeMlp& mlp);

Tensor graph_convolution(const Tensor& node_features, const Tensor& adjacency, const GcLayer& layer,
                         bool apply_relu);

/// Class logits [n_way] for the query vertex of one graph.
Tensor gnn_forward(const GraphSignal& signal, const GnnParams& params);

/// Builds one graph per query over a shared support set and stacks the
/// query logits into [N_q x n_way]. Features are raw backbone features.
Tensor gnn_query_scores(const GnnParams& params, const Tensor& support_feats,
                        std::span<const std::size_t> support_labels, const Tensor& query_feats);

struct MergedSupport {
  Tensor features;
  std::vector<std::size_t> labels;
};

/// Replaces each group of support rows by its arithmetic mean. Every group
/// must be non-empty and single-class (ContractError otherwise); every row
/// must appear in exactly one group.
MergedSupport merge_support_nodes(const Tensor& support_feats, std::span<const std::size_t> support_labels,
                                  std::span<const std::vector<std::size_t>> groups);

/// Averages consecutive same-class rows in pairs; an odd class keeps its last
/// row as is. Output is ordered by class index, then by original position.
MergedSupport average_support_pairs(const Tensor& support_feats, std::span<const std::size_t> support_labels);

}  // namespace mft
