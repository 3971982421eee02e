#include "mft/gnn.hpp"

#include <cmath>
#include <map>

#include "mft/error.hpp"
#include "mft/ops.hpp"
#include "mft/rng.hpp"

namespace mft {

namespace {

Tensor glorot(KeyedRng& rng, std::size_t fan_in, std::size_t fan_out) {
  const double bound = std::sqrt(6.0 / double(fan_in + fan_out));
  std::vector<float> w(fan_in * fan_out);
  for (auto& v : w) v = static_cast<float>(rng.uniform(-bound, bound));
  return Tensor::from({fan_in, fan_out}, std::move(w), true);
}

void copy_into(Tensor& dst, const Tensor& src, const std::string& name) {
  if (src.shape() != dst.shape())
    throw IoError("checkpoint tensor '" + name + "' has shape " + shape_str(src.shape()) + ", model expects " +
                  shape_str(dst.shape()));
  std::copy(src.data().begin(), src.data().end(), dst.mutable_data().begin());
}

}  // namespace

GnnParams GnnParams::init(const GnnConfig& config, std::uint64_t seed) {
  if (config.depth < 1) throw ContractError("GNN depth must be >= 1");
  if (config.n_way < 2) throw ContractError("GNN needs n_way >= 2");
  if (config.feature_dim == 0 || config.proj_dim == 0 || config.gc_dim == 0 || config.edge_hidden == 0)
    throw ContractError("GNN widths must be positive");
  KeyedRng rng({seed, hash_string("gnn-init")});
  GnnParams p;
  p.config = config;
  p.proj_w = glorot(rng, config.feature_dim, config.proj_dim);
  p.proj_b = Tensor::zeros({config.proj_dim}, true);
  for (std::size_t l = 0; l < config.depth; ++l) {
    const std::size_t d = p.layer_input_dim(l);
    GcLayer layer;
    layer.edge.w1 = glorot(rng, d, config.edge_hidden);
    layer.edge.b1 = Tensor::zeros({config.edge_hidden}, true);
    layer.edge.w2 = glorot(rng, config.edge_hidden, config.edge_hidden);
    layer.edge.b2 = Tensor::zeros({config.edge_hidden}, true);
    layer.edge.w3 = glorot(rng, config.edge_hidden, 1);
    layer.edge.b3 = Tensor::zeros({1}, true);
    layer.w_neighbor = glorot(rng, d, config.gc_dim);
    layer.w_self = glorot(rng, d, config.gc_dim);
    layer.bias = Tensor::zeros({config.gc_dim}, true);
    p.layers.push_back(std::move(layer));
  }
  p.head_w = glorot(rng, config.gc_dim, config.n_way);
  p.head_b = Tensor::zeros({config.n_way}, true);
  return p;
}

std::size_t GnnParams::layer_input_dim(std::size_t index) const {
  return config.proj_dim + config.n_way + index * config.gc_dim;
}

std::vector<NamedTensor> GnnParams::named_parameters(const std::string& prefix) const {
  std::vector<NamedTensor> out{{prefix + "proj.weight", proj_w}, {prefix + "proj.bias", proj_b}};
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string base = prefix + "gc" + std::to_string(l) + ".";
    const auto& L = layers[l];
    out.push_back({base + "edge.w1", L.edge.w1});
    out.push_back({base + "edge.b1", L.edge.b1});
    out.push_back({base + "edge.w2", L.edge.w2});
    out.push_back({base + "edge.b2", L.edge.b2});
    out.push_back({base + "edge.w3", L.edge.w3});
    out.push_back({base + "edge.b3", L.edge.b3});
    out.push_back({base + "w_neighbor", L.w_neighbor});
    out.push_back({base + "w_self", L.w_self});
    out.push_back({base + "bias", L.bias});
  }
  out.push_back({prefix + "head.weight", head_w});
  out.push_back({prefix + "head.bias", head_b});
  return out;
}

std::vector<Tensor> GnnParams::parameters() const {
  std::vector<Tensor> out;
  for (auto& nt : named_parameters("")) out.push_back(nt.tensor);
  return out;
}

void GnnParams::load(std::span<const NamedTensor> tensors, const std::string& prefix) {
  for (auto& nt : named_parameters(prefix)) copy_into(nt.tensor, find_tensor(tensors, nt.name), nt.name);
}

GnnParams GnnParams::clone() const {
  GnnParams c;
  c.config = config;
  c.proj_w = proj_w.clone();
  c.proj_b = proj_b.clone();
  for (const auto& L : layers) {
    GcLayer n;
    n.edge = {L.edge.w1.clone(), L.edge.b1.clone(), L.edge.w2.clone(),
              L.edge.b2.clone(), L.edge.w3.clone(), L.edge.b3.clone()};
    n.w_neighbor = L.w_neighbor.clone();
    n.w_self = L.w_self.clone();
    n.bias = L.bias.clone();
    c.layers.push_back(std::move(n));
  }
  c.head_w = head_w.clone();
  c.head_b = head_b.clone();
  return c;
}

Tensor project_features(const Tensor& features, const GnnParams& params) {
  if (features.ndim() != 2 || features.dim(1) != params.config.feature_dim)
    throw DimensionError("project_features: expected [n x " + std::to_string(params.config.feature_dim) +
                         "], got " + shape_str(features.shape()));
  return linear(features, params.proj_w, params.proj_b);
}

GraphSignal build_node_signal(const Tensor& support_feats, std::span<const std::size_t> support_labels,
                              const Tensor& query_feat, std::size_t n_way) {
  if (support_feats.ndim() != 2) throw DimensionError("build_node_signal: support must be [N_s x d]");
  const std::size_t ns = support_feats.dim(0), d = support_feats.dim(1);
  if (support_labels.size() != ns)
    throw DimensionError("build_node_signal: " + std::to_string(support_labels.size()) + " labels for " +
                         std::to_string(ns) + " support rows");
  if (ns < n_way)
    throw ContractError("build_node_signal: " + std::to_string(ns) + " support vertices for " +
                        std::to_string(n_way) + " classes");
  if (query_feat.numel() != d)
    throw DimensionError("build_node_signal: query " + shape_str(query_feat.shape()) + " does not match width " +
                         std::to_string(d));

  std::vector<float> label_block((ns + 1) * n_way, 0.0f);
  for (std::size_t i = 0; i < ns; ++i) {
    if (support_labels[i] >= n_way)
      throw IndexError("build_node_signal: label " + std::to_string(support_labels[i]) + " out of range for " +
                       std::to_string(n_way) + "-way");
    label_block[i * n_way + support_labels[i]] = 1.0f;
  }
  for (std::size_t c = 0; c < n_way; ++c) label_block[ns * n_way + c] = 1.0f / float(n_way);

  const Tensor rows[2] = {support_feats, query_feat.ndim() == 2 ? query_feat : reshape(query_feat, {1, d})};
  Tensor feats = concat_rows(rows);
  Tensor labels = Tensor::from({ns + 1, n_way}, std::move(label_block));
  return GraphSignal{concat_cols(feats, labels), ns, n_way};
}

namespace {

/// Edge MLP applied to a batch of absolute-difference rows; one logit per row.
Tensor edge_mlp(const Tensor& absdiff, const EdgeMlp& mlp) {
  Tensor h = relu(linear(absdiff, mlp.w1, mlp.b1));
  h = relu(linear(h, mlp.w2, mlp.b2));
  return linear(h, mlp.w3, mlp.b3);
}

}  // namespace

Tensor edge_logits(const Tensor& node_features, const EdgeMlp& mlp) {
  if (node_features.ndim() != 2 || node_features.dim(0) < 2)
    throw DimensionError("edge_weights: need at least 2 vertices, got " + shape_str(node_features.shape()));
  // |x_i - x_j| is symmetric, so each unordered pair goes through the MLP once.
  return symmetric_from_upper(edge_mlp(upper_pairs_absdiff(node_features), mlp), node_features.dim(0));
}

Tensor edge_weights(const Tensor& node_features, const EdgeMlp& mlp) {
  return offdiag_softmax_rows(edge_logits(node_features, mlp));
}

Tensor graph_convolution(const Tensor& node_features, const Tensor& adjacency, const GcLayer& layer,
                         bool apply_relu) {
  if (node_features.ndim() != 2) throw DimensionError("graph_convolution: node features must be 2-D");
  const std::size_t v = node_features.dim(0), d = node_features.dim(1);
  if (adjacency.shape() != Shape{v, v})
    throw ContractError("graph_convolution: adjacency " + shape_str(adjacency.shape()) + " does not match " +
                        std::to_string(v) + " vertices");
  if (layer.w_neighbor.dim(0) != d || layer.w_self.dim(0) != d)
    throw ContractError("graph_convolution: layer expects width " + std::to_string(layer.w_neighbor.dim(0)) +
                        ", vertices have " + std::to_string(d));
  Tensor neighbor = matmul(matmul(adjacency, node_features), layer.w_neighbor);
  Tensor self = matmul(node_features, layer.w_self);
  Tensor out = add_row_bias(add(neighbor, self), layer.bias);
  return apply_relu ? relu(out) : out;
}

namespace {

/// Runs every layer given the first layer's adjacency; returns the query row's scores.
Tensor run_layers(Tensor x, Tensor adjacency, std::size_t query_index, const GnnParams& params) {
  Tensor out;
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const bool last = l + 1 == params.layers.size();
    if (l > 0) adjacency = edge_weights(x, params.layers[l].edge);
    out = graph_convolution(x, adjacency, params.layers[l], !last);
    if (!last) x = concat_cols(x, out);
  }
  const std::size_t query_row[1] = {query_index};
  Tensor q = select_rows(out, query_row);
  return reshape(linear(q, params.head_w, params.head_b), {params.config.n_way});
}

}  // namespace

Tensor gnn_forward(const GraphSignal& signal, const GnnParams& params) {
  const auto& cfg = params.config;
  if (signal.way_count != cfg.n_way)
    throw ContractError("gnn_forward: signal is " + std::to_string(signal.way_count) + "-way, model is " +
                        std::to_string(cfg.n_way) + "-way");
  if (signal.node_features.ndim() != 2 || signal.node_features.dim(1) != params.layer_input_dim(0) ||
      signal.node_features.dim(0) != signal.support_count + 1)
    throw ContractError("gnn_forward: node features " + shape_str(signal.node_features.shape()) +
                        " do not match the signal layout");
  const Tensor& x = signal.node_features;
  return run_layers(x, edge_weights(x, params.layers.front().edge), signal.support_count, params);
}

Tensor gnn_query_scores(const GnnParams& params, const Tensor& support_feats,
                        std::span<const std::size_t> support_labels, const Tensor& query_feats) {
  if (query_feats.ndim() != 2) throw DimensionError("gnn_query_scores: queries must be [N_q x F]");
  const Tensor support_proj = project_features(support_feats, params);
  const Tensor query_proj = project_features(query_feats, params);
  const std::size_t nq = query_feats.dim(0), n_way = params.config.n_way;
  const std::size_t ns = support_proj.dim(0);
  if (nq == 0) throw DimensionError("gnn_query_scores: no queries");

  // Support vertices enter the first layer identically for every query, so
  // their pairwise edge logits are computed once and bordered per query.
  const std::size_t first[1] = {0};
  const GraphSignal probe = build_node_signal(support_proj, support_labels, select_rows(query_proj, first), n_way);
  std::vector<std::size_t> support_rows(ns);
  for (std::size_t i = 0; i < ns; ++i) support_rows[i] = i;
  const Tensor support_nodes = select_rows(probe.node_features, support_rows);
  const EdgeMlp& edge0 = params.layers.front().edge;
  const Tensor support_logits = edge_logits(support_nodes, edge0);
  const Tensor uniform = Tensor::full({1, n_way}, 1.0f / float(n_way));

  std::vector<Tensor> rows;
  rows.reserve(nq);
  for (std::size_t q = 0; q < nq; ++q) {
    const std::size_t idx[1] = {q};
    const Tensor query_node = concat_cols(select_rows(query_proj, idx), uniform);
    const Tensor border = edge_mlp(absdiff_rows(support_nodes, query_node), edge0);
    const Tensor adjacency = offdiag_softmax_rows(border_matrix(support_logits, border));
    const Tensor nodes[2] = {support_nodes, query_node};
    rows.push_back(reshape(run_layers(concat_rows(nodes), adjacency, ns, params), {1, n_way}));
  }
  return concat_rows(rows);
}

MergedSupport merge_support_nodes(const Tensor& support_feats, std::span<const std::size_t> support_labels,
                                  std::span<const std::vector<std::size_t>> groups) {
  if (support_feats.ndim() != 2) throw DimensionError("merge_support_nodes: support must be [N_s x d]");
  const std::size_t ns = support_feats.dim(0);
  if (support_labels.size() != ns) throw DimensionError("merge_support_nodes: label count mismatch");
  if (groups.empty()) throw ContractError("merge_support_nodes: no groups");
  std::vector<int> seen(ns, 0);
  std::vector<float> weights(groups.size() * ns, 0.0f);
  MergedSupport merged;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const auto& group = groups[g];
    if (group.empty()) throw ContractError("merge_support_nodes: empty group " + std::to_string(g));
    for (auto row : group) {
      if (row >= ns) throw IndexError("merge_support_nodes: row " + std::to_string(row) + " out of range");
      if (support_labels[row] != support_labels[group.front()])
        throw ContractError("merge_support_nodes: group " + std::to_string(g) + " mixes classes " +
                            std::to_string(support_labels[group.front()]) + " and " +
                            std::to_string(support_labels[row]));
      ++seen[row];
      weights[g * ns + row] += 1.0f / float(group.size());
    }
    merged.labels.push_back(support_labels[group.front()]);
  }
  for (std::size_t i = 0; i < ns; ++i)
    if (seen[i] != 1)
      throw ContractError("merge_support_nodes: support row " + std::to_string(i) + " used " +
                          std::to_string(seen[i]) + " times");
  merged.features = matmul(Tensor::from({groups.size(), ns}, std::move(weights)), support_feats);
  return merged;
}

MergedSupport average_support_pairs(const Tensor& support_feats, std::span<const std::size_t> support_labels) {
  std::map<std::size_t, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < support_labels.size(); ++i) by_class[support_labels[i]].push_back(i);
  std::vector<std::vector<std::size_t>> groups;
  for (const auto& [label, rows] : by_class) {
    for (std::size_t i = 0; i + 1 < rows.size(); i += 2) groups.push_back({rows[i], rows[i + 1]});
    if (rows.size() % 2 == 1) groups.push_back({rows.back()});
  }
  return merge_support_nodes(support_feats, support_labels, groups);
}

}  // namespace mft
