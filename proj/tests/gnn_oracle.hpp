#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "mft/gnn.hpp"
#include "support.hpp"

// Double-precision GNN written from scratch with nested loops. Shares no code
// with the library beyond reading parameter values.
namespace mft::test::oracle {

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;

inline Mat to_mat(const Tensor& t) {
  const std::size_t r = t.dim(0), c = t.numel() / r;
  Mat m(r, Vec(c));
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) m[i][j] = t[i * c + j];
  return m;
}

inline Vec to_vec(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

inline Mat mat_mul(const Mat& a, const Mat& b) {
  Mat out(a.size(), Vec(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t t = 0; t < b.size(); ++t)
      for (std::size_t j = 0; j < b[0].size(); ++j) out[i][j] += a[i][t] * b[t][j];
  return out;
}

inline Vec affine(const Vec& x, const Mat& w, const Vec& b, bool rectify) {
  Vec out(b);
  for (std::size_t j = 0; j < out.size(); ++j) {
    for (std::size_t i = 0; i < x.size(); ++i) out[j] += x[i] * w[i][j];
    if (rectify) out[j] = std::max(0.0, out[j]);
  }
  return out;
}

struct DEdge {
  Mat w1;
  Vec b1;
  Mat w2;
  Vec b2;
  Mat w3;
  Vec b3;
};

inline DEdge to_double(const EdgeMlp& e) {
  return {to_mat(e.w1), to_vec(e.b1), to_mat(e.w2), to_vec(e.b2), to_mat(e.w3), to_vec(e.b3)};
}

struct DLayer {
  DEdge edge;
  Mat w_neighbor, w_self;
  Vec bias;
};

/// Double copy of GnnParams. `slots()` lists every scalar in the library's
/// parameter order, so finite differences can perturb them one by one.
struct DGnn {
  std::size_t n_way = 0;
  Mat proj_w;
  Vec proj_b;
  std::vector<DLayer> layers;
  Mat head_w;
  Vec head_b;

  static DGnn from(const GnnParams& p) {
    DGnn g{p.config.n_way, to_mat(p.proj_w), to_vec(p.proj_b), {}, to_mat(p.head_w), to_vec(p.head_b)};
    for (const auto& L : p.layers)
      g.layers.push_back({to_double(L.edge), to_mat(L.w_neighbor), to_mat(L.w_self), to_vec(L.bias)});
    return g;
  }

  std::vector<double*> slots() {
    std::vector<double*> out;
    auto add_m = [&](Mat& m) {
      for (auto& r : m)
        for (auto& v : r) out.push_back(&v);
    };
    auto add_v = [&](Vec& v) {
      for (auto& x : v) out.push_back(&x);
    };
    add_m(proj_w);
    add_v(proj_b);
    for (auto& L : layers) {
      add_m(L.edge.w1);
      add_v(L.edge.b1);
      add_m(L.edge.w2);
      add_v(L.edge.b2);
      add_m(L.edge.w3);
      add_v(L.edge.b3);
      add_m(L.w_neighbor);
      add_m(L.w_self);
      add_v(L.bias);
    }
    add_m(head_w);
    add_v(head_b);
    return out;
  }
};

inline double edge_score(const Vec& xi, const Vec& xj, const DEdge& e) {
  Vec d(xi.size());
  for (std::size_t t = 0; t < d.size(); ++t) d[t] = std::fabs(xi[t] - xj[t]);
  auto h = affine(d, e.w1, e.b1, true);
  h = affine(h, e.w2, e.b2, true);
  return affine(h, e.w3, e.b3, false)[0];
}

inline double edge_score(const Vec& xi, const Vec& xj, const EdgeMlp& e) { return edge_score(xi, xj, to_double(e)); }

inline Mat oracle_adjacency(const Mat& x, const DEdge& e) {
  const std::size_t v = x.size();
  Mat a(v, Vec(v, 0.0));
  for (std::size_t i = 0; i < v; ++i) {
    double mx = -1e300;
    for (std::size_t j = 0; j < v; ++j)
      if (j != i) mx = std::max(mx, a[i][j] = edge_score(x[i], x[j], e));
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j)
      if (j != i) z += a[i][j] = std::exp(a[i][j] - mx);
    for (std::size_t j = 0; j < v; ++j)
      if (j != i) a[i][j] /= z;
  }
  return a;
}

inline Mat oracle_adjacency(const Mat& x, const EdgeMlp& e) { return oracle_adjacency(x, to_double(e)); }

/// Node rows of one query graph: projected feature, then the label block.
inline Mat oracle_nodes(const DGnn& g, const Mat& support, std::span<const std::size_t> labels, const Vec& query) {
  Mat x;
  auto node = [&](const Vec& f, int label) {
    auto proj = affine(f, g.proj_w, g.proj_b, false);
    for (std::size_t c = 0; c < g.n_way; ++c)
      proj.push_back(label < 0 ? 1.0 / double(g.n_way) : (std::size_t(label) == c ? 1.0 : 0.0));
    return proj;
  };
  for (std::size_t i = 0; i < support.size(); ++i) x.push_back(node(support[i], int(labels[i])));
  x.push_back(node(query, -1));
  return x;
}

/// Query logits of one graph.
inline Vec oracle_scores(const DGnn& g, const Mat& support, std::span<const std::size_t> labels, const Vec& query) {
  Mat x = oracle_nodes(g, support, labels, query);
  Vec last;
  for (std::size_t l = 0; l < g.layers.size(); ++l) {
    const auto& L = g.layers[l];
    const bool final_layer = l + 1 == g.layers.size();
    const Mat a = oracle_adjacency(x, L.edge);
    const Mat agg = mat_mul(a, x);
    Mat out(x.size(), L.bias);
    for (std::size_t i = 0; i < x.size(); ++i)
      for (std::size_t j = 0; j < out[i].size(); ++j) {
        for (std::size_t t = 0; t < x[i].size(); ++t)
          out[i][j] += agg[i][t] * L.w_neighbor[t][j] + x[i][t] * L.w_self[t][j];
        if (!final_layer) out[i][j] = std::max(0.0, out[i][j]);
      }
    if (final_layer) {
      last = out.back();
    } else {
      for (std::size_t i = 0; i < x.size(); ++i) x[i].insert(x[i].end(), out[i].begin(), out[i].end());
    }
  }
  return affine(last, g.head_w, g.head_b, false);
}

inline Vec oracle_scores(const GnnParams& p, const Tensor& support, std::span<const std::size_t> labels,
                         const Tensor& query) {
  return oracle_scores(DGnn::from(p), to_mat(support), labels, to_vec(query));
}

/// Distance to the nearest non-differentiable point of a depth-1 GNN pass:
/// the smallest |x_i - x_j| component and the smallest first-layer edge-MLP
/// hidden pre-activation over every query graph. Finite differences are only
/// meaningful when the step stays well inside this margin.
inline double depth1_kink_margin(const GnnParams& p, const Tensor& support, std::span<const std::size_t> labels,
                                 const Tensor& queries) {
  double margin = std::numeric_limits<double>::infinity();
  const DGnn g = DGnn::from(p);
  const auto& e = g.layers.front().edge;
  const Mat s = to_mat(support), q = to_mat(queries);
  for (const auto& query : q) {
    const Mat x = oracle_nodes(g, s, labels, query);
    for (std::size_t i = 0; i < x.size(); ++i)
      for (std::size_t j = i + 1; j < x.size(); ++j) {
        Vec diff(x[i].size());
        for (std::size_t t = 0; t < diff.size(); ++t) {
          diff[t] = std::fabs(x[i][t] - x[j][t]);
          // identical label slots are constant zero, not a moving kink
          if (t < p.config.proj_dim) margin = std::min(margin, diff[t]);
        }
        const auto h1 = affine(diff, e.w1, e.b1, false);
        for (double v : h1) margin = std::min(margin, std::fabs(v));
        Vec r1(h1);
        for (auto& v : r1) v = std::max(0.0, v);
        for (double v : affine(r1, e.w2, e.b2, false)) margin = std::min(margin, std::fabs(v));
      }
  }
  return margin;
}

/// A depth-1 GNN with every bias nonzero and inputs drawn until the kink
/// margin clears `min_margin`.
struct Depth1Case {
  GnnParams params;
  Tensor support, queries;
  std::vector<std::size_t> labels;
  std::size_t draws = 0;
  double margin = 0.0;
};

inline Depth1Case draw_depth1_case(std::uint64_t seed, double min_margin) {
  GnnConfig c;
  c.feature_dim = 6;
  c.proj_dim = 4;
  c.gc_dim = 5;
  c.depth = 1;
  c.edge_hidden = 7;
  c.n_way = 3;
  for (std::size_t draw = 0;; ++draw) {
    KeyedRng rng({seed, draw, 0x6b696e6bULL});
    Depth1Case k{GnnParams::init(c, mix_key({seed, draw})), {}, {}, {0, 0, 1, 1, 2, 2}, draw + 1, 0.0};
    for (auto& nt : k.params.named_parameters(""))
      if (nt.tensor.ndim() == 1)
        for (auto& v : nt.tensor.mutable_data()) v = float(rng.uniform(-0.3, 0.3));
    k.support = random_tensor({6, 6}, rng);
    k.queries = random_tensor({2, 6}, rng);
    k.margin = depth1_kink_margin(k.params, k.support, k.labels, k.queries);
    if (k.margin >= min_margin) return k;
  }
}

/// Relative gradient error of gnn_query_scores with respect to every GNN
/// parameter and both feature matrices.
inline double depth1_gradient_error(const Depth1Case& k, std::uint64_t seed, double h = 1e-3) {
  std::vector<Tensor> inputs;
  for (const auto& t : k.params.parameters()) inputs.push_back(t.clone());
  inputs.push_back(k.support.clone());
  inputs.push_back(k.queries.clone());
  const GnnParams base = k.params;
  const std::vector<std::size_t> labels = k.labels;
  return gradient_check(
      [base, labels](const std::vector<Tensor>& in) {
        GnnParams g = base;
        std::size_t i = 0;
        g.proj_w = in[i++];
        g.proj_b = in[i++];
        auto& L = g.layers[0];
        L.edge = {in[i], in[i + 1], in[i + 2], in[i + 3], in[i + 4], in[i + 5]};
        i += 6;
        L.w_neighbor = in[i++];
        L.w_self = in[i++];
        L.bias = in[i++];
        g.head_w = in[i++];
        g.head_b = in[i++];
        return gnn_query_scores(g, in[i], labels, in[i + 1]);
      },
      std::move(inputs), seed, h);
}

}  // namespace mft::test::oracle
