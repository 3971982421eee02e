#pragma once

#include <string>
#include <vector>

#include "mft/episodes.hpp"
#include "mft/meta_finetune.hpp"
#include "support.hpp"

namespace mft::test {

/// Classes of uniform-noise images around a per-class brightness, so a model
/// has something to learn but nothing is trivially separable.
inline Dataset random_dataset(std::size_t n_classes, std::size_t per_class, Shape image, std::uint64_t seed,
                              const std::string& name = "toy") {
  Dataset ds;
  ds.name = name;
  KeyedRng rng({seed, 0x64617461ULL});
  for (std::size_t c = 0; c < n_classes; ++c) {
    ds.class_names.push_back("c" + std::to_string(c));
    const double center = 0.2 + 0.6 * double(c) / double(n_classes);
    std::vector<Tensor> imgs;
    for (std::size_t i = 0; i < per_class; ++i) imgs.push_back(random_tensor(image, rng, center - 0.2, center + 0.2));
    ds.classes.push_back(std::move(imgs));
  }
  return ds;
}

inline BackboneConfig tiny_backbone(std::size_t blocks = 3, std::size_t size = 8) {
  BackboneConfig c;
  c.in_height = c.in_width = size;
  c.widths.assign(blocks, 3);
  return c;
}

inline GnnConfig tiny_gnn(std::size_t n_way) {
  GnnConfig g;
  g.proj_dim = 6;
  g.gc_dim = 5;
  g.edge_hidden = 6;
  g.depth = 2;
  g.n_way = n_way;
  return g;
}

/// Parameters bit-identical, tensor by tensor.
inline bool same_values(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!bit_equal(a[i], b[i])) return false;
  return true;
}

inline std::vector<Tensor> snapshot(const std::vector<Tensor>& params) {
  std::vector<Tensor> out;
  for (const auto& p : params) out.push_back(p.detach());
  return out;
}

}  // namespace mft::test
