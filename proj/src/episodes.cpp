#include "mft/episodes.hpp"

#include <algorithm>
#include <bit>
#include <cstring>

#include "mft/error.hpp"
#include "mft/image.hpp"
#include "mft/rng.hpp"

namespace mft {

Shape Dataset::image_shape() const {
  for (const auto& c : classes)
    if (!c.empty()) return c.front().shape();
  throw CapacityError("dataset '" + name + "' holds no images");
}

std::size_t Dataset::min_class_size() const {
  std::size_t m = classes.empty() ? 0 : classes.front().size();
  for (const auto& c : classes) m = std::min(m, c.size());
  return m;
}

std::uint64_t dataset_fingerprint(const Dataset& ds) {
  std::uint64_t h = hash_string(ds.name);
  for (std::size_t c = 0; c < ds.classes.size(); ++c) {
    h = mix_key({h, hash_string(c < ds.class_names.size() ? ds.class_names[c] : ""), ds.classes[c].size()});
    for (const auto& img : ds.classes[c]) {
      std::uint64_t local = 0xcbf29ce484222325ULL;
      for (float v : img.data()) {
        local ^= std::bit_cast<std::uint32_t>(v);
        local *= 1099511628211ULL;
      }
      h = mix_key({h, local});
    }
  }
  return h;
}

std::uint64_t Episode::fingerprint() const {
  std::uint64_t h = mix_key({seed, index, n_way, n_shot});
  for (auto c : classes) h = mix_key({h, c});
  for (const auto& r : support_refs) h = mix_key({h, r.cls, r.index, 1});
  for (const auto& r : query_refs) h = mix_key({h, r.cls, r.index, 2});
  return h;
}

Tensor stack_images(const std::vector<Tensor>& images) {
  if (images.empty()) throw ContractError("stack_images: no images");
  const Shape s = images.front().shape();
  std::vector<float> all;
  all.reserve(images.size() * shape_numel(s));
  for (const auto& img : images) {
    if (img.shape() != s)
      throw DimensionError("stack_images: image " + shape_str(img.shape()) + " differs from " + shape_str(s));
    all.insert(all.end(), img.data().begin(), img.data().end());
  }
  Shape out{images.size()};
  out.insert(out.end(), s.begin(), s.end());
  return Tensor::from(std::move(out), std::move(all));
}

Episode sample_episode(const Dataset& ds, const EpisodeSpec& spec, std::size_t episode_index) {
  if (spec.n_way < 1 || spec.n_shot < 1 || spec.n_query < 1)
    throw ContractError("episode spec needs n_way, n_shot and n_query >= 1");
  if (spec.n_way > ds.num_classes())
    throw CapacityError("dataset '" + ds.name + "' has " + std::to_string(ds.num_classes()) + " classes, episode needs " +
                        std::to_string(spec.n_way));
  KeyedRng rng({spec.seed, episode_index, hash_string("episode")});

  std::vector<std::size_t> class_ids(ds.num_classes());
  for (std::size_t i = 0; i < class_ids.size(); ++i) class_ids[i] = i;
  for (std::size_t i = 0; i < spec.n_way; ++i) std::swap(class_ids[i], class_ids[i + rng.below(class_ids.size() - i)]);
  class_ids.resize(spec.n_way);

  Episode ep;
  ep.n_way = spec.n_way;
  ep.n_shot = spec.n_shot;
  ep.seed = spec.seed;
  ep.index = episode_index;
  ep.dataset = ds.name;
  ep.classes = class_ids;

  const std::size_t need = spec.n_shot + spec.n_query;
  std::vector<Tensor> support, query;
  for (std::size_t label = 0; label < spec.n_way; ++label) {
    const std::size_t cls = class_ids[label];
    const std::size_t n = ds.classes[cls].size();
    if (n < need) {
      const std::string cname = cls < ds.class_names.size() ? ds.class_names[cls] : std::to_string(cls);
      throw CapacityError("class '" + cname + "' of dataset '" + ds.name + "' has " + std::to_string(n) +
                          " images, episode needs " + std::to_string(need));
    }
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    for (std::size_t i = 0; i < need; ++i) std::swap(idx[i], idx[i + rng.below(n - i)]);
    for (std::size_t i = 0; i < need; ++i) {
      const bool is_support = i < spec.n_shot;
      (is_support ? support : query).push_back(ds.classes[cls][idx[i]]);
      (is_support ? ep.support_labels : ep.query_labels).push_back(label);
      (is_support ? ep.support_refs : ep.query_refs).push_back({cls, idx[i]});
    }
  }
  ep.support_images = stack_images(support);
  ep.query_images = stack_images(query);
  return ep;
}

Dataset load_image_folder(const std::filesystem::path& root, std::size_t image_size) {
  namespace fs = std::filesystem;
  std::error_code ec;
  if (!fs::is_directory(root, ec)) throw IoError("dataset root " + root.string() + " is not a directory");
  std::vector<fs::path> class_dirs;
  for (const auto& entry : fs::directory_iterator(root))
    if (entry.is_directory()) class_dirs.push_back(entry.path());
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.empty()) throw CapacityError("dataset root " + root.string() + " has no class directories");

  Dataset ds;
  ds.name = root.filename().string();
  if (ds.name.empty()) ds.name = root.parent_path().filename().string();
  ds.domain_tags = {"has_color", "natural"};
  for (const auto& dir : class_dirs) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir))
      if (entry.is_regular_file()) files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw CapacityError("class directory " + dir.string() + " is empty");
    std::vector<Tensor> images;
    for (const auto& f : files) images.push_back(center_crop_resize(read_netpbm(f), image_size));
    ds.class_names.push_back(dir.filename().string());
    ds.classes.push_back(std::move(images));
  }
  return ds;
}

void export_image_folder(const Dataset& ds, const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec) throw IoError("cannot create " + root.string() + ": " + ec.message());
  for (std::size_t c = 0; c < ds.classes.size(); ++c) {
    const fs::path dir = root / (c < ds.class_names.size() ? ds.class_names[c] : "class" + std::to_string(c));
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    for (std::size_t i = 0; i < ds.classes[c].size(); ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "%05zu.ppm", i);
      write_ppm(dir / name, ds.classes[c][i]);
    }
  }
}

const Dataset& find_dataset(const std::vector<Dataset>& domains, const std::string& name) {
  for (const auto& d : domains)
    if (d.name == name) return d;
  std::string known;
  for (const auto& d : domains) known += (known.empty() ? "" : ", ") + d.name;
  throw ConfigError("unknown dataset '" + name + "' (available: " + known + ")");
}

}  // namespace mft
