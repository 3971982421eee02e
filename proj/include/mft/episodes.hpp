#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "mft/tensor.hpp"

namespace mft {

/// Labelled image collection; every image is [C x H x W] with values in [0, 1].
struct Dataset {
  std::string name;
  std::vector<std::string> class_names;
  std::vector<std::vector<Tensor>> classes;
  std::set<std::string> domain_tags;  // subset of {has_color, has_perspective, natural}
  bool allow_flip = true;             // horizontal flips preserve labels

  std::size_t num_classes() const { return classes.size(); }
  Shape image_shape() const;
  std::size_t min_class_size() const;
};

/// Hash over names, labels and pixel bits.
std::uint64_t dataset_fingerprint(const Dataset& ds);

struct EpisodeSpec {
  std::size_t n_way = 5;
  std::size_t n_shot = 5;
  std::size_t n_query = 15;
  std::uint64_t seed = 0;
};

struct ImageRef {
  std::size_t cls = 0;    // dataset class id
  std::size_t index = 0;  // position within that class
  bool operator==(const ImageRef&) const = default;
  bool operator<(const ImageRef& o) const { return cls != o.cls ? cls < o.cls : index < o.index; }
};

/// One N-way K-shot task. Labels are episode-local (0..n_way-1) and both sets
/// are stored class-major.
struct Episode {
  Tensor support_images;  // [N_s x C x H x W]
  std::vector<std::size_t> support_labels;
  Tensor query_images;  // [N_q x C x H x W]
  std::vector<std::size_t> query_labels;
  std::size_t n_way = 0;
  std::size_t n_shot = 0;
  std::uint64_t seed = 0;
  std::size_t index = 0;
  std::string dataset;
  std::vector<std::size_t> classes;  // dataset class id of each episode label
  std::vector<ImageRef> support_refs;
  std::vector<ImageRef> query_refs;

  std::size_t support_count() const { return support_labels.size(); }
  std::size_t query_count() const { return query_labels.size(); }
  /// Hash of the selected image index lists.
  std::uint64_t fingerprint() const;
};

/// Stacks [C x H x W] images into [N x C x H x W].
Tensor stack_images(const std::vector<Tensor>& images);

/// Draws the episode determined by (spec.seed, episode_index). Throws
/// CapacityError when the dataset cannot supply it.
Episode sample_episode(const Dataset& ds, const EpisodeSpec& spec, std::size_t episode_index);

/// One subdirectory per class holding NetPBM files, sorted by name. Images are
/// center-cropped and resized to image_size.
Dataset load_image_folder(const std::filesystem::path& root, std::size_t image_size = 32);

/// Writes root/<class_name>/<index>.ppm.
void export_image_folder(const Dataset& ds, const std::filesystem::path& root);

struct SyntheticOptions {
  std::size_t image_size = 32;
  std::size_t source_classes = 24;
  std::size_t target_classes = 12;
  std::size_t images_per_class = 80;
};

/// Source domain followed by four targets of increasing shift:
/// near (recolored), mid (+ patch-scrambled), far (+ grayscale),
/// farthest (+ inverted, low contrast, noisier).
std::vector<Dataset> generate_synthetic_domains(std::uint64_t base_seed, const SyntheticOptions& options = {});

/// Two classes separable by which image half is bright; flips disabled.
Dataset generate_separable_task(std::uint64_t seed, std::size_t images_per_class = 60, std::size_t image_size = 32);

const Dataset& find_dataset(const std::vector<Dataset>& domains, const std::string& name);

}  // namespace mft
