#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "mft/episodes.hpp"
#include "mft/error.hpp"
#include "mft/rng.hpp"

namespace mft {

namespace {

using Rgb = std::array<double, 3>;

/// Procedural description of one class: a textured shape on a background.
struct ClassRecipe {
  int shape = 0;
  double radius = 0.3;  // fraction of the image side
  double aspect = 1.0;
  Rgb fg{}, bg{};
  double freq = 0.5, angle = 0.0, amp = 0.2;
};

constexpr int kShapeCount = 8;

double color_distance(const Rgb& a, const Rgb& b) {
  return std::sqrt((a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]) + (a[2] - b[2]) * (a[2] - b[2]));
}

ClassRecipe random_recipe(KeyedRng& rng) {
  ClassRecipe r;
  r.shape = static_cast<int>(rng.below(kShapeCount));
  r.radius = rng.uniform(0.24, 0.38);
  r.aspect = rng.uniform(0.65, 1.0);
  do {
    for (auto& c : r.fg) c = rng.uniform(0.05, 0.95);
    for (auto& c : r.bg) c = rng.uniform(0.05, 0.95);
  } while (color_distance(r.fg, r.bg) < 0.45);
  r.freq = rng.uniform(0.3, 1.5);
  r.angle = rng.uniform(0.0, std::numbers::pi);
  r.amp = rng.uniform(0.1, 0.45);
  return r;
}

/// Signed distance (in radius units) to the boundary of the class shape.
double shape_distance(int shape, double px, double py) {
  const double ax = std::fabs(px), ay = std::fabs(py);
  const double r = std::sqrt(px * px + py * py);
  switch (shape) {
    case 0: return r - 1.0;
    case 1: return std::max(ax, ay) - 0.85;
    case 2: return std::max(ax * 0.866 + py * 0.5, -py) - 0.5;
    case 3: return std::fabs(r - 0.75) - 0.25;
    case 4: return std::min(std::max(ax - 0.33, ay - 1.0), std::max(ay - 0.33, ax - 1.0));
    case 5: return ax + ay - 1.1;
    case 6: return std::sqrt(px * px + 4.0 * py * py) - 1.0;
    default: return std::max(std::fabs(ay - 0.5) - 0.2, ax - 0.95);
  }
}

/// Per-instance acquisition variation of a domain.
struct Nuisance {
  double offset = 3.0;  // max center displacement in pixels
  double scale_min = 0.85, scale_max = 1.15;
  double light_min = 0.8, light_max = 1.2;  // brightness and contrast factors
};

/// One instance with position, scale, mirror, lighting and noise nuisance.
std::vector<float> render(const ClassRecipe& recipe, const Nuisance& nz, KeyedRng& rng, std::size_t size) {
  const double s = double(size);
  const double cx = s / 2 + rng.uniform(-nz.offset, nz.offset), cy = s / 2 + rng.uniform(-nz.offset, nz.offset);
  const double radius = recipe.radius * s * rng.uniform(nz.scale_min, nz.scale_max);
  const bool mirror = rng.bernoulli(0.5);
  const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double brightness = rng.uniform(nz.light_min, nz.light_max);
  const double contrast = rng.uniform(nz.light_min, nz.light_max);
  Rgb shift;
  for (auto& c : shift) c = 0.04 * rng.normal();
  const double ca = std::cos(recipe.angle), sa = std::sin(recipe.angle);

  std::vector<float> img(3 * size * size);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      double u = x + 0.5 - cx;
      const double v = y + 0.5 - cy;
      if (mirror) u = -u;
      const double sd = shape_distance(recipe.shape, u / radius, v / (radius * recipe.aspect)) * radius;
      const double mask = std::clamp(0.5 - sd, 0.0, 1.0);
      const double tex = 1.0 + recipe.amp * std::sin(recipe.freq * (u * ca + v * sa) + phase);
      for (std::size_t c = 0; c < 3; ++c) {
        double val = mask * recipe.fg[c] * tex + (1.0 - mask) * recipe.bg[c];
        val = ((val - 0.5) * contrast + 0.5) * brightness + shift[c] + 0.04 * rng.normal();
        img[(c * size + y) * size + x] = static_cast<float>(std::clamp(val, 0.0, 1.0));
      }
    }
  return img;
}

/// Domain-level color remap: channel permutation blended with luminance and a gamma curve.
struct Recolor {
  std::array<std::size_t, 3> perm{0, 1, 2};
  double blend = 0.7;
  double gamma = 0.8;
};

void apply_recolor(std::vector<float>& img, std::size_t size, const Recolor& rc) {
  const std::size_t plane = size * size;
  std::vector<float> out(img.size());
  for (std::size_t p = 0; p < plane; ++p) {
    const double lum = (img[p] + img[plane + p] + img[2 * plane + p]) / 3.0;
    for (std::size_t c = 0; c < 3; ++c) {
      const double v = rc.blend * img[rc.perm[c] * plane + p] + (1.0 - rc.blend) * lum;
      out[c * plane + p] = static_cast<float>(std::pow(std::clamp(v, 0.0, 1.0), rc.gamma));
    }
  }
  img.swap(out);
}

/// Randomly permutes the 4x4 grid of square patches.
void scramble_patches(std::vector<float>& img, std::size_t size, KeyedRng& rng) {
  constexpr std::size_t grid = 4;
  const std::size_t patch = size / grid;
  std::array<std::size_t, grid * grid> order;
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(std::span<std::size_t>(order));
  std::vector<float> out(img);
  for (std::size_t dst = 0; dst < order.size(); ++dst) {
    const std::size_t src = order[dst];
    const std::size_t sy = (src / grid) * patch, sx = (src % grid) * patch;
    const std::size_t dy = (dst / grid) * patch, dx = (dst % grid) * patch;
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < patch; ++y)
        for (std::size_t x = 0; x < patch; ++x)
          out[(c * size + dy + y) * size + dx + x] = img[(c * size + sy + y) * size + sx + x];
  }
  img.swap(out);
}

void to_gray(std::vector<float>& img, std::size_t size) {
  const std::size_t plane = size * size;
  for (std::size_t p = 0; p < plane; ++p) {
    const float g = static_cast<float>(0.299 * img[p] + 0.587 * img[plane + p] + 0.114 * img[2 * plane + p]);
    img[p] = img[plane + p] = img[2 * plane + p] = g;
  }
}

/// Inverted, low-contrast and noisy, with per-exposure gain and offset.
void radiograph(std::vector<float>& img, std::size_t size, KeyedRng& rng) {
  const std::size_t plane = size * size;
  const double gain = rng.uniform(0.25, 0.5), exposure = rng.uniform(-0.15, 0.15);
  for (std::size_t p = 0; p < plane; ++p) {
    double v = 1.0 - img[p];
    v = 0.5 + exposure + (v - 0.5) * gain + 0.08 * rng.normal();
    img[p] = img[plane + p] = img[2 * plane + p] = static_cast<float>(std::clamp(v, 0.0, 1.0));
  }
}

enum class Shift { None, Near, Mid, Far, Farthest };

Dataset build_domain(const std::string& name, const std::vector<ClassRecipe>& recipes, Shift shift,
                     const Recolor& recolor, std::uint64_t seed, const SyntheticOptions& opt) {
  Dataset ds;
  ds.name = name;
  switch (shift) {
    case Shift::None:
    case Shift::Near: ds.domain_tags = {"has_color", "has_perspective", "natural"}; break;
    case Shift::Mid: ds.domain_tags = {"has_color", "natural"}; break;
    case Shift::Far: ds.domain_tags = {"natural"}; break;
    case Shift::Farthest: ds.domain_tags = {}; break;
  }
  // Target domains are also captured under looser conditions than the source.
  Nuisance nz;
  if (shift != Shift::None) nz = Nuisance{5.0, 0.7, 1.2, 0.6, 1.4};
  const std::size_t s = opt.image_size;
  for (std::size_t c = 0; c < recipes.size(); ++c) {
    std::vector<Tensor> images;
    for (std::size_t i = 0; i < opt.images_per_class; ++i) {
      KeyedRng rng({seed, hash_string(name), c, i});
      auto img = render(recipes[c], nz, rng, s);
      if (shift != Shift::None) apply_recolor(img, s, recolor);
      if (shift == Shift::Mid || shift == Shift::Far || shift == Shift::Farthest) scramble_patches(img, s, rng);
      if (shift == Shift::Far || shift == Shift::Farthest) to_gray(img, s);
      if (shift == Shift::Farthest) radiograph(img, s, rng);
      images.push_back(Tensor::from({3, s, s}, std::move(img)));
    }
    char cname[32];
    std::snprintf(cname, sizeof cname, "class%03zu", c);
    ds.class_names.push_back(cname);
    ds.classes.push_back(std::move(images));
  }
  return ds;
}

}  // namespace

std::vector<Dataset> generate_synthetic_domains(std::uint64_t base_seed, const SyntheticOptions& opt) {
  if (opt.image_size < 8 || opt.image_size % 4 != 0)
    throw ContractError("synthetic image size must be a multiple of 4 and >= 8");
  KeyedRng recipe_rng({base_seed, hash_string("synthetic-recipes")});
  std::vector<ClassRecipe> source, target;
  for (std::size_t c = 0; c < opt.source_classes; ++c) source.push_back(random_recipe(recipe_rng));
  for (std::size_t c = 0; c < opt.target_classes; ++c) target.push_back(random_recipe(recipe_rng));

  Recolor recolor;
  KeyedRng domain_rng({base_seed, hash_string("synthetic-domain")});
  const std::array<std::array<std::size_t, 3>, 5> perms{{{1, 2, 0}, {2, 0, 1}, {0, 2, 1}, {2, 1, 0}, {1, 0, 2}}};
  recolor.perm = perms[domain_rng.below(perms.size())];
  recolor.blend = domain_rng.uniform(0.6, 0.8);
  recolor.gamma = domain_rng.uniform(0.7, 0.9);

  std::vector<Dataset> out;
  out.push_back(build_domain("source", source, Shift::None, recolor, base_seed, opt));
  out.push_back(build_domain("near", target, Shift::Near, recolor, base_seed, opt));
  out.push_back(build_domain("mid", target, Shift::Mid, recolor, base_seed, opt));
  out.push_back(build_domain("far", target, Shift::Far, recolor, base_seed, opt));
  out.push_back(build_domain("farthest", target, Shift::Farthest, recolor, base_seed, opt));
  return out;
}

Dataset generate_separable_task(std::uint64_t seed, std::size_t images_per_class, std::size_t image_size) {
  Dataset ds;
  ds.name = "separable";
  ds.domain_tags = {"has_color"};
  ds.allow_flip = false;
  const std::size_t s = image_size;
  for (std::size_t cls = 0; cls < 2; ++cls) {
    std::vector<Tensor> images;
    for (std::size_t i = 0; i < images_per_class; ++i) {
      KeyedRng rng({seed, hash_string("separable"), cls, i});
      const double offset = rng.uniform(-0.1, 0.1);
      std::vector<float> img(3 * s * s);
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < s; ++y)
          for (std::size_t x = 0; x < s; ++x) {
            const bool left = x < s / 2;
            const double base = (left == (cls == 0)) ? 0.75 : 0.25;
            img[(c * s + y) * s + x] = static_cast<float>(std::clamp(base + offset + 0.1 * rng.normal(), 0.0, 1.0));
          }
      images.push_back(Tensor::from({3, s, s}, std::move(img)));
    }
    ds.class_names.push_back(cls == 0 ? "left_bright" : "right_bright");
    ds.classes.push_back(std::move(images));
  }
  return ds;
}

}  // namespace mft
