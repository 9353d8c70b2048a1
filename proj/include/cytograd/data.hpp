#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numbers>
#include <numeric>
#include <span>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "cytograd/error.hpp"
#include "cytograd/image_io.hpp"
#include "cytograd/log.hpp"
#include "cytograd/model.hpp"
#include "cytograd/rng.hpp"
#include "cytograd/tensor.hpp"

namespace cytograd {

enum MaskCode : std::uint8_t { kBackground = 0, kNucleus = 1, kCytoplasm = 2 };

struct Sample {
  Tensor image;               // [3,H,W] in [0,1]
  std::optional<Tensor> mask; // [H,W] with MaskCode values
  std::size_t severity = 0;   // 0..4
  std::string source_id;

  /// Severity score in 1..5.
  double score() const { return static_cast<double>(severity + 1); }

  void validate() const {
    if (severity >= kNumClasses) {
      throw ValidationError(source_id + ": severity " + std::to_string(severity) + " outside 0..4");
    }
    if (image.rank() != 3 || image.dim(0) != 3) {
      throw DimensionError(source_id + ": image must be [3,H,W], got " + to_string(image.shape()));
    }
    if (mask && mask->shape() != Shape{image.dim(1), image.dim(2)}) {
      throw DimensionError(source_id + ": mask " + to_string(mask->shape()) +
                           " does not match image " + to_string(image.shape()));
    }
  }
};

/// Stacks the images of the selected samples into [N,3,H,W].
inline Tensor stack_images(const std::vector<Sample>& samples, std::span<const std::size_t> indices) {
  if (indices.empty()) throw DimensionError("cannot stack an empty batch");
  const Shape& first = samples.at(indices[0]).image.shape();
  Tensor out(Shape{indices.size(), first[0], first[1], first[2]});
  const std::size_t per = samples[indices[0]].image.size();
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const Tensor& img = samples.at(indices[k]).image;
    if (img.shape() != first) {
      throw DimensionError("sample " + samples[indices[k]].source_id + " has image shape " +
                           to_string(img.shape()) + ", expected " + to_string(first));
    }
    std::copy(img.values().begin(), img.values().end(), out.data() + k * per);
  }
  return out;
}

inline Tensor stack_images(const std::vector<Sample>& samples) {
  std::vector<std::size_t> all(samples.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return stack_images(samples, all);
}

// ---------------------------------------------------------------------------
// Class layout

struct ClassEntry {
  std::string_view directory;
  std::size_t severity;
};

/// The seven original class directories and their severity. The three
/// normal classes share severity 0.
inline constexpr std::array<ClassEntry, 7> kClassTable{{
    {"normal_superficial", 0},
    {"normal_intermediate", 0},
    {"normal_columnar", 0},
    {"light_dysplastic", 1},
    {"moderate_dysplastic", 2},
    {"severe_dysplastic", 3},
    {"carcinoma_in_situ", 4},
}};

inline std::size_t severity_for_class(std::string_view directory) {
  for (const auto& entry : kClassTable) {
    if (entry.directory == directory) return entry.severity;
  }
  throw ValidationError("unknown class directory '" + std::string(directory) + "'");
}

/// Directory used when exporting a sample of the given severity.
inline std::string_view class_for_severity(std::size_t severity) {
  static constexpr std::array<std::string_view, kNumClasses> names{
      "normal_intermediate", "light_dysplastic", "moderate_dysplastic", "severe_dysplastic",
      "carcinoma_in_situ"};
  if (severity >= kNumClasses) throw ValidationError("severity out of range");
  return names[severity];
}

// ---------------------------------------------------------------------------
// Resizing

/// Bilinear resize with half-pixel centers; input is [C,H,W] doubles.
inline Tensor resize_bilinear(const Tensor& src, std::size_t out_h, std::size_t out_w) {
  const std::size_t c = src.dim(0), h = src.dim(1), w = src.dim(2);
  if (h == out_h && w == out_w) return src;
  Tensor out(Shape{c, out_h, out_w});
  const double sy = static_cast<double>(h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(w) / static_cast<double>(out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
    const std::size_t y0 = static_cast<std::size_t>(fy), y1 = std::min(y0 + 1, h - 1);
    const double ty = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
      const std::size_t x0 = static_cast<std::size_t>(fx), x1 = std::min(x0 + 1, w - 1);
      const double tx = fx - static_cast<double>(x0);
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double* p = src.data() + ch * h * w;
        const double top = p[y0 * w + x0] * (1 - tx) + p[y0 * w + x1] * tx;
        const double bottom = p[y1 * w + x0] * (1 - tx) + p[y1 * w + x1] * tx;
        out[(ch * out_h + y) * out_w + x] = top * (1 - ty) + bottom * ty;
      }
    }
  }
  return out;
}

/// Nearest-neighbour resize of a [H,W] code map; keeps the code set.
inline Tensor resize_nearest(const Tensor& src, std::size_t out_h, std::size_t out_w) {
  const std::size_t h = src.dim(0), w = src.dim(1);
  if (h == out_h && w == out_w) return src;
  Tensor out(Shape{out_h, out_w});
  for (std::size_t y = 0; y < out_h; ++y) {
    const std::size_t sy = std::min(h - 1, (2 * y + 1) * h / (2 * out_h));
    for (std::size_t x = 0; x < out_w; ++x) {
      const std::size_t sx = std::min(w - 1, (2 * x + 1) * w / (2 * out_w));
      out[y * out_w + x] = src[sy * w + sx];
    }
  }
  return out;
}

inline Tensor rgb_to_tensor(const RgbImage& img) {
  Tensor out(Shape{3, img.height, img.width});
  const std::size_t plane = img.height * img.width;
  for (std::size_t i = 0; i < plane; ++i) {
    for (std::size_t c = 0; c < 3; ++c) out[c * plane + i] = img.pixels[3 * i + c] / 255.0;
  }
  return out;
}

inline RgbImage tensor_to_rgb(const Tensor& image) {
  const std::size_t h = image.dim(1), w = image.dim(2), plane = h * w;
  RgbImage out{w, h, std::vector<std::uint8_t>(plane * 3)};
  for (std::size_t i = 0; i < plane; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      const double v = std::clamp(image[c * plane + i], 0.0, 1.0);
      out.pixels[3 * i + c] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Directory datasets

inline const std::vector<std::array<std::uint8_t, 3>>& mask_palette() {
  static const std::vector<std::array<std::uint8_t, 3>> palette{
      {{0, 0, 0}}, {{40, 40, 200}}, {{230, 150, 190}}};
  return palette;
}

/// Loads `<root>/<class>/<id>.png` with optional `<id>-mask.png`, resizing
/// images (bilinear) and masks (nearest) to size x size. Entries are visited
/// in sorted order.
inline std::vector<Sample> load_directory(const std::filesystem::path& root, std::size_t size = 64) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw IoError("dataset root " + root.string() + " is not a directory");
  std::vector<fs::path> class_dirs;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory()) class_dirs.push_back(entry.path());
  }
  std::sort(class_dirs.begin(), class_dirs.end());

  std::vector<Sample> samples;
  for (const fs::path& dir : class_dirs) {
    const std::string class_name = dir.filename().string();
    const std::size_t severity = severity_for_class(class_name);
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (entry.is_regular_file() && entry.path().extension() == ".png") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    const std::set<fs::path> present(files.begin(), files.end());
    for (const fs::path& file : files) {
      const std::string stem = file.stem().string();
      if (stem.ends_with("-mask")) {
        if (!present.count(dir / (stem.substr(0, stem.size() - 5) + ".png"))) {
          log::warn("mask without image: " + file.string());
        }
        continue;
      }
      Sample s;
      s.severity = severity;
      s.source_id = class_name + "/" + stem;
      s.image = resize_bilinear(rgb_to_tensor(read_png_rgb(file)), size, size);
      const fs::path mask_path = dir / (stem + "-mask.png");
      if (present.count(mask_path)) {
        const IndexImage raw = read_png_indices(mask_path);
        Tensor codes(Shape{raw.height, raw.width});
        for (std::size_t i = 0; i < raw.pixels.size(); ++i) {
          if (raw.pixels[i] > kCytoplasm) {
            throw ValidationError("mask " + mask_path.string() + " has code " +
                                  std::to_string(raw.pixels[i]) + " outside {0,1,2}");
          }
          codes[i] = raw.pixels[i];
        }
        s.mask = resize_nearest(codes, size, size);
      }
      s.validate();
      samples.push_back(std::move(s));
    }
  }
  if (samples.empty()) log::warn("no samples found under " + root.string());
  return samples;
}

/// Writes samples in the directory layout read by load_directory. Images
/// are quantised to 8 bits.
inline void export_directory(const std::vector<Sample>& samples, const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec || !fs::is_directory(root)) throw IoError("cannot create directory " + root.string());
  for (const Sample& s : samples) {
    s.validate();
    const fs::path dir = root / std::string(class_for_severity(s.severity));
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory " + dir.string());
    std::string stem = s.source_id;
    std::replace(stem.begin(), stem.end(), '/', '_');
    write_png_rgb(dir / (stem + ".png"), tensor_to_rgb(s.image));
    if (s.mask) {
      IndexImage idx{s.mask->dim(1), s.mask->dim(0), {}};
      for (double v : s.mask->values()) idx.pixels.push_back(static_cast<std::uint8_t>(v));
      write_png_palette(dir / (stem + "-mask.png"), idx, mask_palette());
    }
  }
}

// ---------------------------------------------------------------------------
// Synthetic surrogate

/// Nucleus-to-cytoplasm area ratio targeted for each severity.
inline constexpr std::array<double, kNumClasses> kNucleusRatioAnchors{0.08, 0.16, 0.26, 0.38, 0.52};

namespace detail {

struct Ellipse {
  double cx, cy, a, b, angle;
  bool contains(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    const double c = std::cos(angle), s = std::sin(angle);
    const double u = (dx * c + dy * s) / a, v = (-dx * s + dy * c) / b;
    return u * u + v * v <= 1.0;
  }
};

/// Severities for indices [5*block, 5*block+5): a shuffled 0..4.
inline std::array<std::size_t, kNumClasses> severity_block(std::uint64_t seed, std::size_t block) {
  std::array<std::size_t, kNumClasses> order{0, 1, 2, 3, 4};
  Rng rng(derive_seed(derive_seed(seed, "severity"), block));
  rng.shuffle(std::span<std::size_t>(order));
  return order;
}

inline Sample synthetic_sample(std::uint64_t seed, std::size_t index, std::size_t severity,
                               std::size_t size) {
  Rng rng(derive_seed(derive_seed(seed, "cell"), index));
  const double side = static_cast<double>(size);

  Ellipse cell;
  cell.cx = side / 2 + rng.uniform(-0.06, 0.06) * side;
  cell.cy = side / 2 + rng.uniform(-0.06, 0.06) * side;
  cell.a = rng.uniform(0.27, 0.36) * side;
  cell.b = cell.a * rng.uniform(0.7, 0.95);
  cell.angle = rng.uniform(0.0, std::numbers::pi);

  // Nucleus area / cytoplasm area = ratio, so nucleus / cell = ratio / (1 + ratio).
  const double ratio = kNucleusRatioAnchors[severity] * rng.uniform(0.93, 1.07);
  const double k = std::sqrt(ratio / (1.0 + ratio));
  Ellipse nucleus;
  nucleus.a = k * cell.a;
  nucleus.b = k * cell.b * rng.uniform(0.9, 1.1);
  nucleus.angle = cell.angle + rng.uniform(-0.3, 0.3);
  const double shift = (1.0 - k) * 0.25 * cell.b;
  const double dir = rng.uniform(0.0, 2.0 * std::numbers::pi);
  nucleus.cx = cell.cx + shift * std::cos(dir);
  nucleus.cy = cell.cy + shift * std::sin(dir);

  const double s = static_cast<double>(severity);
  const double background = 0.94 + rng.uniform(-0.02, 0.02);
  const std::array<double, 3> bg_tint{1.0, 0.99, 1.01};
  const double cyto_gain = 1.0 + rng.uniform(-0.05, 0.05);
  const std::array<double, 3> cyto{0.80 * cyto_gain, 0.62 * cyto_gain, 0.74 * cyto_gain};
  const double darkness = 1.0 - 0.11 * s + rng.uniform(-0.03, 0.03);
  const std::array<double, 3> nuc{0.46 * darkness, 0.36 * darkness, 0.62 * darkness};
  const double texture = 0.02 + 0.02 * s;

  Sample out;
  out.severity = severity;
  out.source_id = "syn-" + std::to_string(index);
  out.image = Tensor(Shape{3, size, size});
  out.mask = Tensor(Shape{size, size});
  const std::size_t plane = size * size;
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
      const bool in_cell = cell.contains(px, py);
      const bool in_nucleus = in_cell && nucleus.contains(px, py);
      const std::size_t i = y * size + x;
      std::array<double, 3> rgb;
      if (in_nucleus) {
        const double grain = rng.normal(0.0, texture);
        for (std::size_t c = 0; c < 3; ++c) rgb[c] = nuc[c] + grain + rng.normal(0.0, 0.01);
        (*out.mask)[i] = kNucleus;
      } else if (in_cell) {
        const double grain = rng.normal(0.0, 0.03);
        for (std::size_t c = 0; c < 3; ++c) rgb[c] = cyto[c] + grain + rng.normal(0.0, 0.01);
        (*out.mask)[i] = kCytoplasm;
      } else {
        const double grain = rng.normal(0.0, 0.015);
        for (std::size_t c = 0; c < 3; ++c) rgb[c] = background * bg_tint[c] + grain;
        (*out.mask)[i] = kBackground;
      }
      for (std::size_t c = 0; c < 3; ++c) out.image[c * plane + i] = std::clamp(rgb[c], 0.0, 1.0);
    }
  }
  return out;
}

}  // namespace detail

/// Synthetic cell images with exact masks. Severity lives only in the
/// nucleus: its relative area, darkness and texture grow with severity,
/// while the cytoplasm and background are drawn independently of it.
/// Severities are balanced in consecutive blocks of five, and sample i does
/// not depend on n, so smaller sets are prefixes of larger ones.
inline std::vector<Sample> generate_synthetic(std::size_t n, std::uint64_t seed, std::size_t size = 64) {
  if (n < kNumClasses) throw ValidationError("synthetic set needs at least 5 samples");
  if (size < 8) throw ValidationError("synthetic image size must be at least 8");
  std::vector<Sample> samples;
  samples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto block = detail::severity_block(seed, i / kNumClasses);
    samples.push_back(detail::synthetic_sample(seed, i, block[i % kNumClasses], size));
  }
  return samples;
}

// ---------------------------------------------------------------------------
// Splits

struct FoldPlan {
  std::uint64_t seed = 0;
  std::size_t folds = 0;
  std::vector<std::string> ids;        // source_id per sample index
  std::vector<std::size_t> fold_of;    // fold index per sample index

  std::vector<std::size_t> test_indices(std::size_t fold) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < fold_of.size(); ++i) {
      if (fold_of[i] == fold) out.push_back(i);
    }
    return out;
  }

  std::vector<std::size_t> train_indices(std::size_t fold) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < fold_of.size(); ++i) {
      if (fold_of[i] != fold) out.push_back(i);
    }
    return out;
  }

  friend bool operator==(const FoldPlan&, const FoldPlan&) = default;
};

namespace detail {

inline std::array<std::vector<std::size_t>, kNumClasses> indices_by_class(const std::vector<Sample>& samples) {
  std::array<std::vector<std::size_t>, kNumClasses> by_class;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].severity >= kNumClasses) throw ValidationError("severity out of range");
    by_class[samples[i].severity].push_back(i);
  }
  return by_class;
}

}  // namespace detail

/// Stratified k-fold assignment. Within each class the samples are shuffled
/// and dealt round-robin, continuing the deal position across classes so the
/// fold sizes stay balanced too.
inline FoldPlan make_folds(const std::vector<Sample>& samples, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw ValidationError("need at least 2 folds");
  std::set<std::string> unique;
  for (const Sample& s : samples) {
    if (!unique.insert(s.source_id).second) throw ValidationError("duplicate sample id " + s.source_id);
  }
  auto by_class = detail::indices_by_class(samples);
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    if (by_class[c].size() < k) {
      throw ValidationError("class " + std::to_string(c) + " (" + std::string(class_for_severity(c)) +
                            ") has " + std::to_string(by_class[c].size()) + " samples, fewer than " +
                            std::to_string(k) + " folds");
    }
  }
  FoldPlan plan;
  plan.seed = seed;
  plan.folds = k;
  plan.fold_of.assign(samples.size(), 0);
  for (const Sample& s : samples) plan.ids.push_back(s.source_id);
  Rng rng(derive_seed(seed, "folds"));
  std::size_t deal = 0;
  for (auto& members : by_class) {
    rng.shuffle(std::span<std::size_t>(members));
    for (std::size_t idx : members) plan.fold_of[idx] = deal++ % k;
  }
  return plan;
}

struct HoldoutSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

/// Stratified single split; each class contributes round(fraction * count)
/// samples to the test side. Both sides are returned in ascending order.
inline HoldoutSplit holdout_split(const std::vector<Sample>& samples, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw ValidationError("holdout fraction must be in (0,1)");
  auto by_class = detail::indices_by_class(samples);
  Rng rng(derive_seed(seed, "holdout"));
  HoldoutSplit split;
  for (auto& members : by_class) {
    rng.shuffle(std::span<std::size_t>(members));
    const auto n_test = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(members.size())));
    for (std::size_t j = 0; j < members.size(); ++j) (j < n_test ? split.test : split.train).push_back(members[j]);
  }
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.test.begin(), split.test.end());
  return split;
}

template <typename Index>
std::vector<Sample> select(const std::vector<Sample>& samples, const std::vector<Index>& indices) {
  std::vector<Sample> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(samples.at(i));
  return out;
}

}  // namespace cytograd
