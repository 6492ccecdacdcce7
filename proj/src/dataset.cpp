#include "maskany/dataset.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "maskany/error.hpp"
#include "maskany/image_io.hpp"
#include "maskany/rng.hpp"

#ifndef MASKANY_DEFAULT_PHOTO_DIRS
#define MASKANY_DEFAULT_PHOTO_DIRS ""
#endif

namespace maskany {
namespace {

namespace fs = std::filesystem;
using torch::indexing::Slice;

constexpr std::int64_t kCifarSide = 32;
constexpr std::int64_t kCifarRecord = 1 + 3 * kCifarSide * kCifarSide;

std::vector<fs::path> split_paths(const std::string& list) {
  std::vector<fs::path> out;
  std::stringstream in(list);
  std::string item;
  while (std::getline(in, item, ':')) {
    if (!item.empty()) out.emplace_back(item);
  }
  return out;
}

torch::Tensor resize_square(const torch::Tensor& crop, std::int64_t size) {
  namespace F = torch::nn::functional;
  return F::interpolate(crop.unsqueeze(0), F::InterpolateFuncOptions()
                                               .size(std::vector<std::int64_t>{size, size})
                                               .mode(torch::kBilinear)
                                               .align_corners(false)
                                               .antialias(true))
      .squeeze(0)
      .clamp(0.0, 1.0);
}

/// Random square crop of `photo` with its left edge in [x_lo, x_hi - side].
torch::Tensor random_crop(const torch::Tensor& photo, Rng& rng, std::int64_t x_lo, std::int64_t x_hi,
                          double min_scale, double max_scale, std::int64_t size) {
  const auto h = photo.size(1);
  const auto shorter = std::min(h, x_hi - x_lo);
  const double scale = min_scale + (max_scale - min_scale) * uniform_unit(rng);
  auto side = std::max<std::int64_t>(
      size / 2, static_cast<std::int64_t>(scale * static_cast<double>(std::min(h, photo.size(2)))));
  side = std::min(side, shorter);
  const auto top = uniform_int(rng, 0, h - side);
  const auto left = uniform_int(rng, x_lo, x_hi - side);
  return resize_square(photo.index({Slice(), Slice(top, top + side), Slice(left, left + side)}),
                       size);
}

const std::vector<std::string>& natural_photo_names() {
  static const std::vector<std::string> names = [] {
    auto v = photo10_classes();
    for (const char* extra : {"camera", "coins", "moon", "motorcycle_right"}) v.emplace_back(extra);
    return v;
  }();
  return names;
}

}  // namespace

Dataset Dataset::head(std::int64_t count) const {
  if (count <= 0 || count >= size()) return *this;
  Dataset out = *this;
  out.images = images.narrow(0, 0, count);
  out.labels = labels.narrow(0, 0, count);
  return out;
}

Dataset load_cifar10(const fs::path& dir, Split split, std::int64_t limit) {
  std::vector<fs::path> files;
  if (split == Split::train) {
    for (int i = 1; i <= 5; ++i) files.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
  } else {
    files.push_back(dir / "test_batch.bin");
  }
  for (const auto& f : files) {
    if (!fs::exists(f)) {
      throw IngestionError(
          "CIFAR-10 file " + f.string() +
          " not found. Download the binary release from "
          "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz, extract it and point "
          "dataset.path (or MASKANY_DATA_DIR) at the cifar-10-batches-bin directory.");
    }
  }
  std::vector<std::uint8_t> raw;
  for (const auto& f : files) {
    std::ifstream in(f, std::ios::binary);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    if (bytes.size() % kCifarRecord != 0) throw IngestionError("truncated CIFAR-10 file " + f.string());
    raw.insert(raw.end(), bytes.begin(), bytes.end());
    if (limit > 0 && static_cast<std::int64_t>(raw.size()) >= limit * kCifarRecord) break;
  }
  auto n = static_cast<std::int64_t>(raw.size()) / kCifarRecord;
  if (limit > 0) n = std::min(n, limit);
  auto records = torch::from_blob(raw.data(), {n, kCifarRecord}, torch::kUInt8);
  Dataset d;
  d.id = "cifar10";
  d.labels = records.index({Slice(), 0}).to(torch::kInt64).clone();
  d.images = records.index({Slice(), Slice(1, torch::indexing::None)})
                 .reshape({n, 3, kCifarSide, kCifarSide})
                 .to(torch::kFloat32)
                 .div(255.0f);
  d.num_classes = 10;
  d.class_names = {"airplane", "automobile", "bird", "cat", "deer",
                   "dog", "frog", "horse", "ship", "truck"};
  return d;
}

std::vector<fs::path> photo_search_path() {
  std::vector<fs::path> out;
  if (const char* env = std::getenv("MASKANY_PHOTO_DIR")) out = split_paths(env);
  for (auto& p : split_paths(MASKANY_DEFAULT_PHOTO_DIRS)) out.push_back(std::move(p));
  return out;
}

const std::vector<std::string>& photo10_classes() {
  static const std::vector<std::string> names = {
      "astronaut", "chelsea", "coffee", "motorcycle_left", "rocket",
      "retina",    "hubble_deep_field", "ihc", "china", "flower"};
  return names;
}

fs::path find_photo(const std::string& name, const std::vector<fs::path>& search) {
  for (const auto& dir : search) {
    for (const char* ext : {".png", ".jpg", ".jpeg"}) {
      auto p = dir / (name + ext);
      if (fs::exists(p)) return p;
    }
  }
  throw IngestionError("natural photo '" + name +
                       "' not found; set MASKANY_PHOTO_DIR to a directory containing the "
                       "scikit-image and scikit-learn sample images (skimage/data, "
                       "sklearn/datasets/images)");
}

Dataset make_photo10(Split split, const PhotoDatasetOptions& o, const std::vector<fs::path>& search) {
  const auto& classes = photo10_classes();
  const auto k = static_cast<std::int64_t>(classes.size());
  std::vector<torch::Tensor> photos;
  for (const auto& name : classes) photos.push_back(read_image(find_photo(name, search)));

  Rng rng(derive_seed(o.seed, split == Split::train ? 11 : 12));
  std::vector<torch::Tensor> images;
  std::vector<std::int64_t> labels;
  images.reserve(static_cast<std::size_t>(o.count));
  for (std::int64_t i = 0; i < o.count; ++i) {
    // Interleave classes so any prefix of the set stays balanced.
    const auto label = i % k;
    const auto& photo = photos[static_cast<std::size_t>(label)];
    const auto w = photo.size(2);
    const auto cut = static_cast<std::int64_t>(o.train_fraction * static_cast<double>(w));
    const auto [lo, hi] = split == Split::train ? std::pair{std::int64_t{0}, cut}
                                                : std::pair{cut, w};
    images.push_back(random_crop(photo, rng, lo, hi, o.min_scale, o.max_scale, o.image_size));
    labels.push_back(label);
  }
  Dataset d;
  d.id = "photo10";
  d.images = torch::stack(images);
  d.labels = torch::tensor(labels, torch::kInt64);
  d.num_classes = k;
  d.class_names = classes;
  return d;
}

std::vector<fs::path> write_photo_corpus(const fs::path& out_dir, std::int64_t count,
                                         std::int64_t size, std::uint64_t seed,
                                         const std::vector<fs::path>& search) {
  std::vector<torch::Tensor> photos;
  for (const auto& name : natural_photo_names()) photos.push_back(read_image(find_photo(name, search)));
  fs::create_directories(out_dir);
  Rng rng(derive_seed(seed, 21));
  std::vector<fs::path> written;
  for (std::int64_t i = 0; i < count; ++i) {
    const auto& photo = photos[static_cast<std::size_t>(i) % photos.size()];
    auto crop = random_crop(photo, rng, 0, photo.size(2), 0.2, 0.6, size);
    char name[32];
    std::snprintf(name, sizeof(name), "img_%05lld.png", static_cast<long long>(i));
    write_image(out_dir / name, crop);
    written.push_back(out_dir / name);
  }
  return written;
}

std::vector<std::pair<std::string, torch::Tensor>> load_image_folder(const fs::path& dir,
                                                                     std::vector<std::string>* skipped) {
  if (!fs::is_directory(dir)) throw IngestionError("image directory " + dir.string() + " not found");
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file()) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<std::pair<std::string, torch::Tensor>> out;
  for (const auto& f : files) {
    try {
      out.emplace_back(f.filename().string(), read_image(f));
    } catch (const IngestionError&) {
      if (skipped) skipped->push_back(f.filename().string());
    }
  }
  return out;
}

std::pair<torch::Tensor, torch::Tensor> channel_stats(const Dataset& data) {
  auto mean = data.images.mean({0, 2, 3});
  auto std = data.images.std({0, 2, 3}).clamp_min(1e-6);
  return {mean, std};
}

}  // namespace maskany
