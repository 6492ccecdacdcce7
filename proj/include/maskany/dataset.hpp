#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

namespace maskany {

/// In-memory labelled image set: images N x C x H x W float in [0, 1],
/// labels N (int64).
struct Dataset {
  std::string id;
  torch::Tensor images;
  torch::Tensor labels;
  std::int64_t num_classes = 0;
  std::vector<std::string> class_names;

  std::int64_t size() const { return images.defined() ? images.size(0) : 0; }
  /// First `count` samples (all when count <= 0 or larger than the set).
  Dataset head(std::int64_t count) const;
};

enum class Split { train, val };

/// CIFAR-10 binary release (data_batch_{1..5}.bin, test_batch.bin) under
/// `dir`. `limit` > 0 keeps the first `limit` records. Throws IngestionError
/// with fetch instructions when the files are missing.
Dataset load_cifar10(const std::filesystem::path& dir, Split split, std::int64_t limit = 0);

/// Directories searched for the natural photographs used by the photo
/// datasets: $MASKANY_PHOTO_DIR (':'-separated), then the directories found
/// at configure time.
std::vector<std::filesystem::path> photo_search_path();

/// The ten colour photographs that define the photo10 classes.
const std::vector<std::string>& photo10_classes();

/// Locates `<name>.png` / `<name>.jpg` on the search path.
std::filesystem::path find_photo(const std::string& name,
                                 const std::vector<std::filesystem::path>& search);

struct PhotoDatasetOptions {
  std::int64_t count = 2000;
  std::int64_t image_size = 32;
  std::uint64_t seed = 0;
  /// Fraction of each photo's width (from the left) reserved for training
  /// crops; validation crops come from the remainder.
  double train_fraction = 0.7;
  /// Crop edge as a fraction of the photo's shorter side.
  double min_scale = 0.15;
  double max_scale = 0.4;
};

/// photo10: square crops of ten natural photographs, labelled by source
/// photo. Train and val crops come from disjoint horizontal regions.
Dataset make_photo10(Split split, const PhotoDatasetOptions& options,
                     const std::vector<std::filesystem::path>& search = photo_search_path());

/// Writes `count` random square crops (resized to `size` px) of the natural
/// photographs on the search path to `out_dir` as PNG files.
std::vector<std::filesystem::path> write_photo_corpus(
    const std::filesystem::path& out_dir, std::int64_t count, std::int64_t size, std::uint64_t seed,
    const std::vector<std::filesystem::path>& search = photo_search_path());

/// Readable images of a directory (sorted by file name); unreadable files
/// are reported in `skipped` and left out.
std::vector<std::pair<std::string, torch::Tensor>> load_image_folder(
    const std::filesystem::path& dir, std::vector<std::string>* skipped = nullptr);

/// Per-channel mean and standard deviation over a dataset.
std::pair<torch::Tensor, torch::Tensor> channel_stats(const Dataset& data);

}  // namespace maskany
