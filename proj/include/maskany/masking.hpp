#pragma once

#include <compare>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <torch/torch.h>

namespace maskany {

/// combined: per-sample fair coin between patch and grid. mixed: per-sample
/// uniform choice among patch, grid and random.
enum class MaskStrategy { patch, grid, random, combined, mixed };

std::string_view to_string(MaskStrategy strategy);
/// Throws ConfigError for unknown names. "patch+grid" and
/// "patch+grid+random" are accepted for combined and mixed.
MaskStrategy parse_strategy(std::string_view name);

/// Default block edge for 64-224 px inputs.
inline constexpr std::int64_t kDefaultBlockSize = 16;
inline constexpr double kDefaultMaskRatio = 0.25;

struct Dims {
  std::int64_t height = 0;
  std::int64_t width = 0;
  friend bool operator==(const Dims&, const Dims&) = default;
};

struct BlockPos {
  std::int64_t row = 0;
  std::int64_t col = 0;
  friend auto operator<=>(const BlockPos&, const BlockPos&) = default;
};

/// Side-length bounds (pixels) for the rectangles of a random mask.
struct SizeRange {
  std::int64_t min = 1;
  std::int64_t max = 1;
};

/// Block-granular occlusion map. `cells` is row-major over the
/// (height / block_size) x (width / block_size) grid, nonzero = masked.
/// Random masks are stored at pixel granularity (block_size 1).
struct MaskSpec {
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::int64_t block_size = 1;
  MaskStrategy strategy = MaskStrategy::patch;
  double ratio = 0.0;
  std::uint64_t seed = 0;
  std::vector<std::uint8_t> cells;

  std::int64_t rows() const { return height / block_size; }
  std::int64_t cols() const { return width / block_size; }
  std::int64_t cell_count() const { return rows() * cols(); }
  bool masked(std::int64_t row, std::int64_t col) const {
    return cells[static_cast<std::size_t>(row * cols() + col)] != 0;
  }
  std::int64_t masked_count() const;
  /// Masked fraction of the image area.
  double coverage() const;
  /// Masked cells in ascending row-major order.
  std::vector<BlockPos> masked_cells() const;
  Dims dims() const { return {height, width}; }

  friend bool operator==(const MaskSpec&, const MaskSpec&) = default;
};

/// Masked input I_m: masked pixels hold `fill_value` in every channel.
struct MaskedImage {
  torch::Tensor pixels;
  MaskSpec spec;
  float fill_value = 0.0f;
};

/// Uniformly random choice of round(ratio * cells) distinct blocks.
MaskSpec generate_patch_mask(Dims dims, std::int64_t block_size, double ratio,
                             std::uint64_t seed);

/// Deterministic periodic pattern. For ratio 1/k^2 the top-left block of
/// every k x k super-cell is masked; ratio 1/2 is a checkerboard. The block
/// grid must tile evenly into super-cells.
MaskSpec generate_grid_mask(Dims dims, std::int64_t block_size, double ratio);

/// Period k of the grid pattern for `ratio` (2 for the checkerboard), or 0
/// when the ratio is not supported.
std::int64_t grid_period(double ratio);
bool grid_ratio_supported(double ratio);
/// Supported grid ratios 1/k^2 for k up to `max_k`, plus 1/2, descending.
std::vector<double> supported_grid_ratios(std::int64_t max_k = 8);

/// Union of seeded random rectangles at pixel granularity, grown until the
/// coverage first reaches `ratio`.
MaskSpec generate_random_mask(Dims dims, double ratio, std::uint64_t seed,
                              SizeRange size_range);
/// Rectangle edges of 2 to 4 block edges, capped at half the shorter image
/// side (and at least one pixel).
SizeRange default_random_size_range(Dims dims, std::int64_t block_size);

/// Fair coin (seeded) between patch and grid at the same ratio.
MaskSpec generate_combined_mask(Dims dims, std::int64_t block_size, double ratio,
                                std::uint64_t seed);
bool combined_selects_patch(std::uint64_t seed);
std::uint64_t combined_subseed(std::uint64_t seed);

/// Uniform (seeded) choice among patch, grid and random at the same ratio.
MaskSpec generate_mixed_mask(Dims dims, std::int64_t block_size, double ratio,
                             std::uint64_t seed, SizeRange size_range);
/// 0 = patch, 1 = grid, 2 = random.
int mixed_selection(std::uint64_t seed);

/// Generic dispatch used by the model and harness. `size_range` only applies
/// to the random strategy.
MaskSpec generate_mask(MaskStrategy strategy, Dims dims, std::int64_t block_size,
                       double ratio, std::uint64_t seed, SizeRange size_range);

/// Block-level view of a spec: block specs are returned unchanged; pixel
/// specs are snapped to every block of edge `block_size` that contains a
/// masked pixel (the bounding blocks of each rectangle).
MaskSpec snap_to_blocks(const MaskSpec& spec, std::int64_t block_size);

/// H x W boolean pixel map of the spec.
torch::Tensor pixel_mask(const MaskSpec& spec);

MaskedImage apply_mask(const torch::Tensor& image, const MaskSpec& spec,
                       float fill = 0.0f);

/// Text record: header lines plus a row-major run-length encoding of cells.
std::string serialize(const MaskSpec& spec);
MaskSpec parse_mask_spec(std::string_view text);

}  // namespace maskany
