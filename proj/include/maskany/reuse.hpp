#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <torch/torch.h>

#include "maskany/masking.hpp"

namespace maskany {

/// Original-image content U_i of one masked block and its grid position P_i.
struct RegionPatch {
  torch::Tensor pixels;  // C x b x b
  BlockPos position;
};

/// Stitched reuse image R. Slot j (row-major over the slot canvas) holds the
/// patch whose source position is layout[j]; trailing pad slots are zero.
struct ReuseImage {
  torch::Tensor pixels;  // C x (slot_rows * b) x (slot_cols * b)
  std::vector<BlockPos> layout;
  std::int64_t pad_count = 0;
  std::int64_t block_size = 0;
  std::int64_t slot_rows = 0;
  std::int64_t slot_cols = 0;
};

/// One patch per masked block, ascending row-major, cut from the original
/// image. Pixel-granular (random) specs are first snapped to blocks of edge
/// `snap_block`.
std::vector<RegionPatch> extract_regions(const torch::Tensor& image, const MaskSpec& spec,
                                         std::int64_t snap_block = kDefaultBlockSize);

/// Packs patches row-major into a c = ceil(sqrt(N)), r = ceil(N / c) slot
/// canvas. Patches are placed in ascending row-major order of their source
/// positions regardless of input order.
ReuseImage compose_reuse(std::span<const RegionPatch> patches, std::int64_t block_size);

/// Writes every reuse patch back to its source block on a copy of `canvas`.
torch::Tensor scatter_back(const ReuseImage& reuse, const MaskSpec& spec,
                           const torch::Tensor& canvas,
                           std::int64_t snap_block = kDefaultBlockSize);

/// Bilinear resize (align_corners = false) of a C x H x W tensor. Equal dims
/// return an exact copy.
torch::Tensor resize_bilinear(const torch::Tensor& image, Dims target);
torch::Tensor resize_to(const ReuseImage& reuse, Dims target);

/// extract -> compose -> resize in one call; the usual reuse-branch input.
torch::Tensor reuse_input(const torch::Tensor& image, const MaskSpec& spec,
                          std::int64_t snap_block = kDefaultBlockSize);

/// Lossless PNG of the reuse image plus `<stem>.layout.txt` with the slot
/// layout and pad count. Returns the written paths.
std::vector<std::filesystem::path> export_reuse(const ReuseImage& reuse,
                                                const std::filesystem::path& png_path);

}  // namespace maskany
