#include "maskany/reuse.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

#include "maskany/error.hpp"
#include "maskany/image_io.hpp"

namespace maskany {
namespace {

using torch::indexing::Slice;

MaskSpec block_view(const MaskSpec& spec, std::int64_t snap_block) {
  return spec.block_size > 1 ? spec : snap_to_blocks(spec, snap_block);
}

void check_image(const torch::Tensor& image, const MaskSpec& spec) {
  if (image.dim() != 3 || image.size(1) != spec.height || image.size(2) != spec.width) {
    throw DimensionError("image does not match mask dims " + std::to_string(spec.height) + "x" +
                         std::to_string(spec.width));
  }
}

std::int64_t ceil_sqrt(std::int64_t n) {
  std::int64_t c = 0;
  while (c * c < n) ++c;
  return c;
}

}  // namespace

std::vector<RegionPatch> extract_regions(const torch::Tensor& image, const MaskSpec& spec,
                                         std::int64_t snap_block) {
  check_image(image, spec);
  const MaskSpec blocks = block_view(spec, snap_block);
  const auto cells = blocks.masked_cells();
  if (cells.empty()) throw EmptyMaskError("mask has no masked cells; nothing to reuse");
  const auto b = blocks.block_size;
  std::vector<RegionPatch> patches;
  patches.reserve(cells.size());
  for (const auto& pos : cells) {
    patches.push_back({image.index({Slice(), Slice(pos.row * b, (pos.row + 1) * b),
                                    Slice(pos.col * b, (pos.col + 1) * b)})
                           .clone(),
                       pos});
  }
  return patches;
}

ReuseImage compose_reuse(std::span<const RegionPatch> patches, std::int64_t block_size) {
  if (patches.empty()) throw EmptyMaskError("compose_reuse needs at least one patch");
  const auto& first = patches.front().pixels;
  for (const auto& p : patches) {
    if (p.pixels.dim() != 3 || p.pixels.size(1) != block_size || p.pixels.size(2) != block_size ||
        p.pixels.size(0) != first.size(0) || p.pixels.scalar_type() != first.scalar_type()) {
      throw ShapeError("reuse patches must all be C x " + std::to_string(block_size) + " x " +
                       std::to_string(block_size));
    }
  }

  std::vector<std::size_t> order(patches.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return patches[a].position < patches[b].position;
  });

  const auto n = static_cast<std::int64_t>(patches.size());
  ReuseImage reuse;
  reuse.block_size = block_size;
  reuse.slot_cols = ceil_sqrt(n);
  reuse.slot_rows = (n + reuse.slot_cols - 1) / reuse.slot_cols;
  reuse.pad_count = reuse.slot_rows * reuse.slot_cols - n;
  reuse.pixels = torch::zeros({first.size(0), reuse.slot_rows * block_size,
                               reuse.slot_cols * block_size},
                              first.options());
  reuse.layout.reserve(patches.size());
  for (std::int64_t j = 0; j < n; ++j) {
    const auto& patch = patches[order[static_cast<std::size_t>(j)]];
    const auto r = j / reuse.slot_cols;
    const auto c = j % reuse.slot_cols;
    reuse.pixels
        .index({Slice(), Slice(r * block_size, (r + 1) * block_size),
                Slice(c * block_size, (c + 1) * block_size)})
        .copy_(patch.pixels);
    reuse.layout.push_back(patch.position);
  }
  return reuse;
}

torch::Tensor scatter_back(const ReuseImage& reuse, const MaskSpec& spec,
                           const torch::Tensor& canvas, std::int64_t snap_block) {
  check_image(canvas, spec);
  const MaskSpec blocks = block_view(spec, snap_block);
  if (blocks.block_size != reuse.block_size || blocks.masked_cells() != reuse.layout) {
    throw ConsistencyError("reuse layout does not match the masked cells of the spec");
  }
  const auto b = reuse.block_size;
  auto out = canvas.clone();
  for (std::size_t j = 0; j < reuse.layout.size(); ++j) {
    const auto r = static_cast<std::int64_t>(j) / reuse.slot_cols;
    const auto c = static_cast<std::int64_t>(j) % reuse.slot_cols;
    const auto& pos = reuse.layout[j];
    out.index({Slice(), Slice(pos.row * b, (pos.row + 1) * b), Slice(pos.col * b, (pos.col + 1) * b)})
        .copy_(reuse.pixels.index({Slice(), Slice(r * b, (r + 1) * b), Slice(c * b, (c + 1) * b)}));
  }
  return out;
}

torch::Tensor resize_bilinear(const torch::Tensor& image, Dims target) {
  if (target.height <= 0 || target.width <= 0) {
    throw DimensionError("resize target must be positive");
  }
  if (image.dim() != 3) throw DimensionError("resize expects a C x H x W tensor");
  if (image.size(1) == target.height && image.size(2) == target.width) return image.clone();
  namespace F = torch::nn::functional;
  return F::interpolate(image.unsqueeze(0),
                        F::InterpolateFuncOptions()
                            .size(std::vector<std::int64_t>{target.height, target.width})
                            .mode(torch::kBilinear)
                            .align_corners(false))
      .squeeze(0);
}

torch::Tensor resize_to(const ReuseImage& reuse, Dims target) {
  return resize_bilinear(reuse.pixels, target);
}

torch::Tensor reuse_input(const torch::Tensor& image, const MaskSpec& spec,
                          std::int64_t snap_block) {
  const auto patches = extract_regions(image, spec, snap_block);
  const auto b = spec.block_size > 1 ? spec.block_size : snap_block;
  return resize_to(compose_reuse(patches, b), spec.dims());
}

std::vector<std::filesystem::path> export_reuse(const ReuseImage& reuse,
                                                const std::filesystem::path& png_path) {
  write_image(png_path, reuse.pixels);
  auto sidecar = png_path;
  sidecar.replace_extension(".layout.txt");
  std::ofstream out(sidecar);
  if (!out) throw IngestionError("cannot write " + sidecar.string());
  out << "reuse 1\n"
      << "block_size " << reuse.block_size << "\n"
      << "slots " << reuse.slot_rows << " " << reuse.slot_cols << "\n"
      << "pad_count " << reuse.pad_count << "\n"
      << "layout";
  for (const auto& p : reuse.layout) out << ' ' << p.row << ',' << p.col;
  out << "\n";
  return {png_path, sidecar};
}

}  // namespace maskany
