#include "maskany/masking.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <sstream>

#include "maskany/error.hpp"
#include "maskany/rng.hpp"

namespace maskany {
namespace {

constexpr double kRatioTolerance = 1e-9;

void check_ratio(double ratio) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) {
    throw RangeError("mask ratio " + std::to_string(ratio) + " outside [0, 1]");
  }
}

void check_block_dims(Dims dims, std::int64_t block_size) {
  if (block_size <= 0) {
    throw DimensionError("block size must be positive, got " + std::to_string(block_size));
  }
  if (dims.height <= 0 || dims.width <= 0) {
    throw DimensionError("image dims must be positive");
  }
  if (dims.height % block_size != 0 || dims.width % block_size != 0) {
    throw DimensionError("image dims " + std::to_string(dims.height) + "x" +
                         std::to_string(dims.width) + " are not multiples of block size " +
                         std::to_string(block_size));
  }
}

MaskSpec empty_spec(Dims dims, std::int64_t block_size, MaskStrategy strategy, double ratio,
                    std::uint64_t seed) {
  MaskSpec spec;
  spec.height = dims.height;
  spec.width = dims.width;
  spec.block_size = block_size;
  spec.strategy = strategy;
  spec.ratio = ratio;
  spec.seed = seed;
  spec.cells.assign(static_cast<std::size_t>(spec.cell_count()), 0);
  return spec;
}

std::string format_double(double value) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, res.ptr);
}

}  // namespace

std::string_view to_string(MaskStrategy strategy) {
  switch (strategy) {
    case MaskStrategy::patch: return "patch";
    case MaskStrategy::grid: return "grid";
    case MaskStrategy::random: return "random";
    case MaskStrategy::combined: return "combined";
    case MaskStrategy::mixed: return "mixed";
  }
  return "unknown";
}

MaskStrategy parse_strategy(std::string_view name) {
  if (name == "patch") return MaskStrategy::patch;
  if (name == "grid") return MaskStrategy::grid;
  if (name == "random") return MaskStrategy::random;
  if (name == "combined" || name == "patch+grid") return MaskStrategy::combined;
  if (name == "mixed" || name == "patch+grid+random") return MaskStrategy::mixed;
  throw ConfigError("unknown mask strategy '" + std::string(name) +
                    "' (valid: patch, grid, random, combined, mixed)");
}

std::int64_t MaskSpec::masked_count() const {
  return std::count_if(cells.begin(), cells.end(), [](std::uint8_t c) { return c != 0; });
}

double MaskSpec::coverage() const {
  if (cells.empty()) return 0.0;
  return static_cast<double>(masked_count()) / static_cast<double>(cells.size());
}

std::vector<BlockPos> MaskSpec::masked_cells() const {
  std::vector<BlockPos> out;
  const auto c = cols();
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(cells.size()); ++i) {
    if (cells[static_cast<std::size_t>(i)]) out.push_back({i / c, i % c});
  }
  return out;
}

MaskSpec generate_patch_mask(Dims dims, std::int64_t block_size, double ratio,
                             std::uint64_t seed) {
  check_block_dims(dims, block_size);
  check_ratio(ratio);
  MaskSpec spec = empty_spec(dims, block_size, MaskStrategy::patch, ratio, seed);
  const auto total = spec.cell_count();
  const auto target = static_cast<std::int64_t>(std::llround(ratio * static_cast<double>(total)));

  // Partial Fisher-Yates: the first `target` entries are a uniform sample.
  std::vector<std::int64_t> order(static_cast<std::size_t>(total));
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  for (std::int64_t i = 0; i < target; ++i) {
    const auto j = i + static_cast<std::int64_t>(uniform_below(rng, static_cast<std::uint64_t>(total - i)));
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
    spec.cells[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = 1;
  }
  return spec;
}

std::int64_t grid_period(double ratio) {
  if (!(ratio > 0.0 && ratio <= 1.0)) return 0;
  if (std::abs(ratio - 0.5) < kRatioTolerance) return 2;
  const auto k = static_cast<std::int64_t>(std::llround(1.0 / std::sqrt(ratio)));
  if (k < 1) return 0;
  const double exact = 1.0 / static_cast<double>(k * k);
  return std::abs(ratio - exact) < kRatioTolerance ? k : 0;
}

bool grid_ratio_supported(double ratio) { return grid_period(ratio) != 0; }

std::vector<double> supported_grid_ratios(std::int64_t max_k) {
  std::vector<double> out;
  for (std::int64_t k = 1; k <= max_k; ++k) out.push_back(1.0 / static_cast<double>(k * k));
  out.push_back(0.5);
  std::sort(out.begin(), out.end(), std::greater<>());
  return out;
}

MaskSpec generate_grid_mask(Dims dims, std::int64_t block_size, double ratio) {
  check_block_dims(dims, block_size);
  const auto k = grid_period(ratio);
  if (k == 0) {
    const auto supported = supported_grid_ratios();
    double below = 0.0, above = 1.0;
    for (double r : supported) {
      if (r <= ratio) below = std::max(below, r);
      if (r >= ratio) above = std::min(above, r);
    }
    std::ostringstream msg;
    msg << "grid mask does not support ratio " << ratio
        << " (supported: 1/k^2 or 1/2); nearest supported ratios: " << below << ", " << above;
    throw UnsupportedRatioError(msg.str());
  }
  MaskSpec spec = empty_spec(dims, block_size, MaskStrategy::grid, ratio, 0);
  const auto rows = spec.rows();
  const auto cols = spec.cols();
  const bool checkerboard = std::abs(ratio - 0.5) < kRatioTolerance;
  if (rows % k != 0 || cols % k != 0) {
    throw DimensionError("grid mask with period " + std::to_string(k) + " needs a block grid (" +
                         std::to_string(rows) + "x" + std::to_string(cols) +
                         ") divisible by the period");
  }
  for (std::int64_t r = 0; r < rows; ++r) {
    for (std::int64_t c = 0; c < cols; ++c) {
      const bool on = checkerboard ? ((r + c) % 2 == 0) : (r % k == 0 && c % k == 0);
      spec.cells[static_cast<std::size_t>(r * cols + c)] = on ? 1 : 0;
    }
  }
  return spec;
}

SizeRange default_random_size_range(Dims dims, std::int64_t block_size) {
  const auto cap = std::max<std::int64_t>(1, std::min(dims.height, dims.width) / 2);
  const auto b = std::max<std::int64_t>(1, block_size);
  return {std::min(2 * b, cap), std::min(4 * b, cap)};
}

MaskSpec generate_random_mask(Dims dims, double ratio, std::uint64_t seed,
                              SizeRange size_range) {
  if (dims.height <= 0 || dims.width <= 0) throw DimensionError("image dims must be positive");
  if (!(ratio > 0.0 && ratio < 1.0)) {
    throw RangeError("random mask ratio must lie in (0, 1), got " + std::to_string(ratio));
  }
  if (size_range.min <= 0 || size_range.min > size_range.max) {
    throw RangeError("degenerate rectangle size range [" + std::to_string(size_range.min) + ", " +
                     std::to_string(size_range.max) + "]");
  }
  if (size_range.max > std::min(dims.height, dims.width)) {
    throw RangeError("rectangle size range exceeds image bounds");
  }
  MaskSpec spec = empty_spec(dims, 1, MaskStrategy::random, ratio, seed);
  const auto total = dims.height * dims.width;
  std::int64_t covered = 0;
  Rng rng(seed);
  while (static_cast<double>(covered) < ratio * static_cast<double>(total)) {
    const auto h = uniform_int(rng, size_range.min, size_range.max);
    const auto w = uniform_int(rng, size_range.min, size_range.max);
    const auto top = uniform_int(rng, 0, dims.height - h);
    const auto left = uniform_int(rng, 0, dims.width - w);
    for (std::int64_t y = top; y < top + h; ++y) {
      auto* row = spec.cells.data() + y * dims.width;
      for (std::int64_t x = left; x < left + w; ++x) {
        if (!row[x]) {
          row[x] = 1;
          ++covered;
        }
      }
    }
  }
  return spec;
}

bool combined_selects_patch(std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0));
  return (rng() >> 63) == 0;
}

std::uint64_t combined_subseed(std::uint64_t seed) { return derive_seed(seed, 1); }

MaskSpec generate_combined_mask(Dims dims, std::int64_t block_size, double ratio,
                                std::uint64_t seed) {
  if (combined_selects_patch(seed)) {
    return generate_patch_mask(dims, block_size, ratio, combined_subseed(seed));
  }
  return generate_grid_mask(dims, block_size, ratio);
}

int mixed_selection(std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0));
  return static_cast<int>(uniform_below(rng, 3));
}

MaskSpec generate_mixed_mask(Dims dims, std::int64_t block_size, double ratio,
                             std::uint64_t seed, SizeRange size_range) {
  const auto sub = derive_seed(seed, 1);
  switch (mixed_selection(seed)) {
    case 0: return generate_patch_mask(dims, block_size, ratio, sub);
    case 1: return generate_grid_mask(dims, block_size, ratio);
    default: return generate_random_mask(dims, ratio, sub, size_range);
  }
}

MaskSpec generate_mask(MaskStrategy strategy, Dims dims, std::int64_t block_size, double ratio,
                       std::uint64_t seed, SizeRange size_range) {
  switch (strategy) {
    case MaskStrategy::patch: return generate_patch_mask(dims, block_size, ratio, seed);
    case MaskStrategy::grid: return generate_grid_mask(dims, block_size, ratio);
    case MaskStrategy::random: return generate_random_mask(dims, ratio, seed, size_range);
    case MaskStrategy::combined: return generate_combined_mask(dims, block_size, ratio, seed);
    case MaskStrategy::mixed:
      return generate_mixed_mask(dims, block_size, ratio, seed, size_range);
  }
  throw ConfigError("unhandled mask strategy");
}

MaskSpec snap_to_blocks(const MaskSpec& spec, std::int64_t block_size) {
  if (spec.block_size > 1) return spec;
  check_block_dims(spec.dims(), block_size);
  MaskSpec out = empty_spec(spec.dims(), block_size, spec.strategy, spec.ratio, spec.seed);
  const auto cols = out.cols();
  for (std::int64_t y = 0; y < spec.height; ++y) {
    const auto* row = spec.cells.data() + y * spec.width;
    for (std::int64_t x = 0; x < spec.width; ++x) {
      if (row[x]) out.cells[static_cast<std::size_t>((y / block_size) * cols + x / block_size)] = 1;
    }
  }
  return out;
}

torch::Tensor pixel_mask(const MaskSpec& spec) {
  auto grid = torch::from_blob(const_cast<std::uint8_t*>(spec.cells.data()),
                               {spec.rows(), spec.cols()}, torch::kUInt8)
                  .to(torch::kBool);
  if (spec.block_size == 1) return grid.clone();
  return grid.repeat_interleave(spec.block_size, 0).repeat_interleave(spec.block_size, 1);
}

MaskedImage apply_mask(const torch::Tensor& image, const MaskSpec& spec, float fill) {
  if (image.dim() != 3 || image.size(1) != spec.height || image.size(2) != spec.width) {
    throw DimensionError("image shape " + std::to_string(image.dim() == 3 ? image.size(1) : -1) +
                         "x" + std::to_string(image.dim() == 3 ? image.size(2) : -1) +
                         " does not match mask dims " + std::to_string(spec.height) + "x" +
                         std::to_string(spec.width));
  }
  auto mask = pixel_mask(spec).to(image.device());
  return {image.masked_fill(mask.unsqueeze(0), fill), spec, fill};
}

std::string serialize(const MaskSpec& spec) {
  std::ostringstream out;
  out << "maskspec 1\n"
      << "height " << spec.height << "\n"
      << "width " << spec.width << "\n"
      << "block_size " << spec.block_size << "\n"
      << "strategy " << to_string(spec.strategy) << "\n"
      << "ratio " << format_double(spec.ratio) << "\n"
      << "seed " << spec.seed << "\n"
      << "rle";
  // Alternating run lengths, starting with an unmasked run (possibly 0).
  std::uint8_t current = 0;
  std::int64_t run = 0;
  for (auto cell : spec.cells) {
    const std::uint8_t v = cell ? 1 : 0;
    if (v != current) {
      out << ' ' << run;
      current = v;
      run = 0;
    }
    ++run;
  }
  out << ' ' << run << "\n";
  return out.str();
}

MaskSpec parse_mask_spec(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string key;
  MaskSpec spec;
  bool seen_header = false, seen_rle = false;
  while (in >> key) {
    if (key == "maskspec") {
      int version = 0;
      in >> version;
      if (version != 1) throw ConfigError("unsupported maskspec version " + std::to_string(version));
      seen_header = true;
    } else if (key == "height") {
      in >> spec.height;
    } else if (key == "width") {
      in >> spec.width;
    } else if (key == "block_size") {
      in >> spec.block_size;
    } else if (key == "strategy") {
      std::string name;
      in >> name;
      spec.strategy = parse_strategy(name);
    } else if (key == "ratio") {
      std::string value;
      in >> value;
      auto res = std::from_chars(value.data(), value.data() + value.size(), spec.ratio);
      if (res.ec != std::errc()) throw ConfigError("bad ratio '" + value + "'");
    } else if (key == "seed") {
      in >> spec.seed;
    } else if (key == "rle") {
      if (spec.block_size <= 0 || spec.height % spec.block_size || spec.width % spec.block_size) {
        throw ConfigError("maskspec record has inconsistent dims");
      }
      const auto total = static_cast<std::size_t>(spec.cell_count());
      spec.cells.reserve(total);
      std::string line;
      std::getline(in, line);
      std::istringstream runs(line);
      std::int64_t run = 0;
      std::uint8_t value = 0;
      while (runs >> run) {
        if (run < 0 || spec.cells.size() + static_cast<std::size_t>(run) > total) {
          throw ConfigError("maskspec run lengths exceed the cell count");
        }
        spec.cells.insert(spec.cells.end(), static_cast<std::size_t>(run), value);
        value ^= 1;
      }
      if (spec.cells.size() != total) throw ConfigError("maskspec run lengths do not cover the grid");
      seen_rle = true;
    } else {
      throw ConfigError("unknown maskspec field '" + key + "'");
    }
    if (!in) throw ConfigError("malformed maskspec field '" + key + "'");
  }
  if (!seen_header || !seen_rle) throw ConfigError("incomplete maskspec record");
  return spec;
}

}  // namespace maskany
