#include "support.hpp"

#include <algorithm>
#include <cmath>

#include "maskany/error.hpp"
#include "maskany/reuse.hpp"

using namespace maskany;
using torch::indexing::Slice;

namespace {

// Straightforward scalar bilinear (half-pixel centres, edge clamp).
torch::Tensor bilinear_oracle(const torch::Tensor& image, std::int64_t oh, std::int64_t ow) {
  const auto c = image.size(0), h = image.size(1), w = image.size(2);
  auto src = image.to(torch::kFloat64).contiguous();
  auto a = src.accessor<double, 3>();
  auto out = torch::zeros({c, oh, ow}, torch::kFloat64);
  auto o = out.accessor<double, 3>();
  const double sy = double(h) / double(oh), sx = double(w) / double(ow);
  for (std::int64_t y = 0; y < oh; ++y) {
    const double fy = std::max(0.0, (y + 0.5) * sy - 0.5);
    const auto y0 = std::min<std::int64_t>(static_cast<std::int64_t>(fy), h - 1);
    const auto y1 = std::min<std::int64_t>(y0 + 1, h - 1);
    const double wy = fy - double(y0);
    for (std::int64_t x = 0; x < ow; ++x) {
      const double fx = std::max(0.0, (x + 0.5) * sx - 0.5);
      const auto x0 = std::min<std::int64_t>(static_cast<std::int64_t>(fx), w - 1);
      const auto x1 = std::min<std::int64_t>(x0 + 1, w - 1);
      const double wx = fx - double(x0);
      for (std::int64_t k = 0; k < c; ++k) {
        o[k][y][x] = (1 - wy) * ((1 - wx) * a[k][y0][x0] + wx * a[k][y0][x1]) +
                     wy * ((1 - wx) * a[k][y1][x0] + wx * a[k][y1][x1]);
      }
    }
  }
  return out;
}

MaskSpec explicit_spec(std::int64_t rows, std::int64_t cols, std::int64_t b,
                       const std::vector<BlockPos>& on) {
  MaskSpec spec;
  spec.height = rows * b;
  spec.width = cols * b;
  spec.block_size = b;
  spec.ratio = double(on.size()) / double(rows * cols);
  spec.cells.assign(static_cast<std::size_t>(rows * cols), 0);
  for (auto p : on) spec.cells[static_cast<std::size_t>(p.row * cols + p.col)] = 1;
  return spec;
}

}  // namespace

TEST_CASE("every block of a fully masked 4x4 grid is extracted in row-major order") {
  auto image = testing::random_image(3, 32, 32, 2);
  auto spec = generate_patch_mask({32, 32}, 8, 1.0, 0);
  auto patches = extract_regions(image, spec);
  REQUIRE(patches.size() == 16);
  for (std::size_t i = 0; i < 16; ++i) {
    const auto r = static_cast<std::int64_t>(i) / 4, c = static_cast<std::int64_t>(i) % 4;
    CHECK(patches[i].position == BlockPos{r, c});
    CHECK(torch::equal(patches[i].pixels,
                       image.index({Slice(), Slice(r * 8, r * 8 + 8), Slice(c * 8, c * 8 + 8)})));
  }
  CHECK(torch::equal(patches[9].pixels, image.index({Slice(), Slice(16, 24), Slice(8, 16)})));
}

TEST_CASE("16 patches recompose the original image") {
  auto image = testing::random_image(3, 32, 32, 3);
  auto spec = generate_patch_mask({32, 32}, 8, 1.0, 0);
  auto reuse = compose_reuse(extract_regions(image, spec), 8);
  CHECK(reuse.slot_rows == 4);
  CHECK(reuse.slot_cols == 4);
  CHECK(reuse.pad_count == 0);
  CHECK(torch::equal(reuse.pixels, image));
}

TEST_CASE("slot canvas is ceil(sqrt N) wide with zero padding") {
  auto image = testing::random_image(1, 64, 64, 4) + 1.0f;
  for (std::int64_t n = 1; n <= 16; ++n) {
    std::vector<BlockPos> on;
    for (std::int64_t i = 0; i < n; ++i) on.push_back({i / 4, i % 4});
    auto spec = explicit_spec(4, 4, 16, on);
    auto reuse = compose_reuse(extract_regions(image, spec), 16);
    const auto c = static_cast<std::int64_t>(std::ceil(std::sqrt(double(n))));
    const auto r = (n + c - 1) / c;
    CHECK(reuse.slot_cols == c);
    CHECK(reuse.slot_rows == r);
    CHECK(reuse.pad_count == r * c - n);
    CHECK(reuse.pixels.size(1) == r * 16);
    CHECK(reuse.pixels.size(2) == c * 16);
    // Pad slots are exactly zero; the image itself is strictly positive.
    for (std::int64_t j = n; j < r * c; ++j) {
      auto slot = reuse.pixels.index({Slice(), Slice((j / c) * 16, (j / c + 1) * 16),
                                      Slice((j % c) * 16, (j % c + 1) * 16)});
      CHECK(slot.eq(0).all().item<bool>());
    }
  }
}

TEST_CASE("three patches pad one slot") {
  auto image = testing::random_image(3, 32, 32, 5);
  auto spec = explicit_spec(4, 4, 8, {{0, 1}, {2, 2}, {3, 0}});
  auto reuse = compose_reuse(extract_regions(image, spec), 8);
  CHECK(reuse.slot_rows == 2);
  CHECK(reuse.slot_cols == 2);
  CHECK(reuse.pad_count == 1);
  CHECK(torch::equal(reuse.pixels.index({Slice(), Slice(8, 16), Slice(0, 8)}),
                     image.index({Slice(), Slice(24, 32), Slice(0, 8)})));
}

TEST_CASE("compose orders patches by source position regardless of input order") {
  auto image = testing::random_image(3, 32, 32, 6);
  auto spec = generate_patch_mask({32, 32}, 8, 0.5, 12);
  auto patches = extract_regions(image, spec);
  auto shuffled = patches;
  std::reverse(shuffled.begin(), shuffled.end());
  std::rotate(shuffled.begin(), shuffled.begin() + 3, shuffled.end());
  auto a = compose_reuse(patches, 8);
  auto b = compose_reuse(shuffled, 8);
  CHECK(a.layout == b.layout);
  CHECK(torch::equal(a.pixels, b.pixels));
  CHECK(std::is_sorted(a.layout.begin(), a.layout.end()));
}

TEST_CASE("scatter_back restores the original image") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    auto image = testing::random_image(3, 64, 64, seed);
    for (auto strategy : {MaskStrategy::patch, MaskStrategy::grid, MaskStrategy::random,
                          MaskStrategy::combined, MaskStrategy::mixed}) {
      auto spec = generate_mask(strategy, {64, 64}, 16, 0.25, seed, {8, 24});
      auto masked = apply_mask(image, spec).pixels;
      auto reuse = compose_reuse(extract_regions(image, spec, 16), 16);
      // Random masks are snapped, so the canvas must carry the snapped fill.
      auto canvas = apply_mask(image, snap_to_blocks(spec, 16)).pixels;
      CHECK(torch::equal(scatter_back(reuse, spec, canvas, 16), image));
      if (spec.block_size > 1) CHECK(torch::equal(scatter_back(reuse, spec, masked, 16), image));
    }
  }
}

TEST_CASE("scatter_back only touches masked blocks") {
  auto image = testing::random_image(3, 32, 32, 7);
  auto spec = generate_patch_mask({32, 32}, 8, 0.25, 3);
  auto reuse = compose_reuse(extract_regions(image, spec), 8);
  auto canvas = torch::full({3, 32, 32}, -1.0f);
  auto out = scatter_back(reuse, spec, canvas);
  auto touched = out.ne(-1.0f).any(0);
  CHECK(torch::equal(touched, pixel_mask(spec)));
}

TEST_CASE("reuse errors") {
  auto image = testing::random_image(3, 32, 32, 8);
  auto spec = generate_patch_mask({32, 32}, 8, 0.25, 3);
  auto reuse = compose_reuse(extract_regions(image, spec), 8);

  auto other = generate_patch_mask({32, 32}, 8, 0.25, 4);
  REQUIRE_FALSE(other == spec);
  CHECK_THROWS_AS(scatter_back(reuse, other, image), ConsistencyError);

  auto patches = extract_regions(image, spec);
  patches[1].pixels = torch::zeros({3, 8, 7});
  CHECK_THROWS_AS(compose_reuse(patches, 8), ShapeError);
  CHECK_THROWS_AS(compose_reuse(std::vector<RegionPatch>{}, 8), EmptyMaskError);

  auto none = generate_patch_mask({32, 32}, 8, 0.0, 0);
  CHECK_THROWS_AS(extract_regions(image, none), EmptyMaskError);
  CHECK_THROWS_AS(extract_regions(torch::rand({3, 16, 16}), spec), DimensionError);
}

TEST_CASE("bilinear resize matches a scalar reference") {
  auto image = testing::random_image(3, 16, 24, 9);
  for (auto [h, w] : std::vector<std::pair<int, int>>{{32, 48}, {8, 12}, {21, 17}, {64, 64}}) {
    auto got = resize_bilinear(image, {h, w});
    CHECK(got.sizes() == torch::IntArrayRef{3, h, w});
    auto want = bilinear_oracle(image, h, w);
    CHECK((got.to(torch::kFloat64) - want).abs().max().item<double>() < 1e-5);
  }
}

TEST_CASE("bilinear resize of simple signals") {
  auto flat = torch::full({3, 8, 8}, 0.3f);
  CHECK((resize_bilinear(flat, {20, 13}) - 0.3f).abs().max().item<float>() < 1e-6f);

  // Upsampling a ramp x -> x by 2 gives (j - 0.5) / 2 clamped to [0, W-1].
  auto ramp = torch::arange(8, torch::kFloat32).view({1, 1, 8}).expand({1, 4, 8}).contiguous();
  auto up = resize_bilinear(ramp, {4, 16});
  for (int j = 0; j < 16; ++j) {
    const double want = std::clamp((j + 0.5) / 2.0 - 0.5, 0.0, 7.0);
    CHECK(up[0][1][j].item<double>() == doctest::Approx(want).epsilon(1e-6));
  }

  // Exact halving averages 2x2 neighbourhoods.
  auto img = testing::random_image(1, 8, 8, 10);
  auto down = resize_bilinear(img, {4, 4});
  auto pooled = torch::avg_pool2d(img.unsqueeze(0), 2).squeeze(0);
  CHECK((down - pooled).abs().max().item<float>() < 1e-6f);

  CHECK(torch::equal(resize_bilinear(img, {8, 8}), img));
  CHECK_THROWS_AS(resize_bilinear(img, {0, 4}), DimensionError);
}

TEST_CASE("reuse content is conserved before resizing") {
  auto image = testing::random_image(3, 64, 64, 11);
  auto spec = generate_patch_mask({64, 64}, 16, 0.4, 2);
  auto reuse = compose_reuse(extract_regions(image, spec), 16);
  auto masked = apply_mask(image, spec).pixels;
  const double total = image.to(torch::kFloat64).sum().item<double>();
  const double split =
      (masked.to(torch::kFloat64).sum() + reuse.pixels.to(torch::kFloat64).sum()).item<double>();
  CHECK(split == doctest::Approx(total).epsilon(1e-9));
  CHECK(reuse_input(image, spec).sizes() == image.sizes());
}

TEST_CASE("masked and reused pixels partition the image") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    for (auto strategy : {MaskStrategy::patch, MaskStrategy::grid, MaskStrategy::combined}) {
      auto spec = generate_mask(strategy, {48, 48}, 8, 1.0 / 9, seed, {});
      auto visible = ~pixel_mask(spec);
      auto source = torch::zeros({48, 48}, torch::kBool);
      auto image = torch::zeros({1, 48, 48});
      for (const auto& p : extract_regions(image, spec)) {
        source.index_put_({Slice(p.position.row * 8, p.position.row * 8 + 8),
                           Slice(p.position.col * 8, p.position.col * 8 + 8)},
                          true);
      }
      CHECK_FALSE((visible & source).any().item<bool>());
      CHECK((visible | source).all().item<bool>());
    }
  }
}

TEST_CASE("reuse export writes a lossless image and its layout") {
  testing::TempDir dir("reuse");
  auto image = testing::random_image(3, 32, 32, 12);
  auto spec = generate_patch_mask({32, 32}, 8, 0.25, 5);
  auto reuse = compose_reuse(extract_regions(image, spec), 8);
  auto paths = export_reuse(reuse, dir.path() / "reuse.png");
  REQUIRE(paths.size() == 2);
  for (const auto& p : paths) CHECK(std::filesystem::exists(p));
}
