#include "support.hpp"

#include <array>
#include <cmath>
#include <set>

#include "maskany/error.hpp"
#include "maskany/masking.hpp"

using namespace maskany;

namespace {

std::int64_t expected_count(double ratio, std::int64_t cells) {
  return static_cast<std::int64_t>(std::llround(ratio * static_cast<double>(cells)));
}

}  // namespace

TEST_CASE("patch mask selects round(ratio * cells) blocks") {
  const Dims dims{48, 48};  // 6 x 6 = 36 cells at block 8
  for (double ratio : {0.0, 1.0 / 16, 1.0 / 9, 0.25, 0.3, 0.5, 0.77, 1.0}) {
    for (std::uint64_t seed : {0u, 1u, 99u}) {
      auto spec = generate_patch_mask(dims, 8, ratio, seed);
      CHECK(spec.cell_count() == 36);
      CHECK(spec.masked_count() == expected_count(ratio, 36));
    }
  }
}

TEST_CASE("patch mask is a pure function of its seed") {
  auto a = generate_patch_mask({64, 64}, 16, 0.25, 7);
  auto b = generate_patch_mask({64, 64}, 16, 0.25, 7);
  CHECK(a == b);
  std::set<std::vector<std::uint8_t>> distinct;
  for (std::uint64_t s = 0; s < 20; ++s) {
    distinct.insert(generate_patch_mask({64, 64}, 16, 0.25, s).cells);
  }
  CHECK(distinct.size() > 10);
}

TEST_CASE("patch mask samples blocks uniformly") {
  // Each of 16 cells should be hit with probability 4/16 over many seeds.
  std::vector<int> hits(16, 0);
  const int trials = 4000;
  for (int s = 0; s < trials; ++s) {
    auto spec = generate_patch_mask({64, 64}, 16, 0.25, static_cast<std::uint64_t>(s));
    for (std::size_t i = 0; i < 16; ++i) hits[i] += spec.cells[i];
  }
  for (int h : hits) CHECK(std::abs(h / double(trials) - 0.25) < 0.03);
}

TEST_CASE("grid mask at 1/4 on a 4x4 grid masks the top-left of each 2x2 cell") {
  auto spec = generate_grid_mask({64, 64}, 16, 0.25);
  std::vector<BlockPos> want{{0, 0}, {0, 2}, {2, 0}, {2, 2}};
  CHECK(spec.masked_cells() == want);
}

TEST_CASE("grid mask hits the exact count across supported ratios") {
  for (double ratio : {1.0 / 16, 1.0 / 9, 0.25, 0.5, 1.0}) {
    CAPTURE(ratio);
    REQUIRE(grid_period(ratio) > 0);
    auto spec = generate_grid_mask({144, 144}, 4, ratio);  // 36 x 36 blocks
    CHECK(spec.masked_count() == expected_count(ratio, spec.cell_count()));
  }
}

TEST_CASE("grid mask is periodic under translation by k blocks") {
  for (double ratio : {1.0 / 16, 1.0 / 9, 0.25, 0.5}) {
    CAPTURE(ratio);
    const auto k = grid_period(ratio);
    auto spec = generate_grid_mask({144, 144}, 4, ratio);  // 36 x 36 blocks
    for (std::int64_t r = 0; r + k < spec.rows(); ++r) {
      for (std::int64_t c = 0; c + k < spec.cols(); ++c) {
        CHECK(spec.masked(r, c) == spec.masked(r + k, c));
        CHECK(spec.masked(r, c) == spec.masked(r, c + k));
      }
    }
  }
}

TEST_CASE("grid mask ignores seeds and rejects unsupported ratios") {
  CHECK(generate_mask(MaskStrategy::grid, {64, 64}, 16, 0.25, 1, {}) ==
        generate_mask(MaskStrategy::grid, {64, 64}, 16, 0.25, 2, {}));
  CHECK_THROWS_AS(generate_grid_mask({64, 64}, 16, 0.3), UnsupportedRatioError);
  CHECK_THROWS_AS(generate_grid_mask({64, 64}, 16, 0.0), UnsupportedRatioError);
  CHECK_THROWS_AS(generate_grid_mask({48, 48}, 16, 0.25), DimensionError);  // 3x3 blocks, k=2
  CHECK(grid_ratio_supported(1.0 / 9));
  CHECK_FALSE(grid_ratio_supported(0.2));
  CHECK(grid_period(0.5) == 2);
}

TEST_CASE("random mask coverage lands in [ratio, ratio + one rectangle)") {
  const Dims dims{64, 64};
  const SizeRange range{4, 12};
  const double total = 64.0 * 64.0;
  const double max_rect = 12.0 * 12.0 / total;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    auto spec = generate_random_mask(dims, 0.25, seed, range);
    const double cov = spec.coverage();
    CHECK(cov >= 0.25);
    CHECK(cov < 0.25 + max_rect);
  }
}

TEST_CASE("random mask determinism and degenerate ranges") {
  CHECK(generate_random_mask({32, 32}, 0.3, 5, {2, 6}) ==
        generate_random_mask({32, 32}, 0.3, 5, {2, 6}));
  CHECK_FALSE(generate_random_mask({32, 32}, 0.3, 5, {2, 6}) ==
              generate_random_mask({32, 32}, 0.3, 6, {2, 6}));

  // 1x1 rectangles: coverage reaches the ratio one pixel at a time.
  auto single = generate_random_mask({10, 10}, 0.05, 3, {1, 1});
  CHECK(single.masked_count() == 5);

  CHECK_THROWS_AS(generate_random_mask({32, 32}, 0.3, 0, {0, 4}), RangeError);
  CHECK_THROWS_AS(generate_random_mask({32, 32}, 0.3, 0, {5, 4}), RangeError);
  CHECK_THROWS_AS(generate_random_mask({32, 32}, 0.3, 0, {4, 40}), RangeError);
  CHECK_THROWS_AS(generate_random_mask({32, 32}, 1.0, 0, {4, 8}), RangeError);
}

TEST_CASE("default random size range scales with block size and image") {
  auto r = default_random_size_range({224, 224}, 16);
  CHECK(r.min == 32);
  CHECK(r.max == 64);
  auto small = default_random_size_range({32, 32}, 8);
  CHECK(small.min == 16);
  CHECK(small.max == 16);
  auto tiny = default_random_size_range({1, 1}, 16);
  CHECK(tiny.min == 1);
  CHECK(tiny.max == 1);
}

TEST_CASE("snapping a pixel mask covers every touched block") {
  auto px = generate_random_mask({64, 64}, 0.2, 11, {5, 13});
  auto blocks = snap_to_blocks(px, 16);
  auto pm = pixel_mask(px);
  auto bm = pixel_mask(blocks);
  CHECK((pm & ~bm).sum().item<int64_t>() == 0);
  for (const auto& cell : blocks.masked_cells()) {
    auto region = pm.slice(0, cell.row * 16, cell.row * 16 + 16)
                      .slice(1, cell.col * 16, cell.col * 16 + 16);
    CHECK(region.any().item<bool>());
  }
}

TEST_CASE("combined masks delegate to patch or grid") {
  const Dims dims{64, 64};
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    auto spec = generate_combined_mask(dims, 16, 0.25, seed);
    if (combined_selects_patch(seed)) {
      CHECK(spec == generate_patch_mask(dims, 16, 0.25, combined_subseed(seed)));
    } else {
      CHECK(spec == generate_grid_mask(dims, 16, 0.25));
    }
  }
}

TEST_CASE("combined coin is fair") {
  int patch = 0;
  const int n = 10000;
  for (int s = 0; s < n; ++s) patch += combined_selects_patch(static_cast<std::uint64_t>(s));
  CHECK(std::abs(patch / double(n) - 0.5) < 0.02);
}

TEST_CASE("mixed masks choose each strategy about a third of the time") {
  const Dims dims{64, 64};
  std::array<int, 3> counts{0, 0, 0};
  const int n = 3000;
  for (int s = 0; s < n; ++s) {
    const auto seed = static_cast<std::uint64_t>(s);
    const int pick = mixed_selection(seed);
    ++counts[static_cast<std::size_t>(pick)];
    if (s < 100) {
      auto spec = generate_mixed_mask(dims, 16, 0.25, seed, {8, 16});
      CHECK(spec.strategy == std::array{MaskStrategy::patch, MaskStrategy::grid,
                                        MaskStrategy::random}[static_cast<std::size_t>(pick)]);
    }
  }
  for (int c : counts) CHECK(std::abs(c / double(n) - 1.0 / 3) < 0.03);
}

TEST_CASE("strategy names round-trip") {
  for (auto s : {MaskStrategy::patch, MaskStrategy::grid, MaskStrategy::random,
                 MaskStrategy::combined, MaskStrategy::mixed}) {
    CHECK(parse_strategy(to_string(s)) == s);
  }
  CHECK(parse_strategy("patch+grid") == MaskStrategy::combined);
  CHECK(parse_strategy("patch+grid+random") == MaskStrategy::mixed);
  CHECK_THROWS_AS(parse_strategy("cutout"), ConfigError);
}

TEST_CASE("apply_mask fills exactly the masked pixels") {
  auto image = testing::random_image(3, 32, 32, 1) + 0.5f;  // strictly positive
  SUBCASE("ratio 0 is the identity") {
    auto spec = generate_patch_mask({32, 32}, 8, 0.0, 0);
    CHECK(torch::equal(apply_mask(image, spec).pixels, image));
  }
  SUBCASE("ratio 1 fills everything") {
    auto spec = generate_patch_mask({32, 32}, 8, 1.0, 0);
    CHECK(apply_mask(image, spec, 0.25f).pixels.eq(0.25f).all().item<bool>());
  }
  SUBCASE("single block loses exactly its pixel sum") {
    auto spec = generate_patch_mask({32, 32}, 8, 1.0 / 16, 4);
    REQUIRE(spec.masked_count() == 1);
    auto cell = spec.masked_cells()[0];
    auto block = image.slice(1, cell.row * 8, cell.row * 8 + 8).slice(2, cell.col * 8, cell.col * 8 + 8);
    auto masked = apply_mask(image, spec).pixels;
    const double lost = (image.sum() - masked.sum()).item<double>();
    CHECK(lost == doctest::Approx(block.sum().item<double>()).epsilon(1e-5));
    CHECK((masked.ne(image).sum(0) > 0).sum().item<int64_t>() == 64);
  }
  SUBCASE("masking twice changes nothing") {
    auto spec = generate_patch_mask({32, 32}, 8, 0.4, 9);
    auto once = apply_mask(image, spec).pixels;
    CHECK(torch::equal(apply_mask(once, spec).pixels, once));
  }
  SUBCASE("shape mismatch") {
    auto spec = generate_patch_mask({32, 32}, 8, 0.4, 9);
    CHECK_THROWS_AS(apply_mask(torch::rand({3, 16, 32}), spec), DimensionError);
  }
}

TEST_CASE("invalid arguments are rejected") {
  CHECK_THROWS_AS(generate_patch_mask({30, 32}, 8, 0.25, 0), DimensionError);
  CHECK_THROWS_AS(generate_patch_mask({32, 32}, 0, 0.25, 0), DimensionError);
  CHECK_THROWS_AS(generate_patch_mask({32, 32}, 8, 1.5, 0), RangeError);
  CHECK_THROWS_AS(generate_patch_mask({32, 32}, 8, -0.1, 0), RangeError);
}

TEST_CASE("mask records serialize losslessly") {
  std::vector<MaskSpec> specs{
      generate_patch_mask({64, 48}, 16, 0.25, 3),
      generate_grid_mask({64, 64}, 16, 0.5),
      generate_random_mask({40, 24}, 0.3, 8, {3, 9}),
      generate_patch_mask({32, 32}, 8, 0.0, 1),
      generate_patch_mask({32, 32}, 8, 1.0, 1),
  };
  specs[0].ratio = 1.0 / 3;  // needs a shortest round-trip representation
  for (const auto& spec : specs) {
    CHECK(parse_mask_spec(serialize(spec)) == spec);
  }
  CHECK_THROWS_AS(parse_mask_spec("maskspec 2\n"), ConfigError);
  CHECK_THROWS_AS(parse_mask_spec("height 4\n"), ConfigError);
}
