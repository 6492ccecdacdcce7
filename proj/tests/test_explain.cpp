#include "support.hpp"

#include "maskany/error.hpp"
#include "maskany/explain.hpp"
#include "maskany/image_io.hpp"

using namespace maskany;

namespace {

// Two-class model whose single feature map is a scaled copy of the red
// channel; class 0 sums it, class 1 subtracts it.
TappedModel toy_model() {
  auto scale = torch::ones({1}, torch::requires_grad());
  TappedModel m;
  m.layers = {"map", "logits"};
  m.default_layer = "map";
  m.run = [scale](const torch::Tensor& x, Taps& taps) {
    auto act = x.slice(1, 0, 1) * scale;
    taps["map"] = act;
    auto pooled = act.mean({2, 3});
    auto logits = torch::cat({pooled, -pooled}, 1);
    taps["logits"] = logits;
    return logits;
  };
  return m;
}

}  // namespace

TEST_CASE("toy heatmap peaks where the evidence is") {
  auto model = toy_model();
  auto image = torch::zeros({3, 16, 16});
  image[0][5][11] = 1.0f;
  image[0][2][2] = 0.5f;
  auto cam = grad_cam(model, image, 0);
  CHECK(cam.map.sizes() == torch::IntArrayRef{16, 16});
  CHECK(cam.layer == "map");
  CHECK(cam.map.argmax().item<int64_t>() == 5 * 16 + 11);
  CHECK(cam.map.max().item<float>() == 1.0f);
  CHECK(cam.map.min().item<float>() == 0.0f);
  CHECK(cam.map[2][2].item<float>() == doctest::Approx(0.5));

  // Class 1 has only negative evidence: relu leaves nothing.
  CHECK(grad_cam(model, image, 1).map.eq(0).all().item<bool>());
}

TEST_CASE("constant evidence gives an all-zero map") {
  auto cam = grad_cam(toy_model(), torch::full({3, 8, 8}, 0.7f), 0);
  CHECK(cam.map.eq(0).all().item<bool>());
}

TEST_CASE("heatmaps of real backbones") {
  torch::manual_seed(0);
  auto backbone = make_backbone({"resnet-mini", 3, 10, 32});
  backbone->eval();
  auto model = tapped(backbone);
  auto image = testing::random_image(3, 32, 32, 1);
  auto cam = grad_cam(model, image, 3);
  CHECK(cam.map.sizes() == torch::IntArrayRef{32, 32});
  CHECK(cam.map.min().item<float>() >= 0.0f);
  CHECK(cam.map.max().item<float>() <= 1.0f);
  CHECK(cam.target_class == 3);
  CHECK(cam.layer == "stage3");
  CHECK(torch::isfinite(cam.map).all().item<bool>());
  CHECK_THROWS_AS(grad_cam(model, image, 10), RangeError);
  CHECK_THROWS_AS(grad_cam(model, image, 0, "head"), ConfigError);
  CHECK_THROWS_AS(grad_cam(model, image, 0, "nope"), ConfigError);
  CHECK_THROWS_AS(grad_cam(model, image.unsqueeze(0), 0), DimensionError);
}

TEST_CASE("heatmaps of the dual-branch model are deterministic in eval mode") {
  ModelConfig cfg;
  cfg.mask.block_size = 8;
  MaskAnyNet net(cfg);
  net->eval();
  auto model = tapped(net);
  auto image = testing::random_image(3, 32, 32, 2);
  auto a = grad_cam(model, image, 1);
  auto b = grad_cam(model, image, 1);
  CHECK(torch::equal(a.map, b.map));
  CHECK(a.layer == net->default_cam_layer());
}

TEST_CASE("feature dumps") {
  torch::manual_seed(0);
  auto backbone = make_backbone({"resnet-mini", 3, 10, 32});
  backbone->eval();
  auto model = tapped(backbone);
  auto image = testing::random_image(3, 32, 32, 3);

  CHECK(dump_features(model, image, {}).empty());

  testing::TempDir dir("features");
  auto maps = dump_features(model, image, {"stem", "stage2", "head"}, dir.path());
  REQUIRE(maps.size() == 3);
  CHECK(maps["stem"].sizes() == torch::IntArrayRef{16, 32, 32});
  CHECK(maps["stage2"].sizes() == torch::IntArrayRef{32, 16, 16});
  CHECK(maps["head"].sizes() == torch::IntArrayRef{10});
  CHECK(std::filesystem::exists(dir.path() / "stem.png"));
  CHECK(std::filesystem::exists(dir.path() / "stage2.png"));
  CHECK_FALSE(std::filesystem::exists(dir.path() / "head.png"));

  CHECK_THROWS_AS(dump_features(model, image, {"stage9"}), ConfigError);
  CHECK_THROWS_AS(feature_summary(maps["head"]), ConfigError);
  auto summary = feature_summary(maps["stage2"]);
  CHECK(summary.sizes() == torch::IntArrayRef{16, 16});
}

TEST_CASE("overlays and grids") {
  auto image = testing::random_image(3, 16, 16, 4);
  auto heat = torch::rand({16, 16});
  auto overlay = overlay_heatmap(image, heat);
  CHECK(overlay.sizes() == torch::IntArrayRef{3, 16, 16});
  CHECK(overlay.min().item<float>() >= 0.0f);
  CHECK(overlay.max().item<float>() <= 1.0f);
  CHECK_THROWS_AS(overlay_heatmap(image, torch::rand({8, 8})), DimensionError);

  testing::TempDir dir("grid");
  write_heatmap_grid(dir.path() / "grid.png", {image, image}, {{overlay, overlay}});
  auto grid = read_image(dir.path() / "grid.png");
  CHECK(grid.size(1) == 32);
  CHECK(grid.size(2) == 32);
  CHECK_THROWS_AS(write_heatmap_grid(dir.path() / "bad.png", {image, image}, {{overlay}}),
                  DimensionError);
}
