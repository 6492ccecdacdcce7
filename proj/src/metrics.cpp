#include "maskany/metrics.hpp"

#include <array>
#include <cmath>

#include "maskany/error.hpp"

namespace maskany {

torch::Tensor to_intensity_u8(const torch::Tensor& image) {
  if (image.numel() == 0) throw DomainError("entropy of an empty image is undefined");
  auto x = image.detach().to(torch::kCPU);
  if (x.dim() == 2) x = x.unsqueeze(0);
  if (x.dim() != 3 || (x.size(0) != 1 && x.size(0) != 3)) {
    throw DimensionError("expected a 1- or 3-channel image");
  }
  if (x.scalar_type() == torch::kUInt8) {
    if (x.size(0) == 1) return x[0].contiguous();
    x = x.to(torch::kFloat64).div(255.0);
  } else {
    x = x.to(torch::kFloat64);
  }
  auto gray = x.size(0) == 1 ? x[0] : 0.299 * x[0] + 0.587 * x[1] + 0.114 * x[2];
  return gray.mul(255.0).round().clamp(0.0, 255.0).to(torch::kUInt8).contiguous();
}

double shannon_entropy(const torch::Tensor& image) {
  const auto gray = to_intensity_u8(image);
  std::array<std::int64_t, 256> counts{};
  const auto* data = gray.data_ptr<std::uint8_t>();
  const auto n = gray.numel();
  for (std::int64_t i = 0; i < n; ++i) ++counts[data[i]];
  double h = 0.0;
  for (auto c : counts) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / static_cast<double>(n);
    h -= p * std::log2(p);
  }
  return h == 0.0 ? 0.0 : h;  // no -0
}

double entropy_delta(const MaskedImage& masked, const torch::Tensor& reuse_resized) {
  return shannon_entropy(reuse_resized) - shannon_entropy(masked.pixels);
}

double cosine_similarity(const torch::Tensor& u, const torch::Tensor& v) {
  auto a = u.detach().to(torch::kCPU, torch::kFloat64).flatten();
  auto b = v.detach().to(torch::kCPU, torch::kFloat64).flatten();
  if (a.numel() != b.numel()) throw DimensionError("feature vectors differ in length");
  const double na = a.norm().item<double>();
  const double nb = b.norm().item<double>();
  if (na == 0.0 || nb == 0.0) throw DomainError("cosine similarity of a zero feature vector");
  return a.dot(b).item<double>() / (na * nb);
}

double deep_similarity(const torch::Tensor& a, const torch::Tensor& b,
                       const FeatureExtractor& extractor) {
  return maskany::cosine_similarity(extractor(a), extractor(b));
}

double similarity_score(double s_ds, double s_a) { return std::exp(-std::abs(s_ds - s_a)); }

double f_score(std::span<const AnalysisRecord> records, const FScoreConfig& config) {
  if (records.empty()) throw DomainError("F score of an empty record list");
  double sum = 0.0;
  for (const auto& r : records) sum += config.w1 * r.s + config.w2 * r.delta_h;
  return sum / static_cast<double>(records.size());
}

}  // namespace maskany
