#include "maskany/image_io.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "maskany/error.hpp"

namespace maskany {

torch::Tensor from_mat(const cv::Mat& mat) {
  cv::Mat rgb;
  switch (mat.channels()) {
    case 1: rgb = mat; break;
    case 3: cv::cvtColor(mat, rgb, cv::COLOR_BGR2RGB); break;
    case 4: cv::cvtColor(mat, rgb, cv::COLOR_BGRA2RGB); break;
    default: throw IngestionError("unsupported channel count " + std::to_string(mat.channels()));
  }
  cv::Mat u8;
  if (rgb.depth() == CV_8U) {
    u8 = rgb;
  } else if (rgb.depth() == CV_16U) {
    rgb.convertTo(u8, CV_8U, 1.0 / 257.0);
  } else {
    throw IngestionError("unsupported pixel depth");
  }
  u8 = u8.isContinuous() ? u8 : u8.clone();
  auto t = torch::from_blob(u8.data, {u8.rows, u8.cols, u8.channels()}, torch::kUInt8)
               .permute({2, 0, 1})
               .to(torch::kFloat32)
               .div_(255.0f);
  return t.contiguous();
}

cv::Mat to_mat_u8(const torch::Tensor& image) {
  if (image.dim() != 3 || (image.size(0) != 1 && image.size(0) != 3)) {
    throw DimensionError("expected a 1- or 3-channel C x H x W tensor");
  }
  auto u8 = image.detach()
                .to(torch::kCPU, torch::kFloat32)
                .clamp(0.0, 1.0)
                .mul(255.0)
                .round()
                .to(torch::kUInt8)
                .permute({1, 2, 0})
                .contiguous();
  const int channels = static_cast<int>(u8.size(2));
  cv::Mat mat(static_cast<int>(u8.size(0)), static_cast<int>(u8.size(1)), CV_8UC(channels),
              u8.data_ptr<std::uint8_t>());
  cv::Mat out;
  if (channels == 3) {
    cv::cvtColor(mat, out, cv::COLOR_RGB2BGR);
  } else {
    out = mat.clone();
  }
  return out;
}

torch::Tensor read_image(const std::filesystem::path& path) {
  cv::Mat mat = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (mat.empty()) throw IngestionError("cannot read image " + path.string());
  auto t = from_mat(mat);
  if (t.size(0) == 1) t = t.expand({3, t.size(1), t.size(2)}).contiguous();
  return t;
}

void write_image(const std::filesystem::path& path, const torch::Tensor& image) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), to_mat_u8(image))) {
    throw IngestionError("cannot write image " + path.string());
  }
}

}  // namespace maskany
