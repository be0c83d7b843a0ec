// Copyright 2026 The lidarclip-cpp Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Lidar/camera alignment: rigid transform into the camera frame, pinhole
// projection and frustum culling.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lidarclip/binary_io.hpp"
#include "lidarclip/error.hpp"

namespace lidarclip {

inline constexpr double kDepthEps = 1e-6;

struct Point {
  double x = 0, y = 0, z = 0;
  double intensity = 0;  // normalized reflectance in [0, 1]
};

enum class Frame : std::uint8_t { kLidar, kCamera };

struct PointCloud {
  std::vector<Point> points;
  Frame frame = Frame::kLidar;

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
};

struct CameraCalibration {
  // camera-from-lidar, row-major 4x4 (meters)
  std::array<double, 16> extrinsic{1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1};
  // pinhole, row-major 3x3 (pixels)
  std::array<double, 9> intrinsic{1, 0, 0, 0, 1, 0, 0, 0, 1};
  int width = 1;
  int height = 1;

  double fx() const { return intrinsic[0]; }
  double fy() const { return intrinsic[4]; }
  double cx() const { return intrinsic[2]; }
  double cy() const { return intrinsic[5]; }

  /// Throws kCalibration unless the rotation block is orthonormal with
  /// determinant +1 (tolerance 1e-6), focal lengths are positive and the
  /// image size is non-empty.
  void validate() const {
    const auto& e = extrinsic;
    for (double v : e) {
      if (!std::isfinite(v)) fail(ErrorCode::kCalibration, "extrinsic has non-finite entries");
    }
    for (double v : intrinsic) {
      if (!std::isfinite(v)) fail(ErrorCode::kCalibration, "intrinsic has non-finite entries");
    }
    constexpr double kTol = 1e-6;
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) {
        double dot = 0;
        for (int k = 0; k < 3; ++k) dot += e[4 * k + i] * e[4 * k + j];
        if (std::abs(dot - (i == j ? 1.0 : 0.0)) > kTol) {
          fail(ErrorCode::kCalibration, "extrinsic rotation is not orthonormal");
        }
      }
    }
    const double det = e[0] * (e[5] * e[10] - e[6] * e[9]) - e[1] * (e[4] * e[10] - e[6] * e[8]) +
                       e[2] * (e[4] * e[9] - e[5] * e[8]);
    if (std::abs(det - 1.0) > kTol) fail(ErrorCode::kCalibration, "extrinsic rotation has determinant != +1");
    if (std::abs(e[12]) > kTol || std::abs(e[13]) > kTol || std::abs(e[14]) > kTol ||
        std::abs(e[15] - 1.0) > kTol) {
      fail(ErrorCode::kCalibration, "extrinsic bottom row must be (0, 0, 0, 1)");
    }
    if (!(fx() > 0) || !(fy() > 0)) fail(ErrorCode::kCalibration, "focal lengths must be positive");
    if (width <= 0 || height <= 0) fail(ErrorCode::kCalibration, "image size must be positive");
  }
};

/// Applies the camera-from-lidar extrinsic to every point; intensity and
/// order are preserved.
inline PointCloud transform_to_camera(const PointCloud& cloud, const CameraCalibration& calib) {
  if (cloud.frame != Frame::kLidar) fail(ErrorCode::kInvalidArgument, "transform_to_camera expects a lidar-frame cloud");
  calib.validate();
  const auto& e = calib.extrinsic;
  PointCloud out;
  out.frame = Frame::kCamera;
  out.points.reserve(cloud.size());
  for (const Point& p : cloud.points) {
    out.points.push_back({e[0] * p.x + e[1] * p.y + e[2] * p.z + e[3],
                          e[4] * p.x + e[5] * p.y + e[6] * p.z + e[7],
                          e[8] * p.x + e[9] * p.y + e[10] * p.z + e[11], p.intensity});
  }
  return out;
}

struct PixelProjection {
  double u = 0, v = 0, depth = 0;
};

/// Pinhole projection of a camera-frame point. std::nullopt means the point
/// is behind (or on) the image plane.
inline std::optional<PixelProjection> project_point(const Point& p, const CameraCalibration& calib) {
  if (!(p.z > kDepthEps)) return std::nullopt;
  return PixelProjection{calib.fx() * p.x / p.z + calib.cx(), calib.fy() * p.y / p.z + calib.cy(), p.z};
}

inline bool in_image(const PixelProjection& px, const CameraCalibration& calib) {
  return px.u >= 0 && px.u < calib.width && px.v >= 0 && px.v < calib.height;
}

/// Indices of lidar points that are visible in the image, in input order.
inline std::vector<std::size_t> frustum_indices(const PointCloud& cloud, const CameraCalibration& calib) {
  PointCloud cam = transform_to_camera(cloud, calib);
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < cam.size(); ++i) {
    auto px = project_point(cam.points[i], calib);
    if (px && in_image(*px, calib)) keep.push_back(i);
  }
  return keep;
}

/// Camera-frame points that project inside [0, width) x [0, height) with
/// positive depth. An empty result is valid.
inline PointCloud frustum_filter(const PointCloud& cloud, const CameraCalibration& calib) {
  PointCloud cam = transform_to_camera(cloud, calib);
  PointCloud out;
  out.frame = Frame::kCamera;
  for (const Point& p : cam.points) {
    auto px = project_point(p, calib);
    if (px && in_image(*px, calib)) out.points.push_back(p);
  }
  return out;
}

/// The visible subset, kept in the lidar frame. The encoder's point-cloud
/// range is expressed in lidar axes, so this is what the pipeline voxelizes.
inline PointCloud frustum_crop_lidar(const PointCloud& cloud, const CameraCalibration& calib) {
  PointCloud out;
  out.frame = Frame::kLidar;
  for (std::size_t i : frustum_indices(cloud, calib)) out.points.push_back(cloud.points[i]);
  return out;
}

/// Divides raw sensor intensities by the sensor's documented maximum and
/// clamps into [0, 1].
inline void normalize_intensity(PointCloud& cloud, double raw_max) {
  if (!(raw_max > 0)) fail(ErrorCode::kInvalidArgument, "intensity maximum must be positive");
  for (Point& p : cloud.points) p.intensity = std::clamp(p.intensity / raw_max, 0.0, 1.0);
}

// ---------------------------------------------------------------------------
// LCPC point-cloud files: "LCPC", u16 version = 1, u64 count, count x 4 f32.

inline constexpr std::uint16_t kPointCloudVersion = 1;

inline std::vector<std::uint8_t> encode_point_cloud(const PointCloud& cloud) {
  io::ByteWriter w;
  w.magic("LCPC");
  w.put<std::uint16_t>(kPointCloudVersion);
  w.put<std::uint64_t>(cloud.size());
  for (const Point& p : cloud.points) {
    w.put<float>(static_cast<float>(p.x));
    w.put<float>(static_cast<float>(p.y));
    w.put<float>(static_cast<float>(p.z));
    w.put<float>(static_cast<float>(p.intensity));
  }
  return w.bytes();
}

inline PointCloud decode_point_cloud(std::span<const std::uint8_t> bytes, Frame frame = Frame::kLidar) {
  io::ByteReader r(bytes);
  r.expect_magic("LCPC");
  const auto version = r.get<std::uint16_t>();
  if (version != kPointCloudVersion) {
    fail(ErrorCode::kUnsupportedVersion, "unsupported LCPC version " + std::to_string(version));
  }
  const auto count = r.get<std::uint64_t>();
  if (count > r.remaining() / 16) fail(ErrorCode::kTruncated, "LCPC file shorter than its declared point count");
  PointCloud cloud;
  cloud.frame = frame;
  cloud.points.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    Point p;
    p.x = r.get<float>();
    p.y = r.get<float>();
    p.z = r.get<float>();
    p.intensity = r.get<float>();
    if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z) || !std::isfinite(p.intensity)) {
      fail(ErrorCode::kFormat, "non-finite value in point " + std::to_string(i));
    }
    cloud.points.push_back(p);
  }
  return cloud;
}

inline void write_point_cloud(const PointCloud& cloud, const std::string& path) {
  io::write_file_bytes(path, encode_point_cloud(cloud));
}

inline PointCloud read_point_cloud(const std::string& path, Frame frame = Frame::kLidar) {
  return decode_point_cloud(io::read_file_bytes(path), frame);
}

// Calibration JSON: {"extrinsic": [16], "intrinsic": [9], "width", "height"}.

inline CameraCalibration calibration_from_json(const nlohmann::json& j) {
  CameraCalibration c;
  try {
    auto ext = j.at("extrinsic").get<std::vector<double>>();
    auto intr = j.at("intrinsic").get<std::vector<double>>();
    if (ext.size() != 16 || intr.size() != 9) {
      fail(ErrorCode::kFormat, "calibration needs 16 extrinsic and 9 intrinsic values");
    }
    std::copy(ext.begin(), ext.end(), c.extrinsic.begin());
    std::copy(intr.begin(), intr.end(), c.intrinsic.begin());
    c.width = j.at("width").get<int>();
    c.height = j.at("height").get<int>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kFormat, std::string("malformed calibration: ") + e.what());
  }
  c.validate();
  return c;
}

inline nlohmann::json calibration_to_json(const CameraCalibration& c) {
  return {{"extrinsic", c.extrinsic}, {"intrinsic", c.intrinsic}, {"width", c.width}, {"height", c.height}};
}

inline CameraCalibration read_calibration(const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_text_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorCode::kFormat, std::string("calibration is not valid JSON: ") + e.what());
  }
  return calibration_from_json(j);
}

}  // namespace lidarclip
