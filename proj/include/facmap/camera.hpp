#pragma once

// Pinhole cameras, rigid poses, images and posed frames.
//
// Conventions: camera x right, y down, z forward; poses map camera
// coordinates to world coordinates; pixel (u, v) = (column, row) with integer
// coordinates at pixel centers.

#include <cstdint>
#include <optional>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

#include "facmap/error.hpp"

namespace facmap {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

struct CameraIntrinsics {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  int width = 0, height = 0;

  // Throws ConfigError when fx, fy <= 0 or the principal point is outside the image.
  void validate() const;
  // Unnormalized camera-frame direction (x, y, 1) through pixel (u, v).
  Vec3 backproject(double u, double v) const { return {(u - cx) / fx, (v - cy) / fy, 1.0}; }
  // Pixel of a camera-frame point; nullopt when z <= 0.
  std::optional<Vec2> project(const Vec3& p_cam) const;
  bool contains(double u, double v) const { return u >= -0.5 && v >= -0.5 && u < width - 0.5 && v < height - 0.5; }
  bool operator==(const CameraIntrinsics&) const = default;
};

struct Pose {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static Pose from_tum(const Vec3& t, const Eigen::Quaterniond& q);
  // Camera that sits at `eye` and looks at `target`, with world `up` mapped
  // to camera -y.
  static Pose look_at(const Vec3& eye, const Vec3& target, const Vec3& up = Vec3::UnitZ());

  // Throws ConfigError unless R^T R = I (1e-9) and det R = +1.
  void validate() const;
  Vec3 to_world(const Vec3& p_cam) const { return rotation * p_cam + translation; }
  Vec3 to_camera(const Vec3& p_world) const { return rotation.transpose() * (p_world - translation); }
  Pose inverse() const;
  Pose operator*(const Pose& b) const { return {rotation * b.rotation, rotation * b.translation + translation}; }
  Eigen::Quaterniond quaternion() const { return Eigen::Quaterniond(rotation).normalized(); }
};

// Row-major interleaved image of doubles.
struct Image {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<double> data;

  Image() = default;
  Image(int w, int h, int c, double fill = 0.0)
      : width(w), height(h), channels(c), data(static_cast<std::size_t>(w) * h * c, fill) {}

  bool empty() const { return data.empty(); }
  std::size_t index(int x, int y, int c = 0) const {
    return (static_cast<std::size_t>(y) * width + x) * channels + c;
  }
  double& at(int x, int y, int c = 0) { return data[index(x, y, c)]; }
  double at(int x, int y, int c = 0) const { return data[index(x, y, c)]; }

  // Bilinear lookup at continuous pixel coordinates with edge clamping.
  double bilinear(double u, double v, int c) const;
  // Bilinear lookup plus its partial derivatives in u and v.
  double bilinear_grad(double u, double v, int c, double& du, double& dv) const;
};

// 2x box-filter downsampling (odd trailing rows/columns are dropped).
Image downsample2(const Image& img);

struct Frame {
  std::int64_t id = 0;
  double timestamp = 0.0;
  Image rgb;  // [0, 1], 3 channels
  Pose pose;  // world from camera
  CameraIntrinsics intrinsics;
  std::optional<Image> depth;  // ground-truth z-depth in meters, 1 channel, 0 = invalid

  // Checks image size against the intrinsics and the pose invariants.
  void validate() const;
};

}  // namespace facmap
