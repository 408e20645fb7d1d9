#include "facmap/camera.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace facmap {

void CameraIntrinsics::validate() const {
  std::ostringstream os;
  if (!(fx > 0) || !(fy > 0)) os << "focal lengths must be positive (fx=" << fx << ", fy=" << fy << ")";
  else if (width <= 0 || height <= 0) os << "image size must be positive (" << width << "x" << height << ")";
  else if (!(cx > 0 && cx < width) || !(cy > 0 && cy < height))
    os << "principal point (" << cx << ", " << cy << ") outside the " << width << "x" << height << " image";
  if (!os.str().empty()) throw ConfigError("camera intrinsics: " + os.str());
}

std::optional<Vec2> CameraIntrinsics::project(const Vec3& p) const {
  if (!(p.z() > 0.0)) return std::nullopt;
  return Vec2(fx * p.x() / p.z() + cx, fy * p.y() / p.z() + cy);
}

Pose Pose::from_tum(const Vec3& t, const Eigen::Quaterniond& q) {
  return {q.normalized().toRotationMatrix(), t};
}

Pose Pose::look_at(const Vec3& eye, const Vec3& target, const Vec3& up) {
  const Vec3 f = (target - eye).normalized();
  Vec3 r = f.cross(up);
  if (r.norm() < 1e-9) throw ConfigError("look_at: view direction parallel to up vector");
  r.normalize();
  const Vec3 d = f.cross(r);
  Pose p;
  p.rotation.col(0) = r;
  p.rotation.col(1) = d;
  p.rotation.col(2) = f;
  p.translation = eye;
  return p;
}

void Pose::validate() const {
  const double ortho = (rotation.transpose() * rotation - Mat3::Identity()).cwiseAbs().maxCoeff();
  const double det = rotation.determinant();
  if (!(ortho <= 1e-9) || !(std::abs(det - 1.0) <= 1e-9) || !translation.allFinite()) {
    std::ostringstream os;
    os << "invalid pose: |R^T R - I| = " << ortho << ", det R = " << det;
    throw ConfigError(os.str());
  }
}

Pose Pose::inverse() const {
  const Mat3 rt = rotation.transpose();
  return {rt, -(rt * translation)};
}

double Image::bilinear(double u, double v, int c) const {
  double du, dv;
  return bilinear_grad(u, v, c, du, dv);
}

double Image::bilinear_grad(double u, double v, int c, double& du, double& dv) const {
  const double uc = std::clamp(u, 0.0, static_cast<double>(width - 1));
  const double vc = std::clamp(v, 0.0, static_cast<double>(height - 1));
  int x0 = static_cast<int>(uc);
  int y0 = static_cast<int>(vc);
  x0 = std::min(x0, std::max(0, width - 2));
  y0 = std::min(y0, std::max(0, height - 2));
  const int x1 = std::min(x0 + 1, width - 1);
  const int y1 = std::min(y0 + 1, height - 1);
  const double tx = uc - x0, ty = vc - y0;
  const double a = at(x0, y0, c), b = at(x1, y0, c), cc = at(x0, y1, c), d = at(x1, y1, c);
  // Outside the clamped range the lookup is constant.
  const bool live_u = u >= 0.0 && u <= width - 1;
  const bool live_v = v >= 0.0 && v <= height - 1;
  du = live_u ? (1 - ty) * (b - a) + ty * (d - cc) : 0.0;
  dv = live_v ? (1 - tx) * (cc - a) + tx * (d - b) : 0.0;
  return (1 - ty) * ((1 - tx) * a + tx * b) + ty * ((1 - tx) * cc + tx * d);
}

Image downsample2(const Image& img) {
  Image out(img.width / 2, img.height / 2, img.channels);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x)
      for (int c = 0; c < img.channels; ++c)
        out.at(x, y, c) = 0.25 * (img.at(2 * x, 2 * y, c) + img.at(2 * x + 1, 2 * y, c) + img.at(2 * x, 2 * y + 1, c) +
                                  img.at(2 * x + 1, 2 * y + 1, c));
  return out;
}

void Frame::validate() const {
  intrinsics.validate();
  pose.validate();
  if (rgb.width != intrinsics.width || rgb.height != intrinsics.height || rgb.channels != 3) {
    std::ostringstream os;
    os << "frame " << id << ": image " << rgb.width << "x" << rgb.height << "x" << rgb.channels
       << " does not match intrinsics " << intrinsics.width << "x" << intrinsics.height;
    throw DataError(os.str());
  }
  if (depth && (depth->width != rgb.width || depth->height != rgb.height || depth->channels != 1))
    throw DataError("frame " + std::to_string(id) + ": depth map size mismatch");
}

}  // namespace facmap
