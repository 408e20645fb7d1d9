#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "facmap/dataset.hpp"
#include "facmap/image_io.hpp"
#include "facmap/mesh.hpp"
#include "facmap/metrics.hpp"

namespace {

using namespace facmap;
namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("facmap_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// Unit square in the plane z = h, split into a regular triangle grid.
mesh::Mesh square(double h, int n = 10) {
  mesh::Mesh m;
  for (int j = 0; j <= n; ++j)
    for (int i = 0; i <= n; ++i) m.vertices.emplace_back(double(i) / n, double(j) / n, h);
  auto id = [n](int i, int j) { return static_cast<std::uint32_t>(j * (n + 1) + i); };
  for (int j = 0; j < n; ++j)
    for (int i = 0; i < n; ++i) {
      m.triangles.push_back({id(i, j), id(i + 1, j), id(i + 1, j + 1)});
      m.triangles.push_back({id(i, j), id(i + 1, j + 1), id(i, j + 1)});
    }
  return m;
}

TEST(SceneIo, PngColorRoundTrip) {
  const fs::path dir = scratch("png");
  Image img(5, 4, 3);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (double& v : img.data) v = u(rng);
  io::write_png_rgb(dir / "a.png", img);
  const Image back = io::read_png_rgb(dir / "a.png");
  ASSERT_EQ(back.width, 5);
  ASSERT_EQ(back.height, 4);
  for (std::size_t i = 0; i < img.data.size(); ++i) EXPECT_NEAR(back.data[i], img.data[i], 0.5 / 255.0 + 1e-12);
}

TEST(SceneIo, PngDepthIsMillimeters) {
  const fs::path dir = scratch("depth");
  Image d(3, 2, 1);
  d.data = {1.5, 0.0, 2.0004, 0.001, 65.535, 0.25};
  io::write_png_depth(dir / "d.png", d);
  const Image back = io::read_png_depth(dir / "d.png");
  EXPECT_DOUBLE_EQ(back.data[0], 1.5);
  EXPECT_DOUBLE_EQ(back.data[1], 0.0);
  EXPECT_DOUBLE_EQ(back.data[2], 2.0);
  EXPECT_DOUBLE_EQ(back.data[3], 0.001);
  EXPECT_DOUBLE_EQ(back.data[4], 65.535);
  EXPECT_THROW(io::read_png_depth(dir / "none.png"), DataError);
  io::write_png_rgb(dir / "rgb.png", Image(2, 2, 3));
  EXPECT_THROW(io::read_png_depth(dir / "rgb.png"), DataError);
  std::ofstream(dir / "junk.png") << "not a png";
  EXPECT_THROW(io::read_png_rgb(dir / "junk.png"), DataError);
}

TEST(SceneIo, PlyRoundTrip) {
  const fs::path dir = scratch("ply");
  mesh::Mesh m = square(0.3, 3);
  for (std::size_t i = 0; i < m.vertices.size(); ++i) m.colors.emplace_back(0.1 * (i % 10), 0.5, 1.0);
  mesh::write_ply(dir / "m.ply", m);
  const mesh::Mesh b = mesh::read_ply(dir / "m.ply");
  ASSERT_EQ(b.vertices.size(), m.vertices.size());
  ASSERT_EQ(b.triangles, m.triangles);
  for (std::size_t i = 0; i < m.vertices.size(); ++i) EXPECT_LE((b.vertices[i] - m.vertices[i]).norm(), 1e-8);
  ASSERT_EQ(b.colors.size(), m.colors.size());
  for (std::size_t i = 0; i < m.colors.size(); ++i) EXPECT_LE((b.colors[i] - m.colors[i]).norm(), 0.5 / 255.0 * 2);
  mesh::write_ply(dir / "empty.ply", mesh::Mesh{});
  std::ifstream in(dir / "empty.ply");
  std::string first;
  std::getline(in, first);
  EXPECT_EQ(first, "ply");
  EXPECT_TRUE(mesh::read_ply(dir / "empty.ply").vertices.empty());
  std::ofstream(dir / "bad.ply") << "solid x\n";
  EXPECT_THROW(mesh::read_ply(dir / "bad.ply"), DataError);
  EXPECT_THROW(mesh::write_ply(dir / "no" / "such" / "dir" / "m.ply", m), DataError);
}

TEST(SceneIo, MeshValidation) {
  mesh::Mesh m = square(0.0, 2);
  EXPECT_NEAR(m.area(), 1.0, 1e-12);
  m.triangles.push_back({0, 1, 99});
  EXPECT_THROW(m.validate(), DataError);
}

TEST(SceneIo, MarchingCubesSphere) {
  const field::SceneBounds b(Vec3::Constant(-1.0), Vec3::Constant(1.0));
  const double cell = 2.0 / 63.0;
  const auto grid = mesh::sample_grid([](const Vec3& p) { return p.norm() - 0.5; }, b, cell);
  EXPECT_EQ(grid.nx, 64u);
  const mesh::Mesh m = mesh::marching_cubes(grid);
  ASSERT_FALSE(m.empty());
  m.validate();
  const double diag = std::sqrt(3.0) * cell;
  for (const Vec3& v : m.vertices) EXPECT_NEAR(v.norm(), 0.5, diag);
  EXPECT_NEAR(m.area(), 4.0 * M_PI * 0.25, 0.02 * 4.0 * M_PI * 0.25);
  // Outward normals: positive values lie outside.
  double outward = 0.0;
  for (const auto& t : m.triangles) {
    const Vec3 n = (m.vertices[t[1]] - m.vertices[t[0]]).cross(m.vertices[t[2]] - m.vertices[t[0]]);
    outward += n.dot(m.vertices[t[0]] + m.vertices[t[1]] + m.vertices[t[2]]);
  }
  EXPECT_GT(outward, 0.0);
}

TEST(SceneIo, MarchingCubesSignFlipReversesWinding) {
  const field::SceneBounds b(Vec3::Constant(-1.0), Vec3::Constant(1.0));
  const auto pos = mesh::sample_grid([](const Vec3& p) { return p.norm() - 0.57; }, b, 0.1);
  auto neg = pos;
  for (double& v : neg.values) v = -v;
  const mesh::Mesh a = mesh::marching_cubes(pos), c = mesh::marching_cubes(neg);
  EXPECT_EQ(a.vertices.size(), c.vertices.size());
  // Ambiguous faces resolve differently once the sign flips, so only the
  // triangulation differs.
  EXPECT_NEAR(a.area(), c.area(), 1e-4 * a.area());
  double flux = 0.0;
  for (const auto& t : c.triangles) {
    const Vec3 n = (c.vertices[t[1]] - c.vertices[t[0]]).cross(c.vertices[t[2]] - c.vertices[t[0]]);
    flux += n.dot(c.vertices[t[0]]);
  }
  EXPECT_LT(flux, 0.0);
}

TEST(SceneIo, MarchingCubesWithoutCrossingIsEmpty) {
  const field::SceneBounds b(Vec3::Zero(), Vec3::Ones());
  EXPECT_TRUE(mesh::marching_cubes(mesh::sample_grid([](const Vec3&) { return 1.0; }, b, 0.25)).empty());
}

TEST(SceneIo, ParallelSquaresMeshMetrics) {
  const mesh::Mesh a = square(0.0), near = square(0.03), far = square(0.08);
  const auto m3 = mesh::evaluate_mesh(near, a, 100000, 0.05, 1);
  EXPECT_NEAR(m3.acc_cm, 3.0, 0.05);
  EXPECT_NEAR(m3.comp_cm, 3.0, 0.05);
  EXPECT_DOUBLE_EQ(m3.comp_ratio, 100.0);
  EXPECT_DOUBLE_EQ(mesh::evaluate_mesh(far, a, 100000, 0.05, 1).comp_ratio, 0.0);
  const auto same = mesh::evaluate_mesh(a, a, 20000, 0.05, 2);
  EXPECT_EQ(same.acc_cm, 0.0);
  EXPECT_EQ(same.comp_cm, 0.0);
  EXPECT_EQ(same.comp_ratio, 100.0);
  EXPECT_THROW(mesh::evaluate_mesh(mesh::Mesh{}, a), DataError);
}

TEST(SceneIo, MeshMetricsSwapSymmetry) {
  const field::SceneBounds b(Vec3::Constant(-1.0), Vec3::Constant(1.0));
  const mesh::Mesh s1 = mesh::marching_cubes(mesh::sample_grid([](const Vec3& p) { return p.norm() - 0.5; }, b, 0.05));
  const mesh::Mesh s2 = mesh::marching_cubes(
      mesh::sample_grid([](const Vec3& p) { return (p - Vec3(0.05, 0, 0)).norm() - 0.45; }, b, 0.05));
  const auto ab = mesh::evaluate_mesh(s1, s2, 20000, 0.05, 3), ba = mesh::evaluate_mesh(s2, s1, 20000, 0.05, 3);
  EXPECT_EQ(ab.acc_cm, ba.comp_cm);
  EXPECT_EQ(ab.comp_cm, ba.acc_cm);
}

TEST(SceneIo, SurfaceSamplesAreAreaUniform) {
  // Two squares of area 1 and 0.25: samples split 4:1.
  mesh::Mesh m = square(0.0, 4);
  mesh::Mesh small = square(5.0, 4);
  for (Vec3& v : small.vertices) v.head<2>() *= 0.5;
  const auto offset = static_cast<std::uint32_t>(m.vertices.size());
  m.vertices.insert(m.vertices.end(), small.vertices.begin(), small.vertices.end());
  for (auto t : small.triangles) m.triangles.push_back({t[0] + offset, t[1] + offset, t[2] + offset});
  const auto pts = mesh::sample_surface(m, 50000, 4);
  double upper = 0.0;
  for (const Vec3& p : pts) upper += p.z() > 1.0 ? 1.0 : 0.0;
  EXPECT_NEAR(upper / pts.size(), 0.2, 0.01);
  EXPECT_EQ(mesh::sample_surface(m, 100, 9), mesh::sample_surface(m, 100, 9));
}

TEST(SceneIo, KdTreeMatchesBruteForce) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<Vec3> pts(2000);
  for (Vec3& p : pts) p = Vec3(u(rng), u(rng), u(rng));
  const mesh::KdTree tree(pts);
  for (int n = 0; n < 300; ++n) {
    const Vec3 q(1.5 * u(rng), 1.5 * u(rng), 1.5 * u(rng));
    double best = 1e300;
    for (const Vec3& p : pts) best = std::min(best, (p - q).norm());
    EXPECT_EQ(tree.nearest(q), best);
  }
}

TEST(SceneIo, PsnrAndDepthMetrics) {
  Image a(8, 8, 3, 0.5), b(8, 8, 3, 0.6);
  EXPECT_NEAR(metrics::psnr(a, b), 20.0, 1e-9);
  EXPECT_EQ(metrics::psnr(a, a), metrics::kPsnrCap);
  EXPECT_NEAR(metrics::image_ssim(a, a), 1.0, 1e-12);
  std::mt19937_64 rng(6);
  std::normal_distribution<double> noise(0.0, 1.0);
  double last = metrics::kPsnrCap;
  for (double amp : {0.001, 0.01, 0.05, 0.1}) {
    Image n = a;
    std::mt19937_64 r2(6);
    for (double& v : n.data) v += amp * noise(r2);
    const double p = metrics::psnr(a, n);
    EXPECT_LT(p, last);
    last = p;
  }
  Image d(8, 8, 1, 1.0), gt(8, 8, 1, 1.02);
  std::vector<std::uint8_t> mask(64, 1);
  auto m = metrics::evaluate_render(a, d, a, gt, mask);
  ASSERT_TRUE(m.depth_l1_cm.has_value());
  EXPECT_NEAR(*m.depth_l1_cm, 2.0, 1e-9);
  EXPECT_EQ(m.depth_pixels, 64u);
  m = metrics::evaluate_render(a, d, a, gt, std::vector<std::uint8_t>(64, 0));
  EXPECT_FALSE(m.depth_l1_cm.has_value());
  Image op(2, 2, 1);
  op.data = {0.2, 0.5, 0.7, 0.49};
  EXPECT_EQ(metrics::opacity_mask(op), (std::vector<std::uint8_t>{0, 1, 1, 0}));
}

TEST(SceneIo, ReportFormat) {
  metrics::MetricReport r;
  r.frames.push_back({0, {30.0, 0.9, 2.0, 10}});
  r.frames.push_back({1, {20.0, 0.7, std::nullopt, 0}});
  r.summarize_frames();
  EXPECT_NEAR(*r.psnr, 25.0, 1e-12);
  EXPECT_NEAR(*r.depth_l1_cm, 2.0, 1e-12);
  const std::string s = metrics::format_report(r);
  for (const char* key : {"psnr_db:", "ssim:", "depth_l1_cm:", "acc_cm: absent", "comp_cm: absent",
                          "comp_ratio_pct: absent"})
    EXPECT_NE(s.find(key), std::string::npos) << key;
  r.set_mesh({1.0, 2.0, 90.0});
  EXPECT_NE(metrics::format_report(r).find("comp_ratio_pct: 90"), std::string::npos);
}

TEST(SceneIo, SyntheticDepthToWall) {
  data::SynthSpec s;
  s.scene.room = Vec3(4.0, 3.0, 2.5);
  s.scene.spheres.clear();
  s.scene.boxes.clear();
  s.width = s.height = 33;
  s.trajectory = {1, 0.0, 0.0, Vec3(1.0, 0.0, 0.0), 0.0};
  s.build_gt_mesh = false;
  const data::Dataset d = data::generate_synthetic(s, 0);
  ASSERT_EQ(d.frames.size(), 1u);
  ASSERT_TRUE(d.frames[0].depth.has_value());
  EXPECT_NEAR(d.frames[0].depth->at(16, 16), 2.0, 1e-6);
}

TEST(SceneIo, SyntheticDepthAgreesWithFixedStepMarch) {
  std::mt19937_64 rng(7);
  const data::SyntheticScene scene(data::SceneSpec{}, rng);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const double step = 1e-3;
  for (int n = 0; n < 100; ++n) {
    const Vec3 o(0.8 * u(rng), 0.8 * u(rng), 0.3 * u(rng));
    if (scene.sdf(o) < 0.05) continue;
    const Vec3 dir = Vec3(u(rng), u(rng), u(rng)).normalized();
    const auto t = scene.trace(o, dir);
    ASSERT_TRUE(t.has_value());
    double s = 0.0;
    while (scene.sdf(o + s * dir) > 0.0) s += step;
    EXPECT_NEAR(*t, s, step);
  }
}

TEST(SceneIo, SyntheticSdfIsEikonal) {
  std::mt19937_64 rng(8);
  const data::SyntheticScene scene(data::SceneSpec{}, rng);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  int good = 0, total = 0;
  for (int n = 0; n < 2000; ++n) {
    const Vec3 p(1.4 * u(rng), 1.4 * u(rng), 1.2 * u(rng));
    const double h = 1e-5;
    Vec3 g;
    for (int a = 0; a < 3; ++a) {
      Vec3 e = Vec3::Zero();
      e[a] = h;
      g[a] = (scene.sdf(p + e) - scene.sdf(p - e)) / (2 * h);
    }
    ++total;
    good += std::abs(g.norm() - 1.0) < 1e-3;
  }
  EXPECT_GE(double(good) / total, 0.95);
}

TEST(SceneIo, SyntheticIsDeterministicAndValidated) {
  data::SynthSpec s;
  s.width = s.height = 32;
  s.trajectory.frames = 3;
  s.build_gt_mesh = false;
  const data::Dataset a = data::generate_synthetic(s, 3), b = data::generate_synthetic(s, 3);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(a.frames[i].rgb.data, b.frames[i].rgb.data);
    EXPECT_EQ(a.frames[i].depth->data, b.frames[i].depth->data);
  }
  data::SynthSpec small = s;
  small.width = 16;
  EXPECT_THROW(data::generate_synthetic(small, 0), ConfigError);
  data::SynthSpec outside = s;
  outside.trajectory.radius = 5.0;
  EXPECT_THROW(data::generate_synthetic(outside, 0), ConfigError);
}

TEST(SceneIo, DatasetRoundTrip) {
  const fs::path dir = scratch("dataset");
  data::SynthSpec s;
  s.width = s.height = 32;
  s.trajectory.frames = 3;
  s.gt_mesh_cell = 0.1;
  const data::Dataset d = data::generate_synthetic(s, 1);
  data::save_dataset(d, dir);
  const data::Dataset back = data::load_dataset(dir);
  ASSERT_EQ(back.frames.size(), 3u);
  EXPECT_TRUE(back.has_depth());
  EXPECT_TRUE(back.gt_mesh.has_value());
  EXPECT_TRUE(back.bounds.min_corner().isApprox(d.bounds.min_corner(), 1e-12));
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back.frames[i].id, d.frames[i].id);
    EXPECT_LE((back.frames[i].pose.rotation - d.frames[i].pose.rotation).norm(), 1e-9);
    EXPECT_LE((back.frames[i].pose.translation - d.frames[i].pose.translation).norm(), 1e-12);
    EXPECT_EQ(back.frames[i].intrinsics, d.frames[i].intrinsics);
    for (std::size_t p = 0; p < d.frames[i].depth->data.size(); ++p)
      EXPECT_NEAR(back.frames[i].depth->data[p], d.frames[i].depth->data[p], 0.5e-3 + 1e-12);
  }
}

TEST(SceneIo, MinimalFixtureWithIdentityPose) {
  const fs::path dir = scratch("fixture");
  fs::create_directories(dir / "rgb");
  fs::create_directories(dir / "depth");
  std::ofstream(dir / "intrinsics.txt") << "20 20 15.5 11.5 32 24\n";
  std::ofstream(dir / "poses.txt") << "# comment\n0 0 0 0 0 0 0 1\n1 0.1 0 0 0 0 0 1\n2 0.2 0 0 0 0 0.7071067811865476 0.7071067811865476\n";
  Image depth(32, 24, 1, 1.5);
  for (int i = 0; i < 3; ++i) {
    io::write_png_rgb(dir / "rgb" / ("00000" + std::to_string(i) + ".png"), Image(32, 24, 3, 0.5));
    io::write_png_depth(dir / "depth" / ("00000" + std::to_string(i) + ".png"), depth);
  }
  const data::Dataset d = data::load_dataset(dir);
  ASSERT_EQ(d.frames.size(), 3u);
  EXPECT_TRUE(d.frames[0].pose.rotation.isApprox(Mat3::Identity(), 1e-15));
  EXPECT_NEAR(d.frames[1].pose.translation.x(), 0.1, 1e-15);
  EXPECT_NEAR(d.frames[2].pose.rotation(1, 0), 1.0, 1e-12);
  EXPECT_DOUBLE_EQ(d.frames[0].depth->at(3, 4), 1.5);
  EXPECT_FALSE(d.gt_mesh.has_value());
  // Bounds fall back to a box around the cameras.
  EXPECT_TRUE(d.bounds.contains(d.frames[1].pose.translation));
}

TEST(SceneIo, LoaderErrorsNameTheFile) {
  const fs::path dir = scratch("broken");
  fs::create_directories(dir / "rgb");
  std::ofstream(dir / "intrinsics.txt") << "20 20 15.5 11.5 32 24\n";
  io::write_png_rgb(dir / "rgb" / "000000.png", Image(32, 24, 3, 0.5));
  io::write_png_rgb(dir / "rgb" / "000001.png", Image(32, 24, 3, 0.5));
  auto message = [&]() -> std::string {
    try {
      data::load_dataset(dir);
    } catch (const DataError& e) {
      return e.what();
    }
    return "";
  };
  std::ofstream(dir / "poses.txt") << "0 0 0 0 0 0 0 1\n";
  EXPECT_NE(message().find("000001.png"), std::string::npos);
  std::ofstream(dir / "poses.txt") << "0 0 0 0 0 0 0 1\n1 0 0 0 0 0 0 1.01\n";
  EXPECT_NE(message().find("poses.txt"), std::string::npos);
  std::ofstream(dir / "poses.txt") << "0 0 0 0 0 0 0 1\n1 0 0 0 0 0 0 1\n";
  std::ofstream(dir / "rgb" / "000001.png") << "garbage";
  EXPECT_NE(message().find("000001.png"), std::string::npos);
  EXPECT_THROW(data::load_dataset(dir / "missing"), DataError);
}

}  // namespace
