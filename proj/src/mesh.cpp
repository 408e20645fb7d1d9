#include "facmap/mesh.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include <spdlog/spdlog.h>

#include "facmap/model.hpp"

namespace facmap::mesh {

double Mesh::area() const {
  double a = 0.0;
  for (const auto& t : triangles)
    a += 0.5 * (vertices[t[1]] - vertices[t[0]]).cross(vertices[t[2]] - vertices[t[0]]).norm();
  return a;
}

void Mesh::validate() const {
  for (const auto& t : triangles)
    for (std::uint32_t i : t)
      if (i >= vertices.size()) throw DataError("mesh: triangle index " + std::to_string(i) + " out of range");
  if (!colors.empty() && colors.size() != vertices.size()) throw DataError("mesh: color count mismatch");
}

ScalarGrid sample_grid(const std::function<double(const Vec3&)>& fn, const field::SceneBounds& bounds, double cell) {
  if (!(cell > 0.0)) throw ConfigError("sample_grid: cell size must be positive");
  ScalarGrid g;
  g.origin = bounds.min_corner();
  g.cell = cell;
  const Vec3 e = bounds.extent();
  g.nx = static_cast<std::size_t>(std::floor(e.x() / cell + 1e-9)) + 1;
  g.ny = static_cast<std::size_t>(std::floor(e.y() / cell + 1e-9)) + 1;
  g.nz = static_cast<std::size_t>(std::floor(e.z() / cell + 1e-9)) + 1;
  g.values.resize(g.nx * g.ny * g.nz);
  for (std::size_t k = 0; k < g.nz; ++k)
    for (std::size_t j = 0; j < g.ny; ++j)
      for (std::size_t i = 0; i < g.nx; ++i) g.values[(k * g.ny + j) * g.nx + i] = fn(g.point(i, j, k));
  return g;
}

namespace {

// Cube corner c sits at (c & 1, (c >> 1) & 1, (c >> 2) & 1).
Vec3 corner_pos(int c) { return Vec3(c & 1, (c >> 1) & 1, (c >> 2) & 1); }

struct Edge {
  int a, b;  // a < b, differing in one bit
  int axis;
};

struct CaseTable {
  std::array<Edge, 12> edges;
  // Triangles as edge-index triples; bit c of the case index marks corner c negative.
  std::array<std::vector<std::array<int, 3>>, 256> triangles;
};

CaseTable build_table() {
  CaseTable t;
  int n = 0;
  int edge_of[8][8];
  for (int a = 0; a < 8; ++a)
    for (int axis = 0; axis < 3; ++axis) {
      const int b = a | (1 << axis);
      if (b == a) continue;
      t.edges[n] = {a, b, axis};
      edge_of[a][b] = edge_of[b][a] = n;
      ++n;
    }

  // Corner cycles of the six faces.
  std::vector<std::array<int, 4>> faces;
  for (int axis = 0; axis < 3; ++axis) {
    const int u = 1 << ((axis + 1) % 3), v = 1 << ((axis + 2) % 3);
    for (int side = 0; side < 2; ++side) {
      const int base = side << axis;
      faces.push_back({base, base | u, base | u | v, base | v});
    }
  }

  for (int cs = 0; cs < 256; ++cs) {
    auto negative = [cs](int c) { return ((cs >> c) & 1) != 0; };
    std::array<std::vector<int>, 12> adj;
    for (const auto& f : faces) {
      std::array<int, 4> e;
      std::vector<int> cross;
      for (int k = 0; k < 4; ++k) {
        e[k] = edge_of[f[k]][f[(k + 1) % 4]];
        if (negative(f[k]) != negative(f[(k + 1) % 4])) cross.push_back(e[k]);
      }
      auto link = [&adj](int x, int y) {
        adj[x].push_back(y);
        adj[y].push_back(x);
      };
      if (cross.size() == 2) {
        link(cross[0], cross[1]);
      } else if (cross.size() == 4) {
        for (int k = 0; k < 4; ++k)
          if (!negative(f[k])) link(e[(k + 3) % 4], e[k]);
      }
    }
    std::array<bool, 12> seen{};
    for (int start = 0; start < 12; ++start) {
      if (seen[start] || adj[start].empty()) continue;
      std::vector<int> loop;
      int prev = -1, cur = start;
      while (!seen[cur]) {
        seen[cur] = true;
        loop.push_back(cur);
        const int next = adj[cur][0] != prev ? adj[cur][0] : adj[cur][1];
        prev = cur;
        cur = next;
      }
      Vec3 normal = Vec3::Zero(), toward = Vec3::Zero();
      for (std::size_t i = 0; i < loop.size(); ++i) {
        const Edge& ei = t.edges[loop[i]];
        const Edge& ej = t.edges[loop[(i + 1) % loop.size()]];
        const Vec3 p = 0.5 * (corner_pos(ei.a) + corner_pos(ei.b));
        const Vec3 q = 0.5 * (corner_pos(ej.a) + corner_pos(ej.b));
        normal += p.cross(q);
        const int pos = negative(ei.a) ? ei.b : ei.a;
        const int neg = pos == ei.a ? ei.b : ei.a;
        toward += corner_pos(pos) - corner_pos(neg);
      }
      if (normal.dot(toward) < 0.0) std::reverse(loop.begin(), loop.end());
      for (std::size_t i = 1; i + 1 < loop.size(); ++i) t.triangles[cs].push_back({loop[0], loop[i], loop[i + 1]});
    }
  }
  return t;
}

const CaseTable& table() {
  static const CaseTable t = build_table();
  return t;
}

}  // namespace

Mesh marching_cubes(const ScalarGrid& g) {
  Mesh m;
  if (g.nx < 2 || g.ny < 2 || g.nz < 2) return m;
  const CaseTable& tab = table();
  std::unordered_map<std::uint64_t, std::uint32_t> vertex_of;
  auto edge_vertex = [&](std::size_t i, std::size_t j, std::size_t k, const Edge& e) -> std::uint32_t {
    const std::size_t ia = i + (e.a & 1), ja = j + ((e.a >> 1) & 1), ka = k + ((e.a >> 2) & 1);
    const std::uint64_t key = (static_cast<std::uint64_t>((ka * g.ny + ja) * g.nx + ia) << 2) | e.axis;
    auto it = vertex_of.find(key);
    if (it != vertex_of.end()) return it->second;
    const std::size_t ib = i + (e.b & 1), jb = j + ((e.b >> 1) & 1), kb = k + ((e.b >> 2) & 1);
    const double va = g.at(ia, ja, ka), vb = g.at(ib, jb, kb);
    const double s = va == vb ? 0.5 : va / (va - vb);
    const Vec3 p = g.point(ia, ja, ka) + s * (g.point(ib, jb, kb) - g.point(ia, ja, ka));
    const auto idx = static_cast<std::uint32_t>(m.vertices.size());
    m.vertices.push_back(p);
    vertex_of.emplace(key, idx);
    return idx;
  };
  for (std::size_t k = 0; k + 1 < g.nz; ++k)
    for (std::size_t j = 0; j + 1 < g.ny; ++j)
      for (std::size_t i = 0; i + 1 < g.nx; ++i) {
        int cs = 0;
        for (int c = 0; c < 8; ++c)
          if (g.at(i + (c & 1), j + ((c >> 1) & 1), k + ((c >> 2) & 1)) < 0.0) cs |= 1 << c;
        if (cs == 0 || cs == 255) continue;
        for (const auto& tri : tab.triangles[cs]) {
          const std::array<std::uint32_t, 3> v = {edge_vertex(i, j, k, tab.edges[tri[0]]),
                                                  edge_vertex(i, j, k, tab.edges[tri[1]]),
                                                  edge_vertex(i, j, k, tab.edges[tri[2]])};
          const double area =
              0.5 * (m.vertices[v[1]] - m.vertices[v[0]]).cross(m.vertices[v[2]] - m.vertices[v[0]]).norm();
          if (area > 1e-12) m.triangles.push_back(v);
        }
      }
  return m;
}

Mesh extract_mesh(const SceneModel& model, double cell, const field::SceneBounds& bounds, bool colors) {
  const ScalarGrid g = sample_grid([&model](const Vec3& p) { return model.sdf(p); }, bounds, cell);
  Mesh m = marching_cubes(g);
  if (m.empty()) {
    spdlog::warn("extract_mesh: no zero crossing in the decoded SDF");
    return m;
  }
  if (colors) {
    m.colors.reserve(m.vertices.size());
    for (const Vec3& v : m.vertices) m.colors.push_back(model.color(v));
  }
  return m;
}

void write_ply(const std::filesystem::path& path, const Mesh& m) {
  m.validate();
  std::ofstream out(path);
  if (!out) throw DataError("cannot write mesh " + path.string());
  out << "ply\nformat ascii 1.0\n";
  out << "element vertex " << m.vertices.size() << "\n";
  out << "property float x\nproperty float y\nproperty float z\n";
  const bool colored = !m.colors.empty();
  if (colored) out << "property uchar red\nproperty uchar green\nproperty uchar blue\n";
  out << "element face " << m.triangles.size() << "\n";
  out << "property list uchar int vertex_indices\nend_header\n";
  out << std::setprecision(9);
  for (std::size_t i = 0; i < m.vertices.size(); ++i) {
    const Vec3& v = m.vertices[i];
    out << v.x() << ' ' << v.y() << ' ' << v.z();
    if (colored)
      for (int c = 0; c < 3; ++c) out << ' ' << std::lround(std::clamp(m.colors[i][c], 0.0, 1.0) * 255.0);
    out << '\n';
  }
  for (const auto& t : m.triangles) out << "3 " << t[0] << ' ' << t[1] << ' ' << t[2] << '\n';
  if (!out) throw DataError("failed writing mesh " + path.string());
}

Mesh read_ply(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open mesh " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "ply") throw DataError("not a PLY file: " + path.string());
  std::size_t nv = 0, nf = 0;
  std::vector<std::string> vprops;
  std::string element;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string tok;
    ls >> tok;
    if (tok == "format") {
      std::string fmt;
      ls >> fmt;
      if (fmt != "ascii") throw DataError("only ASCII PLY is supported: " + path.string());
    } else if (tok == "element") {
      std::size_t count;
      ls >> element >> count;
      if (element == "vertex") nv = count;
      if (element == "face") nf = count;
    } else if (tok == "property" && element == "vertex") {
      std::string type, name;
      ls >> type >> name;
      vprops.push_back(name);
    } else if (tok == "end_header") {
      break;
    }
  }
  auto find = [&vprops](const std::string& n) -> int {
    auto it = std::find(vprops.begin(), vprops.end(), n);
    return it == vprops.end() ? -1 : static_cast<int>(it - vprops.begin());
  };
  const int ix = find("x"), iy = find("y"), iz = find("z");
  const int ir = find("red"), ig = find("green"), ib = find("blue");
  if (ix < 0 || iy < 0 || iz < 0) throw DataError("PLY without x/y/z: " + path.string());
  Mesh m;
  m.vertices.reserve(nv);
  std::vector<double> row(vprops.size());
  for (std::size_t i = 0; i < nv; ++i) {
    for (double& r : row)
      if (!(in >> r)) throw DataError("truncated PLY vertex list: " + path.string());
    m.vertices.emplace_back(row[ix], row[iy], row[iz]);
    if (ir >= 0 && ig >= 0 && ib >= 0) m.colors.emplace_back(row[ir] / 255.0, row[ig] / 255.0, row[ib] / 255.0);
  }
  for (std::size_t f = 0; f < nf; ++f) {
    std::size_t k;
    if (!(in >> k)) throw DataError("truncated PLY face list: " + path.string());
    std::vector<std::uint32_t> idx(k);
    for (auto& v : idx) in >> v;
    for (std::size_t i = 1; i + 1 < k; ++i) m.triangles.push_back({idx[0], idx[i], idx[i + 1]});
  }
  if (!in && nf > 0) throw DataError("malformed PLY: " + path.string());
  m.validate();
  return m;
}

std::vector<Vec3> sample_surface(const Mesh& m, std::size_t count, std::uint64_t seed) {
  if (m.empty()) throw DataError("sample_surface: empty mesh");
  std::vector<double> cdf(m.triangles.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < m.triangles.size(); ++i) {
    const auto& t = m.triangles[i];
    acc += 0.5 * (m.vertices[t[1]] - m.vertices[t[0]]).cross(m.vertices[t[2]] - m.vertices[t[0]]).norm();
    cdf[i] = acc;
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<Vec3> out;
  out.reserve(count);
  for (std::size_t s = 0; s < count; ++s) {
    const double r = unit(rng) * acc;
    const std::size_t i =
        std::min<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), r) - cdf.begin(), cdf.size() - 1);
    const double r1 = std::sqrt(unit(rng)), r2 = unit(rng);
    const auto& t = m.triangles[i];
    out.push_back((1 - r1) * m.vertices[t[0]] + r1 * (1 - r2) * m.vertices[t[1]] + r1 * r2 * m.vertices[t[2]]);
  }
  return out;
}

KdTree::KdTree(std::vector<Vec3> points) : points_(std::move(points)) {
  if (points_.empty()) throw DataError("KdTree: no points");
  std::vector<std::uint32_t> idx(points_.size());
  std::iota(idx.begin(), idx.end(), 0u);
  nodes_.reserve(points_.size());
  root_ = build(idx, 0, idx.size(), 0);
}

std::int32_t KdTree::build(std::vector<std::uint32_t>& idx, std::size_t begin, std::size_t end, int depth) {
  if (begin >= end) return -1;
  const int axis = depth % 3;
  const std::size_t mid = begin + (end - begin) / 2;
  std::nth_element(idx.begin() + begin, idx.begin() + mid, idx.begin() + end,
                   [&](std::uint32_t a, std::uint32_t b) { return points_[a][axis] < points_[b][axis]; });
  const auto id = static_cast<std::int32_t>(nodes_.size());
  nodes_.push_back({idx[mid], -1, -1, static_cast<std::uint8_t>(axis)});
  const std::int32_t l = build(idx, begin, mid, depth + 1);
  const std::int32_t r = build(idx, mid + 1, end, depth + 1);
  nodes_[id].left = l;
  nodes_[id].right = r;
  return id;
}

void KdTree::search(std::int32_t node, const Vec3& q, double& best) const {
  if (node < 0) return;
  const Node& n = nodes_[node];
  const Vec3& p = points_[n.point];
  best = std::min(best, (p - q).squaredNorm());
  const double diff = q[n.axis] - p[n.axis];
  const std::int32_t near = diff < 0 ? n.left : n.right;
  const std::int32_t far = diff < 0 ? n.right : n.left;
  search(near, q, best);
  if (diff * diff < best) search(far, q, best);
}

double KdTree::nearest(const Vec3& q) const {
  double best = std::numeric_limits<double>::infinity();
  search(root_, q, best);
  return std::sqrt(best);
}

MeshMetrics evaluate_mesh(const Mesh& recon, const Mesh& gt, std::size_t samples, double threshold,
                          std::uint64_t seed) {
  if (recon.empty() || gt.empty()) throw DataError("evaluate_mesh: empty mesh");
  if (samples == 0) throw ConfigError("evaluate_mesh: sample count must be positive");
  const std::vector<Vec3> rs = sample_surface(recon, samples, seed);
  const std::vector<Vec3> gs = sample_surface(gt, samples, seed);
  const KdTree rtree(rs), gtree(gs);
  MeshMetrics out;
  double acc = 0.0, comp = 0.0;
  std::size_t within = 0;
  for (const Vec3& p : rs) acc += gtree.nearest(p);
  for (const Vec3& p : gs) {
    const double d = rtree.nearest(p);
    comp += d;
    within += d < threshold;
  }
  out.acc_cm = 100.0 * acc / static_cast<double>(rs.size());
  out.comp_cm = 100.0 * comp / static_cast<double>(gs.size());
  out.comp_ratio = 100.0 * static_cast<double>(within) / static_cast<double>(gs.size());
  return out;
}

}  // namespace facmap::mesh
