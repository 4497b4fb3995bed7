// SPDX-License-Identifier: Apache-2.0
#include "ctquant/geometry.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <queue>

#include "ctquant/error.hpp"

namespace ctquant {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

Point3 operator+(const Point3& a, const Point3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
Point3 operator-(const Point3& a, const Point3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
Point3 operator*(double s, const Point3& a) { return {s * a[0], s * a[1], s * a[2]}; }
double dot(const Point3& a, const Point3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
double norm(const Point3& a) { return std::sqrt(dot(a, a)); }
Point3 cross(const Point3& a, const Point3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}
Point3 normalized(const Point3& a) {
  const double n = norm(a);
  return n > 0.0 ? (1.0 / n) * a : Point3{0.0, 0.0, 0.0};
}

struct Offset {
  int dx, dy, dz;
};

std::vector<Offset> neighbour_offsets(Connectivity c) {
  std::vector<Offset> out;
  for (int dz = -1; dz <= 1; ++dz)
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        const int manhattan = std::abs(dx) + std::abs(dy) + std::abs(dz);
        if (manhattan == 0) continue;
        if (c == Connectivity::Six && manhattan != 1) continue;
        out.push_back({dx, dy, dz});
      }
  return out;
}

// Union-find with the smaller linear index as root, so roots are the first
// voxel of each component in scan order.
class DisjointSet {
 public:
  explicit DisjointSet(std::size_t n) : parent_(n) { std::iota(parent_.begin(), parent_.end(), std::size_t{0}); }
  std::size_t find(std::size_t x) {
    while (parent_[x] != x) {
      parent_[x] = parent_[parent_[x]];
      x = parent_[x];
    }
    return x;
  }
  void unite(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    if (a < b) parent_[b] = a;
    else parent_[a] = b;
  }

 private:
  std::vector<std::size_t> parent_;
};

// Squared Euclidean distance transform along one line (Felzenszwalb &
// Huttenlocher lower envelope), with physical spacing `s`.
void edt_line(const double* f, double* d, int n, double s, std::vector<int>& v, std::vector<double>& z) {
  const double s2 = s * s;
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (f[q] == kInf) continue;
    if (k < 0) {
      v[0] = q;
      z[0] = -kInf;
      z[1] = kInf;
      k = 0;
      continue;
    }
    double x;
    while (true) {
      const int p = v[k];
      x = ((f[q] + s2 * q * q) - (f[p] + s2 * p * p)) / (2.0 * s2 * (q - p));
      if (x <= z[k]) {
        --k;
        if (k < 0) break;
      } else {
        break;
      }
    }
    ++k;
    v[k] = q;
    z[k] = (k == 0) ? -kInf : x;
    z[k + 1] = kInf;
  }
  if (k < 0) {
    for (int q = 0; q < n; ++q) d[q] = kInf;
    return;
  }
  int j = 0;
  for (int q = 0; q < n; ++q) {
    while (z[j + 1] < q) ++j;
    const double diff = q - v[j];
    d[q] = s2 * diff * diff + f[v[j]];
  }
}

// Geodesic Dijkstra inside the foreground of `grid` (26-neighbourhood).
// `weight(target_index, step_length)` gives the edge cost.
std::vector<double> dijkstra(const BinaryGrid& grid, std::size_t source,
                             const std::function<double(std::size_t, double)>& weight,
                             std::vector<std::size_t>* predecessor = nullptr) {
  const auto& g = grid.geometry;
  const auto offsets = neighbour_offsets(Connectivity::TwentySix);
  std::vector<double> lengths;
  for (const auto& o : offsets) {
    lengths.push_back(std::sqrt(std::pow(o.dx * g.spacing[0], 2) + std::pow(o.dy * g.spacing[1], 2) +
                                std::pow(o.dz * g.spacing[2], 2)));
  }
  std::vector<double> dist(grid.data.size(), kInf);
  if (predecessor) predecessor->assign(grid.data.size(), SIZE_MAX);
  using Item = std::pair<double, std::size_t>;
  std::priority_queue<Item, std::vector<Item>, std::greater<>> heap;
  dist[source] = 0.0;
  heap.push({0.0, source});
  while (!heap.empty()) {
    const auto [d, idx] = heap.top();
    heap.pop();
    if (d > dist[idx]) continue;
    const auto c = g.coords(idx);
    for (std::size_t k = 0; k < offsets.size(); ++k) {
      const int x = c[0] + offsets[k].dx, y = c[1] + offsets[k].dy, z = c[2] + offsets[k].dz;
      if (!g.contains(x, y, z)) continue;
      const std::size_t n = g.index(x, y, z);
      if (!grid.data[n]) continue;
      const double nd = d + weight(n, lengths[k]);
      if (nd < dist[n]) {
        dist[n] = nd;
        if (predecessor) (*predecessor)[n] = idx;
        heap.push({nd, n});
      }
    }
  }
  return dist;
}

std::size_t argmax_finite(const std::vector<double>& values) {
  std::size_t best = 0;
  double best_value = -kInf;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (values[i] != kInf && values[i] > best_value) {
      best_value = values[i];
      best = i;
    }
  }
  return best;
}

double polyline_length(const std::vector<Point3>& pts) {
  double len = 0.0;
  for (std::size_t i = 1; i < pts.size(); ++i) len += norm(pts[i] - pts[i - 1]);
  return len;
}

std::vector<Point3> resample(const std::vector<Point3>& pts, double step) {
  if (pts.size() < 2) return pts;
  std::vector<double> cum(pts.size(), 0.0);
  for (std::size_t i = 1; i < pts.size(); ++i) cum[i] = cum[i - 1] + norm(pts[i] - pts[i - 1]);
  const double total = cum.back();
  std::vector<Point3> out;
  if (total <= 0.0) return {pts.front()};
  const auto n = static_cast<std::size_t>(std::floor(total / step + 1e-9));
  std::size_t seg = 1;
  for (std::size_t k = 0; k <= n; ++k) {
    const double s = std::min(k * step, total);
    while (seg + 1 < pts.size() && cum[seg] < s) ++seg;
    const double span = cum[seg] - cum[seg - 1];
    const double t = span > 0.0 ? (s - cum[seg - 1]) / span : 0.0;
    out.push_back(pts[seg - 1] + t * (pts[seg] - pts[seg - 1]));
  }
  if (total - n * step > 1e-9) out.push_back(pts.back());
  return out;
}

std::vector<Point3> moving_average(const std::vector<Point3>& pts, int window) {
  const int half = window / 2;
  const int n = static_cast<int>(pts.size());
  std::vector<Point3> out(pts.size());
  for (int i = 0; i < n; ++i) {
    // symmetric window truncated at the ends so endpoints stay put
    const int h = std::min({half, i, n - 1 - i});
    Point3 acc{0.0, 0.0, 0.0};
    for (int j = i - h; j <= i + h; ++j) acc = acc + pts[j];
    out[i] = (1.0 / (2 * h + 1)) * acc;
  }
  return out;
}

// Cropped copy of a single component, padded with one background voxel.
BinaryGrid crop_component(const BinaryGrid& grid, const ComponentSet& cc, int id) {
  const auto& box = cc.boxes[id - 1];
  GridGeometry local;
  local.spacing = grid.geometry.spacing;
  for (int a = 0; a < 3; ++a) {
    local.dims[a] = box.hi[a] - box.lo[a] + 3;
    local.origin[a] = grid.geometry.origin[a] + (box.lo[a] - 1) * grid.geometry.spacing[a];
  }
  BinaryGrid out(local);
  for (int z = box.lo[2]; z <= box.hi[2]; ++z)
    for (int y = box.lo[1]; y <= box.hi[1]; ++y)
      for (int x = box.lo[0]; x <= box.hi[0]; ++x) {
        if (cc.ids[grid.geometry.index(x, y, z)] == id) out.set(x - box.lo[0] + 1, y - box.lo[1] + 1, z - box.lo[2] + 1);
      }
  return out;
}

Point3 world_of(const GridGeometry& g, std::size_t idx) {
  const auto c = g.coords(idx);
  return g.position(c[0], c[1], c[2]);
}

// Walks from `from` along `dir` in small steps while still inside the
// foreground; returns the last inside position.
Point3 extend_to_boundary(const BinaryGrid& grid, const Point3& from, const Point3& dir, double limit_mm) {
  constexpr double kStep = 0.25;
  double last_inside = 0.0;
  for (double t = kStep; t <= limit_mm; t += kStep) {
    if (sample_trilinear(grid, from + t * dir) < 0.5) break;
    last_inside = t;
  }
  return from + last_inside * dir;
}

struct PlaneCentroid {
  Point3 centroid{};
  double area_mm2 = 0.0;
};

// Centroid of the inside samples on a disc of radius `radius` orthogonal to `dir`.
PlaneCentroid plane_centroid(const BinaryGrid& grid, const Point3& center, const Point3& dir, double radius) {
  constexpr double kPitch = 0.5;
  std::size_t least = 0;
  for (std::size_t a = 1; a < 3; ++a) {
    if (std::abs(dir[a]) < std::abs(dir[least])) least = a;
  }
  Point3 e{};
  e[least] = 1.0;
  const Point3 u = normalized(cross(dir, e));
  const Point3 v = cross(dir, u);
  const int half = static_cast<int>(std::ceil(radius / kPitch));
  PlaneCentroid out;
  Point3 sum{};
  std::size_t n = 0;
  for (int j = -half; j <= half; ++j) {
    for (int i = -half; i <= half; ++i) {
      const double du = i * kPitch, dv = j * kPitch;
      if (du * du + dv * dv > radius * radius) continue;
      const Point3 q = center + du * u + dv * v;
      if (sample_trilinear(grid, q) < 0.5) continue;
      sum = sum + q;
      ++n;
    }
  }
  out.area_mm2 = static_cast<double>(n) * kPitch * kPitch;
  out.centroid = n > 0 ? (1.0 / static_cast<double>(n)) * sum : center;
  return out;
}

// Moves every point onto the centroid of its cross-section, with the
// tangent taken over +-2 neighbours.
std::vector<Point3> recenter_path(const BinaryGrid& grid, const std::vector<Point3>& pts, double radius) {
  std::vector<Point3> out = pts;
  if (pts.size() < 3) return out;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const std::size_t lo = i >= 2 ? i - 2 : 0;
    const std::size_t hi = std::min(pts.size() - 1, i + 2);
    const PlaneCentroid pc = plane_centroid(grid, pts[i], normalized(pts[hi] - pts[lo]), radius);
    if (pc.area_mm2 > 0.0) out[i] = pc.centroid;
  }
  return out;
}

// Marches from the end of `pts` in 1 mm steps, recentring each step on the
// local cross-section, until the section shrinks below half its starting
// area; the last partial step runs straight to the boundary.
void march_end(const BinaryGrid& grid, std::vector<Point3>& pts, double radius, double limit_mm,
               std::size_t baseline) {
  const std::size_t back = std::min(baseline, pts.size() - 1);
  Point3 dir = normalized(pts.back() - pts[pts.size() - 1 - back]);
  const double start_area = plane_centroid(grid, pts.back(), dir, radius).area_mm2;
  if (start_area <= 0.0) return;
  for (double walked = 0.0; walked < limit_mm; walked += 1.0) {
    const Point3 probe = pts.back() + dir;
    const PlaneCentroid pc = plane_centroid(grid, probe, dir, radius);
    if (pc.area_mm2 < 0.5 * start_area) break;
    const Point3 step = pc.centroid - pts.back();
    if (norm(step) < 0.25 || dot(normalized(step), dir) < 0.5) break;
    pts.push_back(pc.centroid);
    const std::size_t span = std::min(baseline, pts.size() - 1);
    dir = normalized(pts.back() - pts[pts.size() - 1 - span]);
  }
  const Point3 tail = extend_to_boundary(grid, pts.back(), dir, limit_mm);
  if (norm(tail - pts.back()) > 0.0) pts.push_back(tail);
}

}  // namespace

BinaryGrid BinaryGrid::from_mask(const LabelMask& mask, std::span<const std::uint8_t> selected) {
  BinaryGrid out(mask.geometry);
  std::array<bool, 256> pick{};
  for (auto l : selected) pick[l] = true;
  for (std::size_t i = 0; i < mask.labels.size(); ++i) out.data[i] = pick[mask.labels[i]] ? 1 : 0;
  return out;
}

std::size_t BinaryGrid::count() const {
  return static_cast<std::size_t>(std::count_if(data.begin(), data.end(), [](std::uint8_t v) { return v != 0; }));
}

ComponentSet connected_components(const BinaryGrid& grid, Connectivity connectivity) {
  const auto& g = grid.geometry;
  std::vector<Offset> backward;
  for (const auto& o : neighbour_offsets(connectivity)) {
    if (o.dz < 0 || (o.dz == 0 && o.dy < 0) || (o.dz == 0 && o.dy == 0 && o.dx < 0)) backward.push_back(o);
  }
  DisjointSet sets(grid.data.size());
  for (int z = 0; z < g.dims[2]; ++z)
    for (int y = 0; y < g.dims[1]; ++y)
      for (int x = 0; x < g.dims[0]; ++x) {
        const std::size_t i = g.index(x, y, z);
        if (!grid.data[i]) continue;
        for (const auto& o : backward) {
          const int nx = x + o.dx, ny = y + o.dy, nz = z + o.dz;
          if (g.contains(nx, ny, nz) && grid.data[g.index(nx, ny, nz)]) sets.unite(i, g.index(nx, ny, nz));
        }
      }

  ComponentSet out;
  out.connectivity = connectivity;
  out.ids.assign(grid.data.size(), 0);
  std::vector<std::int32_t> id_of_root(grid.data.size(), 0);
  for (std::size_t i = 0; i < grid.data.size(); ++i) {
    if (!grid.data[i]) continue;
    const std::size_t root = sets.find(i);
    std::int32_t& id = id_of_root[root];
    const auto c = g.coords(i);
    if (id == 0) {
      out.voxel_counts.push_back(0);
      out.boxes.push_back({c, c});
      id = static_cast<std::int32_t>(out.voxel_counts.size());
    }
    out.ids[i] = id;
    ++out.voxel_counts[id - 1];
    auto& box = out.boxes[id - 1];
    for (int a = 0; a < 3; ++a) {
      box.lo[a] = std::min(box.lo[a], c[a]);
      box.hi[a] = std::max(box.hi[a], c[a]);
    }
  }
  return out;
}

std::vector<double> distance_transform_mm(const BinaryGrid& grid) {
  const auto& g = grid.geometry;
  // pad by one background voxel so the grid border acts as background
  const int nx = g.dims[0] + 2, ny = g.dims[1] + 2, nz = g.dims[2] + 2;
  auto pid = [&](int x, int y, int z) {
    return static_cast<std::size_t>(x) + static_cast<std::size_t>(nx) * (y + static_cast<std::size_t>(ny) * z);
  };
  std::vector<double> f(static_cast<std::size_t>(nx) * ny * nz, 0.0);
  for (int z = 0; z < g.dims[2]; ++z)
    for (int y = 0; y < g.dims[1]; ++y)
      for (int x = 0; x < g.dims[0]; ++x)
        if (grid.at(x, y, z)) f[pid(x + 1, y + 1, z + 1)] = kInf;

  const int longest = std::max({nx, ny, nz});
  std::vector<double> in(longest), out(longest), zbuf(longest + 1);
  std::vector<int> v(longest);
  auto pass = [&](int n, double s, auto&& index_of, int outer_a, int outer_b) {
    for (int b = 0; b < outer_b; ++b)
      for (int a = 0; a < outer_a; ++a) {
        for (int i = 0; i < n; ++i) in[i] = f[index_of(i, a, b)];
        edt_line(in.data(), out.data(), n, s, v, zbuf);
        for (int i = 0; i < n; ++i) f[index_of(i, a, b)] = out[i];
      }
  };
  pass(nx, g.spacing[0], [&](int i, int a, int b) { return pid(i, a, b); }, ny, nz);
  pass(ny, g.spacing[1], [&](int i, int a, int b) { return pid(a, i, b); }, nx, nz);
  pass(nz, g.spacing[2], [&](int i, int a, int b) { return pid(a, b, i); }, nx, ny);

  std::vector<double> dist(grid.data.size(), 0.0);
  for (int z = 0; z < g.dims[2]; ++z)
    for (int y = 0; y < g.dims[1]; ++y)
      for (int x = 0; x < g.dims[0]; ++x) dist[g.index(x, y, z)] = std::sqrt(f[pid(x + 1, y + 1, z + 1)]);
  return dist;
}

double sample_trilinear(const BinaryGrid& grid, const Point3& world) {
  const auto& g = grid.geometry;
  std::array<int, 3> base{};
  std::array<double, 3> frac{};
  for (int a = 0; a < 3; ++a) {
    const double c = (world[a] - g.origin[a]) / g.spacing[a];
    const double fl = std::floor(c);
    if (fl < -1.0 || fl > g.dims[a]) return 0.0;
    base[a] = static_cast<int>(fl);
    frac[a] = c - fl;
  }
  double acc = 0.0;
  for (int corner = 0; corner < 8; ++corner) {
    const int x = base[0] + (corner & 1), y = base[1] + ((corner >> 1) & 1), z = base[2] + ((corner >> 2) & 1);
    if (!g.contains(x, y, z) || !grid.at(x, y, z)) continue;
    const double w = ((corner & 1) ? frac[0] : 1.0 - frac[0]) * (((corner >> 1) & 1) ? frac[1] : 1.0 - frac[1]) *
                     (((corner >> 2) & 1) ? frac[2] : 1.0 - frac[2]);
    acc += w;
  }
  return acc;
}

double Centerline::chord_mm() const { return points.empty() ? 0.0 : norm(end() - start()); }

Point3 Centerline::point_at(double s) const {
  if (points.size() == 1) return points.front();
  s = std::clamp(s, 0.0, arc_length_mm);
  double acc = 0.0;
  for (std::size_t i = 1; i < points.size(); ++i) {
    const double seg = norm(points[i] - points[i - 1]);
    if (acc + seg >= s || i + 1 == points.size()) {
      const double t = seg > 0.0 ? std::clamp((s - acc) / seg, 0.0, 1.0) : 0.0;
      return points[i - 1] + t * (points[i] - points[i - 1]);
    }
    acc += seg;
  }
  return points.back();
}

Centerline extract_centerline(const BinaryGrid& grid, const CenterlineOptions& options) {
  const std::size_t total = grid.count();
  if (total == 0) throw Error(ErrorCode::EmptyMask, "centerline requires a non-empty mask");

  const ComponentSet cc = connected_components(grid, Connectivity::TwentySix);
  int largest = 1;
  int significant = 0;
  for (int id = 1; id <= cc.count(); ++id) {
    if (cc.voxel_counts[id - 1] > cc.voxel_counts[largest - 1]) largest = id;
    if (static_cast<double>(cc.voxel_counts[id - 1]) > 0.05 * static_cast<double>(total)) ++significant;
  }
  if (significant > 1) {
    throw Error(ErrorCode::MultipleComponents, std::to_string(significant) + " components above 5% of the foreground");
  }
  if (cc.voxel_counts[largest - 1] < 50) {
    throw Error(ErrorCode::DegenerateShape, "tube component has fewer than 50 voxels");
  }

  const BinaryGrid local = crop_component(grid, cc, largest);
  const auto& lg = local.geometry;
  const std::vector<double> depth = distance_transform_mm(local);
  const double min_spacing = std::min({lg.spacing[0], lg.spacing[1], lg.spacing[2]});
  const std::size_t deepest = argmax_finite(depth);
  const double max_depth = depth[deepest];
  if (max_depth < 1.5 * min_spacing) {
    throw Error(ErrorCode::DegenerateShape, "no voxel lies deeper than one voxel inside the mask");
  }

  // geodesically most distant pair by double sweep
  auto plain = [](std::size_t, double len) { return len; };
  const std::size_t a = argmax_finite(dijkstra(local, deepest, plain));
  const std::size_t b = argmax_finite(dijkstra(local, a, plain));

  // ridge path: stepping near the boundary is expensive
  std::vector<std::size_t> pred;
  auto ridge = [&](std::size_t target, double len) {
    const double r = max_depth / depth[target];
    return len * r * r;
  };
  dijkstra(local, a, ridge, &pred);
  std::vector<Point3> pts;
  for (std::size_t cur = b; cur != SIZE_MAX; cur = pred[cur]) {
    pts.push_back(world_of(lg, cur));
    if (cur == a) break;
  }
  std::reverse(pts.begin(), pts.end());

  pts = resample(pts, options.resample_step_mm);
  for (int pass = 0; pass < options.smoothing_passes; ++pass) pts = moving_average(pts, options.smoothing_window);

  // trim the shallow ends (where the path runs off the ridge to the rim) ...
  if (pts.size() >= 3) {
    std::vector<double> path_depth;
    for (const auto& p : pts) {
      std::array<int, 3> c{};
      for (int k = 0; k < 3; ++k) {
        c[k] = std::clamp(static_cast<int>(std::lround((p[k] - lg.origin[k]) / lg.spacing[k])), 0, lg.dims[k] - 1);
      }
      path_depth.push_back(depth[lg.index(c[0], c[1], c[2])]);
    }
    std::vector<double> sorted = path_depth;
    std::nth_element(sorted.begin(), sorted.begin() + sorted.size() / 2, sorted.end());
    const double cutoff = options.end_trim_fraction * sorted[sorted.size() / 2];
    std::size_t first = 0, last = pts.size() - 1;
    while (first < last && path_depth[first] < cutoff) ++first;
    while (last > first && path_depth[last] < cutoff) --last;
    if (last - first >= 2) pts = std::vector<Point3>(pts.begin() + first, pts.begin() + last + 1);
  }

  // ... recentre, and re-extend each end along the tube to the mask boundary
  if (pts.size() >= 2) {
    const double limit = 4.0 * max_depth + 10.0;
    const double radius = 1.5 * max_depth + 2.0;
    for (int pass = 0; pass < 2; ++pass) {
      pts = moving_average(recenter_path(local, pts, radius), options.smoothing_window);
    }
    const auto baseline = static_cast<std::size_t>(std::max(4.0, std::round(max_depth / options.resample_step_mm)));
    march_end(local, pts, radius, limit, baseline);
    std::reverse(pts.begin(), pts.end());
    march_end(local, pts, radius, limit, baseline);
    std::reverse(pts.begin(), pts.end());
  }

  Centerline out;
  out.points = resample(pts, options.resample_step_mm);
  out.arc_length_mm = polyline_length(out.points);
  return out;
}

std::vector<CrossSection> cross_sections(const BinaryGrid& grid, const Centerline& centerline, double interval_mm,
                                         const CrossSectionOptions& options) {
  if (!(interval_mm > 0.0)) throw Error(ErrorCode::InvalidArgument, "interval must be positive");
  if (centerline.points.empty()) throw Error(ErrorCode::EmptyMask, "empty centerline");
  const auto count = static_cast<std::size_t>(std::floor(centerline.arc_length_mm / interval_mm + 1e-9)) + 1;
  const int half = static_cast<int>(std::lround(options.window_mm / (2.0 * options.pitch_mm)));
  const int side = 2 * half + 1;

  std::vector<CrossSection> out;
  out.reserve(count);
  std::vector<int> stack;
  std::vector<std::uint8_t> component(static_cast<std::size_t>(side) * side);
  for (std::size_t k = 0; k < count; ++k) {
    const double s = std::min(k * interval_mm, centerline.arc_length_mm);
    CrossSection cs;
    cs.center = centerline.point_at(s);
    Point3 t = centerline.point_at(s + options.tangent_half_span_mm) - centerline.point_at(s - options.tangent_half_span_mm);
    if (norm(t) == 0.0 && centerline.points.size() >= 2) t = centerline.end() - centerline.start();
    if (norm(t) == 0.0) t = {0.0, 0.0, 1.0};
    cs.tangent = normalized(t);
    cs.samples_per_side = side;
    cs.pitch_mm = options.pitch_mm;

    // in-plane basis from the axis least aligned with the tangent
    int least = 0;
    for (int a = 1; a < 3; ++a)
      if (std::abs(cs.tangent[a]) < std::abs(cs.tangent[least])) least = a;
    Point3 e{0.0, 0.0, 0.0};
    e[least] = 1.0;
    const Point3 u = normalized(cross(cs.tangent, e));
    const Point3 v = cross(cs.tangent, u);

    cs.samples.assign(static_cast<std::size_t>(side) * side, 0);
    for (int j = 0; j < side; ++j)
      for (int i = 0; i < side; ++i) {
        const Point3 p = cs.center + ((i - half) * options.pitch_mm) * u + ((j - half) * options.pitch_mm) * v;
        cs.samples[static_cast<std::size_t>(j) * side + i] = sample_trilinear(grid, p) >= 0.5 ? 1 : 0;
      }

    // component (8-connected) containing the centre sample, or the nearest
    // inside sample within 2 mm
    int seed = -1;
    const int search = static_cast<int>(std::ceil(2.0 / options.pitch_mm));
    double seed_d2 = kInf;
    for (int dj = -search; dj <= search; ++dj)
      for (int di = -search; di <= search; ++di) {
        const int idx = (half + dj) * side + (half + di);
        const double d2 = di * di + dj * dj;
        if (cs.samples[idx] && d2 < seed_d2 && d2 <= search * search) {
          seed_d2 = d2;
          seed = idx;
        }
      }
    std::fill(component.begin(), component.end(), 0);
    if (seed >= 0) {
      stack.assign(1, seed);
      component[seed] = 1;
      while (!stack.empty()) {
        const int cur = stack.back();
        stack.pop_back();
        const int ci = cur % side, cj = cur / side;
        for (int dj = -1; dj <= 1; ++dj)
          for (int di = -1; di <= 1; ++di) {
            const int ni = ci + di, nj = cj + dj;
            if (ni < 0 || nj < 0 || ni >= side || nj >= side) continue;
            const int n = nj * side + ni;
            if (cs.samples[n] && !component[n]) {
              component[n] = 1;
              stack.push_back(n);
            }
          }
      }
      std::vector<Point2> boundary;
      for (int j = 0; j < side; ++j)
        for (int i = 0; i < side; ++i) {
          if (!component[j * side + i]) continue;
          const bool edge = i == 0 || j == 0 || i == side - 1 || j == side - 1 || !component[j * side + i - 1] ||
                            !component[j * side + i + 1] || !component[(j - 1) * side + i] ||
                            !component[(j + 1) * side + i];
          if (edge) boundary.push_back({i * options.pitch_mm, j * options.pitch_mm});
        }
      double best = 0.0;
      for (std::size_t p = 0; p < boundary.size(); ++p)
        for (std::size_t q = p + 1; q < boundary.size(); ++q) {
          const double dx = boundary[p].x - boundary[q].x, dy = boundary[p].y - boundary[q].y;
          best = std::max(best, dx * dx + dy * dy);
        }
      cs.max_diameter_mm = std::sqrt(best);
    }
    out.push_back(std::move(cs));
  }
  return out;
}

EllipseFit fit_ellipse(std::span<const Point2> points) {
  if (points.size() < 6) throw Error(ErrorCode::TooFewPoints, "ellipse fit needs at least 6 points");

  // condition the problem: centre on the mean, scale to unit RMS radius
  double mx = 0.0, my = 0.0;
  for (const auto& p : points) {
    mx += p.x;
    my += p.y;
  }
  mx /= static_cast<double>(points.size());
  my /= static_cast<double>(points.size());
  double rms = 0.0;
  for (const auto& p : points) rms += (p.x - mx) * (p.x - mx) + (p.y - my) * (p.y - my);
  rms = std::sqrt(rms / static_cast<double>(points.size()));
  if (!(rms > 0.0)) throw Error(ErrorCode::DegenerateConic, "all points coincide");

  const auto n = static_cast<Eigen::Index>(points.size());
  Eigen::MatrixXd quad(n, 3), lin(n, 3);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double x = (points[i].x - mx) / rms, y = (points[i].y - my) / rms;
    quad.row(i) << x * x, x * y, y * y;
    lin.row(i) << x, y, 1.0;
  }
  // Halir & Flusser reduction of Fitzgibbon's constrained problem
  const Eigen::Matrix3d s1 = quad.transpose() * quad;
  const Eigen::Matrix3d s2 = quad.transpose() * lin;
  const Eigen::Matrix3d s3 = lin.transpose() * lin;
  Eigen::FullPivLU<Eigen::Matrix3d> s3_lu(s3);
  if (!s3_lu.isInvertible()) throw Error(ErrorCode::DegenerateConic, "points are collinear");
  const Eigen::Matrix3d t = -s3_lu.solve(s2.transpose());
  const Eigen::Matrix3d m = s1 + s2 * t;
  Eigen::Matrix3d reduced;
  reduced.row(0) = m.row(2) / 2.0;
  reduced.row(1) = -m.row(1);
  reduced.row(2) = m.row(0) / 2.0;

  Eigen::EigenSolver<Eigen::Matrix3d> es(reduced);
  int pick = -1;
  double best_cond = 0.0;
  for (int k = 0; k < 3; ++k) {
    const Eigen::Vector3d v = es.eigenvectors().col(k).real();
    const double cond = 4.0 * v(0) * v(2) - v(1) * v(1);
    if (cond > best_cond && std::abs(es.eigenvalues()(k).imag()) < 1e-12 * (1.0 + std::abs(es.eigenvalues()(k).real()))) {
      best_cond = cond;
      pick = k;
    }
  }
  if (pick < 0) throw Error(ErrorCode::DegenerateConic, "no ellipse-constrained solution");
  const Eigen::Vector3d a1 = es.eigenvectors().col(pick).real();
  const Eigen::Vector3d a2 = t * a1;
  const double A = a1(0), B = a1(1), C = a1(2), D = a2(0), E = a2(1), F = a2(2);

  const double det = 4.0 * A * C - B * B;
  if (!(det > 0.0)) throw Error(ErrorCode::DegenerateConic, "fitted conic is not an ellipse");
  const double cx = (B * E - 2.0 * C * D) / det;
  const double cy = (B * D - 2.0 * A * E) / det;
  const double f0 = A * cx * cx + B * cx * cy + C * cy * cy + D * cx + E * cy + F;

  Eigen::Matrix2d q;
  q << A, B / 2.0, B / 2.0, C;
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> qs(q);
  const double l0 = qs.eigenvalues()(0), l1 = qs.eigenvalues()(1);  // ascending
  const double r0 = -f0 / l0, r1 = -f0 / l1;
  if (!(r0 > 0.0) || !(r1 > 0.0) || !std::isfinite(r0) || !std::isfinite(r1)) {
    throw Error(ErrorCode::DegenerateConic, "imaginary ellipse");
  }
  // when f0 < 0 the smaller eigenvalue gives the longer axis
  double semi0 = std::sqrt(r0), semi1 = std::sqrt(r1);
  Eigen::Vector2d major_dir = qs.eigenvectors().col(0);
  if (semi1 > semi0) {
    std::swap(semi0, semi1);
    major_dir = qs.eigenvectors().col(1);
  }
  EllipseFit fit;
  fit.center = {mx + rms * cx, my + rms * cy};
  fit.semi_major_mm = rms * semi0;
  fit.semi_minor_mm = rms * semi1;
  double angle = std::atan2(major_dir(1), major_dir(0));
  if (angle <= -M_PI / 2) angle += M_PI;
  if (angle > M_PI / 2) angle -= M_PI;
  fit.angle_rad = angle;
  return fit;
}

double axial_extent_mm(const LabelMask& mask, std::span<const std::uint8_t> selected, Axis axis,
                       std::optional<int> z_slice) {
  std::array<bool, 256> pick{};
  for (auto l : selected) pick[l] = true;
  const auto& g = mask.geometry;
  const int a = static_cast<int>(axis);
  int lo = std::numeric_limits<int>::max(), hi = std::numeric_limits<int>::min();
  const int z0 = z_slice ? *z_slice : 0;
  const int z1 = z_slice ? *z_slice + 1 : g.dims[2];
  if (z_slice && (*z_slice < 0 || *z_slice >= g.dims[2])) return 0.0;
  for (int z = z0; z < z1; ++z)
    for (int y = 0; y < g.dims[1]; ++y)
      for (int x = 0; x < g.dims[0]; ++x) {
        if (!pick[mask.at(x, y, z)]) continue;
        const int c = a == 0 ? x : (a == 1 ? y : z);
        lo = std::min(lo, c);
        hi = std::max(hi, c);
      }
  if (lo > hi) return 0.0;
  return (hi - lo + 1) * g.spacing[a];
}

}  // namespace ctquant
