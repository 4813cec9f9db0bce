// Computational domains: balls, axis-aligned boxes, and bounded convex
// polytopes given by halfspaces a.x <= b. All queries are pure functions of
// immutable state and safe to call concurrently.
#pragma once

#include <cstdint>
#include <optional>
#include <utility>

#include "stablepot/common.hpp"

namespace stablepot {

struct BallSpec {
  Point center;
  double radius = 0.0;

  BallSpec() = default;
  BallSpec(Point c, double r) : center(std::move(c)), radius(r) {
    if (!(radius > 0.0)) throw ValidationError("BallSpec: radius must be > 0");
  }
  int dim() const { return static_cast<int>(center.size()); }
};

struct Halfspace {
  Point a;   // outward normal direction (not necessarily unit)
  double b;  // interior is a.x < b
};

// Boundary mesh: nodes on the boundary with per-node surface patch weights.
struct BoundaryMesh {
  std::vector<Point> nodes;
  std::vector<double> patch_areas;

  double total_area() const {
    double s = 0.0;
    for (double a : patch_areas) s += a;
    return s;
  }
};

// Discrete measure on the boundary: nonnegative weights on mesh nodes.
struct DiscreteBoundaryMeasure {
  BoundaryMesh mesh;
  std::vector<double> weights;

  void validate() const {
    if (weights.size() != mesh.nodes.size())
      throw ValidationError("DiscreteBoundaryMeasure: size mismatch");
    double mass = 0.0;
    for (double w : weights) {
      if (w < 0.0)
        throw ValidationError(
            "DiscreteBoundaryMeasure: weights must be nonnegative");
      mass += w;
    }
    if (!(mass > 0.0) || !std::isfinite(mass))
      throw ValidationError(
          "DiscreteBoundaryMeasure: total mass must be positive and finite");
  }

  double total_mass() const {
    double s = 0.0;
    for (double w : weights) s += w;
    return s;
  }
};

enum class Shape { Ball, Box, Polytope };

class Domain {
 public:
  static Domain ball(Point center, double radius) {
    Domain d;
    d.shape_ = Shape::Ball;
    d.ball_ = BallSpec(std::move(center), radius);
    d.n_ = d.ball_.dim();
    return d;
  }

  static Domain box(Point lo, Point hi) {
    if (lo.size() != hi.size() || lo.empty())
      throw ValidationError("Domain::box: corner dimension mismatch");
    for (std::size_t i = 0; i < lo.size(); ++i)
      if (!(lo[i] < hi[i]))
        throw ValidationError("Domain::box: min corner must be below max");
    Domain d;
    d.shape_ = Shape::Box;
    d.lo_ = std::move(lo);
    d.hi_ = std::move(hi);
    d.n_ = static_cast<int>(d.lo_.size());
    return d;
  }

  static Domain polytope(std::vector<Halfspace> faces) {
    if (faces.empty())
      throw ValidationError("Domain::polytope: needs at least one halfspace");
    Domain d;
    d.shape_ = Shape::Polytope;
    d.n_ = static_cast<int>(faces[0].a.size());
    for (auto& f : faces) {
      check_dim(f.a, d.n_, "Domain::polytope");
      const double m = norm(f.a);
      if (!(m > 0.0))
        throw ValidationError("Domain::polytope: zero normal vector");
      // store unit normals so plane distances are direct
      for (auto& c : f.a) c /= m;
      f.b /= m;
    }
    d.faces_ = std::move(faces);
    d.init_polytope();
    return d;
  }

  Shape shape() const { return shape_; }
  int dim() const { return n_; }
  const BallSpec& as_ball() const { return ball_; }
  const Point& box_lo() const { return lo_; }
  const Point& box_hi() const { return hi_; }
  const std::vector<Halfspace>& faces() const { return faces_; }

  // Optional Lipschitz characteristic constants (r0, A0); metadata only.
  void set_lipschitz_constants(double r0, double a0) {
    lipschitz_ = {r0, a0};
  }
  std::optional<std::pair<double, double>> lipschitz_constants() const {
    return lipschitz_;
  }

  // True iff p lies in the open interior.
  bool contains(const Point& p) const {
    check_dim(p, n_, "Domain::contains");
    return dist_to_boundary(p) > 0.0;
  }

  // Signed Euclidean distance to the boundary: positive inside, negative
  // outside, zero on the boundary. Exact for Ball and Box; exact inside a
  // Polytope, and computed by projection (Dykstra) outside one.
  double dist_to_boundary(const Point& p) const {
    check_dim(p, n_, "Domain::dist_to_boundary");
    switch (shape_) {
      case Shape::Ball:
        return ball_.radius - dist(p, ball_.center);
      case Shape::Box: {
        double inside = std::numeric_limits<double>::infinity();
        double out2 = 0.0;
        bool outside = false;
        for (int i = 0; i < n_; ++i) {
          if (p[i] < lo_[i]) {
            outside = true;
            out2 += (lo_[i] - p[i]) * (lo_[i] - p[i]);
          } else if (p[i] > hi_[i]) {
            outside = true;
            out2 += (p[i] - hi_[i]) * (p[i] - hi_[i]);
          } else {
            inside = std::min(inside, std::min(p[i] - lo_[i], hi_[i] - p[i]));
          }
        }
        if (outside) return -std::sqrt(out2);
        return inside;
      }
      case Shape::Polytope: {
        double worst = std::numeric_limits<double>::infinity();
        bool inside = true;
        for (const auto& f : faces_) {
          const double s = f.b - dot(f.a, p);  // >= 0 inside
          worst = std::min(worst, s);
          if (s < 0.0) inside = false;
        }
        if (inside) return worst;
        return -dist(p, project_into_polytope(p));
      }
    }
    return 0.0;
  }

  // Largest ball centered at p scaled by `shrink` that stays inside D.
  BallSpec inscribed_ball(const Point& p, double shrink) const {
    if (!(shrink > 0.0 && shrink <= 1.0))
      throw ValidationError("inscribed_ball: shrink must be in (0,1]");
    const double d = dist_to_boundary(p);
    if (!(d > 0.0))
      throw ValidationError("inscribed_ball: point is not interior");
    return BallSpec(p, shrink * d);
  }

  // Deepest interior point (center of the largest inscribed ball).
  Point deepest_point() const {
    switch (shape_) {
      case Shape::Ball:
        return ball_.center;
      case Shape::Box: {
        Point c(n_);
        for (int i = 0; i < n_; ++i) c[i] = 0.5 * (lo_[i] + hi_[i]);
        return c;
      }
      case Shape::Polytope:
        return cheb_center_;
    }
    return {};
  }

  double inradius() const { return dist_to_boundary(deepest_point()); }

  // Upper bound on the diameter (exact for Ball and Box).
  double diameter() const {
    switch (shape_) {
      case Shape::Ball:
        return 2.0 * ball_.radius;
      case Shape::Box:
        return dist(lo_, hi_);
      case Shape::Polytope:
        return 2.0 * bound_radius_;
    }
    return 0.0;
  }

  // Exit parameter sup{t > 0 : p + t u in D} for interior p and unit u.
  // Domains here are convex, so the ray meets the boundary exactly once.
  double ray_exit(const Point& p, const Point& u) const {
    switch (shape_) {
      case Shape::Ball: {
        // |p - c + t u|^2 = r^2
        double b = 0.0, c2 = -ball_.radius * ball_.radius;
        for (int i = 0; i < n_; ++i) {
          const double d = p[i] - ball_.center[i];
          b += d * u[i];
          c2 += d * d;
        }
        const double disc = b * b - c2;
        if (disc <= 0.0) return 0.0;
        return -b + std::sqrt(disc);
      }
      case Shape::Box: {
        double t = std::numeric_limits<double>::infinity();
        for (int i = 0; i < n_; ++i) {
          if (u[i] > 0.0)
            t = std::min(t, (hi_[i] - p[i]) / u[i]);
          else if (u[i] < 0.0)
            t = std::min(t, (lo_[i] - p[i]) / u[i]);
        }
        return t;
      }
      case Shape::Polytope: {
        double t = std::numeric_limits<double>::infinity();
        for (const auto& f : faces_) {
          const double du = dot(f.a, u);
          if (du > 0.0) t = std::min(t, (f.b - dot(f.a, p)) / du);
        }
        return t;
      }
    }
    return 0.0;
  }

  // Inward unit direction at a boundary point. At box/polytope edges the
  // adjacent inward face normals are averaged, which stays inside the
  // corkscrew cone for convex domains.
  Point inward_direction(const Point& z) const {
    switch (shape_) {
      case Shape::Ball: {
        Point u = sub(ball_.center, z);
        normalize(u);
        return u;
      }
      case Shape::Box: {
        Point u(n_, 0.0);
        const double tol = 1e-9 * std::max(1.0, diameter());
        for (int i = 0; i < n_; ++i) {
          if (std::abs(z[i] - lo_[i]) <= tol) u[i] += 1.0;
          if (std::abs(z[i] - hi_[i]) <= tol) u[i] -= 1.0;
        }
        if (norm(u) == 0.0)
          throw ValidationError("inward_direction: point is not on a face");
        normalize(u);
        return u;
      }
      case Shape::Polytope: {
        Point u(n_, 0.0);
        const double tol = 1e-9 * std::max(1.0, diameter());
        bool any = false;
        for (const auto& f : faces_) {
          if (std::abs(dot(f.a, z) - f.b) <= tol) {
            for (int i = 0; i < n_; ++i) u[i] -= f.a[i];
            any = true;
          }
        }
        if (!any)
          throw ValidationError("inward_direction: point is not on a face");
        normalize(u);
        return u;
      }
    }
    return {};
  }

  // Dyadic approach sequence y_k = z + t0 2^{-k} u toward boundary point z.
  std::vector<Point> approach_sequence(const Point& z, double t0,
                                       int count) const {
    check_dim(z, n_, "approach_sequence");
    const double tol = 1e-7 * std::max(1.0, diameter());
    if (std::abs(dist_to_boundary(z)) > tol)
      throw ValidationError("approach_sequence: z is not on the boundary");
    if (!(t0 > 0.0 && t0 < inradius()))
      throw ValidationError("approach_sequence: t0 must be in (0, inradius)");
    const Point u = inward_direction(z);
    std::vector<Point> pts;
    pts.reserve(count);
    double t = t0;
    Point y;
    for (int k = 0; k < count; ++k, t *= 0.5) {
      axpy(y, z, t, u);
      if (!contains(y))
        throw NumericError(
            "approach_sequence: point escaped the domain (degenerate corner); "
            "shrink t0");
      pts.push_back(y);
    }
    return pts;
  }

  BoundaryMesh boundary_mesh(int resolution) const;

  // Stable content hash for cache keys.
  std::uint64_t hash() const {
    std::uint64_t h = 0x9E3779B97F4A7C15ULL * (static_cast<int>(shape_) + 1);
    auto mix = [&h](double v) {
      std::uint64_t bits;
      static_assert(sizeof(bits) == sizeof(v));
      __builtin_memcpy(&bits, &v, sizeof(bits));
      h ^= bits + 0x9E3779B97F4A7C15ULL + (h << 6) + (h >> 2);
    };
    switch (shape_) {
      case Shape::Ball:
        for (double c : ball_.center) mix(c);
        mix(ball_.radius);
        break;
      case Shape::Box:
        for (double c : lo_) mix(c);
        for (double c : hi_) mix(c);
        break;
      case Shape::Polytope:
        for (const auto& f : faces_) {
          for (double c : f.a) mix(c);
          mix(f.b);
        }
        break;
    }
    return h;
  }

 private:
  Domain() = default;

  void init_polytope() {
    // Chebyshev center by projected subgradient ascent on
    // x -> min_i (b_i - a_i . x); adequate for the diagnostics that use it.
    Point x(n_, 0.0);
    // start from the average of face projections of the origin
    double step = 1.0;
    for (int it = 0; it < 4000; ++it) {
      int worst = 0;
      double s = std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < faces_.size(); ++i) {
        const double si = faces_[i].b - dot(faces_[i].a, x);
        if (si < s) {
          s = si;
          worst = static_cast<int>(i);
        }
      }
      for (int i = 0; i < n_; ++i) x[i] -= step * faces_[worst].a[i];
      step *= 0.999;
    }
    cheb_center_ = x;
    double s = std::numeric_limits<double>::infinity();
    for (const auto& f : faces_) s = std::min(s, f.b - dot(f.a, x));
    if (!(s > 0.0))
      throw ValidationError("Domain::polytope: empty or unbounded interior");
    // crude circumradius bound: max ray exit over coordinate directions
    double r = 0.0;
    Point u(n_, 0.0);
    for (int i = 0; i < n_; ++i) {
      u.assign(n_, 0.0);
      u[i] = 1.0;
      double t = ray_exit_from(cheb_center_, u);
      if (!std::isfinite(t))
        throw ValidationError("Domain::polytope: unbounded direction");
      r = std::max(r, t);
      u[i] = -1.0;
      t = ray_exit_from(cheb_center_, u);
      if (!std::isfinite(t))
        throw ValidationError("Domain::polytope: unbounded direction");
      r = std::max(r, t);
    }
    bound_radius_ = 2.0 * r;
  }

  double ray_exit_from(const Point& p, const Point& u) const {
    double t = std::numeric_limits<double>::infinity();
    for (const auto& f : faces_) {
      const double du = dot(f.a, u);
      if (du > 0.0) t = std::min(t, (f.b - dot(f.a, p)) / du);
    }
    return t;
  }

  // Dykstra alternating projections onto the halfspaces; converges to the
  // Euclidean projection onto their intersection.
  Point project_into_polytope(const Point& p) const {
    Point x = p;
    const std::size_t m = faces_.size();
    std::vector<Point> corr(m, Point(n_, 0.0));
    for (int sweep = 0; sweep < 300; ++sweep) {
      double moved = 0.0;
      for (std::size_t i = 0; i < m; ++i) {
        Point y(n_);
        for (int j = 0; j < n_; ++j) y[j] = x[j] + corr[i][j];
        const double viol = dot(faces_[i].a, y) - faces_[i].b;
        Point xnew = y;
        if (viol > 0.0)
          for (int j = 0; j < n_; ++j) xnew[j] -= viol * faces_[i].a[j];
        for (int j = 0; j < n_; ++j) {
          corr[i][j] = y[j] - xnew[j];
          moved += std::abs(xnew[j] - x[j]);
          x[j] = xnew[j];
        }
      }
      if (moved < 1e-14) break;
    }
    return x;
  }

  Shape shape_ = Shape::Ball;
  int n_ = 0;
  BallSpec ball_;
  Point lo_, hi_;
  std::vector<Halfspace> faces_;
  Point cheb_center_;
  double bound_radius_ = 0.0;
  std::optional<std::pair<double, double>> lipschitz_;
};

// ---------------------------------------------------------------------------
// Boundary meshes.

namespace detail {

inline double hi_lo(const Point& hi, const Point& lo, int i) {
  return hi[i] - lo[i];
}

inline BoundaryMesh ball_boundary_mesh(const BallSpec& b, int resolution) {
  BoundaryMesh m;
  const int n = b.dim();
  if (n == 1) {
    // the two endpoints with unit weights
    m.nodes = {Point{b.center[0] - b.radius}, Point{b.center[0] + b.radius}};
    m.patch_areas = {1.0, 1.0};
    return m;
  }
  if (n == 2) {
    const double w = 2.0 * kPi * b.radius / resolution;
    for (int i = 0; i < resolution; ++i) {
      const double t = 2.0 * kPi * (i + 0.5) / resolution;
      m.nodes.push_back(Point{b.center[0] + b.radius * std::cos(t),
                              b.center[1] + b.radius * std::sin(t)});
      m.patch_areas.push_back(w);
    }
    return m;
  }
  if (n == 3) {
    // Fibonacci lattice: quasi-uniform, exactly equal-area patches.
    const int cnt = resolution * resolution;
    const double area = 4.0 * kPi * b.radius * b.radius / cnt;
    const double golden = (1.0 + std::sqrt(5.0)) / 2.0;
    for (int i = 0; i < cnt; ++i) {
      const double mu = 1.0 - 2.0 * (i + 0.5) / cnt;
      const double rho = std::sqrt(std::max(0.0, 1.0 - mu * mu));
      const double phi = 2.0 * kPi * std::fmod(i / golden, 1.0);
      m.nodes.push_back(Point{b.center[0] + b.radius * rho * std::cos(phi),
                              b.center[1] + b.radius * rho * std::sin(phi),
                              b.center[2] + b.radius * mu});
      m.patch_areas.push_back(area);
    }
    return m;
  }
  throw ValidationError("boundary_mesh: ball meshes support n <= 3");
}

inline BoundaryMesh box_boundary_mesh(const Point& lo, const Point& hi,
                                      int resolution) {
  BoundaryMesh m;
  const int n = static_cast<int>(lo.size());
  if (n == 1) {
    m.nodes = {Point{lo[0]}, Point{hi[0]}};
    m.patch_areas = {1.0, 1.0};
    return m;
  }
  if (n == 2) {
    // per-edge grids
    for (int axis = 0; axis < 2; ++axis) {
      const int other = 1 - axis;
      const double len = hi_lo(hi, lo, other);
      const int k = resolution;
      const double w = len / k;
      for (double side : {lo[axis], hi[axis]}) {
        for (int i = 0; i < k; ++i) {
          Point p(2);
          p[axis] = side;
          p[other] = lo[other] + (i + 0.5) * w;
          m.nodes.push_back(p);
          m.patch_areas.push_back(w);
        }
      }
    }
    return m;
  }
  if (n == 3) {
    for (int axis = 0; axis < 3; ++axis) {
      const int u = (axis + 1) % 3, v = (axis + 2) % 3;
      const double lu = hi_lo(hi, lo, u), lv = hi_lo(hi, lo, v);
      const int k = resolution;
      const double w = (lu / k) * (lv / k);
      for (double side : {lo[axis], hi[axis]}) {
        for (int i = 0; i < k; ++i)
          for (int j = 0; j < k; ++j) {
            Point p(3);
            p[axis] = side;
            p[u] = lo[u] + (i + 0.5) * lu / k;
            p[v] = lo[v] + (j + 0.5) * lv / k;
            m.nodes.push_back(p);
            m.patch_areas.push_back(w);
          }
      }
    }
    return m;
  }
  throw ValidationError("boundary_mesh: box meshes support n <= 3");
}

// 2-D polytope boundary: enumerate vertices by pairwise face intersection,
// then subdivide each edge.
inline BoundaryMesh polytope_boundary_mesh(const Domain& d, int resolution) {
  if (d.dim() != 2)
    throw ValidationError("boundary_mesh: polytope meshes support only n = 2");
  const auto& faces = d.faces();
  BoundaryMesh m;
  const double tol = 1e-9 * std::max(1.0, d.diameter());
  for (std::size_t i = 0; i < faces.size(); ++i) {
    // collect the segment of face i inside all other halfspaces
    std::vector<Point> verts;
    for (std::size_t j = 0; j < faces.size(); ++j) {
      if (i == j) continue;
      const double det =
          faces[i].a[0] * faces[j].a[1] - faces[i].a[1] * faces[j].a[0];
      if (std::abs(det) < 1e-12) continue;
      Point v(2);
      v[0] = (faces[i].b * faces[j].a[1] - faces[j].b * faces[i].a[1]) / det;
      v[1] = (faces[i].a[0] * faces[j].b - faces[j].a[0] * faces[i].b) / det;
      bool feasible = true;
      for (const auto& f : faces)
        if (dot(f.a, v) > f.b + tol) {
          feasible = false;
          break;
        }
      if (feasible) verts.push_back(v);
    }
    if (verts.size() < 2) continue;
    // extreme pair along the face tangent
    const Point t{-faces[i].a[1], faces[i].a[0]};
    auto [pmin, pmax] = std::minmax_element(
        verts.begin(), verts.end(), [&](const Point& a, const Point& b) {
          return dot(t, a) < dot(t, b);
        });
    const Point& a = *pmin;
    const Point& b = *pmax;
    const double len = dist(a, b);
    if (len < tol) continue;
    const int k = resolution;
    for (int s = 0; s < k; ++s) {
      Point p(2);
      const double f = (s + 0.5) / k;
      p[0] = a[0] + f * (b[0] - a[0]);
      p[1] = a[1] + f * (b[1] - a[1]);
      m.nodes.push_back(p);
      m.patch_areas.push_back(len / k);
    }
  }
  return m;
}

}  // namespace detail

inline BoundaryMesh Domain::boundary_mesh(int resolution) const {
  if (n_ > 1 && resolution < 4)
    throw ValidationError("boundary_mesh: resolution must be >= 4");
  switch (shape_) {
    case Shape::Ball:
      return detail::ball_boundary_mesh(ball_, resolution);
    case Shape::Box:
      return detail::box_boundary_mesh(lo_, hi_, resolution);
    case Shape::Polytope:
      return detail::polytope_boundary_mesh(*this, resolution);
  }
  return {};
}

}  // namespace stablepot
