//! Plain 2-D geometry used by the simulator and the metric oracle.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    pub fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }

    pub fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }

    pub fn scale(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dist(self, o: Vec2) -> f64 {
        self.sub(o).norm()
    }
}

/// Wrap an angle into (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut r = a % two_pi;
    if r <= -std::f64::consts::PI {
        r += two_pi;
    } else if r > std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

/// An open polyline with arc-length parameterization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    pub points: Vec<Vec2>,
}

impl Polyline {
    pub fn new(points: Vec<Vec2>) -> Self {
        assert!(points.len() >= 2, "polyline needs at least 2 points");
        Polyline { points }
    }

    pub fn length(&self) -> f64 {
        self.points.windows(2).map(|w| w[0].dist(w[1])).sum()
    }

    /// Point at arc length s, clamped to the ends.
    pub fn point_at(&self, s: f64) -> Vec2 {
        if s <= 0.0 {
            return self.points[0];
        }
        let mut acc = 0.0;
        for w in self.points.windows(2) {
            let seg = w[0].dist(w[1]);
            if acc + seg >= s && seg > 0.0 {
                let t = (s - acc) / seg;
                return w[0].add(w[1].sub(w[0]).scale(t));
            }
            acc += seg;
        }
        *self.points.last().unwrap()
    }

    /// Unit tangent heading (radians) at arc length s.
    pub fn heading_at(&self, s: f64) -> f64 {
        let mut acc = 0.0;
        for w in self.points.windows(2) {
            let seg = w[0].dist(w[1]);
            if (acc + seg >= s || acc + seg >= self.length()) && seg > 0.0 {
                let d = w[1].sub(w[0]);
                return d.y.atan2(d.x);
            }
            acc += seg;
        }
        let n = self.points.len();
        let d = self.points[n - 1].sub(self.points[n - 2]);
        d.y.atan2(d.x)
    }

    /// Project a point: returns (arc length of closest point, distance).
    pub fn project(&self, p: Vec2) -> (f64, f64) {
        let mut best = (0.0, f64::INFINITY);
        let mut acc = 0.0;
        for w in self.points.windows(2) {
            let a = w[0];
            let b = w[1];
            let ab = b.sub(a);
            let seg = ab.norm();
            let t = if seg > 0.0 { (p.sub(a).dot(ab) / (seg * seg)).clamp(0.0, 1.0) } else { 0.0 };
            let q = a.add(ab.scale(t));
            let d = p.dist(q);
            if d < best.1 {
                best = (acc + t * seg, d);
            }
            acc += seg;
        }
        best
    }
}

/// A simple (non-self-intersecting) closed polygon. Boundary points count as
/// inside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    pub vertices: Vec<Vec2>,
}

impl Polygon {
    pub fn new(vertices: Vec<Vec2>) -> Self {
        assert!(vertices.len() >= 3, "polygon needs at least 3 vertices");
        Polygon { vertices }
    }

    pub fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Polygon::new(vec![
            Vec2::new(x0, y0),
            Vec2::new(x1, y0),
            Vec2::new(x1, y1),
            Vec2::new(x0, y1),
        ])
    }

    pub fn area(&self) -> f64 {
        let n = self.vertices.len();
        let mut s = 0.0;
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            s += a.x * b.y - b.x * a.y;
        }
        s.abs() / 2.0
    }

    pub fn contains(&self, p: Vec2) -> bool {
        let n = self.vertices.len();
        // boundary counts as inside (closed polygon)
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            if point_on_segment(p, a, b) {
                return true;
            }
        }
        // ray casting toward +x
        let mut inside = false;
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            if (a.y > p.y) != (b.y > p.y) {
                let x_int = a.x + (p.y - a.y) / (b.y - a.y) * (b.x - a.x);
                if p.x < x_int {
                    inside = !inside;
                }
            }
        }
        inside
    }
}

fn point_on_segment(p: Vec2, a: Vec2, b: Vec2) -> bool {
    let cross = (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
    if cross.abs() > 1e-9 {
        return false;
    }
    let dot = p.sub(a).dot(b.sub(a));
    dot >= 0.0 && dot <= b.sub(a).dot(b.sub(a))
}

/// An oriented rectangle footprint (vehicle body).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedRect {
    pub center: Vec2,
    pub heading: f64,
    pub half_length: f64,
    pub half_width: f64,
}

impl OrientedRect {
    pub fn corners(&self) -> [Vec2; 4] {
        let (s, c) = self.heading.sin_cos();
        let axes = [
            Vec2::new(c * self.half_length, s * self.half_length),
            Vec2::new(-s * self.half_width, c * self.half_width),
        ];
        [
            self.center.add(axes[0]).add(axes[1]),
            self.center.add(axes[0]).sub(axes[1]),
            self.center.sub(axes[0]).sub(axes[1]),
            self.center.sub(axes[0]).add(axes[1]),
        ]
    }

    /// Separating-axis overlap test; touching counts as intersecting.
    pub fn intersects(&self, other: &OrientedRect) -> bool {
        let ca = self.corners();
        let cb = other.corners();
        for rect in [&ca, &cb] {
            for i in 0..2 {
                let edge = rect[i + 1].sub(rect[i]);
                let axis = Vec2::new(-edge.y, edge.x);
                let (mut amin, mut amax) = (f64::INFINITY, f64::NEG_INFINITY);
                for p in &ca {
                    let d = p.dot(axis);
                    amin = amin.min(d);
                    amax = amax.max(d);
                }
                let (mut bmin, mut bmax) = (f64::INFINITY, f64::NEG_INFINITY);
                for p in &cb {
                    let d = p.dot(axis);
                    bmin = bmin.min(d);
                    bmax = bmax.max(d);
                }
                if amax < bmin || bmax < amin {
                    return false;
                }
            }
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_angle_bounds() {
        assert!((wrap_angle(3.0 * std::f64::consts::PI) - std::f64::consts::PI).abs() < 1e-12);
        assert_eq!(wrap_angle(0.0), 0.0);
        assert!(wrap_angle(-std::f64::consts::PI) > 0.0);
    }

    #[test]
    fn polyline_arc_length_eval() {
        let pl = Polyline::new(vec![Vec2::new(0.0, 0.0), Vec2::new(10.0, 0.0), Vec2::new(10.0, 10.0)]);
        assert_eq!(pl.length(), 20.0);
        let p = pl.point_at(15.0);
        assert!((p.x - 10.0).abs() < 1e-12 && (p.y - 5.0).abs() < 1e-12);
        let (s, d) = pl.project(Vec2::new(5.0, 2.0));
        assert!((s - 5.0).abs() < 1e-12 && (d - 2.0).abs() < 1e-12);
    }

    #[test]
    fn polygon_contains_boundary() {
        let poly = Polygon::rect(0.0, 0.0, 4.0, 2.0);
        assert!(poly.contains(Vec2::new(2.0, 1.0)));
        assert!(poly.contains(Vec2::new(0.0, 1.0))); // boundary
        assert!(!poly.contains(Vec2::new(-0.01, 1.0)));
        assert_eq!(poly.area(), 8.0);
    }

    #[test]
    fn rect_intersection() {
        let a = OrientedRect { center: Vec2::new(0.0, 0.0), heading: 0.0, half_length: 2.0, half_width: 1.0 };
        let b = OrientedRect { center: Vec2::new(3.0, 0.0), heading: 0.0, half_length: 2.0, half_width: 1.0 };
        assert!(a.intersects(&b));
        let c = OrientedRect { center: Vec2::new(10.0, 0.0), heading: 0.7, half_length: 2.0, half_width: 1.0 };
        assert!(!a.intersects(&c));
    }
}
