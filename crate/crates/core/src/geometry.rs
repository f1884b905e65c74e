//! Planar geometry: vectors, route polylines with arclength queries, and
//! oriented-rectangle intersection by the separating axis test.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::ops::{Add, Mul, Neg, Sub};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    pub fn from_angle(theta: f64) -> Self {
        Vec2::new(theta.cos(), theta.sin())
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }

    /// Counter-clockwise rotation by `theta`.
    pub fn rotate(self, theta: f64) -> Vec2 {
        let (s, c) = theta.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    /// Left-hand normal.
    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(theta: f64) -> f64 {
    let mut a = theta % (2.0 * PI);
    if a <= -PI {
        a += 2.0 * PI;
    } else if a > PI {
        a -= 2.0 * PI;
    }
    a
}

/// Point on a polyline expressed as arclength plus signed lateral offset
/// (positive to the left of the direction of travel).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frenet {
    pub s: f64,
    pub lateral: f64,
}

/// A polyline with cached cumulative arclength.
///
/// Queries beyond either end extrapolate along the first/last segment, so
/// arclength is defined on the whole real line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec2>", into = "Vec<Vec2>")]
pub struct Polyline {
    points: Vec<Vec2>,
    cumulative: Vec<f64>,
}

impl TryFrom<Vec<Vec2>> for Polyline {
    type Error = String;

    fn try_from(points: Vec<Vec2>) -> Result<Self, Self::Error> {
        Polyline::new(points)
    }
}

impl From<Polyline> for Vec<Vec2> {
    fn from(p: Polyline) -> Self {
        p.points
    }
}

impl Polyline {
    pub fn new(points: Vec<Vec2>) -> Result<Self, String> {
        if points.len() < 2 {
            return Err(format!("polyline needs >= 2 points, got {}", points.len()));
        }
        let mut cumulative = Vec::with_capacity(points.len());
        cumulative.push(0.0);
        for w in points.windows(2) {
            let d = (w[1] - w[0]).norm();
            if !(d > 0.0) || !d.is_finite() {
                return Err("consecutive polyline points must be distinct and finite".into());
            }
            cumulative.push(cumulative.last().unwrap() + d);
        }
        Ok(Polyline { points, cumulative })
    }

    pub fn points(&self) -> &[Vec2] {
        &self.points
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    fn segment_for(&self, s: f64) -> usize {
        let n = self.points.len() - 1;
        match self
            .cumulative
            .binary_search_by(|c| c.partial_cmp(&s).unwrap_or(std::cmp::Ordering::Less))
        {
            Ok(i) => i.min(n - 1),
            Err(i) => i.saturating_sub(1).min(n - 1),
        }
    }

    fn segment_dir(&self, i: usize) -> Vec2 {
        let d = self.points[i + 1] - self.points[i];
        d * (1.0 / d.norm())
    }

    pub fn point_at(&self, s: f64) -> Vec2 {
        let i = self.segment_for(s);
        self.points[i] + self.segment_dir(i) * (s - self.cumulative[i])
    }

    pub fn heading_at(&self, s: f64) -> f64 {
        self.segment_dir(self.segment_for(s)).angle()
    }

    /// Signed curvature estimated from the heading change across `s`.
    pub fn curvature_at(&self, s: f64) -> f64 {
        let h = 2.0;
        wrap_angle(self.heading_at(s + h) - self.heading_at(s - h)) / (2.0 * h)
    }

    fn project_on_segment(&self, i: usize, p: Vec2, extend_lo: bool, extend_hi: bool) -> (f64, Frenet) {
        let a = self.points[i];
        let dir = self.segment_dir(i);
        let seg_len = self.cumulative[i + 1] - self.cumulative[i];
        let mut t = (p - a).dot(dir);
        if !extend_lo {
            t = t.max(0.0);
        }
        if !extend_hi {
            t = t.min(seg_len);
        }
        let foot = a + dir * t;
        let off = p - foot;
        let lateral = dir.cross(p - a);
        (
            off.norm(),
            Frenet {
                s: self.cumulative[i] + t,
                lateral,
            },
        )
    }

    /// Closest-point projection over the whole polyline.
    pub fn project(&self, p: Vec2) -> Frenet {
        self.project_segments(p, 0, self.points.len() - 1)
    }

    /// Projection restricted to segments overlapping `[s_lo, s_hi]`; keeps
    /// progress tracking local on routes that come close to themselves.
    pub fn project_window(&self, p: Vec2, s_lo: f64, s_hi: f64) -> Frenet {
        let lo = self.segment_for(s_lo);
        let hi = self.segment_for(s_hi) + 1;
        self.project_segments(p, lo, hi)
    }

    fn project_segments(&self, p: Vec2, lo: usize, hi: usize) -> Frenet {
        let last = self.points.len() - 2;
        let mut best: Option<(f64, Frenet)> = None;
        for i in lo..hi.min(last + 1) {
            let cand = self.project_on_segment(i, p, i == 0, i == last);
            if best.map_or(true, |(d, _)| cand.0 < d) {
                best = Some(cand);
            }
        }
        best.expect("non-empty segment range").1
    }
}

/// An oriented rectangle: centre, heading of the length axis, and extent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedRect {
    pub center: Vec2,
    pub heading: f64,
    pub length: f64,
    pub width: f64,
}

impl OrientedRect {
    pub fn new(center: Vec2, heading: f64, length: f64, width: f64) -> Self {
        OrientedRect {
            center,
            heading,
            length,
            width,
        }
    }

    fn axes(&self) -> [Vec2; 2] {
        let u = Vec2::from_angle(self.heading);
        [u, u.perp()]
    }

    /// Projection interval of the rectangle onto `axis`.
    fn project(&self, axis: Vec2) -> (f64, f64) {
        let [u, v] = self.axes();
        let c = self.center.dot(axis);
        let r = 0.5 * self.length * u.dot(axis).abs() + 0.5 * self.width * v.dot(axis).abs();
        (c - r, c + r)
    }

    pub fn corners(&self) -> [Vec2; 4] {
        let [u, v] = self.axes();
        let a = u * (0.5 * self.length);
        let b = v * (0.5 * self.width);
        [
            self.center + a + b,
            self.center - a + b,
            self.center - a - b,
            self.center + a - b,
        ]
    }

    /// Separating-axis test on closed rectangles: touching counts as
    /// intersecting.
    pub fn intersects(&self, other: &OrientedRect) -> bool {
        let [a0, a1] = self.axes();
        let [b0, b1] = other.axes();
        for axis in [a0, a1, b0, b1] {
            let (lo_a, hi_a) = self.project(axis);
            let (lo_b, hi_b) = other.project(axis);
            if hi_a < lo_b || hi_b < lo_a {
                return false;
            }
        }
        true
    }
}
