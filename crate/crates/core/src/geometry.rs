//! Planar polygon primitives: membership, area, and exact clipping against
//! axis-aligned cells.
//!
//! Rings are stored closed (first vertex repeated at the end). Coordinates are
//! planar meters; nothing here knows about geographic projections.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub x: f64,
    pub y: f64,
}

impl GeoPoint {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance_squared(&self, other: &GeoPoint) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }

    pub fn distance(&self, other: &GeoPoint) -> f64 {
        self.distance_squared(other).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl BoundingBox {
    pub fn empty() -> Self {
        Self {
            min_x: f64::INFINITY,
            min_y: f64::INFINITY,
            max_x: f64::NEG_INFINITY,
            max_y: f64::NEG_INFINITY,
        }
    }

    pub fn extend(&mut self, p: &GeoPoint) {
        self.min_x = self.min_x.min(p.x);
        self.min_y = self.min_y.min(p.y);
        self.max_x = self.max_x.max(p.x);
        self.max_y = self.max_y.max(p.y);
    }

    pub fn union(&self, other: &BoundingBox) -> BoundingBox {
        BoundingBox {
            min_x: self.min_x.min(other.min_x),
            min_y: self.min_y.min(other.min_y),
            max_x: self.max_x.max(other.max_x),
            max_y: self.max_y.max(other.max_y),
        }
    }

    pub fn width(&self) -> f64 {
        self.max_x - self.min_x
    }

    pub fn height(&self) -> f64 {
        self.max_y - self.min_y
    }

    pub fn area(&self) -> f64 {
        if self.max_x < self.min_x || self.max_y < self.min_y {
            0.0
        } else {
            self.width() * self.height()
        }
    }

    pub fn intersects(&self, other: &BoundingBox) -> bool {
        self.min_x < other.max_x
            && other.min_x < self.max_x
            && self.min_y < other.max_y
            && other.min_y < self.max_y
    }

    pub fn contains(&self, p: &GeoPoint) -> bool {
        p.x >= self.min_x && p.x <= self.max_x && p.y >= self.min_y && p.y <= self.max_y
    }
}

/// A closed linear ring.
#[derive(Debug, Clone, PartialEq)]
pub struct Ring(pub Vec<GeoPoint>);

impl Ring {
    /// Builds a ring from an open or closed vertex list, closing it if needed.
    pub fn new(mut points: Vec<GeoPoint>) -> Self {
        if let (Some(first), Some(last)) = (points.first().copied(), points.last().copied()) {
            if first != last {
                points.push(first);
            }
        }
        Ring(points)
    }

    pub fn points(&self) -> &[GeoPoint] {
        &self.0
    }

    pub fn segments(&self) -> impl Iterator<Item = (GeoPoint, GeoPoint)> + '_ {
        self.0.windows(2).map(|w| (w[0], w[1]))
    }

    /// Shoelace signed area; positive for counter-clockwise rings.
    pub fn signed_area(&self) -> f64 {
        shoelace(&self.0)
    }

    pub fn bbox(&self) -> BoundingBox {
        let mut bb = BoundingBox::empty();
        for p in &self.0 {
            bb.extend(p);
        }
        bb
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let pts = &self.0;
        if pts.len() < 4 {
            return Err(format!("ring has {} positions, need at least 4", pts.len()));
        }
        if pts.first() != pts.last() {
            return Err("ring is not closed".into());
        }
        if let Some(p) = pts.iter().find(|p| !p.is_finite()) {
            return Err(format!("non-finite coordinate ({}, {})", p.x, p.y));
        }
        if self.signed_area() == 0.0 {
            return Err("ring has zero area".into());
        }
        if let Some((i, j)) = self_intersection(pts) {
            return Err(format!("ring self-intersects between segments {i} and {j}"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    pub exterior: Ring,
    pub holes: Vec<Ring>,
}

impl Polygon {
    pub fn new(exterior: Ring, holes: Vec<Ring>) -> Self {
        Self { exterior, holes }
    }

    pub fn rect(min_x: f64, min_y: f64, max_x: f64, max_y: f64) -> Self {
        Polygon::new(
            Ring::new(vec![
                GeoPoint::new(min_x, min_y),
                GeoPoint::new(max_x, min_y),
                GeoPoint::new(max_x, max_y),
                GeoPoint::new(min_x, max_y),
            ]),
            Vec::new(),
        )
    }

    pub fn rings(&self) -> impl Iterator<Item = &Ring> {
        std::iter::once(&self.exterior).chain(self.holes.iter())
    }

    pub fn area(&self) -> f64 {
        let holes: f64 = self.holes.iter().map(|h| h.signed_area().abs()).sum();
        (self.exterior.signed_area().abs() - holes).max(0.0)
    }

    pub fn bbox(&self) -> BoundingBox {
        self.exterior.bbox()
    }

    pub fn contains(&self, p: &GeoPoint) -> bool {
        let scale = boundary_tolerance(&self.bbox());
        if self.rings().any(|r| on_ring(p, r, scale)) {
            return true;
        }
        let mut inside = false;
        for ring in self.rings() {
            for (a, b) in ring.segments() {
                if (a.y > p.y) != (b.y > p.y) {
                    let x_cross = (b.x - a.x) * (p.y - a.y) / (b.y - a.y) + a.x;
                    if p.x < x_cross {
                        inside = !inside;
                    }
                }
            }
        }
        inside
    }

    /// Exact area of the intersection with an axis-aligned rectangle.
    pub fn intersection_area_with_rect(&self, rect: &BoundingBox) -> f64 {
        if !self.bbox().intersects(rect) {
            return 0.0;
        }
        let outer = clip_to_rect(self.exterior.points(), rect);
        let mut area = shoelace(&outer).abs();
        for hole in &self.holes {
            if hole.bbox().intersects(rect) {
                area -= shoelace(&clip_to_rect(hole.points(), rect)).abs();
            }
        }
        area.max(0.0)
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        self.exterior.validate().map_err(|e| format!("exterior: {e}"))?;
        for (i, h) in self.holes.iter().enumerate() {
            h.validate().map_err(|e| format!("hole {i}: {e}"))?;
        }
        Ok(())
    }
}

/// One or more polygon parts; the boundary type for regions and patches.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiPolygon(pub Vec<Polygon>);

impl MultiPolygon {
    pub fn parts(&self) -> &[Polygon] {
        &self.0
    }

    pub fn area(&self) -> f64 {
        self.0.iter().map(Polygon::area).sum()
    }

    pub fn bbox(&self) -> BoundingBox {
        self.0
            .iter()
            .fold(BoundingBox::empty(), |acc, p| acc.union(&p.bbox()))
    }

    pub fn intersection_area_with_rect(&self, rect: &BoundingBox) -> f64 {
        self.0
            .iter()
            .map(|p| p.intersection_area_with_rect(rect))
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::Geometry("empty multipolygon".into()));
        }
        for (i, p) in self.0.iter().enumerate() {
            p.validate()
                .map_err(|e| Error::Geometry(format!("part {i}: {e}")))?;
        }
        Ok(())
    }
}

impl From<Polygon> for MultiPolygon {
    fn from(p: Polygon) -> Self {
        MultiPolygon(vec![p])
    }
}

/// Even-odd membership test. Points on any ring boundary count as inside.
pub fn point_in_polygon(p: &GeoPoint, poly: &MultiPolygon) -> bool {
    poly.0.iter().any(|part| part.contains(p))
}

fn shoelace(pts: &[GeoPoint]) -> f64 {
    if pts.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..pts.len() {
        let a = pts[i];
        let b = pts[(i + 1) % pts.len()];
        acc += a.x * b.y - b.x * a.y;
    }
    0.5 * acc
}

fn boundary_tolerance(bb: &BoundingBox) -> f64 {
    let mag = bb
        .min_x
        .abs()
        .max(bb.max_x.abs())
        .max(bb.min_y.abs())
        .max(bb.max_y.abs())
        .max(1.0);
    mag * 1e-12
}

fn on_ring(p: &GeoPoint, ring: &Ring, tol: f64) -> bool {
    ring.segments().any(|(a, b)| on_segment(p, &a, &b, tol))
}

fn on_segment(p: &GeoPoint, a: &GeoPoint, b: &GeoPoint, tol: f64) -> bool {
    if p.x < a.x.min(b.x) - tol
        || p.x > a.x.max(b.x) + tol
        || p.y < a.y.min(b.y) - tol
        || p.y > a.y.max(b.y) + tol
    {
        return false;
    }
    let len = a.distance(b);
    if len == 0.0 {
        return p.distance(a) <= tol;
    }
    let cross = (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
    cross.abs() / len <= tol
}

/// Sutherland–Hodgman clipping of a ring against a rectangle. The clip window
/// is convex, so the signed area of the output equals the signed area of the
/// intersection even when the subject ring is concave.
fn clip_to_rect(ring: &[GeoPoint], rect: &BoundingBox) -> Vec<GeoPoint> {
    // drop the closing duplicate; shoelace wraps around
    let mut poly: Vec<GeoPoint> = match ring.split_last() {
        Some((last, rest)) if Some(last) == rest.first() => rest.to_vec(),
        _ => ring.to_vec(),
    };
    let edges: [(usize, f64, bool); 4] = [
        (0, rect.min_x, true),
        (0, rect.max_x, false),
        (1, rect.min_y, true),
        (1, rect.max_y, false),
    ];
    for (axis, bound, keep_greater) in edges {
        if poly.is_empty() {
            break;
        }
        let coord = |p: &GeoPoint| if axis == 0 { p.x } else { p.y };
        let inside = |p: &GeoPoint| {
            if keep_greater {
                coord(p) >= bound
            } else {
                coord(p) <= bound
            }
        };
        let mut out = Vec::with_capacity(poly.len() + 4);
        for i in 0..poly.len() {
            let cur = poly[i];
            let prev = poly[(i + poly.len() - 1) % poly.len()];
            let (cur_in, prev_in) = (inside(&cur), inside(&prev));
            if cur_in != prev_in {
                let t = (bound - coord(&prev)) / (coord(&cur) - coord(&prev));
                let hit = if axis == 0 {
                    GeoPoint::new(bound, prev.y + t * (cur.y - prev.y))
                } else {
                    GeoPoint::new(prev.x + t * (cur.x - prev.x), bound)
                };
                out.push(hit);
            }
            if cur_in {
                out.push(cur);
            }
        }
        poly = out;
    }
    poly
}

fn orientation(a: &GeoPoint, b: &GeoPoint, c: &GeoPoint) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

fn segments_intersect(p1: &GeoPoint, p2: &GeoPoint, q1: &GeoPoint, q2: &GeoPoint) -> bool {
    let d1 = orientation(q1, q2, p1);
    let d2 = orientation(q1, q2, p2);
    let d3 = orientation(p1, p2, q1);
    let d4 = orientation(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    let within = |a: &GeoPoint, b: &GeoPoint, p: &GeoPoint| {
        p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
    };
    (d1 == 0.0 && within(q1, q2, p1))
        || (d2 == 0.0 && within(q1, q2, p2))
        || (d3 == 0.0 && within(p1, p2, q1))
        || (d4 == 0.0 && within(p1, p2, q2))
}

fn self_intersection(pts: &[GeoPoint]) -> Option<(usize, usize)> {
    let n = pts.len() - 1;
    for i in 0..n {
        let (a1, a2) = (pts[i], pts[i + 1]);
        let (ax0, ax1) = (a1.x.min(a2.x), a1.x.max(a2.x));
        let (ay0, ay1) = (a1.y.min(a2.y), a1.y.max(a2.y));
        for j in (i + 1)..n {
            // neighbours share an endpoint; the first and last segment too
            if j == i + 1 || (i == 0 && j == n - 1) {
                continue;
            }
            let (b1, b2) = (pts[j], pts[j + 1]);
            if b1.x.max(b2.x) < ax0
                || b1.x.min(b2.x) > ax1
                || b1.y.max(b2.y) < ay0
                || b1.y.min(b2.y) > ay1
            {
                continue;
            }
            if segments_intersect(&a1, &a2, &b1, &b2) {
                return Some((i, j));
            }
        }
    }
    None
}
