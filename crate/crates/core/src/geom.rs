//! Planar rigid-body poses and the world/agent frame changes used by both
//! model families.
//!
//! An agent frame has its origin at the agent's center with the agent's
//! heading along `+x`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Wrap an angle into `(-pi, pi]`. Values already in range are returned
/// unchanged, so the map is exactly idempotent.
pub fn normalize_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let r = (a + PI).rem_euclid(2.0 * PI) - PI;
    if r <= -PI {
        r + 2.0 * PI
    } else {
        r
    }
}

/// SE(2) pose. The heading is kept normalized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    x: f64,
    y: f64,
    heading: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, heading: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite() && heading.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite pose ({x}, {y}, {heading})"
            )));
        }
        Ok(Self {
            x,
            y,
            heading: normalize_angle(heading),
        })
    }

    pub const fn identity() -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            heading: 0.0,
        }
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    pub fn heading(&self) -> f64 {
        self.heading
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    pub fn inverse(&self) -> Self {
        let (s, c) = self.heading.sin_cos();
        Self {
            x: -(c * self.x + s * self.y),
            y: s * self.x - c * self.y,
            heading: normalize_angle(-self.heading),
        }
    }

    /// Map a point expressed in this pose's frame into the parent frame.
    #[inline]
    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.heading.sin_cos();
        [c * p[0] - s * p[1] + self.x, s * p[0] + c * p[1] + self.y]
    }

    /// Map a parent-frame point into this pose's frame.
    #[inline]
    pub fn apply_inverse(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.heading.sin_cos();
        let dx = p[0] - self.x;
        let dy = p[1] - self.y;
        [c * dx + s * dy, -s * dx + c * dy]
    }

    /// Rotate a free vector (velocity, direction) into this pose's frame.
    #[inline]
    pub fn rotate_inverse(&self, v: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.heading.sin_cos();
        [c * v[0] + s * v[1], -s * v[0] + c * v[1]]
    }

    #[inline]
    pub fn rotate(&self, v: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.heading.sin_cos();
        [c * v[0] - s * v[1], s * v[0] + c * v[1]]
    }
}

impl Default for Pose2 {
    fn default() -> Self {
        Self::identity()
    }
}

/// Ordered list of planar points.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PointSet2(pub Vec<[f64; 2]>);

impl PointSet2 {
    pub fn new(points: Vec<[f64; 2]>) -> Self {
        Self(points)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, [f64; 2]> {
        self.0.iter()
    }

    fn check_finite(&self) -> Result<()> {
        match self.0.iter().position(|p| !(p[0].is_finite() && p[1].is_finite())) {
            Some(i) => Err(Error::InvalidInput(format!("non-finite point at index {i}"))),
            None => Ok(()),
        }
    }
}

/// `R(-heading) * (p - t)` for every point.
pub fn world_to_agent(anchor: &Pose2, pts: &PointSet2) -> Result<PointSet2> {
    pts.check_finite()?;
    Ok(PointSet2(pts.iter().map(|&p| anchor.apply_inverse(p)).collect()))
}

pub fn agent_to_world(anchor: &Pose2, pts: &PointSet2) -> Result<PointSet2> {
    pts.check_finite()?;
    Ok(PointSet2(pts.iter().map(|&p| anchor.apply(p)).collect()))
}

/// `a ∘ b`: first apply `b`, then `a`.
pub fn compose(a: &Pose2, b: &Pose2) -> Result<Pose2> {
    let p = a.apply([b.x, b.y]);
    Pose2::new(p[0], p[1], a.heading + b.heading)
}
