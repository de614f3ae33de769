//! Planar poses, angle arithmetic and the line/arc primitives shared by the
//! planner, the controller and the path projection.

use std::f64::consts::{PI, TAU};
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Below this distance a target is considered coincident with the pose.
pub const DEGENERATE_DISTANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum GeometryError {
    #[error("target coincides with the pose position")]
    DegenerateTarget,
    #[error("arclength {s} outside [0, {length}]")]
    OutOfRange { s: f64, length: f64 },
}

/// Wraps an angle into (-π, π].
///
/// Values already inside the interval are returned untouched, which makes the
/// function exactly idempotent.
pub fn wrap_angle(angle: f64) -> f64 {
    if angle > -PI && angle <= PI {
        return angle;
    }
    let mut r = angle.rem_euclid(TAU);
    if r > PI {
        r -= TAU;
    }
    if r <= -PI {
        r += TAU;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn from_angle(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self { x: c, y: s }
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dot(self, other: Vec2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn cross(self, other: Vec2) -> f64 {
        self.x * other.y - self.y * other.x
    }

    pub fn distance(self, other: Vec2) -> f64 {
        (other - self).norm()
    }

    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }

    /// Counterclockwise perpendicular.
    pub fn perp(self) -> Self {
        Self { x: -self.y, y: self.x }
    }

    /// Scales the vector down to unit length if it is longer than one.
    pub fn clamp_unit(self) -> Self {
        let n = self.norm();
        if n > 1.0 {
            self * (1.0 / n)
        } else if n.is_finite() {
            self
        } else {
            Vec2::ZERO
        }
    }

    pub fn lerp(self, other: Vec2, t: f64) -> Self {
        self + (other - self) * t
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
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
    fn mul(self, k: f64) -> Vec2 {
        Vec2::new(self.x * k, self.y * k)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Planar position in meters and heading in radians, heading kept in (-π, π].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "RawPose")]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    heading: f64,
}

#[derive(Deserialize)]
struct RawPose {
    x: f64,
    y: f64,
    heading: f64,
}

impl From<RawPose> for Pose2D {
    fn from(raw: RawPose) -> Self {
        Pose2D::new(raw.x, raw.y, raw.heading)
    }
}

impl Pose2D {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self {
            x,
            y,
            heading: wrap_angle(heading),
        }
    }

    pub fn at(position: Vec2, heading: f64) -> Self {
        Self::new(position.x, position.y, heading)
    }

    pub fn heading(&self) -> f64 {
        self.heading
    }

    pub fn set_heading(&mut self, heading: f64) {
        self.heading = wrap_angle(heading);
    }

    pub fn rotate(&mut self, delta: f64) {
        self.heading = wrap_angle(self.heading + delta);
    }

    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    pub fn set_position(&mut self, p: Vec2) {
        self.x = p.x;
        self.y = p.y;
    }

    pub fn direction(&self) -> Vec2 {
        Vec2::from_angle(self.heading)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.heading.is_finite()
    }
}

/// Angle in (-π, π]; positive is counterclockwise (left).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct SignedAngle(f64);

impl SignedAngle {
    pub fn new(value: f64) -> Self {
        Self(wrap_angle(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn abs(self) -> f64 {
        self.0.abs()
    }
}

/// Signed angle from the pose heading to the bearing of `target`.
pub fn signed_angle_to(pose: &Pose2D, target: Vec2) -> Result<SignedAngle, GeometryError> {
    let delta = target - pose.position();
    if delta.norm() <= DEGENERATE_DISTANCE {
        return Err(GeometryError::DegenerateTarget);
    }
    Ok(SignedAngle::new(delta.angle() - pose.heading))
}

/// Curvature of the circle tangent to the heading that passes through `target`.
pub fn pursuit_curvature(pose: &Pose2D, target: Vec2) -> Result<f64, GeometryError> {
    let alpha = signed_angle_to(pose, target)?;
    let d = pose.position().distance(target);
    Ok(2.0 * alpha.value().sin() / d)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinePrimitive {
    pub start: Vec2,
    pub end: Vec2,
}

impl LinePrimitive {
    pub fn length(&self) -> f64 {
        self.start.distance(self.end)
    }

    pub fn heading(&self) -> f64 {
        (self.end - self.start).angle()
    }

    pub fn point_at(&self, s: f64) -> Vec2 {
        let len = self.length();
        if s >= len {
            return self.end;
        }
        self.start.lerp(self.end, s / len)
    }

    pub fn distance_to(&self, p: Vec2) -> f64 {
        let d = self.end - self.start;
        let len2 = d.dot(d);
        let t = if len2 > 0.0 {
            ((p - self.start).dot(d) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        p.distance(self.start + d * t)
    }
}

/// Circular arc; counterclockwise when `sweep > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArcPrimitive {
    pub center: Vec2,
    pub radius: f64,
    pub start_angle: f64,
    pub sweep: f64,
}

impl ArcPrimitive {
    /// The arc leaving `pose` tangent to its heading and ending at `target`.
    ///
    /// Returns `None` when the target is straight ahead or behind (no finite
    /// circle) or coincides with the pose.
    pub fn tangent_through(pose: &Pose2D, target: Vec2) -> Option<Self> {
        let alpha = signed_angle_to(pose, target).ok()?.value();
        let d = pose.position().distance(target);
        let s = alpha.sin();
        if s.abs() < 1e-12 {
            return None;
        }
        let radius = d / (2.0 * s.abs());
        let side = s.signum();
        let normal = pose.direction().perp() * side;
        let center = pose.position() + normal * radius;
        let start_angle = (pose.position() - center).angle();
        Some(Self {
            center,
            radius,
            start_angle,
            sweep: 2.0 * alpha,
        })
    }

    pub fn length(&self) -> f64 {
        self.radius * self.sweep.abs()
    }

    fn angle_at(&self, s: f64) -> f64 {
        self.start_angle + self.sweep.signum() * s / self.radius
    }

    pub fn point_at_angle(&self, theta: f64) -> Vec2 {
        self.center + Vec2::from_angle(theta) * self.radius
    }

    pub fn point_at(&self, s: f64) -> Vec2 {
        if s >= self.length() {
            return self.end_point();
        }
        self.point_at_angle(self.angle_at(s))
    }

    pub fn start_point(&self) -> Vec2 {
        self.point_at_angle(self.start_angle)
    }

    pub fn end_point(&self) -> Vec2 {
        self.point_at_angle(self.start_angle + self.sweep)
    }

    fn tangent_heading(&self, theta: f64) -> f64 {
        wrap_angle(theta + self.sweep.signum() * PI / 2.0)
    }

    pub fn start_heading(&self) -> f64 {
        self.tangent_heading(self.start_angle)
    }

    pub fn end_heading(&self) -> f64 {
        self.tangent_heading(self.start_angle + self.sweep)
    }

    /// Whether polar angle `theta` falls within the swept range.
    pub fn contains_angle(&self, theta: f64) -> bool {
        let rel = if self.sweep >= 0.0 {
            (theta - self.start_angle).rem_euclid(TAU)
        } else {
            (self.start_angle - theta).rem_euclid(TAU)
        };
        rel <= self.sweep.abs() + 1e-12 || rel >= TAU - 1e-12
    }

    pub fn distance_to(&self, p: Vec2) -> f64 {
        let rel = p - self.center;
        let on_circle = (rel.norm() - self.radius).abs();
        if rel.norm() > 0.0 && self.contains_angle(rel.angle()) {
            on_circle
        } else {
            p.distance(self.start_point()).min(p.distance(self.end_point()))
        }
    }

    /// Sub-arc from arclength `s` to the end.
    pub fn suffix(&self, s: f64) -> Self {
        let s = s.clamp(0.0, self.length());
        let taken = self.sweep.signum() * s / self.radius;
        Self {
            start_angle: self.start_angle + taken,
            sweep: self.sweep - taken,
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotatePrimitive {
    pub at: Vec2,
    pub from_heading: f64,
    pub delta: f64,
}

impl RotatePrimitive {
    pub fn end_heading(&self) -> f64 {
        wrap_angle(self.from_heading + self.delta)
    }
}

/// One element of a path plan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    Rotate(RotatePrimitive),
    Line(LinePrimitive),
    Arc(ArcPrimitive),
}

impl Primitive {
    /// Translational length; rotations contribute zero.
    pub fn length(&self) -> f64 {
        match self {
            Primitive::Rotate(_) => 0.0,
            Primitive::Line(l) => l.length(),
            Primitive::Arc(a) => a.length(),
        }
    }

    pub fn is_translation(&self) -> bool {
        !matches!(self, Primitive::Rotate(_))
    }

    pub fn start_point(&self) -> Vec2 {
        match self {
            Primitive::Rotate(r) => r.at,
            Primitive::Line(l) => l.start,
            Primitive::Arc(a) => a.start_point(),
        }
    }

    pub fn end_point(&self) -> Vec2 {
        match self {
            Primitive::Rotate(r) => r.at,
            Primitive::Line(l) => l.end,
            Primitive::Arc(a) => a.end_point(),
        }
    }

    pub fn start_heading(&self) -> f64 {
        match self {
            Primitive::Rotate(r) => r.from_heading,
            Primitive::Line(l) => l.heading(),
            Primitive::Arc(a) => a.start_heading(),
        }
    }

    pub fn end_heading(&self) -> f64 {
        match self {
            Primitive::Rotate(r) => r.end_heading(),
            Primitive::Line(l) => l.heading(),
            Primitive::Arc(a) => a.end_heading(),
        }
    }

    pub fn distance_to(&self, p: Vec2) -> f64 {
        match self {
            Primitive::Rotate(r) => p.distance(r.at),
            Primitive::Line(l) => l.distance_to(p),
            Primitive::Arc(a) => a.distance_to(p),
        }
    }

    /// Remainder of the primitive after arclength `s`.
    pub fn suffix(&self, s: f64) -> Primitive {
        match self {
            Primitive::Rotate(r) => Primitive::Rotate(*r),
            Primitive::Line(l) => Primitive::Line(LinePrimitive {
                start: l.point_at(s),
                end: l.end,
            }),
            Primitive::Arc(a) => Primitive::Arc(a.suffix(s)),
        }
    }
}

/// Point at arclength `s` from the start of a primitive.
pub fn sample_primitive(prim: &Primitive, s: f64) -> Result<Vec2, GeometryError> {
    let length = prim.length();
    if !(0.0..=length).contains(&s) {
        return Err(GeometryError::OutOfRange { s, length });
    }
    Ok(match prim {
        Primitive::Rotate(r) => r.at,
        Primitive::Line(l) => l.point_at(s),
        Primitive::Arc(a) => a.point_at(s),
    })
}
