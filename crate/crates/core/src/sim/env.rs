//! Synthetic world geometry: wall segments, circular objects, and exact
//! analytic ray casting against both.

use crate::{Error, Result};

/// Non-degenerate 2D wall segment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub a: (f64, f64),
    pub b: (f64, f64),
}

/// How an object moves over the run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ObjectMotion {
    Static,
    /// Constant world-frame velocity (m/s).
    Linear { vx: f64, vy: f64 },
}

/// Circular object, the landmark primitive of the simulator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimObject {
    pub center: (f64, f64),
    pub radius: f64,
    pub motion: ObjectMotion,
}

impl SimObject {
    pub fn pillar(x: f64, y: f64, radius: f64) -> Self {
        Self {
            center: (x, y),
            radius,
            motion: ObjectMotion::Static,
        }
    }

    pub fn moving(x: f64, y: f64, radius: f64, vx: f64, vy: f64) -> Self {
        Self {
            center: (x, y),
            radius,
            motion: ObjectMotion::Linear { vx, vy },
        }
    }

    /// World-frame center at time t.
    pub fn center_at(&self, t: f64) -> (f64, f64) {
        match self.motion {
            ObjectMotion::Static => self.center,
            ObjectMotion::Linear { vx, vy } => (self.center.0 + vx * t, self.center.1 + vy * t),
        }
    }

    pub fn is_static(&self) -> bool {
        matches!(self.motion, ObjectMotion::Static)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Environment {
    pub walls: Vec<Segment>,
    pub objects: Vec<SimObject>,
}

/// Rectangular corridor wall loop with objects placed inside.
///
/// The corridor spans [0, length] x [0, width]; an object must fit fully
/// inside (center at least one radius from every wall).
pub fn build_corridor(length: f64, width: f64, objects: Vec<SimObject>) -> Result<Environment> {
    assert!(length > 0.0 && width > 0.0, "corridor dimensions must be positive");
    for obj in &objects {
        let (x, y) = obj.center;
        let r = obj.radius;
        if !(r > 0.0) || x - r < 0.0 || x + r > length || y - r < 0.0 || y + r > width {
            return Err(Error::ObjectOutsideEnvironment { x, y, r });
        }
    }
    let walls = vec![
        Segment { a: (0.0, 0.0), b: (length, 0.0) },
        Segment { a: (length, 0.0), b: (length, width) },
        Segment { a: (length, width), b: (0.0, width) },
        Segment { a: (0.0, width), b: (0.0, 0.0) },
    ];
    Ok(Environment { walls, objects })
}

fn cross(a: (f64, f64), b: (f64, f64)) -> f64 {
    a.0 * b.1 - a.1 * b.0
}

/// Distance along the ray to a segment, if hit.
fn ray_segment(origin: (f64, f64), dir: (f64, f64), seg: &Segment) -> Option<f64> {
    let e = (seg.b.0 - seg.a.0, seg.b.1 - seg.a.1);
    let denom = cross(dir, e);
    if denom.abs() < 1e-15 {
        return None;
    }
    let ao = (seg.a.0 - origin.0, seg.a.1 - origin.1);
    let t = cross(ao, e) / denom;
    let u = cross(ao, dir) / denom;
    if t > 1e-12 && (0.0..=1.0).contains(&u) {
        Some(t)
    } else {
        None
    }
}

/// Distance along the ray to a circle, if hit.
fn ray_circle(origin: (f64, f64), dir: (f64, f64), center: (f64, f64), radius: f64) -> Option<f64> {
    let oc = (origin.0 - center.0, origin.1 - center.1);
    let b = oc.0 * dir.0 + oc.1 * dir.1;
    let c = oc.0 * oc.0 + oc.1 * oc.1 - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let sqrt_disc = disc.sqrt();
    let t_near = -b - sqrt_disc;
    if t_near > 1e-12 {
        return Some(t_near);
    }
    let t_far = -b + sqrt_disc;
    if t_far > 1e-12 {
        return Some(t_far);
    }
    None
}

/// Minimum positive intersection distance with any wall or object,
/// with objects taken at time `t`; `range_max` when nothing is hit.
pub fn raycast_at(
    env: &Environment,
    t: f64,
    origin: (f64, f64),
    direction_angle: f64,
    range_max: f64,
) -> f64 {
    let dir = (direction_angle.cos(), direction_angle.sin());
    let mut best = range_max;
    for seg in &env.walls {
        if let Some(d) = ray_segment(origin, dir, seg) {
            best = best.min(d);
        }
    }
    for obj in &env.objects {
        if let Some(d) = ray_circle(origin, dir, obj.center_at(t), obj.radius) {
            best = best.min(d);
        }
    }
    best
}

/// [`raycast_at`] with objects at their initial positions.
pub fn raycast(env: &Environment, origin: (f64, f64), direction_angle: f64, range_max: f64) -> f64 {
    raycast_at(env, 0.0, origin, direction_angle, range_max)
}

/// True if the open segment p..q crosses a wall or an object at time t.
pub fn segment_collides(env: &Environment, t: f64, p: (f64, f64), q: (f64, f64)) -> bool {
    let d = (q.0 - p.0, q.1 - p.1);
    let len = (d.0 * d.0 + d.1 * d.1).sqrt();
    if len < 1e-15 {
        for obj in &env.objects {
            let c = obj.center_at(t);
            let dist2 = (p.0 - c.0).powi(2) + (p.1 - c.1).powi(2);
            if dist2 < obj.radius * obj.radius {
                return true;
            }
        }
        return false;
    }
    let dir = (d.0 / len, d.1 / len);
    for seg in &env.walls {
        if let Some(hit) = ray_segment(p, dir, seg) {
            if hit <= len {
                return true;
            }
        }
    }
    for obj in &env.objects {
        let c = obj.center_at(t);
        if let Some(hit) = ray_circle(p, dir, c, obj.radius) {
            if hit <= len {
                return true;
            }
        }
        let dist2 = (p.0 - c.0).powi(2) + (p.1 - c.1).powi(2);
        if dist2 < obj.radius * obj.radius {
            return true;
        }
    }
    false
}
