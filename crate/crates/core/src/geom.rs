//! Rigid 2D geometry and agent motion primitives.
//!
//! Everything lives in the BEV frame of the ego vehicle at the current
//! timestep: `x` forward, `y` left, headings counter-clockwise from `+x`.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Turn rates below this magnitude use the straight-line CTRA branch.
pub const CTRA_STRAIGHT_EPS: f64 = 1e-6;

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    // rem_euclid maps -pi to pi already; keep the closed upper end.
    if r <= -PI {
        r += 2.0 * PI;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self {
            x,
            y,
            heading: wrap_angle(heading),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.heading.is_finite()
    }

    /// Interpolates position linearly and heading along the shortest arc.
    pub fn lerp(&self, other: &Pose2, w: f64) -> Pose2 {
        let dh = wrap_angle(other.heading - self.heading);
        Pose2::new(
            self.x + (other.x - self.x) * w,
            self.y + (other.y - self.y) * w,
            self.heading + dh * w,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FlowVec {
    pub dx: f64,
    pub dy: f64,
}

impl FlowVec {
    pub fn new(dx: f64, dy: f64) -> Self {
        Self { dx, dy }
    }

    pub fn norm(&self) -> f64 {
        self.dx.hypot(self.dy)
    }
}

/// Rigid box with its CTRA kinematic state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxState {
    pub pose: Pose2,
    pub length: f64,
    pub width: f64,
    pub speed: f64,
    pub accel: f64,
    pub turn_rate: f64,
}

impl BoxState {
    pub fn is_valid(&self) -> bool {
        self.pose.is_finite()
            && self.width > 0.0
            && self.length >= self.width
            && self.speed >= 0.0
            && self.accel.is_finite()
            && self.turn_rate.is_finite()
    }

    /// Corners in counter-clockwise order starting at front-left.
    pub fn corners(&self) -> [(f64, f64); 4] {
        let (hl, hw) = (self.length / 2.0, self.width / 2.0);
        [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)].map(|p| se2_apply(&self.pose, p))
    }

    /// Same box placed at another pose.
    pub fn with_pose(&self, pose: Pose2) -> BoxState {
        BoxState { pose, ..*self }
    }
}

/// Rotates `point` by the pose heading, then translates by the pose position.
pub fn se2_apply(pose: &Pose2, point: (f64, f64)) -> (f64, f64) {
    let (s, c) = pose.heading.sin_cos();
    (
        c * point.0 - s * point.1 + pose.x,
        s * point.0 + c * point.1 + pose.y,
    )
}

/// Expresses a world point in the frame of `pose`.
pub fn se2_inverse(pose: &Pose2, point: (f64, f64)) -> (f64, f64) {
    let (s, c) = pose.heading.sin_cos();
    let (dx, dy) = (point.0 - pose.x, point.1 - pose.y);
    (c * dx + s * dy, -s * dx + c * dy)
}

/// Closed-boundary containment test.
pub fn point_in_box(b: &BoxState, point: (f64, f64)) -> bool {
    let (u, v) = se2_inverse(&b.pose, point);
    u.abs() <= b.length / 2.0 && v.abs() <= b.width / 2.0
}

/// Separating-axis test for two oriented rectangles (touching counts as overlap).
pub fn boxes_overlap(a: &BoxState, b: &BoxState) -> bool {
    let ca = a.corners();
    let cb = b.corners();
    let axes = [
        a.pose.heading,
        a.pose.heading + PI / 2.0,
        b.pose.heading,
        b.pose.heading + PI / 2.0,
    ];
    for th in axes {
        let (s, c) = th.sin_cos();
        let proj = |pts: &[(f64, f64); 4]| {
            pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                let d = p.0 * c + p.1 * s;
                (lo.min(d), hi.max(d))
            })
        };
        let (alo, ahi) = proj(&ca);
        let (blo, bhi) = proj(&cb);
        if ahi < blo || bhi < alo {
            return false;
        }
    }
    true
}

/// Closed-form CTRA pose/speed update without the stop clamp.
fn ctra_closed_form(pose: &Pose2, v: f64, a: f64, w: f64, dt: f64) -> (Pose2, f64) {
    let th = pose.heading;
    let v1 = v + a * dt;
    if w.abs() < CTRA_STRAIGHT_EPS {
        let d = v * dt + 0.5 * a * dt * dt;
        let (s, c) = th.sin_cos();
        return (Pose2::new(pose.x + d * c, pose.y + d * s, th + w * dt), v1);
    }
    let th1 = th + w * dt;
    let (s0, c0) = th.sin_cos();
    let (s1, c1) = th1.sin_cos();
    let w2 = w * w;
    let x = pose.x + (v1 * w * s1 + a * c1 - v * w * s0 - a * c0) / w2;
    let y = pose.y + (-v1 * w * c1 + a * s1 + v * w * c0 - a * s0) / w2;
    (Pose2::new(x, y, th1), v1)
}

/// Advances a box under constant turn rate and acceleration.
///
/// Speed is clamped at zero: a decelerating agent stops at `-v/a` and only
/// keeps rotating afterwards. Negative `dt` rolls the state backwards.
pub fn ctra_step(state: &BoxState, dt: f64) -> BoxState {
    let (v, a, w) = (state.speed, state.accel, state.turn_rate);
    let (pose, speed) = if dt > 0.0 && a < 0.0 && v + a * dt < 0.0 {
        let t_stop = -v / a;
        let (p, _) = ctra_closed_form(&state.pose, v, a, w, t_stop);
        (Pose2::new(p.x, p.y, p.heading + w * (dt - t_stop)), 0.0)
    } else {
        let (p, v1) = ctra_closed_form(&state.pose, v, a, w, dt);
        (p, v1.max(0.0))
    };
    BoxState {
        pose,
        speed,
        ..*state
    }
}

/// Backwards flow of the material point at `point_at_cur`: where it was under
/// `pose_prev`, minus where it is now.
pub fn rigid_backwards_flow(pose_prev: &Pose2, pose_cur: &Pose2, point_at_cur: (f64, f64)) -> FlowVec {
    let body = se2_inverse(pose_cur, point_at_cur);
    let prev = se2_apply(pose_prev, body);
    FlowVec::new(prev.0 - point_at_cur.0, prev.1 - point_at_cur.1)
}
