//! Closed-form reference trajectories used by the test suites.
//!
//! A block released from rest on a uniform plane either stays put or slides
//! straight downhill with constant acceleration, so its position is an exact
//! quadratic in time. This module evaluates that formula directly and must
//! stay independent of the stepping integrator it is used to check.

use crate::physics::{ExperimentSpec, FrictionField, Vec3};
use crate::render::CameraModel;

/// q(t) = q0 + 1/2 a t^2 for a block released from rest.
#[derive(Debug, Clone, Copy)]
pub struct QuadraticSlide {
    pub q0: Vec3,
    pub accel: Vec3,
}

impl QuadraticSlide {
    pub fn position_at(&self, t: f64) -> Vec3 {
        self.q0.add(self.accel.scale(0.5 * t * t))
    }

    pub fn pixel_at(&self, cam: &CameraModel, t: f64) -> [f64; 2] {
        crate::render::project(cam, self.position_at(t))
    }
}

/// Closed-form trajectory for a from-rest experiment on homogeneous friction.
///
/// Panics on patch-grid fields, where the acceleration is not constant.
pub fn sliding_quadratic(spec: &ExperimentSpec) -> QuadraticSlide {
    let rho = match &spec.friction {
        FrictionField::Homogeneous { rho } => *rho,
        FrictionField::PatchGrid { .. } => panic!("closed form requires homogeneous friction"),
    };
    let n = spec.plane.normal;
    let g = Vec3::new(0.0, 0.0, -spec.gravity);
    let g_n = g.dot(n);
    let g_t = g.sub(n.scale(g_n));
    let slope = g_t.norm();
    let fric = rho * g_n.abs();
    let accel = if slope > fric { g_t.scale(1.0 - fric / slope) } else { Vec3::ZERO };
    let q0 = Vec3::new(spec.q0x, spec.q0y, spec.plane.height(spec.q0x, spec.q0y));
    QuadraticSlide { q0, accel }
}
