//! Exact simulation of a block sliding on an inclined plane under gravity
//! and Coulomb friction.
//!
//! The block is treated as a point mass constrained to the plane. Within one
//! integration substep the acceleration is constant, so the update is the
//! exact solution of the ODE on that interval; if friction decelerates the
//! block through zero velocity the update is split at the zero crossing.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::render::CameraModel;

/// Physics substep rate, fixed at 120 Hz.
pub const PHYSICS_HZ: u32 = 120;

/// Velocity threshold for the moving/static switch, in world-units/s.
pub const V_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum PhysicsError {
    #[error("initial position ({0:.4}, {1:.4}) projects outside the image")]
    InvalidSpec(f64, f64),
    #[error("render fps {0} does not divide the {PHYSICS_HZ} Hz physics rate")]
    BadRenderRate(u32),
}

/// Minimal 3-vector; everything here is f64 world units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }

    pub fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

/// Inclined plane through the origin, described by the two tilt angles that
/// generated its unit normal.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PlaneSpec {
    pub theta_x: f64,
    pub theta_y: f64,
    pub normal: Vec3,
}

impl PlaneSpec {
    pub fn new(theta_x: f64, theta_y: f64) -> Self {
        PlaneSpec { theta_x, theta_y, normal: plane_normal(theta_x, theta_y) }
    }

    /// Plane height z(x, y) solving <n, q> = 0.
    pub fn height(&self, x: f64, y: f64) -> f64 {
        -(self.normal.x * x + self.normal.y * y) / self.normal.z
    }

    /// Removes the normal component so `v` lies in the plane.
    pub fn project_onto(&self, v: Vec3) -> Vec3 {
        v.sub(self.normal.scale(self.normal.dot(v)))
    }
}

/// Unit normal of the plane obtained by rotating the Z axis: R_y(theta_y) * R_x(theta_x) * z.
pub fn plane_normal(theta_x: f64, theta_y: f64) -> Vec3 {
    let (sx, cx) = theta_x.sin_cos();
    let (sy, cy) = theta_y.sin_cos();
    // R_x(tx) * z = (0, -sx, cx); then R_y(ty) applied to that.
    Vec3::new(sy * cx, -sx, cy * cx)
}

/// Coulomb friction coefficient over the plane.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum FrictionField {
    Homogeneous { rho: f64 },
    /// 10x10 grid of coefficients over the square [-extent, extent]^2,
    /// each scaled by `scale_factor` when queried.
    PatchGrid { rhos: Vec<f64>, extent: f64, scale_factor: f64 },
}

pub const PATCH_GRID_SIDE: usize = 10;

impl FrictionField {
    pub fn patch_grid(rhos: Vec<f64>, extent: f64, scale_factor: f64) -> Self {
        assert_eq!(rhos.len(), PATCH_GRID_SIDE * PATCH_GRID_SIDE, "patch grid must be 10x10");
        assert!(rhos.iter().all(|r| *r >= 0.0), "friction coefficients must be >= 0");
        FrictionField::PatchGrid { rhos, extent, scale_factor }
    }
}

/// Friction coefficient at world position `q`. Patch lookups clamp at the
/// grid borders.
pub fn friction_at(field: &FrictionField, q: Vec3) -> f64 {
    match field {
        FrictionField::Homogeneous { rho } => *rho,
        FrictionField::PatchGrid { rhos, extent, scale_factor } => {
            let cell = 2.0 * extent / PATCH_GRID_SIDE as f64;
            let ix = (((q.x + extent) / cell).floor() as i64).clamp(0, PATCH_GRID_SIDE as i64 - 1);
            let iy = (((q.y + extent) / cell).floor() as i64).clamp(0, PATCH_GRID_SIDE as i64 - 1);
            scale_factor * rhos[iy as usize * PATCH_GRID_SIDE + ix as usize]
        }
    }
}

/// Instantaneous state of the block on the plane.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BodyState {
    pub q: Vec3,
    pub v: Vec3,
    pub at_rest: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    S0,
    S1,
    S2,
}

/// One sampled experiment: initial position, plane, friction field plus the
/// bookkeeping needed to regenerate it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub q0x: f64,
    pub q0y: f64,
    pub plane: PlaneSpec,
    pub friction: FrictionField,
    pub scenario: Scenario,
    pub seed: u64,
    pub gravity: f64,
    pub mass: f64,
}

pub const DEFAULT_GRAVITY: f64 = 9.81;
pub const DEFAULT_MASS: f64 = 1.0;

impl ExperimentSpec {
    pub fn new(q0x: f64, q0y: f64, plane: PlaneSpec, friction: FrictionField, scenario: Scenario, seed: u64) -> Self {
        ExperimentSpec {
            q0x,
            q0y,
            plane,
            friction,
            scenario,
            seed,
            gravity: DEFAULT_GRAVITY,
            mass: DEFAULT_MASS,
        }
    }

    pub fn initial_state(&self) -> BodyState {
        BodyState {
            q: Vec3::new(self.q0x, self.q0y, self.plane.height(self.q0x, self.q0y)),
            v: Vec3::ZERO,
            at_rest: false,
        }
    }
}

/// Ground-truth trajectory at the recording cadence.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub timestamps: Vec<f64>,
    pub positions3d: Vec<Vec3>,
    pub velocities3d: Vec<Vec3>,
    pub pixels: Vec<[f64; 2]>,
    /// Frame index at which the block left the field of view, if it did.
    pub truncated_at: Option<usize>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }
}

/// Acceleration of a sliding point mass on the plane under gravity `g0` and
/// Coulomb coefficient `mu`.
///
/// Moving (`|v| > V_EPS`): tangential gravity minus kinetic friction opposing
/// the velocity. At rest: either the static break-away acceleration along the
/// downhill direction, or zero in static equilibrium.
pub fn sliding_acceleration(plane: &PlaneSpec, mu: f64, v: Vec3, g0: f64) -> Vec3 {
    let n = plane.normal;
    let g = Vec3::new(0.0, 0.0, -g0);
    let g_n = g.dot(n);
    let g_t = g.sub(n.scale(g_n));
    let fric = mu * g_n.abs();
    let speed = v.norm();
    if speed > V_EPS {
        g_t.sub(v.scale(fric / speed))
    } else {
        let slope = g_t.norm();
        if slope > fric {
            g_t.scale(1.0 - fric / slope)
        } else {
            Vec3::ZERO
        }
    }
}

/// True when friction can hold the block still at coefficient `mu`.
pub fn static_equilibrium(plane: &PlaneSpec, mu: f64, g0: f64) -> bool {
    let n = plane.normal;
    let g = Vec3::new(0.0, 0.0, -g0);
    let g_n = g.dot(n);
    let g_t = g.sub(n.scale(g_n));
    g_t.norm() <= mu * g_n.abs()
}

/// Advances the state by `dt` with the friction coefficient sampled at the
/// step start. Exact constant-acceleration update, split at the velocity
/// zero crossing when friction decelerates through zero.
pub fn step(state: &BodyState, plane: &PlaneSpec, field: &FrictionField, dt: f64, g0: f64) -> BodyState {
    let mu = friction_at(field, state.q);
    if state.at_rest && static_equilibrium(plane, mu, g0) {
        return *state;
    }

    let mut q = state.q;
    let mut v = state.v;
    let mut remaining = dt;
    let mut rest = false;

    while remaining > 0.0 {
        let a = sliding_acceleration(plane, mu, v, g0);
        let speed = v.norm();
        if speed <= V_EPS && a.norm() == 0.0 {
            rest = true;
            break;
        }
        if speed > V_EPS {
            // Rate of change of the velocity component along the current
            // direction of motion; negative means friction is braking.
            let along = a.dot(v.scale(1.0 / speed));
            if along < 0.0 {
                let t_stop = -speed / along;
                if t_stop <= remaining {
                    q = q.add(v.scale(t_stop)).add(a.scale(0.5 * t_stop * t_stop));
                    v = Vec3::ZERO;
                    remaining -= t_stop;
                    continue;
                }
            }
        }
        q = q.add(v.scale(remaining)).add(a.scale(0.5 * remaining * remaining));
        v = v.add(a.scale(remaining));
        remaining = 0.0;
    }

    // Keep the state on the plane.
    q = q.sub(plane.normal.scale(plane.normal.dot(q)));
    v = plane.project_onto(v);
    if !rest && v.norm() <= V_EPS && static_equilibrium(plane, mu, g0) {
        rest = true;
    }
    if rest {
        v = Vec3::ZERO;
    }
    BodyState { q, v, at_rest: rest }
}

/// Runs the experiment at the 120 Hz physics rate, recording one frame every
/// `PHYSICS_HZ / render_fps` substeps. Recording stops after `frames_max`
/// frames or as soon as the projected position leaves the image.
pub fn simulate(
    spec: &ExperimentSpec,
    cam: &CameraModel,
    frames_max: usize,
    render_fps: u32,
) -> Result<Trajectory, PhysicsError> {
    if render_fps == 0 || PHYSICS_HZ % render_fps != 0 {
        return Err(PhysicsError::BadRenderRate(render_fps));
    }
    let substeps = (PHYSICS_HZ / render_fps) as usize;
    let dt = 1.0 / PHYSICS_HZ as f64;

    let mut state = spec.initial_state();
    let first_px = crate::render::project(cam, state.q);
    if !cam.in_view(first_px) {
        return Err(PhysicsError::InvalidSpec(first_px[0], first_px[1]));
    }

    let mut traj = Trajectory {
        timestamps: Vec::with_capacity(frames_max),
        positions3d: Vec::with_capacity(frames_max),
        velocities3d: Vec::with_capacity(frames_max),
        pixels: Vec::with_capacity(frames_max),
        truncated_at: None,
    };

    for frame in 0..frames_max {
        if frame > 0 {
            for _ in 0..substeps {
                state = step(&state, &spec.plane, &spec.friction, dt, spec.gravity);
            }
        }
        let px = crate::render::project(cam, state.q);
        if !cam.in_view(px) {
            traj.truncated_at = Some(frame);
            break;
        }
        traj.timestamps.push(frame as f64 / render_fps as f64);
        traj.positions3d.push(state.q);
        traj.velocities3d.push(state.v);
        traj.pixels.push(px);
    }
    Ok(traj)
}
