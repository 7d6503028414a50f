//! Classical reference predictors: least-squares polynomial extrapolation
//! over detector-estimated positions, and a regress-then-resimulate analog
//! that recovers physical parameters with a small network and hands them to
//! the exact physics engine.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, RecordingProtocol, SequenceRecord, Split};
use crate::models::{stack_frames, ModelError, TrainConfig, TrainSummary, T0};
use crate::physics::{
    self, friction_at, BodyState, FrictionField, PhysicsError, PlaneSpec, Vec3, PHYSICS_HZ,
};
use crate::render::{self, CameraModel, Image, RenderError};
use crate::tensor::{init_gaussian, NodeId, OptimizerState, Tape, Tensor, TensorError};

/// Observed prefix granted to the polynomial baselines (longer than the
/// networks' T0 on purpose).
pub const POLYFIT_FRAMES: usize = 10;
/// Width of the regressed parameter vector:
/// (theta_x, theta_y, rho, T0 positions, final velocity).
pub const SIMNET_TARGETS: usize = 3 + 2 * T0 + 2;

#[derive(Debug, thiserror::Error)]
pub enum BaselineError {
    #[error("no object found in frame {frame}")]
    NoObject { frame: usize },
    #[error("need {needed} frames, got {got}")]
    TooFewFrames { needed: usize, got: usize },
    #[error("checkpoint does not describe a parameter regressor: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Positions of the block in the first `POLYFIT_FRAMES` frames, found by the
/// red-channel detector.
pub fn estimate_positions(frames: &[Image]) -> Result<Vec<[f64; 2]>, BaselineError> {
    if frames.len() < POLYFIT_FRAMES {
        return Err(BaselineError::TooFewFrames {
            needed: POLYFIT_FRAMES,
            got: frames.len(),
        });
    }
    frames[..POLYFIT_FRAMES]
        .iter()
        .enumerate()
        .map(|(i, f)| match render::argmax_red(f) {
            Ok(p) => Ok(p),
            Err(RenderError::NoObject) => Err(BaselineError::NoObject { frame: i }),
        })
        .collect()
}

/// Least-squares polynomial in the frame index, fit per image axis.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolyFit {
    pub degree: usize,
    /// coeffs[axis][k] multiplies t^k; unused high orders are zero.
    pub coeffs: [[f64; 3]; 2],
}

impl PolyFit {
    pub fn eval(&self, t: f64) -> [f64; 2] {
        let mut out = [0.0; 2];
        for (axis, c) in self.coeffs.iter().enumerate() {
            out[axis] = c[0] + c[1] * t + c[2] * t * t;
        }
        out
    }
}

/// Ordinary least squares of degree 1 or 2 over frame indices 0..points.len().
pub fn polyfit(points: &[[f64; 2]], degree: usize) -> PolyFit {
    assert!(degree == 1 || degree == 2, "degree must be 1 or 2");
    assert!(points.len() > degree, "underdetermined fit");
    let n = points.len();
    let terms = degree + 1;
    // Normal equations: moments[i][j] = sum t^(i+j), rhs[axis][i] = sum y t^i.
    let mut m = [[0.0f64; 3]; 3];
    let mut rhs = [[0.0f64; 3]; 2];
    for (t, p) in points.iter().enumerate() {
        let t = t as f64;
        let pow = [1.0, t, t * t];
        for i in 0..terms {
            for j in 0..terms {
                m[i][j] += pow[i] * pow[j];
            }
            for axis in 0..2 {
                rhs[axis][i] += p[axis] * pow[i];
            }
        }
    }
    let _ = n;
    let mut coeffs = [[0.0f64; 3]; 2];
    for axis in 0..2 {
        coeffs[axis] = solve3(m, rhs[axis], terms);
    }
    PolyFit { degree, coeffs }
}

/// Gaussian elimination with partial pivoting on the leading
/// `terms` x `terms` block.
fn solve3(mut m: [[f64; 3]; 3], mut b: [f64; 3], terms: usize) -> [f64; 3] {
    for col in 0..terms {
        let pivot = (col..terms)
            .max_by(|&a, &bi| m[a][col].abs().total_cmp(&m[bi][col].abs()))
            .unwrap();
        m.swap(col, pivot);
        b.swap(col, pivot);
        assert!(m[col][col] != 0.0, "singular normal equations");
        for row in col + 1..terms {
            let f = m[row][col] / m[col][col];
            for k in col..terms {
                m[row][k] -= f * m[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0f64; 3];
    for col in (0..terms).rev() {
        let mut acc = b[col];
        for k in col + 1..terms {
            acc -= m[col][k] * x[k];
        }
        x[col] = acc / m[col][col];
    }
    x
}

/// Fit the observed points and evaluate the polynomial at frames 0..t-1.
pub fn polyfit_extrapolate(points: &[[f64; 2]], degree: usize, t: usize) -> Vec<[f64; 2]> {
    let fit = polyfit(points, degree);
    (0..t).map(|i| fit.eval(i as f64)).collect()
}

/// Physical parameters regressed from the observed frames.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimNetParams {
    pub theta_x: f64,
    pub theta_y: f64,
    /// Friction coefficient, clamped to be non-negative.
    pub rho: f64,
    /// Pixel positions of the T0 observed frames.
    pub positions: [[f64; 2]; T0],
    /// Pixel displacement per kept frame at frame T0-1.
    pub velocity: [f64; 2],
}

impl SimNetParams {
    fn from_vec(y: &[f64]) -> Self {
        assert_eq!(y.len(), SIMNET_TARGETS);
        let mut positions = [[0.0; 2]; T0];
        for (i, p) in positions.iter_mut().enumerate() {
            *p = [y[3 + 2 * i], y[4 + 2 * i]];
        }
        SimNetParams {
            theta_x: y[0],
            theta_y: y[1],
            rho: y[2].max(0.0),
            positions,
            velocity: [y[SIMNET_TARGETS - 2], y[SIMNET_TARGETS - 1]],
        }
    }
}

/// Ground-truth target vector for one record, in the order SimNet regresses.
pub fn simnet_targets(rec: &SequenceRecord) -> [f64; SIMNET_TARGETS] {
    let spec = &rec.experiment;
    let rho = match &spec.friction {
        FrictionField::Homogeneous { rho } => *rho,
        // Patch fields are not observable from T0 frames; supervise with the
        // coefficient under the starting position.
        f @ FrictionField::PatchGrid { .. } => friction_at(f, spec.initial_state().q),
    };
    let mut y = [0.0; SIMNET_TARGETS];
    y[0] = spec.plane.theta_x;
    y[1] = spec.plane.theta_y;
    y[2] = rho;
    for i in 0..T0 {
        y[3 + 2 * i] = rec.pixels_gt[i][0] as f64;
        y[4 + 2 * i] = rec.pixels_gt[i][1] as f64;
    }
    y[SIMNET_TARGETS - 2] = rec.vels_px[T0 - 1][0] as f64;
    y[SIMNET_TARGETS - 1] = rec.vels_px[T0 - 1][1] as f64;
    y
}

/// Per-dimension mean and standard deviation of the regression targets over
/// the training split. Constant dimensions get a floored std so their
/// standardized target is exactly zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const STD_FLOOR: f64 = 1e-6;

impl TargetStats {
    pub fn from_targets(targets: &[[f64; SIMNET_TARGETS]]) -> Self {
        assert!(!targets.is_empty());
        let n = targets.len() as f64;
        let mut mean = vec![0.0; SIMNET_TARGETS];
        for t in targets {
            for (m, v) in mean.iter_mut().zip(t) {
                *m += v / n;
            }
        }
        let mut std = vec![0.0; SIMNET_TARGETS];
        for t in targets {
            for ((s, v), m) in std.iter_mut().zip(t).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        for s in std.iter_mut() {
            *s = s.sqrt().max(STD_FLOOR);
        }
        TargetStats { mean, std }
    }

    fn standardize(&self, y: &[f64; SIMNET_TARGETS]) -> [f64; SIMNET_TARGETS] {
        let mut z = [0.0; SIMNET_TARGETS];
        for i in 0..SIMNET_TARGETS {
            z[i] = (y[i] - self.mean[i]) / self.std[i];
        }
        z
    }

    fn destandardize(&self, z: &[f64]) -> [f64; SIMNET_TARGETS] {
        let mut y = [0.0; SIMNET_TARGETS];
        for i in 0..SIMNET_TARGETS {
            y[i] = z[i] * self.std[i] + self.mean[i];
        }
        y
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimNetConfig {
    pub image_size: usize,
    pub channels: usize,
    pub vector_dim: usize,
}

impl SimNetConfig {
    pub fn new(image_size: usize) -> Self {
        SimNetConfig { image_size, channels: 64, vector_dim: 128 }
    }

    fn extractor_depth(&self) -> usize {
        assert!(
            self.image_size >= 8 && self.image_size.is_power_of_two(),
            "image size must be a power of two >= 8"
        );
        (self.image_size / 8).trailing_zeros() as usize
    }
}

/// The parameter regressor: the vector feature extractor topped by one
/// fully-connected layer emitting the standardized target vector.
#[derive(Debug, Clone)]
pub struct SimNet {
    pub cfg: SimNetConfig,
    pub stats: TargetStats,
    names: Vec<String>,
    tensors: Vec<Tensor<f32>>,
}

impl SimNet {
    pub fn new(cfg: SimNetConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors: Vec<Tensor<f32>> = Vec::new();
        let depth = cfg.extractor_depth();
        let mut cin = 3 * T0;
        for i in 0..depth {
            let cout = if i + 1 == depth { cfg.channels } else { 16 << i };
            names.push(format!("ext.conv{i}.w"));
            tensors.push(init_gaussian(&mut rng, vec![3, 3, cin, cout], 9 * cin));
            names.push(format!("ext.conv{i}.b"));
            tensors.push(init_gaussian(&mut rng, vec![cout], 9 * cin));
            cin = cout;
        }
        let grid_flat = 8 * 8 * cin;
        names.push("ext.fc.w".into());
        tensors.push(init_gaussian(&mut rng, vec![cfg.vector_dim, grid_flat], grid_flat));
        names.push("ext.fc.b".into());
        tensors.push(init_gaussian(&mut rng, vec![cfg.vector_dim], grid_flat));
        names.push("head.w".into());
        tensors.push(init_gaussian(&mut rng, vec![SIMNET_TARGETS, cfg.vector_dim], cfg.vector_dim));
        names.push("head.b".into());
        tensors.push(init_gaussian(&mut rng, vec![SIMNET_TARGETS], cfg.vector_dim));
        let stats = TargetStats {
            mean: vec![0.0; SIMNET_TARGETS],
            std: vec![1.0; SIMNET_TARGETS],
        };
        SimNet { cfg, stats, names, tensors }
    }

    /// Standardized output node for the observed frames.
    fn forward(
        &self,
        tape: &mut Tape<f32>,
        bound: &[NodeId],
        frames: &[Image],
    ) -> Result<NodeId, BaselineError> {
        let input = stack_frames::<f32>(frames, self.cfg.image_size)?;
        let mut x = tape.constant(input);
        let depth = self.cfg.extractor_depth();
        for i in 0..depth {
            let y = tape.conv2d(x, bound[2 * i], bound[2 * i + 1], 2, 1);
            x = tape.relu(y);
        }
        let flat = tape.reshape(x, vec![8 * 8 * self.cfg.channels]);
        let fc = 2 * depth;
        let v = tape.affine(bound[fc], flat, bound[fc + 1]);
        let v = tape.relu(v);
        Ok(tape.affine(bound[fc + 2], v, bound[fc + 3]))
    }

    fn bind(&self, tape: &mut Tape<f32>, needs_grad: bool) -> Vec<NodeId> {
        self.tensors.iter().map(|t| tape.leaf(t.clone(), needs_grad)).collect()
    }

    /// Regress physical parameters from the first T0 frames.
    pub fn regress(&self, frames: &[Image]) -> Result<SimNetParams, BaselineError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let out = self.forward(&mut tape, &bound, frames)?;
        let z: Vec<f64> = tape.value(out).data().iter().map(|v| *v as f64).collect();
        let y = self.stats.destandardize(&z);
        Ok(SimNetParams::from_vec(&y))
    }

    pub fn save(
        &self,
        path: &Path,
        tcfg: &TrainConfig,
        summary: &TrainSummary,
    ) -> Result<(), BaselineError> {
        let header = serde_json::json!({
            "kind": "simnet",
            "config": self.cfg,
            "stats": self.stats,
            "train": tcfg,
            "summary": summary,
        });
        let pairs: Vec<(String, Tensor<f32>)> = self
            .names
            .iter()
            .cloned()
            .zip(self.tensors.iter().cloned())
            .collect();
        crate::tensor::save_checkpoint(path, &header, &pairs)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(SimNet, serde_json::Value), BaselineError> {
        let (header, pairs) = crate::tensor::load_checkpoint(path)?;
        if header.get("kind").and_then(|k| k.as_str()) != Some("simnet") {
            return Err(BaselineError::BadCheckpoint(format!(
                "kind = {:?}",
                header.get("kind")
            )));
        }
        let cfg: SimNetConfig =
            serde_json::from_value(header["config"].clone())
                .map_err(|e| BaselineError::BadCheckpoint(e.to_string()))?;
        let stats: TargetStats = serde_json::from_value(header["stats"].clone())
            .map_err(|e| BaselineError::BadCheckpoint(e.to_string()))?;
        let mut net = SimNet::new(cfg, 0);
        net.stats = stats;
        if net.names.len() != pairs.len() {
            return Err(BaselineError::BadCheckpoint(format!(
                "expected {} parameters, found {}",
                net.names.len(),
                pairs.len()
            )));
        }
        for (i, (name, tensor)) in pairs.into_iter().enumerate() {
            if net.names[i] != name || net.tensors[i].shape() != tensor.shape() {
                return Err(BaselineError::BadCheckpoint(format!(
                    "parameter mismatch at {i}: {name}"
                )));
            }
            net.tensors[i] = tensor;
        }
        Ok((net, header))
    }
}

/// Train the regressor on the train split with the standardized L2 loss,
/// early-stopping on the validation value of the same loss.
pub fn train_simnet(
    cfg: &SimNetConfig,
    tcfg: &TrainConfig,
    dataset: &Dataset,
    log_path: Option<&Path>,
) -> Result<(SimNet, TrainSummary), BaselineError> {
    let train: Vec<&SequenceRecord> = dataset.records_in(Split::Train).collect();
    let val: Vec<&SequenceRecord> = dataset.records_in(Split::Val).collect();
    if train.is_empty() {
        return Err(ModelError::EmptyDataset("no training sequences".into()).into());
    }
    if val.is_empty() {
        return Err(ModelError::EmptyDataset("no validation sequences".into()).into());
    }

    let targets: Vec<[f64; SIMNET_TARGETS]> =
        train.iter().map(|r| simnet_targets(r)).collect();
    let mut net = SimNet::new(cfg.clone(), tcfg.seed);
    net.stats = TargetStats::from_targets(&targets);
    let ztrain: Vec<[f64; SIMNET_TARGETS]> =
        targets.iter().map(|y| net.stats.standardize(y)).collect();
    let zval: Vec<[f64; SIMNET_TARGETS]> = val
        .iter()
        .map(|r| net.stats.standardize(&simnet_targets(r)))
        .collect();

    let mut opt = OptimizerState::new(tcfg.opt, &net.tensors);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(tcfg.seed ^ 0x9E37_79B9_7F4A_7C15);
    let mut indices: Vec<usize> = (0..train.len()).collect();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_tensors = net.tensors.clone();
    let mut epochs_run = 0;
    let mut final_train_loss = f64::NAN;
    let mut log = String::from("epoch,train_loss,val_loss,seconds\n");

    for epoch in 0..tcfg.max_epochs {
        let started = std::time::Instant::now();
        indices.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (batch_no, chunk) in indices.chunks(tcfg.batch_size).enumerate() {
            let mut grads: Vec<Tensor<f32>> = net
                .tensors
                .iter()
                .map(|p| Tensor::zeros(p.shape().to_vec()))
                .collect();
            let mut batch_loss = 0.0;
            for &i in chunk {
                let mut tape = Tape::new();
                let bound = net.bind(&mut tape, true);
                let out = net.forward(&mut tape, &bound, &train[i].frames)?;
                let z = tape.constant(Tensor::new(
                    vec![SIMNET_TARGETS],
                    ztrain[i].iter().map(|v| *v as f32).collect(),
                ));
                let d = tape.sub(out, z);
                let sq = tape.mul(d, d);
                let s = tape.sum(sq);
                let loss = tape.scale(s, 1.0 / SIMNET_TARGETS as f64);
                let lv = tape.value(loss).item() as f64;
                if !lv.is_finite() {
                    return Err(ModelError::NonFiniteLoss { epoch, batch: batch_no }.into());
                }
                batch_loss += lv;
                tape.backward(loss);
                let inv = 1.0 / chunk.len() as f32;
                for (gi, acc) in grads.iter_mut().enumerate() {
                    let g = tape.grad(bound[gi]).expect("missing gradient");
                    for (a, b) in acc.data_mut().iter_mut().zip(g) {
                        *a += *b * inv;
                    }
                }
            }
            opt.step(&mut net.tensors, &grads);
            epoch_loss += batch_loss / chunk.len() as f64;
            batches += 1;
        }
        let train_loss = epoch_loss / batches as f64;
        let val_loss = simnet_val_loss(&net, &val, &zval)?;
        if !val_loss.is_finite() {
            return Err(ModelError::NonFiniteLoss { epoch, batch: usize::MAX }.into());
        }
        epochs_run = epoch + 1;
        final_train_loss = train_loss;
        log.push_str(&format!(
            "{},{:.9},{:.9},{:.3}\n",
            epoch,
            train_loss,
            val_loss,
            started.elapsed().as_secs_f64()
        ));
        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best_tensors = net.tensors.clone();
        }
        if epoch >= best_epoch + tcfg.patience {
            break;
        }
    }
    if let Some(path) = log_path {
        std::fs::write(path, log).map_err(|e| {
            BaselineError::from(ModelError::Io { path: path.display().to_string(), source: e })
        })?;
    }
    net.tensors = best_tensors;
    let summary = TrainSummary {
        epochs_run,
        best_epoch,
        best_val_metric: best_val,
        final_train_loss,
        det_reg_off_epoch: None,
        skipped_short: 0,
        train_sequences: train.len(),
        val_sequences: val.len(),
    };
    Ok((net, summary))
}

fn simnet_val_loss(
    net: &SimNet,
    val: &[&SequenceRecord],
    zval: &[[f64; SIMNET_TARGETS]],
) -> Result<f64, BaselineError> {
    let mut total = 0.0;
    for (rec, z) in val.iter().zip(zval) {
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, false);
        let out = net.forward(&mut tape, &bound, &rec.frames)?;
        let got = tape.value(out);
        for (g, want) in got.data().iter().zip(z) {
            let d = *g as f64 - want;
            total += d * d;
        }
    }
    Ok(total / (val.len() * SIMNET_TARGETS) as f64)
}

/// Predict pixel positions for frames 0..t-1 by re-simulating from the
/// regressed parameters. The observed frames replay the regressed positions;
/// from frame T0-1 onward the physics engine integrates the reconstructed
/// state at the recorded cadence.
pub fn simnet_predict(
    params: &SimNetParams,
    cam: &CameraModel,
    protocol: &RecordingProtocol,
    gravity: f64,
    t: usize,
) -> Result<Vec<[f64; 2]>, BaselineError> {
    assert!(t >= T0);
    let plane = PlaneSpec::new(params.theta_x, params.theta_y);
    if !(plane.normal.z > 0.0) || !params.theta_x.is_finite() || !params.theta_y.is_finite() {
        return Err(PhysicsError::InvalidSpec(params.theta_x, params.theta_y).into());
    }
    let friction = FrictionField::Homogeneous { rho: params.rho };
    let kept_dt = protocol.kept_dt();

    // Back-project the regressed frame-(T0-1) pixel state onto the plane.
    let last = params.positions[T0 - 1];
    let qx = (last[0] + cam.beta[0]) / cam.alpha;
    let qy = (last[1] + cam.beta[1]) / cam.alpha;
    let q = Vec3::new(qx, qy, plane.height(qx, qy));
    let vx = params.velocity[0] / (cam.alpha * kept_dt);
    let vy = params.velocity[1] / (cam.alpha * kept_dt);
    let n = plane.normal;
    let vz = -(n.x * vx + n.y * vy) / n.z;
    let v = Vec3::new(vx, vy, vz);
    let mut state = BodyState { q, v, at_rest: v.norm() <= physics::V_EPS };

    // Match the recorder: 120 Hz substeps, one kept frame every
    // subsample raw frames.
    let dt = 1.0 / PHYSICS_HZ as f64;
    let substeps = (PHYSICS_HZ / protocol.raw_fps) as usize * protocol.subsample;

    let mut out = Vec::with_capacity(t);
    out.extend_from_slice(&params.positions[..T0.min(t)]);
    for _ in T0..t {
        for _ in 0..substeps {
            state = physics::step(&state, &plane, &friction, dt, gravity);
        }
        out.push(render::project(cam, state.q));
    }
    Ok(out)
}

/// Exact parameters for a stored record, with the frame-(T0-1) state taken
/// from a fresh double-precision re-simulation of the record's experiment.
/// Feeding these to `simnet_predict` reproduces the stored trajectory.
pub fn gt_params(
    rec: &SequenceRecord,
    cam: &CameraModel,
    protocol: &RecordingProtocol,
) -> Result<SimNetParams, BaselineError> {
    let spec = &rec.experiment;
    let raw_needed = protocol.trim + protocol.subsample * (T0 - 1) + 1;
    let traj = physics::simulate(spec, cam, raw_needed, protocol.raw_fps)?;
    if traj.pixels.len() < raw_needed {
        return Err(BaselineError::TooFewFrames {
            needed: raw_needed,
            got: traj.pixels.len(),
        });
    }
    let mut positions = [[0.0; 2]; T0];
    for (j, p) in positions.iter_mut().enumerate() {
        *p = traj.pixels[protocol.trim + protocol.subsample * j];
    }
    let v = traj.velocities3d[protocol.trim + protocol.subsample * (T0 - 1)];
    let kept_dt = protocol.kept_dt();
    let rho = match &spec.friction {
        FrictionField::Homogeneous { rho } => *rho,
        f @ FrictionField::PatchGrid { .. } => friction_at(f, spec.initial_state().q),
    };
    Ok(SimNetParams {
        theta_x: spec.plane.theta_x,
        theta_y: spec.plane.theta_y,
        rho,
        positions,
        velocity: [v.x * cam.alpha * kept_dt, v.y * cam.alpha * kept_dt],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_dataset, ScenarioConfig};
    use crate::physics::Scenario;

    #[test]
    fn estimates_known_red_pixels() {
        let mut frames = Vec::new();
        for i in 0..POLYFIT_FRAMES {
            let mut img = Image::black(32, 32);
            img.data[3 * (32 * (i + 2) + (i + 5))] = 255;
            frames.push(img);
        }
        let got = estimate_positions(&frames).unwrap();
        for (i, p) in got.iter().enumerate() {
            assert_eq!(*p, [(i + 5) as f64, (i + 2) as f64]);
        }
    }

    #[test]
    fn reports_no_object_with_frame_index() {
        let mut frames: Vec<Image> = (0..POLYFIT_FRAMES)
            .map(|i| {
                let mut img = Image::black(16, 16);
                img.data[3 * (16 * 4 + i)] = 200;
                img
            })
            .collect();
        frames[3] = Image::black(16, 16);
        match estimate_positions(&frames) {
            Err(BaselineError::NoObject { frame: 3 }) => {}
            other => panic!("expected NoObject at 3, got {other:?}"),
        }
        match estimate_positions(&frames[..4]) {
            Err(BaselineError::TooFewFrames { needed: 10, got: 4 }) => {}
            other => panic!("expected TooFewFrames, got {other:?}"),
        }
    }

    #[test]
    fn constant_points_extrapolate_constant() {
        let pts = vec![[7.5, -2.0]; POLYFIT_FRAMES];
        for degree in [1, 2] {
            let out = polyfit_extrapolate(&pts, degree, 50);
            assert_eq!(out.len(), 50);
            for p in out {
                assert!((p[0] - 7.5).abs() < 1e-9 && (p[1] + 2.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn quadratic_fit_recovers_quadratic_exactly() {
        let pts: Vec<[f64; 2]> = (0..POLYFIT_FRAMES)
            .map(|t| [(t * t) as f64, 3.0 + 0.5 * t as f64])
            .collect();
        let out = polyfit_extrapolate(&pts, 2, 41);
        assert!((out[40][0] - 1600.0).abs() < 1e-6, "got {}", out[40][0]);
        assert!((out[40][1] - 23.0).abs() < 1e-6);
    }

    #[test]
    fn linear_fit_of_squares_is_nine_t_minus_twelve() {
        let pts: Vec<[f64; 2]> = (0..POLYFIT_FRAMES).map(|t| [(t * t) as f64, 0.0]).collect();
        let fit = polyfit(&pts, 1);
        assert!((fit.coeffs[0][0] + 12.0).abs() < 1e-9, "intercept {}", fit.coeffs[0][0]);
        assert!((fit.coeffs[0][1] - 9.0).abs() < 1e-9, "slope {}", fit.coeffs[0][1]);
        let out = polyfit_extrapolate(&pts, 1, 41);
        assert!((out[40][0] - 348.0).abs() < 1e-9);
        // Accelerating sequence: the linear error grows with the horizon.
        let err20 = (out[19][0] - (19.0 * 19.0)).abs();
        let err40 = (out[40][0] - 1600.0).abs();
        assert!(err40 >= err20);
        assert!((err40 - 1252.0).abs() < 1e-9);
    }

    fn s1_dataset(count: usize, seed: u64) -> (tempfile::TempDir, Dataset) {
        let dir = tempfile::tempdir().unwrap();
        let cam = CameraModel::with_size(16);
        let protocol = RecordingProtocol::for_camera(&cam);
        let mut cfg = ScenarioConfig::new(Scenario::S1, count, seed);
        cfg.splits = [0.5, 0.25, 0.25];
        generate_dataset(&cfg, &cam, &protocol, dir.path()).unwrap();
        let ds = Dataset::load(&dir.path().join("s1.manifest.json"), None).unwrap();
        (dir, ds)
    }

    #[test]
    fn untrained_simnet_is_finite_and_clamps_rho() {
        let (_dir, ds) = s1_dataset(2, 5);
        let rec = ds.records_in(Split::Train).next().unwrap();
        let mut net = SimNet::new(SimNetConfig::new(16), 3);
        let params = net.regress(&rec.frames).unwrap();
        assert!(params.theta_x.is_finite() && params.velocity[0].is_finite());
        // Force a negative raw friction through the de-standardization.
        net.stats.mean[2] = -5.0;
        let params = net.regress(&rec.frames).unwrap();
        assert_eq!(params.rho, 0.0);
    }

    #[test]
    fn engine_identity_reproduces_stored_ground_truth() {
        let (_dir, ds) = s1_dataset(8, 11);
        let cam = &ds.manifest.camera;
        let protocol = &ds.manifest.protocol;
        for rec in &ds.records {
            let params = gt_params(rec, cam, protocol).unwrap();
            let pred =
                simnet_predict(&params, cam, protocol, rec.experiment.gravity, rec.len()).unwrap();
            for (p, g) in pred.iter().zip(&rec.pixels_gt) {
                assert_eq!(p[0] as f32, g[0], "x mismatch");
                assert_eq!(p[1] as f32, g[1], "y mismatch");
            }
        }
    }

    #[test]
    fn static_parameters_predict_constant_rest() {
        let cam = CameraModel::default();
        let protocol = RecordingProtocol::default();
        let params = SimNetParams {
            theta_x: 0.0,
            theta_y: 0.1,
            rho: 2.0,
            positions: [[60.0, 60.0]; T0],
            velocity: [0.0, 0.0],
        };
        let pred = simnet_predict(&params, &cam, &protocol, 9.81, 30).unwrap();
        for p in &pred {
            assert!((p[0] - 60.0).abs() < 1e-9 && (p[1] - 60.0).abs() < 1e-9);
        }
    }

    #[test]
    fn invalid_angles_are_rejected() {
        let cam = CameraModel::default();
        let protocol = RecordingProtocol::default();
        let params = SimNetParams {
            theta_x: 0.0,
            theta_y: 2.0,
            rho: 0.0,
            positions: [[60.0, 60.0]; T0],
            velocity: [0.0, 0.0],
        };
        match simnet_predict(&params, &cam, &protocol, 9.81, 10) {
            Err(BaselineError::Physics(PhysicsError::InvalidSpec(_, _))) => {}
            other => panic!("expected InvalidSpec, got {other:?}"),
        }
    }

    #[test]
    fn simnet_overfits_one_sequence_parameters() {
        let (_dir, ds) = s1_dataset(2, 21);
        let cfg = SimNetConfig { image_size: 16, channels: 8, vector_dim: 32 };
        let mut tcfg = TrainConfig::new(5, 1);
        tcfg.max_epochs = 60;
        tcfg.patience = 60;
        tcfg.batch_size = 1;
        tcfg.opt.lr = 1e-3;
        let (net, summary) = train_simnet(&cfg, &tcfg, &ds, None).unwrap();
        assert_eq!(summary.train_sequences, 1);
        let rec = ds.records_in(Split::Train).next().unwrap();
        let truth = simnet_targets(rec);
        let got = net.regress(&rec.frames).unwrap();
        assert!((got.theta_x - truth[0]).abs() < 1e-2, "theta_x {} vs {}", got.theta_x, truth[0]);
        assert!((got.theta_y - truth[1]).abs() < 1e-2);
        assert!((got.rho - truth[2]).abs() < 1e-2);
    }

    #[test]
    fn simnet_checkpoint_round_trips() {
        let (_dir, ds) = s1_dataset(4, 31);
        let cfg = SimNetConfig { image_size: 16, channels: 8, vector_dim: 32 };
        let mut tcfg = TrainConfig::new(5, 2);
        tcfg.max_epochs = 2;
        tcfg.batch_size = 2;
        let (net, summary) = train_simnet(&cfg, &tcfg, &ds, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("simnet.ckpt");
        net.save(&path, &tcfg, &summary).unwrap();
        let (loaded, header) = SimNet::load(&path).unwrap();
        assert_eq!(header["kind"], "simnet");
        let rec = ds.records_in(Split::Test).next().unwrap();
        let a = net.regress(&rec.frames).unwrap();
        let b = loaded.regress(&rec.frames).unwrap();
        assert_eq!(a.theta_x, b.theta_x);
        assert_eq!(a.positions, b.positions);
    }
}
