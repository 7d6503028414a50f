//! Finite-difference validation of the reverse-mode gradients: one probe per
//! tape operation (covering each differentiable input), plus the four full
//! recurrent predictors end to end in 64-bit precision.

use crate::datagen::{SequenceRecord, Split};
use crate::models::{self, Model, ModelConfig, Variant, DET_REG_INIT, T0};
use crate::physics::{ExperimentSpec, FrictionField, PlaneSpec, Scenario, Vec3};
use crate::render::{self, CameraModel};
use crate::tensor::{grad_check, GradCheckReport, NodeId, Tape, Tensor};

const STEP: f64 = 1e-5;
const PROBES: usize = 24;

/// Deterministic smooth filler, bounded away from the relu kink.
fn ramp(shape: Vec<usize>, phase: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|i| {
            let v = (phase + 1.3 * i as f64).sin();
            if v.abs() < 0.05 {
                0.05 + v
            } else {
                v
            }
        })
        .collect();
    Tensor::new(shape, data)
}

/// Strictly positive filler for ln and divisor inputs.
fn positive(shape: Vec<usize>, phase: f64) -> Tensor<f64> {
    let mut t = ramp(shape, phase);
    for v in t.data_mut() {
        *v = 1.5 + 0.5 * *v;
    }
    t
}

/// Weighted scalar readout: sum(w * y) with a fixed non-uniform weight, so
/// index permutations in a backward pass cannot cancel out.
fn weighted_sum(tape: &mut Tape<f64>, y: NodeId, phase: f64) -> NodeId {
    let shape = tape.value(y).shape().to_vec();
    let w = tape.constant(ramp(shape, phase));
    let p = tape.mul(y, w);
    tape.sum(p)
}

fn check<F>(name: &str, x0: Tensor<f64>, tol: f64, f: F) -> GradCheckReport
where
    F: Fn(&mut Tape<f64>, NodeId) -> NodeId,
{
    grad_check(name, f, &x0, STEP, tol, PROBES)
}

/// One gradient probe per primitive operation and per differentiable input.
pub fn op_suite(tol: f64) -> Vec<GradCheckReport> {
    let mut out = Vec::new();
    let vec8 = || ramp(vec![8], 0.2);
    let grid = || ramp(vec![6, 6, 3], 0.4);

    out.push(check("add.lhs", vec8(), tol, |t, x| {
        let b = t.constant(ramp(vec![8], 1.1));
        let y = t.add(x, b);
        weighted_sum(t, y, 2.0)
    }));
    out.push(check("add.rhs", vec8(), tol, |t, x| {
        let a = t.constant(ramp(vec![8], 1.7));
        let y = t.add(a, x);
        weighted_sum(t, y, 2.0)
    }));
    out.push(check("sub.lhs", vec8(), tol, |t, x| {
        let b = t.constant(ramp(vec![8], 0.9));
        let y = t.sub(x, b);
        weighted_sum(t, y, 2.3)
    }));
    out.push(check("sub.rhs", vec8(), tol, |t, x| {
        let a = t.constant(ramp(vec![8], 0.9));
        let y = t.sub(a, x);
        weighted_sum(t, y, 2.3)
    }));
    out.push(check("mul.lhs", vec8(), tol, |t, x| {
        let b = t.constant(ramp(vec![8], 1.9));
        let y = t.mul(x, b);
        weighted_sum(t, y, 0.6)
    }));
    out.push(check("mul.rhs", vec8(), tol, |t, x| {
        let a = t.constant(ramp(vec![8], 2.4));
        let y = t.mul(a, x);
        weighted_sum(t, y, 0.6)
    }));
    out.push(check("div.num", vec8(), tol, |t, x| {
        let b = t.constant(positive(vec![8], 0.3));
        let y = t.div(x, b);
        weighted_sum(t, y, 1.4)
    }));
    out.push(check("div.den", positive(vec![8], 0.8), tol, |t, x| {
        let a = t.constant(ramp(vec![8], 2.8));
        let y = t.div(a, x);
        weighted_sum(t, y, 1.4)
    }));
    out.push(check("neg", vec8(), tol, |t, x| {
        let y = t.neg(x);
        weighted_sum(t, y, 0.1)
    }));
    out.push(check("scale", vec8(), tol, |t, x| {
        let y = t.scale(x, -2.75);
        weighted_sum(t, y, 0.1)
    }));
    out.push(check("add_const", vec8(), tol, |t, x| {
        let y = t.add_const(x, 3.25);
        weighted_sum(t, y, 0.1)
    }));
    out.push(check("relu", vec8(), tol, |t, x| {
        let y = t.relu(x);
        weighted_sum(t, y, 1.2)
    }));
    out.push(check("sigmoid", vec8(), tol, |t, x| {
        let y = t.sigmoid(x);
        weighted_sum(t, y, 1.2)
    }));
    out.push(check("tanh", vec8(), tol, |t, x| {
        let y = t.tanh(x);
        weighted_sum(t, y, 1.2)
    }));
    out.push(check("scaled_sigmoid", vec8(), tol, |t, x| {
        let y = t.scaled_sigmoid(x, 99.99, 0.01);
        weighted_sum(t, y, 1.2)
    }));
    out.push(check("ln", positive(vec![8], 0.5), tol, |t, x| {
        let y = t.ln(x);
        weighted_sum(t, y, 0.4)
    }));
    out.push(check("exp", vec8(), tol, |t, x| {
        let y = t.exp(x);
        weighted_sum(t, y, 0.4)
    }));
    out.push(check("sin", vec8(), tol, |t, x| {
        let y = t.sin(x);
        weighted_sum(t, y, 0.4)
    }));
    out.push(check("cos", vec8(), tol, |t, x| {
        let y = t.cos(x);
        weighted_sum(t, y, 0.4)
    }));
    out.push(check("matvec.w", ramp(vec![5, 8], 0.6), tol, |t, x| {
        let v = t.constant(ramp(vec![8], 1.5));
        let y = t.matvec(x, v);
        weighted_sum(t, y, 2.2)
    }));
    out.push(check("matvec.x", vec8(), tol, |t, x| {
        let w = t.constant(ramp(vec![5, 8], 0.6));
        let y = t.matvec(w, x);
        weighted_sum(t, y, 2.2)
    }));
    out.push(check("affine.b", ramp(vec![5], 1.0), tol, |t, x| {
        let w = t.constant(ramp(vec![5, 8], 0.6));
        let v = t.constant(ramp(vec![8], 1.5));
        let y = t.affine(w, v, x);
        weighted_sum(t, y, 2.2)
    }));
    out.push(check("conv2d.x", grid(), tol, |t, x| {
        let k = t.constant(ramp(vec![3, 3, 3, 4], 0.7));
        let b = t.constant(ramp(vec![4], 1.8));
        let y = t.conv2d(x, k, b, 1, 1);
        weighted_sum(t, y, 3.0)
    }));
    out.push(check("conv2d.k", ramp(vec![3, 3, 3, 4], 0.7), tol, |t, x| {
        let v = t.constant(grid());
        let b = t.constant(ramp(vec![4], 1.8));
        let y = t.conv2d(v, x, b, 1, 1);
        weighted_sum(t, y, 3.0)
    }));
    out.push(check("conv2d.b", ramp(vec![4], 1.8), tol, |t, x| {
        let v = t.constant(grid());
        let k = t.constant(ramp(vec![3, 3, 3, 4], 0.7));
        let y = t.conv2d(v, k, x, 1, 1);
        weighted_sum(t, y, 3.0)
    }));
    // Odd input under stride 2: exercises the floor-divided output extent.
    out.push(check("conv2d.strided.x", ramp(vec![7, 7, 2], 0.9), tol, |t, x| {
        let k = t.constant(ramp(vec![3, 3, 2, 3], 1.3));
        let b = t.constant(ramp(vec![3], 0.2));
        let y = t.conv2d(x, k, b, 2, 1);
        weighted_sum(t, y, 3.1)
    }));
    out.push(check("deconv2d.x", ramp(vec![4, 4, 3], 1.1), tol, |t, x| {
        let k = t.constant(ramp(vec![2, 2, 3, 2], 0.8));
        let b = t.constant(ramp(vec![2], 2.6));
        let y = t.deconv2d(x, k, b, 2);
        weighted_sum(t, y, 1.6)
    }));
    out.push(check("deconv2d.k", ramp(vec![2, 2, 3, 2], 0.8), tol, |t, x| {
        let v = t.constant(ramp(vec![4, 4, 3], 1.1));
        let b = t.constant(ramp(vec![2], 2.6));
        let y = t.deconv2d(v, x, b, 2);
        weighted_sum(t, y, 1.6)
    }));
    out.push(check("softmax2d", ramp(vec![5, 5], 1.9), tol, |t, x| {
        let y = t.softmax2d(x);
        weighted_sum(t, y, 0.9)
    }));
    out.push(check("logsumexp", ramp(vec![5, 5], 2.1), tol, |t, x| {
        t.logsumexp(x)
    }));
    out.push(check("gather", vec8(), tol, |t, x| {
        let y = t.gather(x, 5);
        t.scale(y, 1.75)
    }));
    out.push(check("sum", vec8(), tol, |t, x| t.sum(x)));
    out.push(check("mean", vec8(), tol, |t, x| t.mean(x)));
    out.push(check("narrow", vec8(), tol, |t, x| {
        let y = t.narrow(x, 2, 4);
        weighted_sum(t, y, 1.0)
    }));
    out.push(check("reshape", grid(), tol, |t, x| {
        let y = t.reshape(x, vec![36, 3]);
        weighted_sum(t, y, 1.0)
    }));
    out.push(check("channel_slice", grid(), tol, |t, x| {
        let y = t.channel_slice(x, 1);
        weighted_sum(t, y, 1.3)
    }));
    out.push(check("l2_normalize_channels", grid(), tol, |t, x| {
        let y = t.l2_normalize_channels(x);
        weighted_sum(t, y, 1.3)
    }));
    for (tag, which) in [("wx", 0usize), ("wh", 1), ("b", 2), ("x", 3), ("h", 4), ("c", 5)] {
        let d = 5usize;
        let x0 = match which {
            0 | 1 => ramp(vec![4 * d, d], 0.3),
            2 => ramp(vec![4 * d], 0.5),
            _ => ramp(vec![d], 0.7),
        };
        out.push(check(&format!("lstm_cell.{tag}"), x0, tol, move |t, leaf| {
            let mk = |t: &mut Tape<f64>, idx: usize| {
                if idx == which {
                    leaf
                } else {
                    match idx {
                        0 | 1 => t.constant(ramp(vec![4 * d, d], 1.0 + idx as f64)),
                        2 => t.constant(ramp(vec![4 * d], 1.0 + idx as f64)),
                        _ => t.constant(ramp(vec![d], 1.0 + idx as f64)),
                    }
                }
            };
            let wx = mk(t, 0);
            let wh = mk(t, 1);
            let b = mk(t, 2);
            let x = mk(t, 3);
            let h = mk(t, 4);
            let c = mk(t, 5);
            let (h2, c2) = crate::tensor::lstm_cell(t, x, h, c, wx, wh, b);
            let sh = weighted_sum(t, h2, 0.8);
            let sc = weighted_sum(t, c2, 1.9);
            t.add(sh, sc)
        }));
    }
    out
}

/// A short rendered sequence with an in-bounds, gently curved pixel path.
fn synthetic_record(size: u32, t: usize) -> SequenceRecord {
    let cam = CameraModel::with_size(size);
    let pixels_gt: Vec<[f32; 2]> = (0..t)
        .map(|k| {
            let tt = k as f64;
            [
                (2.0 + 0.55 * tt + 0.04 * tt * tt) as f32,
                (3.0 + 0.45 * tt) as f32,
            ]
        })
        .collect();
    let frames = pixels_gt[..T0]
        .iter()
        .map(|p| {
            let q = Vec3::new(
                (p[0] as f64 + cam.beta[0]) / cam.alpha,
                (p[1] as f64 + cam.beta[1]) / cam.alpha,
                0.0,
            );
            render::render_frame(&cam, q, cam.block_side_px() as u32)
        })
        .collect();
    SequenceRecord {
        experiment: ExperimentSpec::new(
            0.0,
            0.0,
            PlaneSpec::new(0.0, 0.3),
            FrictionField::Homogeneous { rho: 0.05 },
            Scenario::S0,
            1,
        ),
        split: Split::Train,
        frames,
        pixels_gt,
        vels_px: vec![[0.55, 0.45]; t],
    }
}

/// End-to-end training-loss gradients for each model variant at a small
/// image size, including the det(Sigma) regulariser path.
pub fn variant_suite(tol: f64) -> Vec<GradCheckReport> {
    let t = 6;
    let rec = synthetic_record(16, t);
    Variant::ALL
        .iter()
        .map(|&variant| {
            let mut cfg = ModelConfig::new(variant, 16);
            cfg.channels = 8;
            let model = Model::<f64>::new(cfg, 97);
            let x0 = model.flat_params();
            let det_reg = if variant == Variant::Mn3 { DET_REG_INIT } else { 0.0 };
            grad_check(
                &format!("{variant}.sequence_loss"),
                |tape, flat| models::loss_from_flat(&model, tape, flat, &rec, t, det_reg).unwrap(),
                &x0,
                STEP,
                tol,
                PROBES,
            )
        })
        .collect()
}

/// The whole gradient oracle: primitive ops then full variants.
pub fn full_suite(tol: f64) -> Vec<GradCheckReport> {
    let mut out = op_suite(tol);
    out.extend(variant_suite(tol));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_probes_all_pass() {
        for report in op_suite(1e-4) {
            assert!(
                report.pass(),
                "{}: rel err {:.3e} over {} probes",
                report.name,
                report.max_rel_err,
                report.checked
            );
        }
    }
}
