//! The four learned predictors and their shared training loop.
//!
//! All variants share the same skeleton: a convolutional feature extractor
//! maps the observed frames to an internal state, a propagation step evolves
//! that state one frame at a time without further input, and readout heads
//! decode each state into a prediction. They differ in the state
//! representation (a 128-vector driving an LSTM, or an 8x8 feature grid
//! driving a two-layer conv) and in the output distribution the training
//! objective assumes (a point with squared error, a full 2x2 Gaussian, or a
//! per-pixel heatmap).

use std::fmt;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, SequenceRecord, Split};
use crate::render::Image;
use crate::tensor::{
    Element, NodeId, OptimizerState, RmsPropConfig, Tape, Tensor, TensorError,
};

/// Number of observed frames every predictor conditions on.
pub const T0: usize = 4;
/// Spatial side of the grid state, and the downsampling target of the
/// extractor.
pub const STATE_SIDE: usize = 8;
/// Scaled-sigmoid floor for Gaussian eigenvalues (pixels^2).
pub const EIG_ALPHA: f64 = 0.01;
/// Scaled-sigmoid range for Gaussian eigenvalues; ceiling is alpha + lambda.
pub const EIG_LAMBDA: f64 = 99.99;
/// Regulariser weight on det(Sigma) while it is active.
pub const DET_REG_INIT: f64 = 10.0;
/// Epoch-mean det(Sigma) below which the regulariser switches off for good.
pub const DET_REG_THRESHOLD: f64 = 100.0;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("model expects {expected} but got {got} for {what}")]
    ShapeMismatch { what: &'static str, expected: String, got: String },
    #[error("operation requires a {required:?} style model, got {variant:?}")]
    VariantMismatch { variant: Variant, required: OutputKind },
    #[error("no usable sequences: {0}")]
    EmptyDataset(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("checkpoint does not describe a predictor: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// The four predictor variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Vector state, LSTM propagation, squared-error objective.
    Mn1,
    /// Grid state, conv propagation, squared-error objective.
    Mn2,
    /// Grid state, conv propagation, Gaussian log-likelihood objective.
    Mn3,
    /// Grid state with unit channel norms, conv propagation, heatmap
    /// log-likelihood objective.
    Mn4,
}

/// What a variant's heads emit per timestep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputKind {
    Point,
    Gaussian,
    Heatmap,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Mn1, Variant::Mn2, Variant::Mn3, Variant::Mn4];

    pub fn output_kind(self) -> OutputKind {
        match self {
            Variant::Mn1 | Variant::Mn2 => OutputKind::Point,
            Variant::Mn3 => OutputKind::Gaussian,
            Variant::Mn4 => OutputKind::Heatmap,
        }
    }

    pub fn uses_grid_state(self) -> bool {
        !matches!(self, Variant::Mn1)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::Mn1 => "mn1",
            Variant::Mn2 => "mn2",
            Variant::Mn3 => "mn3",
            Variant::Mn4 => "mn4",
        };
        f.write_str(s)
    }
}

/// How to turn a heatmap into a point for validation / L2 evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum HeatmapDecode {
    /// Centre of the max-probability cell; ties average the tied centres.
    #[default]
    Argmax,
    /// Probability-weighted mean cell centre.
    Expectation,
}

/// Static architecture description. Serialised into checkpoints verbatim.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Square input image side; must be a power-of-two multiple of 8.
    pub image_size: usize,
    /// Channels of the grid state (grid variants) and of the last extractor
    /// conv (all variants).
    pub channels: usize,
    /// Width of the vector state for the LSTM variant.
    pub vector_dim: usize,
    /// Heatmap cell side in pixels.
    pub delta: f64,
}

impl ModelConfig {
    pub fn new(variant: Variant, image_size: usize) -> Self {
        ModelConfig {
            variant,
            image_size,
            channels: 64,
            vector_dim: 128,
            delta: 1.0,
        }
    }

    /// Number of stride-2 convs needed to reach the 8x8 grid.
    fn extractor_depth(&self) -> usize {
        assert!(
            self.image_size >= STATE_SIDE && self.image_size.is_power_of_two(),
            "image size must be a power of two >= 8, got {}",
            self.image_size
        );
        (self.image_size / STATE_SIDE).trailing_zeros() as usize
    }

    /// Output channels of extractor conv i (doubling from 16, last = C).
    fn extractor_channels(&self, layer: usize, depth: usize) -> usize {
        if layer + 1 == depth {
            self.channels
        } else {
            16 << layer
        }
    }

    /// Flat width of the state as seen by fully-connected heads.
    fn state_width(&self) -> usize {
        if self.variant.uses_grid_state() {
            STATE_SIDE * STATE_SIDE * self.channels
        } else {
            self.vector_dim
        }
    }

    /// Per-timestep width of a fully-connected head output.
    fn head_width(&self) -> usize {
        match self.variant.output_kind() {
            OutputKind::Point => 2,
            OutputKind::Gaussian => 5,
            OutputKind::Heatmap => unreachable!("heatmap heads are deconvs"),
        }
    }
}

/// Where each parameter lives in the flat parameter list.
#[derive(Debug, Clone)]
struct Layout {
    /// Index of each extractor conv's weight; its bias follows at +1.
    ext_convs: Vec<usize>,
    /// FC collapsing the grid to the vector state (LSTM variant only).
    ext_fc: Option<usize>,
    /// wx; wh and b follow at +1, +2.
    lstm: Option<usize>,
    /// conv0.w; conv0.b, conv1.w, conv1.b follow.
    prop: Option<usize>,
    /// Head applied to propagated states (w, then b).
    head_l: usize,
    /// Head applied to the initial state, emitting all observed frames.
    head_lp: usize,
}

/// A predictor: config plus named parameters in a fixed order.
#[derive(Debug, Clone)]
pub struct Model<E: Element> {
    pub cfg: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor<E>>,
    layout: Layout,
}

/// Rolling state while extrapolating. `aux` is the LSTM cell vector; grid
/// variants leave it unset.
pub struct InternalState {
    pub s: NodeId,
    aux: Option<NodeId>,
}

/// Parameter nodes bound onto a tape, parallel to the model's tensors.
struct Bound {
    ids: Vec<NodeId>,
}

/// Per-timestep prediction heads evaluated on a tape.
enum HeadNodes {
    /// [2] position per timestep.
    Point(Vec<NodeId>),
    /// [5] raw (mu x, mu y, eig pre-activations, theta) per timestep.
    Gaussian(Vec<NodeId>),
    /// [image, image, 1] logits per timestep.
    Heatmap(Vec<NodeId>),
}

/// One decoded prediction for a single future (or observed) frame.
#[derive(Debug, Clone)]
pub enum Prediction {
    Point([f64; 2]),
    Gaussian {
        mu: [f64; 2],
        /// Eigenvalues after the scaled sigmoid, in (alpha, alpha + lambda).
        eig: [f64; 2],
        theta: f64,
        sigma: [[f64; 2]; 2],
    },
    Heatmap {
        /// Row-major cell probabilities, summing to 1.
        probs: Vec<f64>,
        side: usize,
    },
}

impl Prediction {
    /// Point estimate in pixels: identity for points, the mean for
    /// Gaussians, and the requested decode for heatmaps.
    pub fn point(&self, decode: HeatmapDecode) -> [f64; 2] {
        match self {
            Prediction::Point(p) => *p,
            Prediction::Gaussian { mu, .. } => *mu,
            Prediction::Heatmap { probs, side } => decode_heatmap(probs, *side, decode),
        }
    }
}

/// Rebuild the covariance a raw Gaussian head encodes:
/// Sigma = R(-theta) diag(eig) R(theta) with R(theta) = [[c, -s], [s, c]].
pub fn sigma_from(eig: [f64; 2], theta: f64) -> [[f64; 2]; 2] {
    let (s, c) = theta.sin_cos();
    let (l1, l2) = (eig[0], eig[1]);
    let off = c * s * (l2 - l1);
    [
        [c * c * l1 + s * s * l2, off],
        [off, s * s * l1 + c * c * l2],
    ]
}

/// Point estimate of a heatmap: argmax cell centre (ties averaged) or the
/// expectation over cell centres.
pub fn decode_heatmap(probs: &[f64], side: usize, decode: HeatmapDecode) -> [f64; 2] {
    assert_eq!(probs.len(), side * side);
    match decode {
        HeatmapDecode::Argmax => {
            let mut best = f64::NEG_INFINITY;
            for &p in probs {
                if p > best {
                    best = p;
                }
            }
            let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
            for (i, &p) in probs.iter().enumerate() {
                if p == best {
                    sx += (i % side) as f64;
                    sy += (i / side) as f64;
                    n += 1.0;
                }
            }
            [sx / n, sy / n]
        }
        HeatmapDecode::Expectation => {
            let (mut sx, mut sy) = (0.0, 0.0);
            for (i, &p) in probs.iter().enumerate() {
                sx += p * (i % side) as f64;
                sy += p * (i / side) as f64;
            }
            [sx, sy]
        }
    }
}

impl<E: Element> Model<E> {
    /// Fresh parameters, Gaussian with std 1/sqrt(fan_in), deterministic in
    /// `seed`. Draws are made in f64 and cast so every element type sees the
    /// same values.
    pub fn new(cfg: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names: Vec<String> = Vec::new();
        let mut tensors: Vec<Tensor<E>> = Vec::new();
        let push = |names: &mut Vec<String>,
                        tensors: &mut Vec<Tensor<E>>,
                        rng: &mut ChaCha8Rng,
                        name: String,
                        shape: Vec<usize>,
                        fan_in: usize| {
            names.push(name);
            tensors.push(crate::tensor::init_gaussian::<E, _>(rng, shape, fan_in));
        };

        let depth = cfg.extractor_depth();
        let mut ext_convs = Vec::new();
        let mut cin = 3 * T0;
        for i in 0..depth {
            let cout = cfg.extractor_channels(i, depth);
            ext_convs.push(names.len());
            push(&mut names, &mut tensors, &mut rng, format!("ext.conv{i}.w"), vec![3, 3, cin, cout], 9 * cin);
            push(&mut names, &mut tensors, &mut rng, format!("ext.conv{i}.b"), vec![cout], 9 * cin);
            cin = cout;
        }
        let grid_flat = STATE_SIDE * STATE_SIDE * cin;

        let mut ext_fc = None;
        let mut lstm = None;
        let mut prop = None;
        if cfg.variant.uses_grid_state() {
            let c = cfg.channels;
            prop = Some(names.len());
            push(&mut names, &mut tensors, &mut rng, "prop.conv0.w".into(), vec![3, 3, c, 2 * c], 9 * c);
            push(&mut names, &mut tensors, &mut rng, "prop.conv0.b".into(), vec![2 * c], 9 * c);
            push(&mut names, &mut tensors, &mut rng, "prop.conv1.w".into(), vec![3, 3, 2 * c, c], 18 * c);
            push(&mut names, &mut tensors, &mut rng, "prop.conv1.b".into(), vec![c], 18 * c);
        } else {
            let d = cfg.vector_dim;
            ext_fc = Some(names.len());
            push(&mut names, &mut tensors, &mut rng, "ext.fc.w".into(), vec![d, grid_flat], grid_flat);
            push(&mut names, &mut tensors, &mut rng, "ext.fc.b".into(), vec![d], grid_flat);
            lstm = Some(names.len());
            push(&mut names, &mut tensors, &mut rng, "lstm.wx".into(), vec![4 * d, d], d);
            push(&mut names, &mut tensors, &mut rng, "lstm.wh".into(), vec![4 * d, d], d);
            push(&mut names, &mut tensors, &mut rng, "lstm.b".into(), vec![4 * d], d);
        }

        let head_l;
        let head_lp;
        match cfg.variant.output_kind() {
            OutputKind::Point | OutputKind::Gaussian => {
                let (din, dout) = (cfg.state_width(), cfg.head_width());
                head_l = names.len();
                push(&mut names, &mut tensors, &mut rng, "head.l.w".into(), vec![dout, din], din);
                push(&mut names, &mut tensors, &mut rng, "head.l.b".into(), vec![dout], din);
                head_lp = names.len();
                push(&mut names, &mut tensors, &mut rng, "head.lp.w".into(), vec![dout * T0, din], din);
                push(&mut names, &mut tensors, &mut rng, "head.lp.b".into(), vec![dout * T0], din);
            }
            OutputKind::Heatmap => {
                // One transposed conv with kernel = stride brings 8x8 back to
                // the image plane; fan_in is cin since output cells do not
                // overlap.
                let k = cfg.image_size / STATE_SIDE;
                let c = cfg.channels;
                head_l = names.len();
                push(&mut names, &mut tensors, &mut rng, "head.l.w".into(), vec![k, k, c, 1], c);
                push(&mut names, &mut tensors, &mut rng, "head.l.b".into(), vec![1], c);
                head_lp = names.len();
                push(&mut names, &mut tensors, &mut rng, "head.lp.w".into(), vec![k, k, c, T0], c);
                push(&mut names, &mut tensors, &mut rng, "head.lp.b".into(), vec![T0], c);
            }
        }

        Model {
            cfg,
            names,
            tensors,
            layout: Layout { ext_convs, ext_fc, lstm, prop, head_l, head_lp },
        }
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_tensors(&self) -> &[Tensor<E>] {
        &self.tensors
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Same architecture and values in another element type.
    pub fn cast<F: Element>(&self) -> Model<F> {
        Model {
            cfg: self.cfg.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast::<F>()).collect(),
            layout: self.layout.clone(),
        }
    }

    fn bind(&self, tape: &mut Tape<E>, needs_grad: bool) -> Bound {
        Bound {
            ids: self
                .tensors
                .iter()
                .map(|t| tape.leaf(t.clone(), needs_grad))
                .collect(),
        }
    }

    /// All parameters concatenated into one vector, in declaration order.
    pub fn flat_params(&self) -> Tensor<E> {
        let data: Vec<E> = self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect();
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    /// Carve parameter views out of a single flat leaf, so a gradient check
    /// can probe every parameter through one node.
    fn bind_flat(&self, tape: &mut Tape<E>, flat: NodeId) -> Bound {
        let mut ids = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for t in &self.tensors {
            let piece = tape.narrow(flat, offset, t.len());
            ids.push(tape.reshape(piece, t.shape().to_vec()));
            offset += t.len();
        }
        Bound { ids }
    }

    /// Stack the first T0 frames into [h, w, 3 T0], intensities in [0, 1].
    fn frames_to_input(&self, frames: &[Image]) -> Result<Tensor<E>, ModelError> {
        stack_frames(frames, self.cfg.image_size)
    }

    /// Map the observed frames to the initial internal state S_0.
    fn feature_extract(&self, tape: &mut Tape<E>, bound: &Bound, input: NodeId) -> InternalState {
        let mut x = input;
        for &i in &self.layout.ext_convs {
            let y = tape.conv2d(x, bound.ids[i], bound.ids[i + 1], 2, 1);
            x = tape.relu(y);
        }
        match self.cfg.variant {
            Variant::Mn1 => {
                let i = self.layout.ext_fc.unwrap();
                let grid_flat = STATE_SIDE * STATE_SIDE * self.cfg.channels;
                let flat = tape.reshape(x, vec![grid_flat]);
                let s = tape.affine(bound.ids[i], flat, bound.ids[i + 1]);
                InternalState { s, aux: None }
            }
            Variant::Mn2 | Variant::Mn3 => InternalState { s: x, aux: None },
            Variant::Mn4 => {
                // Keep the state on the per-channel unit sphere from the
                // start, matching what propagation preserves.
                let s = tape.l2_normalize_channels(x);
                InternalState { s, aux: None }
            }
        }
    }

    /// One autonomous step S_{t+1} = F(S_t).
    fn propagate(&self, tape: &mut Tape<E>, bound: &Bound, state: &InternalState) -> InternalState {
        match self.cfg.variant {
            Variant::Mn1 => {
                let i = self.layout.lstm.unwrap();
                let h = state.s;
                let c = state.aux.unwrap_or_else(|| {
                    let z = Tensor::zeros(vec![self.cfg.vector_dim]);
                    tape.constant(z)
                });
                // With no new observations the cell's input is the previous
                // state itself.
                let (h2, c2) = crate::tensor::lstm_cell(
                    tape,
                    h,
                    h,
                    c,
                    bound.ids[i],
                    bound.ids[i + 1],
                    bound.ids[i + 2],
                );
                InternalState { s: h2, aux: Some(c2) }
            }
            _ => {
                let i = self.layout.prop.unwrap();
                let y = tape.conv2d(state.s, bound.ids[i], bound.ids[i + 1], 1, 1);
                let y = tape.relu(y);
                let y = tape.conv2d(y, bound.ids[i + 2], bound.ids[i + 3], 1, 1);
                let s = if self.cfg.variant == Variant::Mn4 {
                    tape.l2_normalize_channels(y)
                } else {
                    y
                };
                InternalState { s, aux: None }
            }
        }
    }

    fn flat_state(&self, tape: &mut Tape<E>, state: &InternalState) -> NodeId {
        if self.cfg.variant.uses_grid_state() {
            tape.reshape(state.s, vec![self.cfg.state_width()])
        } else {
            state.s
        }
    }

    /// Heads for t = 0 .. t-1: the first T0 entries decode S_0 through the
    /// readout trained on observed frames, the rest decode the propagated
    /// states one step each.
    fn forward_nodes(
        &self,
        tape: &mut Tape<E>,
        bound: &Bound,
        frames: &[Image],
        t: usize,
    ) -> Result<HeadNodes, ModelError> {
        assert!(t >= T0, "prediction horizon shorter than the observed prefix");
        let input = self.frames_to_input(frames)?;
        let input = tape.constant(input);
        let s0 = self.feature_extract(tape, bound, input);

        let l = self.layout.head_l;
        let lp = self.layout.head_lp;
        match self.cfg.variant.output_kind() {
            OutputKind::Point | OutputKind::Gaussian => {
                let width = self.cfg.head_width();
                let flat0 = self.flat_state(tape, &s0);
                let obs = tape.affine(bound.ids[lp], flat0, bound.ids[lp + 1]);
                let mut outs = Vec::with_capacity(t);
                for i in 0..T0 {
                    outs.push(tape.narrow(obs, i * width, width));
                }
                let mut state = s0;
                for _ in T0..t {
                    state = self.propagate(tape, bound, &state);
                    let flat = self.flat_state(tape, &state);
                    outs.push(tape.affine(bound.ids[l], flat, bound.ids[l + 1]));
                }
                Ok(match self.cfg.variant.output_kind() {
                    OutputKind::Point => HeadNodes::Point(outs),
                    _ => HeadNodes::Gaussian(outs),
                })
            }
            OutputKind::Heatmap => {
                let k = self.cfg.image_size / STATE_SIDE;
                let maps0 = tape.deconv2d(s0.s, bound.ids[lp], bound.ids[lp + 1], k);
                let mut outs = Vec::with_capacity(t);
                for i in 0..T0 {
                    outs.push(tape.channel_slice(maps0, i));
                }
                let mut state = s0;
                for _ in T0..t {
                    state = self.propagate(tape, bound, &state);
                    outs.push(tape.deconv2d(state.s, bound.ids[l], bound.ids[l + 1], k));
                }
                Ok(HeadNodes::Heatmap(outs))
            }
        }
    }

    /// Decode predictions for frames 0..t-1 given the first T0 frames.
    /// Pure: identical inputs give identical outputs.
    pub fn forward_predict(&self, frames: &[Image], t: usize) -> Result<Vec<Prediction>, ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let heads = self.forward_nodes(&mut tape, &bound, frames, t)?;
        Ok(match heads {
            HeadNodes::Point(ids) => ids
                .into_iter()
                .map(|id| {
                    let v = tape.value(id);
                    Prediction::Point([v.data()[0].f64(), v.data()[1].f64()])
                })
                .collect(),
            HeadNodes::Gaussian(ids) => ids
                .into_iter()
                .map(|id| {
                    let v = tape.value(id);
                    let raw: Vec<f64> = v.data().iter().map(|e| e.f64()).collect();
                    let eig = [
                        scaled_sigmoid_f64(raw[2], EIG_LAMBDA, EIG_ALPHA),
                        scaled_sigmoid_f64(raw[3], EIG_LAMBDA, EIG_ALPHA),
                    ];
                    Prediction::Gaussian {
                        mu: [raw[0], raw[1]],
                        eig,
                        theta: raw[4],
                        sigma: sigma_from(eig, raw[4]),
                    }
                })
                .collect(),
            HeadNodes::Heatmap(ids) => {
                let mut out = Vec::with_capacity(ids.len());
                for id in ids {
                    let p = tape.softmax2d(id);
                    let v = tape.value(p);
                    // Renormalise in f64: the element-precision softmax can
                    // drift off unit mass by more than reporting tolerances.
                    let mut probs: Vec<f64> = v.data().iter().map(|e| e.f64()).collect();
                    let total: f64 = probs.iter().sum();
                    for q in &mut probs {
                        *q /= total;
                    }
                    out.push(Prediction::Heatmap { probs, side: self.cfg.image_size });
                }
                out
            }
        })
    }
}

fn scaled_sigmoid_f64(z: f64, lambda: f64, alpha: f64) -> f64 {
    lambda * (1.0 / (1.0 + (-z).exp())) + alpha
}

/// Stack the first T0 of `frames` (each n x n RGB) into an [n, n, 3 T0]
/// tensor with intensities scaled to [0, 1].
pub(crate) fn stack_frames<E: Element>(
    frames: &[Image],
    n: usize,
) -> Result<Tensor<E>, ModelError> {
    if frames.len() < T0 {
        return Err(ModelError::ShapeMismatch {
            what: "observed frames",
            expected: format!("at least {T0}"),
            got: frames.len().to_string(),
        });
    }
    for f in &frames[..T0] {
        if f.width as usize != n || f.height as usize != n {
            return Err(ModelError::ShapeMismatch {
                what: "frame size",
                expected: format!("{n}x{n}"),
                got: format!("{}x{}", f.width, f.height),
            });
        }
    }
    let c = 3 * T0;
    let mut data = vec![E::zero(); n * n * c];
    for (fi, f) in frames[..T0].iter().enumerate() {
        for p in 0..n * n {
            for ch in 0..3 {
                data[p * c + fi * 3 + ch] = E::of(f.data[p * 3 + ch] as f64 / 255.0);
            }
        }
    }
    Ok(Tensor::new(vec![n, n, c], data))
}

/// Mean squared pixel error: (1/T) sum_t |y_hat - y|^2.
fn loss_l2<E: Element>(tape: &mut Tape<E>, preds: &[NodeId], gt: &[[f64; 2]]) -> NodeId {
    assert_eq!(preds.len(), gt.len());
    let mut acc = tape.scalar(0.0);
    for (&p, g) in preds.iter().zip(gt) {
        let t = tape.constant(Tensor::new(vec![2], vec![E::of(g[0]), E::of(g[1])]));
        let d = tape.sub(p, t);
        let sq = tape.mul(d, d);
        let s = tape.sum(sq);
        acc = tape.add(acc, s);
    }
    tape.scale(acc, 1.0 / preds.len() as f64)
}

struct GaussianLoss {
    loss: NodeId,
    /// det(Sigma) per timestep, for the regulariser schedule.
    dets: Vec<NodeId>,
}

/// Mean Gaussian negative log-likelihood plus det_reg * sum_t det Sigma(t).
/// The regulariser is an un-normalised sum, so its pressure grows with the
/// horizon.
fn loss_gaussian<E: Element>(
    tape: &mut Tape<E>,
    raws: &[NodeId],
    gt: &[[f64; 2]],
    det_reg: f64,
) -> GaussianLoss {
    assert_eq!(raws.len(), gt.len());
    let ln_2pi = std::f64::consts::TAU.ln();
    let mut acc = tape.scalar(0.0);
    let mut dets = Vec::with_capacity(raws.len());
    for (&raw, g) in raws.iter().zip(gt) {
        let mu = tape.narrow(raw, 0, 2);
        let zs = tape.narrow(raw, 2, 2);
        let eig = tape.scaled_sigmoid(zs, EIG_LAMBDA, EIG_ALPHA);
        let l1 = tape.narrow(eig, 0, 1);
        let l2 = tape.narrow(eig, 1, 1);
        let theta = tape.narrow(raw, 4, 1);
        let c = tape.cos(theta);
        let s = tape.sin(theta);
        let y = tape.constant(Tensor::new(vec![2], vec![E::of(g[0]), E::of(g[1])]));
        let d = tape.sub(y, mu);
        let d1 = tape.narrow(d, 0, 1);
        let d2 = tape.narrow(d, 1, 1);
        // Rotate the residual into the eigenbasis: u = R(theta) d.
        let cd1 = tape.mul(c, d1);
        let sd2 = tape.mul(s, d2);
        let u1 = tape.sub(cd1, sd2);
        let sd1 = tape.mul(s, d1);
        let cd2 = tape.mul(c, d2);
        let u2 = tape.add(sd1, cd2);
        let ll1 = tape.ln(l1);
        let ll2 = tape.ln(l2);
        let u1s = tape.mul(u1, u1);
        let u2s = tape.mul(u2, u2);
        let q1 = tape.div(u1s, l1);
        let q2 = tape.div(u2s, l2);
        let logs = tape.add(ll1, ll2);
        let quads = tape.add(q1, q2);
        let inner = tape.add(logs, quads);
        let half = tape.scale(inner, 0.5);
        let withc = tape.add_const(half, ln_2pi);
        let nll = tape.sum(withc);
        acc = tape.add(acc, nll);
        let det = tape.mul(l1, l2);
        let det = tape.sum(det);
        dets.push(det);
    }
    let mut loss = tape.scale(acc, 1.0 / raws.len() as f64);
    if det_reg != 0.0 {
        let mut dsum = tape.scalar(0.0);
        for &d in &dets {
            dsum = tape.add(dsum, d);
        }
        let reg = tape.scale(dsum, det_reg);
        loss = tape.add(loss, reg);
    }
    GaussianLoss { loss, dets }
}

struct HeatmapLoss {
    loss: NodeId,
    /// Ground-truth cells that had to be clamped into the image.
    clamped: usize,
}

/// Mean heatmap negative log-likelihood, 2 ln delta - (1/T) sum_t ln p(cell),
/// computed as logsumexp(logits) - logit(cell) without materialising the
/// softmax.
fn loss_heatmap<E: Element>(
    tape: &mut Tape<E>,
    logits: &[NodeId],
    gt: &[[f64; 2]],
    side: usize,
    delta: f64,
) -> HeatmapLoss {
    assert_eq!(logits.len(), gt.len());
    let mut acc = tape.scalar(0.0);
    let mut clamped = 0;
    for (&lg, g) in logits.iter().zip(gt) {
        let mut col = g[0].round() as i64;
        let mut row = g[1].round() as i64;
        let hi = side as i64 - 1;
        if col < 0 || col > hi || row < 0 || row > hi {
            clamped += 1;
            col = col.clamp(0, hi);
            row = row.clamp(0, hi);
        }
        let idx = row as usize * side + col as usize;
        let lse = tape.logsumexp(lg);
        let at = tape.gather(lg, idx);
        let nll = tape.sub(lse, at);
        acc = tape.add(acc, nll);
    }
    let mean = tape.scale(acc, 1.0 / logits.len() as f64);
    let loss = tape.add_const(mean, 2.0 * delta.ln());
    HeatmapLoss { loss, clamped }
}

/// Loss of one sequence on a fresh tape, as used by training.
struct SequenceLoss {
    loss: NodeId,
    /// Per-step det(Sigma) nodes (Gaussian objective only).
    dets: Vec<NodeId>,
    /// Ground-truth cells clamped into the image (heatmap objective only).
    #[allow(dead_code)]
    clamped: usize,
}

fn sequence_loss<E: Element>(
    model: &Model<E>,
    tape: &mut Tape<E>,
    bound: &Bound,
    rec: &SequenceRecord,
    t: usize,
    det_reg: f64,
) -> Result<SequenceLoss, ModelError> {
    let gt: Vec<[f64; 2]> = rec.pixels_gt[..t]
        .iter()
        .map(|p| [p[0] as f64, p[1] as f64])
        .collect();
    let heads = model.forward_nodes(tape, bound, &rec.frames, t)?;
    Ok(match heads {
        HeadNodes::Point(ids) => SequenceLoss {
            loss: loss_l2(tape, &ids, &gt),
            dets: Vec::new(),
            clamped: 0,
        },
        HeadNodes::Gaussian(ids) => {
            let gl = loss_gaussian(tape, &ids, &gt, det_reg);
            SequenceLoss { loss: gl.loss, dets: gl.dets, clamped: 0 }
        }
        HeadNodes::Heatmap(ids) => {
            let hl = loss_heatmap(tape, &ids, &gt, model.cfg.image_size, model.cfg.delta);
            SequenceLoss { loss: hl.loss, dets: Vec::new(), clamped: hl.clamped }
        }
    })
}

/// Training loss of one record viewed as a function of a flat parameter
/// vector. Lets a finite-difference check probe every parameter through a
/// single leaf node.
pub fn loss_from_flat<E: Element>(
    model: &Model<E>,
    tape: &mut Tape<E>,
    flat: NodeId,
    rec: &SequenceRecord,
    t: usize,
    det_reg: f64,
) -> Result<NodeId, ModelError> {
    let bound = model.bind_flat(tape, flat);
    Ok(sequence_loss(model, tape, &bound, rec, t, det_reg)?.loss)
}

/// Knobs of the training loop.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Supervised horizon: the loss covers frames 0..t_train-1.
    pub t_train: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub opt: RmsPropConfig,
    pub decode: HeatmapDecode,
}

impl TrainConfig {
    pub fn new(t_train: usize, seed: u64) -> Self {
        TrainConfig {
            t_train,
            batch_size: 50,
            max_epochs: 1000,
            patience: 40,
            seed,
            opt: RmsPropConfig::default(),
            decode: HeatmapDecode::Argmax,
        }
    }
}

/// What training reports back besides the checkpoint file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_metric: f64,
    pub final_train_loss: f64,
    /// Epoch after which the det(Sigma) regulariser switched off, if it did.
    pub det_reg_off_epoch: Option<usize>,
    /// Train/val sequences shorter than t_train, excluded from the run.
    pub skipped_short: usize,
    pub train_sequences: usize,
    pub val_sequences: usize,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub summary: TrainSummary,
    pub model: Model<f32>,
}

/// Mean L2 at the horizon `t`, decoding every variant to a point estimate.
pub fn mean_l2(
    model: &Model<f32>,
    records: &[&SequenceRecord],
    t: usize,
    decode: HeatmapDecode,
) -> Result<f64, ModelError> {
    let mut total = 0.0;
    let mut n = 0usize;
    for rec in records {
        let preds = model.forward_predict(&rec.frames, t)?;
        for (p, g) in preds.iter().zip(&rec.pixels_gt[..t]) {
            let e = p.point(decode);
            let (dx, dy) = (e[0] - g[0] as f64, e[1] - g[1] as f64);
            total += dx * dx + dy * dy;
        }
        n += t;
    }
    Ok(if n == 0 { f64::NAN } else { total / n as f64 })
}

/// Mean training objective over `records` with the det regulariser off:
/// squared pixel error for point heads, negative log-likelihood otherwise.
/// This is the early-stopping signal; decoded-position error is too noisy a
/// selector while probabilistic heads are still near-uniform.
fn val_objective(
    model: &Model<f32>,
    records: &[&SequenceRecord],
    t: usize,
) -> Result<f64, ModelError> {
    let mut total = 0.0;
    for rec in records {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let sl = sequence_loss(model, &mut tape, &bound, rec, t, 0.0)?;
        total += tape.value(sl.loss).item().f64();
    }
    Ok(total / records.len() as f64)
}

/// Train a fresh model on the train split, early-stopping on the validation
/// objective.
///
/// Deterministic in (cfg, tcfg, dataset bytes): batches are shuffled by a
/// dedicated ChaCha stream and gradients accumulate in item order.
/// `log_path`, when set, receives a CSV with one row per epoch.
pub fn train(
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    dataset: &Dataset,
    log_path: Option<&Path>,
) -> Result<TrainOutcome, ModelError> {
    assert!(tcfg.t_train > T0, "t_train must exceed the observed prefix");
    let t = tcfg.t_train;
    let train_all: Vec<&SequenceRecord> = dataset.records_in(Split::Train).collect();
    let val_all: Vec<&SequenceRecord> = dataset.records_in(Split::Val).collect();
    let train: Vec<&SequenceRecord> =
        train_all.iter().copied().filter(|r| r.pixels_gt.len() >= t).collect();
    let val: Vec<&SequenceRecord> =
        val_all.iter().copied().filter(|r| r.pixels_gt.len() >= t).collect();
    let skipped_short = (train_all.len() - train.len()) + (val_all.len() - val.len());
    if train.is_empty() {
        return Err(ModelError::EmptyDataset(format!(
            "no training sequences of length >= {t}"
        )));
    }
    if val.is_empty() {
        return Err(ModelError::EmptyDataset(format!(
            "no validation sequences of length >= {t}"
        )));
    }

    let mut model: Model<f32> = Model::new(cfg.clone(), tcfg.seed);
    let mut opt = OptimizerState::new(tcfg.opt, &model.tensors);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(tcfg.seed ^ 0x9E37_79B9_7F4A_7C15);

    let mut det_reg = if cfg.variant == Variant::Mn3 { DET_REG_INIT } else { 0.0 };
    let mut det_reg_off_epoch = None;

    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_tensors = model.tensors.clone();
    let mut indices: Vec<usize> = (0..train.len()).collect();
    let mut epochs_run = 0usize;
    let mut final_train_loss = f64::NAN;

    // Rows stream out as epochs finish so long runs can be watched.
    fn io_err(path: &Path, e: std::io::Error) -> ModelError {
        ModelError::Io { path: path.display().to_string(), source: e }
    }
    let mut log = match log_path {
        Some(path) => {
            let mut w = std::io::BufWriter::new(
                std::fs::File::create(path).map_err(|e| io_err(path, e))?,
            );
            use std::io::Write as _;
            w.write_all(b"epoch,train_loss,val_metric,det_reg,mean_det,seconds\n")
                .and_then(|()| w.flush())
                .map_err(|e| io_err(path, e))?;
            Some((w, path))
        }
        None => None,
    };

    for epoch in 0..tcfg.max_epochs {
        let started = Instant::now();
        indices.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut epoch_batches = 0usize;
        let mut det_sum = 0.0;
        let mut det_count = 0usize;

        for (batch_no, chunk) in indices.chunks(tcfg.batch_size).enumerate() {
            let mut grads: Vec<Tensor<f32>> = model
                .tensors
                .iter()
                .map(|p| Tensor::zeros(p.shape().to_vec()))
                .collect();
            let mut batch_loss = 0.0;
            for &i in chunk {
                let mut tape = Tape::new();
                let bound = model.bind(&mut tape, true);
                let sl = sequence_loss(&model, &mut tape, &bound, train[i], t, det_reg)?;
                let lv = tape.value(sl.loss).item().f64();
                if !lv.is_finite() {
                    return Err(ModelError::NonFiniteLoss { epoch, batch: batch_no });
                }
                batch_loss += lv;
                for &d in &sl.dets {
                    det_sum += tape.value(d).item().f64();
                    det_count += 1;
                }
                tape.backward(sl.loss);
                let inv = 1.0 / chunk.len() as f32;
                for (gi, acc) in grads.iter_mut().enumerate() {
                    let g = tape
                        .grad(bound.ids[gi])
                        .expect("parameter gradient missing after backward");
                    for (a, b) in acc.data_mut().iter_mut().zip(g) {
                        *a += *b * inv;
                    }
                }
            }
            opt.step(&mut model.tensors, &grads);
            epoch_loss += batch_loss / chunk.len() as f64;
            epoch_batches += 1;
        }

        let train_loss = epoch_loss / epoch_batches as f64;
        let val_metric = val_objective(&model, &val, t)?;
        if !val_metric.is_finite() {
            return Err(ModelError::NonFiniteLoss { epoch, batch: usize::MAX });
        }
        let mean_det = if det_count > 0 { det_sum / det_count as f64 } else { f64::NAN };
        epochs_run = epoch + 1;
        final_train_loss = train_loss;
        if let Some((w, path)) = log.as_mut() {
            use std::io::Write as _;
            writeln!(
                w,
                "{},{:.9},{:.9},{},{:.9},{:.3}",
                epoch,
                train_loss,
                val_metric,
                det_reg,
                mean_det,
                started.elapsed().as_secs_f64()
            )
            .and_then(|()| w.flush())
            .map_err(|e| io_err(path, e))?;
        }

        if val_metric < best_val {
            best_val = val_metric;
            best_epoch = epoch;
            best_tensors = model.tensors.clone();
        }

        // The det regulariser switches off exactly once, after the first
        // epoch whose mean det(Sigma) dips under the threshold.
        if det_reg != 0.0 && det_count > 0 && mean_det < DET_REG_THRESHOLD {
            det_reg = 0.0;
            det_reg_off_epoch = Some(epoch);
        }

        if epoch >= best_epoch + tcfg.patience {
            break;
        }
    }

    model.tensors = best_tensors;
    Ok(TrainOutcome {
        summary: TrainSummary {
            epochs_run,
            best_epoch,
            best_val_metric: best_val,
            final_train_loss,
            det_reg_off_epoch,
            skipped_short,
            train_sequences: train.len(),
            val_sequences: val.len(),
        },
        model,
    })
}

impl Model<f32> {
    /// Persist parameters plus config and training provenance.
    pub fn save(
        &self,
        path: &Path,
        tcfg: &TrainConfig,
        summary: &TrainSummary,
    ) -> Result<(), ModelError> {
        let header = serde_json::json!({
            "kind": "predictor",
            "config": self.cfg,
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

    /// Load a checkpoint written by `save`.
    pub fn load(path: &Path) -> Result<(Model<f32>, serde_json::Value), ModelError> {
        let (header, pairs) = crate::tensor::load_checkpoint(path)?;
        if header.get("kind").and_then(|k| k.as_str()) != Some("predictor") {
            return Err(ModelError::BadCheckpoint(format!(
                "kind = {:?}",
                header.get("kind")
            )));
        }
        let cfg: ModelConfig = serde_json::from_value(
            header
                .get("config")
                .cloned()
                .ok_or_else(|| ModelError::BadCheckpoint("missing config".into()))?,
        )
        .map_err(|e| ModelError::BadCheckpoint(e.to_string()))?;
        let mut fresh: Model<f32> = Model::new(cfg, 0);
        if fresh.names.len() != pairs.len() {
            return Err(ModelError::BadCheckpoint(format!(
                "expected {} parameters, found {}",
                fresh.names.len(),
                pairs.len()
            )));
        }
        for (i, (name, tensor)) in pairs.into_iter().enumerate() {
            if fresh.names[i] != name || fresh.tensors[i].shape() != tensor.shape() {
                return Err(ModelError::BadCheckpoint(format!(
                    "parameter mismatch at {i}: expected {} {:?}, found {} {:?}",
                    fresh.names[i],
                    fresh.tensors[i].shape(),
                    name,
                    tensor.shape()
                )));
            }
            fresh.tensors[i] = tensor;
        }
        Ok((fresh, header))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_dataset, RecordingProtocol, ScenarioConfig};
    use crate::physics::Scenario;
    use crate::render::CameraModel;

    fn black_frames(n: u32, count: usize) -> Vec<Image> {
        (0..count).map(|_| Image::black(n, n)).collect()
    }

    fn tiny_cfg(variant: Variant) -> ModelConfig {
        let mut cfg = ModelConfig::new(variant, 16);
        cfg.channels = 8;
        cfg
    }

    #[test]
    fn extractor_reaches_state_shape() {
        for variant in [Variant::Mn1, Variant::Mn2, Variant::Mn4] {
            let model: Model<f64> = Model::new(tiny_cfg(variant), 7);
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, false);
            let input = model.frames_to_input(&black_frames(16, 4)).unwrap();
            let input = tape.constant(input);
            let s0 = model.feature_extract(&mut tape, &bound, input);
            let shape = tape.value(s0.s).shape().to_vec();
            match variant {
                Variant::Mn1 => assert_eq!(shape, vec![128]),
                _ => assert_eq!(shape, vec![8, 8, 8]),
            }
        }
    }

    #[test]
    fn default_config_extractor_depth_plan() {
        let cfg = ModelConfig::new(Variant::Mn2, 128);
        let depth = cfg.extractor_depth();
        assert_eq!(depth, 4);
        let chans: Vec<usize> = (0..depth).map(|i| cfg.extractor_channels(i, depth)).collect();
        assert_eq!(chans, vec![16, 32, 64, 64]);
    }

    #[test]
    fn normalized_state_has_unit_channel_norms() {
        let model: Model<f64> = Model::new(tiny_cfg(Variant::Mn4), 3);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let mut frames = black_frames(16, 4);
        // Light the frames up so activations are not all zero.
        for f in &mut frames {
            for p in f.data.iter_mut() {
                *p = 80;
            }
        }
        let input = model.frames_to_input(&frames).unwrap();
        let input = tape.constant(input);
        let mut state = model.feature_extract(&mut tape, &bound, input);
        for _ in 0..3 {
            state = model.propagate(&mut tape, &bound, &state);
            let v = tape.value(state.s).clone();
            for c in 0..8 {
                let norm: f64 = (0..64)
                    .map(|p| {
                        let x = v.data()[p * 8 + c];
                        x * x
                    })
                    .sum::<f64>()
                    .sqrt();
                assert!(norm < 1.0 + 1e-9, "channel norm {norm} above unit");
                assert!(norm == 0.0 || norm > 0.99, "channel norm {norm} off the sphere");
            }
        }
    }

    #[test]
    fn forward_lengths_follow_horizon() {
        for variant in [Variant::Mn1, Variant::Mn2, Variant::Mn3, Variant::Mn4] {
            let model: Model<f64> = Model::new(tiny_cfg(variant), 11);
            let frames = black_frames(16, 4);
            assert_eq!(model.forward_predict(&frames, 4).unwrap().len(), 4);
            assert_eq!(model.forward_predict(&frames, 9).unwrap().len(), 9);
        }
    }

    #[test]
    fn longer_horizon_extends_shorter_one() {
        let model: Model<f64> = Model::new(tiny_cfg(Variant::Mn2), 5);
        let mut frames = black_frames(16, 4);
        frames[2].data[3 * (16 * 7 + 9)] = 200;
        let short = model.forward_predict(&frames, 8).unwrap();
        let long = model.forward_predict(&frames, 13).unwrap();
        for (a, b) in short.iter().zip(&long) {
            match (a, b) {
                (Prediction::Point(x), Prediction::Point(y)) => assert_eq!(x, y),
                _ => panic!("expected points"),
            }
        }
    }

    #[test]
    fn rejects_wrong_frame_sizes() {
        let model: Model<f64> = Model::new(tiny_cfg(Variant::Mn2), 5);
        let err = model.forward_predict(&black_frames(32, 4), 8).unwrap_err();
        assert!(matches!(err, ModelError::ShapeMismatch { .. }));
        let err = model.forward_predict(&black_frames(16, 3), 8).unwrap_err();
        assert!(matches!(err, ModelError::ShapeMismatch { .. }));
    }

    #[test]
    fn loss_l2_matches_hand_values() {
        let mut tape: Tape<f64> = Tape::new();
        let p = tape.constant(Tensor::new(vec![2], vec![3.0, 4.0]));
        let loss = loss_l2(&mut tape, &[p], &[[3.0, 4.0]]);
        assert_eq!(tape.value(loss).item(), 0.0);
        // Offset (3, 4) on every one of 7 frames: 25.
        let preds: Vec<NodeId> = (0..7)
            .map(|i| {
                let v = vec![i as f64 + 3.0, 2.0 * i as f64 + 4.0];
                tape.constant(Tensor::new(vec![2], v))
            })
            .collect();
        let gt: Vec<[f64; 2]> = (0..7).map(|i| [i as f64, 2.0 * i as f64]).collect();
        let loss = loss_l2(&mut tape, &preds, &gt);
        assert!((tape.value(loss).item() - 25.0).abs() < 1e-12);
        // One frame off by (1, 0) out of 20: 1/20.
        let preds: Vec<NodeId> = (0..20)
            .map(|i| {
                let x = if i == 5 { 1.0 } else { 0.0 };
                tape.constant(Tensor::new(vec![2], vec![x, 0.0]))
            })
            .collect();
        let gt = vec![[0.0, 0.0]; 20];
        let loss = loss_l2(&mut tape, &preds, &gt);
        assert!((tape.value(loss).item() - 0.05).abs() < 1e-12);
    }

    /// Pre-activation the scaled sigmoid maps to an eigenvalue of exactly 1:
    /// sigma(z) = (1 - alpha) / lambda gives z = ln(0.01).
    fn unit_eig_z() -> f64 {
        let p = (1.0 - EIG_ALPHA) / EIG_LAMBDA;
        (p / (1.0 - p)).ln()
    }

    #[test]
    fn gaussian_loss_at_mean_with_unit_covariance() {
        let z = unit_eig_z();
        let mut tape: Tape<f64> = Tape::new();
        let raw = tape.constant(Tensor::new(vec![5], vec![7.0, -2.0, z, z, 0.0]));
        let gl = loss_gaussian(&mut tape, &[raw], &[[7.0, -2.0]], 0.0);
        let got = tape.value(gl.loss).item();
        assert!((got - std::f64::consts::TAU.ln()).abs() < 1e-9, "got {got}");
        assert!((tape.value(gl.dets[0]).item() - 1.0).abs() < 1e-9);
        // One pixel off along x adds 1/2.
        let mut tape: Tape<f64> = Tape::new();
        let raw = tape.constant(Tensor::new(vec![5], vec![7.0, -2.0, z, z, 0.0]));
        let gl = loss_gaussian(&mut tape, &[raw], &[[8.0, -2.0]], 0.0);
        let got = tape.value(gl.loss).item();
        assert!((got - (std::f64::consts::TAU.ln() + 0.5)).abs() < 1e-9);
    }

    #[test]
    fn gaussian_regulariser_adds_unnormalised_det_sum() {
        let z = unit_eig_z();
        let t = 6usize;
        let mut tape: Tape<f64> = Tape::new();
        let raws: Vec<NodeId> = (0..t)
            .map(|_| tape.constant(Tensor::new(vec![5], vec![0.0, 0.0, z, z, 0.0])))
            .collect();
        let gt = vec![[0.0, 0.0]; t];
        let base = loss_gaussian(&mut tape, &raws, &gt, 0.0);
        let reg = loss_gaussian(&mut tape, &raws, &gt, 10.0);
        let delta = tape.value(reg.loss).item() - tape.value(base.loss).item();
        // det = 1 per step, so the regulariser adds 10 t, not 10.
        assert!((delta - 10.0 * t as f64).abs() < 1e-6, "delta {delta}");
    }

    #[test]
    fn gaussian_rotation_follows_covariance_convention() {
        // theta = pi/4, eigenvalues (2, 0) must give [[1, -1], [-1, 1]].
        let s = sigma_from([2.0, 0.0], std::f64::consts::FRAC_PI_4);
        let want = [[1.0, -1.0], [-1.0, 1.0]];
        for r in 0..2 {
            for c in 0..2 {
                assert!((s[r][c] - want[r][c]).abs() < 1e-12, "sigma {s:?}");
            }
        }
        // A residual along (1, 1) rotates onto the second eigendirection
        // when theta = pi/4, so only eig2 enters the quadratic form.
        let mut tape: Tape<f64> = Tape::new();
        let z2 = {
            let p: f64 = (2.0 - EIG_ALPHA) / EIG_LAMBDA;
            (p / (1.0 - p)).ln()
        };
        let z1 = unit_eig_z();
        let raw = tape.constant(Tensor::new(
            vec![5],
            vec![0.0, 0.0, z2, z1, std::f64::consts::FRAC_PI_4],
        ));
        let d = std::f64::consts::SQRT_2 / 2.0;
        let gl = loss_gaussian(&mut tape, &[raw], &[[d, d]], 0.0);
        let want = std::f64::consts::TAU.ln() + 0.5 * 2.0f64.ln() + 0.5;
        let got = tape.value(gl.loss).item();
        assert!((got - want).abs() < 1e-9, "got {got} want {want}");
    }

    #[test]
    fn heatmap_loss_uniform_and_peaked() {
        let side = 16usize;
        let mut tape: Tape<f64> = Tape::new();
        let zeros = tape.constant(Tensor::zeros(vec![side, side, 1]));
        let hl = loss_heatmap(&mut tape, &[zeros], &[[3.0, 5.0]], side, 1.0);
        let want = (side as f64 * side as f64).ln();
        assert!((tape.value(hl.loss).item() - want).abs() < 1e-9);
        assert_eq!(hl.clamped, 0);

        // All mass on the right cell: loss tends to 0 (delta = 1).
        let mut data = vec![0.0; side * side];
        data[5 * side + 3] = 60.0;
        let mut tape: Tape<f64> = Tape::new();
        let peaked = tape.constant(Tensor::new(vec![side, side, 1], data));
        let hl = loss_heatmap(&mut tape, &[peaked], &[[3.0, 5.0]], side, 1.0);
        assert!(tape.value(hl.loss).item().abs() < 1e-9);

        // Cell side delta = 0.5 shifts the loss by 2 ln 0.5.
        let mut tape: Tape<f64> = Tape::new();
        let zeros = tape.constant(Tensor::zeros(vec![side, side, 1]));
        let hl = loss_heatmap(&mut tape, &[zeros], &[[3.0, 5.0]], side, 0.5);
        let want = (side as f64 * side as f64).ln() + 2.0 * 0.5f64.ln();
        assert!((tape.value(hl.loss).item() - want).abs() < 1e-9);

        // Off-image ground truth is clamped and counted.
        let mut tape: Tape<f64> = Tape::new();
        let zeros = tape.constant(Tensor::zeros(vec![side, side, 1]));
        let hl = loss_heatmap(&mut tape, &[zeros], &[[-3.0, 5.0]], side, 1.0);
        assert_eq!(hl.clamped, 1);
    }

    #[test]
    fn heatmap_decodes() {
        let side = 4usize;
        let mut probs = vec![0.0; 16];
        probs[2 * 4 + 1] = 1.0;
        assert_eq!(decode_heatmap(&probs, side, HeatmapDecode::Argmax), [1.0, 2.0]);
        assert_eq!(decode_heatmap(&probs, side, HeatmapDecode::Expectation), [1.0, 2.0]);
        // A tie between two cells averages their centres.
        let mut probs = vec![0.0; 16];
        probs[0] = 0.5;
        probs[3] = 0.5;
        assert_eq!(decode_heatmap(&probs, side, HeatmapDecode::Argmax), [1.5, 0.0]);
    }

    #[test]
    fn gaussian_predictions_expose_valid_covariances() {
        let model: Model<f64> = Model::new(tiny_cfg(Variant::Mn3), 21);
        let mut frames = black_frames(16, 4);
        frames[0].data[3 * (16 * 3 + 3)] = 150;
        let preds = model.forward_predict(&frames, 10).unwrap();
        for p in preds {
            match p {
                Prediction::Gaussian { eig, sigma, .. } => {
                    for e in eig {
                        assert!(e > EIG_ALPHA && e < EIG_ALPHA + EIG_LAMBDA);
                    }
                    assert!((sigma[0][1] - sigma[1][0]).abs() < 1e-12);
                    assert!(sigma[0][0] + sigma[1][1] > 0.0);
                    assert!(sigma[0][0] * sigma[1][1] - sigma[0][1] * sigma[1][0] > 0.0);
                }
                _ => panic!("expected gaussians"),
            }
        }
    }

    #[test]
    fn heatmap_predictions_sum_to_one() {
        let model: Model<f64> = Model::new(tiny_cfg(Variant::Mn4), 23);
        let mut frames = black_frames(16, 4);
        frames[1].data[3 * (16 * 8 + 2) + 1] = 99;
        let preds = model.forward_predict(&frames, 7).unwrap();
        for p in preds {
            match p {
                Prediction::Heatmap { probs, side } => {
                    assert_eq!(side, 16);
                    let s: f64 = probs.iter().sum();
                    assert!((s - 1.0).abs() < 1e-6);
                }
                _ => panic!("expected heatmaps"),
            }
        }
    }

    fn tiny_dataset(count: usize, seed: u64) -> (tempfile::TempDir, Dataset) {
        let dir = tempfile::tempdir().unwrap();
        let cam = CameraModel::with_size(16);
        let protocol = RecordingProtocol::for_camera(&cam);
        let mut cfg = ScenarioConfig::new(Scenario::S0, count, seed);
        cfg.splits = [0.5, 0.25, 0.25];
        generate_dataset(&cfg, &cam, &protocol, dir.path()).unwrap();
        let ds = Dataset::load(&dir.path().join("s0.manifest.json"), None).unwrap();
        (dir, ds)
    }

    #[test]
    fn training_overfits_one_sequence() {
        let (_dir, ds) = tiny_dataset(2, 400);
        let cfg = tiny_cfg(Variant::Mn2);
        let mut tcfg = TrainConfig::new(6, 1);
        tcfg.batch_size = 4;
        tcfg.max_epochs = 200;
        tcfg.patience = 200;
        tcfg.opt.lr = 5e-3;
        let log_dir = tempfile::tempdir().unwrap();
        let log = log_dir.path().join("train.csv");
        let out = train(&cfg, &tcfg, &ds, Some(&log)).unwrap();
        assert_eq!(out.summary.train_sequences, 1);
        let text = std::fs::read_to_string(&log).unwrap();
        let losses: Vec<f64> = text
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
            .collect();
        assert_eq!(losses.len(), 200);
        let (first, last) = (losses[0], *losses.last().unwrap());
        assert!(
            last * 100.0 <= first,
            "train loss fell only from {first} to {last}"
        );
    }

    #[test]
    fn training_is_deterministic() {
        let (_dir, ds) = tiny_dataset(6, 77);
        let cfg = tiny_cfg(Variant::Mn2);
        let mut tcfg = TrainConfig::new(5, 9);
        tcfg.batch_size = 3;
        tcfg.max_epochs = 3;
        tcfg.patience = 10;
        let a = train(&cfg, &tcfg, &ds, None).unwrap();
        let b = train(&cfg, &tcfg, &ds, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let pa = dir.path().join("a.ckpt");
        let pb = dir.path().join("b.ckpt");
        a.model.save(&pa, &tcfg, &a.summary).unwrap();
        b.model.save(&pb, &tcfg, &b.summary).unwrap();
        assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
    }

    #[test]
    fn checkpoint_round_trips_model() {
        let (_dir, ds) = tiny_dataset(6, 78);
        let cfg = tiny_cfg(Variant::Mn4);
        let mut tcfg = TrainConfig::new(5, 2);
        tcfg.max_epochs = 2;
        tcfg.batch_size = 3;
        let out = train(&cfg, &tcfg, &ds, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        out.model.save(&path, &tcfg, &out.summary).unwrap();
        let (loaded, header) = Model::load(&path).unwrap();
        assert_eq!(header["summary"]["epochs_run"], 2);
        let recs: Vec<&SequenceRecord> = ds.records_in(Split::Test).collect();
        let frames = &recs[0].frames;
        let a = out.model.forward_predict(&frames[..4], 6).unwrap();
        let b = loaded.forward_predict(&frames[..4], 6).unwrap();
        for (x, y) in a.iter().zip(&b) {
            match (x, y) {
                (Prediction::Heatmap { probs: p, .. }, Prediction::Heatmap { probs: q, .. }) => {
                    assert_eq!(p, q)
                }
                _ => panic!("expected heatmaps"),
            }
        }
    }

    #[test]
    fn train_rejects_horizon_longer_than_data() {
        let (_dir, ds) = tiny_dataset(6, 79);
        let cfg = tiny_cfg(Variant::Mn2);
        let tcfg = TrainConfig::new(10_000, 3);
        match train(&cfg, &tcfg, &ds, None) {
            Err(ModelError::EmptyDataset(_)) => {}
            other => panic!("expected EmptyDataset, got {other:?}"),
        }
    }
}
