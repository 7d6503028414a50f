//! Prediction metrics and report emission: pixel error at fixed horizons
//! with percentile bands, log-likelihood based perplexity for the
//! probabilistic heads, entropy evolution, and the cross-horizon
//! generalization table.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{
    estimate_positions, polyfit_extrapolate, BaselineError, SimNet, POLYFIT_FRAMES,
};
use crate::datagen::{Dataset, Split};
use crate::models::{HeatmapDecode, Model, ModelError, OutputKind, Prediction};

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no sequence reaches horizon {horizon}")]
    NoSequences { horizon: usize },
    #[error("point predictions have no likelihood")]
    NotProbabilistic,
    #[error("no checkpoint for training horizon {t_train} at {path}")]
    MissingCheckpoint { t_train: usize, path: String },
    #[error("bad report: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
}

fn io_err<'a>(path: &'a Path) -> impl Fn(std::io::Error) -> EvalError + 'a {
    move |source| EvalError::Io { path: path.display().to_string(), source }
}

/// Serializes an optional mean log-perplexity, spelling out infinities so the
/// JSON report round-trips (plain JSON has no Infinity literal).
mod maybe_inf {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            None => s.serialize_none(),
            Some(x) if x.is_finite() => s.serialize_f64(*x),
            Some(x) if *x > 0.0 => s.serialize_str("inf"),
            Some(_) => s.serialize_str("-inf"),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Option::<Raw>::deserialize(d)? {
            None => Ok(None),
            Some(Raw::Num(x)) => Ok(Some(x)),
            Some(Raw::Str(s)) => match s.as_str() {
                "inf" => Ok(Some(f64::INFINITY)),
                "-inf" => Ok(Some(f64::NEG_INFINITY)),
                other => Err(serde::de::Error::custom(format!(
                    "bad perplexity value {other:?}"
                ))),
            },
        }
    }
}

/// Error statistics at one prediction horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonStats {
    pub horizon: usize,
    pub mean_l2: f64,
    pub p25_l2: f64,
    pub p75_l2: f64,
    /// Mean negative log likelihood of the ground truth; absent for point
    /// predictors, +inf when a heatmap assigns zero mass to a truth cell.
    #[serde(default, skip_serializing_if = "Option::is_none", with = "maybe_inf")]
    pub ln_perplexity: Option<f64>,
    /// Truth cells that carried exactly zero heatmap mass.
    pub zero_mass: usize,
    /// Sequences long enough for this horizon.
    pub sequences: usize,
    pub excluded: usize,
}

/// Spread of prediction entropy across sequences at one timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyPoint {
    /// 1-based predicted frame number.
    pub frame: usize,
    pub mean: f64,
    pub p25: f64,
    pub p75: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub version: u32,
    /// Predictor name: "mn1".."mn4", "simnet", "linear", or "quadratic".
    pub predictor: String,
    /// Caller-supplied context: dataset path, checkpoint header, flags.
    pub config: serde_json::Value,
    /// Sequences in the evaluated split.
    pub sequences: usize,
    /// Sequences skipped before prediction for lack of observed frames.
    pub short_input: usize,
    pub horizons: Vec<HorizonStats>,
    /// Per-timestep entropy evolution; empty for point predictors.
    pub entropy: Vec<EntropyPoint>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        serde_json::from_str(text).map_err(|e| EvalError::Format(e.to_string()))
    }

    /// One row per horizon. The entropy series is JSON-only.
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("horizon,mean_l2,p25_l2,p75_l2,ln_perplexity,zero_mass,sequences,excluded\n");
        for h in &self.horizons {
            let lp = match h.ln_perplexity {
                None => String::new(),
                Some(x) if x.is_finite() => format!("{x:.9}"),
                Some(_) => "inf".into(),
            };
            out.push_str(&format!(
                "{},{:.9},{:.9},{:.9},{},{},{},{}\n",
                h.horizon, h.mean_l2, h.p25_l2, h.p75_l2, lp, h.zero_mass, h.sequences, h.excluded
            ));
        }
        out
    }

    /// Writes JSON or CSV depending on the path extension (default JSON).
    pub fn write(&self, path: &Path) -> Result<(), EvalError> {
        let body = match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => self.to_csv(),
            _ => self.to_json(),
        };
        std::fs::write(path, body).map_err(io_err(path))
    }
}

/// Nearest-rank percentile of an ascending-sorted non-empty slice.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let rank = (p / 100.0 * sorted.len() as f64).ceil() as usize;
    sorted[rank.max(1) - 1]
}

/// Pixel error at each requested horizon. Horizon h reads prediction index
/// h-1; sequences with fewer than h ground-truth frames are excluded and
/// counted. Predictions must extend to the largest horizon.
pub fn l2_at(
    preds: &[Vec<[f64; 2]>],
    gts: &[Vec<[f64; 2]>],
    horizons: &[usize],
) -> Result<Vec<HorizonStats>, EvalError> {
    assert_eq!(preds.len(), gts.len(), "one prediction per sequence");
    assert!(horizons.iter().all(|&h| h >= 1));
    let mut out = Vec::with_capacity(horizons.len());
    for &h in horizons {
        let mut errors: Vec<f64> = Vec::new();
        for (p, g) in preds.iter().zip(gts) {
            if g.len() < h {
                continue;
            }
            assert!(p.len() >= h, "prediction shorter than horizon {h}");
            let dx = p[h - 1][0] - g[h - 1][0];
            let dy = p[h - 1][1] - g[h - 1][1];
            errors.push((dx * dx + dy * dy).sqrt());
        }
        if errors.is_empty() {
            return Err(EvalError::NoSequences { horizon: h });
        }
        errors.sort_by(|a, b| a.total_cmp(b));
        let mean = errors.iter().sum::<f64>() / errors.len() as f64;
        out.push(HorizonStats {
            horizon: h,
            mean_l2: mean,
            p25_l2: percentile(&errors, 25.0),
            p75_l2: percentile(&errors, 75.0),
            ln_perplexity: None,
            zero_mass: 0,
            sequences: errors.len(),
            excluded: gts.len() - errors.len(),
        });
    }
    Ok(out)
}

/// Negative log likelihood of one ground-truth point under one prediction.
/// Heatmaps use the mass of the rounded truth cell with the 2 ln(delta) cell
/// area correction; zero mass yields +inf.
fn neg_log_likelihood(pred: &Prediction, gt: [f64; 2], delta: f64) -> Result<f64, EvalError> {
    match pred {
        Prediction::Point(_) => Err(EvalError::NotProbabilistic),
        Prediction::Gaussian { mu, eig, theta, .. } => {
            let d = [gt[0] - mu[0], gt[1] - mu[1]];
            let (s, c) = theta.sin_cos();
            let u1 = c * d[0] - s * d[1];
            let u2 = s * d[0] + c * d[1];
            Ok((2.0 * std::f64::consts::PI).ln()
                + 0.5 * (eig[0].ln() + eig[1].ln())
                + 0.5 * (u1 * u1 / eig[0] + u2 * u2 / eig[1]))
        }
        Prediction::Heatmap { probs, side } => {
            let clamp = |v: f64| (v.round().max(0.0) as usize).min(side - 1);
            let mass = probs[clamp(gt[1]) * side + clamp(gt[0])];
            if mass == 0.0 {
                Ok(f64::INFINITY)
            } else {
                Ok(-mass.ln() + 2.0 * delta.ln())
            }
        }
    }
}

/// Mean negative log likelihood over (prediction, truth) pairs at one
/// horizon, with the count of zero-mass heatmap cells. The mean is +inf
/// whenever any pair has zero mass.
pub fn ln_perplexity(
    preds: &[&Prediction],
    gts: &[[f64; 2]],
    delta: f64,
) -> Result<(f64, usize), EvalError> {
    assert_eq!(preds.len(), gts.len());
    assert!(!preds.is_empty(), "empty pair set");
    let mut total = 0.0;
    let mut zero_mass = 0usize;
    for (p, g) in preds.iter().zip(gts) {
        let nll = neg_log_likelihood(p, *g, delta)?;
        if nll.is_infinite() {
            zero_mass += 1;
        }
        total += nll;
    }
    Ok((total / preds.len() as f64, zero_mass))
}

/// Entropy of one prediction in nats: discrete Shannon entropy for heatmaps
/// (0 ln 0 := 0), differential entropy for Gaussians. None for points.
pub fn entropy(pred: &Prediction) -> Option<f64> {
    match pred {
        Prediction::Point(_) => None,
        Prediction::Gaussian { eig, .. } => Some(
            (2.0 * std::f64::consts::PI * std::f64::consts::E).ln()
                + 0.5 * (eig[0] * eig[1]).ln(),
        ),
        Prediction::Heatmap { probs, .. } => Some(
            probs
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| -p * p.ln())
                .sum(),
        ),
    }
}

/// Mean and quartiles of prediction entropy at each timestep 1..=t_max,
/// across all sequences.
fn entropy_series(all_preds: &[Vec<Prediction>], t_max: usize) -> Vec<EntropyPoint> {
    let mut series = Vec::with_capacity(t_max);
    for t in 0..t_max {
        let mut values: Vec<f64> = all_preds
            .iter()
            .filter_map(|seq| entropy(&seq[t]))
            .collect();
        if values.is_empty() {
            return Vec::new();
        }
        values.sort_by(|a, b| a.total_cmp(b));
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        series.push(EntropyPoint {
            frame: t + 1,
            mean,
            p25: percentile(&values, 25.0),
            p75: percentile(&values, 75.0),
        });
    }
    series
}

/// Merge per-horizon likelihood stats into L2 stats computed on the same
/// sequences.
fn add_perplexity(
    stats: &mut [HorizonStats],
    all_preds: &[Vec<Prediction>],
    gts: &[Vec<[f64; 2]>],
    delta: f64,
) -> Result<(), EvalError> {
    for hs in stats.iter_mut() {
        let h = hs.horizon;
        let mut preds: Vec<&Prediction> = Vec::new();
        let mut points: Vec<[f64; 2]> = Vec::new();
        for (seq, g) in all_preds.iter().zip(gts) {
            if g.len() >= h {
                preds.push(&seq[h - 1]);
                points.push(g[h - 1]);
            }
        }
        let (mean, zero_mass) = ln_perplexity(&preds, &points, delta)?;
        hs.ln_perplexity = Some(mean);
        hs.zero_mass = zero_mass;
    }
    Ok(())
}

fn gt_points(dataset: &Dataset, split: Split) -> Vec<Vec<[f64; 2]>> {
    dataset
        .records_in(split)
        .map(|r| r.pixels_gt.iter().map(|p| [p[0] as f64, p[1] as f64]).collect())
        .collect()
}

/// Full metric sweep for a trained predictor on one split.
pub fn evaluate_model(
    model: &Model<f32>,
    dataset: &Dataset,
    split: Split,
    horizons: &[usize],
    decode: HeatmapDecode,
    config: serde_json::Value,
) -> Result<MetricsReport, EvalError> {
    let t_max = horizons.iter().copied().max().expect("at least one horizon");
    let gts = gt_points(dataset, split);
    let mut all_preds: Vec<Vec<Prediction>> = Vec::with_capacity(gts.len());
    for rec in dataset.records_in(split) {
        all_preds.push(model.forward_predict(&rec.frames, t_max)?);
    }
    let points: Vec<Vec<[f64; 2]>> = all_preds
        .iter()
        .map(|seq| seq.iter().map(|p| p.point(decode)).collect())
        .collect();
    let mut stats = l2_at(&points, &gts, horizons)?;
    if model.cfg.variant.output_kind() != OutputKind::Point {
        add_perplexity(&mut stats, &all_preds, &gts, model.cfg.delta)?;
    }
    Ok(MetricsReport {
        version: REPORT_VERSION,
        predictor: model.cfg.variant.to_string(),
        config,
        sequences: gts.len(),
        short_input: 0,
        horizons: stats,
        entropy: entropy_series(&all_preds, t_max),
    })
}

/// Metric sweep for a polynomial extrapolation baseline. Sequences without
/// the required observed frames are skipped and counted.
pub fn evaluate_polyfit(
    degree: usize,
    dataset: &Dataset,
    split: Split,
    horizons: &[usize],
    config: serde_json::Value,
) -> Result<MetricsReport, EvalError> {
    let t_max = horizons.iter().copied().max().expect("at least one horizon");
    let mut preds: Vec<Vec<[f64; 2]>> = Vec::new();
    let mut gts: Vec<Vec<[f64; 2]>> = Vec::new();
    let mut short_input = 0usize;
    let mut total = 0usize;
    for rec in dataset.records_in(split) {
        total += 1;
        if rec.frames.len() < POLYFIT_FRAMES {
            short_input += 1;
            continue;
        }
        let observed = estimate_positions(&rec.frames)?;
        preds.push(polyfit_extrapolate(&observed, degree, t_max));
        gts.push(rec.pixels_gt.iter().map(|p| [p[0] as f64, p[1] as f64]).collect());
    }
    let stats = l2_at(&preds, &gts, horizons)?;
    Ok(MetricsReport {
        version: REPORT_VERSION,
        predictor: if degree == 1 { "linear".into() } else { "quadratic".into() },
        config,
        sequences: total,
        short_input,
        horizons: stats,
        entropy: Vec::new(),
    })
}

/// Metric sweep for the parameter-regression baseline: regress physical
/// parameters per sequence, then re-simulate forward.
pub fn evaluate_simnet(
    net: &SimNet,
    dataset: &Dataset,
    split: Split,
    horizons: &[usize],
    config: serde_json::Value,
) -> Result<MetricsReport, EvalError> {
    let t_max = horizons.iter().copied().max().expect("at least one horizon");
    let cam = &dataset.manifest.camera;
    let protocol = &dataset.manifest.protocol;
    let mut preds: Vec<Vec<[f64; 2]>> = Vec::new();
    let gts = gt_points(dataset, split);
    for rec in dataset.records_in(split) {
        let params = net.regress(&rec.frames)?;
        preds.push(crate::baselines::simnet_predict(
            &params,
            cam,
            protocol,
            rec.experiment.gravity,
            t_max,
        )?);
    }
    let stats = l2_at(&preds, &gts, horizons)?;
    Ok(MetricsReport {
        version: REPORT_VERSION,
        predictor: "simnet".into(),
        config,
        sequences: gts.len(),
        short_input: 0,
        horizons: stats,
        entropy: Vec::new(),
    })
}

/// Mean pixel error per (training horizon, evaluation horizon) pair, with
/// polynomial baselines (and optionally the parameter regressor) as extra
/// columns over the same evaluation horizons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationTable {
    pub train_horizons: Vec<usize>,
    pub eval_horizons: Vec<usize>,
    /// cells[i][j]: mean L2 at eval_horizons[i] for train_horizons[j].
    pub cells: Vec<Vec<f64>>,
    pub linear: Vec<f64>,
    pub quadratic: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simnet: Option<Vec<f64>>,
}

impl GeneralizationTable {
    /// One row per evaluation horizon, one column per predictor.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("eval_horizon");
        for t in &self.train_horizons {
            out.push_str(&format!(",t{t}"));
        }
        out.push_str(",linear,quadratic");
        if self.simnet.is_some() {
            out.push_str(",simnet");
        }
        out.push('\n');
        for (i, &h) in self.eval_horizons.iter().enumerate() {
            out.push_str(&format!("{h}"));
            for cell in &self.cells[i] {
                out.push_str(&format!(",{cell:.9}"));
            }
            out.push_str(&format!(",{:.9},{:.9}", self.linear[i], self.quadratic[i]));
            if let Some(sn) = &self.simnet {
                out.push_str(&format!(",{:.9}", sn[i]));
            }
            out.push('\n');
        }
        out
    }
}

fn mean_column(report: &MetricsReport) -> Vec<f64> {
    report.horizons.iter().map(|h| h.mean_l2).collect()
}

/// Evaluate one checkpoint per training horizon over the shared evaluation
/// horizons, on the given split.
pub fn generalization_table(
    checkpoints: &[(usize, PathBuf)],
    dataset: &Dataset,
    split: Split,
    eval_horizons: &[usize],
    decode: HeatmapDecode,
    simnet: Option<&SimNet>,
) -> Result<GeneralizationTable, EvalError> {
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(checkpoints.len());
    for (t_train, path) in checkpoints {
        if !path.is_file() {
            return Err(EvalError::MissingCheckpoint {
                t_train: *t_train,
                path: path.display().to_string(),
            });
        }
        let (model, _) = Model::load(path)?;
        let report = evaluate_model(
            &model,
            dataset,
            split,
            eval_horizons,
            decode,
            serde_json::Value::Null,
        )?;
        columns.push(mean_column(&report));
    }
    let linear =
        mean_column(&evaluate_polyfit(1, dataset, split, eval_horizons, serde_json::Value::Null)?);
    let quadratic =
        mean_column(&evaluate_polyfit(2, dataset, split, eval_horizons, serde_json::Value::Null)?);
    let simnet = match simnet {
        Some(net) => Some(mean_column(&evaluate_simnet(
            net,
            dataset,
            split,
            eval_horizons,
            serde_json::Value::Null,
        )?)),
        None => None,
    };
    // Transpose: columns are per training horizon, rows per eval horizon.
    let cells: Vec<Vec<f64>> = (0..eval_horizons.len())
        .map(|i| columns.iter().map(|col| col[i]).collect())
        .collect();
    Ok(GeneralizationTable {
        train_horizons: checkpoints.iter().map(|(t, _)| *t).collect(),
        eval_horizons: eval_horizons.to_vec(),
        cells,
        linear,
        quadratic,
        simnet,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const LN_2PI: f64 = 1.8378770664093453;
    const LN_2PIE: f64 = 2.837877066409345;

    fn uniform_heatmap(side: usize) -> Prediction {
        let n = side * side;
        Prediction::Heatmap { probs: vec![1.0 / n as f64; n], side }
    }

    #[test]
    fn perfect_predictions_score_zero() {
        let gts = vec![vec![[3.0, 4.0]; 40], vec![[1.0, 2.0]; 40]];
        let stats = l2_at(&gts, &gts, &[20, 40]).unwrap();
        for h in &stats {
            assert_eq!(h.mean_l2, 0.0);
            assert_eq!(h.p25_l2, 0.0);
            assert_eq!(h.p75_l2, 0.0);
            assert_eq!(h.sequences, 2);
            assert_eq!(h.excluded, 0);
        }
    }

    #[test]
    fn constant_offset_scores_its_norm() {
        let gts = vec![vec![[10.0, 10.0]; 25]];
        let preds = vec![vec![[13.0, 14.0]; 25]];
        let stats = l2_at(&preds, &gts, &[1, 20]).unwrap();
        for h in &stats {
            assert!((h.mean_l2 - 5.0).abs() < 1e-12);
            assert_eq!(h.p25_l2, 5.0);
            assert_eq!(h.p75_l2, 5.0);
        }
    }

    #[test]
    fn short_sequences_are_excluded_and_counted() {
        let lens = [5usize, 25, 45];
        let gts: Vec<Vec<[f64; 2]>> = lens.iter().map(|&n| vec![[0.0, 0.0]; n]).collect();
        let preds: Vec<Vec<[f64; 2]>> = lens.iter().map(|_| vec![[1.0, 0.0]; 50]).collect();
        let stats = l2_at(&preds, &gts, &[20, 40]).unwrap();
        assert_eq!((stats[0].sequences, stats[0].excluded), (2, 1));
        assert_eq!((stats[1].sequences, stats[1].excluded), (1, 2));
        match l2_at(&preds, &gts, &[50]) {
            Err(EvalError::NoSequences { horizon: 50 }) => {}
            other => panic!("expected NoSequences, got {other:?}"),
        }
    }

    #[test]
    fn percentiles_use_nearest_rank() {
        // Errors 1,2,3,4 at horizon 1: rank ceil(0.25*4)=1 and ceil(0.75*4)=3.
        let gts: Vec<Vec<[f64; 2]>> = (1..=4).map(|_| vec![[0.0, 0.0]]).collect();
        let preds: Vec<Vec<[f64; 2]>> =
            (1..=4).map(|k| vec![[k as f64, 0.0]]).collect();
        let stats = l2_at(&preds, &gts, &[1]).unwrap();
        assert_eq!(stats[0].p25_l2, 1.0);
        assert_eq!(stats[0].p75_l2, 3.0);
        assert!((stats[0].mean_l2 - 2.5).abs() < 1e-12);
    }

    #[test]
    fn gaussian_at_mean_unit_covariance_is_ln_2pi() {
        let pred = Prediction::Gaussian {
            mu: [7.0, -3.0],
            eig: [1.0, 1.0],
            theta: 0.4,
            sigma: [[1.0, 0.0], [0.0, 1.0]],
        };
        let (lp, zeros) = ln_perplexity(&[&pred], &[[7.0, -3.0]], 1.0).unwrap();
        assert!((lp - LN_2PI).abs() < 1e-6, "got {lp}");
        assert_eq!(zeros, 0);
    }

    #[test]
    fn uniform_heatmap_perplexity_is_ln_cell_count() {
        let pred = uniform_heatmap(128);
        let (lp, _) = ln_perplexity(&[&pred], &[[64.0, 64.0]], 1.0).unwrap();
        assert!((lp - (16384.0f64).ln()).abs() < 1e-6, "got {lp}");
    }

    #[test]
    fn certain_heatmap_perplexity_is_zero_and_zero_mass_is_inf() {
        let side = 16;
        let mut probs = vec![0.0; side * side];
        probs[5 * side + 9] = 1.0;
        let pred = Prediction::Heatmap { probs, side };
        let (lp, zeros) = ln_perplexity(&[&pred], &[[9.2, 4.8]], 1.0).unwrap();
        assert_eq!(lp, 0.0);
        assert_eq!(zeros, 0);
        let (lp, zeros) = ln_perplexity(&[&pred], &[[0.0, 0.0]], 1.0).unwrap();
        assert!(lp.is_infinite() && lp > 0.0);
        assert_eq!(zeros, 1);
    }

    #[test]
    fn point_predictions_have_no_perplexity() {
        let pred = Prediction::Point([0.0, 0.0]);
        match ln_perplexity(&[&pred], &[[0.0, 0.0]], 1.0) {
            Err(EvalError::NotProbabilistic) => {}
            other => panic!("expected NotProbabilistic, got {other:?}"),
        }
    }

    #[test]
    fn entropy_reference_values() {
        assert!((entropy(&uniform_heatmap(128)).unwrap() - (16384.0f64).ln()).abs() < 1e-6);
        let side = 8;
        let mut probs = vec![0.0; side * side];
        probs[3] = 1.0;
        assert_eq!(entropy(&Prediction::Heatmap { probs, side }).unwrap(), 0.0);
        let gauss = Prediction::Gaussian {
            mu: [0.0, 0.0],
            eig: [1.0, 1.0],
            theta: 0.0,
            sigma: [[1.0, 0.0], [0.0, 1.0]],
        };
        assert!((entropy(&gauss).unwrap() - LN_2PIE).abs() < 1e-6);
        assert!(entropy(&Prediction::Point([1.0, 2.0])).is_none());
    }

    #[test]
    fn report_json_round_trips_including_infinities() {
        let report = MetricsReport {
            version: REPORT_VERSION,
            predictor: "mn4".into(),
            config: serde_json::json!({"data": "sets/s0", "horizons": [20, 40]}),
            sequences: 12,
            short_input: 1,
            horizons: vec![
                HorizonStats {
                    horizon: 20,
                    mean_l2: 3.25,
                    p25_l2: 1.0,
                    p75_l2: 4.5,
                    ln_perplexity: Some(2.5),
                    zero_mass: 0,
                    sequences: 11,
                    excluded: 1,
                },
                HorizonStats {
                    horizon: 40,
                    mean_l2: 9.0,
                    p25_l2: 2.0,
                    p75_l2: 14.0,
                    ln_perplexity: Some(f64::INFINITY),
                    zero_mass: 3,
                    sequences: 7,
                    excluded: 5,
                },
                HorizonStats {
                    horizon: 10,
                    mean_l2: 1.0,
                    p25_l2: 1.0,
                    p75_l2: 1.0,
                    ln_perplexity: None,
                    zero_mass: 0,
                    sequences: 12,
                    excluded: 0,
                },
            ],
            entropy: vec![EntropyPoint { frame: 1, mean: 4.0, p25: 3.5, p75: 4.5 }],
        };
        let parsed = MetricsReport::from_json(&report.to_json()).unwrap();
        assert_eq!(parsed, report);
        let csv = report.to_csv();
        assert!(csv.lines().count() == 4);
        assert!(csv.contains(",inf,3,"));
    }

    #[test]
    fn generalization_csv_layout() {
        let table = GeneralizationTable {
            train_horizons: vec![10, 20],
            eval_horizons: vec![10, 20],
            cells: vec![vec![1.0, 2.0], vec![3.0, 4.0]],
            linear: vec![5.0, 6.0],
            quadratic: vec![7.0, 8.0],
            simnet: None,
        };
        let csv = table.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "eval_horizon,t10,t20,linear,quadratic");
        assert!(lines.next().unwrap().starts_with("10,1.0"));
        assert!(lines.next().unwrap().starts_with("20,3.0"));
    }

    proptest! {
        #[test]
        fn heatmap_entropy_and_perplexity_bounds(raw in proptest::collection::vec(0.0f64..1.0, 64)) {
            let total: f64 = raw.iter().sum();
            prop_assume!(total > 1e-9);
            let probs: Vec<f64> = raw.iter().map(|v| v / total).collect();
            let pred = Prediction::Heatmap { probs, side: 8 };
            let h = entropy(&pred).unwrap();
            prop_assert!(h >= 0.0 && h <= (64.0f64).ln() + 1e-12);
            let (lp, _) = ln_perplexity(&[&pred], &[[3.0, 3.0]], 1.0).unwrap();
            prop_assert!(lp >= 0.0);
        }
    }
}
