//! Scenario sampling, sequence building and persistent datasets.
//!
//! A dataset is a pair of files: `<name>.blob` holding framed binary records
//! (magic "MNPD", u16 version, then u32 length + payload + CRC32 per record)
//! and `<name>.manifest.json` describing the generation config and the
//! record table. Everything is deterministic under the configured seed, and
//! each record derives from its own (seed, index, attempt) stream so records
//! could be produced in any order or in parallel without changing bytes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::physics::{
    simulate, ExperimentSpec, FrictionField, PhysicsError, PlaneSpec, Scenario, PATCH_GRID_SIDE,
};
use crate::render::{render_frame, CameraModel, Image};

/// Default gravity for generated datasets, in world-units/s^2. Chosen so the
/// default camera (50 px per world-unit) sees 9.81 px/s^2, which keeps
/// recorded sequences in the 40-70 frame range instead of exiting the view
/// within a second.
pub const DATASET_GRAVITY: f64 = 9.81 / 50.0;

/// Number of observed frames models get to see.
pub const T0_DEFAULT: usize = 4;

const FRICTION_LO: f64 = 1e-4;
const FRICTION_HI: f64 = 1e-1;
const PATCH_LO: f64 = 0.5;
const PATCH_HI: f64 = 5.0;
const PATCH_SCALE: f64 = 0.05;
const ANGLE_LIMIT: f64 = std::f64::consts::PI / 6.0;
/// Below this tilt (radians on both axes) an S1/S2 draw counts as degenerate
/// and is redrawn.
const DEGENERATE_ANGLE: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("io on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad dataset format: {0}")]
    Format(String),
    #[error("corrupt record {0}")]
    CorruptRecord(usize),
    #[error("sequence too short after trim/subsample ({0} frames)")]
    TooShort(usize),
    #[error("no usable experiment found for record {0} after {1} attempts")]
    Exhausted(usize, usize),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatagenError + '_ {
    move |source| DatagenError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Recording protocol: physics runs at 120 Hz, raw frames are taken at
/// `raw_fps`, the first `trim` raw frames are dropped and the remainder is
/// subsampled.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RecordingProtocol {
    pub raw_fps: u32,
    pub frames_max: usize,
    pub trim: usize,
    pub subsample: usize,
    pub cube_px: u32,
    /// Sequences with fewer kept frames are rejected and resampled.
    pub min_frames: usize,
}

impl Default for RecordingProtocol {
    fn default() -> Self {
        RecordingProtocol {
            raw_fps: 30,
            frames_max: 240,
            trim: 30,
            subsample: 3,
            cube_px: 5,
            min_frames: T0_DEFAULT + 1,
        }
    }
}

impl RecordingProtocol {
    pub fn for_camera(cam: &CameraModel) -> Self {
        RecordingProtocol { cube_px: cam.block_side_px() as u32, ..Default::default() }
    }

    /// Seconds between two kept frames.
    pub fn kept_dt(&self) -> f64 {
        self.subsample as f64 / self.raw_fps as f64
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub count: usize,
    pub seed: u64,
    pub gravity: f64,
    /// Train/val/test fractions; must sum to 1.
    pub splits: [f64; 3],
}

impl ScenarioConfig {
    pub fn new(scenario: Scenario, count: usize, seed: u64) -> Self {
        ScenarioConfig { scenario, count, seed, gravity: DATASET_GRAVITY, splits: [0.7, 0.15, 0.15] }
    }
}

#[derive(Debug, Clone)]
pub struct SequenceRecord {
    pub experiment: ExperimentSpec,
    pub split: Split,
    pub frames: Vec<Image>,
    pub pixels_gt: Vec<[f32; 2]>,
    /// Ground-truth pixel displacement per kept-frame step (px/frame).
    pub vels_px: Vec<[f32; 2]>,
}

impl SequenceRecord {
    pub fn len(&self) -> usize {
        self.pixels_gt.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels_gt.is_empty()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordEntry {
    pub offset: u64,
    pub length: u32,
    pub split: Split,
    pub n_frames: u32,
    pub experiment: ExperimentSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub scenario: ScenarioConfig,
    pub camera: CameraModel,
    pub protocol: RecordingProtocol,
    pub records: Vec<RecordEntry>,
}

const BLOB_MAGIC: &[u8; 4] = b"MNPD";
const BLOB_VERSION: u16 = 1;
const MANIFEST_VERSION: u32 = 1;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Independent per-record seed; records never share an rng stream.
pub fn record_seed(global: u64, index: u64, attempt: u64) -> u64 {
    splitmix64(splitmix64(global ^ index.wrapping_mul(0xA24BAED4963EE407)) ^ attempt)
}

/// Samples one experiment. Initial position is rejection-sampled uniformly
/// over the visible region, restricted to the quadrant(s) whose corner
/// attains the maximum plane height (ties admit every tied quadrant).
pub fn sample_experiment(cfg: &ScenarioConfig, cam: &CameraModel, rng: &mut ChaCha8Rng) -> ExperimentSpec {
    let (plane, friction) = match cfg.scenario {
        Scenario::S0 => {
            let plane = PlaneSpec::new(0.0, ANGLE_LIMIT);
            let rho = rng.gen_range(FRICTION_LO..FRICTION_HI);
            (plane, FrictionField::Homogeneous { rho })
        }
        Scenario::S1 => {
            let plane = sample_plane(rng);
            let rho = rng.gen_range(FRICTION_LO..FRICTION_HI);
            (plane, FrictionField::Homogeneous { rho })
        }
        Scenario::S2 => {
            let plane = sample_plane(rng);
            let extent = visible_extent(cam);
            let rhos = (0..PATCH_GRID_SIDE * PATCH_GRID_SIDE)
                .map(|_| rng.gen_range(PATCH_LO..PATCH_HI))
                .collect();
            (plane, FrictionField::patch_grid(rhos, extent, PATCH_SCALE))
        }
    };

    let extent = visible_extent(cam);
    let corners = [(-extent, -extent), (-extent, extent), (extent, -extent), (extent, extent)];
    let heights: Vec<f64> = corners.iter().map(|(x, y)| plane.height(*x, *y)).collect();
    let hmax = heights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let margin = cam.block_side_px() / 2;
    let (q0x, q0y) = loop {
        let x = rng.gen_range(-extent..extent);
        let y = rng.gen_range(-extent..extent);
        let admitted = corners.iter().zip(&heights).any(|((cx, cy), h)| {
            (hmax - h).abs() < 1e-12 && x * cx >= 0.0 && y * cy >= 0.0
        });
        // The block must start fully visible or the first frames would clip.
        let q = crate::physics::Vec3::new(x, y, plane.height(x, y));
        if admitted && cam.in_view_with_margin(crate::render::project(cam, q), margin) {
            break (x, y);
        }
    };

    let mut spec = ExperimentSpec::new(q0x, q0y, plane, friction, cfg.scenario, 0);
    spec.gravity = cfg.gravity;
    spec
}

fn sample_plane(rng: &mut ChaCha8Rng) -> PlaneSpec {
    loop {
        let tx = rng.gen_range(-ANGLE_LIMIT..ANGLE_LIMIT);
        let ty = rng.gen_range(-ANGLE_LIMIT..ANGLE_LIMIT);
        if tx.abs() < DEGENERATE_ANGLE && ty.abs() < DEGENERATE_ANGLE {
            continue;
        }
        return PlaneSpec::new(tx, ty);
    }
}

/// Half-width of the visible square in world units.
pub fn visible_extent(cam: &CameraModel) -> f64 {
    cam.width as f64 / (2.0 * cam.alpha)
}

/// Simulates, trims, subsamples and renders one experiment.
pub fn build_sequence(
    spec: &ExperimentSpec,
    cam: &CameraModel,
    protocol: &RecordingProtocol,
    split: Split,
) -> Result<SequenceRecord, DatagenError> {
    let traj = simulate(spec, cam, protocol.frames_max, protocol.raw_fps)?;
    // Keep only frames where the whole block is visible: the detector's
    // centroid stays within 1 px of the projection on unclipped squares, and
    // the block moves on a straight pixel line from rest, so clipped frames
    // form a suffix.
    let margin = (protocol.cube_px / 2) as i64;
    let mut kept: Vec<usize> = (protocol.trim..traj.len()).step_by(protocol.subsample).collect();
    if let Some(cut) = kept.iter().position(|&i| !cam.in_view_with_margin(traj.pixels[i], margin)) {
        kept.truncate(cut);
    }
    if kept.len() < protocol.min_frames {
        return Err(DatagenError::TooShort(kept.len()));
    }
    let dt = protocol.kept_dt();
    let mut frames = Vec::with_capacity(kept.len());
    let mut pixels_gt = Vec::with_capacity(kept.len());
    let mut vels_px = Vec::with_capacity(kept.len());
    for &i in &kept {
        frames.push(render_frame(cam, traj.positions3d[i], protocol.cube_px));
        let px = traj.pixels[i];
        pixels_gt.push([px[0] as f32, px[1] as f32]);
        let v = traj.velocities3d[i];
        vels_px.push([(v.x * cam.alpha * dt) as f32, (v.y * cam.alpha * dt) as f32]);
    }
    Ok(SequenceRecord { experiment: spec.clone(), split, frames, pixels_gt, vels_px })
}

fn split_assignment(count: usize, splits: [f64; 3], seed: u64) -> Vec<Split> {
    let n_train = (count as f64 * splits[0]).round() as usize;
    let n_val = (count as f64 * splits[1]).round() as usize;
    let n_train = n_train.min(count);
    let n_val = n_val.min(count - n_train);
    let mut order: Vec<usize> = (0..count).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x5EED5A17));
    // Fisher-Yates so the partition is a uniform function of the seed.
    for i in (1..count).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut splits_out = vec![Split::Test; count];
    for (rank, &idx) in order.iter().enumerate() {
        splits_out[idx] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    splits_out
}

fn record_payload(rec: &SequenceRecord) -> Vec<u8> {
    let n = rec.frames.len();
    let (w, h) = if n > 0 { (rec.frames[0].width, rec.frames[0].height) } else { (0, 0) };
    let mut buf = Vec::with_capacity(8 + n * (w as usize * h as usize * 3 + 16));
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u16).to_le_bytes());
    buf.extend_from_slice(&(h as u16).to_le_bytes());
    for f in &rec.frames {
        buf.extend_from_slice(&f.data);
    }
    for p in &rec.pixels_gt {
        buf.extend_from_slice(&p[0].to_le_bytes());
        buf.extend_from_slice(&p[1].to_le_bytes());
    }
    for v in &rec.vels_px {
        buf.extend_from_slice(&v[0].to_le_bytes());
        buf.extend_from_slice(&v[1].to_le_bytes());
    }
    buf
}

fn parse_payload(
    payload: &[u8],
    entry: &RecordEntry,
    index: usize,
    keep_frames: Option<usize>,
) -> Result<SequenceRecord, DatagenError> {
    let corrupt = || DatagenError::CorruptRecord(index);
    if payload.len() < 8 {
        return Err(corrupt());
    }
    let n = u32::from_le_bytes(payload[0..4].try_into().unwrap()) as usize;
    let w = u16::from_le_bytes(payload[4..6].try_into().unwrap()) as u32;
    let h = u16::from_le_bytes(payload[6..8].try_into().unwrap()) as u32;
    let frame_bytes = (w * h * 3) as usize;
    let expect = 8 + n * frame_bytes + n * 16;
    if payload.len() != expect || n != entry.n_frames as usize {
        return Err(corrupt());
    }
    let kept = keep_frames.map_or(n, |k| k.min(n));
    let mut frames = Vec::with_capacity(kept);
    for i in 0..kept {
        let start = 8 + i * frame_bytes;
        frames.push(Image { width: w, height: h, data: payload[start..start + frame_bytes].to_vec() });
    }
    let mut pixels_gt = Vec::with_capacity(n);
    let mut vels_px = Vec::with_capacity(n);
    let px_base = 8 + n * frame_bytes;
    for i in 0..n {
        let b = px_base + i * 8;
        pixels_gt.push([
            f32::from_le_bytes(payload[b..b + 4].try_into().unwrap()),
            f32::from_le_bytes(payload[b + 4..b + 8].try_into().unwrap()),
        ]);
    }
    let v_base = px_base + n * 8;
    for i in 0..n {
        let b = v_base + i * 8;
        vels_px.push([
            f32::from_le_bytes(payload[b..b + 4].try_into().unwrap()),
            f32::from_le_bytes(payload[b + 4..b + 8].try_into().unwrap()),
        ]);
    }
    Ok(SequenceRecord { experiment: entry.experiment.clone(), split: entry.split, frames, pixels_gt, vels_px })
}

/// File stem for a scenario ("s0", "s1", "s2").
pub fn scenario_stem(s: Scenario) -> &'static str {
    match s {
        Scenario::S0 => "s0",
        Scenario::S1 => "s1",
        Scenario::S2 => "s2",
    }
}

const MAX_ATTEMPTS: usize = 1000;

/// Generates `cfg.count` records into `<dir>/<stem>.blob` and
/// `<dir>/<stem>.manifest.json`. Experiments whose sequence comes out too
/// short are replaced by redraws from a fresh per-attempt stream, so counts
/// are exact and output is byte-deterministic under the seed.
pub fn generate_dataset(
    cfg: &ScenarioConfig,
    cam: &CameraModel,
    protocol: &RecordingProtocol,
    dir: &Path,
) -> Result<DatasetManifest, DatagenError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let stem = scenario_stem(cfg.scenario);
    let blob_path = dir.join(format!("{stem}.blob"));
    let manifest_path = dir.join(format!("{stem}.manifest.json"));

    let assignment = split_assignment(cfg.count, cfg.splits, cfg.seed);
    let file = std::fs::File::create(&blob_path).map_err(io_err(&blob_path))?;
    let mut out = BufWriter::new(file);
    out.write_all(BLOB_MAGIC).map_err(io_err(&blob_path))?;
    out.write_all(&BLOB_VERSION.to_le_bytes()).map_err(io_err(&blob_path))?;
    let mut offset = 6u64;

    let mut entries = Vec::with_capacity(cfg.count);
    for index in 0..cfg.count {
        let mut built = None;
        for attempt in 0..MAX_ATTEMPTS {
            let seed = record_seed(cfg.seed, index as u64, attempt as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut spec = sample_experiment(cfg, cam, &mut rng);
            spec.seed = seed;
            match build_sequence(&spec, cam, protocol, assignment[index]) {
                Ok(rec) => {
                    built = Some(rec);
                    break;
                }
                Err(DatagenError::TooShort(_)) => continue,
                Err(e) => return Err(e),
            }
        }
        let rec = built.ok_or(DatagenError::Exhausted(index, MAX_ATTEMPTS))?;
        let payload = record_payload(&rec);
        let crc = crc32fast::hash(&payload);
        out.write_all(&(payload.len() as u32).to_le_bytes()).map_err(io_err(&blob_path))?;
        out.write_all(&payload).map_err(io_err(&blob_path))?;
        out.write_all(&crc.to_le_bytes()).map_err(io_err(&blob_path))?;
        entries.push(RecordEntry {
            offset,
            length: payload.len() as u32,
            split: rec.split,
            n_frames: rec.len() as u32,
            experiment: rec.experiment.clone(),
        });
        offset += 4 + payload.len() as u64 + 4;
    }
    out.flush().map_err(io_err(&blob_path))?;

    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        scenario: cfg.clone(),
        camera: *cam,
        protocol: *protocol,
        records: entries,
    };
    let mf = std::fs::File::create(&manifest_path).map_err(io_err(&manifest_path))?;
    serde_json::to_writer_pretty(BufWriter::new(mf), &manifest)
        .map_err(|e| DatagenError::Format(format!("manifest write: {e}")))?;
    Ok(manifest)
}

/// Locates the single `*.manifest.json` under `dir`.
pub fn find_manifest(dir: &Path) -> Result<PathBuf, DatagenError> {
    let mut hits = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let p = entry.map_err(io_err(dir))?.path();
        if p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(".manifest.json")) {
            hits.push(p);
        }
    }
    hits.sort();
    match hits.len() {
        0 => Err(DatagenError::Format(format!("no .manifest.json in {}", dir.display()))),
        1 => Ok(hits.pop().unwrap()),
        n => Err(DatagenError::Format(format!("{n} manifests in {}, expected one", dir.display()))),
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DatagenError> {
    let f = std::fs::File::open(path).map_err(io_err(path))?;
    let manifest: DatasetManifest = serde_json::from_reader(BufReader::new(f))
        .map_err(|e| DatagenError::Format(format!("manifest parse: {e}")))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(DatagenError::Format(format!("unsupported manifest version {}", manifest.version)));
    }
    Ok(manifest)
}

/// In-memory dataset. `keep_frames` truncates each record's frame list while
/// keeping the full ground-truth track, which is what training needs and
/// keeps full-resolution datasets within memory.
#[derive(Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub records: Vec<SequenceRecord>,
}

impl Dataset {
    pub fn load(manifest_path: &Path, keep_frames: Option<usize>) -> Result<Self, DatagenError> {
        let manifest = load_manifest(manifest_path)?;
        let blob_path = manifest_path
            .to_str()
            .and_then(|s| s.strip_suffix(".manifest.json"))
            .map(|s| PathBuf::from(format!("{s}.blob")))
            .ok_or_else(|| DatagenError::Format("manifest path must end in .manifest.json".into()))?;
        let file = std::fs::File::open(&blob_path).map_err(io_err(&blob_path))?;
        let mut reader = BufReader::new(file);
        let mut head = [0u8; 6];
        reader.read_exact(&mut head).map_err(io_err(&blob_path))?;
        if &head[..4] != BLOB_MAGIC {
            return Err(DatagenError::Format("bad blob magic".into()));
        }
        let version = u16::from_le_bytes(head[4..6].try_into().unwrap());
        if version != BLOB_VERSION {
            return Err(DatagenError::Format(format!("unsupported blob version {version}")));
        }
        let mut records = Vec::with_capacity(manifest.records.len());
        for (index, entry) in manifest.records.iter().enumerate() {
            let mut len_bytes = [0u8; 4];
            reader.read_exact(&mut len_bytes).map_err(|_| DatagenError::CorruptRecord(index))?;
            let len = u32::from_le_bytes(len_bytes) as usize;
            if len != entry.length as usize {
                return Err(DatagenError::CorruptRecord(index));
            }
            let mut payload = vec![0u8; len];
            reader.read_exact(&mut payload).map_err(|_| DatagenError::CorruptRecord(index))?;
            let mut crc_bytes = [0u8; 4];
            reader.read_exact(&mut crc_bytes).map_err(|_| DatagenError::CorruptRecord(index))?;
            if crc32fast::hash(&payload) != u32::from_le_bytes(crc_bytes) {
                return Err(DatagenError::CorruptRecord(index));
            }
            records.push(parse_payload(&payload, entry, index, keep_frames)?);
        }
        Ok(Dataset { manifest, records })
    }

    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &SequenceRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }
}
