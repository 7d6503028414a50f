//! Scratch probe for the criterion-10 schedule; not part of the suite.

use serde_json::json;
use tempfile::TempDir;

use slidelab::datagen::{generate_dataset, Dataset, RecordingProtocol, ScenarioConfig, Split};
use slidelab::eval::evaluate_model;
use slidelab::models::{self, HeatmapDecode, Model, ModelConfig, TrainConfig, Variant, T0};
use slidelab::physics::Scenario;
use slidelab::render::CameraModel;

#[test]
#[ignore]
fn probe_c10() {
    let work = TempDir::new().unwrap();
    let work = work.path();
    let cam = CameraModel::with_size(128);
    let mut protocol = RecordingProtocol::for_camera(&cam);
    protocol.frames_max = 105;
    let cfg = ScenarioConfig::new(Scenario::S0, 600, 0xC10);
    let dir = work.join("c10");
    let t0 = std::time::Instant::now();
    generate_dataset(&cfg, &cam, &protocol, &dir).unwrap();
    eprintln!("gen {:.1}s", t0.elapsed().as_secs_f64());
    let t0 = std::time::Instant::now();
    let ds = Dataset::load(&dir.join("s0.manifest.json"), Some(T0)).unwrap();
    eprintln!("load {:.1}s", t0.elapsed().as_secs_f64());

    let mut mcfg = ModelConfig::new(Variant::Mn4, 128);
    mcfg.channels = 8;
    let bound = (128.0f64 * 128.0).ln();

    let t0 = std::time::Instant::now();
    let untrained: Model<f32> = Model::new(mcfg.clone(), 13);
    let base =
        evaluate_model(&untrained, &ds, Split::Test, &[20], HeatmapDecode::Argmax, json!({}))
            .unwrap();
    let u_pplx = base.horizons[0].ln_perplexity.unwrap();
    eprintln!("untrained eval {:.1}s", t0.elapsed().as_secs_f64());

    let mut tcfg = TrainConfig::new(20, 13);
    tcfg.max_epochs = 100;
    tcfg.batch_size = 20;
    tcfg.opt.lr = 5e-3;
    let log = std::path::PathBuf::from("/tmp/probe_c10.train.csv");
    let out = models::train(&mcfg, &tcfg, &ds, Some(&log)).unwrap();
    let report =
        evaluate_model(&out.model, &ds, Split::Test, &[20], HeatmapDecode::Argmax, json!({}))
            .unwrap();
    let t_pplx = report.horizons[0].ln_perplexity.unwrap();
    println!(
        "untrained {u_pplx:.4}, trained {t_pplx:.4} (bound {bound:.4}) after {} epochs, best \
         val {:.4} at {}",
        out.summary.epochs_run, out.summary.best_val_metric, out.summary.best_epoch
    );
    assert!(t_pplx < bound);
}
