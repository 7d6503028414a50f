//! Scratch probe for the criterion-8 MN3 schedule; not part of the suite.

use tempfile::TempDir;

use slidelab::datagen::{generate_dataset, Dataset, RecordingProtocol, ScenarioConfig, Split};
use slidelab::models::{self, ModelConfig, Prediction, TrainConfig, Variant, T0};
use slidelab::physics::Scenario;
use slidelab::render::CameraModel;

#[test]
#[ignore]
fn probe_mn3() {
    let work = TempDir::new().unwrap();
    let work = work.path();
    let cam = CameraModel::with_size(32);
    let protocol = RecordingProtocol::for_camera(&cam);
    let cfg = ScenarioConfig::new(Scenario::S1, 600, 71);
    let dir = work.join("c7");
    generate_dataset(&cfg, &cam, &protocol, &dir).unwrap();
    let ds = Dataset::load(&dir.join("s1.manifest.json"), Some(T0)).unwrap();

    let mut mcfg = ModelConfig::new(Variant::Mn3, 32);
    mcfg.channels = 16;
    let mut tcfg = TrainConfig::new(10, 11);
    tcfg.max_epochs = 60;
    tcfg.opt.lr = 1e-2;
    let log = std::path::PathBuf::from("/tmp/probe_mn3.train.csv");
    let out = models::train(&mcfg, &tcfg, &ds, Some(&log)).unwrap();

    let text = std::fs::read_to_string(&log).unwrap();
    let rows: Vec<(f64, f64)> = text
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[3].parse().unwrap(), f[4].parse().unwrap())
        })
        .collect();
    let flips: Vec<usize> = (0..rows.len() - 1).filter(|&i| rows[i].0 != rows[i + 1].0).collect();
    let schedule_ok = flips.len() == 1 && {
        let k = flips[0];
        rows[k].0 == 10.0
            && rows[k + 1].0 == 0.0
            && rows[k].1 < 100.0
            && rows[..k].iter().all(|r| r.0 == 10.0 && r.1 >= 100.0)
            && rows[k + 1..].iter().all(|r| r.0 == 0.0)
    };

    let mut cov_total = 0usize;
    let mut cov_ok = 0usize;
    for rec in ds.records_in(Split::Test) {
        for pred in out.model.forward_predict(&rec.frames, 40).unwrap() {
            let Prediction::Gaussian { sigma, .. } = pred else { continue };
            cov_total += 1;
            let symmetric = sigma[0][1] == sigma[1][0];
            let half_tr = 0.5 * (sigma[0][0] + sigma[1][1]);
            let det = sigma[0][0] * sigma[1][1] - sigma[0][1] * sigma[1][0];
            let disc = (half_tr * half_tr - det).max(0.0).sqrt();
            let (lo, hi) = (half_tr - disc, half_tr + disc);
            if symmetric && lo > 0.01 && hi < 100.0 {
                cov_ok += 1;
            }
        }
    }
    println!(
        "schedule_ok {schedule_ok}, flips {flips:?}, det_off {:?}, cov {cov_ok}/{cov_total}, \
         epochs {}",
        out.summary.det_reg_off_epoch, out.summary.epochs_run
    );
    assert!(schedule_ok && cov_total > 0 && cov_ok == cov_total);
}
