mod common;

use std::fs;

use heightfuse::metrics::{ap50, HeightMetricsReport, InstanceRecord};
use heightfuse::model::{load_checkpoint, save_checkpoint, ModelError, CHECKPOINT_VERSION};
use heightfuse::model::{ArchScale, FusionMode, FusionVariant};
use heightfuse::synth::{
    clean_sar, generate_dataset, generate_scene, load_dataset, write_dataset, SceneSpec, INSTANCES_FILE,
};
use heightfuse::train::{predict, prepare, train, TrainConfig};

fn small_arch() -> ArchScale {
    ArchScale {
        base_width: 8,
        blocks: [1; 4],
    }
}

#[test]
fn dataset_layout_and_reload() {
    let dir = tempfile::tempdir().unwrap();
    let samples = generate_dataset(&SceneSpec::default(), 8, 21).unwrap();
    write_dataset(&samples, dir.path()).unwrap();
    let mut tifs = 0;
    let mut jsons = 0;
    for e in walk(dir.path()) {
        match e.extension().and_then(|x| x.to_str()) {
            Some("tif") => tifs += 1,
            Some("json") => jsons += 1,
            _ => {}
        }
    }
    assert_eq!((tifs, jsons), (24, 1));
    assert!(dir.path().join(INSTANCES_FILE).is_file());
    assert_eq!(load_dataset(dir.path()).unwrap(), samples);
}

fn walk(p: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(p).unwrap() {
        let path = e.unwrap().path();
        if path.is_dir() {
            out.extend(walk(&path));
        } else {
            out.push(path);
        }
    }
    out
}

#[test]
fn ground_truth_agrees_with_itself() {
    let samples = generate_dataset(&SceneSpec::default(), 4, 2).unwrap();
    let mut gt = Vec::new();
    let mut instances: Vec<InstanceRecord> = Vec::new();
    for s in &samples {
        gt.extend(s.ndsm.as_ref().unwrap().plane(0));
        instances.extend(s.instances.iter().cloned());
    }
    let r = HeightMetricsReport::compute(&gt, &gt).unwrap();
    assert_eq!((r.delta1, r.rmse, r.mae, r.r2), (1.0, 0.0, 0.0, 1.0));
    let scored: Vec<InstanceRecord> = instances
        .iter()
        .cloned()
        .map(|mut i| {
            i.score = Some(1.0);
            i
        })
        .collect();
    assert_eq!(ap50(&scored, &instances).unwrap().ap50, 1.0);
}

#[test]
fn speckle_preserves_mean_intensity() {
    let spec = SceneSpec {
        size: 16,
        n_buildings: 1,
        ..Default::default()
    };
    let (mut noisy, mut clean) = (0.0, 0.0);
    for seed in 0..1000 {
        let s = generate_scene(&SceneSpec { seed, ..spec.clone() }).unwrap();
        noisy += s.sar.unwrap().plane(0).iter().sum::<f64>();
        clean += clean_sar(&s.ndsm.unwrap().plane(0)).iter().sum::<f64>();
    }
    assert!((noisy / clean - 1.0).abs() < 0.02, "ratio {}", noisy / clean);
}

#[test]
fn buildings_are_brighter_in_noise_free_sar() {
    for seed in 0..10 {
        let s = generate_scene(&SceneSpec { seed, ..Default::default() }).unwrap();
        let nd = s.ndsm.unwrap().plane(0);
        let c = clean_sar(&nd);
        let mean = |on: bool| {
            let v: Vec<f64> = c.iter().zip(&nd).filter(|(_, h)| (**h > 0.0) == on).map(|(x, _)| *x).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(mean(true) > mean(false));
    }
}

#[test]
fn loss_decreases_over_first_full_batch_steps() {
    // Default lr and momentum; a tight clip keeps the early heavy-ball steps
    // inside the region where the loss is locally smooth.
    for seed in 0..4 {
        let data = generate_dataset(&SceneSpec::default(), 4, seed).unwrap();
        let cfg = TrainConfig {
            epochs: 10,
            batch_size: 4,
            seed,
            max_grad_norm: Some(0.1),
            variant: FusionVariant::new(FusionMode::Early, true),
            ..Default::default()
        };
        let st = train(&cfg, &data).unwrap();
        let l: Vec<f64> = st.loss_history.iter().map(|(_, v)| *v).collect();
        assert_eq!(l.len(), 10);
        assert!(l.windows(2).all(|w| w[1] < w[0]), "seed {seed}: {l:?}");
    }
}

#[test]
fn checkpoint_file_roundtrip_and_corruption() {
    let data = generate_dataset(&SceneSpec { size: 32, ..Default::default() }, 2, 8).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 2,
        arch: small_arch(),
        variant: FusionVariant::new(FusionMode::Intermediate, true),
        ..Default::default()
    };
    let st = train(&cfg, &data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&st.model, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(predict(&back, &data[0]).unwrap(), predict(&st.model, &data[0]).unwrap());
    let p = prepare(&back, &data[1], false).unwrap();
    let q = prepare(&st.model, &data[1], false).unwrap();
    assert_eq!(p.sar.unwrap().data(), q.sar.unwrap().data());

    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(ModelError::Corrupt { .. })));
    let mut bumped = bytes.clone();
    bumped[8..12].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
    fs::write(&path, &bumped).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(ModelError::Version { .. })));
}

#[test]
fn training_is_reproducible() {
    let data = generate_dataset(&SceneSpec { size: 32, ..Default::default() }, 3, 4).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 2,
        arch: small_arch(),
        variant: FusionVariant::new(FusionMode::Late, false),
        ..Default::default()
    };
    let a = train(&cfg, &data).unwrap();
    let b = train(&cfg, &data).unwrap();
    let bits = |h: &[(usize, f64)]| h.iter().map(|(s, v)| (*s, v.to_bits())).collect::<Vec<_>>();
    assert_eq!(bits(&a.loss_history), bits(&b.loss_history));
}
