//! Mini-batch training, prediction and loss-curve output.

mod config;

pub use config::{OptimizerKind, TrainConfig, CONFIG_KEYS};

use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{build_model, late_fuse, FusionMode, ModelError, ModelGraph};
use crate::raster::{normalize, NormalizationSpec, RasterError, RasterTile};
use crate::synth::SceneSample;
use crate::tensor::{Adam, Graph, Sgd, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Debug)]
pub enum OptimizerState {
    Sgd(Sgd),
    Adam(Adam),
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: ModelGraph,
    pub optimizer: OptimizerState,
    pub epochs_done: usize,
    /// `(step, smooth-L1)` per optimizer step. For late fusion the value is
    /// the mean of the two branch losses.
    pub loss_history: Vec<(usize, f64)>,
}

impl TrainState {
    /// Writes the loss curve as `step,loss` CSV.
    pub fn write_loss_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut s = String::from("step,loss\n");
        for (step, loss) in &self.loss_history {
            s.push_str(&format!("{step},{loss}\n"));
        }
        write_atomic(path.as_ref(), s.as_bytes())
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

/// Population mean and std of all SAR samples in `samples`.
pub fn sar_statistics(samples: &[SceneSample]) -> Result<(f64, f64)> {
    let tiles: Vec<&RasterTile> = samples.iter().filter_map(|s| s.sar.as_ref()).collect();
    if tiles.is_empty() {
        return Err(TrainError::Data("no SAR tiles to compute statistics from".into()));
    }
    let spec = NormalizationSpec::from_tiles(tiles)?;
    Ok((spec.mean()[0], spec.std()[0]))
}

/// Network inputs and target of one sample, each `1×C×H×W`.
pub struct PreparedSample {
    pub rgb: Option<Tensor>,
    pub sar: Option<Tensor>,
    pub target: Option<Tensor>,
}

/// Normalizes the modalities `model` consumes. The SAR normalization
/// recorded on the model is used when present, otherwise the sample's own
/// statistics.
pub fn prepare(model: &ModelGraph, sample: &SceneSample, with_target: bool) -> Result<PreparedSample> {
    let mode = model.variant().mode;
    let rgb = if mode.needs_rgb() {
        Some(normalize(&sample.rgb, &NormalizationSpec::imagenet_rgb())?)
    } else {
        None
    };
    let sar = if mode.needs_sar() {
        let tile = sample.sar.as_ref().ok_or_else(|| {
            TrainError::Data(format!("scene {} has no SAR tile, which {mode} needs", sample.name))
        })?;
        let (mean, std) = match model.sar_normalization() {
            Some(n) => n,
            None => sar_statistics(std::slice::from_ref(sample))?,
        };
        Some(normalize(tile, &NormalizationSpec::new(vec![mean], vec![std])?)?)
    } else {
        None
    };
    let target = if with_target {
        let nd = sample
            .ndsm
            .as_ref()
            .ok_or_else(|| TrainError::Data(format!("scene {} has no nDSM target", sample.name)))?;
        let mut t = nd.to_tensor();
        t.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        Some(t)
    } else {
        None
    };
    Ok(PreparedSample { rgb, sar, target })
}

fn stack(parts: &[&Option<Tensor>]) -> Result<Option<Tensor>> {
    let ts: Vec<&Tensor> = parts.iter().filter_map(|t| t.as_ref()).collect();
    if ts.is_empty() {
        return Ok(None);
    }
    Ok(Some(Tensor::concat(&ts, 0)?))
}

/// Records the training loss of one batch on `g`.
fn batch_loss(
    model: &ModelGraph,
    g: &mut Graph,
    vars: &IndexMap<String, Var>,
    batch: &[&PreparedSample],
    beta: f64,
) -> Result<(Var, f64)> {
    let rgb = stack(&batch.iter().map(|p| &p.rgb).collect::<Vec<_>>())?.map(|t| g.constant(t));
    let sar = stack(&batch.iter().map(|p| &p.sar).collect::<Vec<_>>())?.map(|t| g.constant(t));
    let target = stack(&batch.iter().map(|p| &p.target).collect::<Vec<_>>())?
        .expect("prepared with targets");
    let target = g.constant(target);
    let out = model.forward_graph(g, vars, rgb, sar)?;
    if model.variant().mode == FusionMode::Late {
        let la = g.smooth_l1_loss(out.branches[0], target, beta)?;
        let lb = g.smooth_l1_loss(out.branches[1], target, beta)?;
        let reported = (g.value(la).item() + g.value(lb).item()) / 2.0;
        Ok((g.add(la, lb)?, reported))
    } else {
        let l = g.smooth_l1_loss(out.output, target, beta)?;
        let v = g.value(l).item();
        Ok((l, v))
    }
}

/// Trains a fresh model for `config.epochs` epochs of `ceil(N / batch_size)`
/// steps. Fully determined by the config (including its seed) and dataset.
pub fn train(config: &TrainConfig, dataset: &[SceneSample]) -> Result<TrainState> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::Data("training set is empty".into()));
    }
    let mut model = build_model(config.variant, config.arch, config.seed)?;
    if config.variant.mode.needs_sar() {
        let (mean, std) = sar_statistics(dataset)?;
        model.set_sar_normalization(mean, std)?;
    }
    let prepared: Vec<PreparedSample> = dataset
        .iter()
        .map(|s| prepare(&model, s, true))
        .collect::<Result<_>>()?;
    let mut optimizer = match config.optimizer {
        OptimizerKind::Sgd => OptimizerState::Sgd(Sgd::new(config.lr, config.momentum)?),
        OptimizerKind::Adam => OptimizerState::Adam(Adam::with_lr(config.lr)?),
    };
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut history = Vec::new();
    let mut step = 0;
    for _ in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(config.batch_size) {
            // batch membership is shuffled, in-batch order is not, so a
            // full-batch loss is independent of the permutation
            let mut idx = chunk.to_vec();
            idx.sort_unstable();
            let batch: Vec<&PreparedSample> = idx.iter().map(|&i| &prepared[i]).collect();
            let mut g = Graph::new();
            let vars = model.params().attach(&mut g);
            let (loss, value) = batch_loss(&model, &mut g, &vars, &batch, config.smooth_l1_beta)?;
            g.backward(loss)?;
            let params = model.params_mut();
            params.accumulate_from(&g, &vars);
            if let Some(max) = config.max_grad_norm {
                params.clip_grad_norm(max);
            }
            match &mut optimizer {
                OptimizerState::Sgd(o) => o.step(params)?,
                OptimizerState::Adam(o) => o.step(params)?,
            }
            history.push((step, value));
            step += 1;
        }
    }
    Ok(TrainState {
        model,
        optimizer,
        epochs_done: config.epochs,
        loss_history: history,
    })
}

/// Mean smooth-L1 loss of `model` over `dataset`, one sample at a time.
/// For late fusion this is the loss of the averaged output.
pub fn evaluate_loss(model: &ModelGraph, dataset: &[SceneSample], beta: f64) -> Result<f64> {
    let mut total = 0.0;
    for s in dataset {
        let p = prepare(model, s, true)?;
        let out = model.forward(p.rgb.as_ref(), p.sar.as_ref())?;
        let mut g = Graph::new();
        let a = g.constant(out);
        let b = g.constant(p.target.expect("prepared with target"));
        let l = g.smooth_l1_loss(a, b, beta)?;
        total += g.value(l).item();
    }
    Ok(total / dataset.len() as f64)
}

fn to_tile(sample: &SceneSample, out: &Tensor) -> Result<RasterTile> {
    Ok(RasterTile::from_height_tensor(sample.rgb.name(), out)?)
}

/// Predicted height map, named after the sample's RGB tile.
pub fn predict(model: &ModelGraph, sample: &SceneSample) -> Result<RasterTile> {
    let p = prepare(model, sample, false)?;
    let out = model.forward(p.rgb.as_ref(), p.sar.as_ref())?;
    to_tile(sample, &out)
}

/// Average of two independently run models' predictions.
pub fn predict_late(a: &ModelGraph, b: &ModelGraph, sample: &SceneSample) -> Result<RasterTile> {
    let run = |m: &ModelGraph| -> Result<Tensor> {
        let p = prepare(m, sample, false)?;
        Ok(m.forward(p.rgb.as_ref(), p.sar.as_ref())?)
    };
    let fused = late_fuse(&run(a)?, &run(b)?)?;
    to_tile(sample, &fused)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ArchScale, FusionVariant};
    use crate::synth::{generate_dataset, SceneSpec};

    fn tiny_config(mode: FusionMode) -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 2,
            variant: FusionVariant::new(mode, true),
            arch: ArchScale {
                base_width: 4,
                blocks: [1; 4],
            },
            ..Default::default()
        }
    }

    fn data() -> Vec<SceneSample> {
        generate_dataset(
            &SceneSpec {
                size: 32,
                n_buildings: 2,
                ..Default::default()
            },
            3,
            1,
        )
        .unwrap()
    }

    #[test]
    fn step_count_and_determinism() {
        let d = data();
        let cfg = tiny_config(FusionMode::Early);
        let a = train(&cfg, &d).unwrap();
        let b = train(&cfg, &d).unwrap();
        assert_eq!(a.loss_history.len(), 4);
        assert_eq!(a.loss_history, b.loss_history);
        assert!(a.loss_history.windows(2).all(|w| w[1].0 == w[0].0 + 1));
    }

    #[test]
    fn zero_lr_leaves_parameters_untouched() {
        let d = data();
        let mut cfg = tiny_config(FusionMode::Intermediate);
        cfg.lr = 0.0;
        cfg.batch_size = 3;
        let st = train(&cfg, &d).unwrap();
        let fresh = build_model(cfg.variant, cfg.arch, cfg.seed).unwrap();
        for ((_, a), (_, b)) in st.model.params().iter().zip(fresh.params().iter()) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let (first, rest) = st.loss_history.split_first().unwrap();
        assert!(rest.iter().all(|(_, l)| l.to_bits() == first.1.to_bits()));
    }

    #[test]
    fn missing_modality_is_reported() {
        let mut d = data();
        d[1].sar = None;
        let err = train(&tiny_config(FusionMode::Early), &d).unwrap_err();
        assert!(err.to_string().contains("no SAR"), "{err}");
        d[1].ndsm = None;
        assert!(train(&tiny_config(FusionMode::RgbOnly), &d).is_err());
    }

    #[test]
    fn prediction_keeps_name_and_shape() {
        let d = data();
        let st = train(&tiny_config(FusionMode::Late), &d).unwrap();
        let t = predict(&st.model, &d[0]).unwrap();
        assert_eq!(t.name(), d[0].rgb.name());
        assert_eq!((t.width(), t.height(), t.bands()), (32, 32, 1));
        let (a, b) = st.model.late_branches().unwrap();
        assert_eq!(predict_late(&a, &b, &d[0]).unwrap(), t);
        assert_eq!(predict_late(&a, &a, &d[0]).unwrap(), predict(&a, &d[0]).unwrap());
    }
}
