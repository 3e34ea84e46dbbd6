use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};

use heightfuse::metrics::{ap50, read_coco_json, EvalReport};
use heightfuse::model::{load_checkpoint, save_checkpoint, FusionMode, ModelError, ModelGraph};
use heightfuse::raster::{read_tiff, write_tiff};
use heightfuse::synth::{generate_dataset, load_dataset, write_dataset, SceneSpec, DSM_DIR};
use heightfuse::tensor::TensorError;
use heightfuse::train::{predict, predict_late, train, TrainConfig, TrainError};

#[derive(Parser)]
#[command(name = "heightfuse", version, about = "Building height estimation from RGB and SAR tiles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset split
    Synth(SynthArgs),
    /// Train a model on a dataset split
    Train(TrainArgs),
    /// Predict height maps for every scene of a split
    Predict(PredictArgs),
    /// Compare predicted height tiles with reference nDSM tiles
    EvalHeight(EvalHeightArgs),
    /// Compute mask AP50 of predicted instances against ground truth
    EvalMasks(EvalMasksArgs),
    /// Combine a height report and a mask report into the final score
    Score(ScoreArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    scenes: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Buildings per scene
    #[arg(long, default_value_t = 4)]
    buildings: usize,
    #[arg(long, default_value_t = 4)]
    looks: u32,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Flat `key = value` file; flags below override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    variant: Option<FusionMode>,
    /// Enable decoder skip connections
    #[arg(long)]
    skip: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `key=value` override, repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Checkpoint path; a late model writes `<stem>.rgb.<ext>` and `<stem>.sar.<ext>`
    #[arg(long)]
    out: PathBuf,
    /// Loss curve CSV (defaults to the checkpoint path with a `.csv` extension)
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    /// One checkpoint, or two for late fusion
    #[arg(long, required = true, num_args = 1)]
    ckpt: Vec<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportOut {
    #[arg(long)]
    report: PathBuf,
    /// Also write `<report>.json`
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct EvalHeightArgs {
    #[arg(long)]
    pred: PathBuf,
    /// Directory of reference tiles, or a split directory containing `dsm/`
    #[arg(long)]
    gt: PathBuf,
    #[command(flatten)]
    out: ReportOut,
}

#[derive(Args)]
struct EvalMasksArgs {
    /// Predicted instances; records without a score count as score 1
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[command(flatten)]
    out: ReportOut,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    height_report: PathBuf,
    #[arg(long)]
    mask_report: PathBuf,
    /// Write the merged six-key report here
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, requires = "report")]
    json: bool,
}

fn parse_mode(s: &str) -> std::result::Result<FusionMode, String> {
    s.parse().map_err(|e: ModelError| e.to_string())
}

fn require_dir(p: &Path) -> Result<()> {
    ensure!(p.is_dir(), "{} is not a directory", p.display());
    Ok(())
}

fn require_file(p: &Path) -> Result<()> {
    ensure!(p.is_file(), "{} does not exist", p.display());
    Ok(())
}

fn require_parent(p: &Path) -> Result<()> {
    if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        require_dir(parent)?;
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let spec = SceneSpec {
        size: a.size,
        n_buildings: a.buildings,
        speckle_looks: a.looks,
        ..SceneSpec::default()
    };
    spec.validate()?;
    require_parent(&a.out)?;
    let samples = generate_dataset(&spec, a.scenes, a.seed)?;
    write_dataset(&samples, &a.out)?;
    println!("wrote {} scenes to {}", samples.len(), a.out.display());
    Ok(())
}

/// `dir/model.ckpt` → `dir/model.<tag>.ckpt`.
fn tagged(path: &Path, tag: &str) -> PathBuf {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    let name = match path.extension() {
        Some(ext) => format!("{stem}.{tag}.{}", ext.to_string_lossy()),
        None => format!("{stem}.{tag}"),
    };
    path.with_file_name(name)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    require_dir(&a.data)?;
    require_parent(&a.out)?;
    let mut cfg = match &a.config {
        Some(p) => {
            require_file(p)?;
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            TrainConfig::parse(&text).with_context(|| format!("in {}", p.display()))?
        }
        None => TrainConfig::default(),
    };
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
        cfg.set(k, v)?;
    }
    if let Some(m) = a.variant {
        cfg.variant.mode = m;
    }
    if a.skip {
        cfg.variant.skip_connections = true;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    cfg.validate()?;

    let data = load_dataset(&a.data)?;
    let state = train(&cfg, &data)?;
    if cfg.variant.mode == FusionMode::Late {
        let (rgb, sar) = state.model.late_branches()?;
        for (m, tag) in [(&rgb, "rgb"), (&sar, "sar")] {
            let p = tagged(&a.out, tag);
            save_checkpoint(m, &p)?;
            println!("wrote {}", p.display());
        }
    } else {
        save_checkpoint(&state.model, &a.out)?;
        println!("wrote {}", a.out.display());
    }
    let csv = a.loss_csv.unwrap_or_else(|| a.out.with_extension("csv"));
    state.write_loss_csv(&csv)?;
    let (first, last) = (state.loss_history[0].1, state.loss_history.last().unwrap().1);
    println!(
        "{} steps, loss {first:.4} -> {last:.4}, curve in {}",
        state.loss_history.len(),
        csv.display()
    );
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    require_dir(&a.data)?;
    ensure!(a.ckpt.len() <= 2, "at most two --ckpt (late fusion) are accepted");
    for c in &a.ckpt {
        require_file(c)?;
    }
    let models: Vec<ModelGraph> = a.ckpt.iter().map(load_checkpoint).collect::<Result<_, _>>()?;
    let data = load_dataset(&a.data)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for s in &data {
        let tile = match models.as_slice() {
            [m] => predict(m, s),
            [m, n] => predict_late(m, n, s),
            _ => unreachable!(),
        }
        .with_context(|| format!("scene {}", s.name))?;
        write_tiff(&tile, a.out.join(format!("{}.tif", tile.name())))?;
    }
    println!("wrote {} height maps to {}", data.len(), a.out.display());
    Ok(())
}

fn tif_names(dir: &Path) -> Result<BTreeSet<String>> {
    let mut names = BTreeSet::new();
    for e in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let p = e?.path();
        if p.extension().is_some_and(|x| x == "tif" || x == "tiff") {
            if let Some(s) = p.file_stem().and_then(|s| s.to_str()) {
                names.insert(s.to_string());
            }
        }
    }
    Ok(names)
}

fn write_report(r: &EvalReport, out: &ReportOut) -> Result<()> {
    r.write(&out.report)?;
    if out.json {
        let mut p = out.report.as_os_str().to_owned();
        p.push(".json");
        fs::write(&p, r.to_json()).with_context(|| format!("writing {}", PathBuf::from(&p).display()))?;
    }
    print!("{}", r.to_text());
    Ok(())
}

fn cmd_eval_height(a: EvalHeightArgs) -> Result<()> {
    require_dir(&a.pred)?;
    require_dir(&a.gt)?;
    require_parent(&a.out.report)?;
    let gt_dir = if a.gt.join(DSM_DIR).is_dir() {
        a.gt.join(DSM_DIR)
    } else {
        a.gt.clone()
    };
    let pn = tif_names(&a.pred)?;
    let gn = tif_names(&gt_dir)?;
    if pn != gn {
        let only_pred: Vec<_> = pn.difference(&gn).cloned().collect();
        let only_gt: Vec<_> = gn.difference(&pn).cloned().collect();
        bail!(
            "tile sets differ: only in predictions {only_pred:?}; only in reference {only_gt:?}"
        );
    }
    ensure!(!pn.is_empty(), "no tiles in {}", a.pred.display());
    let (mut pred, mut gt) = (Vec::new(), Vec::new());
    for name in &pn {
        let p = read_tiff(a.pred.join(format!("{name}.tif")))?;
        let mut g = read_tiff(gt_dir.join(format!("{name}.tif")))?;
        g.clamp_negative();
        ensure!(
            (p.width(), p.height(), p.bands()) == (g.width(), g.height(), 1) && p.bands() == 1,
            "tile {name}: prediction {}x{}x{} vs reference {}x{}x{}",
            p.width(),
            p.height(),
            p.bands(),
            g.width(),
            g.height(),
            g.bands()
        );
        pred.extend(p.plane(0));
        gt.extend(g.plane(0));
    }
    write_report(&EvalReport::height(&pred, &gt)?, &a.out)
}

fn cmd_eval_masks(a: EvalMasksArgs) -> Result<()> {
    require_file(&a.pred)?;
    require_file(&a.gt)?;
    require_parent(&a.out.report)?;
    let mut preds = read_coco_json(&a.pred)?;
    for p in &mut preds {
        p.score.get_or_insert(1.0);
    }
    let gts = read_coco_json(&a.gt)?;
    let r = ap50(&preds, &gts)?;
    write_report(&EvalReport::from_ap(r.ap50), &a.out)
}

/// Shortest decimal form after rounding to 12 places.
fn trim(v: f64) -> String {
    let s = format!("{v:.12}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn cmd_score(a: ScoreArgs) -> Result<()> {
    require_file(&a.height_report)?;
    require_file(&a.mask_report)?;
    let h = EvalReport::read(&a.height_report)?;
    let m = EvalReport::read(&a.mask_report)?;
    let merged = EvalReport::merge(&h, &m)?;
    if let Some(report) = a.report {
        require_parent(&report)?;
        write_report(&merged, &ReportOut { report, json: a.json })?;
    }
    println!("{}", trim(merged.combined_score.expect("merge sets the score")));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::EvalHeight(a) => cmd_eval_height(a),
        Command::EvalMasks(a) => cmd_eval_masks(a),
        Command::Score(a) => cmd_score(a),
    }
}

/// Tensor-level failures indicate a bug rather than bad input.
fn is_internal(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.is::<TensorError>()
            || matches!(c.downcast_ref::<ModelError>(), Some(ModelError::Tensor(_)))
            || matches!(
                c.downcast_ref::<TrainError>(),
                Some(TrainError::Tensor(_) | TrainError::Model(ModelError::Tensor(_)))
            )
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_internal(&e) { 4 } else { 3 })
        }
        Err(_) => ExitCode::from(4),
    }
}
