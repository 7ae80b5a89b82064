use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use log::{info, warn};
use serde::Serialize;

use calvingseg::data::{
    augment, generate_dataset, load_sample, AugmentMode, DatasetManifest, DatasetSpec, GtKind,
    ManifestEntry, SceneParams, Split, SplitFractions,
};
use calvingseg::distmap::{build_distance_map, DistanceMapParams};
use calvingseg::earlystop::Monitor;
use calvingseg::io::{
    read_mask, write_mask, write_overlay_ppm, write_raster_f32, write_raster_pgm16,
};
use calvingseg::losses::LossKind;
use calvingseg::metrics::{
    confusion, evaluate_with_tolerance, ConfusionCounts, Scores, ToleranceSpec,
};
use calvingseg::model::{
    predict_image, train_with_monitors, write_history_csv, Adam, Checkpoint, EpochRecord, Network,
    NetworkSpec, TrainConfig, TrainObserver,
};
use calvingseg::morphology::{extract_boundary, largest_component, Connectivity};
use calvingseg::raster::threshold;
use calvingseg::{BinaryMask, Sample32};

use crate::args::*;

pub const SCHEMA_VERSION: u32 = 1;
pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const HISTORY_FILE: &str = "history.csv";

/// Creates `dir`, refusing to reuse a non-empty directory.
fn fresh_dir(dir: &Path) -> Result<()> {
    if dir.exists() && fs::read_dir(dir)?.next().is_some() {
        bail!("output directory {} exists and is not empty", dir.display());
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

#[derive(Serialize)]
struct RunConfig<'a, A: Serialize, R: Serialize> {
    schema_version: u32,
    command: &'a str,
    args: &'a A,
    resolved: R,
}

fn write_config<A: Serialize, R: Serialize>(
    dir: &Path,
    command: &str,
    args: &A,
    resolved: R,
) -> Result<()> {
    let cfg = RunConfig {
        schema_version: SCHEMA_VERSION,
        command,
        args,
        resolved,
    };
    fs::write(dir.join(CONFIG_FILE), serde_json::to_vec_pretty(&cfg)?)?;
    Ok(())
}

fn split_of(s: SplitArg) -> Split {
    match s {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
        SplitArg::Test => Split::Test,
    }
}

fn gt_of(t: Target) -> GtKind {
    match t {
        Target::Zones => GtKind::Zones,
        Target::Lines => GtKind::Lines,
    }
}

pub fn gen_data(args: &GenDataArgs) -> Result<()> {
    fresh_dir(&args.out)?;
    let (height, width) = args.size;
    let fractions = if args.scenes < 3 {
        info!("fewer than 3 scenes: writing a train-only dataset");
        SplitFractions::train_only()
    } else {
        let (a, b, c) = args.fractions;
        SplitFractions::new(a, b, c)?
    };
    let spec = DatasetSpec {
        scenes: args.scenes,
        seed: args.seed,
        scene: SceneParams {
            height,
            width,
            seed: 0,
            front_roughness: args.roughness,
            speckle_looks: args.looks,
            zone_contrast: args.contrast,
            resolution_m: args.resolution,
        },
        fractions,
        thicken_size: args.thicken,
    };
    let manifest = generate_dataset(&args.out, &spec)?;
    let s = &manifest.stats;
    info!(
        "wrote {} scenes; line imbalance 1:{:.0}, after {}x{} thickening 1:{:.0}",
        manifest.entries.len(),
        s.lines.imbalance(),
        s.thicken_size,
        s.thicken_size,
        s.thickened_lines.imbalance()
    );
    write_config(&args.out, "gen-data", args, spec)
}

fn load_split(
    root: &Path,
    entries: &[ManifestEntry],
    split: Split,
    target: GtKind,
    thicken: usize,
) -> Result<Vec<Sample32>> {
    entries
        .iter()
        .filter(|e| e.split == split)
        .map(|e| {
            load_sample(root, e, target, thicken).with_context(|| format!("loading scene {}", e.id))
        })
        .collect()
}

/// Persists the checkpoint whenever the configured monitor improves.
struct RunWriter {
    dir: PathBuf,
    monitor: Monitor,
    history: Vec<EpochRecord>,
}

impl TrainObserver<f32> for RunWriter {
    fn on_epoch(&mut self, record: &EpochRecord) -> calvingseg::Result<()> {
        self.history.push(*record);
        write_history_csv(&self.dir.join(HISTORY_FILE), &self.history)
    }

    fn on_improvement(
        &mut self,
        monitor: Monitor,
        _epoch: usize,
        network: &Network<f32>,
        optimizer: &Adam<f32>,
    ) -> calvingseg::Result<()> {
        if monitor != self.monitor {
            return Ok(());
        }
        Checkpoint {
            network: network.clone(),
            optimizer: Some(optimizer.clone()),
        }
        .save(&self.dir.join(CHECKPOINT_FILE))
    }
}

#[derive(Serialize)]
struct TrainResolved<'a> {
    train: &'a TrainConfig,
    target: GtKind,
    thicken: usize,
    augment: Option<AugmentMode>,
}

#[derive(Serialize)]
struct TrainSummary {
    best_epoch: usize,
    best_value: f64,
    stopped_at: Option<usize>,
    epochs_run: usize,
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&args.data).context("reading dataset manifest")?;
    let target = gt_of(args.target);
    let preset = match args.target {
        Target::Zones => TrainConfig::zones(),
        Target::Lines => TrainConfig::lines(),
    };
    let loss = match args.loss {
        LossArg::Bce => LossKind::Bce,
        LossArg::Wbce => LossKind::Wbce,
        LossArg::DmapBce => LossKind::DmapBce,
        LossArg::Dw => LossKind::Dw,
    };
    let monitor = match args.monitor {
        MonitorArg::Mcc => Monitor::Mcc,
        MonitorArg::Bce => Monitor::Bce,
    };
    if loss == LossKind::DmapBce && target == GtKind::Zones {
        warn!("dmap_bce is designed for line targets; building the map from zone masks");
    }
    let config = TrainConfig {
        network: NetworkSpec {
            depth: args.depth,
            base_channels: args.base_channels,
            convs_per_block: args.convs_per_block,
            kernel: args.kernel,
            ..NetworkSpec::default()
        },
        loss,
        monitor,
        distance_map: DistanceMapParams::new(args.w, args.r, args.k),
        patch_size: args.patch_size,
        batch_size: args.batch_size.unwrap_or(preset.batch_size),
        lr_min: args.lr_min.unwrap_or(preset.lr_min),
        lr_max: args.lr_max.unwrap_or(preset.lr_max),
        step_epochs: args.step_epochs,
        patience: args.patience,
        min_delta: args.min_delta,
        max_epochs: args.epochs,
        seed: args.seed,
        tau: args.tau,
        class_weights: None,
        adam: Default::default(),
    };
    config.validate()?;
    let augment_mode = match args.augment {
        AugmentArg::None => None,
        AugmentArg::FlipsAndRot90 => Some(AugmentMode::FlipsAndRot90),
        AugmentArg::FlipsOnly => Some(AugmentMode::FlipsOnly),
    };
    let entries = match augment_mode {
        Some(mode) => augment(&manifest.entries, mode),
        None => manifest.entries.clone(),
    };
    let train_set = load_split(&args.data, &entries, Split::Train, target, args.thicken)?;
    let val_set = load_split(&args.data, &entries, Split::Val, target, args.thicken)?;
    ensure!(!train_set.is_empty(), "dataset has no training scenes");
    ensure!(!val_set.is_empty(), "dataset has no validation scenes");
    info!(
        "{} training and {} validation images",
        train_set.len(),
        val_set.len()
    );

    fresh_dir(&args.out)?;
    let resolved = TrainResolved {
        train: &config,
        target,
        thicken: args.thicken,
        augment: augment_mode,
    };
    write_config(&args.out, "train", args, &resolved)?;
    let mut writer = RunWriter {
        dir: args.out.clone(),
        monitor,
        history: Vec::new(),
    };
    let outcome = train_with_monitors(&config, &train_set, &val_set, &[monitor], &mut writer)?;
    let run = &outcome.runs[0];
    Checkpoint {
        network: run.network.clone(),
        optimizer: Some(run.optimizer.clone()),
    }
    .save(&args.out.join(CHECKPOINT_FILE))?;
    write_history_csv(&args.out.join(HISTORY_FILE), &outcome.history)?;
    let summary = TrainSummary {
        best_epoch: run.best_epoch,
        best_value: run.best_value,
        stopped_at: run.stopped_at,
        epochs_run: outcome.history.len(),
    };
    fs::write(
        args.out.join("summary.json"),
        serde_json::to_vec_pretty(&summary)?,
    )?;
    info!(
        "best {} {:.4} at epoch {}",
        monitor, run.best_value, run.best_epoch
    );
    Ok(())
}

/// Reads the training configuration stored in a run directory.
fn run_config(run: &Path) -> Result<TrainConfig> {
    let path = run.join(CONFIG_FILE);
    let v: serde_json::Value = serde_json::from_slice(
        &fs::read(&path).with_context(|| format!("reading {}", path.display()))?,
    )?;
    ensure!(
        v["schema_version"] == SCHEMA_VERSION,
        "{} has an unsupported schema version",
        path.display()
    );
    serde_json::from_value(v["resolved"]["train"].clone())
        .context("run config lacks a training section")
}

pub fn predict(args: &PredictArgs) -> Result<()> {
    ensure!((0.0..=1.0).contains(&args.tau), "tau must lie in [0, 1]");
    let config = run_config(&args.run)?;
    let ck =
        Checkpoint::<f32>::load(&args.run.join(CHECKPOINT_FILE)).context("loading checkpoint")?;
    ensure!(
        *ck.network.spec() == config.network,
        "checkpoint network {:?} does not match run config {:?}",
        ck.network.spec(),
        config.network
    );
    let mut net = ck.network;
    let manifest = DatasetManifest::load(&args.data)?;
    let split = split_of(args.split);
    fresh_dir(&args.out)?;
    let (probs_dir, masks_dir) = (args.out.join("probs"), args.out.join("masks"));
    fs::create_dir_all(&probs_dir)?;
    fs::create_dir_all(&masks_dir)?;
    let mut count = 0;
    for e in manifest.split(split) {
        let image = calvingseg::io::read_raster::<f32>(&args.data.join(&e.image))?;
        let probs = predict_image(&mut net, &image, config.patch_size)?;
        write_raster_f32(&probs_dir.join(format!("{}.f32", e.id)), &probs)?;
        write_mask(
            &masks_dir.join(format!("{}.pgm", e.id)),
            &threshold(&probs, args.tau as f32)?,
        )?;
        count += 1;
    }
    ensure!(count > 0, "split {:?} is empty", args.split);
    info!("predicted {count} images");
    write_config(&args.out, "predict", args, &config)
}

fn mask_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e == "pgm"));
    files.sort();
    Ok(files)
}

pub fn postprocess(args: &PostprocessArgs) -> Result<()> {
    let connectivity = Connectivity::from_count(args.connectivity)?;
    let files = mask_files(&args.input)?;
    ensure!(
        !files.is_empty(),
        "no masks found in {}",
        args.input.display()
    );
    fresh_dir(&args.out)?;
    for path in &files {
        let zones = read_mask(path)?;
        let lines = extract_boundary(&largest_component(&zones, connectivity));
        if lines.is_empty() {
            warn!(
                "{}: empty zone prediction, writing an empty line mask",
                path.display()
            );
        }
        write_mask(
            &args.out.join(path.file_name().expect("listed file")),
            &lines,
        )?;
    }
    info!("post-processed {} masks", files.len());
    write_config(&args.out, "postprocess", args, ())
}

#[derive(Debug, Clone, Serialize)]
struct ImageScore {
    id: String,
    counts: ConfusionCounts,
    scores: Scores,
}

#[derive(Debug, Clone, Serialize)]
struct Tier {
    /// `None` for zone targets, which are scored pixel-wise.
    tolerance_m: Option<f64>,
    radius_px: Option<usize>,
    effective_tolerance_m: Option<f64>,
    pooled: Scores,
    pooled_counts: ConfusionCounts,
    mean: Scores,
    per_image: Vec<ImageScore>,
}

#[derive(Debug, Serialize)]
struct Report {
    schema_version: u32,
    target: Target,
    split: SplitArg,
    images: usize,
    tiers: Vec<Tier>,
}

fn mean_scores(items: &[ImageScore]) -> Scores {
    let n = items.len() as f64;
    Scores {
        iou: items.iter().map(|s| s.scores.iou).sum::<f64>() / n,
        dice: items.iter().map(|s| s.scores.dice).sum::<f64>() / n,
        mcc: items.iter().map(|s| s.scores.mcc).sum::<f64>() / n,
    }
}

fn tier(tolerance: Option<(f64, usize, f64)>, per_image: Vec<ImageScore>) -> Tier {
    let pooled_counts: ConfusionCounts = per_image.iter().map(|s| s.counts).sum();
    Tier {
        tolerance_m: tolerance.map(|t| t.0),
        radius_px: tolerance.map(|t| t.1),
        effective_tolerance_m: tolerance.map(|t| t.2),
        pooled: Scores::from_counts(&pooled_counts),
        pooled_counts,
        mean: mean_scores(&per_image),
        per_image,
    }
}

pub fn evaluate(args: &EvaluateArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&args.data)?;
    let split = split_of(args.split);
    let mut pairs: Vec<(String, f64, BinaryMask, BinaryMask)> = Vec::new();
    for e in manifest
        .split(split)
        .filter(|e| e.transform == calvingseg::Transform::Identity)
    {
        let pred_path = args.pred.join(format!("{}.pgm", e.id));
        let pred = read_mask(&pred_path)
            .with_context(|| format!("reading prediction {}", pred_path.display()))?;
        let gt = match args.target {
            Target::Zones => read_mask(&args.data.join(&e.zones))?,
            Target::Lines => calvingseg::data::thicken_lines(
                &read_mask(&args.data.join(&e.lines))?,
                args.gt_thicken,
            )?,
        };
        ensure!(
            pred.dims() == gt.dims(),
            "{}: prediction is {:?} but ground truth is {:?}",
            e.id,
            pred.dims(),
            gt.dims()
        );
        pairs.push((e.id.clone(), e.resolution_m, pred, gt));
    }
    ensure!(!pairs.is_empty(), "split {:?} is empty", args.split);

    let tiers = match args.target {
        Target::Zones => {
            let per_image = pairs
                .iter()
                .map(|(id, _, p, g)| {
                    let counts = confusion(p, g)?;
                    Ok(ImageScore {
                        id: id.clone(),
                        counts,
                        scores: Scores::from_counts(&counts),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            vec![tier(None, per_image)]
        }
        Target::Lines => {
            ensure!(
                !args.tolerances.is_empty(),
                "at least one tolerance tier is required"
            );
            let mut tiers = Vec::new();
            for &t in &args.tolerances {
                let mut per_image = Vec::new();
                let mut radii = BTreeMap::new();
                for (id, s, p, g) in &pairs {
                    let spec = ToleranceSpec::new(t, *s)?;
                    let ev = evaluate_with_tolerance(p, g, &spec)?;
                    radii.insert(ev.radius_px, ev.effective_tolerance_m);
                    per_image.push(ImageScore {
                        id: id.clone(),
                        counts: ev.counts,
                        scores: ev.scores,
                    });
                }
                if radii.len() > 1 {
                    warn!("tolerance {t} m maps to different radii across images: {radii:?}");
                }
                let (&r, &eff) = radii.iter().next().expect("non-empty split");
                tiers.push(tier(Some((t, r, eff)), per_image));
            }
            tiers
        }
    };

    fresh_dir(&args.out)?;
    if args.overlay {
        let dir = args.out.join("overlays");
        fs::create_dir_all(&dir)?;
        for (id, _, p, g) in &pairs {
            write_overlay_ppm(&dir.join(format!("{id}.ppm")), p, g)?;
        }
    }
    let report = Report {
        schema_version: SCHEMA_VERSION,
        target: args.target,
        split: args.split,
        images: pairs.len(),
        tiers,
    };
    fs::write(
        args.out.join("report.json"),
        serde_json::to_vec_pretty(&report)?,
    )?;
    write_report_csv(&args.out.join("report.csv"), &report)?;
    for t in &report.tiers {
        info!(
            "tolerance {:?} m: pooled iou {:.4} dice {:.4} mcc {:.4}",
            t.effective_tolerance_m, t.pooled.iou, t.pooled.dice, t.pooled.mcc
        );
    }
    write_config(&args.out, "evaluate", args, ())
}

fn write_report_csv(path: &Path, report: &Report) -> Result<()> {
    let mut out = String::from(
        "scope,tolerance_m,radius_px,effective_tolerance_m,iou,dice,mcc,tp,fp,fn,tn\n",
    );
    let opt = |v: Option<String>| v.unwrap_or_default();
    for t in &report.tiers {
        let prefix = format!(
            "{},{},{}",
            opt(t.tolerance_m.map(|v| v.to_string())),
            opt(t.radius_px.map(|v| v.to_string())),
            opt(t.effective_tolerance_m.map(|v| v.to_string()))
        );
        let mut row = |scope: &str, s: &Scores, c: Option<&ConfusionCounts>| {
            let counts = c.map_or(",,,".to_string(), |c| {
                format!("{},{},{},{}", c.tp, c.fp, c.fn_, c.tn)
            });
            out.push_str(&format!(
                "{scope},{prefix},{},{},{},{counts}\n",
                s.iou, s.dice, s.mcc
            ));
        };
        for img in &t.per_image {
            row(&img.id, &img.scores, Some(&img.counts));
        }
        row("pooled", &t.pooled, Some(&t.pooled_counts));
        row("mean", &t.mean, None);
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn distmap_preview(args: &DistmapPreviewArgs) -> Result<()> {
    let lines = read_mask(&args.lines)?;
    let params = DistanceMapParams::new(args.w, args.r, args.k);
    let map = build_distance_map::<f64>(&lines, &params)?;
    write_raster_pgm16(&args.out, map.weights(), 65535.0)?;
    Ok(())
}
