//! Patch-based training loop with validation-driven early stopping.

use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::network::{Network, NetworkSpec};
use super::schedule::CyclicLr;
use super::tensor::Tensor;
use crate::distmap::{build_distance_map, DistanceMapParams};
use crate::earlystop::{Decision, EarlyStopper, Monitor, StopperConfig};
use crate::error::{Error, Result};
use crate::losses::{
    bce, dmap_bce, dw_loss, weighted_bce, ClassWeights, LossBatch, LossKind, LossOutput,
};
use crate::metrics::{confusion, ConfusionCounts};
use crate::morphology::distance_to_set_squared;
use crate::raster::{
    extract_mask_patches, extract_patches, pad_mask_to_multiple, pad_to_multiple,
    stitch_predictions, threshold, BinaryMask, Raster,
};
use crate::scalar::{count, lit, Scalar};

/// An input image and its binary target.
#[derive(Debug, Clone)]
pub struct Sample<T> {
    pub image: Raster<T>,
    pub target: BinaryMask,
}

impl<T: Scalar> Sample<T> {
    pub fn new(image: Raster<T>, target: BinaryMask) -> Result<Self> {
        if image.dims() != target.dims() {
            return Err(Error::ShapeMismatch {
                expected: image.dims(),
                got: target.dims(),
            });
        }
        Ok(Self { image, target })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub network: NetworkSpec,
    pub loss: LossKind,
    pub monitor: Monitor,
    pub distance_map: DistanceMapParams,
    pub patch_size: usize,
    pub batch_size: usize,
    pub lr_min: f64,
    pub lr_max: f64,
    /// Half-period of the cyclic schedule in epochs.
    pub step_epochs: usize,
    pub patience: usize,
    #[serde(default)]
    pub min_delta: f64,
    pub max_epochs: usize,
    pub seed: u64,
    /// Binarization threshold for the validation MCC.
    pub tau: f64,
    /// Weighted-BCE class multipliers; derived from the training targets when absent.
    #[serde(default)]
    pub class_weights: Option<ClassWeights>,
    #[serde(default)]
    pub adam: AdamConfig,
}

impl TrainConfig {
    /// Region-mask preset.
    pub fn zones() -> Self {
        Self {
            network: NetworkSpec::default(),
            loss: LossKind::Bce,
            monitor: Monitor::Mcc,
            distance_map: DistanceMapParams::default(),
            patch_size: 256,
            batch_size: 20,
            lr_min: 1e-7,
            lr_max: 1e-2,
            step_epochs: 5,
            patience: 30,
            min_delta: 0.0,
            max_epochs: 300,
            seed: 0,
            tau: 0.5,
            class_weights: None,
            adam: AdamConfig::default(),
        }
    }

    /// Front-line preset.
    pub fn lines() -> Self {
        Self {
            batch_size: 15,
            lr_min: 1e-8,
            lr_max: 1e-4,
            ..Self::zones()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.distance_map.validate()?;
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(self.network.size_multiple()) {
            return bad(format!(
                "patch size {} must be a positive multiple of {}",
                self.patch_size,
                self.network.size_multiple()
            ));
        }
        if self.batch_size == 0 || self.step_epochs == 0 || self.max_epochs == 0 {
            return bad("batch size, step epochs and max epochs must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau must lie in [0, 1], got {}", self.tau));
        }
        CyclicLr::new(self.lr_min, self.lr_max, 1)?;
        StopperConfig {
            direction: self.monitor.direction(),
            patience: self.patience,
            min_delta: self.min_delta,
        }
        .validate()
    }
}

/// One row of the training history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_bce: f64,
    pub val_mcc: f64,
    pub lr: f64,
    /// Whether the configured monitor improved at this epoch.
    pub improved: bool,
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for rec in history {
        w.serialize(rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_history_csv(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|rec| rec.map_err(Error::from))
        .collect()
}

/// Best snapshot selected by one monitor.
#[derive(Debug, Clone)]
pub struct MonitorOutcome<T> {
    pub monitor: Monitor,
    pub best_epoch: usize,
    pub best_value: f64,
    /// Epoch at which patience ran out, if it did.
    pub stopped_at: Option<usize>,
    pub network: Network<T>,
    pub optimizer: Adam<T>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub history: Vec<EpochRecord>,
    /// One entry per requested monitor, in request order.
    pub runs: Vec<MonitorOutcome<T>>,
}

impl<T> TrainOutcome<T> {
    pub fn run(&self, monitor: Monitor) -> Option<&MonitorOutcome<T>> {
        self.runs.iter().find(|r| r.monitor == monitor)
    }
}

/// Validation summary of one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Validation {
    pub bce: f64,
    pub mcc: f64,
    pub counts: ConfusionCounts,
}

impl Validation {
    pub fn value(&self, monitor: Monitor) -> f64 {
        match monitor {
            Monitor::Mcc => self.mcc,
            Monitor::Bce => self.bce,
        }
    }
}

/// Probability map of a whole image: pad, tile, inference forward, stitch, crop.
pub fn predict_image<T: Scalar>(
    net: &mut Network<T>,
    image: &Raster<T>,
    patch_size: usize,
) -> Result<Raster<T>> {
    // Bounds peak activation memory on large images.
    const CHUNK: usize = 8;
    let (padded, layout) = pad_to_multiple(image, patch_size)?;
    let patches = extract_patches(&padded, &layout)?;
    let mut out = Vec::with_capacity(patches.len());
    for chunk in patches.chunks(CHUNK) {
        let data = chunk
            .iter()
            .flat_map(|p| p.values().iter().copied())
            .collect();
        let x = Tensor::from_vec(chunk.len(), 1, patch_size, patch_size, data)?;
        let y = net.forward(&x, false)?;
        for i in 0..chunk.len() {
            out.push(Raster::new(patch_size, patch_size, y.sample(i).to_vec())?);
        }
    }
    let mut probs = stitch_predictions(&out, &layout)?;
    if let Some(s) = image.resolution_m() {
        probs = probs.with_resolution(s)?;
    }
    Ok(probs)
}

/// Pooled BCE and pooled MCC at `tau` over all validation pixels.
pub fn validate<T: Scalar>(
    net: &mut Network<T>,
    samples: &[Sample<T>],
    patch_size: usize,
    tau: f64,
) -> Result<Validation> {
    if samples.is_empty() {
        return Err(Error::InvalidParameter("validation split is empty".into()));
    }
    let mut loss_sum = 0.0;
    let mut pixels = 0usize;
    let mut counts = ConfusionCounts::default();
    for s in samples {
        let probs = predict_image(net, &s.image, patch_size)?;
        let n = probs.values().len();
        let l = bce(&LossBatch::new(probs.values(), s.target.values()))?.loss;
        loss_sum += l.to_f64().unwrap() * n as f64;
        pixels += n;
        counts += confusion(&threshold(&probs, lit(tau))?, &s.target)?;
    }
    Ok(Validation {
        bce: loss_sum / pixels as f64,
        mcc: counts.mcc(),
        counts,
    })
}

/// Training patches with their per-pixel loss weights.
struct PatchSet<T> {
    inputs: Vec<Vec<T>>,
    targets: Vec<Vec<u8>>,
    weights: Vec<Vec<T>>,
}

/// Per-pixel weights for `loss` on a full image, or `None` when the loss needs none.
fn loss_weights<T: Scalar>(
    loss: LossKind,
    target: &BinaryMask,
    params: &DistanceMapParams,
) -> Result<Option<Raster<T>>> {
    match loss {
        LossKind::Bce | LossKind::Wbce => Ok(None),
        LossKind::DmapBce => Ok(Some(build_distance_map(target, params)?.into_weights())),
        LossKind::Dw => {
            let (h, w) = target.dims();
            let values = match distance_to_set_squared(target) {
                Some(d2) => d2
                    .into_iter()
                    .map(|v| count::<T>(v as usize).sqrt())
                    .collect(),
                // Without any target pixel every pixel is equally far.
                None => vec![T::one(); h * w],
            };
            Ok(Some(Raster::new(h, w, values)?))
        }
    }
}

fn build_patches<T: Scalar>(samples: &[Sample<T>], config: &TrainConfig) -> Result<PatchSet<T>> {
    let p = config.patch_size;
    let mut set = PatchSet {
        inputs: Vec::new(),
        targets: Vec::new(),
        weights: Vec::new(),
    };
    for s in samples {
        let (img, layout) = pad_to_multiple(&s.image, p)?;
        set.inputs.extend(
            extract_patches(&img, &layout)?
                .into_iter()
                .map(Raster::into_values),
        );
        let (tgt, _) = pad_mask_to_multiple(&s.target, p)?;
        set.targets.extend(
            extract_mask_patches(&tgt, &layout)?
                .into_iter()
                .map(|m| m.values().to_vec()),
        );
        if let Some(w) = loss_weights::<T>(config.loss, &s.target, &config.distance_map)? {
            // Padding carries the smallest weight present so dmap weights stay in (0, 1].
            let floor = w.values().iter().copied().fold(T::infinity(), T::min);
            let (padded, _) = pad_to_multiple(&w, p)?;
            let mut values = padded.into_values();
            for r in 0..layout.padded_height {
                for c in 0..layout.padded_width {
                    if r >= layout.original_height || c >= layout.original_width {
                        values[r * layout.padded_width + c] = floor;
                    }
                }
            }
            let padded = Raster::new(layout.padded_height, layout.padded_width, values)?;
            set.weights.extend(
                extract_patches(&padded, &layout)?
                    .into_iter()
                    .map(Raster::into_values),
            );
        }
    }
    Ok(set)
}

fn class_weights<T: Scalar>(config: &TrainConfig, samples: &[Sample<T>]) -> Result<ClassWeights> {
    if let Some(w) = config.class_weights {
        return Ok(w);
    }
    let pos: u64 = samples.iter().map(|s| s.target.count_ones() as u64).sum();
    let total: u64 = samples.iter().map(|s| s.target.values().len() as u64).sum();
    ClassWeights::inverse_frequency(pos, total - pos)
}

fn batch_loss<T: Scalar>(
    kind: LossKind,
    probs: &[T],
    targets: &[u8],
    weights: &[T],
    class_weights: Option<ClassWeights>,
) -> Result<LossOutput<T>> {
    let batch = LossBatch::new(probs, targets);
    match kind {
        LossKind::Bce => bce(&batch),
        LossKind::Wbce => weighted_bce(
            &batch,
            class_weights.expect("class weights resolved before training"),
        ),
        LossKind::DmapBce => dmap_bce(&batch.with_weights(weights)),
        LossKind::Dw => {
            let d_max = weights.iter().copied().fold(T::zero(), T::max);
            dw_loss(&batch.with_weights(weights), d_max)
        }
    }
}

/// Called after every epoch with the epoch record and the monitors that improved.
pub trait TrainObserver<T> {
    fn on_epoch(&mut self, _record: &EpochRecord) -> Result<()> {
        Ok(())
    }

    fn on_improvement(
        &mut self,
        _monitor: Monitor,
        _epoch: usize,
        _network: &Network<T>,
        _optimizer: &Adam<T>,
    ) -> Result<()> {
        Ok(())
    }
}

impl<T> TrainObserver<T> for () {}

/// Trains with the configured monitor and returns its best snapshot.
pub fn train<T: Scalar>(
    config: &TrainConfig,
    train_set: &[Sample<T>],
    val_set: &[Sample<T>],
) -> Result<TrainOutcome<T>> {
    train_with_monitors(config, train_set, val_set, &[config.monitor], &mut ())
}

/// Trains once and tracks an independent early stopper per monitor.
///
/// The optimization trajectory does not depend on the monitors, so each
/// entry of the outcome equals a separate run with that monitor and the same
/// seed. Training ends when every stopper has stopped or at `max_epochs`.
/// `config.monitor` drives the `improved` column of the history and must be
/// among `monitors`.
pub fn train_with_monitors<T: Scalar>(
    config: &TrainConfig,
    train_set: &[Sample<T>],
    val_set: &[Sample<T>],
    monitors: &[Monitor],
    observer: &mut dyn TrainObserver<T>,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidParameter("training split is empty".into()));
    }
    if val_set.is_empty() {
        return Err(Error::InvalidParameter("validation split is empty".into()));
    }
    if !monitors.contains(&config.monitor) {
        return Err(Error::InvalidParameter(format!(
            "monitor {} not tracked",
            config.monitor
        )));
    }
    let cw = match config.loss {
        LossKind::Wbce => Some(class_weights(config, train_set)?),
        _ => None,
    };

    let patches = build_patches(train_set, config)?;
    let n = patches.inputs.len();
    let p = config.patch_size;
    let batches_per_epoch = n.div_ceil(config.batch_size);
    let schedule = CyclicLr::new(
        config.lr_min,
        config.lr_max,
        config.step_epochs * batches_per_epoch,
    )?;

    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_5eed_5eed_5eed);
    let mut net = Network::<T>::new(config.network, &mut init_rng)?;
    let mut adam = Adam::new(config.adam, &net.params());

    struct Tracker<T> {
        monitor: Monitor,
        stopper: EarlyStopper<f64>,
        best: Option<(Network<T>, Adam<T>)>,
        stopped_at: Option<usize>,
    }
    let mut trackers = monitors
        .iter()
        .map(|&m| {
            let cfg = StopperConfig {
                direction: m.direction(),
                patience: config.patience,
                min_delta: config.min_delta,
            };
            Ok(Tracker {
                monitor: m,
                stopper: EarlyStopper::new(cfg)?,
                best: None,
                stopped_at: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..n).collect();
    let mut iteration: u64 = 0;
    info!(
        "training {} parameters on {n} patches of {p}x{p}, {batches_per_epoch} batches per epoch",
        net.num_params()
    );
    for epoch in 0..config.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut lr = schedule.lr_at(iteration);
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let mut data = Vec::with_capacity(idx.len() * p * p);
            let mut targets = Vec::with_capacity(idx.len() * p * p);
            let mut weights = Vec::new();
            for &i in idx {
                data.extend_from_slice(&patches.inputs[i]);
                targets.extend_from_slice(&patches.targets[i]);
                if !patches.weights.is_empty() {
                    weights.extend_from_slice(&patches.weights[i]);
                }
            }
            let x = Tensor::from_vec(idx.len(), 1, p, p, data)?;
            let probs = net.forward(&x, true)?;
            let out = batch_loss(config.loss, &probs.data, &targets, &weights, cw)?;
            let loss = out.loss.to_f64().unwrap();
            lr = schedule.lr_at(iteration);
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "{} loss at epoch {epoch}, batch {b}, iteration {iteration}, lr {lr:e}",
                    config.loss
                )));
            }
            net.backward(&out.grad)?;
            adam.step(&mut net.params_mut(), lr)?;
            loss_sum += loss * idx.len() as f64;
            iteration += 1;
        }
        let val = validate(&mut net, val_set, p, config.tau)?;
        let mut improved_primary = false;
        for t in trackers.iter_mut().filter(|t| t.stopped_at.is_none()) {
            match t.stopper.observe(epoch, val.value(t.monitor))? {
                Decision::Improved => {
                    t.best = Some((net.clone(), adam.clone()));
                    observer.on_improvement(t.monitor, epoch, &net, &adam)?;
                    improved_primary |= t.monitor == config.monitor;
                }
                Decision::Stop => t.stopped_at = Some(epoch),
                Decision::Waiting(_) => {}
            }
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / n as f64,
            val_bce: val.bce,
            val_mcc: val.mcc,
            lr,
            improved: improved_primary,
        };
        info!(
            "epoch {epoch}: loss {:.5} val_bce {:.5} val_mcc {:.4}{}",
            record.train_loss,
            record.val_bce,
            record.val_mcc,
            if improved_primary { " *" } else { "" }
        );
        debug!("validation counts {:?}", val.counts);
        observer.on_epoch(&record)?;
        history.push(record);
        if trackers.iter().all(|t| t.stopped_at.is_some()) {
            break;
        }
    }

    let runs = trackers
        .into_iter()
        .map(|t| {
            let state = t.stopper.state().expect("at least one epoch observed");
            let (network, optimizer) = t.best.expect("first observation always improves");
            MonitorOutcome {
                monitor: t.monitor,
                best_epoch: state.best_epoch,
                best_value: state.best_value,
                stopped_at: t.stopped_at,
                network,
                optimizer,
            }
        })
        .collect();
    Ok(TrainOutcome { history, runs })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            network: NetworkSpec {
                depth: 2,
                base_channels: 2,
                convs_per_block: 1,
                ..NetworkSpec::default()
            },
            patch_size: 16,
            batch_size: 2,
            lr_min: 1e-4,
            lr_max: 1e-2,
            step_epochs: 1,
            patience: 2,
            max_epochs: 3,
            ..TrainConfig::lines()
        }
    }

    fn stripe_sample(shift: usize) -> Sample<f32> {
        let target = BinaryMask::from_fn(20, 24, |_, c| c == 8 + shift).unwrap();
        let image = Raster::from_fn(20, 24, |r, c| {
            if c == 8 + shift {
                1.0
            } else {
                0.2 + 0.01 * r as f32
            }
        })
        .unwrap();
        Sample::new(image, target).unwrap()
    }

    #[test]
    fn presets_are_valid() {
        TrainConfig::zones().validate().unwrap();
        TrainConfig::lines().validate().unwrap();
        assert_eq!(
            (
                TrainConfig::lines().batch_size,
                TrainConfig::zones().batch_size
            ),
            (15, 20)
        );
        let mut bad = tiny_config();
        bad.patch_size = 18;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn predict_image_keeps_dims_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Network::<f32>::new(tiny_config().network, &mut rng).unwrap();
        let img = Raster::from_fn(21, 37, |r, c| ((r * c) % 7) as f32 / 7.0).unwrap();
        let probs = predict_image(&mut net, &img, 16).unwrap();
        assert_eq!(probs.dims(), (21, 37));
        assert!(probs.values().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn dw_weights_measure_distance_to_targets() {
        let target = BinaryMask::from_fn(3, 5, |r, c| r == 1 && c == 0).unwrap();
        let w = loss_weights::<f64>(LossKind::Dw, &target, &DistanceMapParams::default())
            .unwrap()
            .unwrap();
        assert_eq!(w.get(1, 0), 0.0);
        assert_eq!(w.get(1, 4), 4.0);
        assert_eq!(w.get(0, 1), 2f64.sqrt());
        let empty = BinaryMask::zeros(3, 5).unwrap();
        let w = loss_weights::<f64>(LossKind::Dw, &empty, &DistanceMapParams::default())
            .unwrap()
            .unwrap();
        assert!(w.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn every_loss_trains_without_error() {
        let train_set = vec![stripe_sample(0), stripe_sample(3), stripe_sample(5)];
        let val_set = vec![stripe_sample(1)];
        for loss in [
            LossKind::Bce,
            LossKind::Wbce,
            LossKind::DmapBce,
            LossKind::Dw,
        ] {
            let cfg = TrainConfig {
                loss,
                max_epochs: 2,
                ..tiny_config()
            };
            let out = train(&cfg, &train_set, &val_set).unwrap();
            assert_eq!(out.history.len(), 2);
            assert!(out.history.iter().all(|r| r.train_loss.is_finite()));
        }
    }

    #[test]
    fn empty_splits_are_rejected() {
        let s = vec![stripe_sample(0)];
        assert!(train(&tiny_config(), &[], &s).is_err());
        assert!(train(&tiny_config(), &s, &[]).is_err());
    }

    #[test]
    fn history_csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.csv");
        let h = vec![
            EpochRecord {
                epoch: 0,
                train_loss: 0.5,
                val_bce: 0.25,
                val_mcc: 0.125,
                lr: 1e-3,
                improved: true,
            },
            EpochRecord {
                epoch: 1,
                train_loss: 0.4,
                val_bce: 0.3,
                val_mcc: 0.1,
                lr: 2e-3,
                improved: false,
            },
        ];
        write_history_csv(&path, &h).unwrap();
        assert_eq!(read_history_csv(&path).unwrap(), h);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("epoch,train_loss,val_bce,val_mcc,lr,improved"));
    }
}
