//! Synthetic glacier scenes, dataset manifests, splits, line thickening and
//! augmentation.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_mask, read_raster, write_mask, write_raster_f32};
use crate::model::Sample;
use crate::morphology::{dilate, StructuringElement};
use crate::raster::{BinaryMask, Raster, Transform};
use crate::scalar::{lit, Scalar};

/// Mean intensity of the non-ice zone; the ice zone is `zone_contrast` times brighter.
pub const OCEAN_MEAN: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Probability in `[0, 1]` that the front moves sideways between rows.
    pub front_roughness: f64,
    /// Shape of the multiplicative gamma speckle; larger is smoother.
    pub speckle_looks: u32,
    /// Ratio of the ice mean to the non-ice mean.
    pub zone_contrast: f64,
    pub resolution_m: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            height: 256,
            width: 512,
            seed: 0,
            front_roughness: 0.5,
            speckle_looks: 2,
            zone_contrast: 2.0,
            resolution_m: 6.0,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.height < 64 || self.width < 64 {
            return bad(format!(
                "scene must be at least 64x64, got {}x{}",
                self.height, self.width
            ));
        }
        if !(0.0..=1.0).contains(&self.front_roughness) {
            return bad(format!(
                "front roughness must lie in [0, 1], got {}",
                self.front_roughness
            ));
        }
        if self.speckle_looks == 0 {
            return bad("speckle looks must be at least 1".into());
        }
        if !(self.zone_contrast > 0.0 && self.zone_contrast.is_finite()) {
            return bad(format!(
                "zone contrast must be positive, got {}",
                self.zone_contrast
            ));
        }
        if !(self.resolution_m > 0.0 && self.resolution_m.is_finite()) {
            return bad(format!(
                "resolution must be positive, got {}",
                self.resolution_m
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene<T> {
    pub image: Raster<T>,
    pub zones: BinaryMask,
    pub lines: BinaryMask,
}

/// Column of the front in every row: a seeded lazy random walk kept away from
/// the left and right borders, so consecutive rows differ by at most one column.
fn front_columns(rng: &mut ChaCha8Rng, height: usize, width: usize, roughness: f64) -> Vec<usize> {
    let margin = width / 8;
    let (lo, hi) = (margin, width - 1 - margin);
    let mut col = rng.gen_range(width / 3..=2 * width / 3);
    let mut cols = Vec::with_capacity(height);
    for _ in 0..height {
        cols.push(col);
        if rng.gen_bool(roughness) {
            let step_right = rng.gen_bool(0.5);
            col = match (step_right, col) {
                (true, c) if c < hi => c + 1,
                (true, c) => c - 1,
                (false, c) if c > lo => c - 1,
                (false, c) => c + 1,
            };
        }
    }
    cols
}

/// One synthetic scene: a speckled two-zone image, the ice-zone mask and the
/// 1-pixel front line on the ice side of the zone boundary.
pub fn generate_scene<T: Scalar>(params: &SceneParams) -> Result<Scene<T>> {
    params.validate()?;
    let (h, w) = (params.height, params.width);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let ice_left = rng.gen_bool(0.5);
    let front = front_columns(&mut rng, h, w, params.front_roughness);
    let zones = BinaryMask::from_fn(h, w, |r, c| {
        if ice_left {
            c <= front[r]
        } else {
            c >= front[r]
        }
    })?;
    let lines = BinaryMask::from_fn(h, w, |r, c| c == front[r])?;
    let looks = params.speckle_looks as f64;
    let speckle =
        Gamma::new(looks, 1.0 / looks).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let ice_mean = OCEAN_MEAN * params.zone_contrast;
    let mut values = Vec::with_capacity(h * w);
    for &z in zones.values() {
        let mean = if z == 1 { ice_mean } else { OCEAN_MEAN };
        values.push(lit(mean * speckle.sample(&mut rng)));
    }
    let image = Raster::new(h, w, values)?.with_resolution(params.resolution_m)?;
    Ok(Scene {
        image,
        zones,
        lines,
    })
}

/// Dilates line masks by a square of side `se_size`.
pub fn thicken_lines(lines: &BinaryMask, se_size: usize) -> Result<BinaryMask> {
    Ok(dilate(lines, StructuringElement::square(se_size)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitFractions {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let f = Self { train, val, test };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.train, self.val, self.test];
        if all.iter().any(|&x| !(0.0..=1.0).contains(&x))
            || ((all.iter().sum::<f64>()) - 1.0).abs() > 1e-9
        {
            return Err(Error::InvalidParameter(format!(
                "split fractions must be in [0, 1] and sum to 1: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn train_only() -> Self {
        Self {
            train: 1.0,
            val: 0.0,
            test: 0.0,
        }
    }
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

/// Split of every scene index after a seeded shuffle.
///
/// Validation and test sizes are rounded from their fractions and training
/// takes the rest. Any split with a positive fraction must end up non-empty.
pub fn make_splits(n_scenes: usize, seed: u64, fractions: SplitFractions) -> Result<Vec<Split>> {
    fractions.validate()?;
    let n_val = (n_scenes as f64 * fractions.val).round() as usize;
    let n_test = (n_scenes as f64 * fractions.test).round() as usize;
    let n_train = n_scenes.saturating_sub(n_val + n_test);
    let empty = [
        (fractions.train, n_train),
        (fractions.val, n_val),
        (fractions.test, n_test),
    ]
    .iter()
    .any(|&(f, n)| f > 0.0 && n == 0);
    if empty || n_train + n_val + n_test != n_scenes {
        return Err(Error::InvalidParameter(format!(
            "{n_scenes} scenes cannot fill every split with fractions {fractions:?}"
        )));
    }
    let mut order: Vec<usize> = (0..n_scenes).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut splits = vec![Split::Train; n_scenes];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(splits)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMode {
    /// Original, horizontal flip and 90 degree rotation.
    FlipsAndRot90,
    /// Original and horizontal flip.
    FlipsOnly,
}

impl AugmentMode {
    pub fn transforms(self) -> &'static [Transform] {
        match self {
            Self::FlipsAndRot90 => &[Transform::Identity, Transform::Hflip, Transform::Rot90],
            Self::FlipsOnly => &[Transform::Identity, Transform::Hflip],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Paths relative to the dataset root.
    pub image: PathBuf,
    pub zones: PathBuf,
    pub lines: PathBuf,
    pub resolution_m: f64,
    pub split: Split,
    #[serde(default = "identity")]
    pub transform: Transform,
}

fn identity() -> Transform {
    Transform::Identity
}

/// Expands training entries with transformed copies; other splits pass through.
pub fn augment(entries: &[ManifestEntry], mode: AugmentMode) -> Vec<ManifestEntry> {
    let mut out = Vec::new();
    for e in entries {
        if e.split != Split::Train {
            out.push(e.clone());
            continue;
        }
        for &t in mode.transforms() {
            out.push(ManifestEntry {
                transform: t,
                ..e.clone()
            });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassStats {
    pub positives: u64,
    pub negatives: u64,
}

impl ClassStats {
    pub fn of(mask: &BinaryMask) -> Self {
        let positives = mask.count_ones() as u64;
        Self {
            positives,
            negatives: mask.values().len() as u64 - positives,
        }
    }

    /// Negatives per positive, the `n` of a `1:n` imbalance.
    pub fn imbalance(&self) -> f64 {
        self.negatives as f64 / self.positives as f64
    }

    fn add(&mut self, other: Self) {
        self.positives += other.positives;
        self.negatives += other.negatives;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub zones: ClassStats,
    pub lines: ClassStats,
    pub thickened_lines: ClassStats,
    pub thicken_size: usize,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub scene: SceneParams,
    pub fractions: SplitFractions,
    pub entries: Vec<ManifestEntry>,
    /// Counts over the untransformed scenes of every split.
    pub stats: DatasetStats,
}

/// Which ground truth a sample uses as its target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GtKind {
    Zones,
    Lines,
}

impl std::str::FromStr for GtKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zones" => Ok(Self::Zones),
            "lines" => Ok(Self::Lines),
            other => Err(Error::InvalidParameter(format!(
                "unknown target '{other}' (expected zones or lines)"
            ))),
        }
    }
}

/// Settings for [`generate_dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub scenes: usize,
    pub seed: u64,
    /// Template for every scene; its seed is replaced per scene.
    pub scene: SceneParams,
    pub fractions: SplitFractions,
    pub thicken_size: usize,
}

fn scene_seed(dataset_seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(dataset_seed);
    rng.set_stream(index as u64 + 1);
    rng.gen()
}

/// Generates all scenes into `root` and writes the manifest.
///
/// Layout: `images/<id>.f32` (+ `.json` sidecar), `zones/<id>.pgm`,
/// `lines/<id>.pgm`, `manifest.json`.
pub fn generate_dataset(root: &Path, spec: &DatasetSpec) -> Result<DatasetManifest> {
    spec.scene.validate()?;
    StructuringElement::square(spec.thicken_size)?;
    if spec.scenes == 0 {
        return Err(Error::InvalidParameter(
            "at least one scene is required".into(),
        ));
    }
    let splits = make_splits(spec.scenes, spec.seed, spec.fractions)?;
    for sub in ["images", "zones", "lines"] {
        fs::create_dir_all(root.join(sub))?;
    }
    let width = (spec.scenes - 1).to_string().len().max(3);
    let per_scene: Vec<(ManifestEntry, DatasetStats)> = (0..spec.scenes)
        .into_par_iter()
        .map(|i| {
            let id = format!("scene_{i:0width$}");
            let params = SceneParams {
                seed: scene_seed(spec.seed, i),
                ..spec.scene
            };
            let scene = generate_scene::<f32>(&params)?;
            let entry = ManifestEntry {
                image: PathBuf::from("images").join(format!("{id}.f32")),
                zones: PathBuf::from("zones").join(format!("{id}.pgm")),
                lines: PathBuf::from("lines").join(format!("{id}.pgm")),
                resolution_m: params.resolution_m,
                split: splits[i],
                transform: Transform::Identity,
                id,
            };
            write_raster_f32(&root.join(&entry.image), &scene.image)?;
            write_mask(&root.join(&entry.zones), &scene.zones)?;
            write_mask(&root.join(&entry.lines), &scene.lines)?;
            let stats = scene_stats(&scene.zones, &scene.lines, spec.thicken_size)?;
            Ok((entry, stats))
        })
        .collect::<Result<_>>()?;
    let mut stats = DatasetStats {
        thicken_size: spec.thicken_size,
        ..DatasetStats::default()
    };
    let mut entries = Vec::with_capacity(per_scene.len());
    for (e, s) in per_scene {
        stats.zones.add(s.zones);
        stats.lines.add(s.lines);
        stats.thickened_lines.add(s.thickened_lines);
        entries.push(e);
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        seed: spec.seed,
        scene: spec.scene,
        fractions: spec.fractions,
        entries,
        stats,
    };
    manifest.save(root)?;
    Ok(manifest)
}

fn scene_stats(
    zones: &BinaryMask,
    lines: &BinaryMask,
    thicken_size: usize,
) -> Result<DatasetStats> {
    Ok(DatasetStats {
        zones: ClassStats::of(zones),
        lines: ClassStats::of(lines),
        thickened_lines: ClassStats::of(&thicken_lines(lines, thicken_size)?),
        thicken_size,
    })
}

impl DatasetManifest {
    pub fn save(&self, root: &Path) -> Result<()> {
        fs::write(root.join(MANIFEST_FILE), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(root: &Path) -> Result<Self> {
        let m: Self = serde_json::from_slice(&fs::read(root.join(MANIFEST_FILE))?)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Format {
                path: root.join(MANIFEST_FILE),
                msg: format!("unsupported manifest version {}", m.version),
            });
        }
        Ok(m)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Recomputes the statistics from disk and checks paths and split disjointness.
    pub fn revalidate(&self, root: &Path) -> Result<()> {
        let mut seen = std::collections::HashMap::new();
        let mut stats = DatasetStats {
            thicken_size: self.stats.thicken_size,
            ..DatasetStats::default()
        };
        for e in &self.entries {
            if let Some(prev) = seen.insert(e.id.clone(), e.split) {
                if prev != e.split {
                    return Err(Error::State(format!(
                        "scene {} appears in two splits",
                        e.id
                    )));
                }
                continue;
            }
            let zones = read_mask(&root.join(&e.zones))?;
            let lines = read_mask(&root.join(&e.lines))?;
            read_raster::<f32>(&root.join(&e.image))?;
            let s = scene_stats(&zones, &lines, self.stats.thicken_size)?;
            stats.zones.add(s.zones);
            stats.lines.add(s.lines);
            stats.thickened_lines.add(s.thickened_lines);
        }
        if stats != self.stats {
            return Err(Error::State(format!(
                "manifest stats {:?} differ from disk {stats:?}",
                self.stats
            )));
        }
        Ok(())
    }
}

/// Loads the image and target of one entry, applying the entry's transform.
///
/// Line targets are thickened with a square of side `thicken_size` before the transform.
pub fn load_sample<T: Scalar>(
    root: &Path,
    entry: &ManifestEntry,
    target: GtKind,
    thicken_size: usize,
) -> Result<Sample<T>> {
    let image: Raster<T> = read_raster(&root.join(&entry.image))?;
    let image = match image.resolution_m() {
        Some(_) => image,
        None => image.with_resolution(entry.resolution_m)?,
    };
    let mask = match target {
        GtKind::Zones => read_mask(&root.join(&entry.zones))?,
        GtKind::Lines => thicken_lines(&read_mask(&root.join(&entry.lines))?, thicken_size)?,
    };
    Sample::new(
        image.transformed(entry.transform),
        mask.transformed(entry.transform),
    )
}
