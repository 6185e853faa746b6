//! Optimization loop, ablation variants, validation Dice, model selection
//! and run artifacts.

mod checkpoint;
mod config;
mod step;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{Checkpoint, CheckpointHeader, FORMAT_VERSION};
pub use config::{TrainRunConfig, Variant};
pub use step::{compute_step, StepResult, StepSettings};

use crate::attention::{attention_forward, AttentionNet, SparsityConfig};
use crate::data::{random_crop, BalancedSampler, TileStore, TILES_DIR};
use crate::error::{Error, Result};
use crate::grid::{BinaryMask, RgbImage};
use crate::metrics::mask_dice;
use crate::nn::{flush_subnormals, AdamW, Parameterized, Tensor};
use crate::postprocess::binarize;
use crate::regularizers::{total_loss, LossBundle, TransformSet};
use crate::scale::{scale_forward, ScaleNet, ScaleScores};
use crate::attention::apply_attention;
use crate::pngio;

pub const LOG_FILE: &str = "log.csv";
pub const BEST_FILE: &str = "best.ckpt";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const LOG_COLUMNS: &str = "epoch,scale,smooth,equiv,total,val_dice,train_accuracy";

/// Images with binary nuclei masks used for model selection.
#[derive(Clone, Debug, Default)]
pub struct ValidationSet {
    pub stems: Vec<String>,
    pub images: Vec<RgbImage>,
    pub masks: Vec<BinaryMask>,
}

impl ValidationSet {
    /// Reads `tiles/` (or `images/`) with same-stem `masks/` (binary PNG) or
    /// `labels/` (instance PNG).
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let image_dir = [TILES_DIR, "images"]
            .iter()
            .map(|s| dir.join(s))
            .find(|p| p.is_dir())
            .ok_or_else(|| Error::Config(format!("{} has no tiles/ or images/ directory", dir.display())))?;
        let mut set = Self::default();
        for path in pngio::list_images(&image_dir)? {
            let stem = pngio::file_stem(&path);
            let mask_path = dir.join("masks").join(format!("{stem}.png"));
            let label_path = dir.join("labels").join(format!("{stem}.png"));
            let mask = if mask_path.exists() {
                pngio::read_mask(&mask_path)?
            } else if label_path.exists() {
                pngio::read_labels(&label_path)?.map(|&l| l > 0)
            } else {
                return Err(Error::Input(format!("validation image {stem} has no mask")));
            };
            let image = pngio::read_rgb(&path)?;
            if !image.same_shape(&mask) {
                return Err(Error::Input(format!("validation mask for {stem} differs in size")));
            }
            set.stems.push(stem);
            set.images.push(image);
            set.masks.push(mask);
        }
        if set.is_empty() {
            return Err(Error::Config(format!("validation set {} is empty", dir.display())));
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Binary attention mask of one image with its own threshold.
pub fn attention_mask(
    attention: &AttentionNet<f32>,
    sparsity: &SparsityConfig,
    image: &RgbImage,
    threshold: f32,
) -> Result<BinaryMask> {
    let att = sparsity.attend(&attention_forward(image, attention)?)?;
    binarize(&att.0, threshold)
}

/// Mean pixelwise Dice between binarized per-image attention and the masks.
pub fn validate_dice(
    attention: &AttentionNet<f32>,
    sparsity: &SparsityConfig,
    validation: &ValidationSet,
    threshold: f32,
) -> Result<f64> {
    if validation.is_empty() {
        return Err(Error::Config("validation set is empty".into()));
    }
    let mut sum = 0.0;
    for (image, mask) in validation.images.iter().zip(&validation.masks) {
        sum += mask_dice(&attention_mask(attention, sparsity, image, threshold)?, mask)?;
    }
    Ok(sum / validation.len() as f64)
}

/// Scale prediction for one image attended with its own threshold.
pub fn classify_scale(
    attention: &AttentionNet<f32>,
    scale: &ScaleNet<f32>,
    sparsity: &SparsityConfig,
    image: &RgbImage,
) -> Result<ScaleScores> {
    let att = sparsity.attend(&attention_forward(image, attention)?)?;
    let attended = apply_attention(image, &att)?;
    scale_forward(&Tensor::<f32>::from_rgb_batch(&[&attended])?, scale)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    /// Component-wise mean over the epoch's minibatches.
    pub losses: LossBundle,
    pub train_accuracy: f64,
    /// Tiles drawn per level during the epoch.
    pub level_counts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    /// 1-based.
    pub epoch: usize,
    pub stats: EpochStats,
    pub val_dice: f64,
    pub checkpoint: PathBuf,
}

/// Index of the report with the highest validation Dice; earliest wins ties.
pub fn select_model(reports: &[EpochReport]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in reports.iter().enumerate() {
        if best.is_none_or(|b| r.val_dice > reports[b].val_dice) {
            best = Some(i);
        }
    }
    best
}

/// Parameters, optimizer state and random stream of one run.
pub struct Trainer {
    config: TrainRunConfig,
    attention: AttentionNet<f32>,
    scale: ScaleNet<f32>,
    optimizer: AdamW<f32>,
    transforms: TransformSet,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl Trainer {
    pub fn new(config: TrainRunConfig) -> Result<Self> {
        config.validate()?;
        let mut init = ChaCha8Rng::seed_from_u64(config.seed);
        let mut attention = AttentionNet::new(config.attention_preset, &mut init);
        attention.set_pad_mode(config.attention_padding);
        let scale = ScaleNet::new(config.scale_preset, config.scale_set.count(), &mut init);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            optimizer: AdamW::new(config.optimizer()),
            transforms: TransformSet::new(config.transforms.clone())?,
            config,
            attention,
            scale,
            rng,
            epoch: 0,
        })
    }

    pub fn config(&self) -> &TrainRunConfig {
        &self.config
    }

    pub fn attention(&self) -> &AttentionNet<f32> {
        &self.attention
    }

    pub fn attention_mut(&mut self) -> &mut AttentionNet<f32> {
        &mut self.attention
    }

    pub fn scale(&self) -> &ScaleNet<f32> {
        &self.scale
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    pub fn optimizer_steps(&self) -> u64 {
        self.optimizer.steps_taken()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(&self.config, self.epoch, self.attention.clone(), self.scale.clone())
    }

    pub fn settings(&self) -> StepSettings {
        StepSettings {
            sparsity: self.config.sparsity(),
            flags: self.config.variant.flags(),
            weights: self.config.weights(),
        }
    }

    /// One optimizer step on a prepared batch.
    pub fn step(&mut self, images: &Tensor<f32>, labels: &[usize]) -> Result<StepResult<f32>> {
        let settings = self.settings();
        let transform = settings
            .flags
            .equiv_on
            .then(|| self.transforms.sample(&mut self.rng));
        let result = compute_step(&self.attention, &self.scale, images, labels, &settings, transform, None)?;
        let mut params = self.attention.params_mut();
        params.extend(self.scale.params_mut());
        let mut grads = result.attention_grads.params();
        grads.extend(result.scale_grads.params());
        self.optimizer.step(params, grads);
        Ok(result)
    }

    /// `minibatches_per_epoch` balanced batches of random square crops.
    pub fn train_epoch(&mut self, data: &TileStore) -> Result<EpochStats> {
        if data.is_empty() {
            return Err(Error::Config("training data source is empty".into()));
        }
        if data.scale_set() != &self.config.scale_set {
            return Err(Error::Config(format!(
                "data levels {:?} differ from configured levels {:?}",
                data.scale_set().levels(),
                self.config.scale_set.levels()
            )));
        }
        let crop = self.config.crop_size;
        if data.min_side() < crop {
            return Err(Error::Config(format!(
                "crop_size {crop} exceeds the smallest tile side {}",
                data.min_side()
            )));
        }
        flush_subnormals();
        let sampler = BalancedSampler::new(data.groups())?;
        let levels = self.config.scale_set.count();
        let mut level_counts = vec![0usize; levels];
        let (mut scale, mut smooth, mut equiv) = (0.0, 0.0, 0.0);
        let mut correct = 0usize;
        let steps = self.config.minibatches_per_epoch;
        for _ in 0..steps {
            let picks = sampler.sample(self.config.batch_size, &mut self.rng)?;
            let mut crops = Vec::with_capacity(picks.len());
            let mut labels = Vec::with_capacity(picks.len());
            for &(label, index) in &picks {
                crops.push(random_crop(&data.get(index).pixels, crop, &mut self.rng)?);
                labels.push(label);
                level_counts[label] += 1;
            }
            let refs: Vec<&RgbImage> = crops.iter().collect();
            let images = Tensor::from_rgb_batch(&refs)?;
            let result = self.step(&images, &labels)?;
            scale += result.losses.scale;
            smooth += result.losses.smooth;
            equiv += result.losses.equiv;
            correct += result.correct;
        }
        self.epoch += 1;
        let n = steps as f64;
        let losses = total_loss(
            scale / n,
            smooth / n,
            equiv / n,
            self.config.variant.flags(),
            self.config.weights(),
        )?;
        Ok(EpochStats {
            losses,
            train_accuracy: correct as f64 / (steps * self.config.batch_size) as f64,
            level_counts,
        })
    }
}

/// Training tiles for the configured variant.
pub fn load_training_data(config: &TrainRunConfig) -> Result<TileStore> {
    if config.variant.uses_patches() {
        let dir = config
            .patch_dir
            .as_ref()
            .ok_or_else(|| Error::Config("the no-wsi variant needs patch_dir".into()))?;
        TileStore::from_patches(dir, &config.scale_set, config.patch_magnification)
    } else {
        let dir = config
            .data_dir
            .as_ref()
            .ok_or_else(|| Error::Config("data_dir is not set".into()))?;
        let (_, store) = TileStore::load(dir, |_| true)?;
        Ok(store)
    }
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub reports: Vec<EpochReport>,
    pub best_epoch: usize,
    pub best_checkpoint: PathBuf,
    pub config_hash: String,
}

impl RunSummary {
    pub fn best_report(&self) -> &EpochReport {
        &self.reports[self.best_epoch - 1]
    }
}

fn format_row(epoch: usize, stats: &EpochStats, val_dice: f64) -> String {
    let l = &stats.losses;
    format!(
        "{epoch},{},{},{},{},{},{}",
        l.scale, l.smooth, l.equiv, l.total, val_dice, stats.train_accuracy
    )
}

/// Trains `config.variant` for `config.epochs` epochs, writing
/// `config.toml`, `log.csv`, `checkpoints/epoch_{k}.ckpt` and `best.ckpt`
/// under `out`.
pub fn run_variant(config: &TrainRunConfig, out: impl AsRef<Path>) -> Result<RunSummary> {
    config.validate()?;
    let validation_dir = config
        .validation_dir
        .as_ref()
        .ok_or_else(|| Error::Config("validation_dir is not set".into()))?;
    let validation = ValidationSet::load(validation_dir)?;
    let data = load_training_data(config)?;
    run_with_data(config, &data, &validation, out)
}

/// [`run_variant`] on already-loaded training and validation data.
pub fn run_with_data(
    config: &TrainRunConfig,
    data: &TileStore,
    validation: &ValidationSet,
    out: impl AsRef<Path>,
) -> Result<RunSummary> {
    let out = out.as_ref();
    let ckpt_dir = out.join(CHECKPOINT_DIR);
    std::fs::create_dir_all(&ckpt_dir).map_err(Error::io(&ckpt_dir))?;
    let hash = config.hash();
    let snapshot = out.join(CONFIG_SNAPSHOT);
    let toml = format!("# config_hash = \"{hash}\"\n{}", config.to_toml()?);
    std::fs::write(&snapshot, toml).map_err(Error::io(&snapshot))?;

    let log_path = out.join(LOG_FILE);
    let mut log = std::fs::File::create(&log_path).map_err(Error::io(&log_path))?;
    writeln!(log, "# config_hash={hash}\n{LOG_COLUMNS}").map_err(Error::io(&log_path))?;

    let mut trainer = Trainer::new(config.clone())?;
    let sparsity = config.sparsity();
    let mut reports: Vec<EpochReport> = Vec::new();
    for epoch in 1..=config.epochs {
        let stats = trainer.train_epoch(data).map_err(|e| match e {
            Error::TrainingFault { message, .. } => Error::TrainingFault {
                message: format!("epoch {epoch}: {message}"),
                last_checkpoint: reports.last().map(|r| r.checkpoint.clone()),
            },
            other => other,
        })?;
        let val_dice = validate_dice(trainer.attention(), &sparsity, validation, config.validation_threshold)?;
        let path = ckpt_dir.join(format!("epoch_{epoch}.ckpt"));
        trainer.checkpoint().save(&path)?;
        writeln!(log, "{}", format_row(epoch, &stats, val_dice)).map_err(Error::io(&log_path))?;
        log::info!(
            "{} epoch {epoch}: total {:.4} scale {:.4} dice {:.4} acc {:.3}",
            config.variant,
            stats.losses.total,
            stats.losses.scale,
            val_dice,
            stats.train_accuracy
        );
        reports.push(EpochReport {
            epoch,
            stats,
            val_dice,
            checkpoint: path,
        });
    }
    let best = select_model(&reports).expect("at least one epoch");
    let best_path = out.join(BEST_FILE);
    std::fs::copy(&reports[best].checkpoint, &best_path).map_err(Error::io(&best_path))?;
    Ok(RunSummary {
        best_epoch: reports[best].epoch,
        reports,
        best_checkpoint: best_path,
        config_hash: hash,
    })
}

/// One parsed row of `log.csv`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub scale: f64,
    pub smooth: f64,
    pub equiv: f64,
    pub total: f64,
    pub val_dice: f64,
    pub train_accuracy: f64,
}

/// Parses `log.csv`, returning the recorded config hash and the rows.
pub fn read_log(path: impl AsRef<Path>) -> Result<(Option<String>, Vec<LogRow>)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    let mut hash = None;
    let mut rows = Vec::new();
    for line in text.lines() {
        if let Some(h) = line.strip_prefix("# config_hash=") {
            hash = Some(h.trim().to_string());
            continue;
        }
        if line.starts_with('#') || line.starts_with("epoch") || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let num = |i: usize| -> Result<f64> {
            f.get(i)
                .and_then(|v| v.parse::<f64>().ok())
                .ok_or_else(|| Error::Input(format!("malformed log row '{line}'")))
        };
        rows.push(LogRow {
            epoch: num(0)? as usize,
            scale: num(1)?,
            smooth: num(2)?,
            equiv: num(3)?,
            total: num(4)?,
            val_dice: num(5)?,
            train_accuracy: num(6)?,
        });
    }
    Ok((hash, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regularizers::AblationFlags;

    fn report(epoch: usize, dice: f64) -> EpochReport {
        EpochReport {
            epoch,
            stats: EpochStats {
                losses: LossBundle { scale: 0.0, smooth: 0.0, equiv: 0.0, total: 0.0, flags: AblationFlags::default() },
                train_accuracy: 0.0,
                level_counts: vec![],
            },
            val_dice: dice,
            checkpoint: PathBuf::new(),
        }
    }

    #[test]
    fn selection_rules() {
        let pick = |d: &[f64]| {
            let r: Vec<_> = d.iter().enumerate().map(|(i, &v)| report(i + 1, v)).collect();
            r[select_model(&r).unwrap()].epoch
        };
        assert_eq!(pick(&[0.2, 0.5, 0.4]), 2);
        assert_eq!(pick(&[0.3, 0.3, 0.3]), 1);
        let rising: Vec<f64> = (0..30).map(|i| i as f64 / 30.0).collect();
        assert_eq!(pick(&rising), 30);
        assert_eq!(select_model(&[]), None);
    }
}
