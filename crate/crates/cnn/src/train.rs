use std::path::Path;

use demandmap_core::derive_seed;
use demandmap_core::imagery::{ImageTile, RawImage};
use demandmap_core::labeling::BinAssignment;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::layers::Mode;
use crate::loss::{batch_loss_and_gradient, DEFAULT_LOSS_ALPHA};
use crate::network::Network;
use crate::tensor::Tensor;
use crate::CnnError;

/// Channel means and standard deviations of the pretraining corpus, on
/// pixel values scaled to `[0, 1]`.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Epochs training only the head.
    pub epochs_frozen: usize,
    /// Epochs training every layer.
    pub epochs_full: usize,
    pub loss_alpha: f64,
    pub crop_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-6,
            batch_size: 8,
            epochs_frozen: 5,
            epochs_full: 25,
            loss_alpha: DEFAULT_LOSS_ALPHA,
            crop_size: 224,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), CnnError> {
        let bad = |m: String| Err(CnnError::Argument(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 || self.crop_size == 0 {
            return bad("batch_size and crop_size must be positive".into());
        }
        if self.crop_size > 256 {
            return bad(format!("crop_size {} exceeds the 256-pixel tile", self.crop_size));
        }
        if self.epochs_frozen + self.epochs_full == 0 {
            return bad("at least one epoch required".into());
        }
        if !(self.loss_alpha > 0.0 && self.loss_alpha <= 1.0) {
            return bad(format!("loss_alpha must lie in (0, 1], got {}", self.loss_alpha));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon <= 0.0 {
            return bad("optimizer moments must lie in [0, 1) with positive epsilon".into());
        }
        Ok(())
    }
}

pub fn tile_image(tile: &ImageTile) -> RawImage {
    RawImage {
        width: demandmap_core::imagery::TILE_SIZE,
        height: demandmap_core::imagery::TILE_SIZE,
        channels: demandmap_core::imagery::TILE_CHANNELS,
        data: tile.pixels.clone(),
    }
}

fn crop_at(image: &RawImage, top: usize, left: usize, size: usize) -> RawImage {
    let c = image.channels;
    let mut data = Vec::with_capacity(size * size * c);
    for r in top..top + size {
        let start = (r * image.width + left) * c;
        data.extend_from_slice(&image.data[start..start + size * c]);
    }
    RawImage {
        width: size,
        height: size,
        channels: c,
        data,
    }
}

fn check_crop(image: &RawImage, size: usize) -> Result<(), CnnError> {
    if size == 0 || size > image.width || size > image.height {
        return Err(CnnError::Argument(format!(
            "crop {size} does not fit a {}×{} image",
            image.height, image.width
        )));
    }
    Ok(())
}

/// Top-left offset of the crop for `(seed, tile_id, epoch, step)`.
pub fn crop_offset(image: &RawImage, size: usize, seed: u64, tile_id: &str, epoch: usize, step: usize) -> Result<(usize, usize), CnnError> {
    check_crop(image, size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("crop/{tile_id}/{epoch}/{step}")));
    Ok((
        rng.random_range(0..=image.height - size),
        rng.random_range(0..=image.width - size),
    ))
}

/// A uniformly placed `size`×`size` window, reproducible per
/// `(seed, tile_id, epoch, step)`.
pub fn random_crop(image: &RawImage, size: usize, seed: u64, tile_id: &str, epoch: usize, step: usize) -> Result<RawImage, CnnError> {
    let (top, left) = crop_offset(image, size, seed, tile_id, epoch, step)?;
    Ok(crop_at(image, top, left, size))
}

pub fn center_crop(image: &RawImage, size: usize) -> Result<RawImage, CnnError> {
    check_crop(image, size)?;
    Ok(crop_at(image, (image.height - size) / 2, (image.width - size) / 2, size))
}

/// Stacks equally sized RGB images into an `[N, 3, H, W]` tensor
/// standardized with the pretraining statistics.
pub fn standardize(images: &[&RawImage]) -> Result<Tensor, CnnError> {
    let first = images.first().ok_or_else(|| CnnError::Argument("no images".into()))?;
    let (h, w) = (first.height, first.width);
    let mut t = Tensor::zeros([images.len(), 3, h, w]);
    for (i, img) in images.iter().enumerate() {
        if img.height != h || img.width != w || img.channels != 3 || img.data.len() != h * w * 3 {
            return Err(CnnError::Shape(format!(
                "image {i} is {}×{}×{}, expected {h}×{w}×3",
                img.height, img.width, img.channels
            )));
        }
        let item = t.item_mut(i);
        for (p, px) in img.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                item[c * h * w + p] = (px[c] as f64 / 255.0 - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
            }
        }
    }
    Ok(t)
}

#[derive(Debug, Clone)]
pub struct TrainSample {
    pub tile_id: String,
    pub image: RawImage,
    pub assignment: BinAssignment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Frozen,
    Full,
}

impl Phase {
    pub fn label(self) -> &'static str {
        match self {
            Phase::Frozen => "frozen",
            Phase::Full => "full",
        }
    }

    pub fn trainable_groups(self) -> &'static str {
        match self {
            Phase::Frozen => "layer36",
            Phase::Full => "all",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based across both phases.
    pub epoch: usize,
    pub phase: Phase,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    /// Layers whose checksum changed during the frozen phase.
    pub frozen_phase_changed: Vec<usize>,
}

impl TrainingLog {
    pub fn write_csv(&self, path: &Path) -> Result<(), CnnError> {
        let err = |e: csv::Error| CnnError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        w.write_record(["epoch", "phase", "mean_loss", "trainable_groups"]).map_err(err)?;
        for r in &self.epochs {
            w.write_record([
                r.epoch.to_string(),
                r.phase.label().to_string(),
                r.mean_loss.to_string(),
                r.phase.trainable_groups().to_string(),
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|e| CnnError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn first_loss(&self) -> Option<f64> {
        self.epochs.first().map(|r| r.mean_loss)
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.epochs.last().map(|r| r.mean_loss)
    }
}

/// Adaptive-moment optimizer over the trainable parameters of a layer range.
struct Adam {
    first: usize,
    m: Vec<Vec<Vec<f64>>>,
    v: Vec<Vec<Vec<f64>>>,
    t: i32,
}

impl Adam {
    fn new(net: &Network, first: usize) -> Self {
        let zeros = |net: &Network| {
            net.layers[first..]
                .iter()
                .map(|l| {
                    l.params
                        .iter()
                        .map(|p| vec![0.0; if p.trainable { p.value.len() } else { 0 }])
                        .collect()
                })
                .collect()
        };
        Self {
            first,
            m: zeros(net),
            v: zeros(net),
            t: 0,
        }
    }

    fn step(&mut self, net: &mut Network, cfg: &TrainingConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for (li, layer) in net.layers[self.first..].iter_mut().enumerate() {
            for (pi, p) in layer.params.iter_mut().enumerate() {
                if !p.trainable {
                    continue;
                }
                let (m, v) = (&mut self.m[li][pi], &mut self.v[li][pi]);
                for j in 0..p.value.len() {
                    let g = p.grad[j];
                    m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
                    v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
                    p.value[j] -= cfg.learning_rate * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.epsilon);
                }
            }
        }
    }
}

/// Two-phase fine-tuning. The frozen phase runs normalization on its
/// running statistics and backpropagates into the head only; the full phase
/// trains every layer with batch statistics. Each phase starts with fresh
/// optimizer moments.
pub fn train(net: &mut Network, samples: &[TrainSample], cfg: &TrainingConfig) -> Result<TrainingLog, CnnError> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(CnnError::Argument("empty training set".into()));
    }
    for s in samples {
        check_crop(&s.image, cfg.crop_size)?;
    }
    let head = net.head();
    let mut log = TrainingLog::default();
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "dropout"));
    let mut epoch = 0;
    for (phase, epochs) in [(Phase::Frozen, cfg.epochs_frozen), (Phase::Full, cfg.epochs_full)] {
        if epochs == 0 {
            continue;
        }
        let (stop_at, mode) = match phase {
            Phase::Frozen => (head, Mode::HEAD_ONLY),
            Phase::Full => (0, Mode::TRAIN),
        };
        let before = net.checksums();
        let mut adam = Adam::new(net, stop_at);
        for _ in 0..epochs {
            epoch += 1;
            let mut order: Vec<usize> = (0..samples.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("shuffle/{epoch}"))));
            let mut total = 0.0;
            for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
                let crops = batch
                    .iter()
                    .map(|&i| random_crop(&samples[i].image, cfg.crop_size, cfg.seed, &samples[i].tile_id, epoch, step))
                    .collect::<Result<Vec<_>, _>>()?;
                let x = standardize(&crops.iter().collect::<Vec<_>>())?;
                net.zero_grad();
                let (logits, trace) = net.forward_train(x, mode, &mut dropout_rng)?;
                let k = logits.item_len();
                let rows: Vec<Vec<f64>> = (0..batch.len()).map(|i| logits.item(i).to_vec()).collect();
                let targets: Vec<&BinAssignment> = batch.iter().map(|&i| &samples[i].assignment).collect();
                let (loss, grads) = batch_loss_and_gradient(&rows, &targets, cfg.loss_alpha)?;
                total += loss * batch.len() as f64;
                let dy = Tensor::from_vec([batch.len(), k, 1, 1], grads.concat())?;
                net.backward(&trace, dy, stop_at, true, false);
                adam.step(net, cfg);
            }
            log.epochs.push(EpochRecord {
                epoch,
                phase,
                mean_loss: total / samples.len() as f64,
            });
        }
        if phase == Phase::Frozen {
            let after = net.checksums();
            log.frozen_phase_changed = (0..after.len()).filter(|&i| after[i] != before[i]).collect();
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image(size: usize) -> RawImage {
        let data = (0..size * size * 3).map(|i| (i % 251) as u8).collect();
        RawImage {
            width: size,
            height: size,
            channels: 3,
            data,
        }
    }

    #[test]
    fn full_size_crop_is_identity() {
        let img = gradient_image(256);
        assert_eq!(random_crop(&img, 256, 1, "t", 0, 0).unwrap(), img);
        assert_eq!(center_crop(&img, 256).unwrap(), img);
    }

    #[test]
    fn crop_offsets_stay_in_bounds_and_repeat() {
        let img = gradient_image(256);
        for step in 0..200 {
            let (r, c) = crop_offset(&img, 224, 9, "tile-a", 3, step).unwrap();
            assert!(r <= 32 && c <= 32);
            assert_eq!(crop_offset(&img, 224, 9, "tile-a", 3, step).unwrap(), (r, c));
        }
        assert!(random_crop(&img, 257, 0, "t", 0, 0).is_err());
    }

    #[test]
    fn crop_copies_the_window() {
        let img = gradient_image(8);
        let c = crop_at(&img, 2, 3, 4);
        for r in 0..4 {
            for col in 0..4 {
                for ch in 0..3 {
                    assert_eq!(c.data[(r * 4 + col) * 3 + ch], img.data[((r + 2) * 8 + col + 3) * 3 + ch]);
                }
            }
        }
    }

    #[test]
    fn standardize_uses_channel_statistics() {
        let img = RawImage {
            width: 1,
            height: 1,
            channels: 3,
            data: vec![255, 0, 128],
        };
        let t = standardize(&[&img]).unwrap();
        assert!((t.data[0] - (1.0 - 0.485) / 0.229).abs() < 1e-12);
        assert!((t.data[1] - (-0.456 / 0.224)).abs() < 1e-12);
        assert!((t.data[2] - (128.0 / 255.0 - 0.406) / 0.225).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(TrainingConfig::default().validate().is_ok());
        let bad = TrainingConfig {
            crop_size: 300,
            ..TrainingConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
