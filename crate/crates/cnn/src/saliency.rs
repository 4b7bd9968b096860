use std::path::Path;

use demandmap_core::imagery::RawImage;
use demandmap_core::kv::KvMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::layers::Mode;
use crate::network::Network;
use crate::tensor::Tensor;
use crate::train::{IMAGENET_MEAN, IMAGENET_STD};
use crate::CnnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SaliencyMode {
    /// Plain input gradient, negatives clamped.
    Paper,
    /// Rectifiers also block negative incoming gradients.
    Guided,
}

impl SaliencyMode {
    pub fn label(self) -> &'static str {
        match self {
            SaliencyMode::Paper => "paper",
            SaliencyMode::Guided => "guided",
        }
    }
}

impl std::str::FromStr for SaliencyMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "paper" => Ok(SaliencyMode::Paper),
            "guided" => Ok(SaliencyMode::Guided),
            other => Err(format!("unknown saliency mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMap {
    pub tile_id: String,
    pub target_class: usize,
    pub mode: SaliencyMode,
    pub height: usize,
    pub width: usize,
    /// Row-major, each in `[0, 1]`.
    pub values: Vec<f64>,
}

/// Gradient of logit `target` with respect to the network input, in
/// evaluation mode. `x` holds one item.
pub fn input_gradient(net: &Network, x: &Tensor, target: usize, guided: bool) -> Result<Tensor, CnnError> {
    if x.n() != 1 {
        return Err(CnnError::Argument(format!("expected one input, got {}", x.n())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (y, trace) = net.forward(x.clone(), Mode::EVAL, net.layers.len() - 1, &mut rng)?;
    if target >= y.item_len() {
        return Err(CnnError::Argument(format!("target class {target} out of range for {} outputs", y.item_len())));
    }
    let mut dy = Tensor::zeros(y.shape);
    dy.data[target] = 1.0;
    // parameter gradients are skipped, so the shared network is not touched
    let mut scratch = net.clone();
    Ok(scratch.backward(&trace, dy, 0, false, guided))
}

/// Standardizes `H×W×3` pixel values given as reals on the `[0, 255]` scale.
pub fn standardize_pixels(pixels: &[f64], height: usize, width: usize) -> Result<Tensor, CnnError> {
    if pixels.len() != height * width * 3 {
        return Err(CnnError::Shape(format!("{} values for a {height}×{width}×3 image", pixels.len())));
    }
    let mut t = Tensor::zeros([1, 3, height, width]);
    for (p, px) in pixels.chunks_exact(3).enumerate() {
        for c in 0..3 {
            t.data[c * height * width + p] = (px[c] / 255.0 - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
        }
    }
    Ok(t)
}

/// Gradient of logit `target` with respect to each pixel value, laid out
/// `H×W×3` like the image.
pub fn pixel_gradient(net: &Network, pixels: &[f64], height: usize, width: usize, target: usize, guided: bool) -> Result<Vec<f64>, CnnError> {
    let x = standardize_pixels(pixels, height, width)?;
    let g = input_gradient(net, &x, target, guided)?;
    let hw = height * width;
    let mut out = vec![0.0; hw * 3];
    for p in 0..hw {
        for c in 0..3 {
            out[p * 3 + c] = g.data[c * hw + p] / (255.0 * IMAGENET_STD[c]);
        }
    }
    Ok(out)
}

/// Saliency of `target` over the image: clamp negative pixel gradients,
/// take the per-pixel maximum over channels, scale by the map maximum.
pub fn activation_map(
    net: &Network,
    image: &RawImage,
    tile_id: &str,
    target: usize,
    mode: SaliencyMode,
) -> Result<ActivationMap, CnnError> {
    if image.channels != 3 {
        return Err(CnnError::Shape(format!("expected 3 channels, got {}", image.channels)));
    }
    let pixels: Vec<f64> = image.data.iter().map(|&v| v as f64).collect();
    let g = pixel_gradient(net, &pixels, image.height, image.width, target, mode == SaliencyMode::Guided)?;
    let mut values: Vec<f64> = g.chunks_exact(3).map(|px| px.iter().fold(0.0, |m: f64, &v| m.max(v))).collect();
    let peak = values.iter().copied().fold(0.0, f64::max);
    if peak > 0.0 {
        values.iter_mut().for_each(|v| *v /= peak);
    }
    Ok(ActivationMap {
        tile_id: tile_id.to_string(),
        target_class: target,
        mode,
        height: image.height,
        width: image.width,
        values,
    })
}

impl ActivationMap {
    /// Writes an 8-bit grayscale PNG and a `key=value` sidecar next to it
    /// (same stem, `.txt`).
    pub fn write_png(&self, path: &Path) -> Result<(), CnnError> {
        let io = |p: &Path, e: String| CnnError::Io {
            path: p.display().to_string(),
            message: e,
        };
        let bytes: Vec<u8> = self.values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        image::save_buffer(path, &bytes, self.width as u32, self.height as u32, image::ExtendedColorType::L8)
            .map_err(|e| io(path, e.to_string()))?;
        let mut kv = KvMap::new();
        kv.set("tile_id", &self.tile_id);
        kv.set("target_class", self.target_class);
        kv.set("mode", self.mode.label());
        let sidecar = path.with_extension("txt");
        std::fs::write(&sidecar, kv.to_text()).map_err(|e| io(&sidecar, e.to_string()))
    }
}
