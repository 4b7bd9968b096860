use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::layers::LayerKind;
use crate::CnnError;

pub const NUM_LAYERS: usize = 37;
/// Linear layer whose pre-activation output is the feature vector.
pub const FEATURE_LAYER: usize = 33;
/// Final classifier, reinitialized for the task's classes.
pub const HEAD_LAYER: usize = 36;
pub const NUM_CLASSES: usize = 4;
pub const FULL_HIDDEN: usize = 4096;
pub const POOL_OUTPUT: usize = 7;
pub const DROPOUT_P: f64 = 0.5;
const FULL_WIDTHS: [usize; 8] = [64, 128, 256, 256, 512, 512, 512, 512];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    /// Multiplier on every channel and hidden width; 1 is the full network.
    pub width_scale: f64,
    pub num_classes: usize,
    /// Pretrained weight bundle. `None` means random initialization.
    pub weights: Option<PathBuf>,
    /// Seed for every freshly initialized parameter.
    pub init_seed: u64,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self {
            width_scale: 1.0,
            num_classes: NUM_CLASSES,
            weights: None,
            init_seed: 0,
        }
    }
}

impl BackboneSpec {
    pub fn scaled(width_scale: f64) -> Self {
        Self {
            width_scale,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), CnnError> {
        if !(self.width_scale > 0.0 && self.width_scale <= 1.0) {
            return Err(CnnError::Argument(format!("width_scale must lie in (0, 1], got {}", self.width_scale)));
        }
        if self.num_classes == 0 {
            return Err(CnnError::Argument("num_classes must be positive".into()));
        }
        Ok(())
    }

    fn scale(&self, full: usize) -> usize {
        ((full as f64 * self.width_scale).round() as usize).max(1)
    }

    /// Output length of the feature layer.
    pub fn feature_len(&self) -> usize {
        self.scale(FULL_HIDDEN)
    }

    /// The 37-entry layer table.
    pub fn layer_table(&self) -> Vec<LayerKind> {
        self.layer_table_with_classes(self.num_classes)
    }

    pub(crate) fn layer_table_with_classes(&self, classes: usize) -> Vec<LayerKind> {
        let w: Vec<usize> = FULL_WIDTHS.iter().map(|&c| self.scale(c)).collect();
        let conv = |i: usize, o: usize| LayerKind::Conv2d {
            in_channels: i,
            out_channels: o,
        };
        let bn = |c: usize| LayerKind::BatchNorm2d { channels: c };
        let (relu, pool) = (LayerKind::Relu, LayerKind::MaxPool2d);
        let hidden = self.feature_len();
        let flat = w[7] * POOL_OUTPUT * POOL_OUTPUT;
        let lin = |i: usize, o: usize| LayerKind::Linear {
            in_features: i,
            out_features: o,
        };
        let drop = LayerKind::Dropout { p: DROPOUT_P };
        #[rustfmt::skip]
        let table = vec![
            conv(3, w[0]), bn(w[0]), relu, pool,
            conv(w[0], w[1]), bn(w[1]), relu, pool,
            conv(w[1], w[2]), bn(w[2]), relu,
            conv(w[2], w[3]), bn(w[3]), relu, pool,
            conv(w[3], w[4]), bn(w[4]), relu,
            conv(w[4], w[5]), bn(w[5]), relu, pool,
            conv(w[5], w[6]), bn(w[6]), relu,
            conv(w[6], w[7]), bn(w[7]), relu, pool,
            LayerKind::AdaptiveAvgPool2d { output: POOL_OUTPUT },
            lin(flat, hidden), relu, drop,
            lin(hidden, hidden), relu, drop,
            lin(hidden, classes),
        ];
        table
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_roles_and_taps() {
        let t = BackboneSpec::default().layer_table();
        assert_eq!(t.len(), NUM_LAYERS);
        let convs: Vec<usize> = (0..NUM_LAYERS).filter(|&i| t[i].role() == "Conv2d").collect();
        assert_eq!(convs, vec![0, 4, 8, 11, 15, 18, 22, 25]);
        let pools: Vec<usize> = (0..NUM_LAYERS).filter(|&i| t[i].role() == "MaxPool2d").collect();
        assert_eq!(pools, vec![3, 7, 14, 21, 28]);
        assert_eq!(t[29].role(), "AdaptiveAvgPool2d");
        assert_eq!(
            t[FEATURE_LAYER],
            LayerKind::Linear {
                in_features: 4096,
                out_features: 4096
            }
        );
        assert_eq!(
            t[HEAD_LAYER],
            LayerKind::Linear {
                in_features: 4096,
                out_features: 4
            }
        );
        assert_eq!(t[30], LayerKind::Linear { in_features: 512 * 49, out_features: 4096 });
    }

    #[test]
    fn scaled_widths() {
        let s = BackboneSpec::scaled(0.125);
        assert_eq!(s.feature_len(), 512);
        let t = s.layer_table();
        assert_eq!(t[0], LayerKind::Conv2d { in_channels: 3, out_channels: 8 });
        assert_eq!(t[25], LayerKind::Conv2d { in_channels: 64, out_channels: 64 });
        assert!(BackboneSpec::scaled(0.0).validate().is_err());
        assert!(BackboneSpec::scaled(1.5).validate().is_err());
    }
}
