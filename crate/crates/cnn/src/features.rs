use std::collections::BTreeMap;

use demandmap_core::imagery::RawImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::layers::Mode;
use crate::network::Network;
use crate::spec::FEATURE_LAYER;
use crate::train::{center_crop, standardize};
use crate::CnnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureSource {
    Image,
    ClusterMean,
    CellMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub owner: String,
    pub values: Vec<f64>,
    pub source: FeatureSource,
}

const EXTRACT_BATCH: usize = 16;

/// Pre-activation output of the feature layer in evaluation mode, one vector
/// per image. Images larger than `crop_size` are center-cropped.
pub fn extract_features(net: &Network, images: &[(String, RawImage)], crop_size: usize) -> Result<Vec<FeatureVector>, CnnError> {
    if net.layers.len() <= FEATURE_LAYER {
        return Err(CnnError::Argument(format!("network has only {} layers", net.layers.len())));
    }
    let mut out = Vec::with_capacity(images.len());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for chunk in images.chunks(EXTRACT_BATCH) {
        let crops = chunk
            .iter()
            .map(|(_, img)| {
                if img.width == crop_size && img.height == crop_size {
                    Ok(img.clone())
                } else {
                    center_crop(img, crop_size)
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        let x = standardize(&crops.iter().collect::<Vec<_>>())?;
        let (f, _) = net.forward(x, Mode::EVAL, FEATURE_LAYER, &mut rng)?;
        for (i, (id, _)) in chunk.iter().enumerate() {
            let values = f.item(i).to_vec();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(CnnError::Numeric(format!("non-finite feature for {id}")));
            }
            out.push(FeatureVector {
                owner: id.clone(),
                values,
                source: FeatureSource::Image,
            });
        }
    }
    Ok(out)
}

/// Element-wise mean per group. Each coordinate is summed in sorted order,
/// so the result does not depend on the order of vectors within a group.
pub fn aggregate_features(
    groups: &BTreeMap<String, Vec<FeatureVector>>,
    source: FeatureSource,
) -> Result<Vec<FeatureVector>, CnnError> {
    let mut out = Vec::with_capacity(groups.len());
    for (owner, members) in groups {
        let first = members
            .first()
            .ok_or_else(|| CnnError::Argument(format!("empty feature group {owner}")))?;
        let d = first.values.len();
        if let Some(bad) = members.iter().find(|m| m.values.len() != d) {
            return Err(CnnError::Argument(format!(
                "group {owner}: vector {} has length {}, expected {d}",
                bad.owner,
                bad.values.len()
            )));
        }
        let mut column = vec![0.0; members.len()];
        let values = (0..d)
            .map(|j| {
                for (c, m) in column.iter_mut().zip(members) {
                    *c = m.values[j];
                }
                column.sort_by(f64::total_cmp);
                column.iter().sum::<f64>() / members.len() as f64
            })
            .collect();
        out.push(FeatureVector {
            owner: owner.clone(),
            values,
            source,
        });
    }
    Ok(out)
}
