//! Soft nearest-neighbor label transfer from the memory bank to query
//! patches, followed by upsampling to pixel masks.

use crate::featstore::{self, DistributionGrid, LabelGrid, PatchFeatureMap, PixelMask, Upsample};
use crate::membank::{BankError, MemoryBank, Neighbor, DEFAULT_K};

pub const DEFAULT_TEMPERATURE: f64 = 0.02;

/// Class probabilities for one patch.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassDistribution(pub Vec<f64>);

impl ClassDistribution {
    pub fn argmax(&self) -> u8 {
        featstore::argmax(&self.0)
    }
}

/// Softmax over `similarity / temperature` of the neighbors, summed per label.
pub fn aggregate_labels(
    neighbors: &[Neighbor],
    labels: &[u8],
    num_classes: usize,
    temperature: f64,
) -> ClassDistribution {
    let mut probs = vec![0.0; num_classes];
    aggregate_into(neighbors, labels, temperature, &mut probs);
    ClassDistribution(probs)
}

fn aggregate_into(neighbors: &[Neighbor], labels: &[u8], temperature: f64, probs: &mut [f64]) {
    debug_assert!(temperature > 0.0);
    let max = neighbors
        .iter()
        .map(|n| n.similarity)
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = neighbors
        .iter()
        .map(|n| ((n.similarity - max) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    for (n, w) in neighbors.iter().zip(weights) {
        probs[labels[n.index] as usize] += w / total;
    }
}

#[derive(Debug, Clone)]
pub struct PredictParams {
    pub k: usize,
    pub temperature: f64,
    pub num_classes: usize,
    pub upsample: Upsample,
}

impl PredictParams {
    pub fn new(num_classes: usize) -> Self {
        Self {
            k: DEFAULT_K,
            temperature: DEFAULT_TEMPERATURE,
            num_classes,
            upsample: Upsample::Bilinear,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SegmentationPrediction {
    pub patch_dist: DistributionGrid,
    pub mask: PixelMask,
}

impl SegmentationPrediction {
    pub fn patch_labels(&self) -> LabelGrid {
        self.patch_dist.argmax()
    }
}

/// Predicts a `(out_h, out_w)` mask for one query image.
pub fn predict_mask(
    query: &PatchFeatureMap,
    bank: &MemoryBank,
    params: &PredictParams,
    out_h: usize,
    out_w: usize,
) -> Result<SegmentationPrediction, BankError> {
    if query.dim() != bank.dim() {
        return Err(BankError::DimMismatch {
            expected: bank.dim(),
            found: query.dim(),
            path: "<query>".into(),
        });
    }
    if params.temperature.is_nan() || params.temperature <= 0.0 {
        return Err(BankError::Domain("temperature must be positive".into()));
    }
    let max_label = bank.labels().iter().copied().max().unwrap_or(0) as usize;
    if max_label >= params.num_classes {
        return Err(BankError::Domain(format!(
            "bank label {max_label} >= num_classes {}",
            params.num_classes
        )));
    }
    let neighbors = bank.search(query.data(), params.k)?;
    let c = params.num_classes;
    let mut probs = vec![0.0; neighbors.len() * c];
    for (cell, set) in neighbors.iter().enumerate() {
        aggregate_into(set, bank.labels(), params.temperature, &mut probs[cell * c..(cell + 1) * c]);
    }
    let patch_dist = DistributionGrid {
        grid_h: query.grid_h(),
        grid_w: query.grid_w(),
        num_classes: c,
        probs,
    };
    let mask = featstore::upsample_distribution(&patch_dist, out_h, out_w, params.upsample);
    Ok(SegmentationPrediction { patch_dist, mask })
}
