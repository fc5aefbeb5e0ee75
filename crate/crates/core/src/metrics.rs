//! Confusion-matrix IoU, normalized degradation curves, breaking points and
//! memory-size gain tables.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::featstore::PixelMask;

pub const BREAKING_THRESHOLD: f64 = -0.1;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("shape mismatch: gt {gt:?} vs pred {pred:?}")]
    Shape {
        gt: (usize, usize),
        pred: (usize, usize),
    },
    #[error("class id {0} out of range")]
    ClassOutOfRange(u8),
    #[error("domain error: {0}")]
    Domain(String),
}

/// Pixel counts indexed by (ground truth, prediction).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, gt: &PixelMask, pred: &PixelMask) -> Result<(), MetricsError> {
        if (gt.height, gt.width) != (pred.height, pred.width) {
            return Err(MetricsError::Shape {
                gt: (gt.height, gt.width),
                pred: (pred.height, pred.width),
            });
        }
        let c = self.num_classes;
        if let Some(&bad) = gt.labels.iter().chain(&pred.labels).find(|&&l| l as usize >= c) {
            return Err(MetricsError::ClassOutOfRange(bad));
        }
        for (&g, &p) in gt.labels.iter().zip(&pred.labels) {
            self.counts[g as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    /// Element-wise sum; associative and commutative.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.num_classes, other.num_classes, "merging mismatched matrices");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn iou_report(&self) -> IoUReport {
        let c = self.num_classes;
        let per_class: Vec<Option<f64>> = (0..c)
            .map(|k| {
                let tp = self.get(k, k);
                let row: u64 = (0..c).map(|p| self.get(k, p)).sum();
                let col: u64 = (0..c).map(|g| self.get(g, k)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let (miou, std) = mean_std(&present);
        IoUReport {
            per_class,
            miou,
            std,
        }
    }
}

/// Mean and population std; `(0, 0)` for an empty slice.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct IoUReport {
    /// `None` where the class has zero union.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
    /// Population std over present classes.
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DegradationCurve {
    pub bins: Vec<f64>,
    pub miou: Vec<f64>,
    pub normalized: Vec<f64>,
    /// `drops[i] = normalized[i] − normalized[i−1]`; `drops[0]` is `None`.
    pub drops: Vec<Option<f64>>,
}

/// Normalizes per-bin mIoU by the 0° bin and takes successive differences.
pub fn degradation_curve(per_bin_miou: &BTreeMap<OrderedDeg, f64>) -> Result<DegradationCurve, MetricsError> {
    let m0 = *per_bin_miou
        .get(&OrderedDeg(0.0))
        .ok_or_else(|| MetricsError::Domain("no 0° bin".into()))?;
    if m0 <= 0.0 {
        return Err(MetricsError::Domain("0° mIoU is zero; normalization undefined".into()));
    }
    let bins: Vec<f64> = per_bin_miou.keys().map(|k| k.0).collect();
    let miou: Vec<f64> = per_bin_miou.values().copied().collect();
    let normalized: Vec<f64> = miou.iter().map(|m| m / m0).collect();
    let drops = (0..normalized.len())
        .map(|i| (i > 0).then(|| normalized[i] - normalized[i - 1]))
        .collect();
    Ok(DegradationCurve {
        bins,
        miou,
        normalized,
        drops,
    })
}

/// Total-ordered degree key for bin maps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrderedDeg(pub f64);

impl Eq for OrderedDeg {}

impl PartialOrd for OrderedDeg {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrderedDeg {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BreakingPoint {
    pub bin: Option<f64>,
    /// Most negative drop; 0 for a single-bin curve.
    pub biggest_drop: f64,
}

/// Earliest bin whose drop is at or below `threshold`.
pub fn breaking_point(curve: &DegradationCurve, threshold: f64) -> BreakingPoint {
    let bin = curve
        .drops
        .iter()
        .zip(&curve.bins)
        .find(|(d, _)| d.is_some_and(|d| d <= threshold))
        .map(|(_, &b)| b);
    let biggest_drop = curve.drops.iter().flatten().copied().fold(0.0, f64::min);
    BreakingPoint { bin, biggest_drop }
}

/// Gains for one capacity pair.
#[derive(Debug, Clone, PartialEq)]
pub struct GainBlock {
    pub from: u64,
    pub to: u64,
    pub models: Vec<String>,
    pub difficulties: Vec<String>,
    /// `gains[model][difficulty]`, `None` where either side is missing.
    pub gains: Vec<Vec<Option<f64>>>,
    /// Per-model mean over present difficulties.
    pub model_average: Vec<Option<f64>>,
    /// Per-difficulty mean over present models.
    pub task_average: Vec<Option<f64>>,
    /// Mean of `task_average`.
    pub overall_average: Option<f64>,
}

impl GainBlock {
    pub fn pair_label(&self) -> String {
        format!("{}->{}", self.from, self.to)
    }
}

fn mean_present(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// mIoU results keyed by capacity, then `(model, difficulty)`.
pub type CapacityResults = BTreeMap<u64, BTreeMap<(String, String), f64>>;

/// Capacity pairs compared: each consecutive pair, then smallest→largest
/// when more than two capacities are present.
pub fn capacity_pairs(capacities: &[u64]) -> Vec<(u64, u64)> {
    let mut pairs: Vec<(u64, u64)> = capacities.windows(2).map(|w| (w[0], w[1])).collect();
    if capacities.len() > 2 {
        pairs.push((capacities[0], capacities[capacities.len() - 1]));
    }
    pairs
}

/// Absolute mIoU gains between capacities. `models` and `difficulties` fix
/// the row and column order.
pub fn memory_gains(
    results: &CapacityResults,
    models: &[String],
    difficulties: &[String],
) -> Result<Vec<GainBlock>, MetricsError> {
    let caps: Vec<u64> = results.keys().copied().collect();
    if caps.len() < 2 {
        return Err(MetricsError::Domain("need at least two capacities".into()));
    }
    Ok(capacity_pairs(&caps)
        .into_iter()
        .map(|(from, to)| {
            let lo = &results[&from];
            let hi = &results[&to];
            let gains: Vec<Vec<Option<f64>>> = models
                .iter()
                .map(|m| {
                    difficulties
                        .iter()
                        .map(|d| {
                            let key = (m.clone(), d.clone());
                            Some(hi.get(&key)? - lo.get(&key)?)
                        })
                        .collect()
                })
                .collect();
            let model_average = gains.iter().map(|row| mean_present(row.iter().copied())).collect();
            let task_average: Vec<Option<f64>> = (0..difficulties.len())
                .map(|j| mean_present(gains.iter().map(|row| row[j])))
                .collect();
            let overall_average = mean_present(task_average.iter().copied());
            GainBlock {
                from,
                to,
                models: models.to_vec(),
                difficulties: difficulties.to_vec(),
                gains,
                model_average,
                task_average,
                overall_average,
            }
        })
        .collect())
}

/// Round half away from zero to 3 decimals, for display.
pub fn round3(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}
