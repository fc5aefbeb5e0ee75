//! Qualitative overlays: input image, ground-truth and prediction overlays,
//! and a three-color difference map.

use std::path::{Path, PathBuf};

use image::{imageops, Rgb, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{io_err, Difficulty, HarnessError, RunConfig};
use crate::binning::SubsetManifest;
use crate::featstore::{FeatError, PixelMask};

pub const AGREE_COLOR: Rgb<u8> = Rgb([128, 128, 128]);
pub const GT_ONLY_COLOR: Rgb<u8> = Rgb([220, 40, 40]);
pub const PRED_ONLY_COLOR: Rgb<u8> = Rgb([40, 90, 230]);

/// Pixel tallies of a difference map; they sum to the mask area.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DiffCounts {
    pub agree: usize,
    /// Ground truth has an object label the prediction does not reproduce.
    pub gt_only: usize,
    /// Prediction labels an object where ground truth is background.
    pub pred_only: usize,
}

/// Classifies each pixel as agree (`gt == pred`), gt-only (`gt != pred`,
/// gt not background) or pred-only (`gt != pred`, gt background).
pub fn difference_map(gt: &PixelMask, pred: &PixelMask) -> Result<(RgbImage, DiffCounts), HarnessError> {
    if (gt.height, gt.width) != (pred.height, pred.width) {
        return Err(FeatError::Domain(format!(
            "difference map shape mismatch: {}x{} vs {}x{}",
            gt.height, gt.width, pred.height, pred.width
        ))
        .into());
    }
    let mut counts = DiffCounts::default();
    let mut img = RgbImage::new(gt.width as u32, gt.height as u32);
    for (i, (g, p)) in gt.labels.iter().zip(&pred.labels).enumerate() {
        let color = if g == p {
            counts.agree += 1;
            AGREE_COLOR
        } else if *g != 0 {
            counts.gt_only += 1;
            GT_ONLY_COLOR
        } else {
            counts.pred_only += 1;
            PRED_ONLY_COLOR
        };
        img.put_pixel((i % gt.width) as u32, (i / gt.width) as u32, color);
    }
    Ok((img, counts))
}

/// Deterministic, well-spread color per class id.
fn class_color(class: u8) -> [u8; 3] {
    let h = (class as f64 * 0.618_033_988_75).fract() * 6.0;
    let x = 1.0 - ((h % 2.0) - 1.0).abs();
    let (r, g, b) = match h as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8]
}

fn overlay(base: &RgbImage, mask: &PixelMask) -> RgbImage {
    let mut out = base.clone();
    for (i, &l) in mask.labels.iter().enumerate() {
        if l == 0 {
            continue;
        }
        let c = class_color(l);
        let px = out.get_pixel_mut((i % mask.width) as u32, (i / mask.width) as u32);
        for k in 0..3 {
            px[k] = ((px[k] as u16 + c[k] as u16) / 2) as u8;
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct OverlaySample {
    pub difficulty: Difficulty,
    /// Validation frames drawn per model.
    pub per_model: usize,
    pub seed: u64,
    /// Experiment directory holding `predictions/`; defaults to `<output_root>/experiment_a`.
    pub predictions_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct OverlayArtifact {
    pub model: String,
    pub input: PathBuf,
    pub gt_overlay: PathBuf,
    pub pred_overlay: PathBuf,
    pub difference: PathBuf,
    pub counts: DiffCounts,
}

#[derive(Debug, Clone, Default)]
pub struct OverlaySummary {
    pub artifacts: Vec<OverlayArtifact>,
    /// `(model, missing prediction path)`.
    pub skipped: Vec<(String, PathBuf)>,
}

pub fn emit_overlays(config: &RunConfig, sample: &OverlaySample) -> Result<OverlaySummary, HarnessError> {
    let manifest = SubsetManifest::load(&config.manifest)?;
    let data_root = config.data_root();
    let pred_dir = sample
        .predictions_dir
        .clone()
        .unwrap_or_else(|| config.output_root.join("experiment_a"));
    let out_root = config.output_root.join("overlays");
    let validation = sample.difficulty.validation_bins();

    let frames: Vec<_> = manifest
        .frames()
        .filter(|(_, _, f)| validation.contains(&f.bin_deg))
        .collect();
    let mut summary = OverlaySummary::default();

    for model in config.models.keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(sample.seed);
        let n = sample.per_model.min(frames.len());
        let mut picks = rand::seq::index::sample(&mut rng, frames.len(), n).into_vec();
        picks.sort_unstable();

        for i in picks {
            let (cat, inst, f) = frames[i];
            let pred_path = pred_dir
                .join("predictions")
                .join(model)
                .join(sample.difficulty.name())
                .join(&f.mask);
            if !pred_path.is_file() {
                log::warn!("no prediction at {}, skipping", pred_path.display());
                summary.skipped.push((model.clone(), pred_path));
                continue;
            }
            let pred = PixelMask::load(&pred_path)?;
            let gt = PixelMask::load(&data_root.join(&f.mask))?;
            let input = image::open(data_root.join(&f.image))
                .map_err(|source| FeatError::Image {
                    path: data_root.join(&f.image).display().to_string(),
                    source,
                })?
                .into_rgb8();
            let input = if input.dimensions() == (gt.width as u32, gt.height as u32) {
                input
            } else {
                imageops::resize(&input, gt.width as u32, gt.height as u32, imageops::FilterType::Triangle)
            };
            let (diff, counts) = difference_map(&gt, &pred)?;

            let dir = out_root
                .join(model)
                .join(sample.difficulty.name())
                .join(cat.class_number.to_string())
                .join(format!("{}", f.bin_deg));
            std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            let stem = format!("{}_{}", inst.instance_id, f.image_id);
            let artifact = OverlayArtifact {
                model: model.clone(),
                input: dir.join(format!("{stem}_input.png")),
                gt_overlay: dir.join(format!("{stem}_gt.png")),
                pred_overlay: dir.join(format!("{stem}_pred.png")),
                difference: dir.join(format!("{stem}_diff.png")),
                counts,
            };
            save(&input, &artifact.input)?;
            save(&overlay(&input, &gt), &artifact.gt_overlay)?;
            save(&overlay(&input, &pred), &artifact.pred_overlay)?;
            save(&diff, &artifact.difference)?;
            summary.artifacts.push(artifact);
        }
    }

    if !summary.skipped.is_empty() {
        std::fs::create_dir_all(&out_root).map_err(io_err(&out_root))?;
        let log_path = out_root.join("skipped.tsv");
        let text: String = summary
            .skipped
            .iter()
            .map(|(m, p)| format!("{m}\t{}\n", p.display()))
            .collect();
        std::fs::write(&log_path, text).map_err(io_err(&log_path))?;
    }
    Ok(summary)
}

fn save(img: &RgbImage, path: &Path) -> Result<(), HarnessError> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| {
            FeatError::Image {
                path: path.display().to_string(),
                source,
            }
            .into()
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn identical_masks_only_agree() {
        let m = PixelMask::new(2, 2, vec![0, 3, 3, 1]).unwrap();
        let (_, c) = difference_map(&m, &m).unwrap();
        assert_eq!(c, DiffCounts { agree: 4, gt_only: 0, pred_only: 0 });
    }

    #[test]
    fn background_prediction_misses_every_object_pixel() {
        let gt = PixelMask::new(3, 3, vec![0, 0, 0, 0, 2, 2, 0, 2, 0]).unwrap();
        let pred = PixelMask::filled(3, 3, 0);
        let (img, c) = difference_map(&gt, &pred).unwrap();
        assert_eq!(c.gt_only, 3);
        assert_eq!(c.pred_only, 0);
        assert_eq!(*img.get_pixel(1, 1), GT_ONLY_COLOR);
        assert_eq!(*img.get_pixel(0, 0), AGREE_COLOR);
    }

    #[test]
    fn counts_match_direct_comparison() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gt = PixelMask::new(16, 12, (0..192).map(|_| rng.random_range(0..3)).collect()).unwrap();
        let pred = PixelMask::new(16, 12, (0..192).map(|_| rng.random_range(0..3)).collect()).unwrap();
        let (img, c) = difference_map(&gt, &pred).unwrap();
        let mut want = DiffCounts::default();
        for r in 0..16 {
            for col in 0..12 {
                let (g, p) = (gt.get(r, col), pred.get(r, col));
                let px = *img.get_pixel(col as u32, r as u32);
                if g == p {
                    want.agree += 1;
                    assert_eq!(px, AGREE_COLOR);
                } else if g != 0 {
                    want.gt_only += 1;
                    assert_eq!(px, GT_ONLY_COLOR);
                } else {
                    want.pred_only += 1;
                    assert_eq!(px, PRED_ONLY_COLOR);
                }
            }
        }
        assert_eq!(c, want);
        assert_eq!(c.agree + c.gt_only + c.pred_only, 192);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = PixelMask::filled(2, 2, 0);
        let b = PixelMask::filled(2, 3, 0);
        assert!(difference_map(&a, &b).is_err());
    }
}
