//! Experiment A: per-difficulty bank construction and scoring of every
//! reference and validation bin.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::{
    csv_flush, csv_write, csv_writer, difficulty_table_csv, f6, io_err, Difficulty, HarnessError,
    RunConfig,
};
use crate::binning::{FrameEntry, SubsetManifest};
use crate::featstore::{self, PixelMask};
use crate::membank::{self, BankParams, BankSource, MemoryBank};
use crate::metrics::{ConfusionMatrix, IoUReport, OrderedDeg};
use crate::segmenter::{self, PredictParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum BinRole {
    Reference,
    Validation,
}

impl BinRole {
    pub fn as_str(self) -> &'static str {
        match self {
            BinRole::Reference => "reference",
            BinRole::Validation => "validation",
        }
    }
}

#[derive(Debug, Clone)]
pub struct BinResult {
    pub bin_deg: f64,
    pub role: BinRole,
    pub confusion: ConfusionMatrix,
}

/// Scores of one `(model, difficulty, capacity)` cell.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub model: String,
    pub difficulty: Difficulty,
    pub capacity: usize,
    pub bank_entries: usize,
    /// Ascending by bin.
    pub bins: Vec<BinResult>,
}

impl CellResult {
    fn merged(&self, role: BinRole) -> Option<ConfusionMatrix> {
        let mut it = self.bins.iter().filter(|b| b.role == role);
        let mut acc = it.next()?.confusion.clone();
        for b in it {
            acc.merge(&b.confusion);
        }
        Some(acc)
    }

    /// Dataset-level IoU over all validation images.
    pub fn validation_report(&self) -> Option<IoUReport> {
        self.merged(BinRole::Validation).map(|c| c.iou_report())
    }

    pub fn reference_report(&self) -> Option<IoUReport> {
        self.merged(BinRole::Reference).map(|c| c.iou_report())
    }

    pub fn per_bin_miou(&self) -> BTreeMap<OrderedDeg, f64> {
        self.bins
            .iter()
            .map(|b| (OrderedDeg(b.bin_deg), b.confusion.iou_report().miou))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentA {
    pub out_dir: PathBuf,
    pub cells: Vec<CellResult>,
}

/// Checks every model has a feature file for every manifest image with one
/// consistent dimension.
fn preflight(manifest: &SubsetManifest, feature_root: &Path) -> Result<(), HarnessError> {
    let mut dim = None;
    for (_, _, f) in manifest.frames() {
        let p = featstore::feature_path_for(feature_root, &f.image);
        if !p.is_file() {
            return Err(HarnessError::MissingFeature(p));
        }
        let h = featstore::read_feature_header(&p)?;
        match dim {
            None => dim = Some(h.dim),
            Some(d) if d != h.dim => {
                return Err(membank::BankError::DimMismatch {
                    expected: d,
                    found: h.dim,
                    path: p.display().to_string(),
                }
                .into())
            }
            _ => {}
        }
    }
    Ok(())
}

fn predictions_path(exp_dir: &Path, model: &str, difficulty: Difficulty, frame: &FrameEntry) -> PathBuf {
    exp_dir
        .join("predictions")
        .join(model)
        .join(difficulty.name())
        .join(&frame.mask)
}

struct FrameScore {
    bin_deg: f64,
    confusion: ConfusionMatrix,
}

fn score_frame(
    frame: &FrameEntry,
    source: &BankSource,
    bank: &MemoryBank,
    params: &PredictParams,
    save_to: Option<PathBuf>,
) -> Result<FrameScore, HarnessError> {
    let query = featstore::read_feature_file(&source.feature_path(&frame.image))?;
    let gt = PixelMask::load(&source.mask_path(&frame.mask))?;
    let pred = segmenter::predict_mask(&query, bank, params, gt.height, gt.width)?;
    let mut confusion = ConfusionMatrix::new(params.num_classes);
    confusion.accumulate(&gt, &pred.mask)?;
    if let Some(path) = save_to {
        pred.mask.save(&path)?;
    }
    Ok(FrameScore {
        bin_deg: frame.bin_deg,
        confusion,
    })
}

/// Builds the bank for one difficulty and scores every manifest frame.
pub fn evaluate_cell(
    config: &RunConfig,
    manifest: &SubsetManifest,
    model: &str,
    difficulty: Difficulty,
    capacity: usize,
    exp_dir: &Path,
) -> Result<CellResult, HarnessError> {
    let model_cfg = config
        .models
        .get(model)
        .ok_or_else(|| HarnessError::Config(format!("unknown model {model:?}")))?;
    let source = BankSource {
        data_root: config.data_root(),
        feature_root: model_cfg.features.clone(),
    };
    let spec = difficulty.spec();
    let bank = membank::build_bank(
        manifest,
        &source,
        &spec.reference_bins,
        &BankParams {
            capacity,
            seed: config.seed,
            policy: config.sampling,
        },
    )?;
    let bank = bank.clone().shard(config.shards.min(bank.len()))?;
    let params = PredictParams {
        k: config.k.min(bank.len()),
        temperature: config.temperature,
        num_classes: manifest.num_classes,
        upsample: config.upsample,
    };
    if config.k > bank.len() {
        log::warn!(
            "{model}/{difficulty}: k = {} exceeds bank size {}, using {}",
            config.k,
            bank.len(),
            params.k
        );
    }

    let frames: Vec<&FrameEntry> = manifest
        .frames()
        .map(|(_, _, f)| f)
        .filter(|f| spec.reference_bins.contains(&f.bin_deg) || spec.validation_bins.contains(&f.bin_deg))
        .collect();

    let mut per_bin: BTreeMap<OrderedDeg, ConfusionMatrix> = BTreeMap::new();
    for chunk in frames.chunks(config.chunk_size) {
        let scores: Vec<FrameScore> = chunk
            .par_iter()
            .map(|f| {
                let save = config
                    .save_predictions
                    .then(|| predictions_path(exp_dir, model, difficulty, f));
                score_frame(f, &source, &bank, &params, save)
            })
            .collect::<Result<_, _>>()?;
        for s in scores {
            per_bin
                .entry(OrderedDeg(s.bin_deg))
                .or_insert_with(|| ConfusionMatrix::new(manifest.num_classes))
                .merge(&s.confusion);
        }
    }

    let bins = per_bin
        .into_iter()
        .map(|(b, confusion)| BinResult {
            bin_deg: b.0,
            role: if spec.reference_bins.contains(&b.0) {
                BinRole::Reference
            } else {
                BinRole::Validation
            },
            confusion,
        })
        .collect();
    Ok(CellResult {
        model: model.to_string(),
        difficulty,
        capacity,
        bank_entries: bank.len(),
        bins,
    })
}

/// Runs every configured `(model, difficulty)` at `capacity` and writes
/// `difficulties.csv`, `summary.csv`, `bins.csv` and `iou.csv` into `out_dir`.
pub fn run_experiment_a_at(
    config: &RunConfig,
    manifest: &SubsetManifest,
    capacity: usize,
    out_dir: &Path,
) -> Result<ExperimentA, HarnessError> {
    config.validate()?;
    for (name, m) in &config.models {
        log::info!("checking features for {name}");
        preflight(manifest, &m.features)?;
    }
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;

    let mut cells = Vec::new();
    for model in config.models.keys() {
        for &difficulty in &config.difficulties {
            log::info!("evaluating {model} / {difficulty} / capacity {capacity}");
            cells.push(evaluate_cell(config, manifest, model, difficulty, capacity, out_dir)?);
        }
    }
    write_tables(&cells, out_dir)?;
    Ok(ExperimentA {
        out_dir: out_dir.to_path_buf(),
        cells,
    })
}

/// Experiment A at the configured single capacity, under `<output_root>/experiment_a`.
pub fn run_experiment_a(config: &RunConfig) -> Result<ExperimentA, HarnessError> {
    let manifest = SubsetManifest::load(&config.manifest)?;
    let out_dir = config.output_root.join("experiment_a");
    run_experiment_a_at(config, &manifest, config.capacity, &out_dir)
}

fn write_tables(cells: &[CellResult], out_dir: &Path) -> Result<(), HarnessError> {
    let specs: Vec<_> = Difficulty::ALL.iter().map(|d| d.spec()).collect();
    let path = out_dir.join("difficulties.csv");
    std::fs::write(&path, difficulty_table_csv(&specs)).map_err(io_err(&path))?;

    let path = out_dir.join("summary.csv");
    let mut w = csv_writer(&path)?;
    csv_write(&mut w, &path, ["model", "difficulty", "capacity", "miou", "std"])?;
    for c in cells {
        if let Some(r) = c.validation_report() {
            csv_write(
                &mut w,
                &path,
                [
                    c.model.clone(),
                    c.difficulty.to_string(),
                    c.capacity.to_string(),
                    f6(r.miou),
                    f6(r.std),
                ],
            )?;
        }
    }
    csv_flush(w, &path)?;

    let path = out_dir.join("bins.csv");
    let mut w = csv_writer(&path)?;
    csv_write(
        &mut w,
        &path,
        ["model", "difficulty", "capacity", "bin_deg", "role", "miou", "std"],
    )?;
    for c in cells {
        for b in &c.bins {
            let r = b.confusion.iou_report();
            csv_write(
                &mut w,
                &path,
                [
                    c.model.clone(),
                    c.difficulty.to_string(),
                    c.capacity.to_string(),
                    format!("{}", b.bin_deg),
                    b.role.as_str().to_string(),
                    f6(r.miou),
                    f6(r.std),
                ],
            )?;
        }
    }
    csv_flush(w, &path)?;

    let path = out_dir.join("iou.csv");
    let mut w = csv_writer(&path)?;
    csv_write(
        &mut w,
        &path,
        ["model", "difficulty", "capacity", "bin_deg", "class_id", "iou"],
    )?;
    for c in cells {
        for b in &c.bins {
            for (class, iou) in b.confusion.iou_report().per_class.iter().enumerate() {
                csv_write(
                    &mut w,
                    &path,
                    [
                        c.model.clone(),
                        c.difficulty.to_string(),
                        c.capacity.to_string(),
                        format!("{}", b.bin_deg),
                        class.to_string(),
                        iou.map(f6).unwrap_or_default(),
                    ],
                )?;
            }
        }
    }
    csv_flush(w, &path)
}
