//! End-to-end experiment driver: configuration, difficulty splits, and the
//! three experiments plus qualitative overlays.

mod analysis;
mod eval;
mod overlay;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binning::BinningError;
use crate::featstore::{FeatError, Upsample};
use crate::membank::{BankError, SamplingPolicy, DEFAULT_K, DEFAULT_SEED};
use crate::metrics::MetricsError;
use crate::segmenter::DEFAULT_TEMPERATURE;

pub use analysis::{
    analyze_curves, gains_csv, memory_table, render_gain_tables, report, run_experiment_b,
    run_experiment_c, write_curve_outputs, ExperimentB, ExperimentC, ModelCurve,
};
pub use eval::{
    evaluate_cell, run_experiment_a, run_experiment_a_at, BinResult, BinRole, CellResult, ExperimentA};
pub use overlay::{
    difference_map, emit_overlays, DiffCounts, OverlayArtifact, OverlaySample, OverlaySummary,
};

/// Environment variable that overrides the configured output root.
pub const OUTPUT_ROOT_ENV: &str = "VIEWBENCH_OUTPUT_ROOT";

pub const DEFAULT_CAPACITIES: [usize; 3] = [320_000, 640_000, 1_024_000];

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing feature file: {0}")]
    MissingFeature(PathBuf),
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error(transparent)]
    Feat(#[from] FeatError),
    #[error(transparent)]
    Binning(#[from] BinningError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
    Extreme,
}

impl Difficulty {
    pub const ALL: [Difficulty; 4] = [
        Difficulty::Easy,
        Difficulty::Medium,
        Difficulty::Hard,
        Difficulty::Extreme,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Easy => "Easy",
            Difficulty::Medium => "Medium",
            Difficulty::Hard => "Hard",
            Difficulty::Extreme => "Extreme",
        }
    }

    /// Bins whose frames populate the memory bank.
    pub fn reference_bins(self) -> &'static [f64] {
        match self {
            Difficulty::Easy => &[0.0, 30.0, 60.0, 90.0],
            Difficulty::Medium => &[0.0, 45.0, 90.0],
            Difficulty::Hard => &[0.0, 90.0],
            Difficulty::Extreme => &[0.0],
        }
    }

    /// Held-out bins scored against the bank.
    pub fn validation_bins(self) -> &'static [f64] {
        match self {
            Difficulty::Easy => &[15.0, 45.0, 75.0],
            Difficulty::Medium => &[15.0, 30.0, 60.0, 75.0],
            Difficulty::Hard => &[15.0, 30.0, 45.0, 60.0, 75.0],
            Difficulty::Extreme => &[15.0, 30.0, 45.0, 60.0, 75.0, 90.0],
        }
    }

    pub fn spec(self) -> DifficultySpec {
        DifficultySpec {
            name: self,
            reference_bins: self.reference_bins().to_vec(),
            validation_bins: self.validation_bins().to_vec(),
        }
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Difficulty {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Difficulty::ALL
            .into_iter()
            .find(|d| d.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| HarnessError::Config(format!("unknown difficulty {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DifficultySpec {
    pub name: Difficulty,
    pub reference_bins: Vec<f64>,
    pub validation_bins: Vec<f64>,
}

pub(crate) fn fmt_bins(bins: &[f64]) -> String {
    bins.iter().map(|b| format!("{b}")).collect::<Vec<_>>().join(";")
}

/// `difficulty,reference_bins,validation_bins` with `;`-joined degrees.
pub fn difficulty_table_csv(specs: &[DifficultySpec]) -> String {
    let mut out = String::from("difficulty,reference_bins,validation_bins\n");
    for s in specs {
        out.push_str(&format!(
            "{},{},{}\n",
            s.name,
            fmt_bins(&s.reference_bins),
            fmt_bins(&s.validation_bins)
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Root holding one `.pfv` per manifest image.
    pub features: PathBuf,
}

fn default_capacity() -> usize {
    1_024_000
}
fn default_capacities() -> Vec<usize> {
    DEFAULT_CAPACITIES.to_vec()
}
fn default_k() -> usize {
    DEFAULT_K
}
fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}
fn default_seed() -> u64 {
    DEFAULT_SEED
}
fn default_one() -> usize {
    1
}
fn default_chunk() -> usize {
    4
}
fn default_true() -> bool {
    true
}
fn default_difficulties() -> Vec<Difficulty> {
    Difficulty::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: PathBuf,
    /// Root the manifest's paths are relative to; defaults to the manifest's directory.
    #[serde(default)]
    pub data_root: Option<PathBuf>,
    pub output_root: PathBuf,
    #[serde(default)]
    pub models: BTreeMap<String, ModelConfig>,
    /// Bank capacity for single-capacity runs.
    #[serde(default = "default_capacity")]
    pub capacity: usize,
    /// Capacities swept by the memory experiment.
    #[serde(default = "default_capacities")]
    pub capacities: Vec<usize>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_difficulties")]
    pub difficulties: Vec<Difficulty>,
    #[serde(default = "default_one")]
    pub shards: usize,
    /// Query images processed per chunk; never changes results.
    #[serde(default = "default_chunk")]
    pub chunk_size: usize,
    #[serde(default)]
    pub upsample: Upsample,
    #[serde(default)]
    pub sampling: SamplingPolicy,
    #[serde(default = "default_true")]
    pub save_predictions: bool,
}

impl RunConfig {
    pub fn new(manifest: PathBuf, output_root: PathBuf) -> Self {
        Self {
            manifest,
            data_root: None,
            output_root,
            models: BTreeMap::new(),
            capacity: default_capacity(),
            capacities: default_capacities(),
            k: DEFAULT_K,
            temperature: DEFAULT_TEMPERATURE,
            seed: DEFAULT_SEED,
            difficulties: default_difficulties(),
            shards: 1,
            chunk_size: 4,
            upsample: Upsample::Bilinear,
            sampling: SamplingPolicy::Uniform,
            save_predictions: true,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// Parses a config file; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.manifest);
        resolve(&mut cfg.output_root);
        if let Some(d) = cfg.data_root.as_mut() {
            resolve(d);
        }
        for m in cfg.models.values_mut() {
            resolve(&mut m.features);
        }
        Ok(cfg)
    }

    /// Replaces the output root with [`OUTPUT_ROOT_ENV`] when set.
    pub fn apply_env(&mut self) {
        if let Some(v) = std::env::var_os(OUTPUT_ROOT_ENV) {
            if !v.is_empty() {
                self.output_root = PathBuf::from(v);
            }
        }
    }

    pub fn data_root(&self) -> PathBuf {
        self.data_root.clone().unwrap_or_else(|| {
            self.manifest
                .parent()
                .map(Path::to_path_buf)
                .unwrap_or_else(|| PathBuf::from("."))
        })
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        if self.models.is_empty() {
            return bad("no models configured");
        }
        if self.k == 0 {
            return bad("k must be positive");
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return bad("temperature must be positive");
        }
        if self.capacity == 0 || self.capacities.contains(&0) {
            return bad("capacities must be positive");
        }
        if self.shards == 0 || self.chunk_size == 0 {
            return bad("shards and chunk_size must be positive");
        }
        if self.difficulties.is_empty() {
            return bad("no difficulties selected");
        }
        Ok(())
    }
}

pub(crate) fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>, HarnessError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    csv::Writer::from_path(path).map_err(|source| HarnessError::Csv {
        path: path.display().to_string(),
        source,
    })
}

pub(crate) fn csv_write<S: AsRef<[u8]>>(
    w: &mut csv::Writer<std::fs::File>,
    path: &Path,
    record: impl IntoIterator<Item = S>,
) -> Result<(), HarnessError> {
    w.write_record(record).map_err(|source| HarnessError::Csv {
        path: path.display().to_string(),
        source,
    })
}

pub(crate) fn csv_flush(mut w: csv::Writer<std::fs::File>, path: &Path) -> Result<(), HarnessError> {
    w.flush().map_err(io_err(path))
}

pub(crate) fn f6(v: f64) -> String {
    format!("{v:.6}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn difficulty_splits_are_disjoint_and_cover_all_bins() {
        for d in Difficulty::ALL {
            let mut all: Vec<f64> = d.reference_bins().to_vec();
            for v in d.validation_bins() {
                assert!(!all.contains(v), "{d}: {v} in both splits");
                all.push(*v);
            }
            all.sort_by(f64::total_cmp);
            assert_eq!(all, crate::binning::DEFAULT_BIN_CENTERS);
        }
        assert_eq!(Difficulty::Easy.reference_bins(), &[0.0, 30.0, 60.0, 90.0]);
        assert_eq!(Difficulty::Extreme.reference_bins(), &[0.0]);
        assert_eq!("extreme".parse::<Difficulty>().unwrap(), Difficulty::Extreme);
        assert!("insane".parse::<Difficulty>().is_err());
    }

    #[test]
    fn config_defaults_and_path_resolution() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "manifest = \"subset/manifest.toml\"\noutput_root = \"out\"\n\
             [models.DINO]\nfeatures = \"feats/dino\"\n",
        )
        .unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.k, 30);
        assert_eq!(cfg.capacities, vec![320_000, 640_000, 1_024_000]);
        assert_eq!(cfg.temperature, 0.02);
        assert_eq!(cfg.manifest, dir.path().join("subset/manifest.toml"));
        assert_eq!(cfg.data_root(), dir.path().join("subset"));
        assert_eq!(cfg.models["DINO"].features, dir.path().join("feats/dino"));
        cfg.validate().unwrap();

        assert!(RunConfig::from_toml("manifest = \"m\"\noutput_root = \"o\"\nbogus = 1\n").is_err());
    }
}
