//! Viewpoint binning of multi-view captures and curation of the evaluation
//! subset.
//!
//! Source tree consumed by [`build_manifest`]:
//!
//! ```text
//! <root>/classes.txt                       optional: class_number<TAB>class_name
//! <root>/<class_number>/<instance>/images/<frame image>
//! <root>/<class_number>/<instance>/masks/<frame stem>.png
//! <root>/<class_number>/<instance>/sparse/0/images.txt   (or sparse/images.txt)
//! ```
//!
//! The manifest lists only valid instances, each frame path relative to the
//! source root.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::featstore::PixelMask;
use crate::pose::{self, RelativeAngle};

pub const DEFAULT_BIN_CENTERS: [f64; 7] = [0.0, 15.0, 30.0, 45.0, 60.0, 75.0, 90.0];
pub const DEFAULT_TOLERANCE_DEG: f64 = 6.0;

#[derive(Debug, Error)]
pub enum BinningError {
    #[error("invalid bin spec: {0}")]
    InvalidSpec(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed manifest: {msg}")]
    Manifest { path: String, msg: String },
    #[error("manifest references missing files: {0:?}")]
    MissingFiles(Vec<String>),
    #[error("{0}")]
    Mask(#[from] crate::featstore::FeatError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BinningError + '_ {
    move |source| BinningError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Target angles in degrees, strictly increasing within `[0, 180]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinSpec {
    centers: Vec<f64>,
}

impl Default for BinSpec {
    fn default() -> Self {
        Self {
            centers: DEFAULT_BIN_CENTERS.to_vec(),
        }
    }
}

impl BinSpec {
    pub fn new(centers: Vec<f64>) -> Result<Self, BinningError> {
        if centers.is_empty() {
            return Err(BinningError::InvalidSpec("no bin centers".into()));
        }
        if centers.iter().any(|c| !(0.0..=180.0).contains(c)) {
            return Err(BinningError::InvalidSpec("centers must lie in [0, 180]".into()));
        }
        if centers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(BinningError::InvalidSpec("centers must be strictly increasing".into()));
        }
        Ok(Self { centers })
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FramePick {
    pub frame: u32,
    pub theta_deg: f64,
    /// `theta_deg − center`.
    pub error_deg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinSlot {
    pub center: f64,
    pub pick: Option<FramePick>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinAssignment {
    pub instance_id: String,
    pub bins: Vec<BinSlot>,
}

impl BinAssignment {
    pub fn is_complete(&self) -> bool {
        self.bins.iter().all(|b| b.pick.is_some())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceValidity {
    pub instance_id: String,
    pub valid: bool,
    /// Largest |error| over assigned bins; 0 when nothing is assigned.
    pub max_abs_error_deg: f64,
}

/// Picks one frame per bin center, lowest center first. Each center takes the
/// not-yet-used frame closest to it, ties going to the lower image id.
pub fn assign_bins(instance_id: &str, angles: &[RelativeAngle], spec: &BinSpec) -> BinAssignment {
    let mut used = vec![false; angles.len()];
    let bins = spec
        .centers
        .iter()
        .map(|&center| {
            let best = angles
                .iter()
                .enumerate()
                .filter(|(i, _)| !used[*i])
                .min_by(|(_, a), (_, b)| {
                    (a.theta_deg - center)
                        .abs()
                        .total_cmp(&(b.theta_deg - center).abs())
                        .then(a.frame.cmp(&b.frame))
                });
            let pick = best.map(|(i, a)| {
                used[i] = true;
                FramePick {
                    frame: a.frame,
                    theta_deg: a.theta_deg,
                    error_deg: a.theta_deg - center,
                }
            });
            BinSlot { center, pick }
        })
        .collect();
    BinAssignment {
        instance_id: instance_id.to_string(),
        bins,
    }
}

pub fn validate_instance(assignment: &BinAssignment, tolerance_deg: f64) -> InstanceValidity {
    let max_abs_error_deg = assignment
        .bins
        .iter()
        .filter_map(|b| b.pick.map(|p| p.error_deg.abs()))
        .fold(0.0, f64::max);
    InstanceValidity {
        instance_id: assignment.instance_id.clone(),
        valid: assignment.is_complete() && max_abs_error_deg <= tolerance_deg,
        max_abs_error_deg,
    }
}

/// Selected frame for one bin of one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub bin_deg: f64,
    pub image_id: u32,
    pub theta_deg: f64,
    pub error_deg: f64,
    /// Image path relative to the dataset root.
    pub image: String,
    /// Mask path relative to the dataset root.
    pub mask: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceEntry {
    pub instance_id: String,
    pub frames: Vec<FrameEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryEntry {
    pub class_number: u32,
    pub class_name: String,
    /// Class id used in masks; background is 0.
    pub class_id: u8,
    pub instances: Vec<InstanceEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetManifest {
    pub bins: Vec<f64>,
    pub tolerance_deg: f64,
    /// Background plus one id per category.
    pub num_classes: usize,
    pub categories: Vec<CategoryEntry>,
}

impl SubsetManifest {
    pub fn empty(spec: &BinSpec, tolerance_deg: f64) -> Self {
        Self {
            bins: spec.centers.clone(),
            tolerance_deg,
            num_classes: 1,
            categories: Vec::new(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest is always serializable")
    }

    pub fn from_toml(text: &str, origin: &str) -> Result<Self, BinningError> {
        toml::from_str(text).map_err(|e| BinningError::Manifest {
            path: origin.to_string(),
            msg: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), BinningError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(path))?;
        }
        fs::write(path, self.to_toml()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, BinningError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text, &path.display().to_string())
    }

    /// Every `(category, instance, frame)` in manifest order.
    pub fn frames(&self) -> impl Iterator<Item = (&CategoryEntry, &InstanceEntry, &FrameEntry)> {
        self.categories.iter().flat_map(|c| {
            c.instances
                .iter()
                .flat_map(move |i| i.frames.iter().map(move |f| (c, i, f)))
        })
    }

    pub fn num_instances(&self) -> usize {
        self.categories.iter().map(|c| c.instances.len()).sum()
    }

    /// Fails with the list of referenced paths that do not exist under `root`.
    pub fn validate_paths(&self, root: &Path) -> Result<(), BinningError> {
        let missing: Vec<String> = self
            .frames()
            .flat_map(|(_, _, f)| [&f.image, &f.mask])
            .filter(|p| !root.join(p).is_file())
            .cloned()
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(BinningError::MissingFiles(missing))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Exclusion {
    pub instance_id: String,
    pub reason: String,
}

/// `instance_id<TAB>reason` lines.
pub fn format_exclusions(exclusions: &[Exclusion]) -> String {
    exclusions
        .iter()
        .map(|e| format!("{}\t{}\n", e.instance_id, e.reason.replace(['\t', '\n'], " ")))
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct BuildOptions {
    /// Keep only categories whose on-disk size lies within this byte range.
    pub category_size_bytes: Option<(u64, u64)>,
}

#[derive(Debug, Clone)]
pub struct BuildOutcome {
    pub manifest: SubsetManifest,
    pub exclusions: Vec<Exclusion>,
}

const IMAGE_EXTENSIONS: [&str; 3] = ["jpg", "jpeg", "png"];

fn sorted_subdirs(dir: &Path) -> Result<Vec<PathBuf>, BinningError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        if entry.file_type().map_err(io_err(dir))?.is_dir() {
            out.push(entry.path());
        }
    }
    out.sort();
    Ok(out)
}

fn dir_size(dir: &Path) -> u64 {
    let mut total = 0;
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let Ok(rd) = fs::read_dir(&d) else { continue };
        for e in rd.flatten() {
            match e.file_type() {
                Ok(t) if t.is_dir() => stack.push(e.path()),
                Ok(_) => total += e.metadata().map(|m| m.len()).unwrap_or(0),
                Err(_) => {}
            }
        }
    }
    total
}

fn read_class_names(root: &Path) -> Result<BTreeMap<u32, String>, BinningError> {
    let path = root.join("classes.txt");
    let mut names = BTreeMap::new();
    if !path.is_file() {
        return Ok(names);
    }
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (num, name) = line.split_once('\t').ok_or_else(|| BinningError::Manifest {
            path: path.display().to_string(),
            msg: format!("line {}: expected class_number<TAB>class_name", i + 1),
        })?;
        let num = num.trim().parse().map_err(|_| BinningError::Manifest {
            path: path.display().to_string(),
            msg: format!("line {}: bad class number", i + 1),
        })?;
        names.insert(num, name.trim().to_string());
    }
    Ok(names)
}

fn rel(root: &Path, path: &Path) -> String {
    path.strip_prefix(root)
        .unwrap_or(path)
        .components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

/// Bins one instance directory. `Err` carries the exclusion reason.
fn bin_instance(
    root: &Path,
    inst_dir: &Path,
    spec: &BinSpec,
    tolerance_deg: f64,
) -> Result<InstanceEntry, String> {
    let instance_id = inst_dir.file_name().unwrap().to_string_lossy().to_string();
    let recon = [
        inst_dir.join("sparse/0/images.txt"),
        inst_dir.join("sparse/images.txt"),
    ]
    .into_iter()
    .find(|p| p.is_file())
    .ok_or_else(|| "no sparse reconstruction (images.txt)".to_string())?;
    let file = fs::File::open(&recon).map_err(|e| format!("unreadable reconstruction: {e}"))?;
    let poses = pose::parse_colmap_images(BufReader::new(file))
        .map_err(|e| format!("unreadable reconstruction: {e}"))?;

    let images_dir = inst_dir.join("images");
    let present: HashSet<String> = fs::read_dir(&images_dir)
        .map_err(|e| format!("no images directory: {e}"))?
        .flatten()
        .filter(|e| {
            e.path()
                .extension()
                .and_then(|x| x.to_str())
                .is_some_and(|x| IMAGE_EXTENSIONS.contains(&x.to_ascii_lowercase().as_str()))
        })
        .map(|e| e.file_name().to_string_lossy().to_string())
        .collect();
    let poses: Vec<_> = poses
        .into_iter()
        .filter(|p| present.contains(&p.image_name))
        .collect();
    let reference = pose::reference_pose(&poses, None)
        .ok_or_else(|| "no registered frame has an image".to_string())?;
    let angles = pose::relative_angles(&poses, reference);

    let assignment = assign_bins(&instance_id, &angles, spec);
    let validity = validate_instance(&assignment, tolerance_deg);
    if !assignment.is_complete() {
        let missing: Vec<String> = assignment
            .bins
            .iter()
            .filter(|b| b.pick.is_none())
            .map(|b| format!("{}", b.center))
            .collect();
        return Err(format!("unassigned bins: {}", missing.join(",")));
    }
    if !validity.valid {
        return Err(format!(
            "max angular error {:.3} deg exceeds tolerance {} deg",
            validity.max_abs_error_deg, tolerance_deg
        ));
    }

    let by_id: BTreeMap<u32, &pose::CameraPose> = poses.iter().map(|p| (p.image_id, p)).collect();
    let mut frames = Vec::with_capacity(assignment.bins.len());
    for slot in &assignment.bins {
        let pick = slot.pick.expect("complete assignment");
        let p = by_id[&pick.frame];
        let image = images_dir.join(&p.image_name);
        let stem = Path::new(&p.image_name).file_stem().unwrap().to_string_lossy().to_string();
        let mask = inst_dir.join("masks").join(format!("{stem}.png"));
        if !mask.is_file() {
            return Err(format!(
                "missing mask for frame {} (bin {})",
                pick.frame, slot.center
            ));
        }
        frames.push(FrameEntry {
            bin_deg: slot.center,
            image_id: pick.frame,
            theta_deg: pick.theta_deg,
            error_deg: pick.error_deg,
            image: rel(root, &image),
            mask: rel(root, &mask),
        });
    }
    Ok(InstanceEntry {
        instance_id,
        frames,
    })
}

/// Scans a source tree, bins every instance, and keeps the valid ones.
pub fn build_manifest(
    root: &Path,
    spec: &BinSpec,
    tolerance_deg: f64,
    opts: &BuildOptions,
) -> Result<BuildOutcome, BinningError> {
    let mut manifest = SubsetManifest::empty(spec, tolerance_deg);
    let mut exclusions = Vec::new();
    if !root.is_dir() {
        return Err(BinningError::Io {
            path: root.display().to_string(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root not found"),
        });
    }
    let names = read_class_names(root)?;

    let mut classes: Vec<(u32, PathBuf)> = Vec::new();
    for dir in sorted_subdirs(root)? {
        let name = dir.file_name().unwrap().to_string_lossy().to_string();
        match name.parse::<u32>() {
            Ok(n) => classes.push((n, dir)),
            Err(_) => log::warn!("skipping non-numeric class directory {}", dir.display()),
        }
    }
    classes.sort_by_key(|(n, _)| *n);

    for (class_number, class_dir) in classes {
        if let Some((lo, hi)) = opts.category_size_bytes {
            let size = dir_size(&class_dir);
            if size < lo || size > hi {
                log::info!("class {class_number}: size {size} B outside [{lo}, {hi}], skipped");
                continue;
            }
        }
        let inst_dirs = sorted_subdirs(&class_dir)?;
        let results: Vec<Result<InstanceEntry, String>> = inst_dirs
            .par_iter()
            .map(|d| bin_instance(root, d, spec, tolerance_deg))
            .collect();

        let mut instances = Vec::new();
        for (dir, res) in inst_dirs.iter().zip(results) {
            match res {
                Ok(inst) => instances.push(inst),
                Err(reason) => {
                    let instance_id = format!(
                        "{}/{}",
                        class_number,
                        dir.file_name().unwrap().to_string_lossy()
                    );
                    log::info!("excluding {instance_id}: {reason}");
                    exclusions.push(Exclusion {
                        instance_id,
                        reason,
                    });
                }
            }
        }
        if instances.is_empty() {
            continue;
        }
        instances.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
        manifest.categories.push(CategoryEntry {
            class_number,
            class_name: names
                .get(&class_number)
                .cloned()
                .unwrap_or_else(|| class_number.to_string()),
            class_id: 0,
            instances,
        });
    }

    for (i, cat) in manifest.categories.iter_mut().enumerate() {
        cat.class_id = u8::try_from(i + 1).map_err(|_| {
            BinningError::InvalidSpec("more than 255 categories do not fit 8-bit masks".into())
        })?;
    }
    manifest.num_classes = manifest.categories.len() + 1;
    Ok(BuildOutcome {
        manifest,
        exclusions,
    })
}

/// Destination layout `<class>/<angle>/<instance>_<frame>.<ext>`.
pub fn subset_layout_path(class_number: u32, bin_deg: f64, instance_id: &str, frame: u32, ext: &str) -> String {
    format!("{class_number}/{bin_deg}/{instance_id}_{frame}.{ext}")
}

/// Copies selected frames into `out_root/images/...` and `out_root/masks/...`
/// and returns a manifest pointing at the copies.
///
/// With `binary_masks`, nonzero mask pixels are rewritten to the category's
/// class id so the copies follow the class-id mask convention.
pub fn materialize_subset(
    manifest: &SubsetManifest,
    src_root: &Path,
    out_root: &Path,
    binary_masks: bool,
) -> Result<SubsetManifest, BinningError> {
    let mut out = manifest.clone();
    for cat in &mut out.categories {
        for inst in &mut cat.instances {
            for f in &mut inst.frames {
                let ext = Path::new(&f.image)
                    .extension()
                    .and_then(|e| e.to_str())
                    .unwrap_or("png")
                    .to_ascii_lowercase();
                let img_rel = format!(
                    "images/{}",
                    subset_layout_path(cat.class_number, f.bin_deg, &inst.instance_id, f.image_id, &ext)
                );
                let mask_rel = format!(
                    "masks/{}",
                    subset_layout_path(cat.class_number, f.bin_deg, &inst.instance_id, f.image_id, "png")
                );
                let dst = out_root.join(&img_rel);
                fs::create_dir_all(dst.parent().unwrap()).map_err(io_err(&dst))?;
                fs::copy(src_root.join(&f.image), &dst).map_err(io_err(&dst))?;

                let dst_mask = out_root.join(&mask_rel);
                let src_mask = src_root.join(&f.mask);
                if binary_masks {
                    let mut m = PixelMask::load(&src_mask)?;
                    for l in &mut m.labels {
                        if *l != 0 {
                            *l = cat.class_id;
                        }
                    }
                    m.save(&dst_mask)?;
                } else {
                    fs::create_dir_all(dst_mask.parent().unwrap()).map_err(io_err(&dst_mask))?;
                    fs::copy(&src_mask, &dst_mask).map_err(io_err(&dst_mask))?;
                }
                f.image = img_rel;
                f.mask = mask_rel;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassAngleStats {
    pub class_number: u32,
    pub class_name: String,
    pub mean_error_deg: f64,
    /// Population standard deviation.
    pub std_error_deg: f64,
    pub images_per_bin: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AngleStats {
    pub classes: Vec<ClassAngleStats>,
}

impl AngleStats {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class_number,class_name,std_error_deg,mean_error_deg,images_per_bin\n");
        for c in &self.classes {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{}\n",
                c.class_number, c.class_name, c.std_error_deg, c.mean_error_deg, c.images_per_bin
            ));
        }
        out
    }
}

/// Per-class mean and population std of the signed selection errors.
pub fn angle_stats(manifest: &SubsetManifest) -> AngleStats {
    let classes = manifest
        .categories
        .iter()
        .map(|cat| {
            let errors: Vec<f64> = cat
                .instances
                .iter()
                .flat_map(|i| i.frames.iter().map(|f| f.error_deg))
                .collect();
            let n = errors.len().max(1) as f64;
            let mean = errors.iter().sum::<f64>() / n;
            let var = errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
            ClassAngleStats {
                class_number: cat.class_number,
                class_name: cat.class_name.clone(),
                mean_error_deg: mean,
                std_error_deg: var.sqrt(),
                images_per_bin: cat.instances.len(),
            }
        })
        .collect();
    AngleStats { classes }
}
