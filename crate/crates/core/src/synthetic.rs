//! Synthetic datasets for tests and smoke runs.
//!
//! [`generate`] writes a curated subset (manifest, class-id masks, RGB
//! images) plus one `PFV1` feature tree per model. Each patch feature is the
//! axis of its label plus per-instance jitter, so retrieval is well posed.
//! With `view_drift > 0` features rotate away from the 0° view as the bin
//! angle grows, which produces a viewpoint-degradation curve.
//!
//! [`write_source_tree`] writes a raw capture tree (images, masks, COLMAP
//! `images.txt`) for the subset builder.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binning::{
    CategoryEntry, FrameEntry, InstanceEntry, SubsetManifest, DEFAULT_BIN_CENTERS,
    DEFAULT_TOLERANCE_DEG,
};
use crate::featstore::{self, FeatError, PatchFeatureMap, PixelMask};
use crate::pose::{self, CameraPose, Quaternion};

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub instances_per_class: usize,
    pub bins: Vec<f64>,
    pub grid: usize,
    /// Mask pixels per patch side.
    pub patch_px: usize,
    pub dim: usize,
    pub models: Vec<String>,
    /// Per-instance feature jitter amplitude.
    pub jitter: f32,
    /// Feature rotation per degree of viewpoint change, in radians.
    pub view_drift: f32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 3,
            instances_per_class: 4,
            bins: DEFAULT_BIN_CENTERS.to_vec(),
            grid: 8,
            patch_px: 1,
            dim: 16,
            models: vec!["synthetic".into()],
            jitter: 0.05,
            view_drift: 0.0,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub root: PathBuf,
    pub manifest_path: PathBuf,
    pub manifest: SubsetManifest,
    /// `(model name, feature root)`.
    pub feature_roots: Vec<(String, PathBuf)>,
}

/// Cell labels, base features and `(bin, relative path)` views of one instance.
type InstanceJob = (Vec<u8>, Vec<Vec<f32>>, Vec<(f64, String)>);

fn object_mask(rng: &mut ChaCha8Rng, grid: usize, class_id: u8) -> Vec<u8> {
    let h = rng.random_range(2..=grid.div_ceil(2) + 1).min(grid);
    let w = rng.random_range(2..=grid.div_ceil(2) + 1).min(grid);
    let r0 = rng.random_range(0..=grid - h);
    let c0 = rng.random_range(0..=grid - w);
    let mut cells = vec![0u8; grid * grid];
    for r in r0..r0 + h {
        for c in c0..c0 + w {
            cells[r * grid + c] = class_id;
        }
    }
    cells
}

fn upscale(cells: &[u8], grid: usize, px: usize) -> PixelMask {
    let side = grid * px;
    let labels = (0..side * side)
        .map(|i| cells[(i / side / px) * grid + (i % side) / px])
        .collect();
    PixelMask::new(side, side, labels).expect("square mask")
}

fn palette(l: u8) -> [u8; 3] {
    [
        (l.wrapping_mul(97)).wrapping_add(40),
        (l.wrapping_mul(57)).wrapping_add(90),
        (l.wrapping_mul(151)).wrapping_add(20),
    ]
}

fn write_rgb(mask: &PixelMask, path: &Path) -> Result<(), FeatError> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).map_err(|source| FeatError::Io {
            path: p.display().to_string(),
            source,
        })?;
    }
    let img = image::RgbImage::from_fn(mask.width as u32, mask.height as u32, |x, y| {
        image::Rgb(palette(mask.get(y as usize, x as usize)))
    });
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| FeatError::Image {
            path: path.display().to_string(),
            source,
        })
}

/// Patch features for one view: each cell's base feature rotated by `angle`
/// toward its own random unit direction.
fn view_features(base: &[Vec<f32>], angle: f32, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let (s, c) = angle.sin_cos();
    let mut out = Vec::with_capacity(base.len() * base.first().map_or(0, Vec::len));
    for b in base {
        let norm = b.iter().map(|x| x * x).sum::<f32>().sqrt();
        let dir = random_unit(rng, b.len());
        out.extend(b.iter().zip(&dir).map(|(x, d)| c * x / norm + s * d));
    }
    out
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

pub fn generate(root: &Path, spec: &SyntheticSpec) -> Result<SyntheticDataset, FeatError> {
    assert!(spec.dim > spec.classes, "dim must exceed the class count");
    assert!(spec.grid >= 2 && spec.patch_px >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut categories = Vec::new();
    let mut jobs: Vec<InstanceJob> = Vec::new();

    for k in 0..spec.classes {
        let class_id = (k + 1) as u8;
        let class_number = 100 + k as u32;
        let mut instances = Vec::new();
        for j in 0..spec.instances_per_class {
            let instance_id = format!("inst{j:02}");
            let cells = object_mask(&mut rng, spec.grid, class_id);
            let base: Vec<Vec<f32>> = cells
                .iter()
                .map(|&l| {
                    let mut v: Vec<f32> = (0..spec.dim)
                        .map(|_| rng.random_range(-spec.jitter..=spec.jitter))
                        .collect();
                    v[l as usize] += 1.0;
                    v
                })
                .collect();
            let mut frames = Vec::new();
            let mut views = Vec::new();
            for (b, &bin) in spec.bins.iter().enumerate() {
                let frame = (b + 1) as u32;
                let error: f64 = rng.random_range(-1.5..1.5);
                let rel = format!("{class_number}/{bin}/{instance_id}_{frame}.png");
                frames.push(FrameEntry {
                    bin_deg: bin,
                    image_id: frame,
                    theta_deg: bin + error,
                    error_deg: error,
                    image: format!("images/{rel}"),
                    mask: format!("masks/{rel}"),
                });
                views.push((bin, rel));
            }
            jobs.push((cells, base, views));
            instances.push(InstanceEntry {
                instance_id,
                frames,
            });
        }
        categories.push(CategoryEntry {
            class_number,
            class_name: format!("class{class_number}"),
            class_id,
            instances,
        });
    }

    let manifest = SubsetManifest {
        bins: spec.bins.clone(),
        tolerance_deg: DEFAULT_TOLERANCE_DEG,
        num_classes: spec.classes + 1,
        categories,
    };

    let feature_roots: Vec<(String, PathBuf)> = spec
        .models
        .iter()
        .map(|m| (m.clone(), root.join("features").join(m)))
        .collect();

    for (cells, base, views) in &jobs {
        let mask = upscale(cells, spec.grid, spec.patch_px);
        for (bin, rel) in views {
            mask.save(&root.join("masks").join(rel))?;
            write_rgb(&mask, &root.join("images").join(rel))?;
            let angle = spec.view_drift * (*bin as f32);
            for (mi, (_, froot)) in feature_roots.iter().enumerate() {
                // Models differ by a per-model drift scale.
                let a = angle * (1.0 + mi as f32 * 0.5);
                let data = view_features(base, a, &mut rng);
                let map = PatchFeatureMap::new(spec.grid, spec.grid, spec.dim, data)?;
                featstore::write_feature_file(
                    &map,
                    &featstore::feature_path_for(froot, &format!("images/{rel}")),
                )?;
            }
        }
    }

    let manifest_path = root.join("manifest.toml");
    fs::create_dir_all(root).map_err(|source| FeatError::Io {
        path: root.display().to_string(),
        source,
    })?;
    fs::write(&manifest_path, manifest.to_toml()).map_err(|source| FeatError::Io {
        path: manifest_path.display().to_string(),
        source,
    })?;
    Ok(SyntheticDataset {
        root: root.to_path_buf(),
        manifest_path,
        manifest,
        feature_roots,
    })
}

/// One raw capture for [`write_source_tree`].
#[derive(Debug, Clone)]
pub struct SourceInstance {
    pub class_number: u32,
    pub instance_id: String,
    /// Rotation about z of each frame, in degrees; frame ids start at 1.
    pub angles_deg: Vec<f64>,
    /// Frame ids written without a mask.
    pub missing_masks: Vec<u32>,
}

/// Writes `<root>/<class>/<instance>/{images,masks,sparse/0/images.txt}`.
pub fn write_source_tree(root: &Path, instances: &[SourceInstance]) -> Result<(), FeatError> {
    let io = |p: &Path| {
        let p = p.display().to_string();
        move |source| FeatError::Io { path: p, source }
    };
    for inst in instances {
        let dir = root.join(inst.class_number.to_string()).join(&inst.instance_id);
        let sparse = dir.join("sparse/0");
        fs::create_dir_all(&sparse).map_err(io(&sparse))?;
        let mut poses = Vec::new();
        for (i, &deg) in inst.angles_deg.iter().enumerate() {
            let id = i as u32 + 1;
            let half = deg.to_radians() / 2.0;
            let q = Quaternion::new(half.cos(), 0.0, 0.0, half.sin());
            let name = format!("{id:03}.jpg");
            poses.push(CameraPose {
                image_id: id,
                camera_id: 1,
                image_name: name.clone(),
                quaternion: q,
                rotation: pose::quat_to_rotation(q).expect("unit quaternion"),
                translation: [0.0, 0.0, 1.0],
            });
            let mask = PixelMask::filled(4, 4, (id % 2) as u8);
            let img_path = dir.join("images").join(&name);
            fs::create_dir_all(img_path.parent().unwrap()).map_err(io(&img_path))?;
            image::RgbImage::from_pixel(4, 4, image::Rgb([id as u8, 0, 0]))
                .save_with_format(&img_path, image::ImageFormat::Jpeg)
                .map_err(|source| FeatError::Image {
                    path: img_path.display().to_string(),
                    source,
                })?;
            if !inst.missing_masks.contains(&id) {
                mask.save(&dir.join("masks").join(format!("{id:03}.png")))?;
            }
        }
        let path = sparse.join("images.txt");
        fs::write(&path, pose::write_colmap_images(&poses)).map_err(io(&path))?;
    }
    Ok(())
}
