//! Patch-feature files (`PFV1`), pixel masks, and the conversions between
//! pixel masks and patch-grid labels.
//!
//! `PFV1` layout, all little-endian:
//!
//! | offset | size | field                               |
//! |--------|------|-------------------------------------|
//! | 0      | 4    | magic `PFV1`                        |
//! | 4      | 4    | `grid_h: u32`                       |
//! | 8      | 4    | `grid_w: u32`                       |
//! | 12     | 4    | `dim: u32`                          |
//! | 16     | 4    | `dtype_code: u32` (0 = f32)         |
//! | 20     | …    | `grid_h·grid_w·dim` f32, (row, col, channel) order |

use std::fs;
use std::io::{self, BufRead, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

pub const FEATURE_MAGIC: &[u8; 4] = b"PFV1";
pub const HEADER_LEN: usize = 20;
pub const DTYPE_F32: u32 = 0;

#[derive(Debug, Error)]
pub enum FeatError {
    #[error("{path}: format error at byte {offset}: {msg}")]
    Format {
        path: String,
        offset: u64,
        msg: String,
    },
    #[error("invalid feature map: {0}")]
    Invalid(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> FeatError + '_ {
    move |source| FeatError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Dense grid of patch features, row-major by (row, col, channel).
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFeatureMap {
    grid_h: usize,
    grid_w: usize,
    dim: usize,
    data: Vec<f32>,
}

impl PatchFeatureMap {
    pub fn new(grid_h: usize, grid_w: usize, dim: usize, data: Vec<f32>) -> Result<Self, FeatError> {
        if grid_h == 0 || grid_w == 0 || dim == 0 {
            return Err(FeatError::Invalid(format!(
                "grid and dim must be positive, got {grid_h}x{grid_w}x{dim}"
            )));
        }
        let expected = grid_h * grid_w * dim;
        if data.len() != expected {
            return Err(FeatError::Invalid(format!(
                "expected {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(FeatError::Invalid(format!("non-finite value at index {i}")));
        }
        Ok(Self {
            grid_h,
            grid_w,
            dim,
            data,
        })
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Feature of flat cell index `row * grid_w + col`.
    pub fn cell(&self, idx: usize) -> &[f32] {
        &self.data[idx * self.dim..(idx + 1) * self.dim]
    }

    pub fn cells(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn payload_bytes(&self) -> usize {
        self.data.len() * 4
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(HEADER_LEN + self.payload_bytes());
        buf.extend_from_slice(FEATURE_MAGIC);
        for v in [self.grid_h, self.grid_w, self.dim] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        buf.extend_from_slice(&DTYPE_F32.to_le_bytes());
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self, FeatError> {
        let header = parse_header(bytes, origin)?;
        let n = header.grid_h * header.grid_w * header.dim;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() < n * 4 {
            return Err(FeatError::Format {
                path: origin.to_string(),
                offset: bytes.len() as u64,
                msg: format!("truncated payload: expected {} bytes, found {}", n * 4, payload.len()),
            });
        }
        if payload.len() > n * 4 {
            return Err(FeatError::Format {
                path: origin.to_string(),
                offset: (HEADER_LEN + n * 4) as u64,
                msg: format!("{} trailing bytes", payload.len() - n * 4),
            });
        }
        let mut data = Vec::with_capacity(n);
        for (i, chunk) in payload.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            if !v.is_finite() {
                return Err(FeatError::Format {
                    path: origin.to_string(),
                    offset: (HEADER_LEN + i * 4) as u64,
                    msg: "non-finite value".into(),
                });
            }
            data.push(v);
        }
        Ok(Self {
            grid_h: header.grid_h,
            grid_w: header.grid_w,
            dim: header.dim,
            data,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureHeader {
    pub grid_h: usize,
    pub grid_w: usize,
    pub dim: usize,
}

impl FeatureHeader {
    pub fn num_cells(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

fn parse_header(bytes: &[u8], origin: &str) -> Result<FeatureHeader, FeatError> {
    let fmt = |offset: u64, msg: String| FeatError::Format {
        path: origin.to_string(),
        offset,
        msg,
    };
    if bytes.len() < 4 || &bytes[..4] != FEATURE_MAGIC {
        return Err(fmt(0, "bad magic, expected PFV1".into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(fmt(bytes.len() as u64, "truncated header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let (grid_h, grid_w, dim, dtype) = (word(0), word(1), word(2), word(3));
    if dtype != DTYPE_F32 {
        return Err(fmt(16, format!("unsupported dtype_code {dtype}")));
    }
    for (i, v) in [grid_h, grid_w, dim].iter().enumerate() {
        if *v == 0 {
            return Err(fmt(4 + 4 * i as u64, "zero-sized dimension".into()));
        }
    }
    Ok(FeatureHeader {
        grid_h: grid_h as usize,
        grid_w: grid_w as usize,
        dim: dim as usize,
    })
}

pub fn write_feature_file(map: &PatchFeatureMap, path: &Path) -> Result<(), FeatError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(path))?;
    }
    let mut f = io::BufWriter::new(fs::File::create(path).map_err(io_err(path))?);
    f.write_all(&map.to_bytes()).map_err(io_err(path))?;
    f.flush().map_err(io_err(path))
}

pub fn read_feature_file(path: &Path) -> Result<PatchFeatureMap, FeatError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    PatchFeatureMap::from_bytes(&bytes, &path.display().to_string())
}

/// Reads only the 20-byte header.
pub fn read_feature_header(path: &Path) -> Result<FeatureHeader, FeatError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut buf = Vec::with_capacity(HEADER_LEN);
    f.take(HEADER_LEN as u64)
        .read_to_end(&mut buf)
        .map_err(io_err(path))?;
    parse_header(&buf, &path.display().to_string())
}

/// One line of the `path<TAB>grid_h<TAB>grid_w<TAB>dim<TAB>class_file` sidecar.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureIndexEntry {
    pub path: String,
    pub grid_h: usize,
    pub grid_w: usize,
    pub dim: usize,
    pub class_file: String,
}

pub fn write_feature_index(entries: &[FeatureIndexEntry], path: &Path) -> Result<(), FeatError> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            e.path, e.grid_h, e.grid_w, e.dim, e.class_file
        ));
    }
    fs::write(path, out).map_err(io_err(path))
}

pub fn read_feature_index(path: &Path) -> Result<Vec<FeatureIndexEntry>, FeatError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut entries = Vec::new();
    for (i, line) in io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let bad = || FeatError::Invalid(format!("{}:{}: malformed index line", path.display(), i + 1));
        if cols.len() != 5 {
            return Err(bad());
        }
        entries.push(FeatureIndexEntry {
            path: cols[0].to_string(),
            grid_h: cols[1].parse().map_err(|_| bad())?,
            grid_w: cols[2].parse().map_err(|_| bad())?,
            dim: cols[3].parse().map_err(|_| bad())?,
            class_file: cols[4].to_string(),
        });
    }
    Ok(entries)
}

/// Per-pixel class ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelMask {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl PixelMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self, FeatError> {
        if labels.len() != height * width {
            return Err(FeatError::Invalid(format!(
                "mask {height}x{width} needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        Self {
            height,
            width,
            labels: vec![class; height * width],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.width + col]
    }

    pub fn max_label(&self) -> u8 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Loads an 8-bit mask image; luma value is the class id.
    pub fn load(path: &Path) -> Result<Self, FeatError> {
        let img = image::open(path)
            .map_err(|source| FeatError::Image {
                path: path.display().to_string(),
                source,
            })?
            .into_luma8();
        let (w, h) = img.dimensions();
        Ok(Self {
            height: h as usize,
            width: w as usize,
            labels: img.into_raw(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), FeatError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(path))?;
        }
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, self.labels.clone())
            .expect("mask buffer matches its shape");
        img.save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| FeatError::Image {
                path: path.display().to_string(),
                source,
            })
    }
}

/// Patch-grid class ids, same shape as the paired feature map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelGrid {
    pub grid_h: usize,
    pub grid_w: usize,
    pub labels: Vec<u8>,
}

/// Pixel range `[start, end)` covered by cell `i` of `cells` along an axis of
/// `len` pixels. Blocks differ in size by at most one pixel.
pub fn block_range(i: usize, cells: usize, len: usize) -> (usize, usize) {
    (i * len / cells, (i + 1) * len / cells)
}

/// Majority class per grid cell; ties go to the smaller class id.
pub fn downsample_mask(mask: &PixelMask, grid_h: usize, grid_w: usize) -> Result<LabelGrid, FeatError> {
    if grid_h == 0 || grid_w == 0 || grid_h > mask.height || grid_w > mask.width {
        return Err(FeatError::Domain(format!(
            "grid {grid_h}x{grid_w} does not fit mask {}x{}",
            mask.height, mask.width
        )));
    }
    let mut labels = Vec::with_capacity(grid_h * grid_w);
    let mut hist = [0u32; 256];
    for gr in 0..grid_h {
        let (r0, r1) = block_range(gr, grid_h, mask.height);
        for gc in 0..grid_w {
            let (c0, c1) = block_range(gc, grid_w, mask.width);
            hist.fill(0);
            for r in r0..r1 {
                for &l in &mask.labels[r * mask.width + c0..r * mask.width + c1] {
                    hist[l as usize] += 1;
                }
            }
            // max_by_key returns the last maximum, so scan in reverse.
            let best = (0..256usize).rev().max_by_key(|&c| hist[c]).unwrap();
            labels.push(best as u8);
        }
    }
    Ok(LabelGrid {
        grid_h,
        grid_w,
        labels,
    })
}

/// Per-cell class probabilities on a patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionGrid {
    pub grid_h: usize,
    pub grid_w: usize,
    pub num_classes: usize,
    /// `grid_h·grid_w·num_classes`, (row, col, class) order.
    pub probs: Vec<f64>,
}

impl DistributionGrid {
    pub fn cell(&self, idx: usize) -> &[f64] {
        &self.probs[idx * self.num_classes..(idx + 1) * self.num_classes]
    }

    /// Argmax per cell, smallest class id on ties.
    pub fn argmax(&self) -> LabelGrid {
        LabelGrid {
            grid_h: self.grid_h,
            grid_w: self.grid_w,
            labels: self.probs.chunks_exact(self.num_classes).map(argmax).collect(),
        }
    }

    /// `PFV1` map with `dim = num_classes`, for distribution dumps.
    pub fn to_feature_map(&self) -> Result<PatchFeatureMap, FeatError> {
        PatchFeatureMap::new(
            self.grid_h,
            self.grid_w,
            self.num_classes,
            self.probs.iter().map(|&p| p as f32).collect(),
        )
    }
}

pub(crate) fn argmax(values: &[f64]) -> u8 {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best as u8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Upsample {
    #[default]
    Bilinear,
    Nearest,
}

/// Source sample positions for bilinear resize with half-pixel centers:
/// `(lower index, upper index, upper weight)` for every output coordinate.
fn bilinear_taps(out: usize, cells: usize) -> Vec<(usize, usize, f64)> {
    let scale = cells as f64 / out as f64;
    (0..out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(cells - 1);
            let hi = (lo + 1).min(cells - 1);
            let w = if hi == lo { 0.0 } else { src - lo as f64 };
            (lo, hi, w)
        })
        .collect()
}

fn nearest_taps(out: usize, cells: usize) -> Vec<(usize, usize, f64)> {
    (0..out)
        .map(|o| {
            let c = ((o * cells) / out).min(cells - 1);
            (c, c, 0.0)
        })
        .collect()
}

/// Resizes class distributions to pixel resolution and takes the per-pixel
/// argmax (smallest class id on ties).
pub fn upsample_distribution(
    dist: &DistributionGrid,
    out_h: usize,
    out_w: usize,
    mode: Upsample,
) -> PixelMask {
    let taps = |out, cells| match mode {
        Upsample::Bilinear => bilinear_taps(out, cells),
        Upsample::Nearest => nearest_taps(out, cells),
    };
    let rows = taps(out_h, dist.grid_h);
    let cols = taps(out_w, dist.grid_w);
    let c = dist.num_classes;
    let mut labels = Vec::with_capacity(out_h * out_w);
    let mut acc = vec![0.0f64; c];
    for &(r0, r1, wr) in &rows {
        for &(c0, c1, wc) in &cols {
            let corners = [
                (r0 * dist.grid_w + c0, (1.0 - wr) * (1.0 - wc)),
                (r0 * dist.grid_w + c1, (1.0 - wr) * wc),
                (r1 * dist.grid_w + c0, wr * (1.0 - wc)),
                (r1 * dist.grid_w + c1, wr * wc),
            ];
            acc.fill(0.0);
            for (cell, w) in corners {
                if w == 0.0 {
                    continue;
                }
                for (a, p) in acc.iter_mut().zip(dist.cell(cell)) {
                    *a += w * p;
                }
            }
            labels.push(argmax(&acc));
        }
    }
    PixelMask {
        height: out_h,
        width: out_w,
        labels,
    }
}

/// Feature file location for a dataset-relative image path: same relative
/// path under `feature_root`, extension replaced by `pfv`.
pub fn feature_path_for(feature_root: &Path, image_rel: &str) -> PathBuf {
    feature_root.join(image_rel).with_extension("pfv")
}
