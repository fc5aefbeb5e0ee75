//! Memory bank of labelled patch features with exact cosine top-k search.
//!
//! Features are unit-normalized on insertion and queries on entry to
//! [`MemoryBank::search`], so similarity is a plain dot product. Entries are
//! split into contiguous shards; each shard yields its own top-k and the
//! shard lists are merged. Ordering is similarity descending, then entry
//! index ascending, which makes the merged result independent of the shard
//! count.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fs;
use std::io::{self, BufRead, BufWriter, Read, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binning::SubsetManifest;
use crate::featstore::{self, FeatError, PixelMask};

pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_K: usize = 30;
pub const BANK_MAGIC: &[u8; 4] = b"MBK1";

#[derive(Debug, Error)]
pub enum BankError {
    #[error("no candidate patches for the requested reference bins")]
    Empty,
    #[error("feature dimension mismatch: expected {expected}, found {found} in {path}")]
    DimMismatch {
        expected: usize,
        found: usize,
        path: String,
    },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("query {index} has zero norm")]
    ZeroQuery { index: usize },
    #[error(transparent)]
    Feat(#[from] FeatError),
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> BankError + '_ {
    move |source| BankError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Image an entry was taken from.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceImage {
    pub instance_id: String,
    pub bin_deg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Provenance {
    /// Index into [`MemoryBank::images`].
    pub image: u32,
    /// Flat patch-grid cell.
    pub cell: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub similarity: f64,
}

/// Similarity descending, then index ascending.
fn rank(a: &Neighbor, b: &Neighbor) -> Ordering {
    b.similarity
        .total_cmp(&a.similarity)
        .then(a.index.cmp(&b.index))
}

pub type NeighborSet = Vec<Neighbor>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingPolicy {
    /// Uniform without replacement over all candidate patches.
    #[default]
    Uniform,
    /// Equal quota per label, leftovers spread over labels with spare candidates.
    ClassBalanced,
}

#[derive(Debug, Clone)]
pub struct MemoryBank {
    dim: usize,
    capacity: usize,
    features: Vec<f32>,
    labels: Vec<u8>,
    provenance: Vec<Provenance>,
    images: Vec<SourceImage>,
    shards: Vec<Range<usize>>,
}

pub(crate) fn normalize(v: &[f32]) -> Option<Vec<f32>> {
    let norm = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    Some(v.iter().map(|&x| (x as f64 / norm) as f32).collect())
}

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        acc += *x as f64 * *y as f64;
    }
    acc
}

impl MemoryBank {
    /// Builds a single-shard bank from raw features (normalized here).
    pub fn from_entries(
        dim: usize,
        capacity: usize,
        features: &[f32],
        labels: Vec<u8>,
        provenance: Vec<Provenance>,
        images: Vec<SourceImage>,
    ) -> Result<Self, BankError> {
        if dim == 0 || capacity == 0 {
            return Err(BankError::Domain("dim and capacity must be positive".into()));
        }
        if features.len() != labels.len() * dim || provenance.len() != labels.len() {
            return Err(BankError::Domain("entry arrays disagree in length".into()));
        }
        if labels.is_empty() {
            return Err(BankError::Empty);
        }
        if labels.len() > capacity {
            return Err(BankError::Domain(format!(
                "{} entries exceed capacity {capacity}",
                labels.len()
            )));
        }
        let mut normed = Vec::with_capacity(features.len());
        for (i, f) in features.chunks_exact(dim).enumerate() {
            let n = normalize(f)
                .ok_or_else(|| BankError::Domain(format!("entry {i} has zero norm")))?;
            normed.extend_from_slice(&n);
        }
        let n = labels.len();
        Ok(Self {
            dim,
            capacity,
            features: normed,
            labels,
            provenance,
            images,
            shards: vec![0..n],
        })
    }

    /// Unlabelled convenience constructor: label 0, no provenance images.
    pub fn from_vectors(dim: usize, features: &[f32]) -> Result<Self, BankError> {
        let n = features.len() / dim.max(1);
        Self::from_entries(
            dim,
            n.max(1),
            features,
            vec![0; n],
            (0..n as u32).map(|cell| Provenance { image: 0, cell }).collect(),
            vec![],
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn feature(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn images(&self) -> &[SourceImage] {
        &self.images
    }

    pub fn shards(&self) -> &[Range<usize>] {
        &self.shards
    }

    /// Repartitions entries into `n_shards` contiguous ranges whose sizes
    /// differ by at most one.
    pub fn shard(mut self, n_shards: usize) -> Result<Self, BankError> {
        let n = self.len();
        if n_shards == 0 || n_shards > n {
            return Err(BankError::Domain(format!(
                "shard count {n_shards} outside [1, {n}]"
            )));
        }
        let (base, extra) = (n / n_shards, n % n_shards);
        let mut start = 0;
        self.shards = (0..n_shards)
            .map(|s| {
                let len = base + usize::from(s < extra);
                let r = start..start + len;
                start += len;
                r
            })
            .collect();
        Ok(self)
    }

    fn shard_top_k(&self, range: Range<usize>, query: &[f32], k: usize) -> Vec<Neighbor> {
        let mut scored: Vec<Neighbor> = range
            .map(|i| Neighbor {
                index: i,
                similarity: dot(self.feature(i), query),
            })
            .collect();
        if scored.len() > k {
            scored.select_nth_unstable_by(k - 1, rank);
            scored.truncate(k);
        }
        scored.sort_unstable_by(rank);
        scored
    }

    /// Exact top-k for one query that is already unit length.
    pub fn search_normalized(&self, query: &[f32], k: usize) -> NeighborSet {
        let mut merged: Vec<Neighbor> = self
            .shards
            .iter()
            .flat_map(|r| self.shard_top_k(r.clone(), query, k))
            .collect();
        merged.sort_unstable_by(rank);
        merged.truncate(k);
        merged
    }

    /// Exact top-k cosine neighbors for each row of `queries` (flat, `dim`
    /// values per query).
    pub fn search(&self, queries: &[f32], k: usize) -> Result<Vec<NeighborSet>, BankError> {
        if k == 0 || k > self.len() {
            return Err(BankError::Domain(format!(
                "k = {k} outside [1, {}]",
                self.len()
            )));
        }
        if !queries.len().is_multiple_of(self.dim) {
            return Err(BankError::DimMismatch {
                expected: self.dim,
                found: queries.len() % self.dim,
                path: "<query buffer>".into(),
            });
        }
        let normed: Vec<Vec<f32>> = queries
            .chunks_exact(self.dim)
            .enumerate()
            .map(|(index, q)| normalize(q).ok_or(BankError::ZeroQuery { index }))
            .collect::<Result<_, _>>()?;
        Ok(normed
            .par_iter()
            .map(|q| self.search_normalized(q, k))
            .collect())
    }

    /// Writes `MBK1` to `path` and provenance to `<path>.prov.tsv`.
    pub fn save_snapshot(&self, path: &Path) -> Result<(), BankError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(path))?;
        }
        let mut w = BufWriter::new(fs::File::create(path).map_err(io_err(path))?);
        w.write_all(BANK_MAGIC).map_err(io_err(path))?;
        w.write_all(&(self.dim as u32).to_le_bytes()).map_err(io_err(path))?;
        w.write_all(&(self.len() as u64).to_le_bytes()).map_err(io_err(path))?;
        for i in 0..self.len() {
            w.write_all(&(self.labels[i] as u16).to_le_bytes()).map_err(io_err(path))?;
            for v in self.feature(i) {
                w.write_all(&v.to_le_bytes()).map_err(io_err(path))?;
            }
        }
        w.flush().map_err(io_err(path))?;

        let prov = provenance_path(path);
        let mut out = String::new();
        for p in &self.provenance {
            let img = self.images.get(p.image as usize);
            out.push_str(&format!(
                "{}\t{}\t{}\n",
                img.map_or("", |s| s.instance_id.as_str()),
                img.map_or(0.0, |s| s.bin_deg),
                p.cell
            ));
        }
        fs::write(&prov, out).map_err(io_err(&prov))
    }

    pub fn load_snapshot(path: &Path) -> Result<Self, BankError> {
        let fmt = |msg: String| BankError::Format {
            path: path.display().to_string(),
            msg,
        };
        let mut r = io::BufReader::new(fs::File::open(path).map_err(io_err(path))?);
        let mut head = [0u8; 16];
        r.read_exact(&mut head).map_err(|_| fmt("truncated header".into()))?;
        if &head[..4] != BANK_MAGIC {
            return Err(fmt("bad magic, expected MBK1".into()));
        }
        let dim = u32::from_le_bytes(head[4..8].try_into().unwrap()) as usize;
        let n = u64::from_le_bytes(head[8..16].try_into().unwrap()) as usize;
        if dim == 0 || n == 0 {
            return Err(fmt("empty bank".into()));
        }
        let mut labels = Vec::with_capacity(n);
        let mut features = Vec::with_capacity(n * dim);
        let mut rec = vec![0u8; 2 + 4 * dim];
        for i in 0..n {
            r.read_exact(&mut rec)
                .map_err(|_| fmt(format!("truncated at entry {i}")))?;
            let label = u16::from_le_bytes([rec[0], rec[1]]);
            labels.push(u8::try_from(label).map_err(|_| fmt(format!("label {label} exceeds 255")))?);
            features.extend(
                rec[2..]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])),
            );
        }

        let mut images: Vec<SourceImage> = Vec::new();
        let mut provenance = Vec::with_capacity(n);
        let prov = provenance_path(path);
        if prov.is_file() {
            let f = fs::File::open(&prov).map_err(io_err(&prov))?;
            for line in io::BufReader::new(f).lines() {
                let line = line.map_err(io_err(&prov))?;
                let cols: Vec<&str> = line.split('\t').collect();
                if cols.len() != 3 {
                    return Err(fmt(format!("malformed provenance line {line:?}")));
                }
                let src = SourceImage {
                    instance_id: cols[0].to_string(),
                    bin_deg: cols[1].parse().map_err(|_| fmt("bad provenance bin".into()))?,
                };
                let image = match images.last() {
                    Some(last) if *last == src => images.len() - 1,
                    _ => {
                        images.push(src);
                        images.len() - 1
                    }
                };
                provenance.push(Provenance {
                    image: image as u32,
                    cell: cols[2].parse().map_err(|_| fmt("bad provenance cell".into()))?,
                });
            }
        } else {
            provenance = (0..n as u32).map(|cell| Provenance { image: 0, cell }).collect();
        }
        if provenance.len() != n {
            return Err(fmt("provenance length differs from entry count".into()));
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(fmt("non-finite feature value".into()));
        }
        // Stored features are already unit length; renormalizing would
        // perturb their last bits.
        Ok(Self {
            dim,
            capacity: n,
            features,
            labels,
            provenance,
            images,
            shards: vec![0..n],
        })
    }
}

fn provenance_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".prov.tsv");
    PathBuf::from(s)
}

/// Where feature files and masks for a manifest live.
#[derive(Debug, Clone)]
pub struct BankSource {
    /// Root the manifest's image and mask paths are relative to.
    pub data_root: PathBuf,
    /// Root holding one `.pfv` per manifest image, mirroring its path.
    pub feature_root: PathBuf,
}

impl BankSource {
    pub fn feature_path(&self, image_rel: &str) -> PathBuf {
        featstore::feature_path_for(&self.feature_root, image_rel)
    }

    pub fn mask_path(&self, mask_rel: &str) -> PathBuf {
        self.data_root.join(mask_rel)
    }
}

#[derive(Debug, Clone)]
pub struct BankParams {
    pub capacity: usize,
    pub seed: u64,
    pub policy: SamplingPolicy,
}

impl Default for BankParams {
    fn default() -> Self {
        Self {
            capacity: 1_024_000,
            seed: DEFAULT_SEED,
            policy: SamplingPolicy::Uniform,
        }
    }
}

struct CandidateImage {
    source: SourceImage,
    feature_path: PathBuf,
    labels: Vec<u8>,
}

/// Picks `capacity` sorted indices out of `labels.len()` candidates.
fn sample_indices(labels: &[u8], capacity: usize, seed: u64, policy: SamplingPolicy) -> Vec<usize> {
    let n = labels.len();
    if n <= capacity {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = match policy {
        SamplingPolicy::Uniform => rand::seq::index::sample(&mut rng, n, capacity).into_vec(),
        SamplingPolicy::ClassBalanced => {
            let classes: BTreeSet<u8> = labels.iter().copied().collect();
            let mut pools: Vec<Vec<usize>> = classes
                .iter()
                .map(|&c| (0..n).filter(|&i| labels[i] == c).collect())
                .collect();
            // Water-fill: each round splits the remaining budget evenly over
            // classes that still have unassigned candidates.
            let mut quota = vec![0usize; pools.len()];
            let mut left = capacity;
            while left > 0 {
                let open: Vec<usize> = (0..pools.len()).filter(|&c| quota[c] < pools[c].len()).collect();
                let share = (left / open.len()).max(1);
                for &c in &open {
                    let take = share.min(pools[c].len() - quota[c]).min(left);
                    quota[c] += take;
                    left -= take;
                    if left == 0 {
                        break;
                    }
                }
            }
            let mut out = Vec::with_capacity(capacity);
            for (pool, q) in pools.iter_mut().zip(quota) {
                let idx = rand::seq::index::sample(&mut rng, pool.len(), q);
                out.extend(idx.into_iter().map(|i| pool[i]));
            }
            out
        }
    };
    picked.sort_unstable();
    picked
}

/// Collects every patch of every manifest image whose bin is in
/// `reference_bins`, labels it from the downsampled mask, and subsamples to
/// capacity with a seeded RNG.
pub fn build_bank(
    manifest: &SubsetManifest,
    source: &BankSource,
    reference_bins: &[f64],
    params: &BankParams,
) -> Result<MemoryBank, BankError> {
    if params.capacity == 0 {
        return Err(BankError::Domain("capacity must be positive".into()));
    }
    for b in reference_bins {
        if !manifest.bins.contains(b) {
            return Err(BankError::Domain(format!("reference bin {b} not in manifest")));
        }
    }

    let frames: Vec<_> = manifest
        .frames()
        .filter(|(_, _, f)| reference_bins.contains(&f.bin_deg))
        .collect();

    // Pass 1: headers and labels only.
    let candidates: Vec<(CandidateImage, usize)> = frames
        .par_iter()
        .map(|(cat, inst, f)| {
            let feature_path = source.feature_path(&f.image);
            let header = featstore::read_feature_header(&feature_path)?;
            let mask = PixelMask::load(&source.mask_path(&f.mask))?;
            let grid = featstore::downsample_mask(&mask, header.grid_h, header.grid_w)?;
            Ok((
                CandidateImage {
                    source: SourceImage {
                        instance_id: format!("{}/{}", cat.class_number, inst.instance_id),
                        bin_deg: f.bin_deg,
                    },
                    feature_path,
                    labels: grid.labels,
                },
                header.dim,
            ))
        })
        .collect::<Result<_, BankError>>()?;

    let Some((_, dim)) = candidates.first() else {
        return Err(BankError::Empty);
    };
    let dim = *dim;
    if let Some((c, d)) = candidates.iter().find(|(_, d)| *d != dim) {
        return Err(BankError::DimMismatch {
            expected: dim,
            found: *d,
            path: c.feature_path.display().to_string(),
        });
    }

    let all_labels: Vec<u8> = candidates.iter().flat_map(|(c, _)| c.labels.iter().copied()).collect();
    if all_labels.is_empty() {
        return Err(BankError::Empty);
    }
    let keep = sample_indices(&all_labels, params.capacity, params.seed, params.policy);

    // Pass 2: load features for images that contribute at least one entry.
    let mut per_image: Vec<Vec<u32>> = vec![Vec::new(); candidates.len()];
    let mut offsets = Vec::with_capacity(candidates.len());
    let mut acc = 0;
    for (c, _) in &candidates {
        offsets.push(acc);
        acc += c.labels.len();
    }
    let mut img = 0;
    for &k in &keep {
        while img + 1 < offsets.len() && offsets[img + 1] <= k {
            img += 1;
        }
        per_image[img].push((k - offsets[img]) as u32);
    }

    let loaded: Vec<Vec<f32>> = candidates
        .par_iter()
        .zip(&per_image)
        .map(|((c, _), cells)| {
            if cells.is_empty() {
                return Ok(Vec::new());
            }
            let map = featstore::read_feature_file(&c.feature_path)?;
            let mut out = Vec::with_capacity(cells.len() * dim);
            for &cell in cells {
                out.extend_from_slice(map.cell(cell as usize));
            }
            Ok(out)
        })
        .collect::<Result<_, BankError>>()?;

    let mut features = Vec::with_capacity(keep.len() * dim);
    let mut labels = Vec::with_capacity(keep.len());
    let mut provenance = Vec::with_capacity(keep.len());
    for (i, ((c, _), cells)) in candidates.iter().zip(&per_image).enumerate() {
        features.extend_from_slice(&loaded[i]);
        for &cell in cells {
            labels.push(c.labels[cell as usize]);
            provenance.push(Provenance {
                image: i as u32,
                cell,
            });
        }
    }
    let images = candidates.into_iter().map(|(c, _)| c.source).collect();
    MemoryBank::from_entries(dim, params.capacity, &features, labels, provenance, images)
}
