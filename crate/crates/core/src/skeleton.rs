//! Folding-graph data model: typed branches carrying voxel lists on a fixed
//! crop grid, plus rasterization, point-cloud conversion and the on-disk
//! crop/corpus formats.
//!
//! Volumes are stored row-major with `x` as the slowest axis, so the flat
//! index order of a [`DenseVolume`] is the lexicographic `(x, y, z)` order.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grid extent of a crop, serialized as `[x, y, z]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 3]", into = "[usize; 3]")]
pub struct Dims {
    pub x: usize,
    pub y: usize,
    pub z: usize,
}

impl Dims {
    /// Cingulate crop geometry at 2 mm resolution.
    pub const CROP: Dims = Dims {
        x: 17,
        y: 40,
        z: 38,
    };

    pub const fn new(x: usize, y: usize, z: usize) -> Self {
        Dims { x, y, z }
    }

    pub fn len(&self) -> usize {
        self.x * self.y * self.z
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.x, self.y, self.z]
    }

    pub fn contains(&self, c: VoxelCoord) -> bool {
        (c.x as usize) < self.x && (c.y as usize) < self.y && (c.z as usize) < self.z
    }

    /// Flat row-major index; the caller guarantees `contains(c)`.
    #[inline]
    pub fn index(&self, c: VoxelCoord) -> usize {
        (c.x as usize * self.y + c.y as usize) * self.z + c.z as usize
    }

    #[inline]
    pub fn coord(&self, index: usize) -> VoxelCoord {
        let z = index % self.z;
        let rest = index / self.z;
        VoxelCoord::new((rest / self.y) as u32, (rest % self.y) as u32, z as u32)
    }
}

impl Default for Dims {
    fn default() -> Self {
        Dims::CROP
    }
}

impl From<[usize; 3]> for Dims {
    fn from(a: [usize; 3]) -> Self {
        Dims::new(a[0], a[1], a[2])
    }
}

impl From<Dims> for [usize; 3] {
    fn from(d: Dims) -> Self {
        d.as_array()
    }
}

/// Integer grid index, serialized as `[x, y, z]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "[u32; 3]", into = "[u32; 3]")]
pub struct VoxelCoord {
    pub x: u32,
    pub y: u32,
    pub z: u32,
}

impl VoxelCoord {
    pub const fn new(x: u32, y: u32, z: u32) -> Self {
        VoxelCoord { x, y, z }
    }
}

impl From<[u32; 3]> for VoxelCoord {
    fn from(a: [u32; 3]) -> Self {
        VoxelCoord::new(a[0], a[1], a[2])
    }
}

impl From<VoxelCoord> for [u32; 3] {
    fn from(c: VoxelCoord) -> Self {
        [c.x, c.y, c.z]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchKind {
    SimpleSurface,
    JunctionLine,
    BottomLine,
}

/// One node of the folding graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub id: u32,
    pub kind: BranchKind,
    pub voxels: Vec<VoxelCoord>,
    pub neighbors: Vec<u32>,
}

impl Branch {
    pub fn is_bottom(&self) -> bool {
        self.kind == BranchKind::BottomLine
    }
}

/// A folding-graph fragment on a fixed crop grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonCrop {
    pub subject_id: String,
    pub dims: Dims,
    pub spacing_mm: f64,
    /// Double-parallel pattern presence, when known.
    pub label: Option<u8>,
    pub site: Option<String>,
    pub gender: Option<String>,
    pub branches: Vec<Branch>,
}

impl SkeletonCrop {
    pub fn new(subject_id: impl Into<String>, dims: Dims) -> Self {
        SkeletonCrop {
            subject_id: subject_id.into(),
            dims,
            spacing_mm: 2.0,
            label: None,
            site: None,
            gender: None,
            branches: Vec::new(),
        }
    }

    pub fn voxel_count(&self) -> usize {
        self.branches.iter().map(|b| b.voxels.len()).sum()
    }

    pub fn bottom_voxel_count(&self) -> usize {
        self.branches
            .iter()
            .filter(|b| b.is_bottom())
            .map(|b| b.voxels.len())
            .sum()
    }

    /// Checks every crop invariant: positive unique ids, non-empty duplicate-free
    /// in-bounds voxel lists, disjoint branches, symmetric adjacency and a
    /// binary label.
    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() {
            return Err(Error::Validation(format!(
                "empty dims {:?}",
                self.dims.as_array()
            )));
        }
        if !(self.spacing_mm.is_finite() && self.spacing_mm > 0.0) {
            return Err(Error::Validation(format!(
                "spacing_mm must be positive, got {}",
                self.spacing_mm
            )));
        }
        if let Some(l) = self.label {
            if l > 1 {
                return Err(Error::Validation(format!("label must be 0 or 1, got {l}")));
            }
        }
        let mut ids = HashSet::new();
        for b in &self.branches {
            if b.id == 0 {
                return Err(Error::Integrity(
                    "branch id 0 is reserved for background".into(),
                ));
            }
            if !ids.insert(b.id) {
                return Err(Error::Integrity(format!("duplicate branch id {}", b.id)));
            }
            if b.voxels.is_empty() {
                return Err(Error::Integrity(format!("branch {} has no voxels", b.id)));
            }
        }
        let mut owner = vec![0u32; self.dims.len()];
        for b in &self.branches {
            for &v in &b.voxels {
                if !self.dims.contains(v) {
                    return Err(Error::Validation(format!(
                        "voxel ({}, {}, {}) of branch {} lies outside dims {:?}",
                        v.x,
                        v.y,
                        v.z,
                        b.id,
                        self.dims.as_array()
                    )));
                }
                let slot = &mut owner[self.dims.index(v)];
                if *slot == b.id {
                    return Err(Error::Integrity(format!(
                        "branch {} lists voxel ({}, {}, {}) twice",
                        b.id, v.x, v.y, v.z
                    )));
                }
                if *slot != 0 {
                    return Err(Error::Integrity(format!(
                        "voxel ({}, {}, {}) belongs to branches {} and {}",
                        v.x, v.y, v.z, *slot, b.id
                    )));
                }
                *slot = b.id;
            }
        }
        let adjacency: BTreeMap<u32, &Vec<u32>> =
            self.branches.iter().map(|b| (b.id, &b.neighbors)).collect();
        for b in &self.branches {
            for n in b.neighbors.iter() {
                match adjacency.get(n) {
                    Some(back) if back.contains(&b.id) => {}
                    Some(_) => {
                        return Err(Error::Integrity(format!(
                            "adjacency not symmetric: {} lists {} but not the reverse",
                            b.id, n
                        )))
                    }
                    None => {
                        return Err(Error::Integrity(format!(
                            "branch {} lists unknown neighbor {}",
                            b.id, n
                        )))
                    }
                }
            }
        }
        Ok(())
    }
}

/// Dense integer grid: 0 is background, positive values are branch ids (or 1
/// once binarized).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenseVolume {
    pub dims: Dims,
    pub values: Vec<u32>,
}

impl DenseVolume {
    pub fn zeros(dims: Dims) -> Self {
        DenseVolume {
            dims,
            values: vec![0; dims.len()],
        }
    }

    pub fn filled(dims: Dims, value: u32) -> Self {
        DenseVolume {
            dims,
            values: vec![value; dims.len()],
        }
    }

    pub fn get(&self, c: VoxelCoord) -> u32 {
        self.values[self.dims.index(c)]
    }

    pub fn set(&mut self, c: VoxelCoord, value: u32) {
        let i = self.dims.index(c);
        self.values[i] = value;
    }

    pub fn nonzero_count(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v <= 1)
    }

    /// Every voxel set to 1 wherever it was non-zero.
    pub fn binarized(&self) -> DenseVolume {
        DenseVolume {
            dims: self.dims,
            values: self.values.iter().map(|&v| u32::from(v > 0)).collect(),
        }
    }

    /// Values as reals, ready to be fed to the backbone.
    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| f64::from(v)).collect()
    }
}

/// Coordinates of all non-zero voxels of a volume.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PointCloud {
    pub points: Vec<VoxelCoord>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Binary volume with a 1 at every point.
    pub fn scatter(&self, dims: Dims) -> Result<DenseVolume> {
        let mut vol = DenseVolume::zeros(dims);
        for &p in &self.points {
            if !dims.contains(p) {
                return Err(Error::Validation(format!(
                    "point ({}, {}, {}) outside dims {:?}",
                    p.x,
                    p.y,
                    p.z,
                    dims.as_array()
                )));
            }
            vol.set(p, 1);
        }
        Ok(vol)
    }
}

/// Paints each branch's id into a dense grid.
pub fn rasterize(crop: &SkeletonCrop) -> Result<DenseVolume> {
    let mut vol = DenseVolume::zeros(crop.dims);
    for b in &crop.branches {
        for &v in &b.voxels {
            if !crop.dims.contains(v) {
                return Err(Error::Validation(format!(
                    "voxel ({}, {}, {}) of branch {} outside dims",
                    v.x, v.y, v.z, b.id
                )));
            }
            let slot = &mut vol.values[crop.dims.index(v)];
            if *slot != 0 {
                return Err(Error::Integrity(format!(
                    "voxel ({}, {}, {}) claimed by branches {} and {}",
                    v.x, v.y, v.z, *slot, b.id
                )));
            }
            *slot = b.id;
        }
    }
    Ok(vol)
}

/// Binary mask of the fold-bottom voxels.
pub fn bottom_mask(crop: &SkeletonCrop) -> DenseVolume {
    let mut mask = DenseVolume::zeros(crop.dims);
    for b in crop.branches.iter().filter(|b| b.is_bottom()) {
        for &v in &b.voxels {
            if crop.dims.contains(v) {
                mask.set(v, 1);
            }
        }
    }
    mask
}

/// Non-zero voxel coordinates in lexicographic `(x, y, z)` order.
pub fn to_point_cloud(volume: &DenseVolume) -> PointCloud {
    let points = volume
        .values
        .iter()
        .enumerate()
        .filter(|(_, &v)| v != 0)
        .map(|(i, _)| volume.dims.coord(i))
        .collect();
    PointCloud { points }
}

/// Fraction of non-zero voxels.
pub fn sparsity(volume: &DenseVolume) -> f64 {
    if volume.dims.is_empty() {
        return 0.0;
    }
    volume.nonzero_count() as f64 / volume.dims.len() as f64
}

pub fn crop_to_json(crop: &SkeletonCrop) -> Result<String> {
    Ok(serde_json::to_string(crop)?)
}

/// Parses and validates a crop; `path` is only used for diagnostics.
pub fn crop_from_json(text: &str, path: &Path) -> Result<SkeletonCrop> {
    let crop: SkeletonCrop = serde_json::from_str(text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    crop.validate()?;
    Ok(crop)
}

pub fn save_crop(crop: &SkeletonCrop, path: &Path) -> Result<()> {
    fs::write(path, crop_to_json(crop)?)?;
    Ok(())
}

pub fn load_crop(path: &Path) -> Result<SkeletonCrop> {
    let text = fs::read_to_string(path)?;
    crop_from_json(&text, path)
}

/// One row of a corpus `manifest.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub subject_id: String,
    /// Crop file, relative to the corpus directory.
    pub path: String,
    pub label: Option<u8>,
    pub site: Option<String>,
    pub gender: Option<String>,
}

pub const MANIFEST_FILE: &str = "manifest.csv";

pub fn write_manifest(rows: &[ManifestRow], path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}

/// A directory of crop files with their manifest.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub root: PathBuf,
    pub manifest: Vec<ManifestRow>,
    pub crops: Vec<SkeletonCrop>,
}

impl Corpus {
    pub fn from_crops(crops: Vec<SkeletonCrop>) -> Self {
        let manifest = crops
            .iter()
            .map(|c| ManifestRow {
                subject_id: c.subject_id.clone(),
                path: format!("{}.json", c.subject_id),
                label: c.label,
                site: c.site.clone(),
                gender: c.gender.clone(),
            })
            .collect();
        Corpus {
            root: PathBuf::new(),
            manifest,
            crops,
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(&dir.join(MANIFEST_FILE))?;
        let crops = manifest
            .iter()
            .map(|row| load_crop(&dir.join(&row.path)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Corpus {
            root: dir.to_path_buf(),
            manifest,
            crops,
        })
    }

    pub fn len(&self) -> usize {
        self.crops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.crops.is_empty()
    }
}
