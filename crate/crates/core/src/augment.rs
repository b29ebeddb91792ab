//! Topology-aware view generation: cutout with conserved fold bottoms,
//! branch clipping, binarization and small random rotations.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::{bottom_mask, rasterize, DenseVolume, Dims, SkeletonCrop};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Cutout,
    BranchClip,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cutout" => Ok(Strategy::Cutout),
            "branch_clip" => Ok(Strategy::BranchClip),
            other => Err(Error::Validation(format!(
                "unknown augmentation {other:?} (expected cutout or branch_clip)"
            ))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::Cutout => "cutout",
            Strategy::BranchClip => "branch_clip",
        })
    }
}

/// Missing fields in a serialized spec take the defaults of its strategy, so
/// `{"strategy": "cutout"}` keeps bottoms and `{"strategy": "branch_clip"}`
/// drops them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PartialSpec")]
pub struct AugmentSpec {
    pub strategy: Strategy,
    /// Cutout block edge as a fraction of each volume edge.
    pub cutout_frac: f64,
    /// Minimum fraction of voxels removed by branch clipping.
    pub clip_frac: f64,
    pub max_rotation_deg: f64,
    /// Whether bottom-line voxels survive the augmentation.
    pub keep_bottom: bool,
}

impl AugmentSpec {
    pub fn cutout() -> Self {
        AugmentSpec {
            strategy: Strategy::Cutout,
            cutout_frac: 0.55,
            clip_frac: 0.40,
            max_rotation_deg: 6.0,
            keep_bottom: true,
        }
    }

    pub fn branch_clip() -> Self {
        AugmentSpec {
            strategy: Strategy::BranchClip,
            keep_bottom: false,
            ..AugmentSpec::cutout()
        }
    }

    /// Defaults for `strategy`, including its bottom-voxel policy.
    pub fn for_strategy(strategy: Strategy) -> Self {
        match strategy {
            Strategy::Cutout => AugmentSpec::cutout(),
            Strategy::BranchClip => AugmentSpec::branch_clip(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cutout_frac > 0.0 && self.cutout_frac <= 1.0) {
            return Err(Error::Validation(format!(
                "cutout_frac must be in (0, 1], got {}",
                self.cutout_frac
            )));
        }
        if !(self.clip_frac > 0.0 && self.clip_frac < 1.0) {
            return Err(Error::Validation(format!(
                "clip_frac must be in (0, 1), got {}",
                self.clip_frac
            )));
        }
        if !(self.max_rotation_deg.is_finite() && self.max_rotation_deg >= 0.0) {
            return Err(Error::Validation(format!(
                "max_rotation_deg must be non-negative, got {}",
                self.max_rotation_deg
            )));
        }
        Ok(())
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialSpec {
    strategy: Option<Strategy>,
    cutout_frac: Option<f64>,
    clip_frac: Option<f64>,
    max_rotation_deg: Option<f64>,
    keep_bottom: Option<bool>,
}

impl TryFrom<PartialSpec> for AugmentSpec {
    type Error = Error;

    fn try_from(p: PartialSpec) -> Result<Self> {
        let base = AugmentSpec::for_strategy(p.strategy.unwrap_or(Strategy::BranchClip));
        let spec = AugmentSpec {
            cutout_frac: p.cutout_frac.unwrap_or(base.cutout_frac),
            clip_frac: p.clip_frac.unwrap_or(base.clip_frac),
            max_rotation_deg: p.max_rotation_deg.unwrap_or(base.max_rotation_deg),
            keep_bottom: p.keep_bottom.unwrap_or(base.keep_bottom),
            ..base
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec::branch_clip()
    }
}

/// Two binary views of one crop.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub view1: DenseVolume,
    pub view2: DenseVolume,
    pub source_subject: String,
}

pub fn binarize(volume: &DenseVolume) -> DenseVolume {
    volume.binarized()
}

/// Rotates about the volume center by angles drawn uniformly in
/// `[-max_deg, max_deg]`, first about x, then y, then z. Each output voxel
/// copies its nearest preimage voxel; preimages off the grid give 0.
pub fn random_rotation<R: Rng + ?Sized>(
    volume: &DenseVolume,
    max_deg: f64,
    rng: &mut R,
) -> DenseVolume {
    if max_deg == 0.0 {
        return volume.clone();
    }
    let mut angle = || rng.gen_range(-max_deg..=max_deg).to_radians();
    let (ax, ay, az) = (angle(), angle(), angle());
    rotate(volume, ax, ay, az)
}

fn matmul(a: [[f64; 3]; 3], b: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Applies `Rz(az) * Ry(ay) * Rx(ax)` by inverse nearest-neighbour lookup.
pub fn rotate(volume: &DenseVolume, ax: f64, ay: f64, az: f64) -> DenseVolume {
    let (sx, cx) = ax.sin_cos();
    let (sy, cy) = ay.sin_cos();
    let (sz, cz) = az.sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
    let r = matmul(rz, matmul(ry, rx));
    // The inverse of a rotation is its transpose.
    let inv = |i: usize, j: usize| r[j][i];

    let dims = volume.dims;
    let [nx, ny, nz] = dims.as_array();
    let c = [
        (nx - 1) as f64 / 2.0,
        (ny - 1) as f64 / 2.0,
        (nz - 1) as f64 / 2.0,
    ];
    let mut out = DenseVolume::zeros(dims);
    let src = &volume.values;
    let mut o = 0;
    for x in 0..nx {
        let px = x as f64 - c[0];
        for y in 0..ny {
            let py = y as f64 - c[1];
            let mut q = [0.0; 3];
            for (a, qa) in q.iter_mut().enumerate() {
                *qa = inv(a, 0) * px + inv(a, 1) * py - inv(a, 2) * c[2] + c[a];
            }
            for _ in 0..nz {
                let (ix, iy, iz) = (q[0].round(), q[1].round(), q[2].round());
                if ix >= 0.0 && iy >= 0.0 && iz >= 0.0 {
                    let (ix, iy, iz) = (ix as usize, iy as usize, iz as usize);
                    if ix < nx && iy < ny && iz < nz {
                        out.values[o] = src[(ix * ny + iy) * nz + iz];
                    }
                }
                for (a, qa) in q.iter_mut().enumerate() {
                    *qa += inv(a, 2);
                }
                o += 1;
            }
        }
    }
    out
}

/// Cutout block edge lengths: `round(frac * dim)` per axis, halves rounded
/// up, clamped to `[1, dim]`.
pub fn cutout_block(dims: Dims, frac: f64) -> [usize; 3] {
    dims.as_array()
        .map(|d| (((frac * d as f64) + 0.5).floor() as usize).clamp(1, d.max(1)))
}

fn random_block<R: Rng + ?Sized>(
    dims: Dims,
    size: [usize; 3],
    rng: &mut R,
) -> [std::ops::Range<usize>; 3] {
    let d = dims.as_array();
    std::array::from_fn(|a| {
        let start = rng.gen_range(0..=d[a] - size[a]);
        start..start + size[a]
    })
}

/// Cutout views before binarization and rotation: view 1 loses what lies in
/// its block, view 2 keeps only what lies in its own block. Bottom voxels are
/// put back in both when the spec keeps them.
pub fn cutout_masked<R: Rng + ?Sized>(
    crop: &SkeletonCrop,
    spec: &AugmentSpec,
    rng: &mut R,
) -> Result<(DenseVolume, DenseVolume)> {
    let full = rasterize(crop)?;
    let dims = crop.dims;
    let size = cutout_block(dims, spec.cutout_frac);
    let bottoms = spec.keep_bottom.then(|| bottom_mask(crop));
    let mut views = [full.clone(), full];
    for (k, view) in views.iter_mut().enumerate() {
        let [bx, by, bz] = random_block(dims, size, rng);
        let remove_inside = k == 0;
        let [_, ny, nz] = dims.as_array();
        for (i, v) in view.values.iter_mut().enumerate() {
            if *v == 0 {
                continue;
            }
            let (x, y, z) = (i / (ny * nz), (i / nz) % ny, i % nz);
            let inside = bx.contains(&x) && by.contains(&y) && bz.contains(&z);
            let kept_bottom = bottoms.as_ref().is_some_and(|m| m.values[i] != 0);
            if inside == remove_inside && !kept_bottom {
                *v = 0;
            }
        }
    }
    let [v1, v2] = views;
    Ok((v1, v2))
}

pub fn cutout_views<R: Rng + ?Sized>(
    crop: &SkeletonCrop,
    spec: &AugmentSpec,
    rng: &mut R,
) -> Result<ViewPair> {
    let (v1, v2) = cutout_masked(crop, spec, rng)?;
    Ok(finish(crop, v1, v2, spec, rng))
}

/// Branch clipping before binarization and rotation. Each view independently
/// drops every bottom line (unless the spec keeps them), then removes other
/// branches in random order until at least `clip_frac` of all voxels are
/// gone. Removed bottoms count toward the quota.
pub fn branch_clip_masked<R: Rng + ?Sized>(
    crop: &SkeletonCrop,
    spec: &AugmentSpec,
    rng: &mut R,
) -> Result<(DenseVolume, DenseVolume)> {
    let full = rasterize(crop)?;
    let total = crop.voxel_count();
    let max_id = crop.branches.iter().map(|b| b.id).max().unwrap_or(0) as usize;
    let make = |rng: &mut R| {
        let mut removed = vec![false; max_id + 1];
        let mut count = 0usize;
        let mut candidates = Vec::new();
        for b in &crop.branches {
            if b.is_bottom() && !spec.keep_bottom {
                removed[b.id as usize] = true;
                count += b.voxels.len();
            } else {
                candidates.push(b);
            }
        }
        candidates.shuffle(rng);
        for b in candidates {
            if (count as f64) >= spec.clip_frac * total as f64 {
                break;
            }
            removed[b.id as usize] = true;
            count += b.voxels.len();
        }
        let mut view = full.clone();
        for v in view.values.iter_mut() {
            if removed[*v as usize] {
                *v = 0;
            }
        }
        view
    };
    let v1 = make(rng);
    let v2 = make(rng);
    Ok((v1, v2))
}

pub fn branch_clip_views<R: Rng + ?Sized>(
    crop: &SkeletonCrop,
    spec: &AugmentSpec,
    rng: &mut R,
) -> Result<ViewPair> {
    let (v1, v2) = branch_clip_masked(crop, spec, rng)?;
    Ok(finish(crop, v1, v2, spec, rng))
}

fn finish<R: Rng + ?Sized>(
    crop: &SkeletonCrop,
    v1: DenseVolume,
    v2: DenseVolume,
    spec: &AugmentSpec,
    rng: &mut R,
) -> ViewPair {
    let view1 = random_rotation(&binarize(&v1), spec.max_rotation_deg, rng);
    let view2 = random_rotation(&binarize(&v2), spec.max_rotation_deg, rng);
    ViewPair {
        view1,
        view2,
        source_subject: crop.subject_id.clone(),
    }
}

pub fn make_view_pair<R: Rng + ?Sized>(
    crop: &SkeletonCrop,
    spec: &AugmentSpec,
    rng: &mut R,
) -> Result<ViewPair> {
    spec.validate()?;
    match spec.strategy {
        Strategy::Cutout => cutout_views(crop, spec, rng),
        Strategy::BranchClip => branch_clip_views(crop, spec, rng),
    }
}
