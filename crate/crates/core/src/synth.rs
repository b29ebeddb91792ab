//! Synthetic skeleton corpora with a "single fold" versus "double parallel
//! fold" label.
//!
//! Every crop holds one curved primary sheet cut into a few simple surfaces,
//! a bottom line along its deep edge and some perpendicular side branches
//! hooked on through junction lines. Label 1 crops carry a second sheet
//! running roughly parallel to the first, 3 to 6 voxels away, with its own
//! bottom line. Position, curvature, size and the number of side branches are
//! drawn per subject, and all crops share one voxel budget distribution, so
//! neither location nor raw mass gives the label away.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::skeleton::{
    save_crop, write_manifest, Branch, BranchKind, Dims, ManifestRow, SkeletonCrop, VoxelCoord,
    MANIFEST_FILE,
};

/// Smallest grid the pattern fits in.
const MIN_DIMS: [usize; 3] = [12, 20, 16];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_subjects: usize,
    /// Fraction of subjects with the double-parallel pattern.
    pub prevalence: f64,
    pub seed: u64,
    pub dims: Dims,
    pub target_sparsity: f64,
    /// Amplitude of the smooth positional wobble applied to every sheet.
    pub jitter_mm: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_subjects: 100,
            prevalence: 0.3,
            seed: 0,
            dims: Dims::CROP,
            target_sparsity: 0.04,
            jitter_mm: 2.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 {
            return Err(Error::Validation("n_subjects must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.prevalence) {
            return Err(Error::Validation(format!(
                "prevalence must be in [0, 1], got {}",
                self.prevalence
            )));
        }
        if !(self.target_sparsity > 0.0 && self.target_sparsity < 1.0) {
            return Err(Error::Validation(format!(
                "target_sparsity must be in (0, 1), got {}",
                self.target_sparsity
            )));
        }
        if !(self.jitter_mm.is_finite() && self.jitter_mm >= 0.0) {
            return Err(Error::Validation(format!(
                "jitter_mm must be non-negative, got {}",
                self.jitter_mm
            )));
        }
        Ok(())
    }

    /// Number of label-1 subjects.
    pub fn positives(&self) -> usize {
        (self.prevalence * self.n_subjects as f64).round() as usize
    }
}

/// A smooth sheet `x = f(y, z)` over `y0..y1`, from `top` down to a wavy
/// bottom edge. Coordinates are relative until the crop is placed.
#[derive(Debug, Clone)]
struct Sheet {
    x0: f64,
    bend: f64,
    tilt: f64,
    wave_amp: f64,
    wave_freq: f64,
    wave_phase: f64,
    y0: i32,
    y1: i32,
    /// Range of y over which `bend` is parameterized. Parallel sheets share
    /// it so that they keep their spacing.
    bend_span: (i32, i32),
    top: i32,
    depth: f64,
    depth_amp: f64,
    depth_phase: f64,
}

impl Sheet {
    fn x_at(&self, y: i32, z: i32) -> f64 {
        let (b0, b1) = self.bend_span;
        let half = (b1 - b0) as f64 / 2.0;
        let u = (y as f64 - b0 as f64 - half) / half.max(1.0);
        self.x0
            + self.bend * u * u
            + self.tilt * (z - self.top) as f64 / self.depth.max(1.0)
            + self.wave_amp * (self.wave_freq * y as f64 + self.wave_phase).sin()
    }

    fn bottom(&self, y: i32) -> i32 {
        let t = (y - self.y0) as f64 / (self.y1 - self.y0).max(1) as f64;
        let d = self.depth + self.depth_amp * (PI * t + self.depth_phase).sin();
        self.top + d.round().max(2.0) as i32
    }

    /// Surface voxels per y column and bottom voxels, relative coordinates.
    fn voxels(&self) -> (Vec<Vec<[i32; 3]>>, Vec<[i32; 3]>) {
        let mut columns = Vec::new();
        let mut bottom = Vec::new();
        for y in self.y0..self.y1 {
            let zb = self.bottom(y);
            columns.push(
                (self.top..zb)
                    .map(|z| [self.x_at(y, z).round() as i32, y, z])
                    .collect(),
            );
            bottom.push([self.x_at(y, zb).round() as i32, y, zb]);
        }
        (columns, bottom)
    }
}

/// Collects branches while keeping them disjoint.
struct Builder {
    dims: Dims,
    owner: Vec<u32>,
    branches: Vec<Branch>,
}

impl Builder {
    fn new(dims: Dims) -> Self {
        Builder {
            dims,
            owner: vec![0; dims.len()],
            branches: Vec::new(),
        }
    }

    /// Adds the in-bounds, still free voxels as a new branch. Returns its id,
    /// or `None` when nothing is left.
    fn add(&mut self, kind: BranchKind, voxels: impl IntoIterator<Item = [i32; 3]>) -> Option<u32> {
        let id = self.branches.len() as u32 + 1;
        let mut kept = Vec::new();
        for [x, y, z] in voxels {
            if x < 0 || y < 0 || z < 0 {
                continue;
            }
            let v = VoxelCoord::new(x as u32, y as u32, z as u32);
            if !self.dims.contains(v) {
                continue;
            }
            let slot = &mut self.owner[self.dims.index(v)];
            if *slot == 0 {
                *slot = id;
                kept.push(v);
            }
        }
        if kept.is_empty() {
            return None;
        }
        self.branches.push(Branch {
            id,
            kind,
            voxels: kept,
            neighbors: Vec::new(),
        });
        Some(id)
    }

    fn link(&mut self, a: u32, b: u32) {
        if a == b {
            return;
        }
        for (from, to) in [(a, b), (b, a)] {
            let n = &mut self.branches[from as usize - 1].neighbors;
            if !n.contains(&to) {
                n.push(to);
            }
        }
    }
}

struct Side {
    y: i32,
    z0: i32,
    z1: i32,
    dir: i32,
    len: i32,
}

/// Generates one crop. Deterministic in `(seed, label, cfg)`; the subject id
/// is a placeholder that corpus generation overwrites.
pub fn generate_crop(seed: u64, label: u8, cfg: &SynthConfig) -> Result<SkeletonCrop> {
    if label > 1 {
        return Err(Error::Validation(format!(
            "label must be 0 or 1, got {label}"
        )));
    }
    let dims = cfg.dims;
    let small = dims.as_array().iter().zip(MIN_DIMS).any(|(&d, m)| d < m);
    if small {
        return Err(Error::Generation(format!(
            "dims {:?} too small for the fold pattern (need at least {MIN_DIMS:?})",
            dims.as_array()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[label as u64]));
    let [dx, dy, dz] = dims.as_array().map(|d| d as i32);
    let jitter = cfg.jitter_mm / 2.0;

    let budget = cfg.target_sparsity * dims.len() as f64 * rng.gen_range(0.75..1.25);
    let len = rng
        .gen_range((dy as f64 * 0.55)..(dy as f64 * 0.85))
        .round() as i32;
    let top = rng.gen_range(1..=(dz / 5).max(1));
    // Both labels spend the same budget; label 1 moves part of it from the
    // side branches into the second sheet.
    let side_count = rng.gen_range(1..=4);
    let (second_len, second_depth) = if label == 1 {
        (rng.gen_range(0.6..0.95), rng.gen_range(0.55..0.85))
    } else {
        (0.0, 0.0)
    };
    let side_share = if label == 1 {
        rng.gen_range(0.04..0.1)
    } else {
        rng.gen_range(0.15..0.3)
    };
    let sheet_budget = budget * (1.0 - side_share);
    let depth = (sheet_budget / (len as f64 * (1.0 + second_len * second_depth)) - 1.0)
        .clamp(3.0, (dz - top - 4) as f64 / 1.3);

    let primary = Sheet {
        x0: 0.0,
        bend: rng.gen_range(-3.0..3.0),
        tilt: rng.gen_range(-2.5..2.5),
        wave_amp: jitter * rng.gen_range(0.3..1.0),
        wave_freq: rng.gen_range(0.15..0.45),
        wave_phase: rng.gen_range(0.0..2.0 * PI),
        y0: 0,
        y1: len,
        bend_span: (0, len),
        top,
        depth,
        depth_amp: rng.gen_range(0.0..(depth * 0.3)),
        depth_phase: rng.gen_range(-0.5..0.5),
    };
    let mut sheets = vec![primary.clone()];
    let mut offset_sign = if rng.gen_bool(0.5) { 1 } else { -1 };
    if label == 1 {
        let offset = rng.gen_range(3..=6) as f64;
        let l2 = ((len as f64) * second_len).round() as i32;
        let start = rng.gen_range(0..=(len - l2));
        let d2 = depth * second_depth;
        sheets.push(Sheet {
            x0: offset_sign as f64 * offset,
            bend: primary.bend + rng.gen_range(-0.5..0.5),
            tilt: primary.tilt + rng.gen_range(-0.5..0.5),
            wave_amp: jitter * rng.gen_range(0.3..1.0),
            wave_phase: rng.gen_range(0.0..2.0 * PI),
            y0: start,
            y1: start + l2,
            top: (top + rng.gen_range(-1..=2)).max(0),
            depth: d2,
            depth_amp: rng.gen_range(0.0..(d2 * 0.3)),
            ..primary.clone()
        });
    } else if rng.gen_bool(0.5) {
        offset_sign = -offset_sign;
    }

    // Side branches point away from the second sheet when there is one.
    let mut sides = Vec::new();
    let side_area = budget * side_share / side_count as f64;
    for _ in 0..side_count {
        let y = rng.gen_range(1..len - 1);
        let zb = primary.bottom(y);
        let side_len = rng.gen_range(3..=6);
        let zl = ((side_area / side_len as f64).round() as i32).clamp(2, zb - top);
        let z0 = rng.gen_range(top..=(zb - zl));
        let dir = if label == 1 || rng.gen_bool(0.5) {
            -offset_sign
        } else {
            offset_sign
        };
        sides.push(Side {
            y,
            z0,
            z1: z0 + zl,
            dir,
            len: side_len,
        });
    }

    // Relative voxels of every part, then one random translation into the grid.
    let rendered: Vec<_> = sheets.iter().map(Sheet::voxels).collect();
    let side_voxels: Vec<(Vec<[i32; 3]>, Vec<[i32; 3]>)> = sides
        .iter()
        .map(|s| {
            let base: Vec<i32> = (s.z0..s.z1)
                .map(|z| primary.x_at(s.y, z).round() as i32)
                .collect();
            let junction = (s.z0..s.z1)
                .zip(&base)
                .map(|(z, &x)| [x + s.dir, s.y, z])
                .collect();
            let surface = (s.z0..s.z1)
                .zip(&base)
                .flat_map(|(z, &x)| (2..=s.len).map(move |k| [x + s.dir * k, s.y, z]))
                .collect();
            (junction, surface)
        })
        .collect();
    let all = rendered
        .iter()
        .flat_map(|(cols, bottom)| cols.iter().flatten().chain(bottom))
        .chain(side_voxels.iter().flat_map(|(j, s)| j.iter().chain(s)));
    let (mut lo, mut hi) = ([i32::MAX; 3], [i32::MIN; 3]);
    for v in all {
        for a in 0..3 {
            lo[a] = lo[a].min(v[a]);
            hi[a] = hi[a].max(v[a]);
        }
    }
    let extent = [dx, dy, dz];
    let mut shift = [0i32; 3];
    for a in 0..3 {
        let span = hi[a] - lo[a] + 1;
        if span > extent[a] {
            // Only the side branches may poke out along x; they are clipped.
            if a == 0 && sheets_span(&rendered) <= extent[0] {
                let (slo, shi) = sheets_range(&rendered);
                shift[0] = rng.gen_range(-slo..=(extent[0] - 1 - shi));
                continue;
            }
            return Err(Error::Generation(format!(
                "pattern spans {span} voxels along axis {a}, grid has {}",
                extent[a]
            )));
        }
        shift[a] = rng.gen_range(-lo[a]..=(extent[a] - 1 - hi[a]));
    }
    let place = |v: &[i32; 3]| [v[0] + shift[0], v[1] + shift[1], v[2] + shift[2]];

    let mut b = Builder::new(dims);
    let mut primary_segments = Vec::new();
    for (si, (cols, bottom)) in rendered.iter().enumerate() {
        let bottom_id = b.add(BranchKind::BottomLine, bottom.iter().map(place));
        let pieces = rng.gen_range(2..=4).min(cols.len());
        let mut cuts: BTreeSet<usize> = BTreeSet::new();
        while cuts.len() + 1 < pieces {
            cuts.insert(rng.gen_range(1..cols.len()));
        }
        let mut bounds: Vec<usize> = vec![0];
        bounds.extend(cuts);
        bounds.push(cols.len());
        let mut prev: Option<u32> = None;
        for w in bounds.windows(2) {
            let id = b.add(
                BranchKind::SimpleSurface,
                cols[w[0]..w[1]].iter().flatten().map(place),
            );
            if let Some(id) = id {
                if let Some(p) = prev {
                    b.link(p, id);
                }
                if let Some(bid) = bottom_id {
                    b.link(id, bid);
                }
                if si == 0 {
                    primary_segments.push((w[0] as i32, w[1] as i32, id));
                }
                prev = Some(id);
            }
        }
    }
    for (s, (junction, surface)) in sides.iter().zip(&side_voxels) {
        let Some(jid) = b.add(BranchKind::JunctionLine, junction.iter().map(place)) else {
            continue;
        };
        if let Some(&(_, _, seg)) = primary_segments
            .iter()
            .find(|(a, e, _)| (*a..*e).contains(&s.y))
        {
            b.link(jid, seg);
        }
        if let Some(sid) = b.add(BranchKind::SimpleSurface, surface.iter().map(place)) {
            b.link(jid, sid);
        }
    }

    let mut crop = SkeletonCrop::new("synth", dims);
    crop.label = Some(label);
    crop.branches = b.branches;
    for br in &mut crop.branches {
        br.neighbors.sort_unstable();
    }
    crop.validate()?;
    Ok(crop)
}

fn sheets_range(rendered: &[(Vec<Vec<[i32; 3]>>, Vec<[i32; 3]>)]) -> (i32, i32) {
    let xs = rendered
        .iter()
        .flat_map(|(cols, bottom)| cols.iter().flatten().chain(bottom))
        .map(|v| v[0]);
    xs.fold((i32::MAX, i32::MIN), |(lo, hi), x| (lo.min(x), hi.max(x)))
}

fn sheets_span(rendered: &[(Vec<Vec<[i32; 3]>>, Vec<[i32; 3]>)]) -> i32 {
    let (lo, hi) = sheets_range(rendered);
    hi - lo + 1
}

/// Label of every subject: exactly `cfg.positives()` ones, in a seeded order.
fn labels(cfg: &SynthConfig) -> Vec<u8> {
    let pos = cfg.positives();
    let mut labels: Vec<u8> = (0..cfg.n_subjects).map(|i| u8::from(i < pos)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, &[u64::MAX]));
    labels.shuffle(&mut rng);
    labels
}

pub fn subject_id(i: usize) -> String {
    format!("sub-{i:05}")
}

/// Generates the whole corpus in memory. Subject `i` uses seed
/// `derive(cfg.seed, [i])`, sites alternate `synthA`/`synthB` and genders
/// alternate every second subject so all four site/gender cells fill up.
pub fn generate_crops(cfg: &SynthConfig) -> Result<Vec<SkeletonCrop>> {
    cfg.validate()?;
    labels(cfg)
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let mut crop = generate_crop(seed::derive(cfg.seed, &[i as u64]), label, cfg)?;
            crop.subject_id = subject_id(i);
            crop.site = Some(if i % 2 == 0 { "synthA" } else { "synthB" }.to_string());
            crop.gender = Some(if (i / 2) % 2 == 0 { "F" } else { "M" }.to_string());
            Ok(crop)
        })
        .collect()
}

/// Writes `crops/<subject>.json` files and then `manifest.csv` into `out_dir`.
/// The manifest is renamed into place last, so a failed run never leaves one
/// behind.
pub fn generate_corpus(cfg: &SynthConfig, out_dir: &Path) -> Result<Vec<ManifestRow>> {
    let crops = generate_crops(cfg)?;
    let crop_dir = out_dir.join("crops");
    fs::create_dir_all(&crop_dir)?;
    let manifest_path = out_dir.join(MANIFEST_FILE);
    if manifest_path.exists() {
        fs::remove_file(&manifest_path)?;
    }
    let mut rows = Vec::with_capacity(crops.len());
    for crop in &crops {
        let rel = format!("crops/{}.json", crop.subject_id);
        save_crop(crop, &out_dir.join(&rel))?;
        rows.push(ManifestRow {
            subject_id: crop.subject_id.clone(),
            path: rel,
            label: crop.label,
            site: crop.site.clone(),
            gender: crop.gender.clone(),
        });
    }
    let tmp = out_dir.join(format!("{MANIFEST_FILE}.tmp"));
    write_manifest(&rows, &tmp)?;
    fs::rename(&tmp, &manifest_path)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::{rasterize, sparsity};

    #[test]
    fn deterministic_and_valid() {
        let cfg = SynthConfig::default();
        for seed in 0..50 {
            for label in [0, 1] {
                let a = generate_crop(seed, label, &cfg).unwrap();
                let b = generate_crop(seed, label, &cfg).unwrap();
                assert_eq!(a, b);
                a.validate().unwrap();
            }
        }
    }

    #[test]
    fn bottom_line_count_follows_label() {
        let cfg = SynthConfig::default();
        for seed in 0..200 {
            let c0 = generate_crop(seed, 0, &cfg).unwrap();
            let c1 = generate_crop(seed, 1, &cfg).unwrap();
            assert_eq!(c0.branches.iter().filter(|b| b.is_bottom()).count(), 1);
            assert!(c1.branches.iter().filter(|b| b.is_bottom()).count() >= 2);
        }
    }

    #[test]
    fn side_branches_present() {
        let cfg = SynthConfig::default();
        let c = generate_crop(3, 0, &cfg).unwrap();
        let junctions = c
            .branches
            .iter()
            .filter(|b| b.kind == BranchKind::JunctionLine)
            .count();
        assert!((1..=4).contains(&junctions));
    }

    #[test]
    fn sparsity_near_target() {
        let cfg = SynthConfig {
            n_subjects: 300,
            ..SynthConfig::default()
        };
        let crops = generate_crops(&cfg).unwrap();
        let mean = crops
            .iter()
            .map(|c| sparsity(&rasterize(c).unwrap()))
            .sum::<f64>()
            / crops.len() as f64;
        assert!((mean - 0.04).abs() < 0.02, "mean sparsity {mean}");
    }

    #[test]
    fn small_dims_rejected() {
        let cfg = SynthConfig {
            dims: Dims::new(5, 40, 38),
            ..SynthConfig::default()
        };
        assert!(matches!(
            generate_crop(0, 0, &cfg),
            Err(Error::Generation(_))
        ));
    }

    #[test]
    fn label_counts_and_strata() {
        let cfg = SynthConfig {
            n_subjects: 10,
            prevalence: 0.5,
            ..SynthConfig::default()
        };
        let crops = generate_crops(&cfg).unwrap();
        assert_eq!(crops.iter().filter(|c| c.label == Some(1)).count(), 5);
        assert_eq!(crops[0].site.as_deref(), Some("synthA"));
        assert_eq!(crops[1].site.as_deref(), Some("synthB"));
        assert_eq!(crops[2].gender.as_deref(), Some("M"));
    }
}
