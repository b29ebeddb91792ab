//! Evaluation protocol: stratified splits, a linear hinge-loss probe, ROC-AUC,
//! the PCA baseline and multi-model reports.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::{format_f64, EmbeddingSet};
use crate::error::{contract, Result};
use crate::seed;
use crate::skeleton::{rasterize, ManifestRow, SkeletonCrop};

/// Fixed number of full-batch subgradient steps.
pub const PROBE_ITERATIONS: usize = 2000;

/// The cell a subject is balanced in.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Stratum {
    pub site: Option<String>,
    pub gender: Option<String>,
    pub label: Option<u8>,
}

impl Stratum {
    pub fn of(row: &ManifestRow) -> Self {
        Stratum {
            site: row.site.clone(),
            gender: row.gender.clone(),
            label: row.label,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub part1: Vec<String>,
    pub part2: Vec<String>,
    pub strata: BTreeMap<String, Stratum>,
}

impl Split {
    /// CSV `subject_id,part` with parts numbered 1 and 2, in manifest order.
    pub fn to_csv(&self, order: &[ManifestRow]) -> String {
        let in1: std::collections::HashSet<&str> = self.part1.iter().map(String::as_str).collect();
        let mut out = String::from("subject_id,part\n");
        for row in order {
            let part = if in1.contains(row.subject_id.as_str()) {
                1
            } else {
                2
            };
            out.push_str(&format!("{},{part}\n", row.subject_id));
        }
        out
    }

    pub fn write_csv(&self, order: &[ManifestRow], path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv(order))?;
        Ok(())
    }
}

/// Splits subjects so that every (site, gender, label) cell is divided as
/// evenly as `frac` allows. Each cell gets `floor(frac * n)` subjects in
/// part 1; the cells whose share has a fractional remainder then receive the
/// extra subjects needed to bring part 1 to `round(frac * N)` overall,
/// largest remainder first, ties in seeded order.
pub fn stratified_split(manifest: &[ManifestRow], frac: f64, seed: u64) -> Result<Split> {
    if manifest.is_empty() {
        return Err(contract("cannot split an empty manifest"));
    }
    if !(0.0..=1.0).contains(&frac) {
        return Err(contract(format!(
            "split fraction must be in [0, 1], got {frac}"
        )));
    }
    let mut cells: BTreeMap<Stratum, Vec<usize>> = BTreeMap::new();
    for (i, row) in manifest.iter().enumerate() {
        cells.entry(Stratum::of(row)).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[0x5917]));
    let mut cells: Vec<Vec<usize>> = cells.into_values().collect();
    for members in &mut cells {
        members.shuffle(&mut rng);
    }
    let mut take: Vec<usize> = cells
        .iter()
        .map(|m| (frac * m.len() as f64).floor() as usize)
        .collect();
    let target = ((frac * manifest.len() as f64) + 0.5).floor() as usize;
    let mut extra = target.saturating_sub(take.iter().sum());
    let mut order: Vec<usize> = (0..cells.len()).collect();
    order.shuffle(&mut rng);
    let remainder: Vec<f64> = cells
        .iter()
        .zip(&take)
        .map(|(m, &t)| frac * m.len() as f64 - t as f64)
        .collect();
    order.sort_by(|&a, &b| remainder[b].total_cmp(&remainder[a]));
    for c in order {
        if extra == 0 {
            break;
        }
        if remainder[c] > 0.0 {
            take[c] += 1;
            extra -= 1;
        }
    }
    let mut part1 = Vec::new();
    let mut part2 = Vec::new();
    for (members, &t) in cells.iter().zip(&take) {
        for (k, &i) in members.iter().enumerate() {
            let id = manifest[i].subject_id.clone();
            if k < t {
                part1.push(id);
            } else {
                part2.push(id);
            }
        }
    }
    let position: BTreeMap<&str, usize> = manifest
        .iter()
        .enumerate()
        .map(|(i, r)| (r.subject_id.as_str(), i))
        .collect();
    part1.sort_by_key(|id| position[id.as_str()]);
    part2.sort_by_key(|id| position[id.as_str()]);
    let strata = manifest
        .iter()
        .map(|r| (r.subject_id.clone(), Stratum::of(r)))
        .collect();
    Ok(Split {
        part1,
        part2,
        strata,
    })
}

/// Linear classifier on standardized features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub c: f64,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl ProbeModel {
    fn standardize(&self, x: &[f64]) -> impl Iterator<Item = f64> + '_ {
        let x = x.to_vec();
        (0..x.len()).map(move |j| (x[j] - self.mean[j]) / self.scale[j])
    }
}

/// Hinge-loss linear classifier trained by deterministic full-batch
/// subgradient descent.
///
/// Features are standardized first (constant features get scale 1). The
/// objective is `λ/2 |w|² + mean_i max(0, 1 - y_i (w·x_i + b))` with
/// `λ = 1 / (C n)`, so `C` weighs the data term like an SVC does. The bias is
/// handled as a weight on a constant feature, and step `t` has size `1/(λ t)`.
pub fn fit_linear_probe(features: &[Vec<f64>], labels: &[u8], c: f64) -> Result<ProbeModel> {
    let n = features.len();
    if n != labels.len() {
        return Err(contract(format!(
            "{n} feature rows for {} labels",
            labels.len()
        )));
    }
    if !(c > 0.0 && c.is_finite()) {
        return Err(contract(format!("C must be positive, got {c}")));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.iter().filter(|&&l| l == 0).count();
    if pos + neg != n {
        return Err(contract("labels must be 0 or 1"));
    }
    if pos < 2 || neg < 2 {
        return Err(contract(format!(
            "probe needs at least 2 examples of each class, got {neg} negatives and {pos} positives"
        )));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(contract("feature rows differ in length"));
    }
    let mut mean = vec![0.0; d];
    for f in features {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v / n as f64;
        }
    }
    let mut scale = vec![0.0; d];
    for f in features {
        for j in 0..d {
            scale[j] += (f[j] - mean[j]).powi(2) / n as f64;
        }
    }
    for s in &mut scale {
        *s = if *s > 0.0 { s.sqrt() } else { 1.0 };
    }
    let x: Vec<Vec<f64>> = features
        .iter()
        .map(|f| {
            let mut row: Vec<f64> = (0..d).map(|j| (f[j] - mean[j]) / scale[j]).collect();
            row.push(1.0);
            row
        })
        .collect();
    let y: Vec<f64> = labels
        .iter()
        .map(|&l| if l == 1 { 1.0 } else { -1.0 })
        .collect();
    let lambda = 1.0 / (c * n as f64);
    let mut w = vec![0.0; d + 1];
    let mut g = vec![0.0; d + 1];
    for t in 1..=PROBE_ITERATIONS {
        g.iter_mut().zip(&w).for_each(|(gj, wj)| *gj = lambda * wj);
        for (xi, yi) in x.iter().zip(&y) {
            let margin = yi * xi.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            if margin < 1.0 {
                for (gj, xj) in g.iter_mut().zip(xi) {
                    *gj -= yi * xj / n as f64;
                }
            }
        }
        let step = 1.0 / (lambda * t as f64);
        for (wj, gj) in w.iter_mut().zip(&g) {
            *wj -= step * gj;
        }
    }
    let bias = w.pop().expect("bias slot");
    Ok(ProbeModel {
        weights: w,
        bias,
        c,
        mean,
        scale,
    })
}

/// Decision values `w·standardize(x) + b`.
pub fn predict_scores(model: &ProbeModel, features: &[Vec<f64>]) -> Result<Vec<f64>> {
    features
        .iter()
        .map(|f| {
            if f.len() != model.weights.len() {
                return Err(contract(format!(
                    "probe expects {} features, got {}",
                    model.weights.len(),
                    f.len()
                )));
            }
            Ok(model
                .standardize(f)
                .zip(&model.weights)
                .map(|(a, b)| a * b)
                .sum::<f64>()
                + model.bias)
        })
        .collect()
}

/// Mann–Whitney AUC: the chance a positive outscores a negative, ties
/// counting one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(contract(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(contract("scores contain NaN"));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(contract("AUC needs both classes present"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum of the positives, with tied groups sharing their
    // average rank; doubling keeps every quantity an integer.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let twice_avg = (i + 1 + j + 1) as u128;
        let tied_pos = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        twice_rank_sum += twice_avg * tied_pos;
        i = j + 1;
    }
    let (p, q) = (pos as u128, neg as u128);
    // 2U = 2R - p(p+1) counts a win as 2 and a tie as 1.
    let twice_u = twice_rank_sum - p * (p + 1);
    let wins = (twice_u / 2) as f64;
    let half = (twice_u % 2) as f64 * 0.5;
    Ok((wins + half) / (p * q) as f64)
}

/// A fitted principal component basis.
#[derive(Debug, Clone)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit loadings, one row per component, by decreasing variance.
    pub components: Vec<Vec<f64>>,
    /// Variance captured by each component.
    pub variances: Vec<f64>,
}

impl Pca {
    /// Fits on sparse binary rows given as sorted lists of non-zero indices
    /// into a space of `width` features.
    ///
    /// The eigendecomposition runs on the `n × n` centered Gram matrix, which
    /// shares its non-zero spectrum with the covariance and is far smaller
    /// than it for flattened crops.
    pub fn fit_binary(rows: &[Vec<u32>], width: usize, dim: usize) -> Result<Pca> {
        let n = rows.len();
        if n == 0 {
            return Err(contract("PCA needs at least one row"));
        }
        if dim == 0 || dim > n.saturating_sub(1) || dim > width {
            return Err(contract(format!(
                "PCA dim {dim} not in 1..={} for {n} rows",
                (n - 1).min(width)
            )));
        }
        let mut owners: Vec<Vec<u32>> = vec![Vec::new(); width];
        for (i, r) in rows.iter().enumerate() {
            for &j in r {
                owners[j as usize].push(i as u32);
            }
        }
        let mut gram = vec![0u32; n * n];
        for list in &owners {
            for (a, &i) in list.iter().enumerate() {
                for &k in &list[a..] {
                    gram[i as usize * n + k as usize] += 1;
                }
            }
        }
        let mut k = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = f64::from(gram[i * n + j]);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        let row_mean: Vec<f64> = (0..n).map(|i| k.row(i).sum() / n as f64).collect();
        let grand = row_mean.iter().sum::<f64>() / n as f64;
        for i in 0..n {
            for j in 0..n {
                k[(i, j)] += grand - row_mean[i] - row_mean[j];
            }
        }
        let eig = SymmetricEigen::new(k);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .total_cmp(&eig.eigenvalues[a])
                .then(a.cmp(&b))
        });

        let mean: Vec<f64> = owners.iter().map(|o| o.len() as f64 / n as f64).collect();
        let mut components = Vec::with_capacity(dim);
        let mut variances = Vec::with_capacity(dim);
        for &c in order.iter().take(dim) {
            let lambda = eig.eigenvalues[c].max(0.0);
            let v = eig.eigenvectors.column(c);
            // Loading u = Xcᵀ v / sqrt(λ), with Xcᵀ v = Xᵀ v - mean * Σv.
            let vsum: f64 = v.iter().sum();
            let mut u: Vec<f64> = owners
                .iter()
                .zip(&mean)
                .map(|(o, m)| o.iter().map(|&i| v[i as usize]).sum::<f64>() - m * vsum)
                .collect();
            let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            if lambda <= f64::EPSILON * n as f64 || norm == 0.0 {
                u.iter_mut().for_each(|x| *x = 0.0);
            } else {
                u.iter_mut().for_each(|x| *x /= norm);
                let lead = u
                    .iter()
                    .enumerate()
                    .fold((0, 0.0f64), |best, (j, x)| {
                        if x.abs() > best.1 {
                            (j, x.abs())
                        } else {
                            best
                        }
                    })
                    .0;
                if u[lead] < 0.0 {
                    u.iter_mut().for_each(|x| *x = -*x);
                }
            }
            components.push(u);
            variances.push(lambda / n as f64);
        }
        Ok(Pca {
            mean,
            components,
            variances,
        })
    }

    /// Coordinates of a sparse binary row in the component basis.
    pub fn project_binary(&self, row: &[u32]) -> Vec<f64> {
        self.components
            .iter()
            .map(|u| {
                let centered_dot: f64 = row.iter().map(|&j| u[j as usize]).sum();
                centered_dot - u.iter().zip(&self.mean).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }
}

fn support(crop: &SkeletonCrop) -> Result<Vec<u32>> {
    let v = rasterize(crop)?;
    Ok(v.values
        .iter()
        .enumerate()
        .filter(|(_, &x)| x != 0)
        .map(|(i, _)| i as u32)
        .collect())
}

/// Projects the flattened binarized crops onto their top `dim` principal
/// components.
pub fn pca_baseline(crops: &[SkeletonCrop], dim: usize) -> Result<EmbeddingSet> {
    let Some(first) = crops.first() else {
        return Err(contract("PCA baseline needs a non-empty corpus"));
    };
    let width = first.dims.len();
    if crops.iter().any(|c| c.dims != first.dims) {
        return Err(contract("PCA baseline needs crops of one geometry"));
    }
    let rows = crops.iter().map(support).collect::<Result<Vec<_>>>()?;
    let pca = Pca::fit_binary(&rows, width, dim)?;
    let vectors = rows.iter().map(|r| pca.project_binary(r)).collect();
    EmbeddingSet::new(
        crops.iter().map(|c| c.subject_id.clone()).collect(),
        vectors,
        format!("pca-{dim}"),
    )
}

/// Labels of `subjects` from the manifest.
pub fn labels_for(manifest: &[ManifestRow], subjects: &[String]) -> Result<Vec<u8>> {
    let index: BTreeMap<&str, Option<u8>> = manifest
        .iter()
        .map(|r| (r.subject_id.as_str(), r.label))
        .collect();
    subjects
        .iter()
        .map(|s| match index.get(s.as_str()) {
            Some(Some(l)) => Ok(*l),
            Some(None) => Err(contract(format!("subject {s} has no label"))),
            None => Err(contract(format!("subject {s} is not in the manifest"))),
        })
        .collect()
}

/// Fits the probe on `split.part1` and returns the AUC on `split.part2`.
pub fn probe_auc(e: &EmbeddingSet, manifest: &[ManifestRow], split: &Split, c: f64) -> Result<f64> {
    let train_x = e.select(&split.part1)?;
    let train_y = labels_for(manifest, &split.part1)?;
    let test_x = e.select(&split.part2)?;
    let test_y = labels_for(manifest, &split.part2)?;
    let model = fit_linear_probe(&train_x, &train_y, c)?;
    auc(&predict_scores(&model, &test_x)?, &test_y)
}

/// AUCs of several models with their mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucReport {
    pub aucs: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single model.
    pub sd: f64,
    pub n: usize,
}

impl AucReport {
    pub fn from_aucs(aucs: Vec<f64>) -> Result<Self> {
        let n = aucs.len();
        if n == 0 {
            return Err(contract("report needs at least one AUC"));
        }
        let mean = aucs.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (aucs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Ok(AucReport { aucs, mean, sd, n })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// CSV `seed,auc`, one row per model.
    pub fn to_csv(&self, seeds: &[u64]) -> Result<String> {
        if seeds.len() != self.aucs.len() {
            return Err(contract(format!(
                "{} seeds for {} AUCs",
                seeds.len(),
                self.aucs.len()
            )));
        }
        let mut out = String::from("seed,auc\n");
        for (s, a) in seeds.iter().zip(&self.aucs) {
            out.push_str(&format!("{s},{}\n", format_f64(*a)));
        }
        Ok(out)
    }
}

/// Probe AUC of every embedding set on the same split.
pub fn evaluate_report(
    embeddings: &[EmbeddingSet],
    manifest: &[ManifestRow],
    split: &Split,
    c: f64,
) -> Result<AucReport> {
    if embeddings.is_empty() {
        return Err(contract("report needs at least one model"));
    }
    let aucs = embeddings
        .iter()
        .map(|e| probe_auc(e, manifest, split, c))
        .collect::<Result<Vec<_>>>()?;
    AucReport::from_aucs(aucs)
}
