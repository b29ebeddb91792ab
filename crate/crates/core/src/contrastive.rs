//! NT-Xent loss, the SimCLR training loop, embedding extraction and the
//! collapse metric.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{make_view_pair, AugmentSpec};
use crate::error::{contract, Error, Result};
use crate::nn::model::{record_forward, Recorded};
use crate::nn::{init_params, Adam, ConvNetConfig, HeadKind, Mode, ModelParams, Tape, Tensor};
use crate::parallel;
use crate::seed;
use crate::skeleton::{DenseVolume, Dims, SkeletonCrop};

/// Rows per tape during training. Fixed so the gradient reduction order does
/// not depend on the number of workers.
const CHUNK_ROWS: usize = 8;

/// Subjects per forward pass during embedding.
const EMBED_BATCH: usize = 32;

// Stream tags for derived seeds.
const INIT: u64 = 1;
const SHUFFLE: u64 = 2;
const VIEWS: u64 = 3;
const DROPOUT: u64 = 4;

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(
        a.len(),
        b.len(),
        "cosine_sim on vectors of different length"
    );
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        log::warn!("cosine similarity of a zero vector taken as 0 (degenerate embedding)");
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Positive partner of row `i`: rows `2k` and `2k + 1` form a pair.
pub fn positive(i: usize) -> usize {
    i ^ 1
}

fn check_z(z: &Tensor, tau: f64) -> Result<(usize, usize)> {
    if !(tau > 0.0) {
        return Err(contract(format!("temperature must be positive, got {tau}")));
    }
    let s = z.shape();
    if s.len() != 2 || s[0] == 0 || !s[0].is_multiple_of(2) {
        return Err(contract(format!(
            "expected Z of shape [2N, d] with N >= 1, got {s:?}"
        )));
    }
    Ok((s[0], s[1]))
}

fn unit_rows(z: &Tensor, rows: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut units = Vec::with_capacity(rows);
    let mut norms = Vec::with_capacity(rows);
    for i in 0..rows {
        let r = z.row(i);
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 {
            log::warn!("zero projection row {i}; its similarities are taken as 0");
            units.push(vec![0.0; r.len()]);
        } else {
            units.push(r.iter().map(|v| v / n).collect());
        }
        norms.push(n);
    }
    (units, norms)
}

/// Per-anchor log-softmax pieces: `(similarity matrix, logsumexp per row)`.
fn similarities(units: &[Vec<f64>], tau: f64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let rows = units.len();
    let sim: Vec<Vec<f64>> = (0..rows)
        .map(|i| {
            (0..rows)
                .map(|k| {
                    units[i]
                        .iter()
                        .zip(&units[k])
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                })
                .collect()
        })
        .collect();
    let lse = (0..rows)
        .map(|i| {
            let m = (0..rows)
                .filter(|&k| k != i)
                .map(|k| sim[i][k] / tau)
                .fold(f64::NEG_INFINITY, f64::max);
            m + (0..rows)
                .filter(|&k| k != i)
                .map(|k| (sim[i][k] / tau - m).exp())
                .sum::<f64>()
                .ln()
        })
        .collect();
    (sim, lse)
}

/// Sum over all `2N` anchors of `-log(exp(s_ip/τ) / Σ_{k≠i} exp(s_ik/τ))`.
pub fn nt_xent_loss(z: &Tensor, tau: f64) -> Result<f64> {
    let (rows, _) = check_z(z, tau)?;
    let (units, _) = unit_rows(z, rows);
    let (sim, lse) = similarities(&units, tau);
    Ok((0..rows).map(|i| lse[i] - sim[i][positive(i)] / tau).sum())
}

/// Loss and its gradient with respect to `z`.
pub fn nt_xent_loss_and_grad(z: &Tensor, tau: f64) -> Result<(f64, Tensor)> {
    let (rows, d) = check_z(z, tau)?;
    let (units, norms) = unit_rows(z, rows);
    let (sim, lse) = similarities(&units, tau);
    let loss = (0..rows).map(|i| lse[i] - sim[i][positive(i)] / tau).sum();

    // g[i][k] = dL/ds_ik treating the ordered pair (i, k) on its own.
    let mut g = vec![vec![0.0; rows]; rows];
    for i in 0..rows {
        for k in 0..rows {
            if k != i {
                g[i][k] = (sim[i][k] / tau - lse[i]).exp() / tau;
            }
        }
        g[i][positive(i)] -= 1.0 / tau;
    }
    let mut grad = vec![0.0; rows * d];
    for i in 0..rows {
        if norms[i] == 0.0 {
            continue;
        }
        let mut du = vec![0.0; d];
        for k in 0..rows {
            let w = g[i][k] + g[k][i];
            if w != 0.0 {
                for (o, u) in du.iter_mut().zip(&units[k]) {
                    *o += w * u;
                }
            }
        }
        let proj: f64 = du.iter().zip(&units[i]).map(|(a, b)| a * b).sum();
        for j in 0..d {
            grad[i * d + j] = (du[j] - proj * units[i][j]) / norms[i];
        }
    }
    Ok((loss, Tensor::new(vec![rows, d], grad)?))
}

/// Every hyperparameter of a contrastive training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub tau: f64,
    pub epochs: usize,
    pub latent_dim: usize,
    pub head: HeadKind,
    pub augment: AugmentSpec,
    pub dropout_p: f64,
    pub seed: u64,
    /// Backbone output channels per layer.
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let net = ConvNetConfig::default();
        TrainConfig {
            lr: 4e-4,
            batch_size: 16,
            tau: 0.5,
            epochs: 100,
            latent_dim: net.latent_dim,
            head: HeadKind::Linear,
            augment: AugmentSpec::branch_clip(),
            dropout_p: net.dropout_p,
            seed: 0,
            channels: net.channels,
            strides: net.strides,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Validation(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Validation(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Validation(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        self.augment.validate()?;
        self.backbone(Dims::CROP).validate()
    }

    pub fn backbone(&self, in_dims: Dims) -> ConvNetConfig {
        ConvNetConfig {
            in_dims,
            channels: self.channels.clone(),
            kernel: 3,
            strides: self.strides.clone(),
            latent_dim: self.latent_dim,
            dropout_p: self.dropout_p,
        }
    }
}

/// Result of [`train`]: final weights and the mean loss of every epoch.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub losses: Vec<f64>,
}

fn volume_tensor(volumes: &[&DenseVolume], dims: Dims) -> Result<Tensor> {
    let mut data = Vec::with_capacity(volumes.len() * dims.len());
    for v in volumes {
        data.extend(v.values.iter().map(|&x| f64::from(x)));
    }
    let [x, y, z] = dims.as_array();
    Tensor::new(vec![volumes.len(), 1, x, y, z], data)
}

/// Batches of one epoch: a seeded shuffle cut into `batch_size` pieces. A
/// trailing piece is kept when it still holds a pair of subjects.
fn epoch_batches(n: usize, cfg: &TrainConfig, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, &[SHUFFLE, epoch as u64]));
    order.shuffle(&mut rng);
    order
        .chunks(cfg.batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Forward and backward of one batch. Returns the loss and parameter
/// gradients in [`ModelParams::named_tensors`] order.
fn batch_step(
    params: &ModelParams,
    crops: &[SkeletonCrop],
    batch: &[usize],
    cfg: &TrainConfig,
    epoch: usize,
    index: usize,
) -> Result<(f64, Vec<Tensor>)> {
    let dims = params.config.backbone.in_dims;
    let pairs = batch
        .par_iter()
        .map(|&s| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, &[VIEWS, epoch as u64, s as u64]));
            make_view_pair(&crops[s], &cfg.augment, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<&DenseVolume> = pairs.iter().flat_map(|p| [&p.view1, &p.view2]).collect();
    let chunks: Vec<&[&DenseVolume]> = views.chunks(CHUNK_ROWS).collect();

    let forwards = chunks
        .par_iter()
        .enumerate()
        .map(|(c, vols)| {
            let mut tape = Tape::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(
                cfg.seed,
                &[DROPOUT, epoch as u64, index as u64, c as u64],
            ));
            let rec = record_forward(
                params,
                &mut tape,
                volume_tensor(vols, dims)?,
                Mode::Train,
                &mut rng,
            )?;
            Ok((tape, rec))
        })
        .collect::<Result<Vec<(Tape, Recorded)>>>()?;

    let d = params.latent_dim();
    let mut z = Vec::with_capacity(views.len() * d);
    for (tape, rec) in &forwards {
        z.extend_from_slice(tape.value(rec.projection).data());
    }
    let z = Tensor::new(vec![views.len(), d], z)?;
    let (loss, dz) = nt_xent_loss_and_grad(&z, cfg.tau)?;
    if !loss.is_finite() || !dz.is_finite() {
        return Err(Error::NonFiniteLoss {
            epoch,
            batch: index,
        });
    }

    let mut offset = 0;
    let seeds: Vec<Tensor> = forwards
        .iter()
        .map(|(tape, rec)| {
            let rows = tape.value(rec.projection).shape()[0];
            let part = dz.data()[offset * d..(offset + rows) * d].to_vec();
            offset += rows;
            Tensor::new(vec![rows, d], part)
        })
        .collect::<Result<_>>()?;
    let grads = forwards
        .par_iter()
        .zip(seeds)
        .map(|((tape, rec), seed)| {
            let mut g = tape.backward(rec.projection, seed)?;
            rec.params
                .iter()
                .map(|&v| {
                    g.take(v)
                        .ok_or_else(|| contract("parameter without gradient"))
                })
                .collect::<Result<Vec<Tensor>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = grads.into_iter();
    let mut acc = total.next().expect("at least one chunk");
    for g in total {
        for (a, b) in acc.iter_mut().zip(&g) {
            a.add_assign(b);
        }
    }
    Ok((loss, acc))
}

/// Trains a fresh model on `crops` with `threads` workers. The result is
/// bitwise identical for any worker count.
pub fn train(crops: &[SkeletonCrop], cfg: &TrainConfig, threads: usize) -> Result<TrainOutcome> {
    train_with_progress(crops, cfg, threads, |_, _| {})
}

/// [`train`] with a callback receiving `(epoch, mean loss)` after every epoch.
pub fn train_with_progress(
    crops: &[SkeletonCrop],
    cfg: &TrainConfig,
    threads: usize,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if crops.len() < cfg.batch_size {
        return Err(contract(format!(
            "corpus has {} crops, fewer than the batch size {}",
            crops.len(),
            cfg.batch_size
        )));
    }
    let dims = crops[0].dims;
    if let Some(c) = crops.iter().find(|c| c.dims != dims) {
        return Err(contract(format!(
            "crop {} has dims {:?}, expected {:?}",
            c.subject_id,
            c.dims.as_array(),
            dims.as_array()
        )));
    }
    let mut params = init_params(
        &cfg.backbone(dims),
        cfg.head,
        seed::derive(cfg.seed, &[INIT]),
    )?;
    let mut adam = Adam::new(cfg.lr);
    let pool = parallel::pool(threads)?;
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let batches = epoch_batches(crops.len(), cfg, epoch);
        let mut sum = 0.0;
        for (index, batch) in batches.iter().enumerate() {
            let (loss, grads) =
                pool.install(|| batch_step(&params, crops, batch, cfg, epoch, index))?;
            adam.step(params.tensors_mut(), &grads)?;
            if !params.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: index,
                });
            }
            sum += loss;
        }
        let mean = sum / batches.len() as f64;
        log::info!("epoch {} loss {mean:.6}", epoch + 1);
        progress(epoch + 1, mean);
        losses.push(mean);
    }
    Ok(TrainOutcome { params, losses })
}

/// Which representation [`embed`] returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    /// Backbone output, the space the probe is meant for.
    #[default]
    Latent,
    /// Projection head output.
    Projection,
}

impl std::str::FromStr for Representation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "latent" => Ok(Representation::Latent),
            "projection" => Ok(Representation::Projection),
            other => Err(Error::Validation(format!(
                "unknown representation {other:?} (expected latent or projection)"
            ))),
        }
    }
}

/// Subject id to embedding vector, in corpus order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub ids: Vec<String>,
    pub vectors: Vec<Vec<f64>>,
    /// Which checkpoint (or baseline) produced the vectors.
    pub source: String,
}

impl EmbeddingSet {
    pub fn new(
        ids: Vec<String>,
        vectors: Vec<Vec<f64>>,
        source: impl Into<String>,
    ) -> Result<Self> {
        if ids.len() != vectors.len() {
            return Err(contract(format!(
                "{} ids for {} vectors",
                ids.len(),
                vectors.len()
            )));
        }
        let dim = vectors.first().map_or(0, Vec::len);
        if vectors.iter().any(|v| v.len() != dim) {
            return Err(contract("embedding vectors differ in length"));
        }
        if vectors.iter().flatten().any(|v| !v.is_finite()) {
            return Err(contract("embedding contains non-finite values"));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(contract(format!("duplicate subject id {dup}")));
        }
        Ok(EmbeddingSet {
            ids,
            vectors,
            source: source.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.ids
            .iter()
            .position(|i| i == id)
            .map(|k| self.vectors[k].as_slice())
    }

    /// Vectors of `subjects`, in that order.
    pub fn select(&self, subjects: &[String]) -> Result<Vec<Vec<f64>>> {
        let index: std::collections::HashMap<&str, usize> = self
            .ids
            .iter()
            .enumerate()
            .map(|(k, id)| (id.as_str(), k))
            .collect();
        subjects
            .iter()
            .map(|s| {
                index
                    .get(s.as_str())
                    .map(|&k| self.vectors[k].clone())
                    .ok_or_else(|| contract(format!("no embedding for subject {s}")))
            })
            .collect()
    }

    /// CSV with header `subject_id,z0,...`; values use 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("subject_id");
        for j in 0..self.dim() {
            out.push_str(&format!(",z{j}"));
        }
        out.push('\n');
        for (id, v) in self.ids.iter().zip(&self.vectors) {
            out.push_str(id);
            for x in v {
                out.push(',');
                out.push_str(&format_f64(*x));
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        if header.get(0) != Some("subject_id") {
            return Err(contract(format!(
                "{} lacks a subject_id column",
                path.display()
            )));
        }
        let mut ids = Vec::new();
        let mut vectors = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            ids.push(rec[0].to_string());
            let v = rec
                .iter()
                .skip(1)
                .map(|s| {
                    s.parse::<f64>().map_err(|e| {
                        contract(format!("bad value {s:?} in {}: {e}", path.display()))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            vectors.push(v);
        }
        EmbeddingSet::new(ids, vectors, path.display().to_string())
    }
}

/// Round-trip decimal rendering with 17 significant digits.
pub fn format_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Embeds every crop in eval mode (binarized input, no dropout, no
/// augmentation).
pub fn embed(
    params: &ModelParams,
    crops: &[SkeletonCrop],
    repr: Representation,
    source: &str,
    threads: usize,
) -> Result<EmbeddingSet> {
    let dims = params.config.backbone.in_dims;
    if let Some(c) = crops.iter().find(|c| c.dims != dims) {
        return Err(contract(format!(
            "crop {} has dims {:?} but the model expects {:?}",
            c.subject_id,
            c.dims.as_array(),
            dims.as_array()
        )));
    }
    let pool = parallel::pool(threads)?;
    let blocks = pool.install(|| {
        crops
            .par_chunks(EMBED_BATCH)
            .map(|chunk| {
                let vols = chunk
                    .iter()
                    .map(|c| crate::skeleton::rasterize(c).map(|v| v.binarized()))
                    .collect::<Result<Vec<_>>>()?;
                let refs: Vec<&DenseVolume> = vols.iter().collect();
                let mut tape = Tape::new();
                let mut unused = ChaCha8Rng::seed_from_u64(0);
                let rec = record_forward(
                    params,
                    &mut tape,
                    volume_tensor(&refs, dims)?,
                    Mode::Eval,
                    &mut unused,
                )?;
                let out = match repr {
                    Representation::Latent => rec.latent,
                    Representation::Projection => rec.projection,
                };
                let t = tape.value(out);
                Ok((0..chunk.len())
                    .map(|i| t.row(i).to_vec())
                    .collect::<Vec<_>>())
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let ids = crops.iter().map(|c| c.subject_id.clone()).collect();
    EmbeddingSet::new(ids, blocks.into_iter().flatten().collect(), source)
}

/// Mean over dimensions of the (population) standard deviation across
/// subjects. Near zero means every subject lands in the same place.
pub fn collapse_metric(e: &EmbeddingSet) -> Result<f64> {
    let n = e.len();
    if n < 2 {
        return Err(contract(format!(
            "collapse metric needs at least 2 embeddings, got {n}"
        )));
    }
    let d = e.dim();
    if d == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for j in 0..d {
        let mean = e.vectors.iter().map(|v| v[j]).sum::<f64>() / n as f64;
        let var = e.vectors.iter().map(|v| (v[j] - mean).powi(2)).sum::<f64>() / n as f64;
        total += var.sqrt();
    }
    Ok(total / d as f64)
}

/// Loss curve as CSV `epoch,loss`, epochs counted from 1.
pub fn write_loss_csv(losses: &[f64], path: &Path) -> Result<()> {
    let mut out = String::from("epoch,loss\n");
    for (i, l) in losses.iter().enumerate() {
        out.push_str(&format!("{},{}\n", i + 1, format_f64(*l)));
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> Tensor {
        let d = rows[0].len();
        Tensor::new(
            vec![rows.len(), d],
            rows.iter().flat_map(|r| r.iter().copied()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn cosine_cases() {
        let v = [1.0, -2.0, 0.5];
        assert!((cosine_sim(&v, &v) - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((cosine_sim(&v, &neg) + 1.0).abs() < 1e-15);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert_eq!(cosine_sim(&[0.0, 0.0], &[0.0, 1.0]), 0.0);
    }

    #[test]
    fn single_pair_has_zero_loss() {
        let z = mat(&[&[0.3, -1.0], &[2.0, 0.7]]);
        assert_eq!(nt_xent_loss(&z, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn orthonormal_pairs() {
        let z = mat(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[0.0, 1.0]]);
        let expected = 4.0 * (1.0 + 2.0 / std::f64::consts::E).ln();
        assert!((nt_xent_loss(&z, 1.0).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn bad_temperature_rejected() {
        let z = mat(&[&[1.0], &[1.0]]);
        assert!(nt_xent_loss(&z, 0.0).is_err());
        assert!(nt_xent_loss(&z, -1.0).is_err());
    }

    #[test]
    fn gradient_matches_differences() {
        let z = mat(&[
            &[0.3, -1.0, 0.2],
            &[2.0, 0.7, -0.4],
            &[-0.5, 0.1, 1.1],
            &[0.9, 0.9, 0.3],
            &[0.05, -0.8, -0.6],
            &[1.2, 0.0, 0.4],
        ]);
        let tau = 0.3;
        let (_, g) = nt_xent_loss_and_grad(&z, tau).unwrap();
        let eps = 1e-6;
        for i in 0..z.len() {
            let mut p = z.clone();
            p.data_mut()[i] += eps;
            let mut m = z.clone();
            m.data_mut()[i] -= eps;
            let fd =
                (nt_xent_loss(&p, tau).unwrap() - nt_xent_loss(&m, tau).unwrap()) / (2.0 * eps);
            assert!(
                (fd - g.data()[i]).abs() <= 1e-5 * fd.abs().max(1.0),
                "{i}: {fd} vs {}",
                g.data()[i]
            );
        }
    }

    #[test]
    fn collapse_of_identity_rows() {
        let n = 5;
        let ids = (0..n).map(|i| i.to_string()).collect();
        let vectors = (0..n)
            .map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect())
            .collect();
        let e = EmbeddingSet::new(ids, vectors, "eye").unwrap();
        let expected = ((n - 1) as f64).sqrt() / n as f64;
        assert!((collapse_metric(&e).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn identical_embeddings_collapse() {
        let e =
            EmbeddingSet::new(vec!["a".into(), "b".into()], vec![vec![1.0, 2.0]; 2], "c").unwrap();
        assert_eq!(collapse_metric(&e).unwrap(), 0.0);
    }

    #[test]
    fn embedding_csv_round_trip() {
        let e = EmbeddingSet::new(
            vec!["s1".into(), "s2".into()],
            vec![vec![0.1, -1.0 / 3.0], vec![1e-300, 12345.678]],
            "t",
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        e.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("subject_id,z0,z1\n"));
        let back = EmbeddingSet::read_csv(&p).unwrap();
        assert_eq!(back.vectors, e.vectors);
    }

    #[test]
    fn duplicate_ids_rejected() {
        assert!(EmbeddingSet::new(vec!["a".into(), "a".into()], vec![vec![1.0]; 2], "x").is_err());
    }
}
