//! Independent oracles shared by the integration tests and the acceptance
//! runner.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sulcal_ssl::contrastive::nt_xent_loss_and_grad;
use sulcal_ssl::nn::model::record_forward;
use sulcal_ssl::nn::{init_params, ConvNetConfig, HeadKind, Mode, ModelParams, Tape, Tensor};
use sulcal_ssl::skeleton::{Dims, ManifestRow};

/// NT-Xent written out literally: two nested loops, no shared terms.
pub fn loss_two_loop(z: &[Vec<f64>], tau: f64) -> f64 {
    let sim = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let mut total = 0.0;
    for i in 0..z.len() {
        let j = if i % 2 == 0 { i + 1 } else { i - 1 };
        let num = (sim(&z[i], &z[j]) / tau).exp();
        let mut den = 0.0;
        for k in 0..z.len() {
            if k != i {
                den += (sim(&z[i], &z[k]) / tau).exp();
            }
        }
        total += -(num / den).ln();
    }
    total
}

/// Pairwise-counting AUC.
pub fn auc_pairs(scores: &[f64], labels: &[u8]) -> f64 {
    let mut num = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (k, &sk) in scores.iter().enumerate() {
            if labels[k] != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sk {
                num += 1.0;
            } else if si == sk {
                num += 0.5;
            }
        }
    }
    num / pairs
}

/// Input grid of the gradient check.
pub const TINY_DIMS: Dims = Dims::new(7, 9, 8);

pub fn tiny_model(seed: u64) -> ModelParams {
    let cfg = ConvNetConfig {
        in_dims: TINY_DIMS,
        channels: vec![2; 6],
        latent_dim: 4,
        ..ConvNetConfig::default()
    };
    let mut p = init_params(&cfg, HeadKind::NonLinear, seed).unwrap();
    // Non-zero biases so every bias gradient is exercised.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    for t in p.tensors_mut() {
        if t.rank() == 1 {
            for v in t.data_mut() {
                *v = rng.gen_range(-0.1..0.1);
            }
        }
    }
    p
}

/// Four sparse binary volumes: two positive pairs whose partners share most
/// of their voxels.
pub fn view_batch(seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e57);
    let n = TINY_DIMS.len();
    let mut data = Vec::new();
    for _ in 0..2 {
        let base: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.15)).collect();
        for _ in 0..2 {
            data.extend(
                base.iter()
                    .map(|&b| f64::from(u8::from(b && rng.gen_bool(0.8)))),
            );
        }
    }
    let [x, y, z] = TINY_DIMS.as_array();
    Tensor::new(vec![4, 1, x, y, z], data).unwrap()
}

fn loss_and_grads(
    params: &ModelParams,
    batch: &Tensor,
    tau: f64,
    dropout_seed: u64,
) -> (f64, Vec<Tensor>) {
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let rec = record_forward(params, &mut tape, batch.clone(), Mode::Train, &mut rng).unwrap();
    let (loss, dz) = nt_xent_loss_and_grad(tape.value(rec.projection), tau).unwrap();
    let mut g = tape.backward(rec.projection, dz).unwrap();
    (
        loss,
        rec.params.iter().map(|&v| g.take(v).unwrap()).collect(),
    )
}

/// Largest relative disagreement between the analytic gradient and central
/// differences over every parameter. Differences below `floor` in both
/// estimates count as agreement in absolute terms.
pub fn gradient_check(seed: u64, eps: f64, floor: f64) -> (f64, usize) {
    let params = tiny_model(seed);
    let batch = view_batch(seed);
    let tau = 0.5;
    let (_, analytic) = loss_and_grads(&params, &batch, tau, seed);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    for (t, grad) in analytic.iter().enumerate() {
        for i in 0..grad.len() {
            let eval = |delta: f64| {
                let mut p = params.clone();
                p.tensors_mut()[t].data_mut()[i] += delta;
                let mut tape = Tape::new();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let rec =
                    record_forward(&p, &mut tape, batch.clone(), Mode::Train, &mut rng).unwrap();
                sulcal_ssl::contrastive::nt_xent_loss(tape.value(rec.projection), tau).unwrap()
            };
            let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let a = grad.data()[i];
            let scale = a.abs().max(fd.abs()).max(floor);
            let rel = (a - fd).abs() / scale;
            if rel > worst {
                worst = rel;
                if rel > 1e-3 {
                    eprintln!("  {}[{i}]: analytic {a:e}, difference {fd:e}", names[t]);
                }
            }
            checked += 1;
        }
    }
    (worst, checked)
}

/// Random manifest with a few sites, both genders and both labels.
pub fn random_manifest(rng: &mut ChaCha8Rng, n: usize) -> Vec<ManifestRow> {
    let sites = rng.gen_range(1..=4);
    (0..n)
        .map(|i| ManifestRow {
            subject_id: format!("s{i}"),
            path: String::new(),
            label: Some(rng.gen_range(0..=1)),
            site: Some(format!("site{}", rng.gen_range(0..sites))),
            gender: Some(if rng.gen_bool(0.5) { "F" } else { "M" }.to_string()),
        })
        .collect()
}
