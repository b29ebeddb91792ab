//! Six-layer 3D convolutional backbone with a linear or two-layer projection head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::conv::ConvGeom;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{contract, Result};
use crate::skeleton::Dims;

pub const CONV_LAYERS: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvNetConfig {
    pub in_dims: Dims,
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub strides: Vec<usize>,
    pub latent_dim: usize,
    pub dropout_p: f64,
}

impl Default for ConvNetConfig {
    fn default() -> Self {
        ConvNetConfig {
            in_dims: Dims::CROP,
            channels: vec![4, 8, 8, 8, 8, 8],
            kernel: 3,
            strides: vec![2, 2, 2, 1, 1, 1],
            latent_dim: 10,
            dropout_p: 0.05,
        }
    }
}

impl ConvNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != CONV_LAYERS || self.strides.len() != CONV_LAYERS {
            return Err(contract(format!(
                "backbone needs exactly {CONV_LAYERS} layers (channels {:?}, strides {:?})",
                self.channels, self.strides
            )));
        }
        if self.kernel != 3 {
            return Err(contract(format!(
                "only kernel 3 is supported, got {}",
                self.kernel
            )));
        }
        if self.channels.contains(&0) || self.strides.contains(&0) {
            return Err(contract("channels and strides must be positive"));
        }
        if self.latent_dim == 0 {
            return Err(contract("latent_dim must be positive"));
        }
        if self.in_dims.is_empty() {
            return Err(contract("input dims must be non-empty"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(contract(format!(
                "dropout_p must be in [0, 1), got {}",
                self.dropout_p
            )));
        }
        Ok(())
    }

    /// Geometry of every convolution, input first.
    pub fn layer_geoms(&self) -> Vec<ConvGeom> {
        let mut dims = self.in_dims.as_array();
        let mut cin = 1;
        self.channels
            .iter()
            .zip(&self.strides)
            .map(|(&cout, &stride)| {
                let g = ConvGeom::new(cin, cout, dims, stride);
                dims = g.out_dims;
                cin = cout;
                g
            })
            .collect()
    }

    /// Length of the flattened last feature map.
    pub fn flat_len(&self) -> usize {
        let last = *self.layer_geoms().last().expect("six layers");
        last.cout * last.out_spatial()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Linear,
    #[serde(rename = "nonlinear", alias = "non_linear")]
    NonLinear,
}

impl std::str::FromStr for HeadKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "linear" => Ok(HeadKind::Linear),
            "nonlinear" | "non_linear" => Ok(HeadKind::NonLinear),
            _ => Err(format!(
                "unknown head kind '{s}' (expected linear|nonlinear)"
            )),
        }
    }
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            HeadKind::Linear => "linear",
            HeadKind::NonLinear => "nonlinear",
        })
    }
}

/// Affine layer parameters: `weight[out, in]`, `bias[out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Map from the latent space to the space the contrastive loss sees.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    pub kind: HeadKind,
    /// One layer for `Linear`, two (hidden width = d) for `NonLinear`.
    pub layers: Vec<Dense>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: ConvNetConfig,
    pub head: HeadKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// Convolution kernels `[cout, cin, 3, 3, 3]` and biases.
    pub convs: Vec<Dense>,
    /// Flattened features to latent.
    pub fc: Dense,
    pub head: ProjectionHead,
}

fn uniform_tensor(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

fn dense(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Dense {
    Dense {
        weight: uniform_tensor(&[fan_out, fan_in], fan_in, fan_out, rng),
        bias: Tensor::zeros(&[fan_out]),
    }
}

/// Fan-balanced uniform weights, zero biases.
pub fn init_params(cfg: &ConvNetConfig, head_kind: HeadKind, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let convs = cfg
        .layer_geoms()
        .iter()
        .map(|g| Dense {
            weight: uniform_tensor(&[g.cout, g.cin, 3, 3, 3], g.cin * 27, g.cout * 27, &mut rng),
            bias: Tensor::zeros(&[g.cout]),
        })
        .collect();
    let d = cfg.latent_dim;
    let fc = dense(cfg.flat_len(), d, &mut rng);
    let layers = match head_kind {
        HeadKind::Linear => vec![dense(d, d, &mut rng)],
        HeadKind::NonLinear => vec![dense(d, d, &mut rng), dense(d, d, &mut rng)],
    };
    Ok(ModelParams {
        config: ModelConfig {
            backbone: cfg.clone(),
            head: head_kind,
        },
        convs,
        fc,
        head: ProjectionHead {
            kind: head_kind,
            layers,
        },
    })
}

impl ModelParams {
    /// Every tensor with a stable name, in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.push((format!("conv{i}.weight"), &c.weight));
            out.push((format!("conv{i}.bias"), &c.bias));
        }
        out.push(("fc.weight".into(), &self.fc.weight));
        out.push(("fc.bias".into(), &self.fc.bias));
        for (i, l) in self.head.layers.iter().enumerate() {
            out.push((format!("head{i}.weight"), &l.weight));
            out.push((format!("head{i}.bias"), &l.bias));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for c in &mut self.convs {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out.push(&mut self.fc.weight);
        out.push(&mut self.fc.bias);
        for l in &mut self.head.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }

    pub fn latent_dim(&self) -> usize {
        self.config.backbone.latent_dim
    }
}

/// Forward pass recorded on a tape.
pub struct Recorded {
    /// Parameter leaves in [`ModelParams::named_tensors`] order.
    pub params: Vec<Var>,
    pub latent: Var,
    pub projection: Var,
}

/// Whether dropout is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn check_batch(cfg: &ConvNetConfig, batch: &Tensor) -> Result<()> {
    let [x, y, z] = cfg.in_dims.as_array();
    let s = batch.shape();
    if s.len() != 5 || s[0] == 0 || s[1..] != [1, x, y, z] {
        return Err(contract(format!(
            "expected batch [B>=1, 1, {x}, {y}, {z}], got {s:?}"
        )));
    }
    Ok(())
}

/// Records backbone and head on `tape`; `rng` drives dropout in train mode.
pub fn record_forward<R: Rng + ?Sized>(
    params: &ModelParams,
    tape: &mut Tape,
    batch: Tensor,
    mode: Mode,
    rng: &mut R,
) -> Result<Recorded> {
    let cfg = &params.config.backbone;
    check_batch(cfg, &batch)?;
    let b = batch.shape()[0];
    let mut vars = Vec::new();
    let mut h = tape.constant(batch);
    for (layer, stride) in params.convs.iter().zip(&cfg.strides) {
        let w = tape.param(layer.weight.clone());
        let bias = tape.param(layer.bias.clone());
        vars.extend([w, bias]);
        h = tape.conv3d(h, w, bias, *stride)?;
        h = tape.relu(h);
        h = tape.dropout(h, cfg.dropout_p, mode == Mode::Train, rng)?;
    }
    let flat = tape.reshape(h, &[b, cfg.flat_len()])?;
    let w = tape.param(params.fc.weight.clone());
    let bias = tape.param(params.fc.bias.clone());
    vars.extend([w, bias]);
    let latent = tape.affine(flat, w, bias)?;
    let (projection, head_vars) = record_head(&params.head, tape, latent)?;
    vars.extend(head_vars);
    Ok(Recorded {
        params: vars,
        latent,
        projection,
    })
}

fn record_head(head: &ProjectionHead, tape: &mut Tape, latent: Var) -> Result<(Var, Vec<Var>)> {
    let mut vars = Vec::new();
    let mut h = latent;
    for (i, layer) in head.layers.iter().enumerate() {
        if i > 0 {
            h = tape.relu(h);
        }
        let w = tape.param(layer.weight.clone());
        let b = tape.param(layer.bias.clone());
        vars.extend([w, b]);
        h = tape.affine(h, w, b)?;
    }
    Ok((h, vars))
}

/// Backbone latent `[B, d]` in eval mode.
pub fn forward_backbone(params: &ModelParams, batch: Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let rec = record_forward(params, &mut tape, batch, Mode::Eval, &mut unused)?;
    Ok(tape.value(rec.latent).clone())
}

/// Projection of a latent batch `[B, d]`.
pub fn forward_head(head: &ProjectionHead, latent: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let z = tape.constant(latent.clone());
    let (out, _) = record_head(head, &mut tape, z)?;
    Ok(tape.value(out).clone())
}

/// Inverted dropout outside of a tape: zero with probability `p`, scale
/// survivors by `1/(1-p)`; identity in eval mode.
pub fn dropout_apply<R: Rng + ?Sized>(
    t: &Tensor,
    p: f64,
    rng: &mut R,
    training: bool,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(t.clone());
    let y = tape.dropout(x, p, training, rng)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ConvNetConfig {
        ConvNetConfig {
            in_dims: Dims::new(6, 7, 5),
            channels: vec![2; 6],
            latent_dim: 4,
            ..ConvNetConfig::default()
        }
    }

    #[test]
    fn init_is_seeded() {
        let a = init_params(&tiny(), HeadKind::Linear, 1).unwrap();
        let b = init_params(&tiny(), HeadKind::Linear, 1).unwrap();
        let c = init_params(&tiny(), HeadKind::Linear, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn init_bounds_per_layer() {
        let cfg = ConvNetConfig::default();
        let p = init_params(&cfg, HeadKind::NonLinear, 5).unwrap();
        for (g, layer) in cfg.layer_geoms().iter().zip(&p.convs) {
            let a = (6.0 / ((g.cin + g.cout) * 27) as f64).sqrt();
            assert!(layer
                .weight
                .data()
                .iter()
                .all(|w| w.abs() < a && w.abs() < 1.0));
            assert!(layer.bias.data().iter().all(|&b| b == 0.0));
        }
        assert!(p.is_finite());
        assert_eq!(p.head.layers.len(), 2);
    }

    #[test]
    fn rejects_wrong_layer_count() {
        let cfg = ConvNetConfig {
            channels: vec![4; 5],
            ..ConvNetConfig::default()
        };
        assert!(init_params(&cfg, HeadKind::Linear, 0).is_err());
    }

    #[test]
    fn zero_batch_gives_final_bias() {
        let mut p = init_params(&tiny(), HeadKind::Linear, 3).unwrap();
        p.fc.bias = Tensor::from_vec(vec![0.1, -0.2, 0.3, 0.4]);
        let out = forward_backbone(&p, Tensor::zeros(&[3, 1, 6, 7, 5])).unwrap();
        assert_eq!(out.shape(), &[3, 4]);
        for r in 0..3 {
            assert_eq!(out.row(r), &[0.1, -0.2, 0.3, 0.4]);
        }
    }

    #[test]
    fn shape_mismatch_is_a_contract_error() {
        let p = init_params(&tiny(), HeadKind::Linear, 3).unwrap();
        assert!(forward_backbone(&p, Tensor::zeros(&[1, 1, 6, 7, 6])).is_err());
        assert!(forward_backbone(&p, Tensor::zeros(&[0, 1, 6, 7, 5])).is_err());
    }

    #[test]
    fn head_algebra() {
        let d = 3;
        let mut eye = Tensor::zeros(&[d, d]);
        for i in 0..d {
            eye.data_mut()[i * d + i] = 1.0;
        }
        let linear = ProjectionHead {
            kind: HeadKind::Linear,
            layers: vec![Dense {
                weight: eye.clone(),
                bias: Tensor::zeros(&[d]),
            }],
        };
        let z = Tensor::new(vec![2, d], vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.0]).unwrap();
        assert_eq!(forward_head(&linear, &z).unwrap(), z);

        let b1 = Tensor::from_vec(vec![1.0, -1.0, 2.0]);
        let w2 = Tensor::new(
            vec![d, d],
            vec![1.0, 2.0, 3.0, 0.0, 1.0, 0.0, -1.0, 0.0, 1.0],
        )
        .unwrap();
        let b2 = Tensor::from_vec(vec![0.5, 0.0, 0.0]);
        let nonlinear = ProjectionHead {
            kind: HeadKind::NonLinear,
            layers: vec![
                Dense {
                    weight: eye,
                    bias: b1,
                },
                Dense {
                    weight: w2,
                    bias: b2,
                },
            ],
        };
        // ReLU(b1) = [1, 0, 2]; W2·[1,0,2] + b2 = [7.5, 0, 1]
        let out = forward_head(&nonlinear, &Tensor::zeros(&[1, d])).unwrap();
        assert_eq!(out.data(), &[7.5, 0.0, 1.0]);
    }

    #[test]
    fn dropout_rate_and_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = Tensor::from_vec(vec![1.0; 100_000]);
        assert_eq!(dropout_apply(&t, 0.0, &mut rng, true).unwrap(), t);
        assert_eq!(dropout_apply(&t, 0.3, &mut rng, false).unwrap(), t);
        let p = 0.05;
        let out = dropout_apply(&t, p, &mut rng, true).unwrap();
        let zeros = out.data().iter().filter(|&&v| v == 0.0).count() as f64 / 1e5;
        assert!((zeros - p).abs() < 0.01, "zero rate {zeros}");
        let mean = out.data().iter().sum::<f64>() / 1e5;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    }
}
