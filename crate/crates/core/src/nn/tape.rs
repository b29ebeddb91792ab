//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its output and enough saved state
//! to run its vector-Jacobian product. [`Tape::backward`] walks the nodes in
//! reverse order, so a node's gradient is complete before it is propagated.

use rand::Rng;

use super::conv::{
    col2im, gemm, im2col, sparse_entries, sparse_forward, sparse_weight_grad, ConvGeom,
    SparseSample,
};
use super::tensor::Tensor;
use crate::error::{contract, Result};
use crate::seed::mix64;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    Relu(Var),
    /// Per-element multiplier: 0 for dropped units, `1/(1-p)` for survivors.
    Dropout(Var, Vec<f64>),
    Reshape(Var),
    /// `x[B, in] · wᵀ + b`
    Affine {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv3d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        unfolded: Unfolded,
    },
}

/// How a convolution's input is revisited by the weight gradient.
enum Unfolded {
    /// Re-unfold the (dense) input with im2col, one sample at a time.
    Dense,
    /// Non-zero entries per sample; used for sparse constant inputs.
    Sparse(Vec<SparseSample>),
}

/// Constant inputs at or below this density take the scatter path.
const SPARSE_DENSITY: f64 = 0.25;

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable input: gradients flow into it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant input: no gradient is computed for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(contract(format!(
                "shape mismatch {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a.max(0.0)).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let ng = self.needs(x);
        self.push(value, Op::Relu(x), ng)
    }

    /// Inverted dropout; `training == false` or `p == 0` records an identity.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(contract(format!(
                "dropout probability must be in [0, 1), got {p}"
            )));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        // One draw from `rng` keys a counter-based hash stream for the mask.
        let key: u64 = rng.gen();
        let threshold = (p * 2f64.powi(64)) as u64;
        let mask: Vec<f64> = (0..self.value(x).len() as u64)
            .map(|i| {
                if mix64(key ^ mix64(i)) < threshold {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let v = self.value(x);
        let data = v.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Tensor::new(v.shape().to_vec(), data)?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::Dropout(x, mask), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::Reshape(x), ng))
    }

    /// `x[B, in]`, `w[out, in]`, `b[out]` → `[B, out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (
            self.value(x).shape(),
            self.value(w).shape(),
            self.value(b).shape(),
        );
        if xs.len() != 2 || ws.len() != 2 || bs != [ws[0]] || xs[1] != ws[1] {
            return Err(contract(format!("affine shapes x{xs:?} w{ws:?} b{bs:?}")));
        }
        let (batch, fan_in, fan_out) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0; batch * fan_out];
        for row in out.chunks_mut(fan_out.max(1)) {
            row.copy_from_slice(self.value(b).data());
        }
        gemm(
            batch,
            fan_in,
            fan_out,
            self.value(x).data(),
            (fan_in, 1),
            self.value(w).data(),
            (1, fan_in),
            1.0,
            &mut out,
            fan_out,
        );
        let value = Tensor::new(vec![batch, fan_out], out)?;
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(value, Op::Affine { x, w, b }, ng))
    }

    /// 3D convolution with kernel 3 and zero padding 1.
    ///
    /// `x[B, cin, d, h, w]`, `w[cout, cin, 3, 3, 3]`, `b[cout]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (xs, ws, bs) = (
            self.value(x).shape(),
            self.value(w).shape(),
            self.value(b).shape(),
        );
        if xs.len() != 5
            || ws.len() != 5
            || ws[1] != xs[1]
            || ws[2..] != [3, 3, 3]
            || bs != [ws[0]]
            || stride == 0
        {
            return Err(contract(format!(
                "conv3d shapes x{xs:?} w{ws:?} b{bs:?} stride {stride}"
            )));
        }
        let batch = xs[0];
        let geom = ConvGeom::new(xs[1], ws[0], [xs[2], xs[3], xs[4]], stride);
        let (k, p) = (geom.patch_len(), geom.out_spatial());
        let in_len = geom.cin * geom.in_spatial();
        let out_len = geom.cout * p;
        let mut out = vec![0.0; batch * out_len];
        let bias = self.value(b).data();
        let weight = self.value(w).data();
        let input = self.value(x).data();
        for (o, _) in out.chunks_mut(out_len).zip(0..batch) {
            for (co, plane) in o.chunks_mut(p).enumerate() {
                plane.fill(bias[co]);
            }
        }
        let density =
            input.iter().filter(|&&v| v != 0.0).count() as f64 / input.len().max(1) as f64;
        let unfolded = if !self.needs(x) && density <= SPARSE_DENSITY {
            let entries: Vec<SparseSample> = input.chunks(in_len).map(sparse_entries).collect();
            for (e, o) in entries.iter().zip(out.chunks_mut(out_len)) {
                sparse_forward(&geom, e, weight, o);
            }
            Unfolded::Sparse(entries)
        } else {
            let mut cols = vec![0.0; k * p];
            for s in 0..batch {
                im2col(&geom, &input[s * in_len..(s + 1) * in_len], &mut cols);
                let o = &mut out[s * out_len..(s + 1) * out_len];
                gemm(geom.cout, k, p, weight, (k, 1), &cols, (p, 1), 1.0, o, p);
            }
            Unfolded::Dense
        };
        let [od, oh, ow] = geom.out_dims;
        let value = Tensor::new(vec![batch, geom.cout, od, oh, ow], out)?;
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(
            value,
            Op::Conv3d {
                x,
                w,
                b,
                geom,
                unfolded,
            },
            ng,
        ))
    }

    /// Reverse pass from a scalar node.
    pub fn backward_scalar(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(contract("backward_scalar needs a single-element root"));
        }
        self.backward(
            root,
            Tensor::new(self.value(root).shape().to_vec(), vec![1.0])?,
        )
    }

    /// Reverse pass seeded with `seed = ∂L/∂root` for some downstream scalar `L`.
    pub fn backward(&self, root: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.value(root).shape() {
            return Err(contract(format!(
                "seed shape {:?} does not match root {:?}",
                seed.shape(),
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        // Intermediate gradients are only kept for leaves.
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.needs_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let shaped = |v: Var, data: Vec<f64>| {
            Tensor::new(self.value(v).shape().to_vec(), data).expect("shape")
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        accumulate(&mut grads[v.0], g.clone());
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let d = g
                        .data()
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(x, y)| x * y)
                        .collect();
                    accumulate(&mut grads[a.0], shaped(*a, d));
                }
                if self.needs(*b) {
                    let d = g
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(x, y)| x * y)
                        .collect();
                    accumulate(&mut grads[b.0], shaped(*b, d));
                }
            }
            Op::Sum(x) => {
                let d = vec![g.data()[0]; self.value(*x).len()];
                accumulate(&mut grads[x.0], shaped(*x, d));
            }
            Op::Relu(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(gi, y)| if *y > 0.0 { *gi } else { 0.0 })
                    .collect();
                accumulate(&mut grads[x.0], shaped(*x, d));
            }
            Op::Dropout(x, mask) => {
                let d = g.data().iter().zip(mask).map(|(gi, m)| gi * m).collect();
                accumulate(&mut grads[x.0], shaped(*x, d));
            }
            Op::Reshape(x) => {
                accumulate(&mut grads[x.0], shaped(*x, g.data().to_vec()));
            }
            Op::Affine { x, w, b } => {
                let xs = self.value(*x).shape();
                let (batch, fan_in) = (xs[0], xs[1]);
                let fan_out = self.value(*w).shape()[0];
                if self.needs(*x) {
                    let mut dx = vec![0.0; batch * fan_in];
                    gemm(
                        batch,
                        fan_out,
                        fan_in,
                        g.data(),
                        (fan_out, 1),
                        self.value(*w).data(),
                        (fan_in, 1),
                        0.0,
                        &mut dx,
                        fan_in,
                    );
                    accumulate(&mut grads[x.0], shaped(*x, dx));
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; fan_out * fan_in];
                    gemm(
                        fan_out,
                        batch,
                        fan_in,
                        g.data(),
                        (1, fan_out),
                        self.value(*x).data(),
                        (fan_in, 1),
                        0.0,
                        &mut dw,
                        fan_in,
                    );
                    accumulate(&mut grads[w.0], shaped(*w, dw));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; fan_out];
                    for row in g.data().chunks(fan_out) {
                        db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                    }
                    accumulate(&mut grads[b.0], shaped(*b, db));
                }
            }
            Op::Conv3d {
                x,
                w,
                b,
                geom,
                unfolded,
            } => {
                let batch = self.value(*x).shape()[0];
                let (k, p) = (geom.patch_len(), geom.out_spatial());
                let out_len = geom.cout * p;
                let in_len = geom.cin * geom.in_spatial();
                if self.needs(*w) {
                    let mut dw = vec![0.0; geom.weight_len()];
                    let mut cols = match unfolded {
                        Unfolded::Dense => vec![0.0; k * p],
                        Unfolded::Sparse(_) => Vec::new(),
                    };
                    let input = self.value(*x).data();
                    for s in 0..batch {
                        let go = &g.data()[s * out_len..(s + 1) * out_len];
                        match unfolded {
                            Unfolded::Dense => {
                                im2col(geom, &input[s * in_len..(s + 1) * in_len], &mut cols);
                                gemm(geom.cout, p, k, go, (p, 1), &cols, (1, p), 1.0, &mut dw, k);
                            }
                            Unfolded::Sparse(entries) => {
                                sparse_weight_grad(geom, &entries[s], go, &mut dw)
                            }
                        }
                    }
                    accumulate(&mut grads[w.0], shaped(*w, dw));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; geom.cout];
                    for sample in g.data().chunks(out_len) {
                        for (co, plane) in sample.chunks(p).enumerate() {
                            db[co] += plane.iter().sum::<f64>();
                        }
                    }
                    accumulate(&mut grads[b.0], shaped(*b, db));
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; batch * in_len];
                    let mut dcols = vec![0.0; k * p];
                    for s in 0..batch {
                        let go = &g.data()[s * out_len..(s + 1) * out_len];
                        gemm(
                            k,
                            geom.cout,
                            p,
                            self.value(*w).data(),
                            (1, k),
                            go,
                            (p, 1),
                            0.0,
                            &mut dcols,
                            p,
                        );
                        col2im(geom, &dcols, &mut dx[s * in_len..(s + 1) * in_len]);
                    }
                    accumulate(&mut grads[x.0], shaped(*x, dx));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dot_gradient_is_the_other_factor() {
        let mut t = Tape::new();
        let w = t.param(Tensor::scalar(0.7));
        let x = t.constant(Tensor::scalar(3.0));
        let y = t.mul(w, x).unwrap();
        let g = t.backward_scalar(y).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[3.0]);
        assert!(g.get(x).is_none());
    }

    #[test]
    fn constant_has_zero_gradient() {
        let mut t = Tape::new();
        let w = t.param(Tensor::from_vec(vec![1.0, 2.0]));
        let c = t.constant(Tensor::from_vec(vec![5.0]));
        let s = t.sum(c);
        let g = t.backward_scalar(s).unwrap();
        // The parameter never reaches the root.
        assert!(g.get(w).is_none());
    }

    #[test]
    fn shared_input_accumulates() {
        // y = sum(x * x) => dy/dx = 2x
        let mut t = Tape::new();
        let x = t.param(Tensor::from_vec(vec![1.0, -2.0, 0.5]));
        let sq = t.mul(x, x).unwrap();
        let y = t.sum(sq);
        let g = t.backward_scalar(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = Tape::new();
        let x = t.param(Tensor::from_vec(vec![1.0; 8]));
        assert_eq!(t.dropout(x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(t.dropout(x, 0.5, false, &mut rng).unwrap(), x);
        assert!(t.dropout(x, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn affine_forward_values() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let w = t.param(Tensor::new(vec![1, 2], vec![0.5, -1.0]).unwrap());
        let b = t.param(Tensor::from_vec(vec![10.0]));
        let y = t.affine(x, w, b).unwrap();
        assert_eq!(t.value(y).data(), &[8.5, 7.5]);
        let s = t.sum(y);
        let g = t.backward_scalar(s).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(g.get(b).unwrap().data(), &[2.0]);
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[1, 2, 4, 4, 4]));
        let w = t.param(Tensor::zeros(&[3, 1, 3, 3, 3]));
        let b = t.param(Tensor::zeros(&[3]));
        assert!(t.conv3d(x, w, b, 1).is_err());
    }
}
