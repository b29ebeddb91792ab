//! Kernels for 3D convolution (kernel 3, zero padding 1) via im2col + gemm.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

pub const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL * KERNEL;

/// Static geometry of one convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
    pub stride: usize,
}

impl ConvGeom {
    pub fn new(cin: usize, cout: usize, in_dims: [usize; 3], stride: usize) -> Self {
        let out = |n: usize| (n - 1) / stride + 1;
        ConvGeom {
            cin,
            cout,
            in_dims,
            out_dims: [out(in_dims[0]), out(in_dims[1]), out(in_dims[2])],
            stride,
        }
    }

    pub fn in_spatial(&self) -> usize {
        self.in_dims.iter().product()
    }

    pub fn out_spatial(&self) -> usize {
        self.out_dims.iter().product()
    }

    /// Rows of the unfolded input (`cin * 27`).
    pub fn patch_len(&self) -> usize {
        self.cin * TAPS
    }

    pub fn weight_len(&self) -> usize {
        self.cout * self.patch_len()
    }
}

/// `c = alpha * a·b + beta * c` for row-major operands with explicit strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
    c_row_stride: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last =
        |rows: usize, cols: usize, (rs, cs): (usize, usize)| (rows - 1) * rs + (cols - 1) * cs;
    if k > 0 {
        assert!(last(m, k, a_strides) < a.len());
        assert!(last(k, n, b_strides) < b.len());
    }
    assert!(last(m, n, (c_row_stride, 1)) < c.len());
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            c_row_stride as isize,
            1,
        );
    }
}

#[inline]
fn tap_source(out: usize, stride: usize, tap: usize, extent: usize) -> Option<usize> {
    let i = (out * stride + tap).checked_sub(1)?;
    (i < extent).then_some(i)
}

/// Source index of every im2col entry; padding taps point at `pad`, one
/// past the end of a sample.
struct GatherTable {
    idx: Vec<u32>,
    pad: usize,
}

impl GatherTable {
    fn build(g: &ConvGeom) -> Self {
        let [d, h, w] = g.in_dims;
        let [od, oh, ow] = g.out_dims;
        let pad = g.cin * g.in_spatial();
        let mut idx = Vec::with_capacity(g.patch_len() * g.out_spatial());
        for ci in 0..g.cin {
            for kd in 0..KERNEL {
                for kh in 0..KERNEL {
                    for kw in 0..KERNEL {
                        for zd in 0..od {
                            for zh in 0..oh {
                                for zw in 0..ow {
                                    let src = match (
                                        tap_source(zd, g.stride, kd, d),
                                        tap_source(zh, g.stride, kh, h),
                                        tap_source(zw, g.stride, kw, w),
                                    ) {
                                        (Some(a), Some(b), Some(c)) => {
                                            ((ci * d + a) * h + b) * w + c
                                        }
                                        _ => pad,
                                    };
                                    idx.push(src as u32);
                                }
                            }
                        }
                    }
                }
            }
        }
        debug_assert!(idx.iter().all(|&i| i as usize <= pad));
        GatherTable { idx, pad }
    }
}

thread_local! {
    static TABLES: RefCell<HashMap<ConvGeom, Rc<GatherTable>>> = RefCell::new(HashMap::new());
}

fn table(g: &ConvGeom) -> Rc<GatherTable> {
    // Output channels do not change the gather pattern.
    let key = ConvGeom { cout: 0, ..*g };
    TABLES.with(|t| {
        t.borrow_mut()
            .entry(key)
            .or_insert_with(|| Rc::new(GatherTable::build(g)))
            .clone()
    })
}

/// Unfolds one sample `x[cin, d, h, w]` into `cols[cin*27, P]`.
pub fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let t = table(g);
    let mut padded = Vec::with_capacity(t.pad + 1);
    padded.extend_from_slice(&x[..t.pad]);
    padded.push(0.0);
    assert_eq!(cols.len(), t.idx.len());
    for (c, &i) in cols.iter_mut().zip(&t.idx) {
        // SAFETY: every table entry is at most `pad`, the last index of `padded`.
        *c = unsafe { *padded.get_unchecked(i as usize) };
    }
}

/// Adjoint of [`im2col`]: accumulates `cols[cin*27, P]` into `dx[cin, d, h, w]`.
pub fn col2im(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let t = table(g);
    let mut padded = vec![0.0; t.pad + 1];
    assert_eq!(cols.len(), t.idx.len());
    for (&c, &i) in cols.iter().zip(&t.idx) {
        // SAFETY: every table entry is at most `pad`, the last index of `padded`.
        unsafe { *padded.get_unchecked_mut(i as usize) += c };
    }
    for (d, p) in dx[..t.pad].iter_mut().zip(&padded) {
        *d += p;
    }
}

/// Non-zero entries of a sparse input, as `(channel-major flat index, value)`
/// per sample.
pub type SparseSample = Vec<(u32, f64)>;

pub fn sparse_entries(x: &[f64]) -> SparseSample {
    x.iter()
        .enumerate()
        .filter(|(_, &v)| v != 0.0)
        .map(|(i, &v)| (i as u32, v))
        .collect()
}

/// Visits every (input entry, weight tap, output position) triple that a
/// dense convolution would multiply with a non-zero input.
#[inline]
fn for_each_contribution(
    g: &ConvGeom,
    entries: &SparseSample,
    mut f: impl FnMut(f64, usize, usize),
) {
    let [d, h, w] = g.in_dims;
    let [od, oh, ow] = g.out_dims;
    let s = g.stride;
    // Input coordinate a is reached from output o through tap k when a = o*s + k - 1.
    let reach = |a: usize, outs: usize, k: usize| -> Option<usize> {
        let t = a + 1;
        if t < k || !(t - k).is_multiple_of(s) {
            return None;
        }
        let o = (t - k) / s;
        (o < outs).then_some(o)
    };
    for &(flat, v) in entries {
        let flat = flat as usize;
        let ci = flat / (d * h * w);
        let rem = flat % (d * h * w);
        let (a, b, c) = (rem / (h * w), (rem / w) % h, rem % w);
        for kd in 0..KERNEL {
            let Some(zd) = reach(a, od, kd) else { continue };
            for kh in 0..KERNEL {
                let Some(zh) = reach(b, oh, kh) else { continue };
                for kw in 0..KERNEL {
                    let Some(zw) = reach(c, ow, kw) else { continue };
                    let tap = ((ci * KERNEL + kd) * KERNEL + kh) * KERNEL + kw;
                    f(v, tap, (zd * oh + zh) * ow + zw);
                }
            }
        }
    }
}

/// Forward convolution of a sparse sample into `out[cout, P]` (bias not added).
pub fn sparse_forward(g: &ConvGeom, entries: &SparseSample, weight: &[f64], out: &mut [f64]) {
    let p = g.out_spatial();
    let k = g.patch_len();
    for_each_contribution(g, entries, |v, tap, pos| {
        for co in 0..g.cout {
            out[co * p + pos] += v * weight[co * k + tap];
        }
    });
}

/// Accumulates the weight gradient of a sparse sample given `grad_out[cout, P]`.
pub fn sparse_weight_grad(g: &ConvGeom, entries: &SparseSample, grad_out: &[f64], dw: &mut [f64]) {
    let p = g.out_spatial();
    let k = g.patch_len();
    for_each_contribution(g, entries, |v, tap, pos| {
        for co in 0..g.cout {
            dw[co * k + tap] += v * grad_out[co * p + pos];
        }
    });
}

/// Direct (loop-nest) convolution of one sample; reference for tests.
#[cfg(test)]
pub(crate) fn conv_reference(g: &ConvGeom, x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let [d, h, w] = g.in_dims;
    let [od, oh, ow] = g.out_dims;
    let mut out = vec![0.0; g.cout * g.out_spatial()];
    for co in 0..g.cout {
        for zd in 0..od {
            for zh in 0..oh {
                for zw in 0..ow {
                    let mut acc = bias[co];
                    for ci in 0..g.cin {
                        for kd in 0..3 {
                            for kh in 0..3 {
                                for kw in 0..3 {
                                    let (id, ih, iw) = (
                                        (zd * g.stride + kd) as isize - 1,
                                        (zh * g.stride + kh) as isize - 1,
                                        (zw * g.stride + kw) as isize - 1,
                                    );
                                    if id < 0 || ih < 0 || iw < 0 {
                                        continue;
                                    }
                                    let (id, ih, iw) = (id as usize, ih as usize, iw as usize);
                                    if id >= d || ih >= h || iw >= w {
                                        continue;
                                    }
                                    let wi = (((co * g.cin + ci) * 3 + kd) * 3 + kh) * 3 + kw;
                                    acc += weight[wi] * x[((ci * d + id) * h + ih) * w + iw];
                                }
                            }
                        }
                    }
                    out[((co * od + zd) * oh + zh) * ow + zw] = acc;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn output_extent_with_padding_one() {
        let g = ConvGeom::new(1, 1, [17, 40, 38], 2);
        assert_eq!(g.out_dims, [9, 20, 19]);
        let g = ConvGeom::new(1, 1, [17, 40, 38], 1);
        assert_eq!(g.out_dims, [17, 40, 38]);
    }

    #[test]
    fn im2col_gemm_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for stride in [1, 2, 3] {
            let g = ConvGeom::new(2, 3, [5, 6, 7], stride);
            let x: Vec<f64> = (0..2 * g.in_spatial())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let wt: Vec<f64> = (0..g.weight_len())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let bias = vec![0.5, -0.25, 0.0];
            let p = g.out_spatial();
            let mut cols = vec![0.0; g.patch_len() * p];
            im2col(&g, &x, &mut cols);
            let mut out = vec![0.0; g.cout * p];
            gemm(
                g.cout,
                g.patch_len(),
                p,
                &wt,
                (g.patch_len(), 1),
                &cols,
                (p, 1),
                0.0,
                &mut out,
                p,
            );
            for co in 0..g.cout {
                out[co * p..(co + 1) * p]
                    .iter_mut()
                    .for_each(|v| *v += bias[co]);
            }
            let want = conv_reference(&g, &x, &wt, &bias);
            for (a, b) in out.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sparse_path_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for stride in [1, 2, 3] {
            let g = ConvGeom::new(2, 3, [7, 8, 9], stride);
            let x: Vec<f64> = (0..2 * g.in_spatial())
                .map(|_| if rng.gen::<f64>() < 0.1 { 1.0 } else { 0.0 })
                .collect();
            let wt: Vec<f64> = (0..g.weight_len())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let entries = sparse_entries(&x);
            let mut out = vec![0.0; g.cout * g.out_spatial()];
            sparse_forward(&g, &entries, &wt, &mut out);
            let want = conv_reference(&g, &x, &wt, &[0.0; 3]);
            for (a, b) in out.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }

            let go: Vec<f64> = (0..out.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut dw = vec![0.0; g.weight_len()];
            sparse_weight_grad(&g, &entries, &go, &mut dw);
            let p = g.out_spatial();
            let mut cols = vec![0.0; g.patch_len() * p];
            im2col(&g, &x, &mut cols);
            let mut dense_dw = vec![0.0; g.weight_len()];
            gemm(
                g.cout,
                p,
                g.patch_len(),
                &go,
                (p, 1),
                &cols,
                (1, p),
                0.0,
                &mut dense_dw,
                g.patch_len(),
            );
            for (a, b) in dw.iter().zip(&dense_dw) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn col2im_is_the_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for stride in [1, 2, 3] {
            let g = ConvGeom::new(2, 1, [4, 5, 6], stride);
            let x: Vec<f64> = (0..2 * g.in_spatial())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let c: Vec<f64> = (0..g.patch_len() * g.out_spatial())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let mut cols = vec![0.0; c.len()];
            im2col(&g, &x, &mut cols);
            let mut back = vec![0.0; x.len()];
            col2im(&g, &c, &mut back);
            let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }
}
