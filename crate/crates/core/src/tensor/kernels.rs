//! f32-storage kernels for the encoder forward pass. Every reduction
//! accumulates in f64 and rows are processed independently, so results do
//! not depend on how rows are distributed across threads.

use super::DenseTensor;
use crate::par;

const ROW_BLOCK: usize = 8;

/// `x · w + b` for `x: [n, in]`, `w: [in, out]`.
pub fn linear(x: &DenseTensor, w: &DenseTensor, bias: Option<&DenseTensor>) -> DenseTensor {
    let (n, din) = x.dims2().expect("linear input is 2-D");
    let (win, dout) = w.dims2().expect("linear weight is 2-D");
    assert_eq!(din, win, "linear inner dimension");
    let wd = w.data();
    let bd = bias.map(|b| b.data());
    let mut out = vec![0f32; n * dout];
    par::for_each_chunk_mut(&mut out, dout.max(1) * ROW_BLOCK, |block, chunk| {
        let mut acc = vec![0f64; dout];
        for (r, orow) in chunk.chunks_mut(dout.max(1)).enumerate() {
            let xrow = x.row(block * ROW_BLOCK + r);
            match bd {
                Some(b) => acc.iter_mut().zip(b).for_each(|(a, &bv)| *a = bv as f64),
                None => acc.iter_mut().for_each(|a| *a = 0.0),
            }
            for (p, &xv) in xrow.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let xv = xv as f64;
                let wrow = &wd[p * dout..(p + 1) * dout];
                for (a, &wv) in acc.iter_mut().zip(wrow) {
                    *a += xv * wv as f64;
                }
            }
            for (o, a) in orow.iter_mut().zip(&acc) {
                *o = *a as f32;
            }
        }
    });
    DenseTensor::new(vec![n, dout], out).expect("linear output shape")
}

/// Row-wise layer normalisation with affine parameters.
pub fn layer_norm(x: &DenseTensor, gamma: &DenseTensor, beta: &DenseTensor, eps: f64) -> DenseTensor {
    let (n, d) = x.dims2().expect("layer_norm input is 2-D");
    let (g, b) = (gamma.data(), beta.data());
    let mut out = vec![0f32; n * d];
    par::for_each_chunk_mut(&mut out, d.max(1) * ROW_BLOCK, |block, chunk| {
        for (r, orow) in chunk.chunks_mut(d.max(1)).enumerate() {
            let xrow = x.row(block * ROW_BLOCK + r);
            let mean = xrow.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = xrow.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                orow[j] = (((xrow[j] as f64 - mean) * inv) * g[j] as f64 + b[j] as f64) as f32;
            }
        }
    });
    DenseTensor::new(vec![n, d], out).expect("layer_norm output shape")
}

/// Complementary error function (Chebyshev fit, fractional error < 1.2e-7).
pub fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let poly = -z * z - 1.265_512_23
        + t * (1.000_023_68
            + t * (0.374_091_96
                + t * (0.096_784_18
                    + t * (-0.186_288_06
                        + t * (0.278_868_07
                            + t * (-1.135_203_98 + t * (1.488_515_87 + t * (-0.822_152_23 + t * 0.170_872_77))))))));
    let ans = t * poly.exp();
    if x >= 0.0 {
        ans
    } else {
        2.0 - ans
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * erfc(-x / std::f64::consts::SQRT_2)
}

pub fn map_inplace(x: &mut DenseTensor, f: impl Fn(f64) -> f64 + Sync + Send) {
    let n = x.len();
    par::for_each_chunk_mut(x.data_mut(), 4096.min(n.max(1)), |_, chunk| {
        chunk.iter_mut().for_each(|v| *v = f(*v as f64) as f32);
    });
}

/// Row-wise `a + scale ⊙ b` (`scale` broadcast over rows when given).
pub fn add_scaled(a: &DenseTensor, b: &DenseTensor, scale: Option<&DenseTensor>) -> DenseTensor {
    assert_eq!(a.shape(), b.shape(), "add_scaled shapes");
    let d = *a.shape().last().unwrap_or(&1);
    let data = match scale {
        Some(s) => a
            .data()
            .iter()
            .zip(b.data())
            .enumerate()
            .map(|(i, (&x, &y))| (x as f64 + s.data()[i % d] as f64 * y as f64) as f32)
            .collect(),
        None => a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect(),
    };
    DenseTensor::new(a.shape().to_vec(), data).expect("add_scaled shape")
}

/// Multi-head scaled dot-product attention.
///
/// `q`, `k`, `v` are `[n, d]` with heads laid out contiguously along `d`.
/// Returns the concatenated head outputs `[n, d]` and the post-softmax
/// weights `[heads, n, n]`.
pub fn multi_head_attention(
    q: &DenseTensor,
    k: &DenseTensor,
    v: &DenseTensor,
    heads: usize,
) -> (DenseTensor, DenseTensor) {
    let (n, d) = q.dims2().expect("attention q is 2-D");
    assert!(heads > 0 && d % heads == 0, "head count must divide width");
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut probs = vec![0f32; heads * n * n];
    // One chunk per (head, query row).
    par::for_each_chunk_mut(&mut probs, n.max(1), |idx, row| {
        let h = idx / n.max(1);
        let i = idx % n.max(1);
        let qi = &q.row(i)[h * hd..(h + 1) * hd];
        let mut logits = vec![0f64; n];
        for (j, l) in logits.iter_mut().enumerate() {
            let kj = &k.row(j)[h * hd..(h + 1) * hd];
            *l = qi.iter().zip(kj).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() * scale;
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - max).exp();
            sum += *l;
        }
        for (r, l) in row.iter_mut().zip(&logits) {
            *r = (l / sum) as f32;
        }
    });
    let mut out = vec![0f32; n * d];
    par::for_each_chunk_mut(&mut out, d.max(1), |i, orow| {
        let mut acc = vec![0f64; d];
        for h in 0..heads {
            let prow = &probs[(h * n + i) * n..(h * n + i + 1) * n];
            for (j, &p) in prow.iter().enumerate() {
                let vj = &v.row(j)[h * hd..(h + 1) * hd];
                for (a, &vv) in acc[h * hd..(h + 1) * hd].iter_mut().zip(vj) {
                    *a += p as f64 * vv as f64;
                }
            }
        }
        for (o, a) in orow.iter_mut().zip(&acc) {
            *o = *a as f32;
        }
    });
    (
        DenseTensor::new(vec![n, d], out).expect("attention output shape"),
        DenseTensor::new(vec![heads, n, n], probs).expect("attention weight shape"),
    )
}
