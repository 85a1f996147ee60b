//! Differentiable operations and their backward rules.

use crate::autodiff::gemm::{gemm, Layout};
use crate::autodiff::tape::{GradAccum, Node, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor added to the product of norms in [`Tape::cosine_similarity`].
pub const COSINE_EPS: f64 = 1e-8;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRow { x: Var, b: Var },
    Scale { x: Var, c: f64 },
    ScaleBy { x: Var, s: Var },
    MulRows { x: Var, g: Var },
    Tanh { x: Var },
    Gelu { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Softmax { x: Var, outer: usize, n: usize, inner: usize },
    Cosine { a: Var, b: Var },
    Mse { a: Var, b: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, pad: usize, probs: Vec<f64>, count: usize },
    Sum { x: Var },
    Mean { x: Var },
    GatherRows { x: Var, idx: Vec<usize> },
    SelectRows { a: Var, b: Var, take_b: Vec<bool> },
    ConcatCols { a: Var, b: Var },
    ConcatRows { a: Var, b: Var },
    Transpose { x: Var },
    NormalizeRows { x: Var, eps: f64 },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
}

impl Op {
    pub fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul { a, b }
            | Add { a, b }
            | Sub { a, b }
            | Mul { a, b }
            | Cosine { a, b }
            | Mse { a, b }
            | SelectRows { a, b, .. }
            | ConcatCols { a, b }
            | ConcatRows { a, b } => vec![*a, *b],
            AddRow { x, b } => vec![*x, *b],
            ScaleBy { x, s } => vec![*x, *s],
            MulRows { x, g } => vec![*x, *g],
            Scale { x, .. }
            | Tanh { x }
            | Gelu { x }
            | Softmax { x, .. }
            | Sum { x }
            | Mean { x }
            | GatherRows { x, .. }
            | Transpose { x }
            | NormalizeRows { x, .. } => vec![*x],
            CrossEntropy { logits, .. } => vec![*logits],
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Attention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }

    pub fn backward(&self, out: &Tensor, g: &[f64], nodes: &[Node], acc: &mut GradAccum<'_>) {
        let val = |v: &Var| &nodes[v.0].value;
        match self {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = val(a).dims2().unwrap();
                let n = val(b).cols();
                if acc.wants(*a) {
                    acc.accumulate_with(*a, m * k, |ga, beta| {
                        gemm(m, n, k, 1.0, g, Layout::row_major(n), val(b).data(), Layout::transposed(n), beta, ga, Layout::row_major(k));
                    });
                }
                if acc.wants(*b) {
                    acc.accumulate_with(*b, k * n, |gb, beta| {
                        gemm(k, m, n, 1.0, val(a).data(), Layout::transposed(k), g, Layout::row_major(n), beta, gb, Layout::row_major(n));
                    });
                }
            }
            Op::Add { a, b } => {
                acc.add(*a, g);
                acc.add(*b, g);
            }
            Op::Sub { a, b } => {
                acc.add(*a, g);
                if acc.wants(*b) {
                    acc.add_owned(*b, g.iter().map(|x| -x).collect());
                }
            }
            Op::Mul { a, b } => {
                if acc.wants(*a) {
                    acc.add_owned(*a, g.iter().zip(val(b).data()).map(|(g, y)| g * y).collect());
                }
                if acc.wants(*b) {
                    acc.add_owned(*b, g.iter().zip(val(a).data()).map(|(g, x)| g * x).collect());
                }
            }
            Op::AddRow { x, b } => {
                acc.add(*x, g);
                if acc.wants(*b) {
                    let f = val(b).numel();
                    let mut gb = vec![0.0; f];
                    for row in g.chunks(f) {
                        for (s, r) in gb.iter_mut().zip(row) {
                            *s += r;
                        }
                    }
                    acc.add_owned(*b, gb);
                }
            }
            Op::Scale { x, c } => {
                if acc.wants(*x) {
                    acc.add_owned(*x, g.iter().map(|v| v * c).collect());
                }
            }
            Op::ScaleBy { x, s } => {
                let sv = val(s).item();
                if acc.wants(*x) {
                    acc.add_owned(*x, g.iter().map(|v| v * sv).collect());
                }
                if acc.wants(*s) {
                    let d: f64 = g.iter().zip(val(x).data()).map(|(g, x)| g * x).sum();
                    acc.add_owned(*s, vec![d]);
                }
            }
            Op::MulRows { x, g: gate } => {
                let f = val(x).cols();
                let gv = val(gate).data();
                if acc.wants(*x) {
                    let mut gx = g.to_vec();
                    for (row, w) in gx.chunks_mut(f).zip(gv) {
                        row.iter_mut().for_each(|v| *v *= w);
                    }
                    acc.add_owned(*x, gx);
                }
                if acc.wants(*gate) {
                    let gg = g
                        .chunks(f)
                        .zip(val(x).data().chunks(f))
                        .map(|(a, b)| a.iter().zip(b).map(|(a, b)| a * b).sum())
                        .collect();
                    acc.add_owned(*gate, gg);
                }
            }
            Op::Tanh { x } => {
                acc.add_owned(*x, g.iter().zip(out.data()).map(|(g, y)| g * (1.0 - y * y)).collect());
            }
            Op::Gelu { x } => {
                let gx = g
                    .iter()
                    .zip(val(x).data())
                    .map(|(g, &x)| {
                        let u = GELU_C * (x + 0.044715 * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect();
                acc.add_owned(*x, gx);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let f = val(gain).numel();
                let gain_v = val(gain).data();
                if acc.wants(*gain) {
                    let mut gg = vec![0.0; f];
                    for (gr, xr) in g.chunks(f).zip(xhat.chunks(f)) {
                        for j in 0..f {
                            gg[j] += gr[j] * xr[j];
                        }
                    }
                    acc.add_owned(*gain, gg);
                }
                if acc.wants(*bias) {
                    let mut gb = vec![0.0; f];
                    for gr in g.chunks(f) {
                        for j in 0..f {
                            gb[j] += gr[j];
                        }
                    }
                    acc.add_owned(*bias, gb);
                }
                if acc.wants(*x) {
                    let mut gx = vec![0.0; g.len()];
                    let inv_f = 1.0 / f as f64;
                    for (r, ((gr, xr), out_r)) in g.chunks(f).zip(xhat.chunks(f)).zip(gx.chunks_mut(f)).enumerate() {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..f {
                            let d = gr[j] * gain_v[j];
                            mean_d += d;
                            mean_dx += d * xr[j];
                        }
                        mean_d *= inv_f;
                        mean_dx *= inv_f;
                        for j in 0..f {
                            let d = gr[j] * gain_v[j];
                            out_r[j] = rstd[r] * (d - mean_d - xr[j] * mean_dx);
                        }
                    }
                    acc.add_owned(*x, gx);
                }
            }
            Op::Softmax { x, outer, n, inner } => {
                let y = out.data();
                let mut gx = vec![0.0; y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let dot: f64 = (0..*n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..*n {
                            gx[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
                acc.add_owned(*x, gx);
            }
            Op::Cosine { a, b } => {
                let f = val(a).cols();
                let (av, bv) = (val(a).data(), val(b).data());
                let mut ga = vec![0.0; av.len()];
                let mut gb = vec![0.0; bv.len()];
                for (t, &gt) in g.iter().enumerate() {
                    let ar = &av[t * f..(t + 1) * f];
                    let br = &bv[t * f..(t + 1) * f];
                    let dot: f64 = ar.iter().zip(br).map(|(x, y)| x * y).sum();
                    let na = ar.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let nb = br.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let den = na * nb + COSINE_EPS;
                    let ca = if na > 0.0 { dot * nb / (na * den * den) } else { 0.0 };
                    let cb = if nb > 0.0 { dot * na / (nb * den * den) } else { 0.0 };
                    for j in 0..f {
                        ga[t * f + j] = gt * (br[j] / den - ca * ar[j]);
                        gb[t * f + j] = gt * (ar[j] / den - cb * br[j]);
                    }
                }
                acc.add_owned(*a, ga);
                acc.add_owned(*b, gb);
            }
            Op::Mse { a, b } => {
                let n = val(a).numel() as f64;
                let c = 2.0 * g[0] / n;
                let d: Vec<f64> = val(a).data().iter().zip(val(b).data()).map(|(x, y)| c * (x - y)).collect();
                if acc.wants(*b) {
                    acc.add_owned(*b, d.iter().map(|v| -v).collect());
                }
                acc.add_owned(*a, d);
            }
            Op::CrossEntropy { logits, targets, pad, probs, count } => {
                if *count == 0 {
                    return;
                }
                let v = val(logits).cols();
                let scale = g[0] / *count as f64;
                let mut gl = vec![0.0; probs.len()];
                for (r, &t) in targets.iter().enumerate() {
                    if t == *pad {
                        continue;
                    }
                    for j in 0..v {
                        gl[r * v + j] = scale * probs[r * v + j];
                    }
                    gl[r * v + t] -= scale;
                }
                acc.add_owned(*logits, gl);
            }
            Op::Sum { x } => {
                acc.add_owned(*x, vec![g[0]; val(x).numel()]);
            }
            Op::Mean { x } => {
                let n = val(x).numel();
                acc.add_owned(*x, vec![g[0] / n as f64; n]);
            }
            Op::GatherRows { x, idx } => {
                if acc.wants(*x) {
                    let f = val(x).cols();
                    let mut gx = vec![0.0; val(x).numel()];
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..f {
                            gx[src * f + j] += g[r * f + j];
                        }
                    }
                    acc.add_owned(*x, gx);
                }
            }
            Op::SelectRows { a, b, take_b } => {
                let f = out.cols();
                let pick = |from_b: bool| -> Vec<f64> {
                    let mut gx = g.to_vec();
                    for (row, &tb) in gx.chunks_mut(f).zip(take_b) {
                        if tb != from_b {
                            row.iter_mut().for_each(|v| *v = 0.0);
                        }
                    }
                    gx
                };
                if acc.wants(*a) {
                    acc.add_owned(*a, pick(false));
                }
                if acc.wants(*b) {
                    acc.add_owned(*b, pick(true));
                }
            }
            Op::ConcatCols { a, b } => {
                let fa = val(a).cols();
                let fb = val(b).cols();
                if acc.wants(*a) {
                    acc.add_owned(*a, g.chunks(fa + fb).flat_map(|r| r[..fa].to_vec()).collect());
                }
                if acc.wants(*b) {
                    acc.add_owned(*b, g.chunks(fa + fb).flat_map(|r| r[fa..].to_vec()).collect());
                }
            }
            Op::ConcatRows { a, b } => {
                let na = val(a).numel();
                acc.add(*a, &g[..na]);
                acc.add(*b, &g[na..]);
            }
            Op::Transpose { x } => {
                let (m, n) = val(x).dims2().unwrap();
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        gx[i * n + j] = g[j * m + i];
                    }
                }
                acc.add_owned(*x, gx);
            }
            Op::NormalizeRows { x, eps } => {
                let f = val(x).cols();
                let xv = val(x).data();
                let mut gx = vec![0.0; xv.len()];
                for ((xr, gr), out_r) in xv.chunks(f).zip(g.chunks(f)).zip(gx.chunks_mut(f)) {
                    let n = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let den = n + eps;
                    let proj: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    let c = if n > 0.0 { proj / (n * den * den) } else { 0.0 };
                    for j in 0..f {
                        out_r[j] = gr[j] / den - c * xr[j];
                    }
                }
                acc.add_owned(*x, gx);
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (n, d) = val(q).dims2().unwrap();
                let t = val(k).rows();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qv, kv, vv) = (val(q).data(), val(k).data(), val(v).data());
                let mut gq = vec![0.0; qv.len()];
                let mut gk = vec![0.0; kv.len()];
                let mut gv = vec![0.0; vv.len()];
                let strided = Layout { rs: d, cs: 1 };
                let mut dp = vec![0.0; n * t];
                for h in 0..*heads {
                    let off = h * dh;
                    let p = &probs[h * n * t..(h + 1) * n * t];
                    gemm(n, dh, t, 1.0, &g[off..], strided, &vv[off..], Layout { rs: 1, cs: d }, 0.0, &mut dp, Layout::row_major(t));
                    gemm(t, n, dh, 1.0, p, Layout::transposed(t), &g[off..], strided, 1.0, &mut gv[off..], strided);
                    for i in 0..n {
                        let row_p = &p[i * t..(i + 1) * t];
                        let row_d = &mut dp[i * t..(i + 1) * t];
                        let dot: f64 = row_p.iter().zip(row_d.iter()).map(|(a, b)| a * b).sum();
                        for (dd, pp) in row_d.iter_mut().zip(row_p) {
                            *dd = pp * (*dd - dot);
                        }
                    }
                    gemm(n, t, dh, scale, &dp, Layout::row_major(t), &kv[off..], strided, 1.0, &mut gq[off..], strided);
                    gemm(t, n, dh, scale, &dp, Layout::transposed(t), &qv[off..], strided, 1.0, &mut gk[off..], strided);
                }
                acc.add_owned(*q, gq);
                acc.add_owned(*k, gk);
                acc.add_owned(*v, gv);
            }
        }
    }
}

fn same_shape(tape: &Tape, a: Var, b: Var, what: &str) -> Result<()> {
    let (sa, sb) = (tape.value(a).shape(), tape.value(b).shape());
    if sa != sb {
        return Err(Error::Shape(format!("{what}: shapes {sa:?} and {sb:?} differ")));
    }
    Ok(())
}

fn elementwise(tape: &Tape, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (av, bv) = (tape.value(a), tape.value(b));
    let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::new(av.shape().to_vec(), data).expect("same shape")
}

impl Tape {
    /// Matrix product of `a[m×k]` and `b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.dims2()?;
        let (k2, n) = bv.dims2()?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul: inner dimensions disagree for {:?} · {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, 1.0, av.data(), Layout::row_major(k), bv.data(), Layout::row_major(n), 0.0, &mut c, Layout::row_major(n));
        let out = Tensor::new([m, n], c)?;
        Ok(self.push(out, Op::MatMul { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "add")?;
        let out = elementwise(self, a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "sub")?;
        let out = elementwise(self, a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub { a, b }))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "mul")?;
        let out = elementwise(self, a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul { a, b }))
    }

    /// Adds the vector `b[F]` to every row of `x[...×F]`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let f = self.value(x).cols();
        if self.value(b).numel() != f {
            return Err(Error::Shape(format!(
                "add_row: bias {:?} does not match rows of {:?}",
                self.value(b).shape(),
                self.value(x).shape()
            )));
        }
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(f) {
            for (v, b) in row.iter_mut().zip(&bias) {
                *v += b;
            }
        }
        Ok(self.push(out, Op::AddRow { x, b }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale { x, c })
    }

    /// Multiplies `x` by the scalar node `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::Shape(format!("scale_by: {:?} is not a scalar", self.value(s).shape())));
        }
        let sv = self.value(s).item();
        let out = self.value(x).map(|v| v * sv);
        Ok(self.push(out, Op::ScaleBy { x, s }))
    }

    /// Scales row `i` of `x[N×F]` by `g[i]`.
    pub fn mul_rows(&mut self, x: Var, g: Var) -> Result<Var> {
        let (n, f) = self.value(x).dims2()?;
        if self.value(g).numel() != n {
            return Err(Error::Shape(format!(
                "mul_rows: gate of length {} for {} rows",
                self.value(g).numel(),
                n
            )));
        }
        let gv = self.value(g).data().to_vec();
        let mut out = self.value(x).clone();
        for (row, w) in out.data_mut().chunks_mut(f).zip(&gv) {
            row.iter_mut().for_each(|v| *v *= w);
        }
        Ok(self.push(out, Op::MulRows { x, g }))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        self.push(out, Op::Tanh { x })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .map(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        self.push(out, Op::Gelu { x })
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let f = self.value(x).cols();
        if f == 0 || self.value(x).ndim() == 0 {
            return Err(Error::Shape("layer_norm: empty feature dimension".into()));
        }
        if self.value(gain).numel() != f || self.value(bias).numel() != f {
            return Err(Error::Shape(format!(
                "layer_norm: gain {:?} / bias {:?} do not match feature size {f}",
                self.value(gain).shape(),
                self.value(bias).shape()
            )));
        }
        let xv = self.value(x);
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.numel() / f;
        let mut xhat = vec![0.0; xv.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * f..(r + 1) * f];
            let mean = row.iter().sum::<f64>() / f as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / f as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..f {
                let h = (row[j] - mean) * s;
                xhat[r * f + j] = h;
                out[r * f + j] = h * gv[j] + bv[j];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }))
    }

    /// Max-stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidArgument(format!("softmax: axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xv = self.value(x).data();
        let mut y = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let m = (0..n).map(|j| xv[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for j in 0..n {
                    let e = (xv[idx(j)] - m).exp();
                    y[idx(j)] = e;
                    s += e;
                }
                for j in 0..n {
                    y[idx(j)] /= s;
                }
            }
        }
        let out = Tensor::new(shape, y)?;
        Ok(self.push(out, Op::Softmax { x, outer, n, inner }))
    }

    /// Row-wise cosine similarity `dot(a,b) / (|a|·|b| + ε)`; zero rows score 0.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "cosine_similarity")?;
        let (t, f) = self.value(a).dims2()?;
        let out = cosine_rows(self.value(a).data(), self.value(b).data(), t, f);
        Ok(self.push(Tensor::new([t], out)?, Op::Cosine { a, b }))
    }

    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        same_shape(self, pred, target, "mse_loss")?;
        let n = self.value(pred).numel() as f64;
        let s: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(self.push(Tensor::scalar(s / n), Op::Mse { a: pred, b: target }))
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)`, skipping `pad_id`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], pad_id: usize) -> Result<Var> {
        let (n, v) = self.value(logits).dims2()?;
        if targets.len() != n {
            return Err(Error::Shape(format!("cross_entropy: {} targets for {} rows", targets.len(), n)));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t != pad_id && t >= v) {
            return Err(Error::InvalidArgument(format!("cross_entropy: target id {bad} out of range for {v} classes")));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; n * v];
        let mut total = 0.0;
        let mut count = 0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &lv[r * v..(r + 1) * v];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|x| (x - m).exp()).sum();
            let lse = m + s.ln();
            for j in 0..v {
                probs[r * v + j] = (row[j] - lse).exp();
            }
            if t != pad_id {
                total += lse - row[t];
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), pad: pad_id, probs, count },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let s = self.value(x).mean();
        self.push(Tensor::scalar(s), Op::Mean { x })
    }

    /// Rows of `x` at `idx`, in order (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (r, f) = xv.dims2()?;
        let mut out = Vec::with_capacity(idx.len() * f);
        for &i in idx {
            if i >= r {
                return Err(Error::InvalidArgument(format!("gather_rows: row {i} out of range for {r} rows")));
            }
            out.extend_from_slice(xv.row(i));
        }
        let out = Tensor::new([idx.len(), f], out)?;
        Ok(self.push(out, Op::GatherRows { x, idx: idx.to_vec() }))
    }

    /// Row `i` comes from `b` where `take_b[i]`, else from `a`.
    pub fn select_rows(&mut self, a: Var, b: Var, take_b: &[bool]) -> Result<Var> {
        same_shape(self, a, b, "select_rows")?;
        let (n, f) = self.value(a).dims2()?;
        if take_b.len() != n {
            return Err(Error::Shape(format!("select_rows: mask of length {} for {} rows", take_b.len(), n)));
        }
        let mut out = self.value(a).clone();
        let bv = self.value(b).data();
        for (i, &tb) in take_b.iter().enumerate() {
            if tb {
                out.data_mut()[i * f..(i + 1) * f].copy_from_slice(&bv[i * f..(i + 1) * f]);
            }
        }
        Ok(self.push(out, Op::SelectRows { a, b, take_b: take_b.to_vec() }))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, fa) = self.value(a).dims2()?;
        let (n2, fb) = self.value(b).dims2()?;
        if n != n2 {
            return Err(Error::Shape(format!("concat_cols: {n} rows vs {n2} rows")));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(n * (fa + fb));
        for i in 0..n {
            out.extend_from_slice(av.row(i));
            out.extend_from_slice(bv.row(i));
        }
        let out = Tensor::new([n, fa + fb], out)?;
        Ok(self.push(out, Op::ConcatCols { a, b }))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, f) = self.value(a).dims2()?;
        let (nb, f2) = self.value(b).dims2()?;
        if f != f2 {
            return Err(Error::Shape(format!("concat_rows: {f} columns vs {f2} columns")));
        }
        let mut out = self.value(a).data().to_vec();
        out.extend_from_slice(self.value(b).data());
        let out = Tensor::new([na + nb, f], out)?;
        Ok(self.push(out, Op::ConcatRows { a, b }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        let xv = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xv[i * n + j];
            }
        }
        let out = Tensor::new([n, m], out)?;
        Ok(self.push(out, Op::Transpose { x }))
    }

    /// Divides each row by its Euclidean norm plus `eps`.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (_, f) = self.value(x).dims2()?;
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(f) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= n + eps);
        }
        Ok(self.push(out, Op::NormalizeRows { x, eps }))
    }

    /// Multi-head scaled dot-product attention of queries `q[N×D]` over keys
    /// `k[T×D]` and values `v[T×D]`, split into `heads` column blocks.
    /// With `causal`, query `i` only sees keys `j ≤ i` (requires `N == T`).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
        let (n, d) = self.value(q).dims2()?;
        let (t, dk) = self.value(k).dims2()?;
        if self.value(v).shape() != [t, dk] || dk != d {
            return Err(Error::Shape(format!(
                "attention: q {:?}, k {:?}, v {:?} are incompatible",
                self.value(q).shape(),
                self.value(k).shape(),
                self.value(v).shape()
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::InvalidArgument(format!("attention: {heads} heads do not divide width {d}")));
        }
        if causal && n != t {
            return Err(Error::Shape(format!("attention: causal mask needs square scores, got {n}×{t}")));
        }
        if t == 0 {
            return Err(Error::Shape("attention: empty key sequence".into()));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let strided = Layout { rs: d, cs: 1 };
        let mut probs = vec![0.0; heads * n * t];
        let mut out = vec![0.0; n * d];
        for h in 0..heads {
            let off = h * dh;
            let p = &mut probs[h * n * t..(h + 1) * n * t];
            gemm(n, dh, t, scale, &qv[off..], strided, &kv[off..], Layout { rs: 1, cs: d }, 0.0, p, Layout::row_major(t));
            for i in 0..n {
                let row = &mut p[i * t..(i + 1) * t];
                let visible = if causal { i + 1 } else { t };
                let m = row[..visible].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for x in row[..visible].iter_mut() {
                    *x = (*x - m).exp();
                    s += *x;
                }
                for x in row[..visible].iter_mut() {
                    *x /= s;
                }
                row[visible..].iter_mut().for_each(|x| *x = 0.0);
            }
            gemm(n, t, dh, 1.0, p, Layout::row_major(t), &vv[off..], strided, 0.0, &mut out[off..], strided);
        }
        let out = Tensor::new([n, d], out)?;
        Ok(self.push(out, Op::Attention { q, k, v, heads, probs }))
    }

    /// Attention probabilities `[heads × N × T]` saved by an [`attention`](Self::attention) node.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }
}

pub(crate) fn cosine_rows(a: &[f64], b: &[f64], t: usize, f: usize) -> Vec<f64> {
    (0..t)
        .map(|i| {
            let ar = &a[i * f..(i + 1) * f];
            let br = &b[i * f..(i + 1) * f];
            let dot: f64 = ar.iter().zip(br).map(|(x, y)| x * y).sum();
            let na = ar.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = br.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb + COSINE_EPS)
        })
        .collect()
}
