//! Dense tensor substrate.
//!
//! Row-major `f64` storage with up to four axes. Everything the model needs
//! is built from a handful of kernels here: matrix products (plain and with
//! either operand transposed, for backward passes), the per-channel window
//! mean used by the spatial scorer, and cosine similarity.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Denominator guard for cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.len() > 4 {
            return Err(Error::dim("Tensor::new", format!("{} axes (max 4)", shape.len())));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(
                "Tensor::new",
                format!("shape {shape:?} holds {n} elements, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Entries drawn from N(0, std²).
    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.normal() * std).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Extent of the last axis.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Product of all axes but the last.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            n => self.shape[..n - 1].iter().product(),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.len() > 4 {
            return Err(Error::dim(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    /// Copies the listed rows into a new `[rows.len(), cols]` tensor.
    pub fn gather_rows(&self, rows: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Tensor {
            shape: vec![rows.len(), c],
            data,
        }
    }

    /// Writes row `i` of `src` into row `rows[i]` of `self`.
    pub fn scatter_rows(&mut self, rows: &[usize], src: &Tensor) {
        debug_assert_eq!(rows.len(), src.rows());
        for (i, &r) in rows.iter().enumerate() {
            self.row_mut(r).copy_from_slice(src.row(i));
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        let mut out = self.clone();
        out.add_assign(other);
        out
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Column sums of a matrix view.
    pub fn sum_rows(&self) -> Vec<f64> {
        let c = self.cols();
        let mut out = vec![0.0; c];
        for r in 0..self.rows() {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn check_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape.len() != 2 {
        return Err(Error::dim(op, format!("expected a matrix, got shape {:?}", t.shape)));
    }
    Ok((t.shape[0], t.shape[1]))
}

/// `c = a · b` for `a: [M, K]`, `b: [K, N]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = check_2d("matmul", a)?;
    let (k2, n) = check_2d("matmul", b)?;
    if k != k2 {
        return Err(Error::dim("matmul", format!("[{m}x{k}] x [{k2}x{n}]")));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a.data[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// `c = aᵀ · b` for `a: [K, M]`, `b: [K, N]`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = check_2d("matmul_tn", a)?;
    let (k2, n) = check_2d("matmul_tn", b)?;
    if k != k2 {
        return Err(Error::dim("matmul_tn", format!("[{k}x{m}]^T x [{k2}x{n}]")));
    }
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let brow = &b.data[p * n..(p + 1) * n];
        for (i, &av) in a.data[p * m..(p + 1) * m].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// `c = a · bᵀ` for `a: [M, K]`, `b: [N, K]`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = check_2d("matmul_nt", a)?;
    let (n, k2) = check_2d("matmul_nt", b)?;
    if k != k2 {
        return Err(Error::dim("matmul_nt", format!("[{m}x{k}] x [{n}x{k2}]^T")));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(arow, &b.data[j * k..(j + 1) * k]);
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l1_norm(a: &[f64]) -> f64 {
    a.iter().map(|v| v.abs()).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// In-bounds coordinates of the `k x k` window centred on `(h, w)`,
/// centre included.
pub fn window_positions(h: usize, w: usize, height: usize, width: usize, k: usize) -> impl Iterator<Item = (usize, usize)> {
    let r = (k - 1) / 2;
    let h0 = h.saturating_sub(r);
    let h1 = (h + r).min(height - 1);
    let w0 = w.saturating_sub(r);
    let w1 = (w + r).min(width - 1);
    (h0..=h1).flat_map(move |p| (w0..=w1).map(move |q| (p, q)))
}

/// Per-channel mean over the in-bounds `k x k` window around every token of
/// an `[H, W, D]` map. Edge windows divide by their own neighbour count.
pub fn window_mean(x: &Tensor, k: usize) -> Result<Tensor> {
    if k == 0 || k.is_multiple_of(2) {
        return Err(Error::param("window_k", format!("must be odd and >= 1, got {k}")));
    }
    if x.shape.len() != 3 {
        return Err(Error::dim("window_mean", format!("expected [H, W, D], got {:?}", x.shape)));
    }
    let (height, width, d) = (x.shape[0], x.shape[1], x.shape[2]);
    let mut out = Tensor::zeros(&x.shape);
    for h in 0..height {
        for w in 0..width {
            let mut count = 0usize;
            let base = (h * width + w) * d;
            for (p, q) in window_positions(h, w, height, width, k) {
                let src = (p * width + q) * d;
                for c in 0..d {
                    out.data[base + c] += x.data[src + c];
                }
                count += 1;
            }
            let inv = 1.0 / count as f64;
            for v in &mut out.data[base..base + d] {
                *v *= inv;
            }
        }
    }
    Ok(out)
}

/// `⟨a,b⟩ / (‖a‖·‖b‖ + eps)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64], eps: f64) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let num = dot(a, b);
    let den = l2_norm(a) * l2_norm(b) + eps;
    (num / den).clamp(-1.0, 1.0)
}

/// Seeded generator. Same seed, same stream, on every platform.
#[derive(Debug, Clone)]
pub struct Rng(ChaCha8Rng);

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn uniform(&mut self) -> f64 {
        self.0.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.0.sample(StandardNormal)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.0.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.0);
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.random()
    }
}
