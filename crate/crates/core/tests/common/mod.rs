//! Scalar-loop reference implementations, written from the formulas and
//! sharing no code with the engine beyond weight and config types.
#![allow(dead_code)]

pub mod grad;

use spikeprune::model::BlockWeights;
use spikeprune::neuron::{LifParams, ResetMode};
use spikeprune::numerics::{Rng, Tensor};
use spikeprune::pruning::{NormKind, ScorerConfig};

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor) -> Mat {
    let c = *t.shape().last().unwrap();
    t.data().chunks(c).map(|r| r.to_vec()).collect()
}

pub fn from_mat(m: &Mat, shape: &[usize]) -> Tensor {
    Tensor::new(shape, m.iter().flatten().copied().collect()).unwrap()
}

pub fn binary(shape: &[usize], p: f64, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| if rng.bernoulli(p) { 1.0 } else { 0.0 }).collect()).unwrap()
}

/// One LIF step per element; returns spikes and updates `u` in place.
pub fn lif(u: &mut Mat, input: &Mat, p: &LifParams) -> Mat {
    let mut s = input.clone();
    for i in 0..input.len() {
        for j in 0..input[i].len() {
            let ut = u[i][j] + input[i][j];
            let spike = if ut >= p.theta { 1.0 } else { 0.0 };
            u[i][j] = match p.reset_mode {
                ResetMode::Hard => ut * (1.0 - spike),
                ResetMode::Soft => p.tau * ut - p.theta * spike,
            };
            s[i][j] = spike;
        }
    }
    s
}

pub fn linear_affine(x: &Mat, w: &Tensor, scale: &Tensor, shift: &Tensor) -> Mat {
    let (fan_in, fan_out) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|row| {
            (0..fan_out)
                .map(|o| {
                    let mut z = 0.0;
                    for i in 0..fan_in {
                        z += row[i] * w.data()[i * fan_out + o];
                    }
                    z * scale.data()[o] + shift.data()[o]
                })
                .collect()
        })
        .collect()
}

/// `scale · (q kᵀ) v` per head over contiguous channel groups.
pub fn attention(q: &Mat, k: &Mat, v: &Mat, heads: usize, scale: f64) -> Mat {
    let n = q.len();
    let d = q[0].len();
    let dh = d / heads;
    let mut out = vec![vec![0.0; d]; n];
    for i in 0..n {
        for c in 0..d {
            let h0 = (c / dh) * dh;
            let mut acc = 0.0;
            for j in 0..n {
                let a: f64 = (h0..h0 + dh).map(|e| q[i][e] * k[j][e]).sum();
                acc += a * v[j][c];
            }
            out[i][c] = scale * acc;
        }
    }
    out
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

/// Membranes in the engine's neuron order: input, q, k, v, attn, res1,
/// hidden, mlp_out, res2.
pub type Membranes = [Mat; 9];

pub fn zero_membranes(n: usize, d: usize, hidden: usize) -> Membranes {
    std::array::from_fn(|i| vec![vec![0.0; if i == 6 { hidden } else { d }]; n])
}

pub struct OracleBlock<'a> {
    pub w: &'a BlockWeights,
    pub lif: LifParams,
    pub heads: usize,
    pub scale: f64,
}

impl OracleBlock<'_> {
    /// Attention branch before the residual.
    pub fn ssa(&self, x: &Mat, m: &mut Membranes) -> Mat {
        let w = self.w;
        let a = lif(&mut m[0], x, &self.lif);
        let q = lif(&mut m[1], &linear_affine(&a, &w.q.weight, &w.q.scale, &w.q.shift), &self.lif);
        let k = lif(&mut m[2], &linear_affine(&a, &w.k.weight, &w.k.scale, &w.k.shift), &self.lif);
        let v = lif(&mut m[3], &linear_affine(&a, &w.v.weight, &w.v.scale, &w.v.shift), &self.lif);
        let att = lif(&mut m[4], &attention(&q, &k, &v, self.heads, self.scale), &self.lif);
        linear_affine(&att, &w.proj.weight, &w.proj.scale, &w.proj.shift)
    }

    pub fn forward(&self, x: &Mat, m: &mut Membranes) -> Mat {
        let w = self.w;
        let sa = self.ssa(x, m);
        let r1 = lif(&mut m[5], &add(x, &sa), &self.lif);
        let h = lif(
            &mut m[6],
            &linear_affine(&r1, &w.mlp1.weight, &w.mlp1.scale, &w.mlp1.shift),
            &self.lif,
        );
        let mo = lif(
            &mut m[7],
            &linear_affine(&h, &w.mlp2.weight, &w.mlp2.scale, &w.mlp2.shift),
            &self.lif,
        );
        lif(&mut m[8], &add(&r1, &mo), &self.lif)
    }

    /// Scores, top-K by a full stable sort, dense block on the kept rows,
    /// bypass for the rest. Returns the output and the kept indices.
    pub fn pruned(
        &self,
        x: &Grid,
        prev: Option<&Grid>,
        t: usize,
        cfg: &ScorerConfig,
        ratio: f64,
        m: &mut Membranes,
    ) -> (Mat, Vec<usize>) {
        let flat: Mat = x.iter().flatten().cloned().collect();
        let scores = irtop(x, prev, t, cfg);
        let (keep, _) = topk_stable(&scores, ratio);
        let sub: Mat = keep.iter().map(|&i| flat[i].clone()).collect();
        let mut sm: Membranes = std::array::from_fn(|l| keep.iter().map(|&i| m[l][i].clone()).collect());
        let y = self.forward(&sub, &mut sm);
        let mut out = flat;
        for (r, &i) in keep.iter().enumerate() {
            out[i] = y[r].clone();
            for l in 0..9 {
                m[l][i] = sm[l][r].clone();
            }
        }
        (out, keep)
    }
}

/// `[H][W][D]` token map.
pub type Grid = Vec<Vec<Vec<f64>>>;

pub fn to_grid(t: &Tensor) -> Grid {
    let (h, w, d) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    (0..h)
        .map(|i| (0..w).map(|j| t.data()[(i * w + j) * d..(i * w + j + 1) * d].to_vec()).collect())
        .collect()
}

pub fn spatial(x: &Grid, k: usize) -> Vec<f64> {
    let (h, w) = (x.len(), x[0].len());
    let d = x[0][0].len();
    let r = (k / 2) as isize;
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h as isize {
        for j in 0..w as isize {
            let mut mean = vec![0.0; d];
            let mut count = 0.0;
            for di in -r..=r {
                for dj in -r..=r {
                    let (p, q) = (i + di, j + dj);
                    if p < 0 || q < 0 || p >= h as isize || q >= w as isize {
                        continue;
                    }
                    for c in 0..d {
                        mean[c] += x[p as usize][q as usize][c];
                    }
                    count += 1.0;
                }
            }
            for v in &mut mean {
                *v /= count;
            }
            let tok = &x[i as usize][j as usize];
            let mut dot = 0.0;
            let mut na = 0.0;
            let mut nb = 0.0;
            for c in 0..d {
                dot += tok[c] * mean[c];
                na += tok[c] * tok[c];
                nb += mean[c] * mean[c];
            }
            let cos = (dot / (na.sqrt() * nb.sqrt() + 1e-8)).clamp(-1.0, 1.0);
            out.push(1.0 - cos);
        }
    }
    out
}

pub fn temporal(x: &Grid, prev: Option<&Grid>, norm: NormKind) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..x.len() {
        for j in 0..x[0].len() {
            let mut acc = 0.0;
            for c in 0..x[i][j].len() {
                let diff = x[i][j][c] - prev.map_or(0.0, |p| p[i][j][c]);
                acc += match norm {
                    NormKind::L1 => diff.abs(),
                    NormKind::L2 => diff * diff,
                };
            }
            out.push(match norm {
                NormKind::L1 => acc,
                NormKind::L2 => acc.sqrt(),
            });
        }
    }
    out
}

pub fn normalize(v: &[f64]) -> Vec<f64> {
    let sum: f64 = v.iter().sum();
    if sum > 0.0 {
        v.iter().map(|x| x / sum).collect()
    } else {
        vec![1.0 / v.len() as f64; v.len()]
    }
}

pub fn irtop(x: &Grid, prev: Option<&Grid>, t: usize, cfg: &ScorerConfig) -> Vec<f64> {
    let s = normalize(&spatial(x, cfg.window_k));
    if t == 0 && cfg.spatial_only_first_step {
        return s;
    }
    let tm = normalize(&temporal(x, if t == 0 { None } else { prev }, cfg.norm_kind));
    let mixed: Vec<f64> = s.iter().zip(&tm).map(|(a, b)| cfg.alpha * a + (1.0 - cfg.alpha) * b).collect();
    normalize(&mixed)
}

/// Informative and bypassed indices, both ascending, from a stable sort by
/// descending score (ties keep the lower index).
pub fn topk_stable(scores: &[f64], ratio: f64) -> (Vec<usize>, Vec<usize>) {
    let n = scores.len();
    let k = ((ratio * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut keep = idx[..k].to_vec();
    let mut drop = idx[k..].to_vec();
    keep.sort();
    drop.sort();
    (keep, drop)
}
