//! Building blocks shared by the embedding, the blocks and the merge stage.

use crate::error::{Error, Result};
use crate::numerics::{matmul, Rng, Tensor};

/// Linear map followed by a per-channel affine (folded batch norm):
/// `y = (x · W) ⊙ scale + shift`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearAffine {
    pub weight: Tensor,
    pub scale: Tensor,
    pub shift: Tensor,
}

impl LinearAffine {
    pub fn init(fan_in: usize, fan_out: usize, gain: f64, shift: f64, rng: &mut Rng) -> Self {
        Self {
            weight: Tensor::randn(&[fan_in, fan_out], gain / (fan_in as f64).sqrt(), rng),
            scale: Tensor::full(&[fan_out], 1.0),
            shift: Tensor::full(&[fan_out], shift),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            scale: Tensor::zeros(&[fan_out]),
            shift: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Returns `(y, z)` where `z = x · W` is the pre-affine product.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let z = matmul(x, &self.weight)?;
        let y = affine(&z, &self.scale, &self.shift);
        Ok((y, z))
    }
}

/// Row-wise `z ⊙ scale + shift`.
pub fn affine(z: &Tensor, scale: &Tensor, shift: &Tensor) -> Tensor {
    let mut y = z.clone();
    let c = z.cols();
    debug_assert_eq!(scale.len(), c);
    for r in 0..y.rows() {
        for ((v, s), b) in y.row_mut(r).iter_mut().zip(scale.data()).zip(shift.data()) {
            *v = *v * s + b;
        }
    }
    y
}

/// Splits an `[H, W, C]` map into non-overlapping `p x p` patches, one row
/// per patch in raster order, features ordered `(dy, dx, c)`.
pub fn patchify(x: &Tensor, p: usize) -> Result<Tensor> {
    if x.shape().len() != 3 {
        return Err(Error::dim("patchify", format!("expected [H, W, C], got {:?}", x.shape())));
    }
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::dim("patchify", format!("{h}x{w} not divisible by patch {p}")));
    }
    let (hp, wp) = (h / p, w / p);
    let mut out = Vec::with_capacity(h * w * c);
    for i in 0..hp {
        for j in 0..wp {
            for dy in 0..p {
                let src = ((i * p + dy) * w + j * p) * c;
                out.extend_from_slice(&x.data()[src..src + p * c]);
            }
        }
    }
    Tensor::new(&[hp * wp, p * p * c], out)
}

/// Inverse of [`patchify`]: rows of `[hp*wp, p*p*c]` back to `[h*w, c]`.
pub fn unpatchify(patches: &Tensor, h: usize, w: usize, c: usize, p: usize) -> Tensor {
    let (hp, wp) = (h / p, w / p);
    let mut out = Tensor::zeros(&[h * w, c]);
    for i in 0..hp {
        for j in 0..wp {
            let row = patches.row(i * wp + j);
            for dy in 0..p {
                let dst = ((i * p + dy) * w + j * p) * c;
                out.data_mut()[dst..dst + p * c].copy_from_slice(&row[dy * p * c..(dy + 1) * p * c]);
            }
        }
    }
    out
}

/// Depthwise 3x3 convolution with zero padding on a row-major `[h*w, d]`
/// token map. `kernel` is `[9, d]`, taps in raster order.
pub fn depthwise3x3(x: &Tensor, h: usize, w: usize, kernel: &Tensor) -> Tensor {
    let d = x.cols();
    let mut out = Tensor::zeros(&[h * w, d]);
    for y in 0..h {
        for xx in 0..w {
            let dst = (y * w + xx) * d;
            for dy in 0..3 {
                let sy = y as isize + dy as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for dx in 0..3 {
                    let sx = xx as isize + dx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let src = (sy as usize * w + sx as usize) * d;
                    let tap = kernel.row(dy * 3 + dx);
                    for (c, &k) in tap.iter().enumerate() {
                        let v = x.data()[src + c];
                        if v != 0.0 {
                            out.data_mut()[dst + c] += v * k;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Softmax-free attention `(q kᵀ) v · scale`, computed per head on
/// contiguous channel groups.
pub fn spike_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, scale: f64) -> Tensor {
    let n = q.rows();
    let d = q.cols();
    let dh = d / heads;
    let mut out = Tensor::zeros(&[n, d]);
    let mut scores = vec![0.0; n * n];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..n {
            let qi = &q.row(i)[off..off + dh];
            for j in 0..n {
                let kj = &k.row(j)[off..off + dh];
                scores[i * n + j] = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
            }
        }
        for i in 0..n {
            for j in 0..n {
                let a = scores[i * n + j];
                if a == 0.0 {
                    continue;
                }
                let vj = &v.row(j)[off..off + dh];
                let orow = &mut out.row_mut(i)[off..off + dh];
                for (o, vv) in orow.iter_mut().zip(vj) {
                    *o += a * vv;
                }
            }
        }
    }
    out.scale(scale);
    out
}
