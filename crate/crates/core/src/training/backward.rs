//! Reverse-mode gradients through blocks and time steps.

use crate::error::{Error, Result};
use crate::model::{
    unpatchify, BlockCache, BlockCtx, BlockWeights, EmbedCache, ForwardTrace, LinearAffine, MergeCache,
    ModelWeights, NeuronCache, SpikingTransformer,
};
use crate::neuron::{lif_backward, LifParams, SurrogateParams};
use crate::numerics::{matmul_nt, matmul_tn, Tensor};

/// Gradient of `y = (x · W) ⊙ scale + shift` given `∂L/∂y`, the cached
/// product `z = x · W` and the input `x`. Accumulates into `grad` and
/// returns `∂L/∂x`.
pub fn linear_affine_backward(
    layer: &LinearAffine,
    x: &Tensor,
    z: &Tensor,
    g_y: &Tensor,
    grad: &mut LinearAffine,
) -> Result<Tensor> {
    let g_z = affine_backward(z, g_y, &layer.scale, &mut grad.scale, &mut grad.shift);
    grad.weight.add_assign(&matmul_tn(x, &g_z)?);
    matmul_nt(&g_z, &layer.weight)
}

/// Backward of a row-wise affine; returns `∂L/∂z`.
fn affine_backward(z: &Tensor, g_y: &Tensor, scale: &Tensor, g_scale: &mut Tensor, g_shift: &mut Tensor) -> Tensor {
    let c = z.cols();
    let mut g_z = g_y.clone();
    for r in 0..z.rows() {
        let zr = z.row(r);
        let gr = g_y.row(r);
        for j in 0..c {
            g_scale.data_mut()[j] += gr[j] * zr[j];
            g_shift.data_mut()[j] += gr[j];
        }
        for (g, s) in g_z.row_mut(r).iter_mut().zip(scale.data()) {
            *g *= s;
        }
    }
    g_z
}

/// Backward of [`crate::model::depthwise3x3`]. Accumulates the kernel
/// gradient and returns `∂L/∂x`.
pub fn depthwise3x3_backward(x: &Tensor, h: usize, w: usize, kernel: &Tensor, g_out: &Tensor, g_kernel: &mut Tensor) -> Tensor {
    let d = x.cols();
    let mut g_x = Tensor::zeros(x.shape());
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
                    let tap = dy * 3 + dx;
                    for c in 0..d {
                        let g = g_out.data()[dst + c];
                        if g == 0.0 {
                            continue;
                        }
                        g_kernel.data_mut()[tap * d + c] += g * x.data()[src + c];
                        g_x.data_mut()[src + c] += g * kernel.data()[tap * d + c];
                    }
                }
            }
        }
    }
    g_x
}

/// Backward of [`crate::model::spike_attention`]: returns `(∂q, ∂k, ∂v)`.
pub fn attention_backward(q: &Tensor, k: &Tensor, v: &Tensor, g_out: &Tensor, heads: usize, scale: f64) -> (Tensor, Tensor, Tensor) {
    let n = q.rows();
    let d = q.cols();
    let dh = d / heads;
    let mut g_q = Tensor::zeros(q.shape());
    let mut g_k = Tensor::zeros(k.shape());
    let mut g_v = Tensor::zeros(v.shape());
    let mut a = vec![0.0; n * n];
    let mut g_a = vec![0.0; n * n];
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
    for h in 0..heads {
        let off = h * dh;
        let sl = |t: &Tensor, i: usize| t.row(i)[off..off + dh].to_vec();
        for i in 0..n {
            let qi = sl(q, i);
            let gi = sl(g_out, i);
            for j in 0..n {
                a[i * n + j] = dot(&qi, &k.row(j)[off..off + dh]);
                g_a[i * n + j] = scale * dot(&gi, &v.row(j)[off..off + dh]);
            }
        }
        for i in 0..n {
            for j in 0..n {
                let aij = a[i * n + j] * scale;
                let gij = g_a[i * n + j];
                for c in off..off + dh {
                    let go = g_out.row(i)[c];
                    g_v.row_mut(j)[c] += aij * go;
                    g_q.row_mut(i)[c] += gij * k.row(j)[c];
                    g_k.row_mut(j)[c] += gij * q.row(i)[c];
                }
            }
        }
    }
    (g_q, g_k, g_v)
}

/// Membrane gradients carried backwards in time, one per neuron layer.
#[derive(Debug, Clone)]
pub struct BlockCarries {
    pub input: Tensor,
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub attn: Tensor,
    pub res1: Tensor,
    pub hidden: Tensor,
    pub mlp_out: Tensor,
    pub res2: Tensor,
}

impl BlockCarries {
    pub fn zeros(tokens: usize, dim: usize, hidden: usize) -> Self {
        let z = || Tensor::zeros(&[tokens, dim]);
        Self {
            input: z(),
            q: z(),
            k: z(),
            v: z(),
            attn: z(),
            res1: z(),
            hidden: Tensor::zeros(&[tokens, hidden]),
            mlp_out: z(),
            res2: z(),
        }
    }

    fn all_mut(&mut self) -> [&mut Tensor; 9] {
        [
            &mut self.input,
            &mut self.q,
            &mut self.k,
            &mut self.v,
            &mut self.attn,
            &mut self.res1,
            &mut self.hidden,
            &mut self.mlp_out,
            &mut self.res2,
        ]
    }

    fn gather(&mut self, rows: &[usize]) -> Self {
        let [a, b, c, d, e, f, g, h, i] = self.all_mut().map(|t| t.gather_rows(rows));
        Self {
            input: a,
            q: b,
            k: c,
            v: d,
            attn: e,
            res1: f,
            hidden: g,
            mlp_out: h,
            res2: i,
        }
    }

    fn scatter(&mut self, rows: &[usize], part: &mut Self) {
        for (dst, src) in self.all_mut().into_iter().zip(part.all_mut()) {
            dst.scatter_rows(rows, src);
        }
    }
}

struct Lif<'a> {
    lif: &'a LifParams,
    sg: &'a SurrogateParams,
}

impl Lif<'_> {
    fn back(&self, n: &NeuronCache, g: &Tensor, carry: &mut Tensor) -> Tensor {
        lif_backward(&n.u_tilde, &n.spikes, g, carry, self.lif, self.sg)
    }
}

/// One block, one step, processed rows only. Returns `∂L/∂x` for those rows.
pub fn block_backward(
    cache: &BlockCache,
    w: &BlockWeights,
    g_out: &Tensor,
    carries: &mut BlockCarries,
    grad: &mut BlockWeights,
    ctx: &BlockCtx,
) -> Result<Tensor> {
    let n = Lif {
        lif: &ctx.lif,
        sg: &ctx.surrogate,
    };
    let g_r2 = n.back(&cache.n_res2, g_out, &mut carries.res2);
    let g_y2 = n.back(&cache.n_mlp, &g_r2, &mut carries.mlp_out);
    let g_h = linear_affine_backward(&w.mlp2, &cache.n_hidden.spikes, &cache.z_mlp2, &g_y2, &mut grad.mlp2)?;
    let g_y1 = n.back(&cache.n_hidden, &g_h, &mut carries.hidden);
    let mut g_xhat = linear_affine_backward(&w.mlp1, &cache.n_res1.spikes, &cache.z_mlp1, &g_y1, &mut grad.mlp1)?;
    g_xhat.add_assign(&g_r2);

    let g_r1 = n.back(&cache.n_res1, &g_xhat, &mut carries.res1);
    let g_c = linear_affine_backward(&w.proj, &cache.n_attn.spikes, &cache.z_proj, &g_r1, &mut grad.proj)?;
    let g_att = n.back(&cache.n_attn, &g_c, &mut carries.attn);
    let (g_q, g_k, g_v) = attention_backward(
        &cache.n_q.spikes,
        &cache.n_k.spikes,
        &cache.n_v.spikes,
        &g_att,
        ctx.heads,
        ctx.attention_scale,
    );
    let a = &cache.n_in.spikes;
    let g_yq = n.back(&cache.n_q, &g_q, &mut carries.q);
    let g_yk = n.back(&cache.n_k, &g_k, &mut carries.k);
    let g_yv = n.back(&cache.n_v, &g_v, &mut carries.v);
    let mut g_a = linear_affine_backward(&w.q, a, &cache.z_q, &g_yq, &mut grad.q)?;
    g_a.add_assign(&linear_affine_backward(&w.k, a, &cache.z_k, &g_yk, &mut grad.k)?);
    g_a.add_assign(&linear_affine_backward(&w.v, a, &cache.z_v, &g_yv, &mut grad.v)?);
    let mut g_x = n.back(&cache.n_in, &g_a, &mut carries.input);
    g_x.add_assign(&g_r1);
    Ok(g_x)
}

/// Block backward on the full token map: bypassed rows pass the output
/// gradient straight through and keep their membrane carries.
pub fn pruned_block_backward(
    cache: &BlockCache,
    w: &BlockWeights,
    g_out: &Tensor,
    carries: &mut BlockCarries,
    grad: &mut BlockWeights,
    ctx: &BlockCtx,
) -> Result<Tensor> {
    let rows = &cache.rows;
    let mut sub = carries.gather(rows);
    let g_rows = g_out.gather_rows(rows);
    let g_x = block_backward(cache, w, &g_rows, &mut sub, grad, ctx)?;
    carries.scatter(rows, &mut sub);
    let mut g_in = g_out.clone();
    g_in.scatter_rows(rows, &g_x);
    Ok(g_in)
}

fn merge_backward(
    cache: &MergeCache,
    w: &LinearAffine,
    g_out: &Tensor,
    carry: &mut Tensor,
    grad: &mut LinearAffine,
    n: &Lif,
    geom: (usize, usize, usize),
) -> Result<Tensor> {
    let g_y = n.back(&cache.neuron, g_out, carry);
    let g_p = linear_affine_backward(w, &cache.patches, &cache.z, &g_y, grad)?;
    let (h, wd, d) = geom;
    Ok(unpatchify(&g_p, h, wd, d, 2))
}

struct EmbedCarries {
    patch: Tensor,
    pos: Tensor,
    out: Tensor,
}

/// Returns `∂L/∂z_patch` for this step.
fn embed_backward(
    model: &SpikingTransformer,
    cache: &EmbedCache,
    g_x: &Tensor,
    carries: &mut EmbedCarries,
    grad: &mut ModelWeights,
    n: &Lif,
) -> Result<Tensor> {
    let e = &model.weights.embed;
    let g = model.config.embed_geometry();
    let g_r = n.back(&cache.n_out, g_x, &mut carries.out);
    let g_ypos = n.back(&cache.n_pos, &g_r, &mut carries.pos);
    let ge = &mut grad.embed;
    let g_zpos = affine_backward(&cache.z_pos, &g_ypos, &e.pos_scale, &mut ge.pos_scale, &mut ge.pos_shift);
    let mut g_sp = depthwise3x3_backward(
        &cache.n_patch.spikes,
        g.height,
        g.width,
        &e.pos_kernel,
        &g_zpos,
        &mut ge.pos_kernel,
    );
    g_sp.add_assign(&g_r);
    let g_y = n.back(&cache.n_patch, &g_sp, &mut carries.patch);
    Ok(g_y)
}

/// Gradients of the loss w.r.t. every weight, given `∂L/∂logits`.
pub fn backward(model: &SpikingTransformer, trace: Option<&ForwardTrace>, g_logits: &[f64]) -> Result<ModelWeights> {
    let trace = trace.ok_or_else(|| Error::State("backward needs a trace recorded with tracing enabled".into()))?;
    let cfg = &model.config;
    let w = &model.weights;
    if g_logits.len() != cfg.num_classes {
        return Err(Error::dim(
            "backward",
            format!("{} logit gradients for {} classes", g_logits.len(), cfg.num_classes),
        ));
    }
    if trace.steps.len() != cfg.time_steps {
        return Err(Error::State(format!(
            "trace holds {} steps, model runs {}",
            trace.steps.len(),
            cfg.time_steps
        )));
    }
    let ctx = model.block_ctx(crate::neuron::SpikeMode::Heaviside);
    let n = Lif {
        lif: &cfg.neuron,
        sg: &cfg.surrogate,
    };
    let mut grad = w.zeros_like();
    let eg = cfg.embed_geometry();
    let mut block_carries: Vec<BlockCarries> = (0..cfg.num_blocks)
        .map(|b| {
            let g = cfg.block_geometry(b);
            BlockCarries::zeros(g.tokens(), g.dim, cfg.hidden_dim(b))
        })
        .collect();
    let mut merge_carry = cfg
        .has_merge_stage
        .then(|| Tensor::zeros(&[eg.tokens() / 4, 2 * eg.dim]));
    let z = || Tensor::zeros(&[eg.tokens(), eg.dim]);
    let mut embed_carries = EmbedCarries {
        patch: z(),
        pos: z(),
        out: z(),
    };
    let mut g_zpatch_total = Tensor::zeros(&[eg.tokens(), eg.dim]);

    let inv_t = 1.0 / cfg.time_steps as f64;
    let g_l: Vec<f64> = g_logits.iter().map(|g| g * inv_t).collect();
    let og = cfg.output_geometry();
    let c = cfg.num_classes;

    // ∂L/∂pooled is the same every step
    let mut g_pool = vec![0.0; og.dim];
    for (i, gp) in g_pool.iter_mut().enumerate() {
        *gp = (0..c).map(|j| w.head.weight.get2(i, j) * g_l[j]).sum();
    }
    let inv_n = 1.0 / og.tokens() as f64;
    let mut g_final = Tensor::zeros(&[og.tokens(), og.dim]);
    for r in 0..og.tokens() {
        for (dst, gp) in g_final.row_mut(r).iter_mut().zip(&g_pool) {
            *dst = gp * inv_n;
        }
    }

    for step in trace.steps.iter().rev() {
        let pooled: Vec<f64> = step.output.sum_rows().into_iter().map(|v| v * inv_n).collect();
        for (i, p) in pooled.iter().enumerate() {
            for (j, gl) in g_l.iter().enumerate() {
                grad.head.weight.data_mut()[i * c + j] += p * gl;
            }
        }
        for (gb, gl) in grad.head.bias.data_mut().iter_mut().zip(&g_l) {
            *gb += gl;
        }

        let mut g = g_final.clone();
        for b in (0..cfg.num_blocks).rev() {
            g = pruned_block_backward(
                &step.blocks[b],
                &w.blocks[b],
                &g,
                &mut block_carries[b],
                &mut grad.blocks[b],
                &ctx,
            )?;
            if cfg.merge_before_block() == Some(b) {
                let mc = step
                    .merge
                    .as_ref()
                    .ok_or_else(|| Error::State("trace lacks merge activations".into()))?;
                let mw = w.merge.as_ref().ok_or_else(|| Error::State("missing merge weights".into()))?;
                let mg = grad.merge.as_mut().ok_or_else(|| Error::State("missing merge weights".into()))?;
                g = merge_backward(
                    mc,
                    &mw.conv,
                    &g,
                    merge_carry.as_mut().expect("merge carry"),
                    &mut mg.conv,
                    &n,
                    (eg.height, eg.width, eg.dim),
                )?;
            }
        }
        let g_y = embed_backward(model, &step.embed, &g, &mut embed_carries, &mut grad, &n)?;
        let e = &w.embed.patch;
        let g_z = affine_backward(&trace.z_patch, &g_y, &e.scale, &mut grad.embed.patch.scale, &mut grad.embed.patch.shift);
        g_zpatch_total.add_assign(&g_z);
    }
    grad.embed.patch.weight.add_assign(&matmul_tn(&trace.patches, &g_zpatch_total)?);
    Ok(grad)
}
