//! Spiking self-attention block.
//!
//! ```text
//! a   = SN(x)
//! q,k,v = SN(affine(a · W))
//! sa  = SN((q kᵀ) v · scale)
//! x̂   = SN(x + affine(sa · W_proj))
//! m   = SN(affine(SN(affine(x̂ · W_1)) · W_2))
//! out = SN(x̂ + m)
//! ```
//!
//! Every neuron keeps a membrane row per token, so a block can run on any
//! subset of its token grid by gathering and scattering state rows.


use super::layers::{spike_attention, LinearAffine};
use crate::error::{Error, Result};
use crate::neuron::{LifParams, NeuronState, SpikeMode, SurrogateParams};
use crate::numerics::{Rng, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub q: LinearAffine,
    pub k: LinearAffine,
    pub v: LinearAffine,
    pub proj: LinearAffine,
    pub mlp1: LinearAffine,
    pub mlp2: LinearAffine,
}

impl BlockWeights {
    pub fn init(dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            q: LinearAffine::init(dim, dim, 2.0, 0.0, rng),
            k: LinearAffine::init(dim, dim, 2.0, 0.0, rng),
            v: LinearAffine::init(dim, dim, 2.0, 0.0, rng),
            proj: LinearAffine::init(dim, dim, 1.0, 0.0, rng),
            mlp1: LinearAffine::init(dim, hidden, 2.0, 0.0, rng),
            mlp2: LinearAffine::init(hidden, dim, 2.0, 0.0, rng),
        }
    }

    pub fn zeros(dim: usize, hidden: usize) -> Self {
        Self {
            q: LinearAffine::zeros(dim, dim),
            k: LinearAffine::zeros(dim, dim),
            v: LinearAffine::zeros(dim, dim),
            proj: LinearAffine::zeros(dim, dim),
            mlp1: LinearAffine::zeros(dim, hidden),
            mlp2: LinearAffine::zeros(hidden, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.q.fan_in()
    }

    pub fn hidden(&self) -> usize {
        self.mlp1.fan_out()
    }

    pub(crate) fn layers(&self) -> [(&'static str, &LinearAffine); 6] {
        [
            ("q", &self.q),
            ("k", &self.k),
            ("v", &self.v),
            ("proj", &self.proj),
            ("mlp1", &self.mlp1),
            ("mlp2", &self.mlp2),
        ]
    }

    pub(crate) fn layers_mut(&mut self) -> [(&'static str, &mut LinearAffine); 6] {
        [
            ("q", &mut self.q),
            ("k", &mut self.k),
            ("v", &mut self.v),
            ("proj", &mut self.proj),
            ("mlp1", &mut self.mlp1),
            ("mlp2", &mut self.mlp2),
        ]
    }
}

/// Neuron and attention settings a block needs at run time.
#[derive(Debug, Clone, Copy)]
pub struct BlockCtx {
    pub lif: LifParams,
    pub surrogate: SurrogateParams,
    pub mode: SpikeMode,
    pub heads: usize,
    pub attention_scale: f64,
}

/// Membranes of the nine neuron layers of one block, one row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockState {
    pub input: NeuronState,
    pub q: NeuronState,
    pub k: NeuronState,
    pub v: NeuronState,
    pub attn: NeuronState,
    pub res1: NeuronState,
    pub hidden: NeuronState,
    pub mlp_out: NeuronState,
    pub res2: NeuronState,
}

impl BlockState {
    pub fn zeros(tokens: usize, dim: usize, hidden: usize) -> Self {
        let s = || NeuronState::zeros(&[tokens, dim]);
        Self {
            input: s(),
            q: s(),
            k: s(),
            v: s(),
            attn: s(),
            res1: s(),
            hidden: NeuronState::zeros(&[tokens, hidden]),
            mlp_out: s(),
            res2: s(),
        }
    }

    pub fn neurons(&self) -> [&NeuronState; 9] {
        [
            &self.input,
            &self.q,
            &self.k,
            &self.v,
            &self.attn,
            &self.res1,
            &self.hidden,
            &self.mlp_out,
            &self.res2,
        ]
    }

    fn neurons_mut(&mut self) -> [&mut NeuronState; 9] {
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

    pub fn gather(&self, rows: &[usize]) -> BlockState {
        BlockState {
            input: self.input.gather(rows),
            q: self.q.gather(rows),
            k: self.k.gather(rows),
            v: self.v.gather(rows),
            attn: self.attn.gather(rows),
            res1: self.res1.gather(rows),
            hidden: self.hidden.gather(rows),
            mlp_out: self.mlp_out.gather(rows),
            res2: self.res2.gather(rows),
        }
    }

    pub fn scatter(&mut self, rows: &[usize], part: &BlockState) {
        for (dst, src) in self.neurons_mut().into_iter().zip(part.neurons()) {
            dst.scatter(rows, src);
        }
    }

    pub fn reset(&mut self) {
        for n in self.neurons_mut() {
            n.reset();
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeuronCache {
    pub u_tilde: Tensor,
    pub spikes: Tensor,
}

/// Activations of one block at one time step, on the processed rows only.
#[derive(Debug, Clone)]
pub struct BlockCache {
    /// Token indices (raster order) the block processed.
    pub rows: Vec<usize>,
    pub x: Tensor,
    pub n_in: NeuronCache,
    pub n_q: NeuronCache,
    pub n_k: NeuronCache,
    pub n_v: NeuronCache,
    pub n_attn: NeuronCache,
    pub n_res1: NeuronCache,
    pub n_hidden: NeuronCache,
    pub n_mlp: NeuronCache,
    pub n_res2: NeuronCache,
    pub z_q: Tensor,
    pub z_k: Tensor,
    pub z_v: Tensor,
    pub z_proj: Tensor,
    pub z_mlp1: Tensor,
    pub z_mlp2: Tensor,
}

fn fire(state: &mut NeuronState, input: &Tensor, ctx: &BlockCtx) -> Result<NeuronCache> {
    let (spikes, u_tilde) = state.fire(input, &ctx.lif, &ctx.surrogate, ctx.mode)?;
    Ok(NeuronCache { u_tilde, spikes })
}

struct SsaParts {
    out: Tensor,
    n_in: NeuronCache,
    n_q: NeuronCache,
    n_k: NeuronCache,
    n_v: NeuronCache,
    n_attn: NeuronCache,
    z_q: Tensor,
    z_k: Tensor,
    z_v: Tensor,
    z_proj: Tensor,
}

fn ssa_parts(x: &Tensor, w: &BlockWeights, st: &mut BlockState, ctx: &BlockCtx) -> Result<SsaParts> {
    if x.shape().len() != 2 || x.cols() != w.dim() {
        return Err(Error::dim("ssa", format!("input {:?} vs block dim {}", x.shape(), w.dim())));
    }
    let n_in = fire(&mut st.input, x, ctx)?;
    let (yq, z_q) = w.q.forward(&n_in.spikes)?;
    let (yk, z_k) = w.k.forward(&n_in.spikes)?;
    let (yv, z_v) = w.v.forward(&n_in.spikes)?;
    let n_q = fire(&mut st.q, &yq, ctx)?;
    let n_k = fire(&mut st.k, &yk, ctx)?;
    let n_v = fire(&mut st.v, &yv, ctx)?;
    let att = spike_attention(&n_q.spikes, &n_k.spikes, &n_v.spikes, ctx.heads, ctx.attention_scale);
    let n_attn = fire(&mut st.attn, &att, ctx)?;
    let (out, z_proj) = w.proj.forward(&n_attn.spikes)?;
    Ok(SsaParts {
        out,
        n_in,
        n_q,
        n_k,
        n_v,
        n_attn,
        z_q,
        z_k,
        z_v,
        z_proj,
    })
}

/// Spiking self-attention branch on `[N, D]` spikes; returns the
/// pre-residual branch value.
pub fn ssa(x: &Tensor, w: &BlockWeights, st: &mut BlockState, ctx: &BlockCtx) -> Result<Tensor> {
    Ok(ssa_parts(x, w, st, ctx)?.out)
}

/// MLP branch on `[N, D]` spikes (linear, LIF, linear, LIF).
pub fn mlp(x: &Tensor, w: &BlockWeights, st: &mut BlockState, ctx: &BlockCtx) -> Result<Tensor> {
    let (y1, _) = w.mlp1.forward(x)?;
    let (h, _) = st.hidden.fire(&y1, &ctx.lif, &ctx.surrogate, ctx.mode)?;
    let (y2, _) = w.mlp2.forward(&h)?;
    let (m, _) = st.mlp_out.fire(&y2, &ctx.lif, &ctx.surrogate, ctx.mode)?;
    Ok(m)
}

/// Full block on every row of `x` with matching state rows. Returns the
/// output spikes and the activation cache.
pub fn block_rows_forward(
    x: &Tensor,
    w: &BlockWeights,
    st: &mut BlockState,
    ctx: &BlockCtx,
    rows: Vec<usize>,
) -> Result<(Tensor, BlockCache)> {
    let s = ssa_parts(x, w, st, ctx)?;
    let r1 = x.add(&s.out);
    let n_res1 = fire(&mut st.res1, &r1, ctx)?;
    let (y1, z_mlp1) = w.mlp1.forward(&n_res1.spikes)?;
    let n_hidden = fire(&mut st.hidden, &y1, ctx)?;
    let (y2, z_mlp2) = w.mlp2.forward(&n_hidden.spikes)?;
    let n_mlp = fire(&mut st.mlp_out, &y2, ctx)?;
    let r2 = n_res1.spikes.add(&n_mlp.spikes);
    let n_res2 = fire(&mut st.res2, &r2, ctx)?;
    let out = n_res2.spikes.clone();
    Ok((
        out,
        BlockCache {
            rows,
            x: x.clone(),
            n_in: s.n_in,
            n_q: s.n_q,
            n_k: s.n_k,
            n_v: s.n_v,
            n_attn: s.n_attn,
            n_res1,
            n_hidden,
            n_mlp,
            n_res2,
            z_q: s.z_q,
            z_k: s.z_k,
            z_v: s.z_v,
            z_proj: s.z_proj,
            z_mlp1,
            z_mlp2,
        },
    ))
}

/// Dense block forward over all tokens of an `[N, D]` spike map.
pub fn block_forward(x: &Tensor, w: &BlockWeights, st: &mut BlockState, ctx: &BlockCtx) -> Result<Tensor> {
    let rows = (0..x.rows()).collect();
    Ok(block_rows_forward(x, w, st, ctx, rows)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx(heads: usize) -> BlockCtx {
        BlockCtx {
            lif: LifParams::default(),
            surrogate: SurrogateParams::default(),
            mode: SpikeMode::Heaviside,
            heads,
            attention_scale: 0.125,
        }
    }

    fn random_spikes(n: usize, d: usize, rng: &mut Rng) -> Tensor {
        let data = (0..n * d).map(|_| if rng.bernoulli(0.4) { 1.0 } else { 0.0 }).collect();
        Tensor::new(&[n, d], data).unwrap()
    }

    #[test]
    fn zero_input_zero_output() {
        let mut rng = Rng::new(1);
        let w = BlockWeights::init(8, 16, &mut rng);
        let mut st = BlockState::zeros(5, 8, 16);
        let x = Tensor::zeros(&[5, 8]);
        let s = ssa(&x, &w, &mut st.clone(), &ctx(2)).unwrap();
        // zero biases: projection of zero spikes is exactly zero
        assert!(s.data().iter().all(|&v| v == 0.0));
        let y = block_forward(&x, &w, &mut st, &ctx(2)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_is_binary() {
        let mut rng = Rng::new(2);
        let w = BlockWeights::init(8, 32, &mut rng);
        let mut st = BlockState::zeros(6, 8, 32);
        for _ in 0..4 {
            let x = random_spikes(6, 8, &mut rng);
            let y = block_forward(&x, &w, &mut st, &ctx(2)).unwrap();
            assert_eq!(y.shape(), &[6, 8]);
            assert!(y.data().iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn gather_scatter_state_round_trip() {
        let mut st = BlockState::zeros(4, 2, 3);
        st.hidden.membrane.fill(0.5);
        let part = st.gather(&[0, 2]);
        assert_eq!(part.hidden.membrane.shape(), &[2, 3]);
        let mut other = BlockState::zeros(4, 2, 3);
        other.scatter(&[0, 2], &part);
        assert_eq!(other.hidden.membrane.row(0), &[0.5; 3]);
        assert_eq!(other.hidden.membrane.row(1), &[0.0; 3]);
    }

    #[test]
    fn rejects_wrong_width() {
        let mut rng = Rng::new(3);
        let w = BlockWeights::init(8, 8, &mut rng);
        let mut st = BlockState::zeros(2, 8, 8);
        assert!(block_forward(&Tensor::zeros(&[2, 4]), &w, &mut st, &ctx(1)).is_err());
    }
}
