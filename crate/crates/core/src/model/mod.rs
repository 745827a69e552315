//! The spiking transformer.
//!
//! Per time step the image is embedded into a binary token map, pushed
//! through `L` blocks (optionally with a stride-2 merge stage halfway) and
//! pooled into logits; logits are averaged over time steps. Token maps are
//! carried as `[H*W, D]` matrices in raster order.

mod block;
mod layers;

pub use block::{
    block_forward, block_rows_forward, mlp, ssa, BlockCache, BlockCtx, BlockState, BlockWeights, NeuronCache,
};
pub use layers::{affine, depthwise3x3, patchify, spike_attention, unpatchify, LinearAffine};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuron::{LifParams, NeuronState, SpikeMode, SurrogateParams};
use crate::numerics::{matmul, Rng, Tensor};
use crate::pruning::{self, PruneSchedule, ScoreMap, ScorerConfig, TokenPartition};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub time_steps: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub input_channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub mlp_ratio: usize,
    pub heads: usize,
    pub attention_scale: f64,
    pub has_merge_stage: bool,
    pub num_classes: usize,
    pub neuron: LifParams,
    pub surrogate: SurrogateParams,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            time_steps: 4,
            input_height: 16,
            input_width: 16,
            input_channels: 1,
            patch_size: 4,
            embed_dim: 32,
            num_blocks: 2,
            mlp_ratio: 4,
            heads: 4,
            attention_scale: 0.125,
            has_merge_stage: false,
            num_classes: 2,
            neuron: LifParams::default(),
            surrogate: SurrogateParams::default(),
        }
    }
}

/// Spatial extent and width of a token map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
}

impl Geometry {
    pub fn tokens(&self) -> usize {
        self.height * self.width
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.time_steps", self.time_steps),
            ("model.num_blocks", self.num_blocks),
            ("model.embed_dim", self.embed_dim),
            ("model.heads", self.heads),
            ("model.mlp_ratio", self.mlp_ratio),
            ("model.patch_size", self.patch_size),
            ("model.input_channels", self.input_channels),
            ("model.num_classes", self.num_classes),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be >= 1"));
            }
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::config(
                "model.heads",
                format!("embed_dim {} not divisible by {} heads", self.embed_dim, self.heads),
            ));
        }
        if !self.input_height.is_multiple_of(self.patch_size) || !self.input_width.is_multiple_of(self.patch_size) {
            return Err(Error::config(
                "model.patch_size",
                format!(
                    "{}x{} input not divisible by patch {}",
                    self.input_height, self.input_width, self.patch_size
                ),
            ));
        }
        if self.has_merge_stage {
            let (h, w) = self.grid();
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::config(
                    "model.has_merge_stage",
                    format!("merge stage needs an even token grid, got {h}x{w}"),
                ));
            }
        }
        if !(self.attention_scale.is_finite()) {
            return Err(Error::config("model.attention_scale", "must be finite"));
        }
        self.neuron
            .validate()
            .map_err(|e| Error::config("model.neuron", e.to_string()))?;
        self.surrogate
            .validate()
            .map_err(|e| Error::config("model.surrogate", e.to_string()))?;
        Ok(())
    }

    /// Token grid produced by the patch embedding.
    pub fn grid(&self) -> (usize, usize) {
        (self.input_height / self.patch_size, self.input_width / self.patch_size)
    }

    /// Index of the first block that runs after the merge stage.
    pub fn merge_before_block(&self) -> Option<usize> {
        self.has_merge_stage.then_some(self.num_blocks / 2)
    }

    pub fn embed_geometry(&self) -> Geometry {
        let (height, width) = self.grid();
        Geometry {
            height,
            width,
            dim: self.embed_dim,
        }
    }

    pub fn block_geometry(&self, block: usize) -> Geometry {
        let g = self.embed_geometry();
        match self.merge_before_block() {
            Some(m) if block >= m => Geometry {
                height: g.height / 2,
                width: g.width / 2,
                dim: g.dim * 2,
            },
            _ => g,
        }
    }

    pub fn output_geometry(&self) -> Geometry {
        self.block_geometry(self.num_blocks - 1)
    }

    pub fn hidden_dim(&self, block: usize) -> usize {
        self.block_geometry(block).dim * self.mlp_ratio
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedWeights {
    pub patch: LinearAffine,
    /// Depthwise 3x3 kernel, `[9, D]`.
    pub pos_kernel: Tensor,
    pub pos_scale: Tensor,
    pub pos_shift: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeWeights {
    /// 2x2 stride-2 convolution as a `[4D, 2D]` patch map.
    pub conv: LinearAffine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub embed: EmbedWeights,
    pub blocks: Vec<BlockWeights>,
    pub merge: Option<MergeWeights>,
    pub head: HeadWeights,
}

impl ModelWeights {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let d = cfg.embed_dim;
        let p = cfg.patch_size;
        let fan = p * p * cfg.input_channels;
        let mut patch = LinearAffine::init(fan, d, 2.0, 0.0, &mut rng);
        // background tokens get a steady baseline code
        for v in patch.shift.data_mut() {
            *v = 1.2 * rng.uniform();
        }
        let embed = EmbedWeights {
            patch,
            pos_kernel: Tensor::randn(&[9, d], 0.5, &mut rng),
            pos_scale: Tensor::full(&[d], 1.0),
            pos_shift: Tensor::zeros(&[d]),
        };
        let mut blocks = Vec::with_capacity(cfg.num_blocks);
        let mut merge = None;
        for b in 0..cfg.num_blocks {
            if cfg.merge_before_block() == Some(b) {
                merge = Some(MergeWeights {
                    conv: LinearAffine::init(4 * d, 2 * d, 2.0, 0.0, &mut rng),
                });
            }
            let g = cfg.block_geometry(b);
            blocks.push(BlockWeights::init(g.dim, cfg.hidden_dim(b), &mut rng));
        }
        let df = cfg.output_geometry().dim;
        let head = HeadWeights {
            weight: Tensor::randn(&[df, cfg.num_classes], 1.0 / (df as f64).sqrt(), &mut rng),
            bias: Tensor::zeros(&[cfg.num_classes]),
        };
        Self {
            embed,
            blocks,
            merge,
            head,
        }
    }

    /// Same layout, all zeros. Doubles as the gradient container.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Parameter names and tensors in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        push_linear(&mut out, "embed.patch", &self.embed.patch);
        out.push(("embed.pos.kernel".into(), &self.embed.pos_kernel));
        out.push(("embed.pos.scale".into(), &self.embed.pos_scale));
        out.push(("embed.pos.shift".into(), &self.embed.pos_shift));
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, l) in b.layers() {
                push_linear(&mut out, &format!("blocks.{i}.{name}"), l);
            }
        }
        if let Some(m) = &self.merge {
            push_linear(&mut out, "merge.conv", &m.conv);
        }
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    /// Mutable tensors, same order as [`ModelWeights::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        let e = &mut self.embed;
        out.extend([&mut e.patch.weight, &mut e.patch.scale, &mut e.patch.shift]);
        out.extend([&mut e.pos_kernel, &mut e.pos_scale, &mut e.pos_shift]);
        for b in &mut self.blocks {
            for (_, l) in b.layers_mut() {
                out.extend([&mut l.weight, &mut l.scale, &mut l.shift]);
            }
        }
        if let Some(m) = &mut self.merge {
            out.extend([&mut m.conv.weight, &mut m.conv.scale, &mut m.conv.shift]);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &ModelWeights) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += alpha * y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

fn push_linear<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, l: &'a LinearAffine) {
    out.push((format!("{prefix}.weight"), &l.weight));
    out.push((format!("{prefix}.scale"), &l.scale));
    out.push((format!("{prefix}.shift"), &l.shift));
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedState {
    pub patch: NeuronState,
    pub pos: NeuronState,
    pub out: NeuronState,
}

/// All membranes of one forward sequence plus each block's input at the
/// previous time step (for the temporal scorer).
#[derive(Debug, Clone)]
pub struct ModelState {
    pub embed: EmbedState,
    pub blocks: Vec<BlockState>,
    pub merge: Option<NeuronState>,
    pub prev_inputs: Vec<Option<Tensor>>,
}

impl ModelState {
    pub fn new(cfg: &ModelConfig) -> Self {
        let g = cfg.embed_geometry();
        let n = || NeuronState::zeros(&[g.tokens(), g.dim]);
        let blocks = (0..cfg.num_blocks)
            .map(|b| {
                let bg = cfg.block_geometry(b);
                BlockState::zeros(bg.tokens(), bg.dim, cfg.hidden_dim(b))
            })
            .collect();
        let merge = cfg
            .has_merge_stage
            .then(|| NeuronState::zeros(&[g.tokens() / 4, 2 * g.dim]));
        Self {
            embed: EmbedState {
                patch: n(),
                pos: n(),
                out: n(),
            },
            blocks,
            merge,
            prev_inputs: vec![None; cfg.num_blocks],
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmbedCache {
    pub n_patch: NeuronCache,
    pub z_pos: Tensor,
    pub n_pos: NeuronCache,
    pub n_out: NeuronCache,
}

#[derive(Debug, Clone)]
pub struct MergeCache {
    pub input: Tensor,
    pub patches: Tensor,
    pub z: Tensor,
    pub neuron: NeuronCache,
}

#[derive(Debug, Clone)]
pub struct StepTrace {
    pub embed: EmbedCache,
    pub merge: Option<MergeCache>,
    pub blocks: Vec<BlockCache>,
    pub output: Tensor,
}

/// Everything backward needs from one forward sequence.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub patches: Tensor,
    pub z_patch: Tensor,
    pub steps: Vec<StepTrace>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Vec<f64>,
    pub trace: Option<ForwardTrace>,
}

/// Pruning applied during a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Pruning<'a> {
    pub scorer: &'a ScorerConfig,
    pub schedule: &'a PruneSchedule,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions<'a> {
    pub pruning: Option<Pruning<'a>>,
    pub trace: bool,
    pub mode: SpikeMode,
}

/// Hooks into a forward pass; all methods default to no-ops.
pub trait Observer {
    fn on_embed(&mut self, _t: usize, _cache: &EmbedCache) {}
    fn on_scores(&mut self, _block: usize, _t: usize, _scores: &ScoreMap, _partition: &TokenPartition) {}
    fn on_block(&mut self, _block: usize, _t: usize, _cache: &BlockCache, _geometry: Geometry) {}
    fn on_merge(&mut self, _t: usize, _cache: &MergeCache) {}
    fn on_output(&mut self, _t: usize, _features: &Tensor) {}
}

pub struct NoopObserver;

impl Observer for NoopObserver {}

#[derive(Debug, Clone, PartialEq)]
pub struct SpikingTransformer {
    pub config: ModelConfig,
    pub weights: ModelWeights,
}

impl SpikingTransformer {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let weights = ModelWeights::init(&config, seed);
        Ok(Self { config, weights })
    }

    pub fn from_weights(config: ModelConfig, weights: ModelWeights) -> Result<Self> {
        config.validate()?;
        let reference = ModelWeights::init(&config, 0);
        let expected = reference.named_tensors();
        let got = weights.named_tensors();
        if expected.len() != got.len() {
            return Err(Error::config(
                "model",
                format!("weights hold {} tensors, config implies {}", got.len(), expected.len()),
            ));
        }
        for ((en, et), (gn, gt)) in expected.iter().zip(&got) {
            if en != gn || et.shape() != gt.shape() {
                return Err(Error::config(
                    gn.clone(),
                    format!("expected {en} {:?}, got {:?}", et.shape(), gt.shape()),
                ));
            }
        }
        Ok(Self { config, weights })
    }

    pub fn block_ctx(&self, mode: SpikeMode) -> BlockCtx {
        BlockCtx {
            lif: self.config.neuron,
            surrogate: self.config.surrogate,
            mode,
            heads: self.config.heads,
            attention_scale: self.config.attention_scale,
        }
    }

    pub fn check_image(&self, image: &Tensor) -> Result<()> {
        let c = &self.config;
        let want = [c.input_height, c.input_width, c.input_channels];
        if image.shape() != want {
            return Err(Error::dim(
                "embed",
                format!("image {:?}, model expects {want:?}", image.shape()),
            ));
        }
        Ok(())
    }

    fn embed_step(&self, z_patch: &Tensor, st: &mut EmbedState, ctx: &BlockCtx) -> Result<(Tensor, EmbedCache)> {
        let e = &self.weights.embed;
        let g = self.config.embed_geometry();
        let y = affine(z_patch, &e.patch.scale, &e.patch.shift);
        let (s_patch, u_patch) = st.patch.fire(&y, &ctx.lif, &ctx.surrogate, ctx.mode)?;
        let z_pos = depthwise3x3(&s_patch, g.height, g.width, &e.pos_kernel);
        let yp = affine(&z_pos, &e.pos_scale, &e.pos_shift);
        let (s_pos, u_pos) = st.pos.fire(&yp, &ctx.lif, &ctx.surrogate, ctx.mode)?;
        let r = s_patch.add(&s_pos);
        let (x, u_out) = st.out.fire(&r, &ctx.lif, &ctx.surrogate, ctx.mode)?;
        Ok((
            x.clone(),
            EmbedCache {
                n_patch: NeuronCache {
                    u_tilde: u_patch,
                    spikes: s_patch,
                },
                z_pos,
                n_pos: NeuronCache {
                    u_tilde: u_pos,
                    spikes: s_pos,
                },
                n_out: NeuronCache {
                    u_tilde: u_out,
                    spikes: x,
                },
            },
        ))
    }

    /// One time step of the patch embedding: `[H, W, D]` spikes.
    pub fn embed(&self, image: &Tensor, st: &mut EmbedState) -> Result<Tensor> {
        self.check_image(image)?;
        let patches = patchify(image, self.config.patch_size)?;
        let z = matmul(&patches, &self.weights.embed.patch.weight)?;
        let (x, _) = self.embed_step(&z, st, &self.block_ctx(SpikeMode::Heaviside))?;
        let g = self.config.embed_geometry();
        x.reshape(&[g.height, g.width, g.dim])
    }

    fn merge_step(&self, x: &Tensor, st: &mut NeuronState, ctx: &BlockCtx) -> Result<(Tensor, MergeCache)> {
        let g = self.config.embed_geometry();
        let m = self
            .weights
            .merge
            .as_ref()
            .ok_or_else(|| Error::State("merge stage configured without weights".into()))?;
        let grid = x.clone().reshape(&[g.height, g.width, g.dim])?;
        let patches = patchify(&grid, 2)?;
        let (y, z) = m.conv.forward(&patches)?;
        let (s, u) = st.fire(&y, &ctx.lif, &ctx.surrogate, ctx.mode)?;
        Ok((
            s.clone(),
            MergeCache {
                input: x.clone(),
                patches,
                z,
                neuron: NeuronCache { u_tilde: u, spikes: s },
            },
        ))
    }

    /// Runs the whole model on one image. States start from zero.
    pub fn run(&self, image: &Tensor, opts: &RunOptions, obs: &mut dyn Observer) -> Result<ForwardOutput> {
        self.check_image(image)?;
        let cfg = &self.config;
        if let Some(p) = &opts.pruning {
            p.schedule.check_blocks(cfg.num_blocks)?;
            p.scorer.validate()?;
        }
        let ctx = self.block_ctx(opts.mode);
        let mut state = ModelState::new(cfg);
        let patches = patchify(image, cfg.patch_size)?;
        let z_patch = matmul(&patches, &self.weights.embed.patch.weight)?;
        let merge_at = cfg.merge_before_block();

        let mut finals = Vec::with_capacity(cfg.time_steps);
        let mut steps = Vec::new();
        for t in 0..cfg.time_steps {
            let (mut x, ecache) = self.embed_step(&z_patch, &mut state.embed, &ctx)?;
            obs.on_embed(t, &ecache);
            let mut merge_cache = None;
            let mut block_caches = Vec::new();
            for b in 0..cfg.num_blocks {
                if merge_at == Some(b) {
                    let st = state.merge.as_mut().expect("merge state");
                    let (y, mc) = self.merge_step(&x, st, &ctx)?;
                    obs.on_merge(t, &mc);
                    merge_cache = Some(mc);
                    x = y;
                }
                let geom = cfg.block_geometry(b);
                let bw = &self.weights.blocks[b];
                let bs = &mut state.blocks[b];
                let (y, cache) = match &opts.pruning {
                    Some(p) => {
                        let prev = state.prev_inputs[b].as_ref();
                        let out = pruning::prune_rows_forward(
                            &x,
                            prev,
                            t,
                            geom,
                            bw,
                            bs,
                            p.scorer,
                            p.schedule.ratios[b],
                            &ctx,
                        )?;
                        obs.on_scores(b, t, &out.scores, &out.partition);
                        (out.output, out.cache)
                    }
                    None => block_rows_forward(&x, bw, bs, &ctx, (0..geom.tokens()).collect())?,
                };
                obs.on_block(b, t, &cache, geom);
                if opts.pruning.is_some() {
                    state.prev_inputs[b] = Some(x);
                }
                if opts.trace {
                    block_caches.push(cache);
                }
                x = y;
            }
            obs.on_output(t, &x);
            if opts.trace {
                steps.push(StepTrace {
                    embed: ecache,
                    merge: merge_cache,
                    blocks: block_caches,
                    output: x.clone(),
                });
            }
            finals.push(x);
        }
        let logits = classify(&finals, &self.weights.head)?;
        let trace = opts.trace.then_some(ForwardTrace {
            patches,
            z_patch,
            steps,
        });
        Ok(ForwardOutput { logits, trace })
    }

    /// Unpruned forward.
    pub fn forward(&self, image: &Tensor) -> Result<Vec<f64>> {
        Ok(self.run(image, &RunOptions::default(), &mut NoopObserver)?.logits)
    }

    pub fn predict(&self, image: &Tensor, pruning: Option<Pruning<'_>>) -> Result<usize> {
        let opts = RunOptions {
            pruning,
            ..Default::default()
        };
        Ok(argmax(&self.run(image, &opts, &mut NoopObserver)?.logits))
    }
}

/// Stride-2 spiking patch merge: `[H, W, D]` to `[H/2, W/2, 2D]`.
pub fn patch_merge(x: &Tensor, w: &MergeWeights, st: &mut NeuronState, ctx: &BlockCtx) -> Result<Tensor> {
    if x.shape().len() != 3 {
        return Err(Error::dim("patch_merge", format!("expected [H, W, D], got {:?}", x.shape())));
    }
    let (h, wd, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if h % 2 != 0 || wd % 2 != 0 {
        return Err(Error::config("model.has_merge_stage", format!("odd extent {h}x{wd}")));
    }
    let patches = patchify(x, 2)?;
    let (y, _) = w.conv.forward(&patches)?;
    let (s, _) = st.fire(&y, &ctx.lif, &ctx.surrogate, ctx.mode)?;
    s.reshape(&[h / 2, wd / 2, 2 * d])
}

/// Global average pool over tokens, linear head, mean over time steps.
pub fn classify(finals: &[Tensor], head: &HeadWeights) -> Result<Vec<f64>> {
    let c = head.bias.len();
    let mut logits = vec![0.0; c];
    if finals.is_empty() {
        return Ok(head.bias.data().to_vec());
    }
    for x in finals {
        let n = x.rows() as f64;
        let pooled: Vec<f64> = x.sum_rows().into_iter().map(|v| v / n).collect();
        let feat = Tensor::new(&[1, pooled.len()], pooled)?;
        let y = matmul(&feat, &head.weight)?;
        for ((l, yv), b) in logits.iter_mut().zip(y.data()).zip(head.bias.data()) {
            *l += yv + b;
        }
    }
    let inv = 1.0 / finals.len() as f64;
    logits.iter_mut().for_each(|l| *l *= inv);
    Ok(logits)
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
