//! Token scoring and the pruned block forward.
//!
//! Each block scores its input tokens from spatial dissimilarity (token vs.
//! the mean of its k x k neighbourhood) and temporal variation (change from
//! the previous step's input to the same block), keeps the top-K, runs the
//! block on those rows only and passes the rest through unchanged.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{block_rows_forward, BlockCache, BlockCtx, BlockState, BlockWeights, Geometry, SpikingTransformer};
use crate::model::{NoopObserver, Pruning, RunOptions};
use crate::numerics::{cosine_similarity, l1_norm, l2_norm, window_mean, Tensor, COSINE_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    #[default]
    L1,
    L2,
}

impl NormKind {
    pub fn norm(&self, v: &[f64]) -> f64 {
        match self {
            NormKind::L1 => l1_norm(v),
            NormKind::L2 => l2_norm(v),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScorerConfig {
    pub window_k: usize,
    /// Weight of the spatial score; the temporal score gets `1 - alpha`.
    pub alpha: f64,
    pub spatial_only_first_step: bool,
    pub norm_kind: NormKind,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            window_k: 3,
            alpha: 0.5,
            spatial_only_first_step: true,
            norm_kind: NormKind::L1,
        }
    }
}

impl ScorerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_k == 0 || self.window_k.is_multiple_of(2) {
            return Err(Error::config(
                "scorer.window_k",
                format!("must be odd and >= 1, got {}", self.window_k),
            ));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(
                "scorer.alpha",
                format!("must lie in [0, 1], got {}", self.alpha),
            ));
        }
        Ok(())
    }
}

/// Per-token scores on an `[H, W]` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub scores: Tensor,
    pub normalized: bool,
}

impl ScoreMap {
    pub fn height(&self) -> usize {
        self.scores.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.scores.shape()[1]
    }

    pub fn values(&self) -> &[f64] {
        self.scores.data()
    }
}

/// Per-block retention ratios (fraction of tokens each block processes).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PruneSchedule {
    pub ratios: Vec<f64>,
}

impl PruneSchedule {
    pub fn new(ratios: Vec<f64>) -> Result<Self> {
        if ratios.is_empty() {
            return Err(Error::param("schedule", "empty schedule"));
        }
        for (i, r) in ratios.iter().enumerate() {
            if !(r.is_finite() && *r > 0.0 && *r <= 1.0) {
                return Err(Error::param("schedule", format!("ratio {r} at block {i} outside (0, 1]")));
            }
        }
        Ok(Self { ratios })
    }

    pub fn uniform(ratio: f64, blocks: usize) -> Result<Self> {
        Self::new(vec![ratio; blocks])
    }

    pub fn identity(blocks: usize) -> Self {
        Self {
            ratios: vec![1.0; blocks],
        }
    }

    /// From per-block pruning rates (fraction dropped).
    pub fn from_pruning_rates(rates: &[f64]) -> Result<Self> {
        Self::new(rates.iter().map(|p| 1.0 - p).collect())
    }

    pub fn pruning_rates(&self) -> Vec<f64> {
        self.ratios.iter().map(|r| 1.0 - r).collect()
    }

    pub fn len(&self) -> usize {
        self.ratios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ratios.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.ratios.iter().sum::<f64>() / self.ratios.len() as f64
    }

    pub fn is_non_increasing(&self) -> bool {
        self.ratios.windows(2).all(|w| w[0] >= w[1])
    }

    pub fn check_blocks(&self, blocks: usize) -> Result<()> {
        if self.ratios.len() != blocks {
            return Err(Error::config(
                "schedule",
                format!("{} ratios for a {blocks}-block model", self.ratios.len()),
            ));
        }
        Self::new(self.ratios.clone()).map(|_| ())
    }
}

impl std::fmt::Display for PruneSchedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.ratios.iter().map(|r| format!("{r}")).collect();
        write!(f, "{}", parts.join(";"))
    }
}

/// Informative and bypassed tokens as flattened `h * W + w` indices, both
/// in ascending order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenPartition {
    pub height: usize,
    pub width: usize,
    pub informative: Vec<usize>,
    pub uninformative: Vec<usize>,
}

impl TokenPartition {
    pub fn informative_coords(&self) -> Vec<(usize, usize)> {
        self.informative.iter().map(|i| (i / self.width, i % self.width)).collect()
    }

    pub fn uninformative_coords(&self) -> Vec<(usize, usize)> {
        self.uninformative.iter().map(|i| (i / self.width, i % self.width)).collect()
    }

    /// Row-major keep mask, 1 for informative.
    pub fn keep_mask(&self) -> Vec<u8> {
        let mut m = vec![0u8; self.height * self.width];
        for &i in &self.informative {
            m[i] = 1;
        }
        m
    }
}

/// Number of tokens retained at `ratio` out of `n`, at least one.
pub fn keep_count(ratio: f64, n: usize) -> usize {
    // guard against ceil(0.5 * 4.000000001)
    let k = (ratio * n as f64 - 1e-9).ceil();
    (k.max(1.0) as usize).min(n)
}

fn check_grid(op: &'static str, x: &Tensor) -> Result<(usize, usize, usize)> {
    if x.shape().len() != 3 {
        return Err(Error::dim(op, format!("expected [H, W, D], got {:?}", x.shape())));
    }
    Ok((x.shape()[0], x.shape()[1], x.shape()[2]))
}

/// Raw spatial dissimilarity: `1 - cos(token, window mean)`.
pub fn spatial_score(x: &Tensor, cfg: &ScorerConfig) -> Result<ScoreMap> {
    let (h, w, d) = check_grid("spatial_score", x)?;
    let mean = window_mean(x, cfg.window_k)?;
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h * w {
        let a = &x.data()[i * d..(i + 1) * d];
        let m = &mean.data()[i * d..(i + 1) * d];
        out.push(1.0 - cosine_similarity(a, m, COSINE_EPS));
    }
    Ok(ScoreMap {
        scores: Tensor::new(&[h, w], out)?,
        normalized: false,
    })
}

/// Raw temporal variation: norm of the change from the previous step, or
/// of the token itself when there is no previous step.
pub fn temporal_score(x_t: &Tensor, x_prev: Option<&Tensor>, cfg: &ScorerConfig) -> Result<ScoreMap> {
    let (h, w, d) = check_grid("temporal_score", x_t)?;
    let mut out = Vec::with_capacity(h * w);
    match x_prev {
        Some(p) => {
            if p.shape() != x_t.shape() {
                return Err(Error::dim(
                    "temporal_score",
                    format!("{:?} vs previous {:?}", x_t.shape(), p.shape()),
                ));
            }
            let mut diff = vec![0.0; d];
            for i in 0..h * w {
                let a = &x_t.data()[i * d..(i + 1) * d];
                let b = &p.data()[i * d..(i + 1) * d];
                for ((o, x), y) in diff.iter_mut().zip(a).zip(b) {
                    *o = x - y;
                }
                out.push(cfg.norm_kind.norm(&diff));
            }
        }
        None => {
            for i in 0..h * w {
                out.push(cfg.norm_kind.norm(&x_t.data()[i * d..(i + 1) * d]));
            }
        }
    }
    Ok(ScoreMap {
        scores: Tensor::new(&[h, w], out)?,
        normalized: false,
    })
}

/// Scales scores to sum to one; an all-zero map becomes uniform.
pub fn normalize(raw: &ScoreMap) -> Result<ScoreMap> {
    let v = raw.scores.data();
    if let Some(bad) = v.iter().find(|s| !(**s >= 0.0) || !s.is_finite()) {
        return Err(Error::Internal(format!("score {bad} is negative or not finite")));
    }
    let sum: f64 = v.iter().sum();
    let data = if sum > 0.0 {
        v.iter().map(|s| s / sum).collect()
    } else {
        vec![1.0 / v.len() as f64; v.len()]
    };
    Ok(ScoreMap {
        scores: Tensor::new(raw.scores.shape(), data)?,
        normalized: true,
    })
}

/// Combined normalized score of the tokens of `x_t` at step `t` (0-based).
pub fn irtop(x_t: &Tensor, x_prev: Option<&Tensor>, t: usize, cfg: &ScorerConfig) -> Result<ScoreMap> {
    let spatial = normalize(&spatial_score(x_t, cfg)?)?;
    if t == 0 && cfg.spatial_only_first_step {
        return Ok(spatial);
    }
    let prev = if t == 0 { None } else { x_prev };
    let temporal = normalize(&temporal_score(x_t, prev, cfg)?)?;
    let a = cfg.alpha;
    let mixed = spatial
        .values()
        .iter()
        .zip(temporal.values())
        .map(|(s, tm)| a * s + (1.0 - a) * tm)
        .collect();
    normalize(&ScoreMap {
        scores: Tensor::new(spatial.scores.shape(), mixed)?,
        normalized: false,
    })
}

/// Top-K split of a score map; ties go to the lower flattened index.
pub fn partition(scores: &ScoreMap, ratio: f64) -> Result<TokenPartition> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::param("ratio", format!("{ratio} outside (0, 1]")));
    }
    let (h, w) = (scores.height(), scores.width());
    let n = h * w;
    let k = keep_count(ratio, n);
    let v = scores.values();
    let mut idx: Vec<usize> = (0..n).collect();
    let order = |a: &usize, b: &usize| -> Ordering { v[*b].total_cmp(&v[*a]).then(a.cmp(b)) };
    if k < n {
        idx.select_nth_unstable_by(k, order);
    }
    let mut informative = idx[..k].to_vec();
    informative.sort_unstable();
    let mut uninformative = idx[k..].to_vec();
    uninformative.sort_unstable();
    Ok(TokenPartition {
        height: h,
        width: w,
        informative,
        uninformative,
    })
}

#[derive(Debug, Clone)]
pub struct PrunedStep {
    pub output: Tensor,
    pub scores: ScoreMap,
    pub partition: TokenPartition,
    pub cache: BlockCache,
}

/// Pruned block on an `[N, D]` token map laid out on `geom`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn prune_rows_forward(
    x: &Tensor,
    x_prev: Option<&Tensor>,
    t: usize,
    geom: Geometry,
    w: &BlockWeights,
    st: &mut BlockState,
    scorer: &ScorerConfig,
    ratio: f64,
    ctx: &BlockCtx,
) -> Result<PrunedStep> {
    let shape = [geom.height, geom.width, geom.dim];
    let grid = x.clone().reshape(&shape)?;
    let prev = x_prev.map(|p| p.clone().reshape(&shape)).transpose()?;
    let scores = irtop(&grid, prev.as_ref(), t, scorer)?;
    let part = partition(&scores, ratio)?;
    let rows = part.informative.clone();
    let xs = x.gather_rows(&rows);
    let mut sub = st.gather(&rows);
    let (y, cache) = block_rows_forward(&xs, w, &mut sub, ctx, rows.clone())?;
    st.scatter(&rows, &sub);
    let mut output = x.clone();
    output.scatter_rows(&rows, &y);
    Ok(PrunedStep {
        output,
        scores,
        partition: part,
        cache,
    })
}

/// Pruned block on an `[H, W, D]` map. `x_prev` is this block's input at
/// the previous step. Bypassed tokens keep their input row and membranes.
#[allow(clippy::too_many_arguments)]
pub fn pruned_block_forward(
    x_t: &Tensor,
    x_prev: Option<&Tensor>,
    t: usize,
    w: &BlockWeights,
    st: &mut BlockState,
    scorer: &ScorerConfig,
    ratio: f64,
    ctx: &BlockCtx,
) -> Result<PrunedStep> {
    let (h, wd, d) = check_grid("pruned_block_forward", x_t)?;
    if d != w.dim() || st.input.membrane.rows() != h * wd {
        return Err(Error::dim(
            "pruned_block_forward",
            format!("input {:?}, block dim {}, state rows {}", x_t.shape(), w.dim(), st.input.membrane.rows()),
        ));
    }
    let geom = Geometry { height: h, width: wd, dim: d };
    let flat = x_t.clone().reshape(&[h * wd, d])?;
    let prev = x_prev.map(|p| p.clone().reshape(&[h * wd, d])).transpose()?;
    let mut step = prune_rows_forward(&flat, prev.as_ref(), t, geom, w, st, scorer, ratio, ctx)?;
    step.output = step.output.reshape(&[h, wd, d])?;
    Ok(step)
}

/// Full pruned model forward.
pub fn model_forward_pruned(
    model: &SpikingTransformer,
    image: &Tensor,
    scorer: &ScorerConfig,
    schedule: &PruneSchedule,
) -> Result<Vec<f64>> {
    let opts = RunOptions {
        pruning: Some(Pruning { scorer, schedule }),
        ..Default::default()
    };
    Ok(model.run(image, &opts, &mut NoopObserver)?.logits)
}
