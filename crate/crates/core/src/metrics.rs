//! Operation counts, firing rates, synaptic operations and energy.
//!
//! `sops = firing_rate * T * flops` for every layer. Spike-driven layers are
//! billed per accumulate, the real-valued first convolution per
//! multiply-accumulate, and the token scorer separately at the
//! multiply-accumulate rate.

use std::time::Instant;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BlockCache, EmbedCache, Geometry, MergeCache, ModelConfig, Observer, Pruning, RunOptions, SpikingTransformer};
use crate::numerics::Tensor;
use crate::pruning::{ScoreMap, ScorerConfig, TokenPartition};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyConstants {
    /// Picojoules per multiply-accumulate.
    pub e_mac: f64,
    /// Picojoules per accumulate.
    pub e_ac: f64,
}

impl Default for EnergyConstants {
    fn default() -> Self {
        Self { e_mac: 4.6, e_ac: 0.9 }
    }
}

impl EnergyConstants {
    pub fn validate(&self) -> Result<()> {
        if !(self.e_mac > 0.0 && self.e_ac > 0.0) {
            return Err(Error::param("energy", "e_mac and e_ac must be > 0"));
        }
        Ok(())
    }

    /// `e_mac * flops_conv1 + e_ac * sops`.
    pub fn total(&self, flops_conv1: u64, sops: f64) -> f64 {
        self.e_mac * flops_conv1 as f64 + self.e_ac * sops
    }
}

/// Dense shape of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerShape {
    /// `rows x fan_in` times `fan_in x fan_out`.
    Linear { rows: usize, fan_in: usize, fan_out: usize },
    Conv {
        h_out: usize,
        w_out: usize,
        c_in: usize,
        c_out: usize,
        k: usize,
    },
    /// Depthwise convolution, one filter per channel.
    DepthwiseConv { h_out: usize, w_out: usize, channels: usize, k: usize },
    /// One of the two attention products over `tokens` tokens of width `dim`
    /// summed across heads.
    AttentionProduct { tokens: usize, dim: usize },
    Elementwise { count: usize },
}

pub fn count_flops(shape: LayerShape) -> u64 {
    let u = |v: usize| v as u64;
    match shape {
        LayerShape::Linear { rows, fan_in, fan_out } => u(rows) * u(fan_in) * u(fan_out),
        LayerShape::Conv {
            h_out,
            w_out,
            c_in,
            c_out,
            k,
        } => u(h_out) * u(w_out) * u(c_out) * u(c_in) * u(k) * u(k),
        LayerShape::DepthwiseConv { h_out, w_out, channels, k } => u(h_out) * u(w_out) * u(channels) * u(k) * u(k),
        LayerShape::AttentionProduct { tokens, dim } => u(tokens) * u(tokens) * u(dim),
        LayerShape::Elementwise { count } => u(count),
    }
}

/// Mean of all entries across a stream of spike tensors.
pub fn measure_firing_rate<'a>(stream: impl IntoIterator<Item = &'a Tensor>) -> f64 {
    let (mut active, mut total) = (0.0, 0usize);
    for t in stream {
        active += t.sum();
        total += t.len();
    }
    if total == 0 {
        0.0
    } else {
        active / total as f64
    }
}

/// Operations the scorer spends per step on an `[N, D]` map.
pub fn scorer_flops(tokens: usize, dim: usize, cfg: &ScorerConfig) -> u64 {
    let (n, d, k) = (tokens as u64, dim as u64, cfg.window_k as u64);
    // window mean, cosine (three dot products), temporal norm, mixing, top-k
    n * d * k * k + 3 * n * d + n * d + 4 * n
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Billing {
    Mac,
    Ac,
    Overhead,
}

#[derive(Debug, Clone, PartialEq)]
struct LayerAcc {
    billing: Billing,
    flops: u64,
    active: f64,
    elements: f64,
    dense: bool,
}

/// Accumulates per-layer FLOPs and input firing over one or more runs.
#[derive(Debug, Clone)]
pub struct StatsObserver {
    cfg: ModelConfig,
    scorer: Option<ScorerConfig>,
    layers: IndexMap<String, LayerAcc>,
    runs: usize,
}

impl StatsObserver {
    pub fn new(cfg: &ModelConfig, scorer: Option<&ScorerConfig>) -> Self {
        let mut s = Self {
            cfg: cfg.clone(),
            scorer: scorer.copied(),
            layers: IndexMap::new(),
            runs: 0,
        };
        // fixed layer order regardless of which hooks fire first
        let g = cfg.embed_geometry();
        let fan = cfg.patch_size * cfg.patch_size * cfg.input_channels;
        s.dense("embed.conv1", Billing::Mac, count_flops(LayerShape::Linear {
            rows: g.tokens(),
            fan_in: fan,
            fan_out: g.dim,
        }));
        s.touch("embed.pos_conv", Billing::Ac);
        s.touch("embed.neurons", Billing::Ac);
        for b in 0..cfg.num_blocks {
            if cfg.merge_before_block() == Some(b) {
                s.touch("merge.conv", Billing::Ac);
                s.touch("merge.neurons", Billing::Ac);
            }
            if scorer.is_some() {
                s.touch(&format!("blocks.{b}.scorer"), Billing::Overhead);
            }
            for l in ["qkv", "attn_qk", "attn_v", "proj", "mlp1", "mlp2", "neurons"] {
                s.touch(&format!("blocks.{b}.{l}"), Billing::Ac);
            }
        }
        s.touch("head", Billing::Ac);
        s
    }

    fn touch(&mut self, name: &str, billing: Billing) {
        self.layers.entry(name.to_string()).or_insert(LayerAcc {
            billing,
            flops: 0,
            active: 0.0,
            elements: 0.0,
            dense: false,
        });
    }

    fn dense(&mut self, name: &str, billing: Billing, flops: u64) {
        self.layers.insert(
            name.to_string(),
            LayerAcc {
                billing,
                flops,
                active: 0.0,
                elements: 0.0,
                dense: true,
            },
        );
    }

    /// Records one step of a spike-driven layer with `flops` dense
    /// operations fed by `input`.
    fn spiking(&mut self, name: &str, flops: u64, input: &Tensor) {
        let e = self.layers.get_mut(name).expect("layer registered");
        e.flops = flops;
        e.active += input.sum();
        e.elements += input.len() as f64;
    }

    /// Records one step of a layer billed at a firing rate of one.
    fn always(&mut self, name: &str, flops: u64) {
        let e = self.layers.get_mut(name).expect("layer registered");
        e.flops = flops;
        e.dense = true;
    }

    pub fn finish_run(&mut self) {
        self.runs += 1;
    }

    /// Associative merge of two collectors over the same model.
    pub fn merge(&mut self, other: &StatsObserver) {
        for (name, o) in &other.layers {
            match self.layers.get_mut(name) {
                Some(e) => {
                    e.flops = e.flops.max(o.flops);
                    e.active += o.active;
                    e.elements += o.elements;
                    e.dense |= o.dense;
                }
                None => {
                    self.layers.insert(name.clone(), o.clone());
                }
            }
        }
        self.runs += other.runs;
    }

    pub fn layer_stats(&self, constants: &EnergyConstants) -> Vec<LayerStats> {
        let t = self.cfg.time_steps as f64;
        self.layers
            .iter()
            .map(|(name, e)| {
                let firing_rate = if e.billing == Billing::Mac || e.dense {
                    1.0
                } else if e.elements > 0.0 {
                    e.active / e.elements
                } else {
                    0.0
                };
                let sops = firing_rate * t * e.flops as f64;
                let energy_pj = match e.billing {
                    Billing::Mac => constants.e_mac * e.flops as f64,
                    Billing::Ac => constants.e_ac * sops,
                    Billing::Overhead => constants.e_mac * sops,
                };
                LayerStats {
                    name: name.clone(),
                    billing: e.billing,
                    flops: e.flops,
                    firing_rate,
                    sops,
                    energy_pj,
                }
            })
            .collect()
    }
}

impl Observer for StatsObserver {
    fn on_embed(&mut self, _t: usize, c: &EmbedCache) {
        let g = self.cfg.embed_geometry();
        let n = g.tokens();
        self.spiking(
            "embed.pos_conv",
            count_flops(LayerShape::DepthwiseConv {
                h_out: g.height,
                w_out: g.width,
                channels: g.dim,
                k: 3,
            }),
            &c.n_patch.spikes,
        );
        // three neuron updates and one residual add
        self.always("embed.neurons", count_flops(LayerShape::Elementwise { count: 4 * n * g.dim }));
    }

    fn on_scores(&mut self, block: usize, _t: usize, s: &ScoreMap, _p: &TokenPartition) {
        if let Some(sc) = self.scorer {
            let d = self.cfg.block_geometry(block).dim;
            let f = scorer_flops(s.height() * s.width(), d, &sc);
            self.always(&format!("blocks.{block}.scorer"), f);
        }
    }

    fn on_block(&mut self, b: usize, _t: usize, c: &BlockCache, g: Geometry) {
        let k = c.rows.len();
        let d = g.dim;
        let hid = c.n_hidden.spikes.cols();
        let lin = |fan_in, fan_out| count_flops(LayerShape::Linear { rows: k, fan_in, fan_out });
        let att = count_flops(LayerShape::AttentionProduct { tokens: k, dim: d });
        let p = format!("blocks.{b}.");
        self.spiking(&format!("{p}qkv"), 3 * lin(d, d), &c.n_in.spikes);
        self.spiking(&format!("{p}attn_qk"), att, &c.n_q.spikes);
        self.spiking(&format!("{p}attn_v"), att, &c.n_v.spikes);
        self.spiking(&format!("{p}proj"), lin(d, d), &c.n_attn.spikes);
        self.spiking(&format!("{p}mlp1"), lin(d, hid), &c.n_res1.spikes);
        self.spiking(&format!("{p}mlp2"), lin(hid, d), &c.n_hidden.spikes);
        // nine neuron layers (eight of width D, one hidden) and two residual adds
        let ew = count_flops(LayerShape::Elementwise {
            count: 10 * k * d + k * hid,
        });
        self.always(&format!("{p}neurons"), ew);
    }

    fn on_merge(&mut self, _t: usize, c: &MergeCache) {
        let rows = c.patches.rows();
        let fan_in = c.patches.cols();
        let fan_out = c.z.cols();
        self.spiking(
            "merge.conv",
            count_flops(LayerShape::Linear { rows, fan_in, fan_out }),
            &c.input,
        );
        self.always("merge.neurons", count_flops(LayerShape::Elementwise { count: rows * fan_out }));
    }

    fn on_output(&mut self, _t: usize, features: &Tensor) {
        let f = count_flops(LayerShape::Linear {
            rows: 1,
            fan_in: features.cols(),
            fan_out: self.cfg.num_classes,
        });
        self.spiking("head", f, features);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub name: String,
    pub billing: Billing,
    /// Dense operations per time step.
    pub flops: u64,
    pub firing_rate: f64,
    pub sops: f64,
    pub energy_pj: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub layers: Vec<LayerStats>,
    /// First convolution at the MAC rate plus all spike-driven layers.
    pub total_pj: f64,
    pub total_mj: f64,
    pub scorer_overhead_pj: f64,
    pub total_with_overhead_pj: f64,
    pub schedule: Option<Vec<f64>>,
    pub retained_avg: f64,
    pub images: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_fingerprint: Option<String>,
}

impl EnergyReport {
    pub fn from_layers(layers: Vec<LayerStats>, schedule: Option<Vec<f64>>, images: usize) -> Self {
        let mut total_pj = 0.0;
        let mut overhead = 0.0;
        for l in &layers {
            match l.billing {
                Billing::Overhead => overhead += l.energy_pj,
                _ => total_pj += l.energy_pj,
            }
        }
        let retained_avg = schedule
            .as_ref()
            .map(|s| s.iter().sum::<f64>() / s.len() as f64)
            .unwrap_or(1.0);
        Self {
            layers,
            total_pj,
            total_mj: total_pj * 1e-9,
            scorer_overhead_pj: overhead,
            total_with_overhead_pj: total_pj + overhead,
            schedule,
            retained_avg,
            images,
            config_fingerprint: None,
        }
    }

    pub fn layer(&self, name: &str) -> Option<&LayerStats> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Sum of SOPs over layers whose name starts with `prefix`.
    pub fn sops_with_prefix(&self, prefix: &str) -> f64 {
        self.layers
            .iter()
            .filter(|l| l.name.starts_with(prefix) && l.billing == Billing::Ac)
            .map(|l| l.sops)
            .sum()
    }
}

/// Runs `images` and bills the average image.
pub fn energy_report(
    model: &SpikingTransformer,
    images: &[Tensor],
    pruning: Option<Pruning<'_>>,
    constants: &EnergyConstants,
) -> Result<EnergyReport> {
    constants.validate()?;
    if images.is_empty() {
        return Err(Error::param("images", "energy report needs at least one image"));
    }
    let mut stats = StatsObserver::new(&model.config, pruning.map(|p| p.scorer));
    let opts = RunOptions {
        pruning,
        ..Default::default()
    };
    for img in images {
        model.run(img, &opts, &mut stats)?;
        stats.finish_run();
    }
    let schedule = pruning.map(|p| p.schedule.ratios.clone());
    Ok(EnergyReport::from_layers(stats.layer_stats(constants), schedule, images.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Throughput {
    pub images_per_second: f64,
    pub samples: Vec<f64>,
}

/// Median images/second over `repetitions` timed passes after one warm-up.
pub fn throughput(
    model: &SpikingTransformer,
    images: &[Tensor],
    pruning: Option<Pruning<'_>>,
    repetitions: usize,
) -> Result<Throughput> {
    if repetitions == 0 {
        return Err(Error::param("repetitions", "must be >= 1"));
    }
    if images.is_empty() {
        return Err(Error::param("images", "empty batch"));
    }
    let pass = || -> Result<f64> {
        let start = Instant::now();
        for img in images {
            model.predict(img, pruning)?;
        }
        Ok(images.len() as f64 / start.elapsed().as_secs_f64().max(1e-12))
    };
    pass()?;
    let mut samples = (0..repetitions).map(|_| pass()).collect::<Result<Vec<_>>>()?;
    let mut sorted = samples.clone();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len();
    let median = if m % 2 == 1 {
        sorted[m / 2]
    } else {
        0.5 * (sorted[m / 2 - 1] + sorted[m / 2])
    };
    samples.shrink_to_fit();
    Ok(Throughput {
        images_per_second: median,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        assert_eq!(count_flops(LayerShape::Linear { rows: 1, fan_in: 4, fan_out: 8 }), 32);
        assert_eq!(
            count_flops(LayerShape::Conv {
                h_out: 8,
                w_out: 8,
                c_in: 16,
                c_out: 16,
                k: 3
            }),
            147_456
        );
        let full = count_flops(LayerShape::AttentionProduct { tokens: 16, dim: 32 });
        let half = count_flops(LayerShape::AttentionProduct { tokens: 8, dim: 32 });
        assert_eq!(full, 4 * half);
        assert_eq!(EnergyConstants::default().total(1000, 2000.0), 6400.0);
    }

    #[test]
    fn firing_rates() {
        let z = Tensor::zeros(&[4, 4]);
        let o = Tensor::full(&[4, 4], 1.0);
        assert_eq!(measure_firing_rate([&z]), 0.0);
        assert_eq!(measure_firing_rate([&o, &o]), 1.0);
        let half = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(measure_firing_rate([&half]), 0.5);
        assert_eq!(measure_firing_rate([&z, &o]), 0.5);
    }

    #[test]
    fn throughput_single_rep() {
        let m = SpikingTransformer::new(ModelConfig::default(), 0).unwrap();
        let imgs = vec![Tensor::zeros(&[16, 16, 1])];
        let t = throughput(&m, &imgs, None, 1).unwrap();
        assert_eq!(t.samples.len(), 1);
        assert_eq!(t.images_per_second, t.samples[0]);
        assert!(throughput(&m, &imgs, None, 0).is_err());
    }
}
