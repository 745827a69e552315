//! Finite-difference gradient checks shared by the gradient tests and the
//! acceptance runner.

use spikeprune::model::{
    depthwise3x3, spike_attention, BlockCache, EmbedCache, Geometry, LinearAffine, MergeCache, ModelConfig, Observer,
    Pruning, RunOptions, SpikingTransformer,
};
use spikeprune::neuron::{LifParams, SpikeMode, SurrogateParams};
use spikeprune::numerics::{Rng, Tensor};
use spikeprune::training::{attention_backward, backward, depthwise3x3_backward, linear_affine_backward, loss};

use super::binary;

pub const FD_STEP: f64 = 1e-6;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-5)
}

pub fn weighted_sum(y: &Tensor, c: &Tensor) -> f64 {
    y.data().iter().zip(c.data()).map(|(a, b)| a * b).sum()
}

/// Worst relative error of the linear/affine backward on frozen spikes.
pub fn linear_affine_worst() -> f64 {
    let mut rng = Rng::new(11);
    let mut layer = LinearAffine::init(6, 5, 1.0, 0.0, &mut rng);
    layer.scale = Tensor::randn(&[5], 1.0, &mut rng);
    layer.shift = Tensor::randn(&[5], 1.0, &mut rng);
    let x = binary(&[4, 6], 0.5, &mut rng);
    let c = Tensor::randn(&[4, 5], 1.0, &mut rng);
    let f = |l: &LinearAffine, x: &Tensor| weighted_sum(&l.forward(x).unwrap().0, &c);

    let (_, z) = layer.forward(&x).unwrap();
    let mut grad = LinearAffine::zeros(6, 5);
    let g_x = linear_affine_backward(&layer, &x, &z, &c, &mut grad).unwrap();

    let mut worst: f64 = 0.0;
    for which in 0..3 {
        let n = [30, 5, 5][which];
        for i in 0..n {
            let mut p = layer.clone();
            let mut m = layer.clone();
            let (tp, tm, g) = match which {
                0 => (&mut p.weight, &mut m.weight, &grad.weight),
                1 => (&mut p.scale, &mut m.scale, &grad.scale),
                _ => (&mut p.shift, &mut m.shift, &grad.shift),
            };
            tp.data_mut()[i] += FD_STEP;
            tm.data_mut()[i] -= FD_STEP;
            let fd = (f(&p, &x) - f(&m, &x)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(g.data()[i], fd));
        }
    }
    for i in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp.data_mut()[i] += FD_STEP;
        xm.data_mut()[i] -= FD_STEP;
        let fd = (f(&layer, &xp) - f(&layer, &xm)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(g_x.data()[i], fd));
    }
    worst
}

/// Worst relative error of the depthwise and attention backwards.
pub fn depthwise_attention_worst() -> f64 {
    let mut rng = Rng::new(12);
    let (h, w, d) = (3, 4, 3);
    let x = binary(&[h * w, d], 0.5, &mut rng);
    let kernel = Tensor::randn(&[9, d], 1.0, &mut rng);
    let c = Tensor::randn(&[h * w, d], 1.0, &mut rng);
    let mut gk = Tensor::zeros(&[9, d]);
    let g_x = depthwise3x3_backward(&x, h, w, &kernel, &c, &mut gk);
    let f = |x: &Tensor, k: &Tensor| weighted_sum(&depthwise3x3(x, h, w, k), &c);
    let mut worst: f64 = 0.0;
    for i in 0..kernel.len() {
        let (mut kp, mut km) = (kernel.clone(), kernel.clone());
        kp.data_mut()[i] += FD_STEP;
        km.data_mut()[i] -= FD_STEP;
        worst = worst.max(rel_err(gk.data()[i], (f(&x, &kp) - f(&x, &km)) / (2.0 * FD_STEP)));
    }
    for i in 0..x.len() {
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp.data_mut()[i] += FD_STEP;
        xm.data_mut()[i] -= FD_STEP;
        worst = worst.max(rel_err(g_x.data()[i], (f(&xp, &kernel) - f(&xm, &kernel)) / (2.0 * FD_STEP)));
    }

    let n = 5;
    let (q, k, v) = (binary(&[n, 4], 0.5, &mut rng), binary(&[n, 4], 0.5, &mut rng), binary(&[n, 4], 0.5, &mut rng));
    let c = Tensor::randn(&[n, 4], 1.0, &mut rng);
    let (gq, gk, gv) = attention_backward(&q, &k, &v, &c, 2, 0.125);
    let f = |q: &Tensor, k: &Tensor, v: &Tensor| weighted_sum(&spike_attention(q, k, v, 2, 0.125), &c);
    for (which, g) in [gq, gk, gv].iter().enumerate() {
        for i in 0..n * 4 {
            let mut ts = [q.clone(), k.clone(), v.clone()];
            let mut tm = [q.clone(), k.clone(), v.clone()];
            ts[which].data_mut()[i] += FD_STEP;
            tm[which].data_mut()[i] -= FD_STEP;
            let fd = (f(&ts[0], &ts[1], &ts[2]) - f(&tm[0], &tm[1], &tm[2])) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(g.data()[i], fd));
        }
    }
    worst
}

/// Records every pre-spike potential of a run.
#[derive(Default)]
pub struct Potentials(Vec<f64>);

impl Observer for Potentials {
    fn on_embed(&mut self, _t: usize, c: &EmbedCache) {
        for n in [&c.n_patch, &c.n_pos, &c.n_out] {
            self.0.extend_from_slice(n.u_tilde.data());
        }
    }
    fn on_block(&mut self, _b: usize, _t: usize, c: &BlockCache, _g: Geometry) {
        for n in [
            &c.n_in, &c.n_q, &c.n_k, &c.n_v, &c.n_attn, &c.n_res1, &c.n_hidden, &c.n_mlp, &c.n_res2,
        ] {
            self.0.extend_from_slice(n.u_tilde.data());
        }
    }
    fn on_merge(&mut self, _t: usize, c: &MergeCache) {
        self.0.extend_from_slice(c.neuron.u_tilde.data());
    }
}

pub struct RelaxedCheck {
    pub checked: usize,
    pub excluded: usize,
    pub worst: f64,
}

/// Surrogate gradient of a relaxed-forward model against central finite
/// differences of the same relaxed forward. Parameters whose perturbation
/// leaves any potential within the kink band are skipped.
pub fn relaxed_check(cfg: ModelConfig, seed: u64, pruning: Option<Pruning<'_>>) -> RelaxedCheck {
    let mut model = SpikingTransformer::new(cfg.clone(), seed).unwrap();
    let mut rng = Rng::new(seed + 100);
    for t in model.weights.tensors_mut() {
        for v in t.data_mut() {
            *v += 0.1 * rng.normal();
        }
    }
    let n = cfg.input_height * cfg.input_width * cfg.input_channels;
    let image = Tensor::new(
        &[cfg.input_height, cfg.input_width, cfg.input_channels],
        (0..n).map(|_| rng.uniform()).collect(),
    )
    .unwrap();
    let label = 1;
    let opts = RunOptions {
        pruning,
        trace: true,
        mode: SpikeMode::Relaxed,
    };
    let out = model.run(&image, &opts, &mut Potentials::default()).unwrap();
    let (_, g_logits) = loss(&out.logits, label);
    let grad = backward(&model, out.trace.as_ref(), &g_logits).unwrap();

    let theta = cfg.neuron.theta;
    let beta = cfg.surrogate.beta;
    let kinks = [theta - beta, theta, theta + beta];
    let near_kink = |u: f64| kinks.iter().any(|k| (u - k).abs() < 1e-3);
    let eval = |m: &SpikingTransformer| {
        let mut pots = Potentials::default();
        let o = m.run(&image, &RunOptions { trace: false, ..opts }, &mut pots).unwrap();
        (loss(&o.logits, label).0, pots.0)
    };
    let (_, base) = eval(&model);

    let grads: Vec<Vec<f64>> = grad.tensors().iter().map(|t| t.data().to_vec()).collect();
    let mut res = RelaxedCheck {
        checked: 0,
        excluded: 0,
        worst: 0.0,
    };
    for (ti, g) in grads.iter().enumerate() {
        for i in 0..g.len() {
            let orig = model.weights.tensors()[ti].data()[i];
            model.weights.tensors_mut()[ti].data_mut()[i] = orig + FD_STEP;
            let (lp, up) = eval(&model);
            model.weights.tensors_mut()[ti].data_mut()[i] = orig - FD_STEP;
            let (lm, um) = eval(&model);
            model.weights.tensors_mut()[ti].data_mut()[i] = orig;
            let touched_kink = base
                .iter()
                .zip(up.iter().zip(&um))
                .any(|(&b, (&p, &m))| p != m && (near_kink(b) || near_kink(p) || near_kink(m)));
            if touched_kink {
                res.excluded += 1;
                continue;
            }
            res.checked += 1;
            res.worst = res.worst.max(rel_err(g[i], (lp - lm) / (2.0 * FD_STEP)));
        }
    }
    res
}

pub fn small_config() -> ModelConfig {
    ModelConfig {
        time_steps: 2,
        input_height: 8,
        input_width: 8,
        input_channels: 1,
        patch_size: 2,
        embed_dim: 8,
        num_blocks: 1,
        mlp_ratio: 2,
        heads: 2,
        attention_scale: 0.125,
        has_merge_stage: false,
        num_classes: 2,
        neuron: LifParams::default(),
        surrogate: SurrogateParams { beta: 0.8 },
    }
}
