mod common;

use common::*;
use spikeprune::model::{block_forward, ssa, BlockCtx, BlockState, BlockWeights};
use spikeprune::neuron::{LifParams, SpikeMode, SurrogateParams};
use spikeprune::numerics::{Rng, Tensor};
use spikeprune::pruning::{
    irtop as engine_irtop, normalize as engine_normalize, partition, pruned_block_forward, spatial_score,
    temporal_score, NormKind, ScoreMap, ScorerConfig,
};

fn ctx(lif: LifParams, heads: usize) -> BlockCtx {
    BlockCtx {
        lif,
        surrogate: SurrogateParams::default(),
        mode: SpikeMode::Heaviside,
        heads,
        attention_scale: 0.125,
    }
}

fn assert_membranes(st: &BlockState, m: &Membranes) {
    for (l, (a, b)) in st.neurons().iter().zip(m).enumerate() {
        let want = from_mat(b, a.membrane.shape());
        assert!(a.membrane.max_abs_diff(&want) < 1e-12, "neuron layer {l}");
    }
}

/// Weights with enough drive that every neuron layer fires sometimes.
fn weights(d: usize, hidden: usize, rng: &mut Rng) -> BlockWeights {
    let mut w = BlockWeights::init(d, hidden, rng);
    for l in [&mut w.q, &mut w.k, &mut w.v, &mut w.proj, &mut w.mlp1, &mut w.mlp2] {
        l.scale = Tensor::randn(l.scale.shape(), 0.5, rng);
        for s in l.scale.data_mut() {
            *s += 1.0;
        }
        l.shift = Tensor::randn(l.shift.shape(), 0.3, rng);
        for v in l.weight.data_mut() {
            *v *= 3.0;
        }
    }
    w
}

#[test]
fn ssa_matches_scalar_loops() {
    let mut rng = Rng::new(1);
    for (n, d, heads) in [(2, 2, 1), (6, 4, 2), (9, 8, 4)] {
        let w = weights(d, 2 * d, &mut rng);
        let c = ctx(LifParams::default(), heads);
        let o = OracleBlock {
            w: &w,
            lif: c.lif,
            heads,
            scale: 0.125,
        };
        let mut st = BlockState::zeros(n, d, 2 * d);
        let mut m = zero_membranes(n, d, 2 * d);
        for _ in 0..4 {
            let x = binary(&[n, d], 0.5, &mut rng);
            let got = ssa(&x, &w, &mut st, &c).unwrap();
            let want = o.ssa(&to_mat(&x), &mut m);
            assert!(got.max_abs_diff(&from_mat(&want, &[n, d])) < 1e-12);
        }
        for (l, (a, b)) in st.neurons().iter().zip(&m).enumerate().take(5) {
            assert!(a.membrane.max_abs_diff(&from_mat(b, a.membrane.shape())) < 1e-12, "layer {l}");
        }
    }
}

#[test]
fn block_matches_scalar_loops_hard_and_soft() {
    let mut rng = Rng::new(2);
    let mut fired = 0.0;
    for lif in [LifParams::default(), LifParams::soft(0.5, 1.0)] {
        for (n, d, heads) in [(2, 2, 1), (5, 4, 2), (12, 8, 2)] {
            let w = weights(d, 3 * d, &mut rng);
            let c = ctx(lif, heads);
            let o = OracleBlock {
                w: &w,
                lif,
                heads,
                scale: 0.125,
            };
            let mut st = BlockState::zeros(n, d, 3 * d);
            let mut m = zero_membranes(n, d, 3 * d);
            for _ in 0..5 {
                let x = binary(&[n, d], 0.4, &mut rng);
                let got = block_forward(&x, &w, &mut st, &c).unwrap();
                let want = o.forward(&to_mat(&x), &mut m);
                assert_eq!(got, from_mat(&want, &[n, d]));
                assert_membranes(&st, &m);
                fired += got.sum();
            }
        }
    }
    assert!(fired > 0.0, "oracle comparison never saw a spike");
}

#[test]
fn pruned_block_matches_oracle() {
    let mut rng = Rng::new(3);
    let scorer = ScorerConfig::default();
    for (h, wd, d, ratio) in [(3, 3, 4, 0.5), (4, 4, 8, 0.3), (2, 5, 4, 0.9), (3, 4, 4, 1.0)] {
        let n = h * wd;
        let w = weights(d, 2 * d, &mut rng);
        let c = ctx(LifParams::default(), 2);
        let o = OracleBlock {
            w: &w,
            lif: c.lif,
            heads: 2,
            scale: 0.125,
        };
        let mut st = BlockState::zeros(n, d, 2 * d);
        let mut m = zero_membranes(n, d, 2 * d);
        let mut prev: Option<Tensor> = None;
        for t in 0..4 {
            let x = binary(&[h, wd, d], 0.5, &mut rng);
            let step = pruned_block_forward(&x, prev.as_ref(), t, &w, &mut st, &scorer, ratio, &c).unwrap();
            let pg = prev.as_ref().map(to_grid);
            let (want, keep) = o.pruned(&to_grid(&x), pg.as_ref(), t, &scorer, ratio, &mut m);
            assert_eq!(step.partition.informative, keep);
            assert_eq!(step.output, from_mat(&want, &[h, wd, d]));
            assert_membranes(&st, &m);
            prev = Some(x);
        }
    }
}

#[test]
fn two_token_two_block_composition() {
    // 1x2 grid, D = 2, one token kept per block
    let mut rng = Rng::new(4);
    let scorer = ScorerConfig::default();
    let ws = [weights(2, 4, &mut rng), weights(2, 4, &mut rng)];
    let c = ctx(LifParams::default(), 1);
    let mut sts = [BlockState::zeros(2, 2, 4), BlockState::zeros(2, 2, 4)];
    let mut ms = [zero_membranes(2, 2, 4), zero_membranes(2, 2, 4)];
    let mut prevs: [Option<Tensor>; 2] = [None, None];
    for t in 0..6 {
        let mut x = binary(&[1, 2, 2], 0.5, &mut rng);
        let mut xo = to_grid(&x);
        for b in 0..2 {
            let o = OracleBlock {
                w: &ws[b],
                lif: c.lif,
                heads: 1,
                scale: 0.125,
            };
            let step = pruned_block_forward(&x, prevs[b].as_ref(), t, &ws[b], &mut sts[b], &scorer, 0.5, &c).unwrap();
            let pg = prevs[b].as_ref().map(to_grid);
            let (y, keep) = o.pruned(&xo, pg.as_ref(), t, &scorer, 0.5, &mut ms[b]);
            assert_eq!(keep.len(), 1);
            assert_eq!(step.partition.informative, keep);
            assert_eq!(step.output, from_mat(&y, &[1, 2, 2]));
            assert_membranes(&sts[b], &ms[b]);
            prevs[b] = Some(x);
            x = step.output;
            xo = vec![y];
        }
    }
}

#[test]
fn bypassed_rows_and_membranes_are_untouched() {
    let mut rng = Rng::new(5);
    let scorer = ScorerConfig::default();
    let (h, wd, d) = (4, 4, 8);
    let w = weights(d, 16, &mut rng);
    let c = ctx(LifParams::default(), 2);
    for _ in 0..20 {
        let ratio = 0.1 + 0.8 * rng.uniform();
        let mut st = BlockState::zeros(h * wd, d, 16);
        // warm the membranes so frozen rows are non-trivial
        block_forward(&binary(&[h * wd, d], 0.5, &mut rng), &w, &mut st, &c).unwrap();
        let before = st.clone();
        let prev = binary(&[h, wd, d], 0.5, &mut rng);
        let x = binary(&[h, wd, d], 0.5, &mut rng);
        let step = pruned_block_forward(&x, Some(&prev), 1, &w, &mut st, &scorer, ratio, &c).unwrap();
        for &i in &step.partition.uninformative {
            let (a, b) = (&step.output.data()[i * d..(i + 1) * d], &x.data()[i * d..(i + 1) * d]);
            assert!(a.iter().zip(b).all(|(p, q)| p.to_bits() == q.to_bits()));
            for (n1, n0) in st.neurons().iter().zip(before.neurons()) {
                let cols = n1.membrane.cols();
                let r1 = &n1.membrane.data()[i * cols..(i + 1) * cols];
                let r0 = &n0.membrane.data()[i * cols..(i + 1) * cols];
                assert!(r1.iter().zip(r0).all(|(p, q)| p.to_bits() == q.to_bits()));
            }
        }
    }
}

fn real_grid(h: usize, w: usize, d: usize, rng: &mut Rng) -> Tensor {
    // mix of binary tokens, real tokens and all-zero tokens
    let mut t = Tensor::randn(&[h, w, d], 1.0, rng);
    for tok in t.data_mut().chunks_mut(d) {
        match rng.below(4) {
            0 => tok.iter_mut().for_each(|v| *v = 0.0),
            1 => tok.iter_mut().for_each(|v| *v = (*v > 0.0) as u8 as f64),
            2 => tok.iter_mut().for_each(|v| *v = v.abs()),
            _ => {}
        }
    }
    t
}

#[test]
fn scorer_matches_scalar_formulas() {
    let mut rng = Rng::new(6);
    let mut worst: f64 = 0.0;
    for i in 0..200 {
        let cfg = ScorerConfig {
            window_k: [1, 3, 5][i % 3],
            alpha: rng.uniform(),
            spatial_only_first_step: i % 2 == 0,
            norm_kind: if i % 4 < 2 { NormKind::L1 } else { NormKind::L2 },
        };
        let x = real_grid(6, 6, 8, &mut rng);
        let p = real_grid(6, 6, 8, &mut rng);
        let (xg, pg) = (to_grid(&x), to_grid(&p));
        let s = spatial_score(&x, &cfg).unwrap();
        let tm = temporal_score(&x, Some(&p), &cfg).unwrap();
        let t0 = temporal_score(&x, None, &cfg).unwrap();
        let t = i % 3;
        let ir = engine_irtop(&x, Some(&p), t, &cfg).unwrap();
        for (got, want) in [
            (s.values().to_vec(), spatial(&xg, cfg.window_k)),
            (tm.values().to_vec(), temporal(&xg, Some(&pg), cfg.norm_kind)),
            (t0.values().to_vec(), temporal(&xg, None, cfg.norm_kind)),
            (ir.values().to_vec(), irtop(&xg, Some(&pg), t, &cfg)),
        ] {
            for (a, b) in got.iter().zip(&want) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    assert!(worst <= 1e-10, "worst abs error {worst:e}");
}

#[test]
fn two_by_two_hand_case() {
    // three identical tokens and one orthogonal to them
    let x = Tensor::new(&[2, 2, 2], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
    let want = normalize(&spatial(&to_grid(&x), 3));
    assert!((want[3] - 0.816).abs() < 1e-3, "oracle gives {}", want[3]);
    let got = engine_normalize(&spatial_score(&x, &ScorerConfig::default()).unwrap()).unwrap();
    for (a, b) in got.values().iter().zip(&want) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn partition_matches_stable_sort() {
    let mut rng = Rng::new(7);
    for i in 0..1000 {
        let (h, w) = (1 + rng.below(8), 1 + rng.below(8));
        let n = h * w;
        let v: Vec<f64> = match i % 4 {
            0 => vec![1.0 / n as f64; n],
            1 => (0..n).map(|_| rng.below(3) as f64).collect(),
            _ => (0..n).map(|_| rng.uniform()).collect(),
        };
        let ratio = [0.1, 0.25, 0.5, 0.65, 0.9, 1.0, rng.uniform().max(1e-3)][i % 7];
        let map = ScoreMap {
            scores: Tensor::new(&[h, w], v.clone()).unwrap(),
            normalized: false,
        };
        let p = partition(&map, ratio).unwrap();
        let (keep, drop) = topk_stable(&v, ratio);
        assert_eq!(p.informative, keep, "map {v:?} ratio {ratio}");
        assert_eq!(p.uninformative, drop);
    }
    // all tied: the lowest indices win
    let map = ScoreMap {
        scores: Tensor::full(&[2, 3], 0.5),
        normalized: true,
    };
    assert_eq!(partition(&map, 0.5).unwrap().informative, vec![0, 1, 2]);
}
