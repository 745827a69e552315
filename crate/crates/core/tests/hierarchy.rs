use spikeprune::model::{Geometry, ModelConfig, Observer, Pruning, RunOptions, SpikingTransformer, BlockCache, MergeCache};
use spikeprune::numerics::{Rng, Tensor};
use spikeprune::pruning::{PruneSchedule, ScoreMap, ScorerConfig, TokenPartition};
use spikeprune::Error;

#[derive(Default)]
struct Shapes {
    merge_in: Vec<Vec<usize>>,
    merge_out: Vec<Vec<usize>>,
    block_geom: Vec<(usize, Geometry)>,
    score_grids: Vec<(usize, usize, usize)>,
    outputs: Vec<Vec<usize>>,
}

impl Observer for Shapes {
    fn on_scores(&mut self, b: usize, _t: usize, s: &ScoreMap, p: &TokenPartition) {
        assert_eq!((s.height(), s.width()), (p.height, p.width));
        self.score_grids.push((b, s.height(), s.width()));
    }
    fn on_block(&mut self, b: usize, _t: usize, _c: &BlockCache, g: Geometry) {
        self.block_geom.push((b, g));
    }
    fn on_merge(&mut self, _t: usize, c: &MergeCache) {
        self.merge_in.push(c.input.shape().to_vec());
        self.merge_out.push(c.neuron.spikes.shape().to_vec());
    }
    fn on_output(&mut self, _t: usize, f: &Tensor) {
        self.outputs.push(f.shape().to_vec());
    }
}

fn merge_cfg(blocks: usize) -> ModelConfig {
    ModelConfig {
        has_merge_stage: true,
        num_blocks: blocks,
        time_steps: 3,
        ..Default::default()
    }
}

fn image(seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    Tensor::new(&[16, 16, 1], (0..256).map(|_| rng.uniform()).collect()).unwrap()
}

fn shapes(model: &SpikingTransformer, img: &Tensor, schedule: Option<&PruneSchedule>) -> Shapes {
    let scorer = ScorerConfig::default();
    let opts = RunOptions {
        pruning: schedule.map(|s| Pruning { scorer: &scorer, schedule: s }),
        ..Default::default()
    };
    let mut obs = Shapes::default();
    let out = model.run(img, &opts, &mut obs).unwrap();
    assert_eq!(out.logits.len(), 2);
    assert!(out.logits.iter().all(|v| v.is_finite()));
    obs
}

#[test]
fn pruned_upstream_blocks_never_change_downstream_shapes() {
    let mut rng = Rng::new(1);
    for blocks in [2, 3, 4] {
        let cfg = merge_cfg(blocks);
        let model = SpikingTransformer::new(cfg.clone(), blocks as u64).unwrap();
        let img = image(blocks as u64);
        let dense = shapes(&model, &img, None);
        let g = cfg.embed_geometry();
        let merged = vec![g.height / 2 * (g.width / 2), 2 * g.dim];
        assert_eq!(dense.merge_out, vec![merged.clone(); cfg.time_steps]);
        assert!(dense.merge_in.iter().all(|s| *s == vec![g.tokens(), g.dim]));
        for _ in 0..10 {
            let ratios: Vec<f64> = (0..blocks).map(|_| rng.uniform().max(0.05)).collect();
            let s = PruneSchedule::new(ratios.clone()).unwrap();
            let pruned = shapes(&model, &img, Some(&s));
            assert_eq!(pruned.merge_in, dense.merge_in, "{ratios:?}");
            assert_eq!(pruned.merge_out, dense.merge_out, "{ratios:?}");
            assert_eq!(pruned.outputs, dense.outputs);
            let m = cfg.merge_before_block().unwrap();
            for &(b, h, w) in &pruned.score_grids {
                let want = cfg.block_geometry(b);
                assert_eq!((h, w), (want.height, want.width));
                if b >= m {
                    assert_eq!((h, w), (g.height / 2, g.width / 2));
                }
            }
            for &(b, geo) in &pruned.block_geom {
                assert_eq!(geo, cfg.block_geometry(b));
            }
        }
    }
}

#[test]
fn merge_stage_geometry_and_odd_grids() {
    let cfg = merge_cfg(2);
    assert_eq!(cfg.merge_before_block(), Some(1));
    assert_eq!(
        cfg.block_geometry(1),
        Geometry {
            height: 2,
            width: 2,
            dim: 64
        }
    );
    assert_eq!(cfg.hidden_dim(1), 256);
    let odd = ModelConfig {
        input_height: 12,
        input_width: 12,
        has_merge_stage: true,
        ..Default::default()
    };
    assert!(matches!(odd.validate(), Err(Error::Config { .. })));
}
