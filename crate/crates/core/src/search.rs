//! Grid search over monotone per-block retention schedules.

use std::cmp::Ordering;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Pruning, SpikingTransformer};
use crate::pruning::{PruneSchedule, ScorerConfig};
use crate::training::{evaluate, Dataset};

const MEAN_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSpace {
    pub candidate_ratios: Vec<f64>,
    pub target_avg: f64,
    pub tolerance: f64,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            candidate_ratios: vec![1.0, 0.9, 0.81, 0.72, 0.64, 0.56, 0.49],
            target_avg: 0.65,
            tolerance: 0.03,
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        if self.candidate_ratios.is_empty() {
            return Err(Error::config("search.candidate_ratios", "empty"));
        }
        if let Some(r) = self.candidate_ratios.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
            return Err(Error::config("search.candidate_ratios", format!("{r} outside (0, 1]")));
        }
        if !(self.target_avg > 0.0 && self.target_avg <= 1.0) {
            return Err(Error::config(
                "search.target_avg",
                format!("{} outside (0, 1]", self.target_avg),
            ));
        }
        if !(self.tolerance >= 0.0 && self.tolerance.is_finite()) {
            return Err(Error::config("search.tolerance", "must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn in_band(&self, mean: f64) -> bool {
        (mean - self.target_avg).abs() <= self.tolerance + MEAN_SLACK
    }
}

/// Every non-increasing length-`blocks` schedule over the candidates whose
/// mean lies in the target band, largest ratios first.
pub fn enumerate_schedules(space: &SearchSpace, blocks: usize) -> Result<Vec<PruneSchedule>> {
    space.validate()?;
    if blocks == 0 {
        return Err(Error::Search("a schedule needs at least one block".into()));
    }
    let mut cands = space.candidate_ratios.clone();
    cands.sort_by(|a, b| b.total_cmp(a));
    cands.dedup();
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(blocks);
    fill(&cands, 0, blocks, &mut cur, space, &mut out);
    if out.is_empty() {
        return Err(Error::Search(format!(
            "no non-increasing {blocks}-block schedule over {:?} has mean within {} of {}",
            space.candidate_ratios, space.tolerance, space.target_avg
        )));
    }
    Ok(out)
}

fn fill(cands: &[f64], from: usize, blocks: usize, cur: &mut Vec<f64>, space: &SearchSpace, out: &mut Vec<PruneSchedule>) {
    if cur.len() == blocks {
        let mean = cur.iter().sum::<f64>() / blocks as f64;
        if space.in_band(mean) {
            out.push(PruneSchedule { ratios: cur.clone() });
        }
        return;
    }
    for i in from..cands.len() {
        cur.push(cands[i]);
        fill(cands, i, blocks, cur, space, out);
        cur.pop();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchEntry {
    pub schedule: PruneSchedule,
    pub mean_ratio: f64,
    pub correct: usize,
    pub batch_accuracy: f64,
    pub eval_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchResult {
    pub best: PruneSchedule,
    pub best_accuracy: f64,
    /// All evaluated schedules, best first.
    pub ranked: Vec<SearchEntry>,
}

/// Best first: accuracy, then mean retention, then the lexicographically
/// larger schedule.
fn rank(a: &SearchEntry, b: &SearchEntry) -> Ordering {
    b.correct
        .cmp(&a.correct)
        .then(b.mean_ratio.total_cmp(&a.mean_ratio))
        .then_with(|| {
            for (x, y) in a.schedule.ratios.iter().zip(&b.schedule.ratios) {
                match y.total_cmp(x) {
                    Ordering::Equal => continue,
                    o => return o,
                }
            }
            Ordering::Equal
        })
}

/// Evaluates every schedule on `batch` and returns the top-1.
pub fn search(model: &SpikingTransformer, batch: &Dataset, space: &SearchSpace, scorer: &ScorerConfig) -> Result<SearchResult> {
    let schedules = enumerate_schedules(space, model.config.num_blocks)?;
    search_schedules(model, batch, schedules, scorer)
}

pub fn search_schedules(
    model: &SpikingTransformer,
    batch: &Dataset,
    schedules: Vec<PruneSchedule>,
    scorer: &ScorerConfig,
) -> Result<SearchResult> {
    if schedules.is_empty() {
        return Err(Error::Search("no schedules to evaluate".into()));
    }
    if batch.is_empty() {
        return Err(Error::Search("empty evaluation batch".into()));
    }
    scorer.validate()?;
    let mut ranked: Vec<SearchEntry> = schedules
        .into_par_iter()
        .map(|schedule| {
            let start = Instant::now();
            let report = evaluate(
                model,
                batch,
                Some(Pruning {
                    scorer,
                    schedule: &schedule,
                }),
            )?;
            Ok(SearchEntry {
                mean_ratio: schedule.mean(),
                correct: report.correct,
                batch_accuracy: report.accuracy,
                eval_seconds: start.elapsed().as_secs_f64(),
                schedule,
            })
        })
        .collect::<Result<_>>()?;
    ranked.sort_by(rank);
    let best = ranked[0].schedule.clone();
    let best_accuracy = ranked[0].batch_accuracy;
    Ok(SearchResult {
        best,
        best_accuracy,
        ranked,
    })
}

impl SearchResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("schedule,mean_ratio,batch_accuracy,eval_seconds\n");
        for e in &self.ranked {
            s.push_str(&format!(
                "{},{},{},{:.6}\n",
                e.schedule, e.mean_ratio, e.batch_accuracy, e.eval_seconds
            ));
        }
        s
    }
}
