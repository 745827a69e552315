//! Keep masks and score heatmaps per (block, step).

use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::model::Observer;
use crate::pruning::{ScoreMap, TokenPartition};

#[derive(Debug, Clone, PartialEq)]
pub struct MaskRecord {
    pub block: usize,
    pub step: usize,
    pub scores: ScoreMap,
    pub partition: TokenPartition,
}

/// Collects every scored block step of a run.
#[derive(Debug, Default)]
pub struct MaskRecorder {
    pub records: Vec<MaskRecord>,
}

impl Observer for MaskRecorder {
    fn on_scores(&mut self, block: usize, t: usize, scores: &ScoreMap, partition: &TokenPartition) {
        self.records.push(MaskRecord {
            block,
            step: t,
            scores: scores.clone(),
            partition: partition.clone(),
        });
    }
}

/// Binary PGM, 8-bit grey, row-major.
pub fn pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Min-max scaled to 0..=255; a constant map is all zero.
pub fn heat_pixels(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    values
        .iter()
        .map(|&v| {
            if hi > lo {
                ((v - lo) / (hi - lo) * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect()
}

fn grid_csv<T: std::fmt::Display>(width: usize, values: &[T]) -> String {
    let mut s = String::new();
    for row in values.chunks(width) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

impl MaskRecord {
    pub fn stem(&self) -> String {
        format!("block{}_t{}", self.block, self.step)
    }

    /// Writes `_mask.csv`, `_mask.pgm`, `_scores.csv` and `_scores.pgm`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let (h, w) = (self.partition.height, self.partition.width);
        let mask = self.partition.keep_mask();
        let mask_px: Vec<u8> = mask.iter().map(|&m| m * 255).collect();
        let stem = self.stem();
        let files = [
            (format!("{stem}_mask.csv"), grid_csv(w, &mask).into_bytes()),
            (format!("{stem}_mask.pgm"), pgm(w, h, &mask_px)),
            (format!("{stem}_scores.csv"), grid_csv(w, self.scores.values()).into_bytes()),
            (format!("{stem}_scores.pgm"), pgm(w, h, &heat_pixels(self.scores.values()))),
        ];
        let mut paths = Vec::with_capacity(files.len());
        for (name, bytes) in files {
            let p = dir.join(name);
            std::fs::write(&p, bytes)?;
            paths.push(p);
        }
        Ok(paths)
    }
}

pub fn write_masks(records: &[MaskRecord], dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    for r in records {
        out.extend(r.write(dir)?);
    }
    Ok(out)
}
