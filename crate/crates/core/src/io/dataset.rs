//! Dataset splits on disk: raw little-endian f32 pixels in `[N, H, W, C]`
//! order plus a one-line JSON manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::training::{Dataset, SyntheticSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    /// Pixel file, relative to the manifest's directory.
    pub data: String,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub labels: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<SyntheticSpec>,
}

pub fn manifest_path(dir: impl AsRef<Path>, name: &str) -> PathBuf {
    dir.as_ref().join(format!("{name}.json"))
}

/// Writes `{name}.bin` and `{name}.json` under `dir`.
pub fn save_split(dir: impl AsRef<Path>, name: &str, data: &Dataset, generator: Option<&SyntheticSpec>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let bin = format!("{name}.bin");
    let mut bytes = Vec::with_capacity(data.len() * data.height * data.width * data.channels * 4);
    for img in &data.images {
        for &v in img.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    std::fs::write(dir.join(&bin), bytes)?;
    let manifest = SplitManifest {
        data: bin,
        count: data.len(),
        height: data.height,
        width: data.width,
        channels: data.channels,
        num_classes: data.num_classes,
        labels: data.labels.clone(),
        generator: generator.cloned(),
    };
    let path = manifest_path(dir, name);
    std::fs::write(&path, serde_json::to_string(&manifest)? + "\n")?;
    Ok(path)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<SplitManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Loads a split from its manifest path.
pub fn load_split_manifest(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let m = load_manifest(path)?;
    let bin = path.parent().unwrap_or(Path::new(".")).join(&m.data);
    let bytes = std::fs::read(&bin).map_err(|e| Error::Format(format!("{}: {e}", bin.display())))?;
    let per = m.height * m.width * m.channels;
    if bytes.len() != m.count * per * 4 {
        return Err(Error::Format(format!(
            "{}: {} bytes, manifest implies {}",
            bin.display(),
            bytes.len(),
            m.count * per * 4
        )));
    }
    if m.labels.len() != m.count {
        return Err(Error::Format(format!(
            "{}: {} labels for {} images",
            path.display(),
            m.labels.len(),
            m.count
        )));
    }
    let images = bytes
        .chunks_exact(per * 4)
        .map(|img| {
            let px = img
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            Tensor::new(&[m.height, m.width, m.channels], px)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(m.height, m.width, m.channels, m.num_classes, images, m.labels)
}

/// Loads `{dir}/{name}.json`.
pub fn load_split(dir: impl AsRef<Path>, name: &str) -> Result<Dataset> {
    load_split_manifest(manifest_path(dir, name))
}

/// Reads one raw f32 image of the given shape.
pub fn load_raw_image(path: impl AsRef<Path>, shape: [usize; 3]) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let n: usize = shape.iter().product();
    if bytes.len() != n * 4 {
        return Err(Error::Format(format!(
            "{}: {} bytes, expected {} for a {shape:?} image",
            path.display(),
            bytes.len(),
            n * 4
        )));
    }
    let px = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(&shape, px)
}
