//! Model manifest: an ordered chain of dense layers stored as QPTN files.
//!
//! Layer weights follow the `d_in x d_out` orientation: `rows` is the input
//! dimension and `cols` the output dimension, so consecutive layers compose
//! when one layer's `cols` equals the next layer's `rows`. `weight_file`
//! paths are resolved relative to the manifest's directory.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Elementwise activation applied between layers during propagation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(&self, v: f32) -> f32 {
        match self {
            Activation::Identity => v,
            Activation::Relu => v.max(0.0),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    /// Input dimension (d_in).
    pub rows: usize,
    /// Output dimension (d_out).
    pub cols: usize,
    pub weight_file: String,
    pub activation: Activation,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelManifest {
    pub layers: Vec<LayerSpec>,
}

impl ModelManifest {
    /// Checks name uniqueness and that the layer chain composes.
    pub fn validate(&self) -> Result<()> {
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.rows == 0 || layer.cols == 0 {
                return Err(Error::Validation(format!(
                    "layer '{}' has zero dimension {}x{}",
                    layer.name, layer.rows, layer.cols
                )));
            }
            for other in &self.layers[i + 1..] {
                if other.name == layer.name {
                    return Err(Error::Validation(format!(
                        "duplicate layer name '{}'",
                        layer.name
                    )));
                }
            }
        }
        for pair in self.layers.windows(2) {
            if pair[0].cols != pair[1].rows {
                return Err(Error::Shape(format!(
                    "layer '{}' outputs {} features but layer '{}' expects {}",
                    pair[0].name, pair[0].cols, pair[1].name, pair[1].rows
                )));
            }
        }
        Ok(())
    }

    /// Resolves a layer's weight file against the manifest directory.
    pub fn weight_path(&self, base_dir: &Path, layer: &LayerSpec) -> PathBuf {
        base_dir.join(&layer.weight_file)
    }
}

/// Loads and validates a manifest, returning it with its base directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<(ModelManifest, PathBuf)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let manifest: ModelManifest =
        serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
    manifest.validate()?;
    let base = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    Ok((manifest, base))
}

pub fn write_manifest(path: impl AsRef<Path>, manifest: &ModelManifest) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, manifest).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    use std::io::Write as _;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
