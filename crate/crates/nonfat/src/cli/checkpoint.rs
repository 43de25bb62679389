//! Versioned model checkpoints: a self-describing JSON container holding
//! the run configuration, normalization statistics, tensor shape metadata,
//! and every parameter tensor by name with an explicit shape and row-major
//! payload.
//!
//! The format is deliberately plain JSON so checkpoints can be inspected
//! and diffed with standard tools. Serialization is canonical — fixed key
//! order and shortest-round-trip float formatting — so `save → load →
//! save` reproduces the file byte for byte.

use crate::cli::config::RunConfigFile;
use crate::data::{NormStats, TensorMeta};
use crate::error::{Error, Result};
use crate::model::{init, NonfatParams};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

/// Current checkpoint format version.
pub const FORMAT_VERSION: u32 = 1;

/// One parameter tensor: `data` holds `rows × cols` values row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Shape of the tensor the model was trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub num_modes: usize,
    pub dims: Vec<usize>,
}

/// A trained (or initial) model together with everything needed to use it:
/// the config that produced it and the raw-unit normalization maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: RunConfigFile,
    pub norm_stats: NormStats,
    pub meta: CheckpointMeta,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    /// Captures a parameter snapshot into a checkpoint.
    pub fn from_params(
        config: &RunConfigFile,
        norm_stats: &NormStats,
        params: &NonfatParams,
    ) -> Self {
        let tensors = params
            .leaf_names()
            .into_iter()
            .map(|name| {
                let value = params.leaf(&name).expect("leaf_names yields valid names");
                let (rows, cols) = value.dim();
                NamedTensor {
                    name,
                    rows,
                    cols,
                    data: value.iter().copied().collect(),
                }
            })
            .collect();
        Checkpoint {
            format_version: FORMAT_VERSION,
            config: config.clone(),
            norm_stats: norm_stats.clone(),
            meta: CheckpointMeta {
                num_modes: params.dims.len(),
                dims: params.dims.clone(),
            },
            tensors,
        }
    }

    /// Reconstructs the parameter struct from the stored tensors.
    ///
    /// The tensor name set must match the model skeleton implied by the
    /// stored config and dims exactly; shapes are checked per tensor.
    pub fn to_params(&self) -> Result<NonfatParams> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Data(format!(
                "checkpoint format version {} is not supported (expected {})",
                self.format_version, FORMAT_VERSION
            )));
        }
        if self.meta.dims.len() != self.meta.num_modes || self.meta.num_modes == 0 {
            return Err(Error::Data(format!(
                "checkpoint meta declares {} modes but {} dims",
                self.meta.num_modes,
                self.meta.dims.len()
            )));
        }
        let meta = TensorMeta {
            num_modes: self.meta.num_modes,
            dims: self.meta.dims.clone(),
            time_min: self.norm_stats.time_min,
            time_max: self.norm_stats.time_max,
        };
        // Build a skeleton with the right shapes, then overwrite every leaf.
        let mut params = init(&meta, &self.config.train, 0)?;
        let expected: BTreeSet<String> = params.leaf_names().into_iter().collect();
        let found: BTreeSet<String> = self.tensors.iter().map(|t| t.name.clone()).collect();
        if let Some(missing) = expected.difference(&found).next() {
            return Err(Error::Data(format!(
                "checkpoint is missing tensor `{missing}`"
            )));
        }
        if let Some(extra) = found.difference(&expected).next() {
            return Err(Error::Data(format!(
                "checkpoint has unknown tensor `{extra}`"
            )));
        }
        if found.len() != self.tensors.len() {
            return Err(Error::Data("checkpoint has duplicate tensor names".into()));
        }
        for tensor in &self.tensors {
            if tensor.data.len() != tensor.rows * tensor.cols {
                return Err(Error::Data(format!(
                    "tensor `{}` declares {}x{} but carries {} values",
                    tensor.name,
                    tensor.rows,
                    tensor.cols,
                    tensor.data.len()
                )));
            }
            if tensor.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!(
                    "tensor `{}` contains non-finite values",
                    tensor.name
                )));
            }
            let current = params.leaf(&tensor.name).expect("name set was checked");
            if current.dim() != (tensor.rows, tensor.cols) {
                return Err(Error::Data(format!(
                    "tensor `{}` has shape {}x{}, expected {}x{}",
                    tensor.name,
                    tensor.rows,
                    tensor.cols,
                    current.dim().0,
                    current.dim().1
                )));
            }
            let value =
                ndarray::Array2::from_shape_vec((tensor.rows, tensor.cols), tensor.data.clone())
                    .expect("length was checked");
            let ok = params.set_leaf(&tensor.name, &value);
            debug_assert!(ok, "set_leaf rejected a checked tensor");
        }
        Ok(params)
    }

    /// Writes the checkpoint as pretty-printed JSON.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Data(format!("cannot encode checkpoint: {e}")))?;
        text.push('\n');
        fs::write(path, text).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Reads a checkpoint written by [`Checkpoint::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("checkpoint {}: {}", path.display(), e)))
    }
}
