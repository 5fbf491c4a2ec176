//! Single-file encoder checkpoints.
//!
//! Layout: one JSON header line, then for every tensor named in the header
//! one FMAT blob (magic, u32 rows, u32 cols, little-endian f32 data) in
//! header order. Live and shadow tensors are both stored; biases ship as
//! 1xN matrices and the temperature scalars as 1x1.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::corpus::FMAT_MAGIC;
use crate::error::{CirpError, Result};

use super::{ContrastConfig, EncoderParams, LinearLayer, MomentumState, ProjectionStack};

const FORMAT: &str = "cirp-encoder-v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format: String,
    seed: u64,
    epoch: usize,
    config: ContrastConfig,
    /// (name, rows, cols) per blob, in file order.
    tensors: Vec<(String, usize, usize)>,
}

/// A trained encoder with enough context to resume or embed.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: EncoderParams,
    pub shadow: EncoderParams,
    pub config: ContrastConfig,
    pub seed: u64,
    pub epoch: usize,
}

impl Checkpoint {
    pub fn from_outcome(outcome: &super::PretrainOutcome, config: &ContrastConfig) -> Self {
        Checkpoint {
            params: outcome.params.clone(),
            shadow: outcome.momentum.shadow.clone(),
            config: config.clone(),
            seed: config.seed,
            epoch: config.epochs,
        }
    }

    pub fn momentum_state(&self) -> MomentumState {
        MomentumState {
            shadow: self.shadow.clone(),
            m: self.config.momentum,
            queue_image: super::FeatureQueue::new(self.config.queue_size),
            queue_text: super::FeatureQueue::new(self.config.queue_size),
        }
    }
}

fn tensor_list(prefix: &str, params: &EncoderParams) -> Vec<(String, Array2<f64>)> {
    let mut out = Vec::new();
    for (modality, stack) in [("image", &params.image), ("text", &params.text)] {
        for (idx, layer) in stack.layers.iter().enumerate() {
            out.push((
                format!("{prefix}{modality}.{idx}.weight"),
                layer.weight.clone(),
            ));
            out.push((
                format!("{prefix}{modality}.{idx}.bias"),
                layer
                    .bias
                    .clone()
                    .into_shape_with_order((1, layer.bias.len()))
                    .expect("1xN bias"),
            ));
        }
    }
    out.push((
        format!("{prefix}log_tau"),
        Array2::from_elem((1, 1), params.log_tau),
    ));
    out
}

fn write_blob(w: &mut impl Write, data: &Array2<f64>) -> std::io::Result<()> {
    w.write_all(FMAT_MAGIC)?;
    w.write_all(&(data.nrows() as u32).to_le_bytes())?;
    w.write_all(&(data.ncols() as u32).to_le_bytes())?;
    for v in data.iter() {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

fn read_blob(r: &mut impl Read, path: &Path) -> Result<Array2<f64>> {
    let io_err = |e| CirpError::io(path, e);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != FMAT_MAGIC {
        return Err(CirpError::Validation(format!(
            "checkpoint blob in {} has a bad magic",
            path.display()
        )));
    }
    let mut dims = [0u8; 4];
    r.read_exact(&mut dims).map_err(io_err)?;
    let rows = u32::from_le_bytes(dims) as usize;
    r.read_exact(&mut dims).map_err(io_err)?;
    let cols = u32::from_le_bytes(dims) as usize;
    let mut data = vec![0u8; rows * cols * 4];
    r.read_exact(&mut data).map_err(io_err)?;
    let values: Vec<f64> = data
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Array2::from_shape_vec((rows, cols), values)
        .map_err(|e| CirpError::Validation(format!("checkpoint blob shape: {e}")))
}

pub fn save_checkpoint(path: impl AsRef<Path>, checkpoint: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let mut tensors = tensor_list("", &checkpoint.params);
    tensors.extend(tensor_list("shadow.", &checkpoint.shadow));
    let header = Header {
        format: FORMAT.to_string(),
        seed: checkpoint.seed,
        epoch: checkpoint.epoch,
        config: checkpoint.config.clone(),
        tensors: tensors
            .iter()
            .map(|(name, data)| (name.clone(), data.nrows(), data.ncols()))
            .collect(),
    };
    let file = File::create(path).map_err(|e| CirpError::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, &header)
        .map_err(|e| CirpError::Validation(format!("checkpoint header: {e}")))?;
    w.write_all(b"\n").map_err(|e| CirpError::io(path, e))?;
    for (_, data) in &tensors {
        write_blob(&mut w, data).map_err(|e| CirpError::io(path, e))?;
    }
    w.flush().map_err(|e| CirpError::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| CirpError::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut header_line = String::new();
    reader
        .read_line(&mut header_line)
        .map_err(|e| CirpError::io(path, e))?;
    let header: Header = serde_json::from_str(header_line.trim_end())
        .map_err(|e| CirpError::parse(path, 1, format!("checkpoint header: {e}")))?;
    if header.format != FORMAT {
        return Err(CirpError::Validation(format!(
            "unsupported checkpoint format {:?}",
            header.format
        )));
    }

    let mut blobs = Vec::with_capacity(header.tensors.len());
    for (name, rows, cols) in &header.tensors {
        let data = read_blob(&mut reader, path)?;
        if data.nrows() != *rows || data.ncols() != *cols {
            return Err(CirpError::Validation(format!(
                "tensor {name} has shape {}x{}, header says {rows}x{cols}",
                data.nrows(),
                data.ncols()
            )));
        }
        blobs.push((name.clone(), data));
    }

    let params = assemble("", &blobs)?;
    let shadow = assemble("shadow.", &blobs)?;
    Ok(Checkpoint {
        params,
        shadow,
        config: header.config,
        seed: header.seed,
        epoch: header.epoch,
    })
}

fn assemble(prefix: &str, blobs: &[(String, Array2<f64>)]) -> Result<EncoderParams> {
    let find = |name: String| -> Result<&Array2<f64>> {
        blobs
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, d)| d)
            .ok_or_else(|| CirpError::Validation(format!("checkpoint lacks tensor {name}")))
    };
    let stack = |modality: &str| -> Result<ProjectionStack> {
        let mut layers = Vec::new();
        for idx in 0.. {
            let weight_name = format!("{prefix}{modality}.{idx}.weight");
            if !blobs.iter().any(|(n, _)| *n == weight_name) {
                break;
            }
            let weight = find(weight_name)?.clone();
            let bias = find(format!("{prefix}{modality}.{idx}.bias"))?
                .row(0)
                .to_owned();
            layers.push(LinearLayer { weight, bias });
        }
        if layers.is_empty() {
            return Err(CirpError::Validation(format!(
                "checkpoint lacks {prefix}{modality} layers"
            )));
        }
        Ok(ProjectionStack { layers })
    };
    let params = EncoderParams {
        image: stack("image")?,
        text: stack("text")?,
        log_tau: find(format!("{prefix}log_tau"))?[[0, 0]],
    };
    params.validate()?;
    Ok(params)
}
