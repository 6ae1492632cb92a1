//! Checkpoint files: a self-describing text header followed by the flat
//! parameter vector as little-endian `f64` bytes.
//!
//! ```text
//! gradmatch-ckpt v1
//! kind = mlp
//! widths = 4,8,2
//! activation = tanh
//! dropout_rate = 0.25
//! loss = cross-entropy
//! params = 58
//! ---
//! <params * 8 bytes, little-endian f64>
//! ```

use std::fs;
use std::path::Path;

use super::{Activation, LossKind, ModelError, ModelKind, ModelSpec, ParamVector};

const MAGIC_LINE: &str = "gradmatch-ckpt v1";
const HEADER_END: &str = "---";

pub fn save_checkpoint(
    path: &Path,
    spec: &ModelSpec,
    theta: &ParamVector,
) -> Result<(), ModelError> {
    if theta.len() != spec.param_count() {
        return Err(ModelError::Dimension(format!(
            "checkpoint has {} parameters but spec implies {}",
            theta.len(),
            spec.param_count()
        )));
    }
    let widths: Vec<String> = spec.layer_widths.iter().map(|w| w.to_string()).collect();
    let kind = match spec.kind {
        ModelKind::Linear => "linear",
        ModelKind::Mlp => "mlp",
    };
    let header = format!(
        "{MAGIC_LINE}\nkind = {kind}\nwidths = {}\nactivation = {}\ndropout_rate = {}\nloss = {}\nparams = {}\n{HEADER_END}\n",
        widths.join(","),
        spec.activation.name(),
        spec.dropout_rate,
        spec.loss.name(),
        theta.len(),
    );
    let mut bytes = header.into_bytes();
    for v in theta.as_slice() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|source| ModelError::CheckpointIo {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelSpec, ParamVector), ModelError> {
    let bytes = fs::read(path).map_err(|source| ModelError::CheckpointIo {
        path: path.display().to_string(),
        source,
    })?;
    // Split header from payload at the first line equal to HEADER_END.
    let mut offset = 0usize;
    let mut lines: Vec<String> = Vec::new();
    let mut payload_start = None;
    while offset < bytes.len() {
        let end = bytes[offset..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|p| offset + p)
            .ok_or_else(|| ModelError::CheckpointParse("unterminated header".into()))?;
        let line = std::str::from_utf8(&bytes[offset..end])
            .map_err(|_| ModelError::CheckpointParse("non-utf8 header".into()))?
            .to_string();
        offset = end + 1;
        if line == HEADER_END {
            payload_start = Some(offset);
            break;
        }
        lines.push(line);
    }
    let payload_start =
        payload_start.ok_or_else(|| ModelError::CheckpointParse("missing header end".into()))?;
    if lines.first().map(String::as_str) != Some(MAGIC_LINE) {
        return Err(ModelError::CheckpointParse(format!(
            "bad magic line {:?}",
            lines.first()
        )));
    }
    let mut kind = None;
    let mut widths: Option<Vec<usize>> = None;
    let mut activation = None;
    let mut dropout_rate = None;
    let mut loss = None;
    let mut params: Option<usize> = None;
    for line in &lines[1..] {
        let (key, value) = line
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| ModelError::CheckpointParse(format!("malformed line {line:?}")))?;
        match key {
            "kind" => kind = Some(value.to_string()),
            "widths" => {
                let parsed: Result<Vec<usize>, _> =
                    value.split(',').map(|s| s.trim().parse::<usize>()).collect();
                widths = Some(parsed.map_err(|_| {
                    ModelError::CheckpointParse(format!("bad widths {value:?}"))
                })?);
            }
            "activation" => {
                activation = Some(match value {
                    "tanh" => Activation::Tanh,
                    "relu" => Activation::Relu,
                    other => {
                        return Err(ModelError::CheckpointParse(format!(
                            "unknown activation {other:?}"
                        )))
                    }
                })
            }
            "dropout_rate" => {
                dropout_rate = Some(value.parse::<f64>().map_err(|_| {
                    ModelError::CheckpointParse(format!("bad dropout_rate {value:?}"))
                })?)
            }
            "loss" => {
                loss = Some(match value {
                    "half-mse-normalized" => LossKind::HalfMseNormalized,
                    "squared-error-half" => LossKind::SquaredErrorHalf,
                    "cross-entropy" => LossKind::CrossEntropy,
                    other => {
                        return Err(ModelError::CheckpointParse(format!(
                            "unknown loss {other:?}"
                        )))
                    }
                })
            }
            "params" => {
                params = Some(value.parse::<usize>().map_err(|_| {
                    ModelError::CheckpointParse(format!("bad params {value:?}"))
                })?)
            }
            other => {
                return Err(ModelError::CheckpointParse(format!(
                    "unknown header key {other:?}"
                )))
            }
        }
    }
    let widths = widths.ok_or_else(|| ModelError::CheckpointParse("missing widths".into()))?;
    let spec = match kind.as_deref() {
        Some("linear") => {
            if widths.len() != 2 {
                return Err(ModelError::CheckpointParse(
                    "linear checkpoint must have exactly input,output widths".into(),
                ));
            }
            ModelSpec::linear(
                widths[0],
                widths[1],
                loss.ok_or_else(|| ModelError::CheckpointParse("missing loss".into()))?,
            )
        }
        Some("mlp") => ModelSpec::mlp(
            widths,
            activation.ok_or_else(|| ModelError::CheckpointParse("missing activation".into()))?,
            dropout_rate
                .ok_or_else(|| ModelError::CheckpointParse("missing dropout_rate".into()))?,
            loss.ok_or_else(|| ModelError::CheckpointParse("missing loss".into()))?,
        )
        .map_err(|e| ModelError::CheckpointParse(e.to_string()))?,
        other => {
            return Err(ModelError::CheckpointParse(format!(
                "unknown kind {other:?}"
            )))
        }
    };
    let params = params.ok_or_else(|| ModelError::CheckpointParse("missing params".into()))?;
    if params != spec.param_count() {
        return Err(ModelError::CheckpointParse(format!(
            "header says {params} params but widths imply {}",
            spec.param_count()
        )));
    }
    let payload = &bytes[payload_start..];
    if payload.len() != params * 8 {
        return Err(ModelError::CheckpointParse(format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            params * 8
        )));
    }
    let mut values = Vec::with_capacity(params);
    for chunk in payload.chunks_exact(8) {
        values.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }
    Ok((spec, ParamVector::from_vec(values)))
}
