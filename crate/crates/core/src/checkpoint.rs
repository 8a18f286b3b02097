//! Checkpoint files.
//!
//! ```text
//! ADAANCHOR-CKPT v1
//! kind anchored
//! backbone d_model=64 n_layers=4 n_heads=4 d_ff=256 vocab_size=27 max_seq_len=160
//! refinement m=8 beta=0.5 k_max=8 anchor_attention=context
//! validation_accuracy 0.9123
//! tensor tok_emb 27,64 0
//! ...
//! end
//! <little-endian f32 payload, tensors in manifest order>
//! ```
//!
//! Offsets in the manifest are byte offsets into the payload.

use std::path::Path;

use crate::anchor::RefinementConfig;
use crate::backbone::{AnchorAttention, BackboneConfig};
use crate::error::{Error, Result};
use crate::model::{Model, ModelKind};
use crate::scalar::Scalar;
use crate::tape::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &str = "ADAANCHOR-CKPT";
pub const VERSION: &str = "v1";

#[derive(Clone, Debug)]
pub struct CheckpointRecord<T> {
    pub kind: ModelKind,
    pub backbone: BackboneConfig,
    pub refinement: RefinementConfig,
    pub validation_accuracy: f64,
    pub params: ParamSet<T>,
}

impl<T: Scalar> CheckpointRecord<T> {
    pub fn from_model(model: &Model<T>, validation_accuracy: f64) -> Self {
        CheckpointRecord {
            kind: model.kind,
            backbone: model.config().clone(),
            refinement: model.refinement.clone(),
            validation_accuracy,
            params: model.params.clone(),
        }
    }

    pub fn into_model(self) -> Result<Model<T>> {
        Model::from_params(self.kind, &self.backbone, self.refinement, self.params)
    }
}

fn attention_name(a: AnchorAttention) -> &'static str {
    match a {
        AnchorAttention::Causal => "causal",
        AnchorAttention::Context => "context",
    }
}

pub fn encode<T: Scalar>(record: &CheckpointRecord<T>) -> Vec<u8> {
    let b = &record.backbone;
    let r = &record.refinement;
    let mut header = format!(
        "{MAGIC} {VERSION}\nkind {}\nbackbone d_model={} n_layers={} n_heads={} d_ff={} vocab_size={} max_seq_len={}\n\
         refinement m={} beta={} k_max={} anchor_attention={}\nvalidation_accuracy {}\n",
        record.kind.name(),
        b.d_model,
        b.n_layers,
        b.n_heads,
        b.d_ff,
        b.vocab_size,
        b.max_seq_len,
        r.m,
        r.beta,
        r.k_max,
        attention_name(r.anchor_attention),
        record.validation_accuracy,
    );
    let mut payload = Vec::with_capacity(record.params.scalar_count() * 4);
    for (_, name, t) in record.params.iter() {
        let shape: Vec<String> = t.shape().iter().map(|s| s.to_string()).collect();
        header.push_str(&format!("tensor {name} {} {}\n", shape.join(","), payload.len()));
        for &v in t.values() {
            payload.extend_from_slice(&v.as_f32().to_le_bytes());
        }
    }
    header.push_str("end\n");
    let mut out = header.into_bytes();
    out.extend_from_slice(&payload);
    out
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset,
        message: message.into(),
    }
}

fn fields(line: &str, offset: usize, prefix: &str) -> Result<Vec<(String, String)>> {
    let rest = line
        .strip_prefix(prefix)
        .ok_or_else(|| format_err(offset, format!("expected `{prefix}` line")))?;
    rest.split_whitespace()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| format_err(offset, format!("malformed field `{kv}`")))
        })
        .collect()
}

fn field<V: std::str::FromStr>(fs: &[(String, String)], key: &str, offset: usize) -> Result<V> {
    let raw = fs
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v)
        .ok_or_else(|| format_err(offset, format!("missing field `{key}`")))?;
    raw.parse()
        .map_err(|_| format_err(offset, format!("bad value `{raw}` for `{key}`")))
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<CheckpointRecord<T>> {
    let mut pos = 0usize;
    let next_line = |pos: &mut usize| -> Result<(usize, String)> {
        let start = *pos;
        let end = bytes[start..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| format_err(start, "unterminated header"))?;
        let line = std::str::from_utf8(&bytes[start..start + end]).map_err(|_| format_err(start, "header is not UTF-8"))?;
        *pos = start + end + 1;
        Ok((start, line.to_string()))
    };

    let (off, magic) = next_line(&mut pos)?;
    let version = magic
        .strip_prefix(MAGIC)
        .map(str::trim)
        .ok_or_else(|| format_err(off, "not a checkpoint file"))?;
    if version != VERSION {
        return Err(Error::Version {
            found: version.to_string(),
            expected: VERSION,
        });
    }
    let (off, kind_line) = next_line(&mut pos)?;
    let kind = kind_line
        .strip_prefix("kind ")
        .and_then(ModelKind::parse)
        .ok_or_else(|| format_err(off, format!("bad kind line `{kind_line}`")))?;
    let (off, line) = next_line(&mut pos)?;
    let fs = fields(&line, off, "backbone ")?;
    let backbone = BackboneConfig {
        d_model: field(&fs, "d_model", off)?,
        n_layers: field(&fs, "n_layers", off)?,
        n_heads: field(&fs, "n_heads", off)?,
        d_ff: field(&fs, "d_ff", off)?,
        vocab_size: field(&fs, "vocab_size", off)?,
        max_seq_len: field(&fs, "max_seq_len", off)?,
    };
    let (off, line) = next_line(&mut pos)?;
    let fs = fields(&line, off, "refinement ")?;
    let attention: String = field(&fs, "anchor_attention", off)?;
    let refinement = RefinementConfig {
        m: field(&fs, "m", off)?,
        beta: field(&fs, "beta", off)?,
        k_max: field(&fs, "k_max", off)?,
        anchor_attention: match attention.as_str() {
            "causal" => AnchorAttention::Causal,
            "context" => AnchorAttention::Context,
            other => return Err(format_err(off, format!("unknown anchor_attention `{other}`"))),
        },
    };
    let (off, line) = next_line(&mut pos)?;
    let validation_accuracy: f64 = line
        .strip_prefix("validation_accuracy ")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| format_err(off, "bad validation_accuracy line"))?;

    let mut manifest = Vec::new();
    loop {
        let (off, line) = next_line(&mut pos)?;
        if line == "end" {
            break;
        }
        let parts: Vec<&str> = line.split(' ').collect();
        let [tag, name, shape, offset] = parts[..] else {
            return Err(format_err(off, format!("bad manifest line `{line}`")));
        };
        if tag != "tensor" {
            return Err(format_err(off, format!("bad manifest line `{line}`")));
        }
        let shape: Vec<usize> = shape
            .split(',')
            .map(|s| s.parse().map_err(|_| format_err(off, format!("bad shape `{shape}`"))))
            .collect::<Result<_>>()?;
        let offset: usize = offset
            .parse()
            .map_err(|_| format_err(off, format!("bad offset `{offset}`")))?;
        manifest.push((off, name.to_string(), shape, offset));
    }

    let payload = &bytes[pos..];
    let mut params = ParamSet::new();
    let mut expected = 0usize;
    for (off, name, shape, offset) in manifest {
        if offset != expected {
            return Err(format_err(off, format!("tensor {name} at payload offset {offset}, expected {expected}")));
        }
        let count: usize = shape.iter().product();
        let end = offset + count * 4;
        if end > payload.len() {
            return Err(format_err(
                pos + payload.len(),
                format!("payload truncated inside tensor {name} (needs {} bytes)", pos + end),
            ));
        }
        let values = payload[offset..end]
            .chunks_exact(4)
            .map(|c| <T as Scalar>::from_f32(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        let t = Tensor::new(&shape, values).map_err(|e| format_err(off, e.to_string()))?;
        params.insert(name, t).map_err(|e| format_err(off, e.to_string()))?;
        expected = end;
    }
    if expected != payload.len() {
        return Err(format_err(pos + expected, "trailing bytes after payload"));
    }
    Ok(CheckpointRecord {
        kind,
        backbone,
        refinement,
        validation_accuracy,
        params,
    })
}

pub fn save_checkpoint<T: Scalar>(record: &CheckpointRecord<T>, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, encode(record))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<CheckpointRecord<T>> {
    decode(&std::fs::read(path)?)
}
