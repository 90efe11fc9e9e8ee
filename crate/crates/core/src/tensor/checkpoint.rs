//! Plain-text parameter checkpoints.
//!
//! ```text
//! snodep-checkpoint 1
//! <name> <ndim> <dim_0> ... <dim_{ndim-1}>
//! <v_0> <v_1> ... (row-major, shortest round-trip decimal)
//! ```
//!
//! One header line and one value line per parameter, in registration order.
//! Names must not contain whitespace.

use std::fmt::Write as _;
use std::path::Path;

use super::{ParamStore, Result, Tensor, TensorError};

pub const CHECKPOINT_MAGIC: &str = "snodep-checkpoint 1";

fn invalid(detail: impl Into<String>) -> TensorError {
    TensorError::Invalid {
        op: "checkpoint",
        detail: detail.into(),
    }
}

pub fn encode_checkpoint(store: &ParamStore) -> Result<String> {
    let mut out = String::from(CHECKPOINT_MAGIC);
    out.push('\n');
    for (_, name, t) in store.iter() {
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(invalid(format!("parameter name `{name}` is not a single token")));
        }
        let _ = write!(out, "{name} {}", t.shape().len());
        for d in t.shape() {
            let _ = write!(out, " {d}");
        }
        out.push('\n');
        let vals: Vec<String> = t.data().iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&vals.join(" "));
        out.push('\n');
    }
    Ok(out)
}

pub fn decode_checkpoint(text: &str) -> Result<ParamStore> {
    let mut lines = text.lines();
    if lines.next() != Some(CHECKPOINT_MAGIC) {
        return Err(invalid("missing header"));
    }
    let mut store = ParamStore::new();
    while let Some(header) = lines.next() {
        if header.trim().is_empty() {
            continue;
        }
        let mut parts = header.split_whitespace();
        let name = parts.next().ok_or_else(|| invalid("empty header"))?;
        let parse_usize = |s: Option<&str>| -> Result<usize> {
            s.and_then(|x| x.parse().ok())
                .ok_or_else(|| invalid(format!("bad shape for `{name}`")))
        };
        let ndim = parse_usize(parts.next())?;
        let shape = (0..ndim).map(|_| parse_usize(parts.next())).collect::<Result<Vec<_>>>()?;
        let values = lines
            .next()
            .ok_or_else(|| invalid(format!("missing values for `{name}`")))?
            .split_whitespace()
            .map(|v| v.parse::<f64>().map_err(|_| invalid(format!("bad value `{v}` in `{name}`"))))
            .collect::<Result<Vec<_>>>()?;
        store.add(name, Tensor::new(shape, values)?)?;
    }
    Ok(store)
}

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> std::io::Result<()> {
    let text = encode_checkpoint(store).map_err(std::io::Error::other)?;
    std::fs::write(path, text)
}

pub fn load_checkpoint(path: &Path) -> std::io::Result<ParamStore> {
    let text = std::fs::read_to_string(path)?;
    decode_checkpoint(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}
