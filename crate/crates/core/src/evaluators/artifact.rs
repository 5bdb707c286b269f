//! Binary evaluator artifacts.
//!
//! Layout: the 8-byte magic `DCFGEVAL`, a little-endian `u32` header length,
//! a UTF-8 JSON header, then every parameter as a little-endian `f64`
//! (network parameters first, then the class table for two-tower scorers).

use serde::{Deserialize, Serialize};

use super::mlp::Mlp;
use super::{EvaluatorKind, LearnedScorer, Network, TrainingMeta};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"DCFGEVAL";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    kind: EvaluatorKind,
    dim: usize,
    classes: usize,
    steps: usize,
    time_embed: usize,
    layers: Vec<usize>,
    /// Class-table rows for two-tower scorers, absent for heads.
    table_rows: Option<usize>,
    conditional: bool,
    target_mean: f64,
    target_scale: f64,
    param_count: usize,
    meta: TrainingMeta,
}

pub(super) fn encode(s: &LearnedScorer) -> Result<Vec<u8>> {
    let (net, table, table_rows, conditional, target_mean, target_scale) = match &s.network {
        Network::TwoTower { tower, table } => (tower, table.as_slice(), Some(s.classes), false, 0.0, 1.0),
        Network::Head {
            net,
            conditional,
            target_mean,
            target_scale,
        } => (net, &[][..], None, *conditional, *target_mean, *target_scale),
    };
    let header = Header {
        format_version: FORMAT_VERSION,
        kind: s.kind,
        dim: s.dim,
        classes: s.classes,
        steps: s.steps,
        time_embed: s.time_embed,
        layers: net.sizes().to_vec(),
        table_rows,
        conditional,
        target_mean,
        target_scale,
        param_count: net.num_params() + table.len(),
        meta: s.meta.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + json.len() + 8 * header.param_count);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in net.params().iter().chain(table) {
        out.extend_from_slice(&p.to_le_bytes());
    }
    Ok(out)
}

pub(super) fn decode(bytes: &[u8]) -> Result<LearnedScorer> {
    let bad = |m: &str| Error::Artifact(m.to_string());
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic"));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = bytes.get(12..12 + len).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad("unsupported format version"));
    }
    let raw = &bytes[12 + len..];
    if raw.len() != 8 * header.param_count {
        return Err(bad("parameter block length does not match header"));
    }
    let params: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let net_len: usize = header.layers.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
    if net_len > params.len() {
        return Err(bad("layer sizes exceed parameter count"));
    }
    let (net_params, table) = params.split_at(net_len);
    let net = Mlp::from_params(header.layers.clone(), net_params.to_vec())
        .ok_or_else(|| bad("inconsistent layer sizes"))?;
    let network = match header.table_rows {
        Some(rows) => {
            if table.len() != rows * net.output_width() {
                return Err(bad("class table size mismatch"));
            }
            Network::TwoTower {
                tower: net,
                table: table.to_vec(),
            }
        }
        None => {
            if !table.is_empty() {
                return Err(bad("trailing parameters"));
            }
            Network::Head {
                net,
                conditional: header.conditional,
                target_mean: header.target_mean,
                target_scale: header.target_scale,
            }
        }
    };
    Ok(LearnedScorer {
        kind: header.kind,
        dim: header.dim,
        classes: header.classes,
        steps: header.steps,
        time_embed: header.time_embed,
        network,
        meta: header.meta,
    })
}
