//! Report files: atomic writes, JSON envelopes and the per-layer CSV table.

use std::io::Write;
use std::path::Path;

use lockdnn_core::sim::{EnergyModel, LayerReport, Totals};
use lockdnn_core::{DetectorMode, Format, RunReport};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Error;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const RUN_SCHEMA: &str = "lockdnn.run.v1";
pub const SWEEP_SCHEMA: &str = "lockdnn.sweep.v1";
pub const ATTACK_SCHEMA: &str = "lockdnn.attack.v1";

/// Writes through a temporary file in the target directory and renames it
/// into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut b = tempfile::Builder::new();
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        b.permissions(std::fs::Permissions::from_mode(0o644));
    }
    let mut tmp = b.tempfile_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn json_bytes<T: Serialize>(v: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(v).expect("report types serialize");
    out.push(b'\n');
    out
}

pub fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), Error> {
    write_atomic(path, &json_bytes(v))
}

pub fn sha256_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Every report file: schema id, tool version, the invocation that
/// produced it, then the body.
#[derive(Debug, Clone, Serialize)]
pub struct Envelope<'a, I: Serialize, B: Serialize> {
    pub schema: &'static str,
    pub tool_version: &'static str,
    pub invocation: &'a I,
    #[serde(flatten)]
    pub body: &'a B,
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerRow {
    pub layer: usize,
    pub kind: &'static str,
    pub mac_count: u64,
    pub elements: u64,
    pub zeros: u64,
    pub flagged: u64,
    pub stored_bits: u64,
    pub reference_bits: u64,
    pub size_ratio: Option<f64>,
    pub bytes_written: u64,
    pub bytes_read: u64,
    pub bytes_moved: u64,
}

impl From<&LayerReport> for LayerRow {
    fn from(l: &LayerReport) -> Self {
        LayerRow {
            layer: l.layer,
            kind: l.kind,
            mac_count: l.mac_count,
            elements: l.elements,
            zeros: l.zeros,
            flagged: l.flagged,
            stored_bits: l.stored_bits,
            reference_bits: l.reference_bits,
            size_ratio: l.size_ratio(),
            bytes_written: l.bytes_written,
            bytes_read: l.bytes_read,
            bytes_moved: l.bytes_moved(),
        }
    }
}

/// Accounting part of a run, as written to reports.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub format: Format,
    pub detectors: DetectorMode,
    pub energy_model: EnergyModel,
    pub images: u64,
    pub layers: Vec<LayerRow>,
    pub totals: Totals,
    pub size_ratio: Option<f64>,
    pub logits_hash: String,
}

impl From<&RunReport> for RunSummary {
    fn from(r: &RunReport) -> Self {
        RunSummary {
            format: r.format,
            detectors: r.detectors,
            energy_model: r.energy,
            images: r.images,
            layers: r.layers.iter().map(LayerRow::from).collect(),
            totals: r.totals(),
            size_ratio: r.size_ratio(),
            logits_hash: r.logits_hash(),
        }
    }
}

pub fn layer_csv(rows: &[LayerRow]) -> Result<Vec<u8>, Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Invariant(format!("csv: {e}")))?;
    }
    w.into_inner().map_err(|e| Error::Invariant(format!("csv: {e}")))
}
