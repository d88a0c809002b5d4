//! Parameter checkpoints: a flat little-endian f64 vector plus a plain-text
//! layout manifest (versioned). Loading validates the total length.

use std::fs;
use std::path::Path;

use super::{DenoiserParams, Layout, LayoutEntry};
use crate::error::{DyDiffError, Result};
use crate::Real;

const MANIFEST_VERSION: &str = "dydiff-denoiser-params v1";

pub fn save_params(params: &DenoiserParams, bin_path: &Path, layout_path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(params.len() * 8);
    for v in params.theta() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(bin_path, &bytes)?;

    let mut manifest = String::new();
    manifest.push_str(MANIFEST_VERSION);
    manifest.push('\n');
    manifest.push_str(&format!("total {}\n", params.len()));
    for e in params.layout().entries() {
        let shape = e
            .shape
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join(" ");
        manifest.push_str(&format!("entry {} {} {} {}\n", e.name, e.offset, e.len, shape));
    }
    write_atomic(layout_path, manifest.as_bytes())
}

pub fn load_params(bin_path: &Path, layout_path: &Path) -> Result<DenoiserParams> {
    let manifest = fs::read_to_string(layout_path)?;
    let mut lines = manifest.lines();
    match lines.next() {
        Some(v) if v == MANIFEST_VERSION => {}
        other => {
            return Err(DyDiffError::Checkpoint(format!(
                "unsupported layout manifest version: {other:?}"
            )))
        }
    }
    let total: usize = match lines.next().and_then(|l| l.strip_prefix("total ")) {
        Some(n) => n
            .parse()
            .map_err(|_| DyDiffError::Checkpoint("bad total line".into()))?,
        None => return Err(DyDiffError::Checkpoint("missing total line".into())),
    };
    let mut layout = Layout::default();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let rest = line
            .strip_prefix("entry ")
            .ok_or_else(|| DyDiffError::Checkpoint(format!("bad manifest line: {line}")))?;
        let mut parts = rest.split_whitespace();
        let name = parts
            .next()
            .ok_or_else(|| DyDiffError::Checkpoint("entry missing name".into()))?;
        let offset: usize = parse_field(parts.next(), "offset")?;
        let len: usize = parse_field(parts.next(), "len")?;
        let shape: Vec<usize> = parts
            .map(|p| {
                p.parse()
                    .map_err(|_| DyDiffError::Checkpoint(format!("bad shape dim {p}")))
            })
            .collect::<Result<_>>()?;
        layout.entries.push(LayoutEntry {
            name: name.to_string(),
            offset,
            len,
            shape,
        });
        layout.total += len;
    }
    if layout.total != total {
        return Err(DyDiffError::Checkpoint(format!(
            "manifest total {total} disagrees with entries ({})",
            layout.total
        )));
    }
    layout.validate()?;

    let bytes = fs::read(bin_path)?;
    if bytes.len() != total * 8 {
        return Err(DyDiffError::Checkpoint(format!(
            "parameter file holds {} bytes, expected {} for {total} f64 values",
            bytes.len(),
            total * 8
        )));
    }
    let theta: Vec<Real> = bytes
        .chunks_exact(8)
        .map(|c| Real::from_le_bytes(c.try_into().unwrap()))
        .collect();
    DenoiserParams::new(theta, layout)
}

fn parse_field(field: Option<&str>, what: &str) -> Result<usize> {
    field
        .and_then(|f| f.parse().ok())
        .ok_or_else(|| DyDiffError::Checkpoint(format!("entry missing {what}")))
}

/// Writes via a temp file in the same directory, then renames.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}
