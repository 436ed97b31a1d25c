//! Feature vectors with their provenance tag and config fingerprint, and the
//! CSV-row and binary encodings.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Which extractor produced a vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FeatureKind {
    Lbp2d,
    Si,
    Hk,
    SiHk,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 4] = [FeatureKind::Lbp2d, FeatureKind::Si, FeatureKind::Hk, FeatureKind::SiHk];

    pub fn tag(self) -> &'static str {
        match self {
            FeatureKind::Lbp2d => "2d",
            FeatureKind::Si => "3d-si",
            FeatureKind::Hk => "3d-hk",
            FeatureKind::SiHk => "3d-sihk",
        }
    }

    pub fn is_3d(self) -> bool {
        self != FeatureKind::Lbp2d
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FeatureKind::ALL
            .into_iter()
            .find(|k| k.tag().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown feature kind '{s}' (expected 2d, 3d-si, 3d-hk or 3d-sihk)")))
    }
}

/// Short hex digest of a canonical config text.
pub fn fingerprint(canonical: &str) -> String {
    let digest = Sha256::digest(canonical.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Descriptor {
    pub kind: FeatureKind,
    pub fingerprint: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub descriptor: Descriptor,
}

impl FeatureVector {
    pub fn new(kind: FeatureKind, fingerprint: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite feature value at {i}")));
        }
        let fingerprint = fingerprint.into();
        if fingerprint.is_empty() || fingerprint.contains([',', '\n']) {
            return Err(Error::Validation(format!("bad fingerprint '{fingerprint}'")));
        }
        Ok(FeatureVector {
            values,
            descriptor: Descriptor { kind, fingerprint },
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn kind(&self) -> FeatureKind {
        self.descriptor.kind
    }

    /// `tag,fingerprint,v0,v1,...` with shortest round-tripping decimals.
    pub fn to_csv_row(&self) -> String {
        let mut s = format!("{},{}", self.descriptor.kind.tag(), self.descriptor.fingerprint);
        for v in &self.values {
            s.push(',');
            s.push_str(&format!("{v:?}"));
        }
        s
    }

    pub fn from_csv_row(row: &str) -> Result<Self> {
        let mut it = row.trim_end_matches(['\r', '\n']).split(',');
        let kind: FeatureKind = it.next().unwrap_or_default().parse()?;
        let fp = it
            .next()
            .ok_or_else(|| Error::Validation("feature row lacks a fingerprint".into()))?;
        let values = it
            .enumerate()
            .map(|(i, s)| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Validation(format!("feature value {i}: '{s}' is not a number")))
            })
            .collect::<Result<Vec<_>>>()?;
        FeatureVector::new(kind, fp, values)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        crate::io::write_text(path, &(self.to_csv_row() + "\n"))
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        FeatureVector::from_csv_row(text.lines().next().unwrap_or_default())
            .map_err(|e| Error::parse(path.display().to_string(), 1, e.to_string()))
    }
}

/// Little-endian `u64` count followed by that many little-endian `f64`.
pub fn encode_binary(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * values.len());
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_binary(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() < 8 {
        return Err(Error::Validation("binary feature shorter than its header".into()));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() != n.checked_mul(8).unwrap_or(usize::MAX) {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: body.len() / 8,
        });
    }
    Ok(body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Lays vectors end to end under a new tag.
pub fn concat(kind: FeatureKind, parts: &[&FeatureVector]) -> Result<FeatureVector> {
    let fp = fingerprint(
        &parts
            .iter()
            .map(|p| format!("{}:{}", p.descriptor.kind, p.descriptor.fingerprint))
            .collect::<Vec<_>>()
            .join(";"),
    );
    let values = parts.iter().flat_map(|p| p.values.iter().copied()).collect();
    FeatureVector::new(kind, fp, values)
}
