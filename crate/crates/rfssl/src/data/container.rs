//! Versioned binary container: an 8-byte magic, a kind tag, a format
//! version, a JSON header, then a raw payload block.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! offset 0   magic   b"RFSSLBIN"
//! offset 8   kind    u16 (1 core set, 2 patch set, 3 checkpoint)
//! offset 10  version u16
//! offset 12  hlen    u64, JSON header byte length
//! offset 20  header  hlen bytes of UTF-8 JSON
//! ...        payload remaining bytes
//! ```
//!
//! Malformed files (bad magic, truncation, unknown kind, invalid JSON)
//! surface as `Error::Format`; operating-system failures surface as
//! `Error::Io`, so callers can tell corruption from a missing disk.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 8] = *b"RFSSLBIN";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContainerKind {
    CoreSet,
    PatchSet,
    Checkpoint,
}

impl ContainerKind {
    pub fn code(self) -> u16 {
        match self {
            ContainerKind::CoreSet => 1,
            ContainerKind::PatchSet => 2,
            ContainerKind::Checkpoint => 3,
        }
    }

    pub fn from_code(code: u16) -> Result<Self> {
        match code {
            1 => Ok(ContainerKind::CoreSet),
            2 => Ok(ContainerKind::PatchSet),
            3 => Ok(ContainerKind::Checkpoint),
            other => Err(Error::Format(format!("unknown container kind {other}"))),
        }
    }
}

/// A parsed container with its header still in JSON form.
#[derive(Debug)]
pub struct Container {
    pub kind: ContainerKind,
    pub version: u16,
    pub header_json: Vec<u8>,
    pub payload: Vec<u8>,
}

impl Container {
    pub fn header<H: DeserializeOwned>(&self) -> Result<H> {
        serde_json::from_slice(&self.header_json)
            .map_err(|e| Error::Format(format!("container header: {e}")))
    }
}

pub fn container_to_bytes<H: Serialize>(
    kind: ContainerKind,
    version: u16,
    header: &H,
    payload: &[u8],
) -> Result<Vec<u8>> {
    let header_json =
        serde_json::to_vec(header).map_err(|e| Error::Format(format!("encode header: {e}")))?;
    let mut bytes = Vec::with_capacity(20 + header_json.len() + payload.len());
    bytes.extend_from_slice(&MAGIC);
    bytes.extend_from_slice(&kind.code().to_le_bytes());
    bytes.extend_from_slice(&version.to_le_bytes());
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    bytes.extend_from_slice(payload);
    Ok(bytes)
}

pub fn write_container<H: Serialize>(
    path: &Path,
    kind: ContainerKind,
    version: u16,
    header: &H,
    payload: &[u8],
) -> Result<()> {
    let bytes = container_to_bytes(kind, version, header, payload)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<Container> {
    let bytes = fs::read(path)?;
    parse_container(&bytes)
}

pub fn parse_container(bytes: &[u8]) -> Result<Container> {
    if bytes.len() < 20 {
        return Err(Error::Format(format!(
            "container truncated: {} bytes, need at least 20",
            bytes.len()
        )));
    }
    if bytes[0..8] != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let kind = ContainerKind::from_code(u16::from_le_bytes([bytes[8], bytes[9]]))?;
    let version = u16::from_le_bytes([bytes[10], bytes[11]]);
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    if bytes.len() < 20 + hlen {
        return Err(Error::Format(format!(
            "container truncated: header claims {hlen} bytes, {} available",
            bytes.len() - 20
        )));
    }
    Ok(Container {
        kind,
        version,
        header_json: bytes[20..20 + hlen].to_vec(),
        payload: bytes[20 + hlen..].to_vec(),
    })
}

/// Reject a version other than the single one this build understands.
pub fn expect_version(container: &Container, kind: ContainerKind, version: u16) -> Result<()> {
    if container.kind != kind {
        return Err(Error::Format(format!(
            "expected container kind {:?}, found {:?}",
            kind, container.kind
        )));
    }
    if container.version != version {
        return Err(Error::Format(format!(
            "unsupported {:?} version {} (supported: {version})",
            kind, container.version
        )));
    }
    Ok(())
}

pub fn f32s_to_le_bytes(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn le_bytes_to_f32s(bytes: &[u8]) -> Result<Vec<f32>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::Format(format!(
            "f32 block length {} not a multiple of 4",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn f64s_to_le_bytes(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn le_bytes_to_f64s(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::Format(format!(
            "f64 block length {} not a multiple of 8",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
        .collect())
}
