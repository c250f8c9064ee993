//! Binary descriptor files: a fixed header followed by N rows of D
//! little-endian f32 values.
//!
//! ```text
//! magic    b"PDSC"
//! version  u8 = 1
//! count    u64
//! dim      u32
//! hash     32 bytes  (SHA-256 of the producing checkpoint file)
//! rows     count × dim × f32
//! ```
//!
//! Byte length is exactly `49 + 4·count·dim`; write→read round-trips are
//! bit-exact. The binary form exists because evaluation reads millions of
//! rows; `dump_text` renders a human-readable view for debugging.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"PDSC";
const VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 8 + 4 + 32;

/// In-memory descriptor table with provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorFile {
    dim: usize,
    /// SHA-256 of the checkpoint that produced these descriptors.
    pub checkpoint_hash: [u8; 32],
    data: Vec<f32>,
}

impl DescriptorFile {
    pub fn new(dim: usize, checkpoint_hash: [u8; 32]) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("descriptor file", "dimension must be >= 1"));
        }
        Ok(DescriptorFile {
            dim,
            checkpoint_hash,
            data: Vec::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Appends a `[B, dim]` batch, preserving row order.
    pub fn push_batch(&mut self, batch: &Tensor<f32>) -> Result<()> {
        let (_, d) = batch.dims2("descriptor push")?;
        if d != self.dim {
            return Err(Error::shape("descriptor push", "dim", self.dim, d));
        }
        self.data.extend_from_slice(batch.data());
        Ok(())
    }

    /// The whole table as a `[count, dim]` tensor; empty tables have no
    /// tensor form.
    pub fn to_tensor(&self) -> Result<Tensor<f32>> {
        if self.is_empty() {
            return Err(Error::invalid("descriptor file", "no descriptors"));
        }
        Tensor::from_vec(&[self.count(), self.dim], self.data.clone())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(HEADER_LEN + self.data.len() * 4);
        buf.extend_from_slice(MAGIC);
        buf.push(VERSION);
        buf.extend_from_slice(&(self.count() as u64).to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&self.checkpoint_hash);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, &buf).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < HEADER_LEN {
            return Err(Error::format(path, "truncated descriptor file"));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::format(path, "bad magic; not a descriptor file"));
        }
        if bytes[4] != VERSION {
            return Err(Error::format(
                path,
                format!("unsupported version {}, expected {VERSION}", bytes[4]),
            ));
        }
        let count = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[13..17].try_into().unwrap()) as usize;
        if dim == 0 {
            return Err(Error::format(path, "descriptor dimension 0"));
        }
        let mut hash = [0u8; 32];
        hash.copy_from_slice(&bytes[17..49]);
        let expected = HEADER_LEN + 4 * count * dim;
        if bytes.len() != expected {
            return Err(Error::format(
                path,
                format!(
                    "length {} does not match header (want {expected} for {count}x{dim})",
                    bytes.len()
                ),
            ));
        }
        let mut data = Vec::with_capacity(count * dim);
        for chunk in bytes[HEADER_LEN..].chunks_exact(4) {
            data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
        Ok(DescriptorFile {
            dim,
            checkpoint_hash: hash,
            data,
        })
    }

    /// Human-readable rendering: one whitespace-separated row per
    /// descriptor, header as a comment.
    pub fn dump_text(&self) -> String {
        let mut out = format!(
            "# patchdesc {} count={} dim={} checkpoint={}\n",
            crate::VERSION,
            self.count(),
            self.dim,
            hex(&self.checkpoint_hash)
        );
        for i in 0..self.count() {
            let row: Vec<String> = self.row(i).iter().map(|v| format!("{v}")).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
