//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    b"PDNCKPT"                      7 bytes
//! version  u8 = 1
//! input_size, conv1_planes, conv2_planes, descriptor_dim   u32 each
//! seed     u64   (the seed the run was launched with)
//! epoch    u32   (completed training epochs; 0 for a fresh init)
//! flags    u8    (bit 0: optimizer velocity tensors follow the params)
//! tensors  f32 values in declaration order:
//!          conv1_w conv1_b conv2_w conv2_b fc_w fc_b [velocity ×6]
//! checksum SHA-256 of everything above    32 bytes
//! ```
//!
//! Round-trips are bit-exact, which is what makes interrupted training runs
//! resumable on the same trajectory.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{NetworkConfig, NetworkParams};
use crate::tensor::Tensor;

const MAGIC: &[u8; 7] = b"PDNCKPT";
const VERSION: u8 = 1;
const CHECKSUM_LEN: usize = 32;

/// A checkpoint: parameters plus optional optimizer velocity and the
/// provenance needed to resume the exact run.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: NetworkParams<f32>,
    /// Momentum velocity tensors in the same order as `params.tensors()`.
    pub velocity: Option<Vec<Tensor<f32>>>,
    pub seed: u64,
    pub epoch: u32,
}

impl Checkpoint {
    pub fn fresh(params: NetworkParams<f32>, seed: u64) -> Self {
        Checkpoint {
            params,
            velocity: None,
            seed,
            epoch: 0,
        }
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if !ckpt.params.all_finite() {
        return Err(Error::NonFinite {
            op: "save checkpoint",
        });
    }
    let cfg = ckpt.params.config;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    for v in [
        cfg.input_size as u32,
        cfg.conv1_planes as u32,
        cfg.conv2_planes as u32,
        cfg.descriptor_dim as u32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&ckpt.seed.to_le_bytes());
    buf.extend_from_slice(&ckpt.epoch.to_le_bytes());
    buf.push(ckpt.velocity.is_some() as u8);
    for t in ckpt.params.tensors() {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(vel) = &ckpt.velocity {
        for (t, p) in vel.iter().zip(ckpt.params.tensors()) {
            t.require_same_shape(p, "save checkpoint")?;
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |msg: &str| Error::format(path, msg);

    if bytes.len() < MAGIC.len() + 1 + CHECKSUM_LEN {
        return Err(fail("truncated checkpoint"));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(fail("bad magic; not a checkpoint file"));
    }
    if bytes[MAGIC.len()] != VERSION {
        return Err(fail(&format!(
            "unsupported checkpoint version {}, expected {VERSION}",
            bytes[MAGIC.len()]
        )));
    }

    let (body, checksum) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    let digest = Sha256::digest(body);
    if digest.as_slice() != checksum {
        return Err(fail("checksum mismatch; file is corrupt"));
    }

    let mut cursor = Reader {
        body,
        offset: MAGIC.len() + 1,
        path,
    };
    let input_size = cursor.u32()? as usize;
    let conv1_planes = cursor.u32()? as usize;
    let conv2_planes = cursor.u32()? as usize;
    let descriptor_dim = cursor.u32()? as usize;
    let seed = cursor.u64()?;
    let epoch = cursor.u32()?;
    let flags = cursor.u8()?;

    let config = NetworkConfig::custom(input_size, conv1_planes, conv2_planes, descriptor_dim)
        .map_err(|e| fail(&format!("invalid header dimensions: {e}")))?;
    let template = crate::model::init_params_with::<f32>(config, 0)
        .map_err(|e| fail(&format!("cannot build parameter shapes: {e}")))?;

    let mut params = template;
    for t in params.tensors_mut() {
        cursor.fill_tensor(t)?;
    }
    let velocity = if flags & 1 != 0 {
        let mut vel = Vec::with_capacity(6);
        for p in params.tensors() {
            let mut t = Tensor::<f32>::zeros(p.shape());
            cursor.fill_tensor(&mut t)?;
            vel.push(t);
        }
        Some(vel)
    } else {
        None
    };
    if cursor.offset != body.len() {
        return Err(fail("trailing bytes after tensor data"));
    }
    if !params.all_finite() {
        return Err(fail("checkpoint holds non-finite parameter values"));
    }

    Ok(Checkpoint {
        params,
        velocity,
        seed,
        epoch,
    })
}

/// Loads and verifies the descriptor dimension in one step, so a mismatch
/// can never hand back partially-usable parameters.
pub fn load_checkpoint_expecting(path: &Path, descriptor_dim: usize) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    let got = ckpt.params.config.descriptor_dim;
    if got != descriptor_dim {
        return Err(Error::shape(
            "load checkpoint",
            "descriptor dim",
            descriptor_dim,
            got,
        ));
    }
    Ok(ckpt)
}

/// SHA-256 of the checkpoint file, recorded in descriptor files so outputs
/// can be traced back to the exact network that produced them.
pub fn checkpoint_file_hash(path: &Path) -> Result<[u8; 32]> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).into())
}

struct Reader<'a> {
    body: &'a [u8],
    offset: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.offset + n > self.body.len() {
            return Err(Error::format(self.path, "truncated checkpoint"));
        }
        let s = &self.body[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn fill_tensor(&mut self, t: &mut Tensor<f32>) -> Result<()> {
        let raw = self.take(t.len() * 4)?;
        for (dst, chunk) in t.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().unwrap());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params_with;

    fn tiny() -> NetworkParams<f32> {
        init_params_with(NetworkConfig::custom(18, 2, 3, 4).unwrap(), 5).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let params = tiny();
        let vel: Vec<Tensor<f32>> = params
            .tensors()
            .iter()
            .map(|t| t.map(|v| v * 0.25))
            .collect();
        let ckpt = Checkpoint {
            params: params.clone(),
            velocity: Some(vel.clone()),
            seed: 99,
            epoch: 7,
        };
        save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.params, params);
        assert_eq!(back.seed, 99);
        assert_eq!(back.epoch, 7);
        let back_vel = back.velocity.unwrap();
        for (a, b) in back_vel.iter().zip(&vel) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        fs::write(&path, b"NOTACKPTxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxx").unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn corruption_fails_the_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        save_checkpoint(&Checkpoint::fresh(tiny(), 1), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn truncation_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        save_checkpoint(&Checkpoint::fresh(tiny(), 1), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn dimension_mismatch_refuses_to_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        save_checkpoint(&Checkpoint::fresh(tiny(), 1), &path).unwrap();
        // Stored descriptor dim is 4; demanding 8 must fail cleanly.
        let err = load_checkpoint_expecting(&path, 8).unwrap_err();
        assert!(err.to_string().contains("descriptor dim"), "{err}");
        assert!(load_checkpoint_expecting(&path, 4).is_ok());
    }
}
