//! Binary parameter checkpoint: a versioned archive of named tensors.
//!
//! Layout (all integers little-endian):
//!   magic  b"NNTD"            4 bytes
//!   version u32               currently 1
//!   config  6 x u64           input_dim, c1, c2, c3, lstm_hidden,
//!                             attention_dim, window, output_dim (8 x u64)
//!   tensor_count u32
//!   per tensor:
//!     name_len u32, name utf-8
//!     ndim u32, dims ndim x u64
//!     data  len x f64 little-endian
//! Tensors appear in a fixed order: the trainable tensors of
//! [`TRAINABLE_NAMES`] followed by the non-trainable constants.

use std::io::{Read, Write};
use std::path::Path;

use super::network::{NetworkConfig, NetworkParams, TRAINABLE_NAMES};
use super::tensor::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"NNTD";
const VERSION: u32 = 1;

const EXTRA_NAMES: [&str; 10] = [
    "input.mean",
    "input.std",
    "output.mean",
    "output.std",
    "bn1.running_mean",
    "bn1.running_var",
    "bn2.running_mean",
    "bn2.running_var",
    "bn3.running_mean",
    "bn3.running_var",
];

fn extra_tensors(params: &NetworkParams) -> Vec<&Tensor> {
    vec![
        &params.input_mean,
        &params.input_std,
        &params.output_mean,
        &params.output_std,
        &params.bn_running_mean[0],
        &params.bn_running_var[0],
        &params.bn_running_mean[1],
        &params.bn_running_var[1],
        &params.bn_running_mean[2],
        &params.bn_running_var[2],
    ]
}

fn extra_tensors_mut(params: &mut NetworkParams) -> Vec<&mut Tensor> {
    let [rm0, rm1, rm2] = &mut params.bn_running_mean;
    let [rv0, rv1, rv2] = &mut params.bn_running_var;
    vec![
        &mut params.input_mean,
        &mut params.input_std,
        &mut params.output_mean,
        &mut params.output_std,
        rm0,
        rv0,
        rm1,
        rv1,
        rm2,
        rv2,
    ]
}

pub fn save_checkpoint(params: &NetworkParams, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let c = params.config;
    for v in [
        c.input_dim,
        c.conv_channels[0],
        c.conv_channels[1],
        c.conv_channels[2],
        c.lstm_hidden,
        c.attention_dim,
        c.window,
        c.output_dim,
    ] {
        buf.extend_from_slice(&(v as u64).to_le_bytes());
    }
    let tensors: Vec<(&str, &Tensor)> = TRAINABLE_NAMES
        .iter()
        .copied()
        .zip(params.trainable())
        .chain(EXTRA_NAMES.iter().copied().zip(extra_tensors(params)))
        .collect();
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
        for d in &t.dims {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    // Atomic write: temp file then rename.
    let tmp = path.with_extension("tmp");
    std::fs::File::create(&tmp)?.write_all(&buf)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Parse {
                path: self.path.to_path_buf(),
                line: 0,
                message: "checkpoint truncated".into(),
            });
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<NetworkParams> {
    let mut raw = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut raw)?;
    let mut r = Reader {
        data: &raw,
        pos: 0,
        path,
    };
    let bad = |message: &str| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: message.into(),
    };
    if r.take(4)? != MAGIC {
        return Err(bad("bad magic"));
    }
    if r.u32()? != VERSION {
        return Err(bad("unsupported version"));
    }
    let dims: Vec<usize> = (0..8).map(|_| r.u64().map(|v| v as usize)).collect::<Result<_>>()?;
    let config = NetworkConfig {
        input_dim: dims[0],
        conv_channels: [dims[1], dims[2], dims[3]],
        lstm_hidden: dims[4],
        attention_dim: dims[5],
        window: dims[6],
        output_dim: dims[7],
    };
    let mut params = NetworkParams::zeros(config);
    let count = r.u32()? as usize;
    let expected = TRAINABLE_NAMES.len() + EXTRA_NAMES.len();
    if count != expected {
        return Err(bad(&format!("expected {expected} tensors, found {count}")));
    }

    let mut order: Vec<(&str, &mut Tensor)> = TRAINABLE_NAMES
        .iter()
        .copied()
        .zip(params.trainable_mut())
        .collect();
    // Read trainables then extras; names and shapes must match exactly.
    for pass in 0..2 {
        if pass == 1 {
            order = EXTRA_NAMES.iter().copied().zip(extra_tensors_mut(&mut params)).collect();
        }
        for (name, tensor) in order.drain(..) {
            let name_len = r.u32()? as usize;
            let got_name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| bad("tensor name is not utf-8"))?;
            if got_name != name {
                return Err(bad(&format!("tensor order mismatch: {got_name} != {name}")));
            }
            let ndim = r.u32()? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.u64()? as usize);
            }
            if dims != tensor.dims {
                return Err(bad(&format!(
                    "tensor {name} has shape {dims:?}, expected {:?}",
                    tensor.dims
                )));
            }
            for v in tensor.data.iter_mut() {
                *v = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
            }
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let params = NetworkParams::xavier(NetworkConfig::tiny(), 77);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        save_checkpoint(&params, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(params, loaded);
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let params = NetworkParams::xavier(NetworkConfig::tiny(), 78);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        save_checkpoint(&params, &path).unwrap();
        let raw = std::fs::read(&path).unwrap();
        std::fs::write(&path, &raw[..raw.len() / 2]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
