//! Versioned binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"RTSMLP"          6 bytes
//! version u16                currently 1
//! n_dims  u32, then dims as u32 each
//! hidden activation tag u8, output activation tag u8
//! per layer: weight f32[out*in], bias f32[out]
//! ```
//!
//! f32 values are stored as raw IEEE-754 bits, so a save/load round trip is
//! bit-exact. Containers (policy, defender) embed this section length-prefixed.

use std::path::Path;

use crate::diffnum::mlp::{Activation, Mlp};
use crate::diffnum::tensor::Tensor;
use crate::error::{Error, Result};

pub const MLP_MAGIC: &[u8; 6] = b"RTSMLP";
pub const MLP_VERSION: u16 = 1;

pub(crate) struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        ByteWriter { buf: Vec::new() }
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32_slice(&mut self, vs: &[f32]) {
        for v in vs {
            self.f32(*v);
        }
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }

    pub fn into_vec(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8], path: &'a Path) -> Self {
        ByteReader { buf, pos: 0, path }
    }

    fn truncated(&self) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            reason: format!("truncated at byte {}", self.pos),
        }
    }

    pub fn format_err(&self, reason: impl ToString) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            reason: reason.to_string(),
        }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.truncated());
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(4 * n)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.format_err("invalid utf-8 string"))
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn expect_end(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(self.format_err(format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}

pub(crate) fn write_mlp_section(w: &mut ByteWriter, net: &Mlp) {
    w.bytes(MLP_MAGIC);
    w.u16(MLP_VERSION);
    w.u32(net.layer_dims().len() as u32);
    for d in net.layer_dims() {
        w.u32(*d as u32);
    }
    w.bytes(&[net.hidden_activation().tag(), net.output_activation().tag()]);
    for layer in 0..net.num_layers() {
        w.f32_slice(net.weight(layer).data());
        w.f32_slice(net.bias(layer).data());
    }
}

pub(crate) fn read_mlp_section(r: &mut ByteReader<'_>) -> Result<Mlp> {
    let magic = r.take(MLP_MAGIC.len())?;
    if magic != MLP_MAGIC {
        return Err(r.format_err("bad magic, not an MLP checkpoint"));
    }
    let version = r.u16()?;
    if version != MLP_VERSION {
        return Err(Error::Version {
            path: std::path::PathBuf::from("<section>"),
            found: version,
            supported: MLP_VERSION,
        });
    }
    let n_dims = r.u32()? as usize;
    if !(2..=64).contains(&n_dims) {
        return Err(r.format_err(format!("implausible layer count {n_dims}")));
    }
    let mut dims = Vec::with_capacity(n_dims);
    for _ in 0..n_dims {
        dims.push(r.u32()? as usize);
    }
    let tags = r.take(2)?;
    let hidden = Activation::from_tag(tags[0]).ok_or_else(|| r.format_err("bad activation tag"))?;
    let output = Activation::from_tag(tags[1]).ok_or_else(|| r.format_err("bad activation tag"))?;
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for win in dims.windows(2) {
        let (din, dout) = (win[0], win[1]);
        weights.push(Tensor::matrix(dout, din, r.f32_vec(dout * din)?)?);
        biases.push(Tensor::vector(r.f32_vec(dout)?));
    }
    Mlp::from_params(dims, weights, biases, hidden, output)
}

/// Save a single network to `path`.
pub fn save_checkpoint(net: &Mlp, path: &Path) -> Result<()> {
    let mut w = ByteWriter::new();
    write_mlp_section(&mut w, net);
    std::fs::write(path, w.into_vec())?;
    Ok(())
}

/// Load a single network from `path`.
pub fn load_checkpoint(path: &Path) -> Result<Mlp> {
    let buf = std::fs::read(path)?;
    let mut r = ByteReader::new(&buf, path);
    let net = read_mlp_section(&mut r)?;
    r.expect_end()?;
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_for;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let mut rng = rng_for(5, "ckpt");
        let net = Mlp::new(vec![5, 16, 3], Activation::Tanh, Activation::Tanh, &mut rng).unwrap();
        save_checkpoint(&net, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert!(net.params_equal(&loaded));
        assert_eq!(loaded.hidden_activation(), Activation::Tanh);
        assert_eq!(loaded.output_activation(), Activation::Tanh);
    }

    #[test]
    fn wrong_version_is_a_versioned_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let mut rng = rng_for(6, "ckpt");
        let net = Mlp::new(vec![2, 2], Activation::Tanh, Activation::Identity, &mut rng).unwrap();
        save_checkpoint(&net, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[6] = 0xFF; // version low byte
        std::fs::write(&path, &bytes).unwrap();
        match load_checkpoint(&path) {
            Err(Error::Version { found, .. }) => assert_eq!(found, 0x00FF),
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let mut rng = rng_for(7, "ckpt");
        let net = Mlp::new(vec![4, 8, 2], Activation::Tanh, Activation::Identity, &mut rng).unwrap();
        save_checkpoint(&net, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let mut rng = rng_for(8, "ckpt");
        let net = Mlp::new(vec![2, 2], Activation::Tanh, Activation::Identity, &mut rng).unwrap();
        save_checkpoint(&net, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));
    }
}
