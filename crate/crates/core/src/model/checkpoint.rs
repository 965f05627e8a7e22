//! Binary checkpoints: magic, version, JSON config, then named f64 tensors.
//!
//! All integers are little-endian `u32`/`u64`; values are stored as raw
//! little-endian `f64` bits so a round trip is bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::graph::ParamStore;
use super::tensor::Tensor;
use super::transformer::{ModelConfig, Seq2Seq};
use crate::vocab::Vocabulary;

const MAGIC: &[u8; 8] = b"SEADCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint was built for a vocabulary of {stored} tokens, got {given}")]
    VocabMismatch { stored: usize, given: usize },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

fn put_u32(w: &mut impl Write, v: usize) -> std::io::Result<()> {
    w.write_all(&(v as u32).to_le_bytes())
}

fn get_u32(r: &mut impl Read) -> std::io::Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn get_bytes(r: &mut impl Read, n: usize) -> Result<Vec<u8>, CheckpointError> {
    if n > 1 << 30 {
        return Err(CheckpointError::Corrupt(format!("implausible length {n}")));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    Ok(b)
}

pub fn save_checkpoint(model: &Seq2Seq, path: &Path) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let cfg = serde_json::to_vec(&model.config).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    put_u32(&mut w, cfg.len())?;
    w.write_all(&cfg)?;
    put_u32(&mut w, model.vocab.len())?;
    put_u32(&mut w, model.params.len())?;
    for (name, t) in model.params.names.iter().zip(&model.params.values) {
        put_u32(&mut w, name.len())?;
        w.write_all(name.as_bytes())?;
        put_u32(&mut w, t.rows)?;
        put_u32(&mut w, t.cols)?;
        for x in &t.data {
            w.write_all(&x.to_bits().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, vocab: Vocabulary) -> Result<Seq2Seq, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| CheckpointError::BadMagic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = get_u32(&mut r)? as u32;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let n = get_u32(&mut r)?;
    let cfg: ModelConfig = serde_json::from_slice(&get_bytes(&mut r, n)?)
        .map_err(|e| CheckpointError::Corrupt(format!("config: {e}")))?;
    let stored = get_u32(&mut r)?;
    if stored != vocab.len() {
        return Err(CheckpointError::VocabMismatch { stored, given: vocab.len() });
    }
    let count = get_u32(&mut r)?;
    let mut params = ParamStore::default();
    for _ in 0..count {
        let n = get_u32(&mut r)?;
        let name = String::from_utf8(get_bytes(&mut r, n)?).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let rows = get_u32(&mut r)?;
        let cols = get_u32(&mut r)?;
        let raw = get_bytes(&mut r, rows * cols * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap()))).collect();
        params.add(name, Tensor::from_vec(rows, cols, data));
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(CheckpointError::Corrupt(format!("{} trailing bytes", rest.len())));
    }
    Seq2Seq::with_params(cfg, vocab, params).map_err(CheckpointError::Corrupt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synthetic;

    #[test]
    fn round_trip_is_bit_exact() {
        let (tables, corpus) = gen_synthetic(2, 2, 8);
        let vocab = Vocabulary::build(&corpus, &tables, 1).unwrap();
        let cfg = ModelConfig { layers: 1, hidden: 8, heads: 2, ff: 16, ..Default::default() };
        let mut m = Seq2Seq::new(cfg, vocab.clone()).unwrap();
        m.params.values[0].data[0] = f64::from_bits(0x3FF0_0000_0000_0001);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&m, &p).unwrap();
        let back = load_checkpoint(&p, vocab.clone()).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(back.params.names, m.params.names);
        for (a, b) in back.params.values.iter().zip(&m.params.values) {
            assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn rejects_garbage_and_wrong_vocab() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad");
        std::fs::write(&p, b"hello world").unwrap();
        let (tables, corpus) = gen_synthetic(2, 2, 8);
        let vocab = Vocabulary::build(&corpus, &tables, 1).unwrap();
        assert!(matches!(load_checkpoint(&p, vocab.clone()), Err(CheckpointError::BadMagic)));

        let cfg = ModelConfig { layers: 1, hidden: 8, heads: 2, ff: 16, ..Default::default() };
        let m = Seq2Seq::new(cfg, vocab).unwrap();
        save_checkpoint(&m, &p).unwrap();
        let (t2, c2) = gen_synthetic(9, 3, 30);
        let other = Vocabulary::build(&c2, &t2, 1).unwrap();
        assert!(matches!(load_checkpoint(&p, other), Err(CheckpointError::VocabMismatch { .. })));
    }
}
