//! Binary checkpoint: `CKPT v1\n`, eight little-endian u64 config fields,
//! a u64 parameter count, then each parameter in name order as
//! (u32 name length, name, u32 rank, u64 dims, f32 values).

use std::path::Path;

use super::{Model, ModelConfig, ResidualMode};
use crate::error::Result;
use crate::io::{read_bytes, write_atomic, ByteReader, ByteWriter};
use crate::numerics::{ParamStore, Tensor};

const MAGIC: &[u8] = b"CKPT v1\n";
const KIND: &str = "checkpoint";

pub fn checkpoint_to_bytes(model: &Model) -> Vec<u8> {
    let c = &model.config;
    let mut w = ByteWriter::new();
    w.bytes(MAGIC);
    for v in [
        c.num_layers,
        c.num_heads,
        c.ff_hidden,
        c.hidden_dim,
        c.max_seq_len,
        c.vocab_size,
        match c.residual_mode {
            ResidualMode::Standard => 0,
            ResidualMode::Elc => 1,
        },
        c.latent_k,
    ] {
        w.u64(v as u64);
    }
    w.u64(model.params.len() as u64);
    for (name, t) in model.params.iter() {
        w.str(name);
        w.u32(t.shape().len() as u32);
        for &d in t.shape() {
            w.u64(d as u64);
        }
        w.f32s(t.data());
    }
    w.into_inner()
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut r = ByteReader::new(bytes, KIND);
    r.expect(MAGIC)?;
    let mut fields = [0usize; 8];
    for f in fields.iter_mut() {
        *f = r.usize()?;
    }
    let residual_mode = match fields[6] {
        0 => ResidualMode::Standard,
        1 => ResidualMode::Elc,
        other => return Err(r.err(format!("unknown residual mode {other}"))),
    };
    let config = ModelConfig {
        num_layers: fields[0],
        num_heads: fields[1],
        ff_hidden: fields[2],
        hidden_dim: fields[3],
        max_seq_len: fields[4],
        vocab_size: fields[5],
        residual_mode,
        latent_k: fields[7],
    };
    config.validate().map_err(|e| r.err(e.to_string()))?;

    let count = r.usize()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name = r.str()?;
        let rank = r.u32()? as usize;
        if rank == 0 || rank > 4 {
            return Err(r.err(format!("parameter `{name}` has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.usize()?);
        }
        let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let Some(n) = n.filter(|&n| n > 0) else {
            return Err(r.err(format!("parameter `{name}` has shape {shape:?}")));
        };
        let data = r.f32s(n)?;
        let t = Tensor::new(shape, data).map_err(|e| r.err(e.to_string()))?;
        params.insert(name, t).map_err(|e| r.err(e.to_string()))?;
    }
    r.finish()?;

    let reference = Model::init(config, 0, 1.0)?;
    for (name, t) in reference.params.iter() {
        match params.get(name) {
            Ok(found) if found.shape() == t.shape() => {}
            Ok(found) => {
                return Err(r.err(format!(
                    "parameter `{name}` has shape {:?}, config implies {:?}",
                    found.shape(),
                    t.shape()
                )))
            }
            Err(_) => return Err(r.err(format!("missing parameter `{name}`"))),
        }
    }
    if let Some(extra) = params
        .names()
        .find(|n| !reference.params.contains(n) && !n.starts_with("heads."))
    {
        return Err(r.err(format!("unexpected parameter `{extra}`")));
    }
    Ok(Model { config, params })
}

impl Model {
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        write_atomic(path, &checkpoint_to_bytes(self))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Model> {
        checkpoint_from_bytes(&read_bytes(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn model() -> Model {
        let mut m = Model::init(ModelConfig::tiny(13, ResidualMode::Elc), 9, 0.3).unwrap();
        m.add_token_cls_head(3, 1, 0.3).unwrap();
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let back = checkpoint_from_bytes(&checkpoint_to_bytes(&m)).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let m = model();
        m.save_checkpoint(&path).unwrap();
        assert_eq!(Model::load_checkpoint(&path).unwrap(), m);
        assert!(!dir.path().join("model.ckpt.tmp").exists());
    }

    #[test]
    fn truncation_and_garbage_rejected() {
        let bytes = checkpoint_to_bytes(&model());
        for cut in [0, 4, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(checkpoint_from_bytes(&bytes[..cut]), Err(Error::Format { .. })));
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(checkpoint_from_bytes(&extra).is_err());
        let mut bad_magic = bytes;
        bad_magic[0] = b'X';
        assert!(checkpoint_from_bytes(&bad_magic).is_err());
    }

    #[test]
    fn missing_encoder_parameter_rejected() {
        let mut m = model();
        m.params.remove("layers.01.ffn.in.weight");
        assert!(checkpoint_from_bytes(&checkpoint_to_bytes(&m)).is_err());
    }
}
