//! Resumable trainer state: `TRAINSTATE v1\n`, counters, loss EMA, seed and
//! the optimizer moments per parameter.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::Result;
use crate::io::{read_bytes, write_atomic, ByteReader, ByteWriter};
use crate::numerics::{OptimState, Tensor};

const MAGIC: &[u8] = b"TRAINSTATE v1\n";

/// Position in the run. Batch order and masking are derived from `seed`
/// and these counters, so they are all that is needed to continue.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub step_in_epoch: usize,
    pub global_step: usize,
    pub loss_ema: f64,
    pub seed: u64,
}

impl TrainState {
    pub fn new(seed: u64) -> Self {
        TrainState { epoch: 0, step_in_epoch: 0, global_step: 0, loss_ema: 0.0, seed }
    }
}

fn write_moments(w: &mut ByteWriter, moments: &BTreeMap<String, Tensor>) {
    w.u64(moments.len() as u64);
    for (name, t) in moments {
        w.str(name);
        w.u32(t.shape().len() as u32);
        for &d in t.shape() {
            w.u64(d as u64);
        }
        w.f32s(t.data());
    }
}

fn read_moments(r: &mut ByteReader<'_>) -> Result<BTreeMap<String, Tensor>> {
    let n = r.usize()?;
    let mut out = BTreeMap::new();
    for _ in 0..n {
        let name = r.str()?;
        let rank = r.u32()? as usize;
        if rank == 0 || rank > 4 {
            return Err(r.err(format!("moment `{name}` has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.usize()?);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| r.err("moment shape overflows"))?;
        let data = r.f32s(len)?;
        out.insert(name, Tensor::new(shape, data).map_err(|e| r.err(e.to_string()))?);
    }
    Ok(out)
}

pub(super) fn state_to_bytes(state: &TrainState, optim: &OptimState) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(MAGIC);
    w.u64(state.epoch as u64);
    w.u64(state.step_in_epoch as u64);
    w.u64(state.global_step as u64);
    w.f64(state.loss_ema);
    w.u64(state.seed);
    w.u64(optim.step);
    write_moments(&mut w, &optim.first_moment);
    write_moments(&mut w, &optim.second_moment);
    w.into_inner()
}

pub(super) fn state_from_bytes(bytes: &[u8]) -> Result<(TrainState, OptimState)> {
    let mut r = ByteReader::new(bytes, "train state");
    r.expect(MAGIC)?;
    let state = TrainState {
        epoch: r.usize()?,
        step_in_epoch: r.usize()?,
        global_step: r.usize()?,
        loss_ema: r.f64()?,
        seed: r.u64()?,
    };
    let optim = OptimState {
        step: r.u64()?,
        first_moment: read_moments(&mut r)?,
        second_moment: read_moments(&mut r)?,
    };
    r.finish()?;
    Ok((state, optim))
}

pub(super) fn save_state(path: &Path, state: &TrainState, optim: &OptimState) -> Result<()> {
    write_atomic(path, &state_to_bytes(state, optim))
}

pub(super) fn load_state(path: &Path) -> Result<(TrainState, OptimState)> {
    state_from_bytes(&read_bytes(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let state = TrainState { epoch: 3, step_in_epoch: 1, global_step: 10, loss_ema: 2.5, seed: 9 };
        let mut optim = OptimState { step: 10, ..Default::default() };
        optim.first_moment.insert("w".into(), Tensor::matrix(1, 2, vec![0.1, -0.2]).unwrap());
        optim.second_moment.insert("w".into(), Tensor::matrix(1, 2, vec![0.01, 0.04]).unwrap());
        let bytes = state_to_bytes(&state, &optim);
        assert_eq!(state_from_bytes(&bytes).unwrap(), (state, optim));
        assert!(state_from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
