//! `LASSR-CKPT-v1` archives.
//!
//! Layout: the magic line `LASSR-CKPT-v1\n`, a little-endian u64 header
//! length, a JSON header (setup echo, counters, tensor directory), the
//! tensors as little-endian f64 in directory order, and a trailing SHA-256
//! of everything before it.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::networks::{Discriminator, Generator};
use crate::nn::ParamStore;
use crate::tensor::Tensor;
use crate::trainer::{TrainSetup, TrainState};

pub const MAGIC: &str = "LASSR-CKPT-v1";
const MAGIC_FAMILY: &str = "LASSR-CKPT-";
const DIGEST_LEN: usize = 32;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    setup: TrainSetup,
    step: u64,
    epoch: u64,
    g_adam_step: u64,
    d_adam_step: u64,
    last: Option<LossBreakdown>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

const GROUPS: [&str; 6] = ["g", "g.adam_m", "g.adam_v", "d", "d.adam_m", "d.adam_v"];

fn groups(state: &TrainState) -> [(&ParamStore, &[Tensor]); 6] {
    let g = state.generator.params();
    let d = state.discriminator.params();
    [
        (g, g.tensors()),
        (g, &state.g_opt.m),
        (g, &state.g_opt.v),
        (d, d.tensors()),
        (d, &state.d_opt.m),
        (d, &state.d_opt.v),
    ]
}

/// Serialize the state to archive bytes.
pub fn to_bytes(state: &TrainState) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut payload: Vec<&Tensor> = Vec::new();
    for (group, (store, values)) in GROUPS.iter().zip(groups(state)) {
        for (name, t) in store.names().iter().zip(values) {
            tensors.push(TensorEntry { name: format!("{group}/{name}"), shape: t.shape().to_vec() });
            payload.push(t);
        }
    }
    let header = Header {
        setup: state.setup.clone(),
        step: state.step,
        epoch: state.epoch,
        g_adam_step: state.g_opt.step,
        d_adam_step: state.d_opt.step,
        last: state.last.clone(),
        tensors,
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(header.len() + 8 * payload.iter().map(|t| t.len()).sum::<usize>() + 64);
    out.extend_from_slice(MAGIC.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in payload {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

/// Parse archive bytes back into a training state.
pub fn from_bytes(bytes: &[u8]) -> Result<TrainState> {
    let newline = bytes.iter().take(64).position(|&b| b == b'\n');
    let magic = newline.and_then(|i| std::str::from_utf8(&bytes[..i]).ok());
    match magic {
        Some(m) if m == MAGIC => {}
        Some(m) if m.starts_with(MAGIC_FAMILY) => {
            return Err(Error::CheckpointVersion { expected: MAGIC.into(), found: m.into() });
        }
        _ => return Err(corrupt("missing LASSR-CKPT magic line")),
    }
    if bytes.len() < DIGEST_LEN {
        return Err(corrupt("archive too short"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("digest mismatch (truncated or modified archive)"));
    }
    let mut pos = MAGIC.len() + 1;
    let len_bytes: [u8; 8] = body.get(pos..pos + 8).and_then(|s| s.try_into().ok()).ok_or_else(|| corrupt("missing header length"))?;
    pos += 8;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let header_bytes = body.get(pos..pos.saturating_add(header_len)).ok_or_else(|| corrupt("header exceeds archive"))?;
    pos += header_len;
    let header: Header = serde_json::from_slice(header_bytes).map_err(|e| corrupt(format!("bad header: {e}")))?;

    let mut state = TrainState::new(header.setup)?;
    let mut values = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let raw = body.get(pos..pos + 8 * n).ok_or_else(|| corrupt(format!("tensor {} exceeds archive", entry.name)))?;
        pos += 8 * n;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        values.push(Tensor::new(entry.shape.clone(), data));
    }
    if pos != body.len() {
        return Err(corrupt(format!("{} trailing bytes", body.len() - pos)));
    }

    let mut expected = Vec::new();
    for (group, (store, vals)) in GROUPS.iter().zip(groups(&state)) {
        for (name, t) in store.names().iter().zip(vals) {
            expected.push(TensorEntry { name: format!("{group}/{name}"), shape: t.shape().to_vec() });
        }
    }
    if expected != header.tensors {
        return Err(corrupt("tensor directory does not match the configured architecture"));
    }
    let ng = state.generator.params().len();
    let nd = state.discriminator.params().len();
    let mut it = values.into_iter();
    let mut take = |n: usize| it.by_ref().take(n).collect::<Vec<Tensor>>();
    fill(state.generator.params_mut(), take(ng));
    state.g_opt.m = take(ng);
    state.g_opt.v = take(ng);
    fill(state.discriminator.params_mut(), take(nd));
    state.d_opt.m = take(nd);
    state.d_opt.v = take(nd);
    state.g_opt.step = header.g_adam_step;
    state.d_opt.step = header.d_adam_step;
    state.step = header.step;
    state.epoch = header.epoch;
    state.last = header.last;
    Ok(state)
}

fn fill(store: &mut ParamStore, values: Vec<Tensor>) {
    for (dst, src) in store.tensors_mut().iter_mut().zip(values) {
        *dst = src;
    }
}

pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = to_bytes(state)?;
    let tmp = path.with_extension("ckpt.partial");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Generator weights only, for inference.
pub fn load_generator(path: &Path) -> Result<Generator> {
    Ok(load(path)?.generator)
}

/// Critic weights only.
pub fn load_discriminator(path: &Path) -> Result<Discriminator> {
    Ok(load(path)?.discriminator)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state() -> TrainState {
        let mut s = TrainSetup::desk(64, 2, 9);
        s.model.generator.base_channels = 4;
        s.model.generator.growth_channels = 4;
        let mut st = TrainState::new(s).unwrap();
        st.step = 17;
        st.g_opt.step = 17;
        st.g_opt.m[0].data_mut()[0] = 0.125;
        st
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let st = state();
        let a = to_bytes(&st).unwrap();
        let back = from_bytes(&a).unwrap();
        assert_eq!(to_bytes(&back).unwrap(), a);
        assert_eq!(back.generator.params(), st.generator.params());
        assert_eq!(back.g_opt, st.g_opt);
        assert_eq!(back.step, 17);
    }

    #[test]
    fn truncation_and_version_errors() {
        let a = to_bytes(&state()).unwrap();
        for cut in [0, 5, 20, a.len() / 2, a.len() - 1] {
            assert!(matches!(from_bytes(&a[..cut]), Err(Error::CorruptCheckpoint(_))), "cut {cut}");
        }
        let mut v2 = a.clone();
        v2[MAGIC.len() - 1] = b'2';
        assert!(matches!(from_bytes(&v2), Err(Error::CheckpointVersion { .. })));
    }
}
