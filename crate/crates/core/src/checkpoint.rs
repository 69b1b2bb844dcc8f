//! Model checkpoints.
//!
//! Layout (little-endian): magic `DBCK`, format version u8, config JSON
//! (u32 length + bytes), parameter count u32, then per parameter its name
//! (u16 length + bytes), rank u8, dims (u32 each) and f32 values. An optional
//! training-state trailer holds the iteration and the Adam moments.

use std::io::{Read, Write};
use std::path::Path;

use crate::codec::CodecNet;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"DBCK";
pub const VERSION: u8 = 1;
const TRAIN_TAG: [u8; 4] = *b"TRST";

/// Optimizer progress saved alongside the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub iteration: u64,
    pub adam: AdamState<T>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn tensor<T: Scalar>(&mut self, t: &Tensor<T>) -> Result<()> {
        self.u8(u8::try_from(t.rank()).map_err(|_| Error::Contract("rank too large".into()))?);
        for &d in t.shape() {
            self.u32(u32::try_from(d).map_err(|_| Error::Contract("dim too large".into()))?);
        }
        for v in t.data() {
            self.bytes(&(v.f64() as f32).to_le_bytes());
        }
        Ok(())
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.b.len());
        let end = end.ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.b[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn tensor<T: Scalar>(&mut self) -> Result<Tensor<T>> {
        let rank = self.u8()? as usize;
        let shape = (0..rank).map(|_| Ok(self.u32()? as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::cst(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect();
        Tensor::new(shape, data)
    }
    fn done(&self) -> bool {
        self.pos == self.b.len()
    }
}

fn write_store<T: Scalar>(w: &mut Writer, store: &ParamStore<T>) -> Result<()> {
    w.u32(store.len() as u32);
    for (_, name, value) in store.iter() {
        w.u16(u16::try_from(name.len()).map_err(|_| Error::Contract("parameter name too long".into()))?);
        w.bytes(name.as_bytes());
        w.tensor(value)?;
    }
    Ok(())
}

/// Serializes a model (and optionally its training state).
pub fn to_bytes<T: Scalar>(net: &CodecNet<T>, state: Option<&TrainState<T>>) -> Result<Vec<u8>> {
    let mut w = Writer(Vec::new());
    w.bytes(&MAGIC);
    w.u8(VERSION);
    let cfg = serde_json::to_vec(&net.config)?;
    w.u32(cfg.len() as u32);
    w.bytes(&cfg);
    write_store(&mut w, &net.store)?;
    if let Some(st) = state {
        w.bytes(&TRAIN_TAG);
        w.u64(st.iteration);
        w.u64(st.adam.t);
        w.f64(st.adam.beta1);
        w.f64(st.adam.beta2);
        w.f64(st.adam.eps);
        w.u32(st.adam.m.len() as u32);
        for (m, v) in st.adam.m.iter().zip(&st.adam.v) {
            w.tensor(m)?;
            w.tensor(v)?;
        }
    }
    Ok(w.0)
}

/// Parses a checkpoint, rebuilding the network from its stored config and
/// checking that every parameter matches by name and shape.
pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<(CodecNet<T>, Option<TrainState<T>>)> {
    let mut r = Reader { b: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let n = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(n)?)?;
    // Structure only; every value is overwritten below.
    let mut net = CodecNet::<T>::new(config, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
    let count = r.u32()? as usize;
    if count != net.store.len() {
        return Err(Error::Format(format!(
            "checkpoint has {count} parameters, model expects {}",
            net.store.len()
        )));
    }
    let ids: Vec<_> = net.store.ids().collect();
    for id in ids {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        if name != net.store.name(id) {
            return Err(Error::Format(format!(
                "parameter {name} found where {} was expected",
                net.store.name(id)
            )));
        }
        let t = r.tensor()?;
        net.store
            .set(id, t)
            .map_err(|e| Error::Format(format!("parameter {name}: {e}")))?;
    }
    let state = if r.done() {
        None
    } else {
        if r.take(4)? != TRAIN_TAG {
            return Err(Error::Format("unexpected trailing bytes in checkpoint".into()));
        }
        let iteration = r.u64()?;
        let t = r.u64()?;
        let (beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?);
        let k = r.u32()? as usize;
        if k != net.store.len() {
            return Err(Error::Format("optimizer state does not match the parameters".into()));
        }
        let mut adam = AdamState::with_hyper(&net.store, beta1, beta2, eps);
        adam.t = t;
        for (i, id) in net.store.ids().enumerate() {
            let (m, v) = (r.tensor()?, r.tensor()?);
            if m.shape() != net.store.get(id).shape() || v.shape() != m.shape() {
                return Err(Error::Format("optimizer moment shape mismatch".into()));
            }
            adam.m[i] = m;
            adam.v[i] = v;
        }
        if !r.done() {
            return Err(Error::Format("unexpected trailing bytes in checkpoint".into()));
        }
        Some(TrainState { iteration, adam })
    };
    Ok((net, state))
}

pub fn save<T: Scalar>(path: &Path, net: &CodecNet<T>, state: Option<&TrainState<T>>) -> Result<()> {
    let bytes = to_bytes(net, state)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<(CodecNet<T>, Option<TrainState<T>>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Metric;
    use rand::SeedableRng;

    fn tiny() -> CodecNet<f32> {
        let cfg = ModelConfig {
            n: 4,
            m: 10,
            groups: 5,
            use_ci: true,
            use_tb: true,
            hyper_channels: 3,
            lambda: 0.03,
            metric: Metric::Mse,
        };
        CodecNet::new(cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(4)).unwrap()
    }

    #[test]
    fn byte_identical_round_trip() {
        let net = tiny();
        let bytes = to_bytes(&net, None).unwrap();
        let (back, st) = from_bytes::<f32>(&bytes).unwrap();
        assert!(st.is_none());
        assert_eq!(back.config, net.config);
        for id in net.store.ids() {
            assert_eq!(back.store.get(id), net.store.get(id));
        }
        assert_eq!(to_bytes(&back, None).unwrap(), bytes);
    }

    #[test]
    fn training_state_round_trip() {
        let mut net = tiny();
        for id in net.store.ids().collect::<Vec<_>>() {
            let g = Tensor::full(net.store.get(id).shape(), 0.5);
            net.store.accumulate_grad(id, &g).unwrap();
        }
        let mut adam = AdamState::new(&net.store);
        adam.step(&mut net.store, 1e-3).unwrap();
        let st = TrainState { iteration: 17, adam };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save(&p, &net, Some(&st)).unwrap();
        let (back, st2) = load::<f32>(&p).unwrap();
        assert_eq!(st2.as_ref(), Some(&st));
        assert_eq!(to_bytes(&back, st2.as_ref()).unwrap(), std::fs::read(&p).unwrap());
    }

    #[test]
    fn corrupt_checkpoints_rejected() {
        let bytes = to_bytes(&tiny(), None).unwrap();
        assert!(matches!(from_bytes::<f32>(&bytes[..bytes.len() - 2]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'Q';
        assert!(matches!(from_bytes::<f32>(&bad), Err(Error::Format(_))));
        let mut extra = bytes;
        extra.push(1);
        assert!(from_bytes::<f32>(&extra).is_err());
    }
}
