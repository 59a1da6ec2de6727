//! Versioned single-file checkpoints.
//!
//! Layout (little-endian): magic `ADCK`, `u32` version, `u32` section
//! count, then sections of `u32` tag, `u64` payload length, payload and the
//! payload's SHA-256. Parameters are stored by name as `f64`, so a load
//! rebuilds a bit-identical model.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::{KeyValues, ModelConfig, TrainConfig};
use crate::domains::{DomainId, DomainInit, TrainMode};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::{AdamState, Moments};
use crate::training::TrainState;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ADCK";
pub const CHECKPOINT_VERSION: u32 = 1;

const TAG_CONFIG: u32 = 1;
const TAG_REGISTRY: u32 = 2;
const TAG_PARAMS: u32 = 3;
const TAG_ADAM: u32 = 4;
const TAG_TRAIN: u32 = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub train: Option<TrainState>,
}

#[derive(Default)]
struct Buf(Vec<u8>);

impl Buf {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    /// Offset of `bytes[0]` in the file, for error messages.
    base: usize,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, reason: impl Into<String>) -> Error {
        Error::Corrupt {
            offset: (self.base + self.pos) as u64,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.bytes.len() - self.pos {
            return Err(self.corrupt(format!("truncated: need {n} bytes, {} left", self.bytes.len() - self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| self.corrupt("length overflows"))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| self.corrupt("length overflows"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect())
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let at = self.pos;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Corrupt {
            offset: (self.base + at) as u64,
            reason: "invalid utf-8".into(),
        })
    }
    fn done(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.corrupt("trailing bytes in section"));
        }
        Ok(())
    }
}

fn mode_write(b: &mut Buf, mode: Option<TrainMode>) {
    let (kind, d) = match mode {
        None => (0, 0),
        Some(TrainMode::Backbone) => (1, 0),
        Some(TrainMode::Adapter(d)) => (2, d.0),
        Some(TrainMode::Finetune(d)) => (3, d.0),
    };
    b.u8(kind);
    b.u32(d);
}

fn mode_read(r: &mut Reader) -> Result<Option<TrainMode>> {
    let kind = r.u8()?;
    let d = DomainId(r.u32()?);
    match kind {
        0 => Ok(None),
        1 => Ok(Some(TrainMode::Backbone)),
        2 => Ok(Some(TrainMode::Adapter(d))),
        3 => Ok(Some(TrainMode::Finetune(d))),
        k => Err(r.corrupt(format!("unknown train mode tag {k}"))),
    }
}

/// Serializes the checkpoint. Identical state always gives identical bytes.
pub fn encode_checkpoint(model: &Model, train: Option<&TrainState>) -> Vec<u8> {
    let mut sections: Vec<(u32, Buf)> = Vec::new();

    let mut b = Buf::default();
    b.str(&model.config.to_kv());
    sections.push((TAG_CONFIG, b));

    let mut b = Buf::default();
    b.u32(model.registry.len() as u32);
    for d in model.registry.iter() {
        b.u32(d.id.0);
        b.str(&d.name);
    }
    mode_write(&mut b, model.train_mode());
    sections.push((TAG_REGISTRY, b));

    let mut b = Buf::default();
    b.u32(model.store.len() as u32);
    for (_, p) in model.store.iter() {
        b.str(&p.name);
        b.u32(p.value.shape().len() as u32);
        for &d in p.value.shape() {
            b.u64(d as u64);
        }
        b.f64s(p.value.data());
    }
    sections.push((TAG_PARAMS, b));

    if let Some(t) = train {
        let a = &t.adam;
        let mut b = Buf::default();
        b.f64s(&[a.beta1, a.beta2, a.eps]);
        b.u64(a.step);
        b.u32(a.moments.len() as u32);
        for (name, m) in &a.moments {
            b.str(name);
            b.u64(m.first.len() as u64);
            b.f64s(&m.first);
            b.f64s(&m.second);
        }
        sections.push((TAG_ADAM, b));

        let mut b = Buf::default();
        mode_write(&mut b, Some(t.mode));
        b.str(&t.config.to_kv());
        b.u64(t.epoch as u64);
        sections.push((TAG_TRAIN, b));
    }

    let mut out = Buf::default();
    out.0.extend_from_slice(CHECKPOINT_MAGIC);
    out.u32(CHECKPOINT_VERSION);
    out.u32(sections.len() as u32);
    for (tag, payload) in sections {
        out.u32(tag);
        out.u64(payload.0.len() as u64);
        out.0.extend_from_slice(&Sha256::digest(&payload.0));
        out.0.extend_from_slice(&payload.0);
    }
    out.0
}

/// Parses and verifies a checkpoint, rebuilding the model from its config
/// and domain list and then restoring every parameter by name.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0, base: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Corrupt {
            offset: 0,
            reason: "not a checkpoint (bad magic)".into(),
        });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let count = r.u32()?;
    let mut sections = std::collections::BTreeMap::new();
    for _ in 0..count {
        let tag = r.u32()?;
        let len = r.len()?;
        let sum = r.take(32)?;
        let start = r.pos;
        let payload = r.take(len)?;
        if Sha256::digest(payload).as_slice() != sum {
            return Err(Error::Corrupt {
                offset: start as u64,
                reason: format!("section {tag} checksum mismatch"),
            });
        }
        if sections.insert(tag, Reader { bytes: payload, pos: 0, base: start }).is_some() {
            return Err(Error::Corrupt {
                offset: start as u64,
                reason: format!("duplicate section {tag}"),
            });
        }
    }
    if r.pos != bytes.len() {
        return Err(r.corrupt("trailing bytes after last section"));
    }
    let mut section = |tag: u32| {
        sections.remove(&tag).ok_or_else(|| Error::Corrupt {
            offset: bytes.len() as u64,
            reason: format!("missing section {tag}"),
        })
    };

    let mut s = section(TAG_CONFIG)?;
    let config = ModelConfig::from_kv(&s.str()?)?;
    s.done()?;
    let mut model = Model::new(config)?;

    let mut s = section(TAG_REGISTRY)?;
    let n = s.u32()?;
    for i in 0..n {
        let id = s.u32()?;
        let name = s.str()?;
        if id != i {
            return Err(s.corrupt(format!("domain ids must be contiguous, found {id} at position {i}")));
        }
        model.register_domain(&name, DomainInit::Random)?;
    }
    let mode = mode_read(&mut s)?;
    s.done()?;

    let mut s = section(TAG_PARAMS)?;
    let n = s.u32()? as usize;
    if n != model.store.len() {
        return Err(s.corrupt(format!("{n} parameters stored, model has {}", model.store.len())));
    }
    for _ in 0..n {
        let name = s.str()?;
        let ndim = s.u32()? as usize;
        let shape = (0..ndim).map(|_| s.len()).collect::<Result<Vec<_>>>()?;
        let id = model
            .store
            .id(&name)
            .ok_or_else(|| s.corrupt(format!("unknown parameter {name}")))?;
        if model.store.tensor(id).shape() != shape.as_slice() {
            return Err(s.corrupt(format!("parameter {name} has shape {shape:?}, model expects {:?}", model.store.tensor(id).shape())));
        }
        let data = s.f64s(shape.iter().product())?;
        model.store.tensor_mut(id).data_mut().copy_from_slice(&data);
    }
    s.done()?;
    if let Some(m) = mode {
        model.set_train_mode(m)?;
    }

    let train = match (sections.remove(&TAG_ADAM), sections.remove(&TAG_TRAIN)) {
        (None, None) => None,
        (Some(mut a), Some(mut t)) => {
            let h = a.f64s(3)?;
            let step = a.u64()?;
            let n = a.u32()?;
            let mut moments = std::collections::BTreeMap::new();
            for _ in 0..n {
                let name = a.str()?;
                let len = a.len()?;
                let first = a.f64s(len)?;
                let second = a.f64s(len)?;
                moments.insert(name, Moments { first, second });
            }
            a.done()?;
            let mode = mode_read(&mut t)?.ok_or_else(|| t.corrupt("training state without a mode"))?;
            let mut config = TrainConfig::default();
            let rest = config.apply(&KeyValues::parse(&t.str()?)?)?;
            if let Some(k) = rest.first() {
                return Err(Error::Config(format!("unknown training key {k} in checkpoint")));
            }
            let epoch = t.len()?;
            t.done()?;
            Some(TrainState {
                mode,
                config,
                adam: AdamState {
                    beta1: h[0],
                    beta2: h[1],
                    eps: h[2],
                    step,
                    moments,
                },
                epoch,
            })
        }
        _ => {
            return Err(Error::Corrupt {
                offset: bytes.len() as u64,
                reason: "optimizer and training sections must appear together".into(),
            })
        }
    };
    Ok(Checkpoint { model, train })
}

/// Writes atomically: a temporary file in the same directory is renamed
/// over `path`.
pub fn save_checkpoint(model: &Model, train: Option<&TrainState>, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model, train);
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()
    };
    write().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// `(name, scalar count)` for every stored parameter, read straight from
/// the file's parameter section.
pub fn enumerate_params(bytes: &[u8]) -> Result<Vec<(String, usize)>> {
    let ck = decode_checkpoint(bytes)?;
    Ok(ck
        .model
        .store
        .iter()
        .map(|(_, p)| (p.name.clone(), p.value.len()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Model {
        let mut m = Model::new(ModelConfig::tiny()).unwrap();
        m.register_domain("a", DomainInit::Random).unwrap();
        m.register_domain("b", DomainInit::ZeroIdentity).unwrap();
        m.set_train_mode(TrainMode::Adapter(DomainId(1))).unwrap();
        m
    }

    #[test]
    fn round_trip_is_a_fixpoint() {
        let m = model();
        let state = TrainState::new(TrainMode::Adapter(DomainId(1)), TrainConfig { epochs: 5, ..Default::default() }).unwrap();
        let bytes = encode_checkpoint(&m, Some(&state));
        let ck = decode_checkpoint(&bytes).unwrap();
        assert_eq!(ck.model, m);
        assert_eq!(ck.train.as_ref(), Some(&state));
        assert_eq!(encode_checkpoint(&ck.model, ck.train.as_ref()), bytes);
    }

    #[test]
    fn version_and_corruption_errors() {
        let bytes = encode_checkpoint(&model(), None);
        let mut v = bytes.clone();
        v[4] = 7;
        assert!(matches!(decode_checkpoint(&v), Err(Error::Version { found: 7, supported: 1 })));
        let mut flipped = bytes.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 1;
        assert!(matches!(decode_checkpoint(&flipped), Err(Error::Corrupt { .. })));
        match decode_checkpoint(&bytes[..100]) {
            Err(Error::Corrupt { offset, .. }) => assert!(offset <= 100),
            other => panic!("{other:?}"),
        }
    }
}
