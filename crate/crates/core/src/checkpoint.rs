//! Binary checkpoints.
//!
//! Layout: `MAGIC`, a little-endian `u32` version, the payload length (`u64`),
//! the payload, then the SHA-256 of the payload. The payload holds the config
//! echo (TOML), the step/epoch counters, and every named tensor as raw `f64`s,
//! so a reload is bit-exact.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::backbone::WeightSet;
use crate::config::RunConfig;
use crate::error::{IamlError, Result};
use crate::optim::Adam;
use crate::tensor::Tensor;
use crate::train::TrainState;

pub const MAGIC: &[u8; 8] = b"IAMLCKPT";
pub const VERSION: u32 = 1;

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn tensor(&mut self, name: &str, t: &Tensor) {
        self.str(name);
        self.u32(t.rank() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for v in t.data() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn corrupt(msg: impl Into<String>) -> IamlError {
    IamlError::CheckpointCorrupt(msg.into())
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| corrupt("truncated payload"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| corrupt("invalid UTF-8"))
    }
    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let name = self.str()?;
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let len: usize = shape.iter().product();
        if len.saturating_mul(8) > self.buf.len() - self.pos {
            return Err(corrupt(format!("tensor `{name}` overruns payload")));
        }
        let data = (0..len).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Ok((name, Tensor::new(shape, data)?))
    }
}

fn named(ws: &WeightSet) -> Vec<(String, &Tensor)> {
    ws.iter().map(|(n, t)| (n.to_string(), t)).collect()
}

fn sections(state: &TrainState) -> Vec<(&'static str, Vec<(String, &Tensor)>)> {
    let (m, v) = state.optimizer.moments();
    let names = state.optimizer.param_names();
    vec![
        ("student_encoder", named(&state.student_encoder)),
        ("student_decoder", named(&state.student_decoder)),
        ("teacher_decoder", named(&state.teacher_decoder)),
        ("adam_m", names.iter().cloned().zip(m.iter()).collect()),
        ("adam_v", names.iter().cloned().zip(v.iter()).collect()),
    ]
}

pub fn to_bytes(state: &TrainState) -> Vec<u8> {
    let mut p = Writer::default();
    p.str(&state.config.to_toml_string());
    p.u64(state.step);
    p.u64(state.epoch);
    p.u64(state.batch_in_epoch);
    p.u64(state.optimizer.steps_taken());
    for (section, tensors) in sections(state) {
        p.str(section);
        p.u32(tensors.len() as u32);
        for (name, t) in tensors {
            p.tensor(&name, t);
        }
    }
    let mut out = Writer::default();
    out.0.extend_from_slice(MAGIC);
    out.u32(VERSION);
    out.u64(p.0.len() as u64);
    let digest = Sha256::digest(&p.0);
    out.0.extend_from_slice(&p.0);
    out.0.extend_from_slice(&digest);
    out.0
}

pub fn from_bytes(bytes: &[u8]) -> Result<TrainState> {
    if bytes.len() < MAGIC.len() + 12 + 32 || &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let mut head = Reader { buf: bytes, pos: 8 };
    let version = head.u32()?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let len = head.u64()? as usize;
    let payload = head.take(len)?;
    let digest = head.take(32)?;
    if head.pos != bytes.len() {
        return Err(corrupt("trailing bytes"));
    }
    if Sha256::digest(payload).as_slice() != digest {
        return Err(corrupt("checksum mismatch"));
    }
    let mut r = Reader {
        buf: payload,
        pos: 0,
    };
    let config = RunConfig::from_toml_str(&r.str()?, &[])
        .map_err(|e| corrupt(format!("embedded config: {e}")))?;
    let step = r.u64()?;
    let epoch = r.u64()?;
    let batch_in_epoch = r.u64()?;
    let adam_steps = r.u64()?;
    let mut parts: Vec<Vec<(String, Tensor)>> = Vec::new();
    for expected in [
        "student_encoder",
        "student_decoder",
        "teacher_decoder",
        "adam_m",
        "adam_v",
    ] {
        let section = r.str()?;
        if section != expected {
            return Err(corrupt(format!(
                "expected section `{expected}`, found `{section}`"
            )));
        }
        let n = r.u32()? as usize;
        parts.push((0..n).map(|_| r.tensor()).collect::<Result<_>>()?);
    }
    if r.pos != payload.len() {
        return Err(corrupt("unused payload bytes"));
    }
    let mut it = parts.into_iter();
    let mut next_set = || {
        let mut ws = WeightSet::new();
        for (n, t) in it.next().unwrap() {
            ws.push(n, t);
        }
        ws
    };
    let student_encoder = next_set();
    let student_decoder = next_set();
    let teacher_decoder = next_set();
    let m = next_set();
    let v = next_set();

    let fresh = crate::train::init_state(&config)?;
    let layout_ok = student_encoder.same_layout(&fresh.student_encoder)
        && student_decoder.same_layout(&fresh.student_decoder)
        && teacher_decoder.same_layout(&fresh.student_decoder);
    if !layout_ok {
        return Err(IamlError::ConfigMismatch(
            "checkpoint weights do not match the embedded model config".into(),
        ));
    }
    let names: Vec<String> = m.iter().map(|(n, _)| n.to_string()).collect();
    let v_names: Vec<&str> = v.iter().map(|(n, _)| n).collect();
    if names != fresh.optimizer.param_names() || v_names != names {
        return Err(corrupt("optimizer state does not match parameters"));
    }
    let optimizer = Adam::from_parts(
        config.train.adam(),
        names,
        m.iter().map(|(_, t)| t.clone()).collect(),
        v.iter().map(|(_, t)| t.clone()).collect(),
        adam_steps,
    );
    Ok(TrainState {
        config,
        student_encoder,
        student_decoder,
        teacher_decoder,
        optimizer,
        step,
        epoch,
        batch_in_epoch,
    })
}

pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, to_bytes(state))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<TrainState> {
    from_bytes(&std::fs::read(path)?)
}

/// Short identifier for reports: the first 12 hex digits of the file's SHA-256.
pub fn checkpoint_id(path: &Path) -> Result<String> {
    let digest = Sha256::digest(std::fs::read(path)?);
    Ok(digest.iter().take(6).map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::synthetic::synthetic_pair;
    use crate::train::init_state;

    fn state() -> TrainState {
        let mut c = RunConfig {
            model: BackboneConfig::tiny(),
            ..RunConfig::default()
        };
        c.train.crop = 16;
        let mut s = init_state(&c).unwrap();
        let (low, clean) = synthetic_pair(16, 16, 2);
        s.train_step(&low, &clean).unwrap();
        s.batch_in_epoch = 1;
        s
    }

    #[test]
    fn round_trip_is_exact() {
        let s = state();
        let back = from_bytes(&to_bytes(&s)).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn any_flipped_byte_is_detected() {
        let bytes = to_bytes(&state());
        for pos in [0, 9, 20, bytes.len() / 2, bytes.len() - 1] {
            let mut b = bytes.clone();
            b[pos] ^= 0x40;
            assert!(
                matches!(from_bytes(&b), Err(IamlError::CheckpointCorrupt(_))),
                "byte {pos}"
            );
        }
        assert!(from_bytes(&bytes[..bytes.len() - 5]).is_err());
    }
}
