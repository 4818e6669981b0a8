//! Binary checkpoint format.
//!
//! Little-endian throughout. Layout:
//!
//! ```text
//! magic    4 bytes  "MNCK"
//! version  u32      currently 1
//! sections repeated: id u32, byte length u64, payload
//! ```
//!
//! Section ids: 1 config (UTF-8 JSON), 2 latents, 3 loss coefficients,
//! 4 extra trainables (baseline layers or variant buffers), 5 optimizer
//! state (step counter, first/second moments), 6 progress (step, epoch),
//! 7 RNG states. Scalar arrays are raw 32- or 64-bit values prefixed with
//! a count and a width byte. Generator matrices are never stored; they are
//! reconstructed from the seeds in the embedded config.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"MNCK";
pub const VERSION: u32 = 1;

const SEC_CONFIG: u32 = 1;
const SEC_LATENTS: u32 = 2;
const SEC_COEFFS: u32 = 3;
const SEC_EXTRAS: u32 = 4;
const SEC_OPT: u32 = 5;
const SEC_PROGRESS: u32 = 6;
const SEC_RNG: u32 = 7;

/// Everything needed to resume a run bit-identically on the same build.
#[derive(Debug, Clone)]
pub struct CheckpointData<F> {
    pub config_json: String,
    pub latents: Vec<Vec<F>>,
    pub coeffs: Vec<Vec<F>>,
    pub extras: Vec<Vec<F>>,
    pub opt_t: u64,
    pub opt_m: Vec<Vec<F>>,
    pub opt_v: Vec<Vec<F>>,
    pub step: u64,
    pub epoch: u64,
    /// Data-order stream followed by the noise stream.
    pub rng_states: Vec<RngState>,
}

fn encode_vec_list<F: Scalar>(out: &mut Vec<u8>, list: &[Vec<F>]) {
    out.extend_from_slice(&(list.len() as u32).to_le_bytes());
    for v in list {
        out.extend_from_slice(&(v.len() as u32).to_le_bytes());
        out.push(F::BYTES as u8);
        for s in v {
            out.extend_from_slice(&s.to_le_bytes_vec());
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Format(format!("checkpoint truncated reading {what}")));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn decode_vec_list<F: Scalar>(c: &mut Cursor, what: &str) -> Result<Vec<Vec<F>>> {
    let n = c.u32(what)? as usize;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let len = c.u32(what)? as usize;
        let width = c.u8(what)? as usize;
        if width != F::BYTES {
            return Err(Error::Format(format!(
                "{what}[{i}]: stored as {width}-byte scalars, run precision expects {}",
                F::BYTES
            )));
        }
        let raw = c.take(len * width, what)?;
        let mut v = Vec::with_capacity(len);
        for chunk in raw.chunks(width) {
            v.push(F::from_le_slice(chunk));
        }
        out.push(v);
    }
    Ok(out)
}

fn section(out: &mut Vec<u8>, id: u32, payload: &[u8]) {
    out.extend_from_slice(&id.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
}

pub fn save<F: Scalar>(path: &Path, data: &CheckpointData<F>) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());

    section(&mut out, SEC_CONFIG, data.config_json.as_bytes());

    let mut buf = Vec::new();
    encode_vec_list(&mut buf, &data.latents);
    section(&mut out, SEC_LATENTS, &buf);

    buf.clear();
    encode_vec_list(&mut buf, &data.coeffs);
    section(&mut out, SEC_COEFFS, &buf);

    buf.clear();
    encode_vec_list(&mut buf, &data.extras);
    section(&mut out, SEC_EXTRAS, &buf);

    buf.clear();
    buf.extend_from_slice(&data.opt_t.to_le_bytes());
    encode_vec_list(&mut buf, &data.opt_m);
    encode_vec_list(&mut buf, &data.opt_v);
    section(&mut out, SEC_OPT, &buf);

    buf.clear();
    buf.extend_from_slice(&data.step.to_le_bytes());
    buf.extend_from_slice(&data.epoch.to_le_bytes());
    section(&mut out, SEC_PROGRESS, &buf);

    buf.clear();
    buf.push(data.rng_states.len() as u8);
    for st in &data.rng_states {
        buf.extend_from_slice(&st.to_bytes());
    }
    section(&mut out, SEC_RNG, &buf);

    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&out)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load<F: Scalar>(path: &Path) -> Result<CheckpointData<F>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    let magic = c.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic {magic:?}, expected {MAGIC:?}",
            path.display()
        )));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}, this build reads {VERSION}"
        )));
    }

    let mut data = CheckpointData {
        config_json: String::new(),
        latents: Vec::new(),
        coeffs: Vec::new(),
        extras: Vec::new(),
        opt_t: 0,
        opt_m: Vec::new(),
        opt_v: Vec::new(),
        step: 0,
        epoch: 0,
        rng_states: Vec::new(),
    };
    let mut seen_config = false;
    while !c.done() {
        let id = c.u32("section id")?;
        let len = c.u64("section length")? as usize;
        let payload = c.take(len, "section payload")?;
        let mut pc = Cursor { bytes: payload, pos: 0 };
        match id {
            SEC_CONFIG => {
                data.config_json = String::from_utf8(payload.to_vec())
                    .map_err(|_| Error::Format("config section is not UTF-8".into()))?;
                seen_config = true;
            }
            SEC_LATENTS => data.latents = decode_vec_list(&mut pc, "latents")?,
            SEC_COEFFS => data.coeffs = decode_vec_list(&mut pc, "coefficients")?,
            SEC_EXTRAS => data.extras = decode_vec_list(&mut pc, "extras")?,
            SEC_OPT => {
                data.opt_t = pc.u64("optimizer step")?;
                data.opt_m = decode_vec_list(&mut pc, "optimizer m")?;
                data.opt_v = decode_vec_list(&mut pc, "optimizer v")?;
            }
            SEC_PROGRESS => {
                data.step = pc.u64("step")?;
                data.epoch = pc.u64("epoch")?;
            }
            SEC_RNG => {
                let n = pc.u8("rng count")? as usize;
                for _ in 0..n {
                    let raw = pc.take(RngState::SERIALIZED_LEN, "rng state")?;
                    data.rng_states.push(RngState::from_bytes(raw)?);
                }
            }
            _ => {
                return Err(Error::Format(format!("unknown checkpoint section id {id}")));
            }
        }
    }
    if !seen_config {
        return Err(Error::Format("checkpoint has no config section".into()));
    }
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedRng;

    fn sample() -> CheckpointData<f32> {
        let mut rng = SeedRng::from_seed(4);
        rng.next_u64();
        CheckpointData {
            config_json: "{\"mode\":\"slvt\"}".into(),
            latents: vec![vec![1.0, -2.5, 3.25]],
            coeffs: vec![vec![0.1], vec![-0.2]],
            extras: vec![],
            opt_t: 17,
            opt_m: vec![vec![0.5, 0.5, 0.5], vec![0.0], vec![0.0]],
            opt_v: vec![vec![0.25, 0.0, 0.1], vec![0.0], vec![0.0]],
            step: 99,
            epoch: 3,
            rng_states: vec![rng.capture(), SeedRng::from_seed(7).capture()],
        }
    }

    #[test]
    fn roundtrip_is_exact() {
        let dir = std::env::temp_dir().join(format!("mapnet_ck_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("a.mnck");
        let d = sample();
        save(&p, &d).unwrap();
        let back: CheckpointData<f32> = load(&p).unwrap();
        assert_eq!(back.config_json, d.config_json);
        assert_eq!(back.latents, d.latents);
        assert_eq!(back.coeffs, d.coeffs);
        assert_eq!(back.opt_t, d.opt_t);
        assert_eq!(back.opt_m, d.opt_m);
        assert_eq!(back.opt_v, d.opt_v);
        assert_eq!(back.step, 99);
        assert_eq!(back.epoch, 3);
        assert_eq!(back.rng_states, d.rng_states);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = std::env::temp_dir().join(format!("mapnet_ck2_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("bad.mnck");
        std::fs::write(&p, b"XXXX\x01\x00\x00\x00").unwrap();
        assert!(matches!(load::<f32>(&p), Err(Error::Format(_))));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = std::env::temp_dir().join(format!("mapnet_ck3_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("t.mnck");
        save(&p, &sample()).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load::<f32>(&p), Err(Error::Format(_))));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn precision_mismatch_is_reported() {
        let dir = std::env::temp_dir().join(format!("mapnet_ck4_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("p.mnck");
        save(&p, &sample()).unwrap();
        let err = load::<f64>(&p).unwrap_err().to_string();
        assert!(err.contains("4-byte") && err.contains('8'), "{err}");
        std::fs::remove_dir_all(&dir).ok();
    }
}
