//! Binary checkpoint container.
//!
//! Layout (all integers u32 little-endian, floats f64 little-endian,
//! strings as u32 byte length + UTF-8):
//!
//! ```text
//! magic "STSENSCK" | version u32
//! config: string of key=value lines
//! scaler: u8 present flag, then fitted_on string and three groups
//!         (observed, statics, targets), each u32 count × (name, min, max)
//! params: u32 count × (name, rows u32, cols u32, rows·cols f64)
//! SHA-256 of every preceding byte (32 bytes)
//! ```
//!
//! Parameters are written in registration order, which is fixed by the
//! network layout.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use super::params::ParamStore;
use super::tft::Tft;
use crate::autodiff::Matrix;
use crate::data::{MinMax, ScalerState};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"STSENSCK";
pub const FORMAT_VERSION: u32 = 1;

/// Everything restored from a checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Tft,
    pub scaler: Option<ScalerState>,
}

fn config_text(c: &ModelConfig) -> String {
    format!(
        "d_model={}\nheads={}\ndropout={}\npast_len={}\nhorizon={}\nstatic_features={}\nobserved_features={}\ntarget_features={}\nseed={}\n",
        c.d_model,
        c.heads,
        c.dropout,
        c.past_len,
        c.horizon,
        c.static_features,
        c.observed_features,
        c.target_features,
        c.seed
    )
}

fn parse_config(text: &str) -> Result<ModelConfig> {
    let mut c = ModelConfig::default();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("bad config line `{line}`")))?;
        let bad = || Error::Checkpoint(format!("bad value for `{k}`: `{v}`"));
        let int = || v.parse::<usize>().map_err(|_| bad());
        match k {
            "d_model" => c.d_model = int()?,
            "heads" => c.heads = int()?,
            "dropout" => c.dropout = v.parse().map_err(|_| bad())?,
            "past_len" => c.past_len = int()?,
            "horizon" => c.horizon = int()?,
            "static_features" => c.static_features = int()?,
            "observed_features" => c.observed_features = int()?,
            "target_features" => c.target_features = int()?,
            "seed" => c.seed = v.parse().map_err(|_| bad())?,
            _ => return Err(Error::Checkpoint(format!("unknown config key `{k}`"))),
        }
    }
    Ok(c)
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8 string".into()))
    }
}

/// Serializes a model and optional scaler to bytes.
pub fn encode_checkpoint(model: &Tft, scaler: Option<&ScalerState>) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION as usize);
    w.str(&config_text(model.config()));
    match scaler {
        None => w.0.push(0),
        Some(s) => {
            w.0.push(1);
            w.str(&s.fitted_on);
            for group in [&s.observed, &s.statics, &s.targets] {
                w.u32(group.len());
                for (name, mm) in group {
                    w.str(name);
                    w.f64(mm.min);
                    w.f64(mm.max);
                }
            }
        }
    }
    let params = model.params();
    w.u32(params.len());
    for (name, m) in params.names().iter().zip(params.values()) {
        w.str(name);
        w.u32(m.rows());
        w.u32(m.cols());
        for &v in m.data() {
            w.f64(v);
        }
    }
    let digest = Sha256::digest(&w.0);
    w.0.extend_from_slice(&digest);
    w.0
}

/// Parses bytes produced by [`encode_checkpoint`].
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint(
            "not a checkpoint file (bad magic or too short)".into(),
        ));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint(
            "checksum mismatch: file is truncated or corrupted".into(),
        ));
    }
    let mut r = Reader { buf: body, pos: 12 };
    let config = parse_config(&r.str()?)?;
    let scaler = match r.u8()? {
        0 => None,
        1 => {
            let fitted_on = r.str()?;
            let mut groups = Vec::with_capacity(3);
            for _ in 0..3 {
                let n = r.u32()?;
                let mut g = Vec::with_capacity(n);
                for _ in 0..n {
                    let name = r.str()?;
                    let (min, max) = (r.f64()?, r.f64()?);
                    g.push((name, MinMax { min, max }));
                }
                groups.push(g);
            }
            let targets = groups.pop().unwrap();
            let statics = groups.pop().unwrap();
            let observed = groups.pop().unwrap();
            Some(ScalerState {
                observed,
                statics,
                targets,
                fitted_on,
            })
        }
        f => return Err(Error::Checkpoint(format!("bad scaler flag {f}"))),
    };
    let count = r.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name = r.str()?;
        let (rows, cols) = (r.u32()?, r.u32()?);
        let raw = r.take(rows * cols * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push(name, Matrix::from_vec(rows, cols, data));
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after parameters".into()));
    }
    let model = Tft::from_params(config, params).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(Checkpoint { model, scaler })
}

pub fn save_checkpoint(path: &Path, model: &Tft, scaler: Option<&ScalerState>) -> Result<()> {
    fs::write(path, encode_checkpoint(model, scaler)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tiny_panel;
    use crate::data::{fit_scaler, make_windows, WindowSpec};
    use crate::model::Mode;

    fn setup() -> (Tft, ScalerState, crate::data::WindowBatch) {
        let panel = tiny_panel(2, 10);
        let scaler = fit_scaler(&panel, panel.dates[0], panel.dates[9]).unwrap();
        let batch = make_windows(&panel, &WindowSpec::new(3, 2).unwrap()).unwrap();
        let cfg = ModelConfig::for_batch(&batch, 8, 2, 0.1, 4);
        (Tft::new(cfg).unwrap(), scaler, batch)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (model, scaler, batch) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &model, Some(&scaler)).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.model.params(), model.params());
        assert_eq!(back.model.config(), model.config());
        assert_eq!(back.scaler.as_ref(), Some(&scaler));
        let a = model.forward(&batch, Mode::Eval, 0).unwrap();
        let b = back.model.forward(&batch, Mode::Eval, 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn corruption_and_version_are_detected() {
        let (model, _, _) = setup();
        let bytes = encode_checkpoint(&model, None);
        for cut in [0, 5, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(decode_checkpoint(&bytes[..cut]).is_err());
        }
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        let err = decode_checkpoint(&flipped).unwrap_err().to_string();
        assert!(err.contains("checksum"), "{err}");
        let mut v2 = bytes.clone();
        v2[8] = 2;
        let err = decode_checkpoint(&v2).unwrap_err().to_string();
        assert!(err.contains("version 2"), "{err}");
    }

    #[test]
    fn stored_config_wins() {
        let (model, _, _) = setup();
        let back = decode_checkpoint(&encode_checkpoint(&model, None)).unwrap();
        assert_eq!(back.model.config().d_model, 8);
        assert!(back.scaler.is_none());
    }
}
