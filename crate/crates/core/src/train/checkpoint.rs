//! Binary checkpoints.
//!
//! ```text
//! SPCK1                      5 bytes
//! version                    1 byte
//! header length              u64 LE
//! header                     JSON (model spec, config, step, RNG state,
//!                            normalization, optimizer step count)
//! record count               u64 LE
//! records, each:
//!   name length              u64 LE
//!   name                     UTF-8
//!   rank                     u64 LE
//!   dims                     rank x u64 LE
//!   values                   f32 LE
//! ```
//!
//! Tensor names are prefixed `param/`, `buffer/`, `adam_m/` or `adam_v/`.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::nn::Slot;
use crate::tensor::{Shape4, Tensor4};

use super::data::Normalization;
use super::optim::{Adam, Moments};
use super::trainer::TrainConfig;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"SPCK1";
pub const CHECKPOINT_VERSION: u8 = 1;

/// Exact position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// 32-byte seed as hex.
    pub seed: String,
    pub stream: u64,
    /// 128-bit word position as decimal text.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::format("checkpoint", "unreadable RNG state");
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    config: TrainConfig,
    step: u64,
    rng: RngState,
    normalization: Normalization,
    adam_t: u64,
}

/// Everything needed to predict with a model or resume its training.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub optimizer: Adam<f32>,
    pub normalization: Normalization,
    pub config: TrainConfig,
    pub step: u64,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn band_names(&self) -> &[String] {
        &self.normalization.bands
    }

    pub fn write_to(&self, out: impl Write) -> Result<()> {
        let mut out = BufWriter::new(out);
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&[CHECKPOINT_VERSION])?;
        let header = Header {
            spec: *self.model.spec(),
            config: self.config.clone(),
            step: self.step,
            rng: self.rng.clone(),
            normalization: self.normalization.clone(),
            adam_t: self.optimizer.t,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        out.write_all(&(json.len() as u64).to_le_bytes())?;
        out.write_all(&json)?;

        let mut records: Vec<(String, Tensor4<f32>)> = Vec::new();
        self.model.visit_ref(&mut |name, t, slot| {
            let prefix = if slot == Slot::Param { "param" } else { "buffer" };
            records.push((format!("{prefix}/{name}"), t.clone()));
        });
        for mo in &self.optimizer.moments {
            records.push((format!("adam_m/{}", mo.name), mo.m.clone()));
            records.push((format!("adam_v/{}", mo.name), mo.v.clone()));
        }
        out.write_all(&(records.len() as u64).to_le_bytes())?;
        for (name, t) in &records {
            write_record(&mut out, name, t)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_from(input: impl Read) -> Result<Self> {
        let mut r = BufReader::new(input);
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)
            .map_err(|_| Error::format("checkpoint", "truncated magic"))?;
        if &magic[..5] != CHECKPOINT_MAGIC {
            return Err(Error::format("checkpoint", "bad magic, expected SPCK1"));
        }
        if magic[5] != CHECKPOINT_VERSION {
            return Err(Error::format(
                "checkpoint",
                format!("unsupported version {}", magic[5]),
            ));
        }
        let len = read_u64(&mut r)? as usize;
        let json = read_bytes(&mut r, len)?;
        let header: Header = serde_json::from_slice(&json)
            .map_err(|e| Error::format("checkpoint", format!("header: {e}")))?;
        let count = read_u64(&mut r)?;
        let mut records = Vec::new();
        for _ in 0..count {
            records.push(read_record(&mut r)?);
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }

        let mut model = Model::<f32>::new(header.spec, 0)?;
        let mut it = records.into_iter().peekable();
        let mut err = None;
        model.visit(&mut |name, t, slot| {
            if err.is_some() {
                return;
            }
            let prefix = if slot == Slot::Param { "param" } else { "buffer" };
            let want = format!("{prefix}/{name}");
            match it.next() {
                Some((n, v)) if n == want && v.shape() == t.shape() => *t = v,
                Some((n, v)) => {
                    err = Some(Error::format(
                        "checkpoint",
                        format!("expected {want} {}, found {n} {}", t.shape(), v.shape()),
                    ))
                }
                None => err = Some(Error::format("checkpoint", format!("missing tensor {want}"))),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        let mut optimizer = Adam::new(header.config.adam());
        optimizer.t = header.adam_t;
        while let Some((name, m)) = it.next() {
            let base = name
                .strip_prefix("adam_m/")
                .ok_or_else(|| Error::format("checkpoint", format!("unexpected tensor {name}")))?
                .to_string();
            let (vname, v) = it
                .next()
                .ok_or_else(|| Error::format("checkpoint", format!("missing adam_v/{base}")))?;
            if vname != format!("adam_v/{base}") || v.shape() != m.shape() {
                return Err(Error::format("checkpoint", format!("unpaired moment {vname}")));
            }
            optimizer.moments.push(Moments { name: base, m, v });
        }
        Ok(Self {
            model,
            optimizer,
            normalization: header.normalization,
            config: header.config,
            step: header.step,
            rng: header.rng,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(fs::File::open(path)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        buf
    }
}

fn write_record(out: &mut impl Write, name: &str, t: &Tensor4<f32>) -> Result<()> {
    out.write_all(&(name.len() as u64).to_le_bytes())?;
    out.write_all(name.as_bytes())?;
    let dims = t.shape().dims();
    out.write_all(&(dims.len() as u64).to_le_bytes())?;
    for d in dims {
        out.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut bytes = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&bytes)?;
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| Error::format("checkpoint", "truncated length field"))?;
    Ok(u64::from_le_bytes(b))
}

fn read_bytes(r: &mut impl Read, len: usize) -> Result<Vec<u8>> {
    // cap the up-front allocation so a corrupt length cannot exhaust memory
    let mut buf = Vec::with_capacity(len.min(1 << 20));
    r.take(len as u64).read_to_end(&mut buf)?;
    if buf.len() != len {
        return Err(Error::format("checkpoint", "truncated record"));
    }
    Ok(buf)
}

fn read_record(r: &mut impl Read) -> Result<(String, Tensor4<f32>)> {
    let name_len = read_u64(r)? as usize;
    let name = String::from_utf8(read_bytes(r, name_len)?)
        .map_err(|_| Error::format("checkpoint", "tensor name is not UTF-8"))?;
    let rank = read_u64(r)? as usize;
    if !(1..=4).contains(&rank) {
        return Err(Error::format("checkpoint", format!("tensor {name} has rank {rank}")));
    }
    let mut dims = [1usize; 4];
    for i in 0..rank {
        dims[4 - rank + i] = read_u64(r)? as usize;
    }
    let shape = Shape4::new(dims[0], dims[1], dims[2], dims[3]);
    let n = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::format("checkpoint", format!("tensor {name} too large")))?;
    let bytes = read_bytes(r, n)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((name, Tensor4::from_vec(shape, data)?))
}
