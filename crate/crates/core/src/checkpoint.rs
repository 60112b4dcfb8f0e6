//! Binary checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic   "ACTFLOW\0"
//! version u32
//! section* where section = tag[4] len:u32 payload[len] crc32(payload):u32
//! ```
//!
//! Sections, in order: `CONF` (config as `key = value` text), `ACTS` (JSON
//! label list), `TOKS` (JSON tokens and OOV flags), `CAND` (JSON candidate
//! list), one `PARM` per tensor (`name_len:u16 name rows:u32 cols:u32
//! f32[rows*cols]`), and an empty `END\0`. Parameters are stored as `f32`.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{CandidateSet, Vocabularies};
use crate::encoders::{ActVocabulary, TokenVocabulary};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numerics::{ParamSet, Rng, Tensor};
use crate::trainer::{TrainConfig, TrainedModel};

pub const MAGIC: &[u8; 8] = b"ACTFLOW\0";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TokenSection {
    tokens: Vec<String>,
    oov: Vec<bool>,
}

fn section<W: Write>(w: &mut W, tag: &[u8; 4], payload: &[u8]) -> Result<()> {
    let len = u32::try_from(payload.len()).map_err(|_| Error::invalid("checkpoint section exceeds 4 GiB"))?;
    w.write_all(tag)?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(payload)?;
    w.write_all(&crc32fast::hash(payload).to_le_bytes())?;
    Ok(())
}

fn json<T: Serialize>(value: &T) -> Vec<u8> {
    serde_json::to_vec(value).expect("checkpoint metadata serializes")
}

fn tensor_payload(name: &str, t: &Tensor) -> Result<Vec<u8>> {
    let name_len = u16::try_from(name.len()).map_err(|_| Error::invalid("parameter name too long"))?;
    let mut p = Vec::with_capacity(2 + name.len() + 8 + 4 * t.len());
    p.extend_from_slice(&name_len.to_le_bytes());
    p.extend_from_slice(name.as_bytes());
    p.extend_from_slice(&(t.rows() as u32).to_le_bytes());
    p.extend_from_slice(&(t.cols() as u32).to_le_bytes());
    for &v in t.as_slice() {
        p.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(p)
}

pub fn write_checkpoint<W: Write>(model: &TrainedModel, writer: W) -> Result<()> {
    let mut w = BufWriter::new(writer);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    section(&mut w, b"CONF", model.config.to_kv_text().as_bytes())?;
    section(&mut w, b"ACTS", &json(&model.vocab.acts))?;
    let toks = TokenSection {
        tokens: model.vocab.tokens.tokens().to_vec(),
        oov: model.vocab.tokens.oov_flags().to_vec(),
    };
    section(&mut w, b"TOKS", &json(&toks))?;
    section(&mut w, b"CAND", &json(&model.vocab.candidates.utterances()))?;
    for (name, t) in model.params.named_tensors() {
        section(&mut w, b"PARM", &tensor_payload(&name, t)?)?;
    }
    section(&mut w, b"END\0", &[])?;
    w.flush()?;
    Ok(())
}

pub fn save_checkpoint(model: &TrainedModel, path: impl AsRef<Path>) -> Result<()> {
    write_checkpoint(model, File::create(path)?)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::CorruptCheckpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn section(&mut self, expected: &[u8; 4]) -> Result<&'a [u8]> {
        let tag = self.take(4)?;
        if tag != expected {
            return Err(Error::CorruptCheckpoint(format!(
                "expected section {:?}, found {:?}",
                String::from_utf8_lossy(expected),
                String::from_utf8_lossy(tag)
            )));
        }
        let len = self.u32()? as usize;
        let payload = self.take(len)?;
        let crc = self.u32()?;
        if crc32fast::hash(payload) != crc {
            return Err(Error::CorruptCheckpoint(format!(
                "checksum mismatch in section {:?}",
                String::from_utf8_lossy(expected)
            )));
        }
        Ok(payload)
    }
}

fn meta<'a, T: Deserialize<'a>>(payload: &'a [u8], what: &str) -> Result<T> {
    serde_json::from_slice(payload).map_err(|e| Error::CorruptCheckpoint(format!("{what}: {e}")))
}

fn read_tensor(payload: &[u8]) -> Result<(String, usize, usize, Vec<f64>)> {
    let mut c = Cursor { buf: payload, pos: 0 };
    let name_len = c.u16()? as usize;
    let name = String::from_utf8(c.take(name_len)?.to_vec())
        .map_err(|_| Error::CorruptCheckpoint("parameter name is not UTF-8".into()))?;
    let rows = c.u32()? as usize;
    let cols = c.u32()? as usize;
    let raw = c.take(rows * cols * 4)?;
    if c.pos != payload.len() {
        return Err(Error::CorruptCheckpoint(format!("trailing bytes in parameter {name}")));
    }
    let values = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok((name, rows, cols, values))
}

pub fn read_checkpoint<R: Read>(mut reader: R) -> Result<TrainedModel> {
    let mut buf = Vec::new();
    reader.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(MAGIC.len()).map_err(|_| Error::CorruptCheckpoint("missing header".into()))? != MAGIC {
        return Err(Error::CorruptCheckpoint("not a checkpoint file".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: VERSION,
        });
    }
    let conf = std::str::from_utf8(c.section(b"CONF")?)
        .map_err(|_| Error::CorruptCheckpoint("config is not UTF-8".into()))?;
    let config = TrainConfig::from_kv_text(conf).map_err(|e| Error::CorruptCheckpoint(format!("config: {e}")))?;
    let acts: ActVocabulary = meta(c.section(b"ACTS")?, "act vocabulary")?;
    let toks: TokenSection = meta(c.section(b"TOKS")?, "token vocabulary")?;
    let tokens =
        TokenVocabulary::from_parts(toks.tokens, toks.oov).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    let cand: Vec<String> = meta(c.section(b"CAND")?, "candidates")?;
    let vocab = Vocabularies {
        acts,
        tokens,
        candidates: CandidateSet::from_utterances(cand.iter().map(String::as_str)),
    };
    if vocab.candidates.len() != cand.len() {
        return Err(Error::CorruptCheckpoint("duplicate candidate responses".into()));
    }

    let mut params = ModelParams::init(config.dims(&vocab), &config.variant_config(), None, &mut Rng::seed(0))
        .map_err(|e| Error::CorruptCheckpoint(format!("model shape: {e}")))?;
    let expected: Vec<(String, (usize, usize))> =
        params.named_tensors().into_iter().map(|(n, t)| (n, t.shape())).collect();
    for (slot, (want_name, want_shape)) in params.tensors_mut().into_iter().zip(expected) {
        let (name, rows, cols, values) = read_tensor(c.section(b"PARM")?)?;
        if name != want_name || (rows, cols) != want_shape {
            return Err(Error::CorruptCheckpoint(format!(
                "parameter {name} {rows}x{cols} where {want_name} {}x{} was expected",
                want_shape.0, want_shape.1
            )));
        }
        *slot = Tensor::new(rows, cols, values).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    }
    c.section(b"END\0")?;
    if c.pos != buf.len() {
        return Err(Error::CorruptCheckpoint("trailing bytes after end marker".into()));
    }
    Ok(TrainedModel {
        config,
        vocab,
        params,
        history: Vec::new(),
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainedModel> {
    read_checkpoint(File::open(path)?)
}
