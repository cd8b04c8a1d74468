//! Binary shard format.
//!
//! ```text
//! bdlm-shard v1 kind=<kind> langs=<l1,l2,...> seed=<u64> count=<n>\n
//! record*   where record = u32 LE body length, body
//! body    = objective u8, then four arrays (enc_tokens, enc_types,
//!           dec_soft_pos, target_tokens), each a LEB128 varint length
//!           followed by that many u32 LE values
//! ```
//!
//! Decoder input tokens, decoder types and hard positions are not stored;
//! they are rebuilt from the targets on load.

use std::io::{Read, Write};

use thiserror::Error;

use super::{Objective, PretrainSample};
use crate::dictionary::InfoKind;
use crate::types::TypeMap;

const SHARD_MAGIC: &str = "bdlm-shard v1";

#[derive(Debug, Error)]
pub enum ShardError {
    #[error("bad shard header: {0}")]
    Header(String),
    #[error("record {index}: {msg}")]
    Record { index: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardHeader {
    pub kind: InfoKind,
    pub languages: Vec<String>,
    pub seed: u64,
    pub count: usize,
}

impl ShardHeader {
    pub fn types(&self) -> TypeMap {
        TypeMap::new(self.languages.iter().cloned())
    }

    fn line(&self) -> String {
        format!(
            "{SHARD_MAGIC} kind={} langs={} seed={} count={}\n",
            self.kind,
            self.languages.join(","),
            self.seed,
            self.count
        )
    }

    fn parse(line: &str) -> Result<Self, ShardError> {
        let bad = |m: &str| ShardError::Header(m.to_string());
        let rest = line
            .strip_prefix(SHARD_MAGIC)
            .ok_or_else(|| bad("missing `bdlm-shard v1`"))?;
        let (mut kind, mut langs, mut seed, mut count) = (None, None, None, None);
        for field in rest.split_whitespace() {
            let (k, v) = field.split_once('=').ok_or_else(|| bad(field))?;
            match k {
                "kind" => kind = Some(v.parse::<InfoKind>().map_err(|e| bad(&e))?),
                "langs" => langs = Some(v.split(',').map(str::to_string).collect()),
                "seed" => seed = Some(v.parse().map_err(|_| bad("seed"))?),
                "count" => count = Some(v.parse().map_err(|_| bad("count"))?),
                _ => return Err(bad(k)),
            }
        }
        Ok(ShardHeader {
            kind: kind.ok_or_else(|| bad("kind"))?,
            languages: langs.ok_or_else(|| bad("langs"))?,
            seed: seed.ok_or_else(|| bad("seed"))?,
            count: count.ok_or_else(|| bad("count"))?,
        })
    }
}

fn put_varint(buf: &mut Vec<u8>, mut v: u64) {
    loop {
        let byte = (v & 0x7f) as u8;
        v >>= 7;
        if v == 0 {
            buf.push(byte);
            return;
        }
        buf.push(byte | 0x80);
    }
}

fn get_varint(buf: &[u8], pos: &mut usize) -> Option<u64> {
    let mut v = 0u64;
    for shift in (0..64).step_by(7) {
        let b = *buf.get(*pos)?;
        *pos += 1;
        v |= u64::from(b & 0x7f) << shift;
        if b & 0x80 == 0 {
            return Some(v);
        }
    }
    None
}

fn put_array(buf: &mut Vec<u8>, xs: &[u32]) {
    put_varint(buf, xs.len() as u64);
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

fn get_array(buf: &[u8], pos: &mut usize) -> Option<Vec<u32>> {
    let n = get_varint(buf, pos)? as usize;
    let bytes = buf.get(*pos..pos.checked_add(n.checked_mul(4)?)?)?;
    *pos += n * 4;
    Some(
        bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
    )
}

pub fn write_shard<W: Write>(mut w: W, header: &ShardHeader, samples: &[PretrainSample]) -> Result<(), ShardError> {
    let header = ShardHeader {
        count: samples.len(),
        ..header.clone()
    };
    w.write_all(header.line().as_bytes())?;
    let mut body = Vec::new();
    for s in samples {
        body.clear();
        body.push(s.objective as u8);
        put_array(&mut body, &s.enc_tokens);
        put_array(&mut body, &s.enc_types);
        put_array(&mut body, &s.dec_soft_pos);
        put_array(&mut body, &s.target_tokens);
        w.write_all(&(body.len() as u32).to_le_bytes())?;
        w.write_all(&body)?;
    }
    Ok(())
}

pub fn read_shard<R: Read>(mut r: R) -> Result<(ShardHeader, Vec<PretrainSample>), ShardError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| ShardError::Header("no header line".into()))?;
    let line = std::str::from_utf8(&bytes[..nl]).map_err(|_| ShardError::Header("header is not UTF-8".into()))?;
    let header = ShardHeader::parse(line)?;
    let types = header.types();
    let mut pos = nl + 1;
    let mut samples = Vec::with_capacity(header.count);
    while pos < bytes.len() {
        let index = samples.len();
        let err = |msg: &str| ShardError::Record {
            index,
            msg: msg.to_string(),
        };
        let len_bytes = bytes.get(pos..pos + 4).ok_or_else(|| err("truncated length"))?;
        let len = u32::from_le_bytes(len_bytes.try_into().unwrap()) as usize;
        pos += 4;
        let body = bytes.get(pos..pos + len).ok_or_else(|| err("truncated body"))?;
        pos += len;
        let objective = body
            .first()
            .and_then(|&b| Objective::from_byte(b))
            .ok_or_else(|| err("bad objective"))?;
        let mut p = 1;
        let mut arrays = Vec::with_capacity(4);
        for _ in 0..4 {
            arrays.push(get_array(body, &mut p).ok_or_else(|| err("truncated array"))?);
        }
        if p != body.len() {
            return Err(err("trailing bytes"));
        }
        let target_tokens = arrays.pop().unwrap();
        let dec_soft_pos = arrays.pop().unwrap();
        let enc_types = arrays.pop().unwrap();
        let enc_tokens = arrays.pop().unwrap();
        let lang_type = *enc_types.first().ok_or_else(|| err("empty encoder"))?;
        let target_type = match objective {
            Objective::Mlm | Objective::Rlm => lang_type,
            Objective::Iplm => types
                .info(header.kind, lang_type)
                .ok_or_else(|| err("no type for payload kind"))?,
        };
        samples.push(PretrainSample::assemble(
            objective,
            enc_tokens,
            enc_types,
            dec_soft_pos,
            target_tokens,
            target_type,
        ));
    }
    if samples.len() != header.count {
        return Err(ShardError::Header(format!(
            "header declares {} records, found {}",
            header.count,
            samples.len()
        )));
    }
    Ok((header, samples))
}
