//! Checkpoint files: a text header with the architecture, then every named
//! tensor as raw little-endian `f32`.
//!
//! ```text
//! bdlm-ckpt v1
//! d_model=128
//! ...
//! languages=en,zh
//! seed=7
//! end
//! <name_len u32><name><rank u32><dims u32...><f32 data> per tensor
//! ```

use std::io::{self, BufRead, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::params::ModelParams;
use super::tensor::Tensor;
use super::{ModelConfig, ModelError};

const MAGIC: &str = "bdlm-ckpt v1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic line)")]
    BadMagic,
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error("tensor `{name}`: {msg}")]
    Tensor { name: String, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub languages: Vec<String>,
    pub seed: u64,
    pub params: ModelParams<f32>,
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{MAGIC}")?;
        w.write_all(self.config.to_kv().as_bytes())?;
        writeln!(w, "languages={}", self.languages.join(","))?;
        writeln!(w, "seed={}", self.seed)?;
        writeln!(w, "end")?;
        for (name, t) in self.params.named() {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
            for &d in &t.shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.len() * 4);
            for x in &t.data {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.flush()
    }

    pub fn read_from<R: BufRead>(mut r: R) -> Result<Self, CheckpointError> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end() != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut config = ModelConfig::new(0, 0);
        let mut languages = Vec::new();
        let mut seed = 0;
        loop {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(CheckpointError::Header("missing `end` line".into()));
            }
            let l = line.trim_end();
            if l == "end" {
                break;
            }
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| CheckpointError::Header(format!("expected key=value, got `{l}`")))?;
            match k {
                "languages" => languages = v.split(',').filter(|s| !s.is_empty()).map(String::from).collect(),
                "seed" => {
                    seed = v
                        .parse()
                        .map_err(|_| CheckpointError::Header(format!("bad seed `{v}`")))?
                }
                _ => {
                    if !config.set(k, v).map_err(CheckpointError::Header)? {
                        return Err(CheckpointError::Header(format!("unknown key `{k}`")));
                    }
                }
            }
        }
        config.validate()?;
        let mut params = ModelParams::<f32>::zeros(&config);
        let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
        for (want, t) in names.iter().zip(params.tensors_mut()) {
            read_tensor(&mut r, want, t)?;
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(CheckpointError::Header("trailing bytes after last tensor".into()));
        }
        Ok(Checkpoint {
            config,
            languages,
            seed,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let f = std::fs::File::open(path)?;
        Self::read_from(io::BufReader::new(f))
    }
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_tensor<R: Read>(r: &mut R, want: &str, t: &mut Tensor<f32>) -> Result<(), CheckpointError> {
    let err = |msg: String| CheckpointError::Tensor {
        name: want.to_string(),
        msg,
    };
    let n = read_u32(r)? as usize;
    if n > 256 {
        return Err(err(format!("name length {n} too large")));
    }
    let mut name = vec![0u8; n];
    r.read_exact(&mut name)?;
    if name != want.as_bytes() {
        return Err(err(format!("found `{}` instead", String::from_utf8_lossy(&name))));
    }
    let rank = read_u32(r)? as usize;
    if rank > 4 {
        return Err(err(format!("rank {rank} too large")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r)? as usize);
    }
    if shape != t.shape {
        return Err(err(format!("shape {shape:?}, expected {:?}", t.shape)));
    }
    let mut buf = vec![0u8; t.len() * 4];
    r.read_exact(&mut buf)?;
    for (x, b) in t.data.iter_mut().zip(buf.chunks_exact(4)) {
        *x = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
    }
    Ok(())
}
