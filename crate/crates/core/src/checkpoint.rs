//! `AMPF` checkpoint container.
//!
//! All integers and floats are little-endian:
//!
//! ```text
//! magic      4 bytes  "AMPF"
//! version    u32      1
//! iteration  u64
//! lr         f64      policy learning rate at save time
//! config     u64 byte length, then UTF-8 JSON training config
//! policy     mlp block, u32 action dim, f64 log_std[dim], f64 offset[dim]
//! value      mlp block
//! obs norm   norm block
//! disc       mlp block, norm block, f64 gradient-penalty weight
//!
//! mlp block  u32 layer count L, u32 dims[L + 1], f64 params[...]
//! norm block u32 dim, f64 count, f64 clip, f64 mean[dim], f64 var[dim]
//! ```

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use crate::amp::Discriminator;
use crate::config::TrainConfig;
use crate::nn::{param_count, GaussianPolicy, Mlp, RunningNorm};

pub const MAGIC: &[u8; 4] = b"AMPF";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint not found: {0}")]
    NotFound(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not an AMPF checkpoint")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub iteration: u64,
    pub learning_rate: f64,
    pub config: TrainConfig,
    pub policy: GaussianPolicy,
    pub value: Mlp,
    pub obs_norm: RunningNorm,
    pub disc: Discriminator,
}

fn write_f64s(w: &mut impl Write, xs: &[f64]) -> std::io::Result<()> {
    xs.iter().try_for_each(|x| w.write_f64::<LE>(*x))
}

fn read_f64s(r: &mut impl Read, n: usize) -> std::io::Result<Vec<f64>> {
    (0..n).map(|_| r.read_f64::<LE>()).collect()
}

const MAX_DIM: usize = 1 << 24;

fn read_len(r: &mut impl Read, what: &str) -> Result<usize, CheckpointError> {
    let n = r.read_u32::<LE>()? as usize;
    if n > MAX_DIM {
        return Err(CheckpointError::Corrupt(format!("{what} of {n} is implausible")));
    }
    Ok(n)
}

fn write_mlp(w: &mut impl Write, mlp: &Mlp) -> std::io::Result<()> {
    w.write_u32::<LE>(mlp.num_layers() as u32)?;
    for &d in mlp.dims() {
        w.write_u32::<LE>(d as u32)?;
    }
    write_f64s(w, mlp.params())
}

fn read_mlp(r: &mut impl Read) -> Result<Mlp, CheckpointError> {
    let layers = read_len(r, "layer count")?;
    let dims = (0..=layers).map(|_| read_len(r, "layer width")).collect::<Result<Vec<_>, _>>()?;
    let params = read_f64s(r, param_count(&dims))?;
    Mlp::from_params(&dims, params).map_err(|e| CheckpointError::Corrupt(e.to_string()))
}

fn write_norm(w: &mut impl Write, n: &RunningNorm) -> std::io::Result<()> {
    w.write_u32::<LE>(n.dim() as u32)?;
    w.write_f64::<LE>(n.count)?;
    w.write_f64::<LE>(n.clip)?;
    write_f64s(w, &n.mean)?;
    write_f64s(w, &n.var)
}

fn read_norm(r: &mut impl Read) -> Result<RunningNorm, CheckpointError> {
    let dim = read_len(r, "normalizer width")?;
    let count = r.read_f64::<LE>()?;
    let clip = r.read_f64::<LE>()?;
    let mean = read_f64s(r, dim)?;
    let var = read_f64s(r, dim)?;
    Ok(RunningNorm { mean, var, count, clip, frozen: false })
}

impl Checkpoint {
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LE>(VERSION)?;
        w.write_u64::<LE>(self.iteration)?;
        w.write_f64::<LE>(self.learning_rate)?;
        let config = serde_json::to_vec(&self.config).expect("config serializes");
        w.write_u64::<LE>(config.len() as u64)?;
        w.write_all(&config)?;
        write_mlp(w, &self.policy.mean)?;
        w.write_u32::<LE>(self.policy.act_dim() as u32)?;
        write_f64s(w, &self.policy.log_std)?;
        write_f64s(w, &self.policy.offset)?;
        write_mlp(w, &self.value)?;
        write_norm(w, &self.obs_norm)?;
        write_mlp(w, &self.disc.net)?;
        write_norm(w, &self.disc.normalizer)?;
        w.write_f64::<LE>(self.disc.gp_weight)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| CheckpointError::BadMagic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.read_u32::<LE>()?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let iteration = r.read_u64::<LE>()?;
        let learning_rate = r.read_f64::<LE>()?;
        let len = r.read_u64::<LE>()? as usize;
        if len > MAX_DIM {
            return Err(CheckpointError::Corrupt("config block too large".into()));
        }
        let mut config = vec![0u8; len];
        r.read_exact(&mut config)?;
        let config: TrainConfig = serde_json::from_slice(&config).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;

        let mean = read_mlp(r)?;
        let act_dim = read_len(r, "action dimension")?;
        if act_dim != mean.output_dim() {
            return Err(CheckpointError::Corrupt(format!("action dimension {act_dim} does not match policy output {}", mean.output_dim())));
        }
        let log_std = read_f64s(r, act_dim)?;
        let offset = read_f64s(r, act_dim)?;
        let value = read_mlp(r)?;
        let obs_norm = read_norm(r)?;
        let net = read_mlp(r)?;
        let normalizer = read_norm(r)?;
        let gp_weight = r.read_f64::<LE>()?;
        Ok(Checkpoint {
            iteration,
            learning_rate,
            config,
            policy: GaussianPolicy { mean, log_std, offset },
            value,
            obs_norm,
            disc: Discriminator { net, normalizer, gp_weight },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => CheckpointError::NotFound(path.display().to_string()),
            _ => CheckpointError::Io(e),
        })?;
        Self::read_from(&mut std::io::BufReader::new(file))
    }
}

pub fn checkpoint_name(iteration: u64) -> String {
    format!("ckpt_{iteration}.ampf")
}
