//! Checkpoint container: a small JSON metadata block followed by named
//! little-endian f32 arrays. Round-trips are bit-exact, which is what makes
//! resumed runs reproduce uninterrupted ones.

use crate::config::{ModelConfig, Stage, TrainConfig};
use crate::error::{DehazeError, Result};
use crate::nn::NamedParams;
use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"DHZCKPT\x01";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RngState {
    pub seed: Vec<u8>,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed().to_vec(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let seed: [u8; 32] = self
            .seed
            .as_slice()
            .try_into()
            .map_err(|_| DehazeError::Checkpoint("rng seed must be 32 bytes".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_word_pos(self.word_pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CkptMeta {
    pub format_version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub stage: Stage,
    pub step: usize,
    pub rng: RngState,
    /// Adam timestep, shared by all parameter groups.
    pub adam_t: u64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CkptMeta,
    /// name -> (shape, row-major data)
    pub arrays: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn new(meta: CkptMeta) -> Self {
        Checkpoint {
            meta,
            arrays: BTreeMap::new(),
        }
    }

    pub fn insert_params(&mut self, params: &NamedParams<f32>) {
        for (name, t) in params {
            self.insert_array(name, &t.value());
        }
    }

    pub fn insert_array(&mut self, name: &str, value: &ArrayD<f32>) {
        let shape = value.shape().to_vec();
        let data: Vec<f32> = value.iter().copied().collect();
        self.arrays.insert(name.to_string(), (shape, data));
    }

    pub fn get_array(&self, name: &str) -> Result<ArrayD<f32>> {
        let (shape, data) = self
            .arrays
            .get(name)
            .ok_or_else(|| DehazeError::Checkpoint(format!("missing array '{name}'")))?;
        ArrayD::from_shape_vec(IxDyn(shape), data.clone())
            .map_err(|e| DehazeError::Checkpoint(format!("array '{name}': {e}")))
    }

    /// Load every named parameter from the checkpoint, failing on a missing
    /// name or a shape mismatch.
    pub fn restore_params(&self, params: &NamedParams<f32>) -> Result<()> {
        for (name, t) in params {
            let arr = self.get_array(name)?;
            if arr.shape() != t.value().shape() {
                return Err(DehazeError::Checkpoint(format!(
                    "shape mismatch for '{name}': checkpoint {:?}, model {:?}",
                    arr.shape(),
                    t.value().shape()
                )));
            }
            t.set_value(arr);
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(MAGIC)?;
        f.write_all(&(meta.len() as u64).to_le_bytes())?;
        f.write_all(&meta)?;
        f.write_all(&(self.arrays.len() as u64).to_le_bytes())?;
        for (name, (shape, data)) in &self.arrays {
            let nb = name.as_bytes();
            f.write_all(&(nb.len() as u64).to_le_bytes())?;
            f.write_all(nb)?;
            f.write_all(&(shape.len() as u64).to_le_bytes())?;
            for &d in shape {
                f.write_all(&(d as u64).to_le_bytes())?;
            }
            f.write_all(&(data.len() as u64).to_le_bytes())?;
            for &v in data {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(DehazeError::Checkpoint("bad magic".into()));
        }
        let meta_len = read_u64(&mut f)? as usize;
        let mut meta_buf = vec![0u8; meta_len];
        f.read_exact(&mut meta_buf)?;
        let meta: CkptMeta = serde_json::from_slice(&meta_buf)?;
        if meta.format_version != 1 {
            return Err(DehazeError::Checkpoint(format!(
                "unsupported format version {}",
                meta.format_version
            )));
        }
        let count = read_u64(&mut f)? as usize;
        let mut arrays = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u64(&mut f)? as usize;
            let mut nb = vec![0u8; name_len];
            f.read_exact(&mut nb)?;
            let name = String::from_utf8(nb)
                .map_err(|_| DehazeError::Checkpoint("non-utf8 array name".into()))?;
            let ndim = read_u64(&mut f)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u64(&mut f)? as usize);
            }
            let numel = read_u64(&mut f)? as usize;
            if numel != shape.iter().product::<usize>() {
                return Err(DehazeError::Checkpoint(format!(
                    "array '{name}': element count disagrees with shape"
                )));
            }
            let mut raw = vec![0u8; numel * 4];
            f.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            arrays.insert(name, (shape, data));
        }
        Ok(Checkpoint { meta, arrays })
    }
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// SHA-256 hex digest over a parameter group's names, shapes, and raw f32
/// bytes, for asserting that frozen weights stayed frozen.
pub fn params_checksum(params: &NamedParams<f32>) -> String {
    let mut h = Sha256::new();
    for (name, t) in params {
        h.update(name.as_bytes());
        let v = t.value();
        for &d in v.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for &x in v.iter() {
            h.update(x.to_le_bytes());
        }
    }
    format!("{:x}", h.finalize())
}
