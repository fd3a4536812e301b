//! Binary checkpoint format.
//!
//! Layout: 4-byte magic, version, length-prefixed canonical config text,
//! named tensor records, then a fixed 48-byte RNG tail (32-byte seed plus
//! 16-byte stream position). Records carry no count; parsing consumes them
//! until exactly the tail remains. All integers are little-endian, all
//! payloads are f64. A checkpoint serializes byte-identically after a
//! load/save round trip.

use crate::config::Config;
use crate::error::{Error, Result};
use crate::models::ModelBundle;
use crate::tensor::Tensor;
use crate::train::PretrainResult;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"HZG1";
pub const VERSION: u32 = 1;
/// Seed plus stream position.
const RNG_TAIL: usize = 32 + 16;

/// Training progress stored alongside the parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainMeta {
    pub epoch: usize,
    pub loss_graph: f64,
    pub loss_node: f64,
    pub loss_total: f64,
}

impl TrainMeta {
    pub fn start() -> Self {
        TrainMeta {
            epoch: 0,
            loss_graph: f64::NAN,
            loss_node: f64::NAN,
            loss_total: f64::NAN,
        }
    }
}

/// In-memory checkpoint: the run's canonical config text, named tensors in
/// write order, and the training RNG state at save time.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_text: String,
    pub records: Vec<(String, Tensor)>,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos,
                what: format!(
                    "truncated {what}: need {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn usize(&mut self, what: &str) -> Result<usize> {
        let v = self.u64(what)?;
        usize::try_from(v).map_err(|_| Error::Format {
            offset: self.pos - 8,
            what: format!("{what} {v} does not fit in usize"),
        })
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = self.config_text.as_bytes();
        out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        out.extend_from_slice(cfg);
        for (name, tensor) in &self.records {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(tensor.shape().len() as u64).to_le_bytes());
            for &e in tensor.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.rng_seed);
        out.extend_from_slice(&self.rng_word_pos.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Format {
                offset: 0,
                what: format!("bad magic {magic:?}, expected {MAGIC:?}"),
            });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Format {
                offset: 4,
                what: format!("unsupported version {version}, expected {VERSION}"),
            });
        }
        let cfg_len = r.usize("config length")?;
        let cfg_bytes = r.take(cfg_len, "config text")?;
        let config_text = String::from_utf8(cfg_bytes.to_vec()).map_err(|e| Error::Format {
            offset: r.pos - cfg_len,
            what: format!("config text is not UTF-8: {e}"),
        })?;

        let mut records = Vec::new();
        while r.remaining() > RNG_TAIL {
            let name_len = r.usize("record name length")?;
            let name_start = r.pos;
            let name_bytes = r.take(name_len, "record name")?;
            let name = String::from_utf8(name_bytes.to_vec()).map_err(|e| Error::Format {
                offset: name_start,
                what: format!("record name is not UTF-8: {e}"),
            })?;
            let rank_at = r.pos;
            let rank = r.usize("record rank")?;
            if rank > 16 {
                return Err(Error::Format {
                    offset: rank_at,
                    what: format!("record rank {rank} is implausible"),
                });
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.usize("record extent")?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &e| acc.checked_mul(e))
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| Error::Format {
                    offset: rank_at,
                    what: format!("record extents {shape:?} overflow"),
                })?;
            let payload_start = r.pos;
            let payload = r.take(numel, "record payload")?;
            let data: Vec<f64> = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let tensor = Tensor::new(shape, data, false).map_err(|e| Error::Format {
                offset: payload_start,
                what: format!("record {name}: {e}"),
            })?;
            records.push((name, tensor));
        }
        if r.remaining() < RNG_TAIL {
            return Err(Error::Format {
                offset: r.pos,
                what: format!(
                    "truncated rng tail: need {RNG_TAIL} bytes, {} remain",
                    r.remaining()
                ),
            });
        }
        let mut rng_seed = [0u8; 32];
        rng_seed.copy_from_slice(r.take(32, "rng seed")?);
        let pos_bytes = r.take(16, "rng position")?;
        let rng_word_pos = u128::from_le_bytes(pos_bytes.try_into().expect("16 bytes"));
        Ok(Checkpoint {
            config_text,
            records,
            rng_seed,
            rng_word_pos,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }

    pub fn find(&self, name: &str) -> Option<&Tensor> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// The stored RNG, positioned where it was at save time.
    pub fn rng(&self) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::from_seed(self.rng_seed);
        rng.set_word_pos(self.rng_word_pos);
        rng
    }

    fn meta_scalar(&self, name: &str) -> Result<f64> {
        let t = self.find(name).ok_or_else(|| Error::Format {
            offset: 0,
            what: format!("checkpoint is missing the {name} record"),
        })?;
        if t.numel() != 1 {
            return Err(Error::Format {
                offset: 0,
                what: format!("{name} should hold one value, has {}", t.numel()),
            });
        }
        Ok(t.data()[0])
    }

    pub fn meta(&self) -> Result<TrainMeta> {
        Ok(TrainMeta {
            epoch: self.meta_scalar("meta.epoch")? as usize,
            loss_graph: self.meta_scalar("meta.loss_graph")?,
            loss_node: self.meta_scalar("meta.loss_node")?,
            loss_total: self.meta_scalar("meta.loss_total")?,
        })
    }
}

fn scalar_record(name: &str, v: f64) -> (String, Tensor) {
    (
        name.to_string(),
        Tensor::new(vec![1], vec![v], false).expect("scalar record"),
    )
}

/// Snapshots a model: parameters in canonical order, then training
/// metadata, then the RNG state.
pub fn model_checkpoint(
    cfg: &Config,
    bundle: &ModelBundle,
    meta: TrainMeta,
    rng: &ChaCha20Rng,
) -> Checkpoint {
    let mut records: Vec<(String, Tensor)> = bundle
        .named_params()
        .into_iter()
        .map(|(name, t)| (name, t.clone()))
        .collect();
    records.push(scalar_record("meta.epoch", meta.epoch as f64));
    records.push(scalar_record("meta.loss_graph", meta.loss_graph));
    records.push(scalar_record("meta.loss_node", meta.loss_node));
    records.push(scalar_record("meta.loss_total", meta.loss_total));
    Checkpoint {
        config_text: cfg.canonical_text(),
        records,
        rng_seed: rng.get_seed(),
        rng_word_pos: rng.get_word_pos(),
    }
}

/// Rebuilds a model from a checkpoint: the embedded config fixes the
/// dimensions, every parameter is overwritten by name. A record whose
/// shape disagrees with the config is a configuration error; a missing
/// parameter is a format error.
pub fn restore_bundle(ckpt: &Checkpoint) -> Result<(Config, ModelBundle, TrainMeta, ChaCha20Rng)> {
    let cfg = Config::parse(&ckpt.config_text)?;
    let mut seed_rng = ChaCha20Rng::from_seed(ckpt.rng_seed);
    let mut bundle = ModelBundle::init(cfg.run.d, cfg.run.hdim, &mut seed_rng)?;
    for (name, tensor) in bundle.named_params_mut() {
        let stored = ckpt.find(&name).ok_or_else(|| Error::Format {
            offset: 0,
            what: format!("checkpoint is missing parameter {name}"),
        })?;
        if stored.shape() != tensor.shape() {
            return Err(Error::Config(format!(
                "parameter {name} is {:?} in the checkpoint but the config implies {:?}",
                stored.shape(),
                tensor.shape()
            )));
        }
        tensor.data_mut().copy_from_slice(stored.data());
    }
    let meta = ckpt.meta()?;
    Ok((cfg, bundle, meta, ckpt.rng()))
}

/// Snapshots a pretrained patch CNN with its throwaway head.
pub fn pretrain_checkpoint(cfg: &Config, result: &PretrainResult, rng: &ChaCha20Rng) -> Checkpoint {
    let mut records = Vec::new();
    result.cnn.collect("patch_cnn", &mut records);
    let mut records: Vec<(String, Tensor)> = records
        .into_iter()
        .map(|(name, t)| (name, t.clone()))
        .collect();
    records.push(("patch_head.weight".into(), result.head_w.clone()));
    records.push(("patch_head.bias".into(), result.head_b.clone()));
    records.push(scalar_record(
        "meta.holdout_accuracy",
        result.holdout_accuracy,
    ));
    Checkpoint {
        config_text: cfg.canonical_text(),
        records,
        rng_seed: rng.get_seed(),
        rng_word_pos: rng.get_word_pos(),
    }
}

/// Extracts the pretrained CNN from a patch checkpoint, shaped by the
/// given model dimensions.
pub fn restore_pretrained_cnn(
    ckpt: &Checkpoint,
    d: usize,
    hdim: usize,
) -> Result<crate::models::CnnParams> {
    use crate::models::{CnnConfig, CnnParams};
    let mut seed_rng = ChaCha20Rng::from_seed(ckpt.rng_seed);
    let mut cnn = CnnParams::init(CnnConfig::desk_default(d, hdim), &mut seed_rng)?;
    let mut named = Vec::new();
    cnn.collect_mut("patch_cnn", &mut named);
    for (name, tensor) in named {
        let stored = ckpt.find(&name).ok_or_else(|| Error::Format {
            offset: 0,
            what: format!("checkpoint is missing parameter {name}"),
        })?;
        if stored.shape() != tensor.shape() {
            return Err(Error::Config(format!(
                "parameter {name} is {:?} in the checkpoint but the model expects {:?}",
                stored.shape(),
                tensor.shape()
            )));
        }
        tensor.data_mut().copy_from_slice(stored.data());
    }
    Ok(cnn)
}
