//! Checkpoint container: a small binary format holding the model config
//! snapshot, generation and epoch counters, and named float32 tensor records
//! for parameters, batch-norm buffers, optimizer momenta, and the memory
//! bank. Writes go through a temp file and rename so a crash never leaves a
//! partial checkpoint at the target path.
//!
//! Layout (all integers little-endian):
//!   magic "EQNV" | version u32 | header_len u32 | header bytes | records
//! The header is UTF-8 `key=value` lines. Each record is
//!   name_len u16 | name | ndim u8 | dims u32 each | values f32 each.

use crate::error::{Error, Result};
use crate::membank::{BankRngState, MemoryBank};
use crate::model::{init_model, Backbone, Model, ModelConfig};
use ndarray::{Array2, ArrayD, IxDyn};
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"EQNV";
pub const FORMAT_VERSION: u32 = 1;

const PARAM_PREFIX: &str = "param.";
const BUFFER_PREFIX: &str = "buffer.";
const MOMENTUM_PREFIX: &str = "momentum.";
const BANK_SLOTS: &str = "bank.slots";

#[derive(Debug, Clone)]
struct Record {
    name: String,
    shape: Vec<usize>,
    data: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub generation: u32,
    pub epoch: u32,
    records: Vec<Record>,
    bank_meta: Option<(f64, BankRngState)>,
}

impl Checkpoint {
    pub fn from_training(
        model: &Model<f32>,
        momenta: Option<&crate::arena::ParamArena<f32>>,
        bank: Option<&MemoryBank<f32>>,
        generation: u32,
        epoch: u32,
    ) -> Self {
        let mut records = Vec::new();
        for (name, tensor) in model.params.iter() {
            records.push(Record {
                name: format!("{PARAM_PREFIX}{name}"),
                shape: tensor.shape().to_vec(),
                data: tensor.iter().copied().collect(),
            });
        }
        for (name, tensor) in model.buffers.iter() {
            records.push(Record {
                name: format!("{BUFFER_PREFIX}{name}"),
                shape: tensor.shape().to_vec(),
                data: tensor.iter().copied().collect(),
            });
        }
        if let Some(m) = momenta {
            for (name, tensor) in m.iter() {
                records.push(Record {
                    name: format!("{MOMENTUM_PREFIX}{name}"),
                    shape: tensor.shape().to_vec(),
                    data: tensor.iter().copied().collect(),
                });
            }
        }
        let mut bank_meta = None;
        if let Some(b) = bank {
            records.push(Record {
                name: BANK_SLOTS.to_string(),
                shape: vec![b.len(), b.dim()],
                data: b.slots().iter().copied().collect(),
            });
            bank_meta = Some((b.momentum(), b.rng_state()));
        }
        Checkpoint {
            config: model.config.clone(),
            generation,
            epoch,
            records,
            bank_meta,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("ckpt.tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            w.write_all(&MAGIC)?;
            w.write_all(&FORMAT_VERSION.to_le_bytes())?;
            let header = self.encode_header();
            w.write_all(&(header.len() as u32).to_le_bytes())?;
            w.write_all(header.as_bytes())?;
            for rec in &self.records {
                let name = rec.name.as_bytes();
                w.write_all(&(name.len() as u16).to_le_bytes())?;
                w.write_all(name)?;
                w.write_all(&[rec.shape.len() as u8])?;
                for &d in &rec.shape {
                    w.write_all(&(d as u32).to_le_bytes())?;
                }
                for &v in &rec.data {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let file = File::open(path.as_ref())?;
        let len = file.metadata()?.len();
        let mut r = BufReader::new(file);

        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: "bad magic, not a checkpoint file".into(),
            });
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let header_len = read_u32(&mut r)? as usize;
        let mut header = vec![0u8; header_len];
        r.read_exact(&mut header)?;
        let header = String::from_utf8(header).map_err(|_| Error::Format {
            offset: 12,
            message: "header is not valid UTF-8".into(),
        })?;
        let (config, generation, epoch, bank_meta) = decode_header(&header)?;

        let mut offset = 12 + header_len as u64;
        let mut records = Vec::new();
        while offset < len {
            let name_len = read_u16(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format {
                offset,
                message: "record name is not valid UTF-8".into(),
            })?;
            let mut ndim = [0u8; 1];
            r.read_exact(&mut ndim)?;
            let mut shape = Vec::with_capacity(ndim[0] as usize);
            for _ in 0..ndim[0] {
                shape.push(read_u32(&mut r)? as usize);
            }
            let count: usize = shape.iter().product();
            let mut data = vec![0f32; count];
            let mut buf = [0u8; 4];
            for v in data.iter_mut() {
                r.read_exact(&mut buf)?;
                *v = f32::from_le_bytes(buf);
            }
            offset += 2 + name_len as u64 + 1 + 4 * ndim[0] as u64 + 4 * count as u64;
            records.push(Record { name, shape, data });
        }
        Ok(Checkpoint {
            config,
            generation,
            epoch,
            records,
            bank_meta,
        })
    }

    /// Rebuild the model from the snapshot config and stored tensors.
    /// Every parameter and buffer the config implies must be present with a
    /// matching shape.
    pub fn build_model(&self) -> Result<Model<f32>> {
        let mut model = init_model::<f32>(&self.config)?;
        let by_name: HashMap<&str, &Record> =
            self.records.iter().map(|r| (r.name.as_str(), r)).collect();
        fill_arena(&mut model.params, PARAM_PREFIX, &by_name)?;
        fill_arena(&mut model.buffers, BUFFER_PREFIX, &by_name)?;
        Ok(model)
    }

    /// Optimizer momentum buffers, if the checkpoint carries them.
    pub fn optimizer_momenta(&self, model: &Model<f32>) -> Result<Option<crate::arena::ParamArena<f32>>> {
        if !self.records.iter().any(|r| r.name.starts_with(MOMENTUM_PREFIX)) {
            return Ok(None);
        }
        let by_name: HashMap<&str, &Record> =
            self.records.iter().map(|r| (r.name.as_str(), r)).collect();
        let mut momenta = model.params.zeros_like();
        fill_arena(&mut momenta, MOMENTUM_PREFIX, &by_name)?;
        Ok(Some(momenta))
    }

    /// Memory bank with its sampling generator state, if stored.
    pub fn bank(&self) -> Result<Option<MemoryBank<f32>>> {
        let Some(rec) = self.records.iter().find(|r| r.name == BANK_SLOTS) else {
            return Ok(None);
        };
        let Some((momentum, ref state)) = self.bank_meta else {
            return Err(Error::Format {
                offset: 12,
                message: "bank slots present but header lacks bank metadata".into(),
            });
        };
        if rec.shape.len() != 2 {
            return Err(Error::ShapeMismatch("bank slots must be 2-d".into()));
        }
        let slots = Array2::from_shape_vec((rec.shape[0], rec.shape[1]), rec.data.clone())
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        Ok(Some(MemoryBank::restore(slots, momentum, state)))
    }

    fn encode_header(&self) -> String {
        let mut h = String::new();
        let c = &self.config;
        h.push_str(&format!("backbone={}\n", c.backbone.name()));
        h.push_str(&format!("embed_dim={}\n", c.embed_dim));
        h.push_str(&format!("num_classes={}\n", c.num_classes));
        h.push_str(&format!("num_transforms={}\n", c.num_transforms));
        h.push_str(&format!("invariant_dim={}\n", c.invariant_dim));
        h.push_str(&format!("head_hidden={}\n", c.head_hidden));
        h.push_str(&format!("seed={}\n", c.seed));
        h.push_str(&format!("generation={}\n", self.generation));
        h.push_str(&format!("epoch={}\n", self.epoch));
        if let Some((momentum, ref state)) = self.bank_meta {
            h.push_str(&format!("bank_momentum={momentum}\n"));
            let hex: String = state.seed.iter().map(|b| format!("{b:02x}")).collect();
            h.push_str(&format!("bank_rng_seed={hex}\n"));
            h.push_str(&format!("bank_rng_word_pos={}\n", state.word_pos));
            h.push_str(&format!("bank_rng_stream={}\n", state.stream));
        }
        h
    }
}

fn fill_arena(
    arena: &mut crate::arena::ParamArena<f32>,
    prefix: &str,
    by_name: &HashMap<&str, &Record>,
) -> Result<()> {
    for id in arena.ids().collect::<Vec<_>>() {
        let name = arena.name(id).to_string();
        let key = format!("{prefix}{name}");
        let rec = by_name.get(key.as_str()).ok_or_else(|| {
            Error::ShapeMismatch(format!("checkpoint is missing tensor {key}"))
        })?;
        let target = arena.get_mut(id);
        if rec.shape != target.shape() {
            return Err(Error::ShapeMismatch(format!(
                "tensor {key} has shape {:?}, expected {:?}",
                rec.shape,
                target.shape()
            )));
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&rec.shape), rec.data.clone())
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        *target = arr;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut buf = [0u8; 2];
    r.read_exact(&mut buf)?;
    Ok(u16::from_le_bytes(buf))
}

fn decode_header(header: &str) -> Result<(ModelConfig, u32, u32, Option<(f64, BankRngState)>)> {
    let mut kv = HashMap::new();
    for line in header.lines() {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Format {
            offset: 12,
            message: format!("malformed header line: {line}"),
        })?;
        kv.insert(k.to_string(), v.to_string());
    }
    let get = |key: &str| -> Result<&String> {
        kv.get(key).ok_or_else(|| Error::Format {
            offset: 12,
            message: format!("header is missing key {key}"),
        })
    };
    let parse_num = |key: &str| -> Result<u64> {
        get(key)?.parse().map_err(|_| Error::Format {
            offset: 12,
            message: format!("header key {key} is not an integer"),
        })
    };
    let config = ModelConfig {
        backbone: Backbone::parse(get("backbone")?)?,
        embed_dim: parse_num("embed_dim")? as usize,
        num_classes: parse_num("num_classes")? as usize,
        num_transforms: parse_num("num_transforms")? as usize,
        invariant_dim: parse_num("invariant_dim")? as usize,
        head_hidden: parse_num("head_hidden")? as usize,
        seed: parse_num("seed")?,
    };
    let generation = parse_num("generation")? as u32;
    let epoch = parse_num("epoch")? as u32;

    let bank_meta = if kv.contains_key("bank_momentum") {
        let momentum: f64 = get("bank_momentum")?.parse().map_err(|_| Error::Format {
            offset: 12,
            message: "bank_momentum is not a float".into(),
        })?;
        let hex = get("bank_rng_seed")?;
        if hex.len() != 64 || !hex.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(Error::Format {
                offset: 12,
                message: "bank_rng_seed must be 64 hex digits".into(),
            });
        }
        let mut seed = [0u8; 32];
        for (i, chunk) in seed.iter_mut().enumerate() {
            *chunk = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).unwrap();
        }
        let word_pos: u128 = get("bank_rng_word_pos")?.parse().map_err(|_| Error::Format {
            offset: 12,
            message: "bank_rng_word_pos is not an integer".into(),
        })?;
        let stream: u64 = parse_num("bank_rng_stream")?;
        Some((momentum, BankRngState { seed, word_pos, stream }))
    } else {
        None
    };
    Ok((config, generation, epoch, bank_meta))
}

/// Convenience wrappers matching the common save/load call sites.
pub fn save_checkpoint(model: &Model<f32>, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::from_training(model, None, None, 0, 0).save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model<f32>> {
    Checkpoint::load(path)?.build_model()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::stack_images;
    use crate::rng::{self, domain};
    use ndarray::Array3;
    use rand::Rng;

    fn toy_config() -> ModelConfig {
        ModelConfig {
            backbone: Backbone::Conv4Tiny,
            embed_dim: 16,
            num_classes: 5,
            num_transforms: 4,
            invariant_dim: 8,
            head_hidden: 16,
            seed: 7,
        }
    }

    fn toy_images(n: usize, side: usize) -> ndarray::Array4<f32> {
        let mut rng = rng::derive_rng(3, &[domain::SYNTH_DATA]);
        let imgs: Vec<Array3<f32>> = (0..n)
            .map(|_| Array3::from_shape_fn((side, side, 3), |_| rng.random_range(0.0..1.0)))
            .collect();
        stack_images(&imgs)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let model = init_model::<f32>(&toy_config()).unwrap();
        let mut momenta = model.params.zeros_like();
        for id in momenta.ids().collect::<Vec<_>>() {
            momenta.get_mut(id).mapv_inplace(|_| 0.25);
        }
        let mut bank: MemoryBank<f32> = MemoryBank::init(20, 8, 11);
        let _ = bank.sample_negatives(&[0], 5).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gen0.ckpt");
        Checkpoint::from_training(&model, Some(&momenta), Some(&bank), 2, 17)
            .save(&path)
            .unwrap();

        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.config, model.config);
        assert_eq!((loaded.generation, loaded.epoch), (2, 17));

        let rebuilt = loaded.build_model().unwrap();
        for (a, b) in model.params.iter().zip(rebuilt.params.iter()) {
            assert_eq!(a.0, b.0);
            assert!(a.1.iter().zip(b.1.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        for (a, b) in model.buffers.iter().zip(rebuilt.buffers.iter()) {
            assert!(a.1.iter().zip(b.1.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let got_momenta = loaded.optimizer_momenta(&rebuilt).unwrap().unwrap();
        assert!(got_momenta.iter().all(|(_, t)| t.iter().all(|&v| v == 0.25)));

        let mut got_bank = loaded.bank().unwrap().unwrap();
        assert_eq!(got_bank.slots(), bank.slots());
        assert_eq!(got_bank.rng_state(), bank.rng_state());
        let mut orig = bank;
        assert_eq!(
            got_bank.sample_negatives(&[], 4).unwrap(),
            orig.sample_negatives(&[], 4).unwrap()
        );

        let images = toy_images(3, 16);
        let za = model.embed(&images).unwrap();
        let zb = rebuilt.embed(&images).unwrap();
        assert!(za.iter().zip(zb.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn wrong_num_classes_is_shape_mismatch() {
        let model = init_model::<f32>(&toy_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&model, &path).unwrap();

        let mut loaded = Checkpoint::load(&path).unwrap();
        loaded.config.num_classes = 9;
        match loaded.build_model() {
            Err(Error::ShapeMismatch(_)) => {}
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_is_io_error() {
        let model = init_model::<f32>(&toy_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&model, &path).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        let cut = path.with_file_name("cut.ckpt");
        std::fs::write(&cut, &bytes[..bytes.len() * 3 / 5]).unwrap();
        match Checkpoint::load(&cut) {
            Err(Error::Io(_)) => {}
            other => panic!("expected io error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let model = init_model::<f32>(&toy_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();

        let garbled = path.with_file_name("garbled.ckpt");
        let mut g = bytes.clone();
        g[0] = b'X';
        std::fs::write(&garbled, &g).unwrap();
        match Checkpoint::load(&garbled) {
            Err(Error::Format { offset: 0, .. }) => {}
            other => panic!("expected format error, got {other:?}"),
        }

        bytes[4..8].copy_from_slice(&9u32.to_le_bytes());
        let newer = path.with_file_name("newer.ckpt");
        std::fs::write(&newer, &bytes).unwrap();
        match Checkpoint::load(&newer) {
            Err(Error::VersionMismatch { found: 9, expected: 1 }) => {}
            other => panic!("expected version mismatch, got {other:?}"),
        }
    }

    #[test]
    fn momenta_and_bank_absent_when_not_saved() {
        let model = init_model::<f32>(&toy_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        let rebuilt = loaded.build_model().unwrap();
        assert!(loaded.optimizer_momenta(&rebuilt).unwrap().is_none());
        assert!(loaded.bank().unwrap().is_none());
    }
}
