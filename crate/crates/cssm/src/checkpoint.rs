//! Checkpoint serialization: magic + version + config text + named tensor
//! table (f32 little-endian payloads) + optimizer state + RNG state.
//!
//! Training runs in f32, so a save/load round trip reproduces forward
//! outputs bitwise.

use crate::network::Model;
use crate::rng::CounterRng;
use std::fs;
use std::io;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"CSSM";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CkptError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("{0}")]
    Format(String),
}

fn format_err<T>(msg: impl Into<String>) -> Result<T, CkptError> {
    Err(CkptError::Format(msg.into()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// `key=value` config lines (see `ModelConfig::to_kv`).
    pub config: String,
    pub tensors: Vec<TensorEntry>,
    /// Optimizer state in the same encoding (moments as `m.<name>` /
    /// `v.<name>`, the step count as a scalar named `step`).
    pub opt: Vec<TensorEntry>,
    pub rng: [u64; 4],
}

fn write_table(out: &mut Vec<u8>, table: &[TensorEntry]) {
    out.extend_from_slice(&(table.len() as u32).to_le_bytes());
    for t in table {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &e in &t.shape {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> io::Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(ckpt.config.len() as u32).to_le_bytes());
    out.extend_from_slice(ckpt.config.as_bytes());
    write_table(&mut out, &ckpt.tensors);
    write_table(&mut out, &ckpt.opt);
    for &w in &ckpt.rng {
        out.extend_from_slice(&w.to_le_bytes());
    }
    fs::write(path, out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CkptError> {
        if self.bytes.len() - self.pos < n {
            return format_err(format!(
                "truncated checkpoint: need {n} bytes at offset {}",
                self.pos
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32, CkptError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CkptError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn read_table(r: &mut Reader) -> Result<Vec<TensorEntry>, CkptError> {
    let count = r.u32()? as usize;
    let mut table = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| CkptError::Format("non-UTF-8 tensor name".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(4 * numel)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        table.push(TensorEntry { name, shape, data });
    }
    Ok(table)
}

pub fn load(path: &Path) -> Result<Checkpoint, CkptError> {
    let bytes = fs::read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if r.take(4)? != MAGIC {
        return format_err(format!("bad magic in {}", path.display()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return format_err(format!(
            "unsupported checkpoint version {version} (want {VERSION})"
        ));
    }
    let cfg_len = r.u32()? as usize;
    let config = std::str::from_utf8(r.take(cfg_len)?)
        .map_err(|_| CkptError::Format("non-UTF-8 config".into()))?
        .to_string();
    let tensors = read_table(&mut r)?;
    let opt = read_table(&mut r)?;
    let rng = [r.u64()?, r.u64()?, r.u64()?, r.u64()?];
    if r.pos != bytes.len() {
        return format_err(format!(
            "trailing bytes after checkpoint: {} of {}",
            r.pos,
            bytes.len()
        ));
    }
    Ok(Checkpoint {
        config,
        tensors,
        opt,
        rng,
    })
}

/// Snapshot a model's parameters as a tensor table.
pub fn model_tensors(model: &Model<f32>) -> Vec<TensorEntry> {
    let mut out = Vec::new();
    model.visit(&mut |name, p| {
        out.push(TensorEntry {
            name,
            shape: p.value.shape.clone(),
            data: p.value.data.clone(),
        });
    });
    out
}

/// Load a tensor table into a model; every model parameter must be present
/// with a matching shape, and no extra tensors may remain.
pub fn apply_to_model(model: &mut Model<f32>, tensors: &[TensorEntry]) -> Result<(), CkptError> {
    let mut map: std::collections::HashMap<&str, &TensorEntry> =
        tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let mut err = None;
    model.visit_mut(&mut |name, p| {
        if err.is_some() {
            return;
        }
        match map.remove(name.as_str()) {
            None => err = Some(format!("checkpoint is missing tensor {name}")),
            Some(t) if t.shape != p.value.shape => {
                err = Some(format!(
                    "shape mismatch for tensor {name}: checkpoint {:?}, model {:?}",
                    t.shape, p.value.shape
                ))
            }
            Some(t) => p.value.data = t.data.clone(),
        }
    });
    if let Some(e) = err {
        return format_err(e);
    }
    if let Some(name) = map.keys().next() {
        return format_err(format!("checkpoint has unexpected tensor {name}"));
    }
    Ok(())
}

/// Convenience: snapshot model + optimizer + RNG and write to `path`.
pub fn save_model(
    path: &Path,
    model: &Model<f32>,
    opt: &[TensorEntry],
    rng: &CounterRng,
) -> io::Result<()> {
    save(
        path,
        &Checkpoint {
            config: model.cfg.to_kv(),
            tensors: model_tensors(model),
            opt: opt.to_vec(),
            rng: rng.state(),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ModelConfig;
    use crate::rng::CounterRng;
    use crate::ssm::ScanImpl;
    use crate::tensor::{Tape, Tensor};

    fn tiny_cfg(seed: u64) -> ModelConfig {
        let mut cfg = ModelConfig {
            enc_channels: [2, 2, 2, 2],
            num_blocks: 1,
            seed,
            ..ModelConfig::default()
        };
        cfg.block.d_model = 2;
        cfg.block.d_state = 2;
        cfg
    }

    fn forward_bits(model: &Model<f32>) -> Vec<u32> {
        let mut rng = CounterRng::new(70);
        let data: Vec<f32> = (0..3 * 8 * 8).map(|_| rng.uniform(0.0, 1.0) as f32).collect();
        let xa = Tensor::new(vec![3, 8, 8], data.clone());
        let xb = Tensor::new(vec![3, 8, 8], data.iter().map(|v| 1.0 - v).collect());
        let mut tape = Tape::new();
        let a = tape.leaf(&xa);
        let b = tape.leaf(&xb);
        let y = model.forward(&mut tape, ScanImpl::Sequential, a, b);
        tape.value(y).iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn round_trip_reproduces_forward_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.cssm");
        let model: Model<f32> = Model::init(tiny_cfg(1));
        let rng = CounterRng::new(33);
        let opt = vec![TensorEntry {
            name: "step".into(),
            shape: vec![1],
            data: vec![17.0],
        }];
        save_model(&path, &model, &opt, &rng).unwrap();

        let ckpt = load(&path).unwrap();
        assert_eq!(ckpt.rng, rng.state());
        assert_eq!(ckpt.opt, opt);
        let cfg = ModelConfig::from_kv(&ckpt.config).unwrap();
        // different init seed: weights must come from the checkpoint alone
        let mut fresh: Model<f32> = Model::init(ModelConfig { seed: 999, ..cfg });
        apply_to_model(&mut fresh, &ckpt.tensors).unwrap();
        assert_eq!(forward_bits(&model), forward_bits(&fresh));
    }

    #[test]
    fn corrupted_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.cssm");
        let model: Model<f32> = Model::init(tiny_cfg(1));
        save_model(&path, &model, &[], &CounterRng::new(0)).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, bytes).unwrap();
        let err = load(&path).unwrap_err();
        assert!(err.to_string().contains("bad magic"));
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.cssm");
        let model: Model<f32> = Model::init(tiny_cfg(1));
        save_model(&path, &model, &[], &CounterRng::new(0)).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        let err = load(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"));
    }

    #[test]
    fn version_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ver.cssm");
        let model: Model<f32> = Model::init(tiny_cfg(1));
        save_model(&path, &model, &[], &CounterRng::new(0)).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 9;
        std::fs::write(&path, bytes).unwrap();
        let err = load(&path).unwrap_err();
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn config_mismatch_names_offending_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l1.cssm");
        let model: Model<f32> = Model::init(tiny_cfg(1));
        save_model(&path, &model, &[], &CounterRng::new(0)).unwrap();
        let ckpt = load(&path).unwrap();
        // load the L=1 checkpoint into an L=2 model
        let mut bigger: Model<f32> = Model::init(ModelConfig {
            num_blocks: 2,
            ..tiny_cfg(1)
        });
        let err = apply_to_model(&mut bigger, &ckpt.tensors).unwrap_err();
        assert!(
            err.to_string().contains("block1"),
            "error should name the missing tensor: {err}"
        );
        // and the reverse: extra tensors are rejected by name
        let mut smaller: Model<f32> = Model::init(ModelConfig {
            num_blocks: 0,
            ..tiny_cfg(1)
        });
        let err = apply_to_model(&mut smaller, &ckpt.tensors).unwrap_err();
        assert!(err.to_string().contains("unexpected tensor block0"));
    }
}
