//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "FDNN" | version: u32 | header_len: u64 | header: UTF-8 JSON
//! tensor_count: u64
//! per tensor: name_len: u64 | name | rank: u64 | dims: u64 × rank | data: f64 × Πdims
//! ```
//!
//! The header carries the training config, the number of completed epochs,
//! and the scalar optimizer state. Tensors cover every parameter and batch-norm
//! running statistic of both networks, then both optimizers' accumulators.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::train::{TrainConfig, Trainer};
use crate::error::{CheckpointError, FdnnError, Result};
use crate::layers::Mode;
use crate::optim::OptimState;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FDNN";
pub const CHECKPOINT_VERSION: u32 = 1;
const MAX_RANK: u64 = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimMeta {
    alpha: f64,
    beta: f64,
    eps: f64,
    iter: u64,
}

impl OptimMeta {
    fn of(o: &OptimState) -> Self {
        OptimMeta {
            alpha: o.alpha,
            beta: o.beta,
            eps: o.eps,
            iter: o.iter,
        }
    }

    fn apply(&self, o: &mut OptimState) {
        o.alpha = self.alpha;
        o.beta = self.beta;
        o.eps = self.eps;
        o.iter = self.iter;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: TrainConfig,
    epochs_completed: u32,
    optim_g: OptimMeta,
    optim_d: OptimMeta,
}

fn named_tensors(t: &Trainer) -> Vec<(String, &Tensor)> {
    let mut out = Vec::new();
    for (prefix, stack) in [
        ("generator", &t.generator.stack),
        ("discriminator", &t.discriminator.stack),
    ] {
        for (name, p) in stack.named_params() {
            out.push((format!("{prefix}.{name}"), &p.value));
        }
        for (name, b) in stack.named_buffers() {
            out.push((format!("{prefix}.{name}"), b));
        }
    }
    for (prefix, opt) in [("optim_g", &t.opt_g), ("optim_d", &t.opt_d)] {
        for (k, d) in opt.delta().iter().enumerate() {
            out.push((format!("{prefix}.delta.{k}"), d));
        }
    }
    out
}

fn named_tensors_mut(t: &mut Trainer) -> Vec<(String, &mut Tensor)> {
    let mut out = Vec::new();
    for (prefix, stack) in [
        ("generator", &mut t.generator.stack),
        ("discriminator", &mut t.discriminator.stack),
    ] {
        for (name, tensor) in stack.named_state_mut() {
            out.push((format!("{prefix}.{name}"), tensor));
        }
    }
    for (prefix, opt) in [("optim_g", &mut t.opt_g), ("optim_d", &mut t.opt_d)] {
        for (k, d) in opt.delta_mut().iter_mut().enumerate() {
            out.push((format!("{prefix}.delta.{k}"), d));
        }
    }
    out
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Serializes the full training state.
pub fn encode_checkpoint(t: &Trainer) -> Result<Vec<u8>> {
    let header = Header {
        config: t.config.clone(),
        epochs_completed: t.epochs_completed,
        optim_g: OptimMeta::of(&t.opt_g),
        optim_d: OptimMeta::of(&t.opt_d),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u64(&mut out, json.len() as u64);
    out.extend_from_slice(&json);
    let tensors = named_tensors(t);
    put_u64(&mut out, tensors.len() as u64);
    for (name, tensor) in tensors {
        put_u64(&mut out, name.len() as u64);
        out.extend_from_slice(name.as_bytes());
        put_u64(&mut out, tensor.rank() as u64);
        for &d in tensor.shape() {
            put_u64(&mut out, d as u64);
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> std::result::Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Truncated(what));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, what: &'static str) -> std::result::Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &'static str) -> std::result::Result<usize, CheckpointError> {
        let v = self.u64(what)?;
        let remaining = (self.bytes.len() - self.pos) as u64;
        if v > remaining {
            return Err(CheckpointError::Truncated(what));
        }
        Ok(v as usize)
    }
}

/// Parses a checkpoint produced by [`encode_checkpoint`]. Networks come back in eval mode.
pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<Trainer, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header_len = r.len("header length")?;
    let header: Header = serde_json::from_slice(r.take(header_len, "header")?)
        .map_err(|e| CheckpointError::Malformed(format!("header: {e}")))?;
    let mut trainer = Trainer::new(header.config.clone()).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    trainer.epochs_completed = header.epochs_completed;
    header.optim_g.apply(&mut trainer.opt_g);
    header.optim_d.apply(&mut trainer.opt_d);

    let count = r.u64("tensor count")?;
    let mut slots = named_tensors_mut(&mut trainer);
    if count != slots.len() as u64 {
        return Err(CheckpointError::Malformed(format!(
            "config implies {} tensors, file has {count}",
            slots.len()
        )));
    }
    for (expected_name, slot) in slots.iter_mut() {
        let name_len = r.len("tensor name length")?;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?;
        if name != expected_name {
            return Err(CheckpointError::Malformed(format!(
                "expected tensor {expected_name:?}, found {name:?}"
            )));
        }
        let rank = r.u64("tensor rank")?;
        if rank > MAX_RANK {
            return Err(CheckpointError::Malformed(format!("{name}: rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            dims.push(r.u64("tensor dims")? as usize);
        }
        if dims != slot.shape() {
            return Err(CheckpointError::Malformed(format!(
                "{name}: stored shape {dims:?}, model expects {:?}",
                slot.shape()
            )));
        }
        let payload = r.take(8 * slot.len(), "tensor data")?;
        for (dst, chunk) in slot.data_mut().iter_mut().zip(payload.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
        if !slot.is_finite() {
            return Err(CheckpointError::Malformed(format!("{name}: non-finite values")));
        }
    }
    drop(slots);
    if r.pos != bytes.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    trainer.generator.set_mode(Mode::Eval);
    trainer.discriminator.set_mode(Mode::Eval);
    Ok(trainer)
}

/// Writes atomically via a sibling temporary file.
pub fn save_checkpoint(t: &Trainer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(t)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| FdnnError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| FdnnError::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Trainer> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| FdnnError::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|source| FdnnError::Checkpoint {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::dataset::make_dataset;
    use crate::data::image::Image;
    use crate::data::stylize::{default_seen_styles, default_unseen_styles};
    use crate::model::Destylize;

    fn trained() -> Trainer {
        let (train_set, _) = make_dataset(2, 1, &default_seen_styles(), &default_unseen_styles(), 16, 3).unwrap();
        let config = TrainConfig {
            image_size: 16,
            base_channels: 4,
            batch_size: 4,
            epochs: 1,
            seed: 8,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(config).unwrap();
        t.train(&train_set, None, |_| Ok(())).unwrap();
        t
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let t = trained();
        let bytes = encode_checkpoint(&t).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
        assert_eq!(back.opt_g, t.opt_g);
        assert_eq!(back.opt_d, t.opt_d);
        assert_eq!(back.epochs_completed, 1);
        assert_eq!(back.config, t.config);
        let img = Image::from_fn(16, 16, |c, y, x| ((c * 5 + y * 3 + x) % 9) as f64 / 9.0);
        assert_eq!(
            back.generator.destylize(&img).unwrap(),
            t.generator.destylize(&img).unwrap()
        );
    }

    #[test]
    fn every_tensor_is_stored() {
        let t = trained();
        let names: Vec<String> = named_tensors(&t).into_iter().map(|(n, _)| n).collect();
        let g = t.generator.stack.named_params().len() + t.generator.stack.named_buffers().len();
        let d = t.discriminator.stack.named_params().len() + t.discriminator.stack.named_buffers().len();
        assert_eq!(names.len(), g + d + t.opt_g.delta().len() + t.opt_d.delta().len());
        assert!(names.contains(&"generator.1.running_var".to_string()));
        let mut t2 = t.clone();
        let mut_names: Vec<String> = named_tensors_mut(&mut t2).into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, mut_names);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.fdnn");
        let t = trained();
        save_checkpoint(&t, &path).unwrap();
        let first = fs::read(&path).unwrap();
        save_checkpoint(&load_checkpoint(&path).unwrap(), &path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);
    }

    #[test]
    fn distinct_load_errors() {
        let bytes = encode_checkpoint(&trained()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(CheckpointError::BadMagic(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            decode_checkpoint(&bad),
            Err(CheckpointError::VersionMismatch { found: 9, expected: 1 })
        ));
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 3]),
            Err(CheckpointError::Truncated(_))
        ));
        assert!(matches!(
            decode_checkpoint(&bytes[..2]),
            Err(CheckpointError::Truncated(_))
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode_checkpoint(&extra), Err(CheckpointError::Malformed(_))));
    }

    #[test]
    fn load_error_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.fdnn");
        fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        let msg = err.to_string();
        assert!(msg.contains("junk.fdnn") && msg.contains("bad magic"), "{msg}");
    }
}
