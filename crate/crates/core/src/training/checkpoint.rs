//! Binary named-tensor checkpoints.
//!
//! Layout (little-endian): the 8-byte magic `C2GCKPT1` whose last byte is
//! the format version; `u32` tensor count; per tensor a `u16` name length,
//! the UTF-8 name, a `u8` rank, `rank × u32` dims and the `f32` values; a
//! `u32` config length and the config text; a `u64` step index.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::models::ParamSet;
use crate::tensor::Tensor;

use super::config::TrainConfig;

const MAGIC_PREFIX: &[u8; 7] = b"C2GCKPT";
pub const FORMAT_VERSION: u8 = b'1';

#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
    /// Config snapshot in the text format of [`TrainConfig::to_text`].
    pub config: String,
    pub step: u64,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> std::result::Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(CheckpointError::Truncated(what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> std::result::Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> std::result::Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> std::result::Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

impl ModelCheckpoint {
    pub fn new(config: &TrainConfig, step: u64) -> Self {
        ModelCheckpoint {
            tensors: Vec::new(),
            config: config.to_text(),
            step,
        }
    }

    /// Appends every tensor of `params` (gradients are not stored).
    pub fn add_params(&mut self, params: &ParamSet<f32>) {
        for (name, t) in params.iter() {
            let plain = Tensor::new(t.shape(), t.data().to_vec(), false).expect("valid tensor");
            self.tensors.push((name.to_string(), plain));
        }
    }

    /// Collects the tensors whose names start with `prefix`, as trainable
    /// parameters.
    pub fn params(&self, prefix: &str) -> ParamSet<f32> {
        let mut out = ParamSet::default();
        for (name, t) in self.tensors.iter().filter(|(n, _)| n.starts_with(prefix)) {
            let mut t = t.clone();
            t.set_requires_grad(true);
            out.push(name.clone(), t);
        }
        out
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        TrainConfig::parse(&self.config)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC_PREFIX);
        out.push(FORMAT_VERSION);
        let count = u32::try_from(self.tensors.len()).map_err(|_| Error::shape("too many tensors"))?;
        out.extend_from_slice(&count.to_le_bytes());
        let mut seen = HashSet::new();
        for (name, t) in &self.tensors {
            if !seen.insert(name.as_str()) {
                return Err(CheckpointError::DuplicateName(name.clone()).into());
            }
            let len = u16::try_from(name.len()).map_err(|_| Error::shape(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let rank = u8::try_from(t.shape().len()).map_err(|_| Error::shape("tensor rank above 255"))?;
            out.push(rank);
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| Error::shape("dimension exceeds u32"))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let clen = u32::try_from(self.config.len()).map_err(|_| Error::shape("config text too long"))?;
        out.extend_from_slice(&clen.to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, CheckpointError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let prefix_len = bytes.len().min(MAGIC_PREFIX.len());
        if bytes[..prefix_len] != MAGIC_PREFIX[..prefix_len] {
            return Err(CheckpointError::BadMagic);
        }
        r.take(MAGIC_PREFIX.len(), "magic")?;
        let version = r.u8("version")?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::new();
        let mut seen = HashSet::new();
        for _ in 0..count {
            let len = r.u16("tensor name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "tensor name")?)
                .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(CheckpointError::DuplicateName(name));
            }
            let rank = r.u8("tensor rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("tensor dims")? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| CheckpointError::Malformed(format!("{name}: dimensions overflow")))?;
            let raw = r.take(numel, "tensor values")?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(&shape, data, false)
                .map_err(|e| CheckpointError::Malformed(format!("{name}: {e}")))?;
            tensors.push((name, t));
        }
        let clen = r.u32("config length")? as usize;
        let config = std::str::from_utf8(r.take(clen, "config text")?)
            .map_err(|_| CheckpointError::Malformed("config text is not UTF-8".into()))?
            .to_string();
        let step = r.u64("step index")?;
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(ModelCheckpoint { tensors, config, step })
    }

    /// Writes to a sibling temp file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
        tmp_name.push(".tmp");
        let tmp = path.with_file_name(tmp_name);
        {
            let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
            f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_bytes(&bytes)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ModelCheckpoint {
        let t = |shape: &[usize], off: f32| {
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|i| i as f32 * 0.5 - off).collect(), false).unwrap()
        };
        ModelCheckpoint {
            tensors: vec![
                ("a.v".into(), t(&[2, 3, 4, 4], 1.0)),
                ("a.g".into(), t(&[2], 0.25)),
                ("a.a".into(), t(&[1], -3.0)),
            ],
            config: TrainConfig::default().to_text(),
            step: 42,
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let cp = sample();
        let bytes = cp.to_bytes().unwrap();
        let back = ModelCheckpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, cp);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(&bytes[..8], b"C2GCKPT1");
    }

    #[test]
    fn corruptions_have_distinct_errors() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(ModelCheckpoint::from_bytes(&bad), Err(CheckpointError::BadMagic));
        let mut ver = bytes.clone();
        ver[7] = b'2';
        assert_eq!(ModelCheckpoint::from_bytes(&ver), Err(CheckpointError::Version(b'2')));
        assert!(matches!(
            ModelCheckpoint::from_bytes(&bytes[..bytes.len() - 4]),
            Err(CheckpointError::Truncated(_))
        ));
        assert!(matches!(ModelCheckpoint::from_bytes(&bytes[..3]), Err(CheckpointError::Truncated(_))));
        let mut dup = sample();
        dup.tensors[1].0 = "a.v".into();
        assert!(matches!(dup.to_bytes(), Err(Error::Checkpoint(CheckpointError::DuplicateName(_)))));
    }

    #[test]
    fn duplicate_name_on_load() {
        let mut bytes = sample().to_bytes().unwrap();
        let at = bytes.windows(3).position(|w| w == b"a.g").unwrap();
        bytes[at..at + 3].copy_from_slice(b"a.v");
        assert_eq!(
            ModelCheckpoint::from_bytes(&bytes),
            Err(CheckpointError::DuplicateName("a.v".into()))
        );
    }

    #[test]
    fn atomic_save_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        sample().save(&p).unwrap();
        sample().save(&p).unwrap();
        assert_eq!(ModelCheckpoint::load(&p).unwrap(), sample());
        let names: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names.len(), 1);
    }
}
