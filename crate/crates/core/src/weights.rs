//! `ODSW` weight files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        4 bytes  "ODSW"
//! version      u16      1
//! count        u32      number of tensors
//! count x {
//!   name_len   u16
//!   name       name_len bytes, UTF-8
//!   rank       u8
//!   dims       rank x u32
//!   data       product(dims) x f32
//! }
//! ```
//!
//! Model tensors are named `<layer>.kernel` (`[k, k, c_in, c_out]`) and
//! `<layer>.bias` (`[c_out]`), written in graph order.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, Section};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ODSW";
pub const VERSION: u16 = 1;

/// An ordered list of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightFile {
    pub tensors: Vec<(String, Tensor)>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated weight file while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

impl WeightFile {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len())
                .map_err(|_| Error::Format(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let rank = u8::try_from(t.shape().len())
                .map_err(|_| Error::Format(format!("{name}: rank too large")))?;
            out.push(rank);
            for &d in t.shape() {
                let d = u32::try_from(d)
                    .map_err(|_| Error::Format(format!("{name}: dimension too large")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format("bad magic, not an ODSW weight file".into()));
        }
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported weight file version {version}")));
        }
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::new();
        let mut seen = HashSet::new();
        for _ in 0..count {
            let len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(Error::Format(format!("duplicate tensor name {name}")));
            }
            let rank = r.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dimension")? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("{name}: shape overflows")))?;
            let bytes = r.take(
                n.checked_mul(4)
                    .ok_or_else(|| Error::Format(format!("{name}: shape overflows")))?,
                "tensor data",
            )?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::from_vec(&shape, data)
                .map_err(|e| Error::Format(format!("{name}: {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != buf.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after last tensor",
                buf.len() - r.pos
            )));
        }
        Ok(WeightFile { tensors })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        f.sync_all().map_err(|e| Error::io(path, e))
    }

    /// Every parameter of `model`, in graph order.
    pub fn from_model(model: &Model) -> Self {
        Self::from_model_filtered(model, |_| true)
    }

    /// Encoder parameters only, for transfer learning.
    pub fn encoder_of(model: &Model) -> Self {
        Self::from_model_filtered(model, |s| s == Section::Encoder)
    }

    fn from_model_filtered(model: &Model, keep: impl Fn(Section) -> bool) -> Self {
        let tensors = model
            .layers()
            .iter()
            .filter(|l| keep(l.section))
            .flat_map(|l| {
                [
                    (format!("{}.kernel", l.name), l.params.kernels.clone()),
                    (format!("{}.bias", l.name), l.params.biases.clone()),
                ]
            })
            .collect();
        WeightFile { tensors }
    }

    /// Renames tensors via `(source, target)` pairs. Tensors without an
    /// entry are dropped.
    pub fn remap(&self, mapping: &[(String, String)]) -> Result<Self> {
        let mut tensors = Vec::with_capacity(mapping.len());
        for (src, dst) in mapping {
            let t = self
                .get(src)
                .ok_or_else(|| Error::Format(format!("mapping names missing tensor {src}")))?;
            tensors.push((dst.clone(), t.clone()));
        }
        Ok(WeightFile { tensors })
    }
}

/// Parses a mapping table: one `source target` pair per line, whitespace
/// separated; blank lines and `#` comments are ignored.
pub fn parse_mapping(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), None) => out.push((a.to_string(), b.to_string())),
            _ => {
                return Err(Error::Format(format!(
                    "mapping line {}: expected 'source target'",
                    i + 1
                )))
            }
        }
    }
    Ok(out)
}

/// Mapping from Keras VGG16 layer weights (`block{b}_conv{n}_W` /
/// `block{b}_conv{n}_b`) to encoder tensor names.
pub fn vgg16_mapping() -> Vec<(String, String)> {
    let mut out = Vec::new();
    for (block, convs) in [(1, 2), (2, 2), (3, 3), (4, 3), (5, 3)] {
        for n in 1..=convs {
            out.push((
                format!("block{block}_conv{n}_W"),
                format!("enc{block}_conv{n}.kernel"),
            ));
            out.push((
                format!("block{block}_conv{n}_b"),
                format!("enc{block}_conv{n}.bias"),
            ));
        }
    }
    out
}

/// What a load did.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    /// Names in the file that were ignored (non-strict mode only).
    pub skipped: Vec<String>,
    /// Model tensors the file did not provide; left untouched.
    pub missing: Vec<String>,
}

/// Copies tensors from `file` into `model` by name.
///
/// In strict mode an unknown name or a shape mismatch is an error and the
/// model is left unchanged; otherwise such tensors are skipped. Model
/// tensors absent from the file keep their current values, which is how an
/// encoder-only file initialises a fresh model.
pub fn apply(model: &mut Model, file: &WeightFile, strict: bool) -> Result<LoadReport> {
    let mut slots: HashMap<String, (usize, bool)> = HashMap::new();
    for (i, l) in model.layers().iter().enumerate() {
        slots.insert(format!("{}.kernel", l.name), (i, true));
        slots.insert(format!("{}.bias", l.name), (i, false));
    }
    let mut report = LoadReport::default();
    let mut plan = Vec::new();
    for (name, t) in &file.tensors {
        let Some(&(i, is_kernel)) = slots.get(name) else {
            if strict {
                return Err(Error::Format(format!("unknown tensor {name}")));
            }
            report.skipped.push(name.clone());
            continue;
        };
        let p = &model.layers()[i].params;
        let target = if is_kernel { &p.kernels } else { &p.biases };
        if target.shape() != t.shape() {
            if strict {
                return Err(Error::Format(format!(
                    "{name}: file shape {:?} but model expects {:?}",
                    t.shape(),
                    target.shape()
                )));
            }
            report.skipped.push(name.clone());
            continue;
        }
        plan.push((i, is_kernel, t));
        report.loaded.push(name.clone());
    }
    for (i, is_kernel, t) in plan {
        let p = &mut model.layers_mut()[i].params;
        if is_kernel {
            p.kernels = t.clone();
        } else {
            p.biases = t.clone();
        }
    }
    let loaded: HashSet<&String> = report.loaded.iter().collect();
    report.missing = model
        .layers()
        .iter()
        .flat_map(|l| [format!("{}.kernel", l.name), format!("{}.bias", l.name)])
        .filter(|n| !loaded.contains(n))
        .collect();
    Ok(report)
}

pub fn save_weights(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    WeightFile::from_model(model).write(path)
}

pub fn load_weights(model: &mut Model, path: impl AsRef<Path>, strict: bool) -> Result<LoadReport> {
    let file = WeightFile::read(path)?;
    apply(model, &file, strict)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn small(seed: u64) -> Model {
        Model::build(ModelConfig::new(32, 32, 0.125).unwrap(), seed).unwrap()
    }

    #[test]
    fn header_layout() {
        let f = WeightFile {
            tensors: vec![("a".into(), Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap())],
        };
        let b = f.to_bytes().unwrap();
        assert_eq!(&b[..4], b"ODSW");
        assert_eq!(&b[4..6], &[1, 0]);
        assert_eq!(&b[6..10], &[1, 0, 0, 0]);
        assert_eq!(&b[10..12], &[1, 0]);
        assert_eq!(b[12], b'a');
        assert_eq!(b[13], 1);
        assert_eq!(&b[14..18], &[2, 0, 0, 0]);
        assert_eq!(&b[18..22], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 26);
        assert_eq!(WeightFile::from_bytes(&b).unwrap(), f);
    }

    #[test]
    fn corrupt_inputs() {
        let bytes = WeightFile::from_model(&small(1)).to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(WeightFile::from_bytes(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(WeightFile::from_bytes(&bad).is_err());
        assert!(WeightFile::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(WeightFile::from_bytes(&long).is_err());
    }

    #[test]
    fn strict_rejects_unknown_and_mismatch() {
        let mut m = small(1);
        let before = m.clone();
        let f = WeightFile {
            tensors: vec![("nope.kernel".into(), Tensor::zeros(&[1]).unwrap())],
        };
        assert!(apply(&mut m, &f, true).is_err());
        let r = apply(&mut m, &f, false).unwrap();
        assert_eq!(r.skipped, vec!["nope.kernel".to_string()]);
        let f = WeightFile {
            tensors: vec![("head_conv.bias".into(), Tensor::zeros(&[2]).unwrap())],
        };
        assert!(apply(&mut m, &f, true).is_err());
        assert_eq!(m, before);
    }

    #[test]
    fn mapping_parse_and_vgg_table() {
        let m = parse_mapping("# comment\na b\n\n c  d # tail\n").unwrap();
        assert_eq!(m, vec![("a".into(), "b".into()), ("c".into(), "d".into())]);
        assert!(parse_mapping("a b c").is_err());
        let v = vgg16_mapping();
        assert_eq!(v.len(), 26);
        assert_eq!(v[0], ("block1_conv1_W".into(), "enc1_conv1.kernel".into()));
    }
}
