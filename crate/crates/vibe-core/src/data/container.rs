//! Binary tensor container: the on-disk format for checkpoints, datasets,
//! and embeddings.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "VIBE" | version: u32 | entry_count: u32
//! per entry:
//!   name_len: u32 | name: UTF-8 bytes
//!   dtype: u8 (0 = f32, 1 = f64) | rank: u32 | extents: u64 * rank
//!   values: raw little-endian, row-major
//! manifest_len: u32 | manifest: UTF-8 "key=value" lines
//! ```
//!
//! Reads parse a fully loaded byte buffer: a bad magic, version, dtype, or
//! malformed structure is a format error with nothing partially returned,
//! and a buffer that ends mid-field is an I/O error (unexpected EOF).
//! Writes go through a temp file and an atomic rename.

use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nd::{Dtype, Scalar, Tensor};

const MAGIC: &[u8; 4] = b"VIBE";
const VERSION: u32 = 1;
/// Ranks above this are treated as corruption, not data.
const MAX_RANK: usize = 32;

/// A tensor of either supported precision.
#[derive(Debug, Clone)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> Dtype {
        match self {
            AnyTensor::F32(_) => Dtype::F32,
            AnyTensor::F64(_) => Dtype::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            AnyTensor::F32(t) => t.len(),
            AnyTensor::F64(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        false // zero extents are rejected at construction
    }

    /// View or convert to `f32` (converting copies).
    pub fn to_f32(&self) -> Tensor<f32> {
        match self {
            AnyTensor::F32(t) => t.clone(),
            AnyTensor::F64(t) => t.cast(),
        }
    }

    /// View or convert to `f64` (converting copies).
    pub fn to_f64(&self) -> Tensor<f64> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.clone(),
        }
    }

    /// The tensor at its stored precision, if it matches `T`.
    pub fn exact<T: Scalar>(&self) -> Option<Tensor<T>> {
        match (self, T::DTYPE) {
            (AnyTensor::F32(t), Dtype::F32) => Some(t.cast()),
            (AnyTensor::F64(t), Dtype::F64) => Some(t.cast()),
            _ => None,
        }
    }
}

impl From<Tensor<f32>> for AnyTensor {
    fn from(t: Tensor<f32>) -> Self {
        AnyTensor::F32(t)
    }
}

impl From<Tensor<f64>> for AnyTensor {
    fn from(t: Tensor<f64>) -> Self {
        AnyTensor::F64(t)
    }
}

/// Named tensors plus a key=value manifest, in insertion order.
#[derive(Debug, Clone, Default)]
pub struct Container {
    entries: Vec<(String, AnyTensor)>,
    manifest: Vec<(String, String)>,
}

impl fmt::Display for Container {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "container: {} tensors", self.entries.len())?;
        for (name, t) in &self.entries {
            writeln!(f, "  {name}: {} {:?}", t.dtype(), t.shape())?;
        }
        for (k, v) in &self.manifest {
            writeln!(f, "  manifest {k}={v}")?;
        }
        Ok(())
    }
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add a named tensor; names must be unique within the container.
    pub fn add(&mut self, name: impl Into<String>, tensor: impl Into<AnyTensor>) -> Result<()> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::config("tensor name must be non-empty".to_string()));
        }
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(Error::config(format!("duplicate tensor name '{name}'")));
        }
        self.entries.push((name, tensor.into()));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&AnyTensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Fetch a tensor that must exist, as a data error otherwise.
    pub fn require(&self, name: &str) -> Result<&AnyTensor> {
        self.get(name)
            .ok_or_else(|| Error::data(format!("container is missing tensor '{name}'")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn entries(&self) -> &[(String, AnyTensor)] {
        &self.entries
    }

    pub fn set_manifest(&mut self, key: impl Into<String>, value: impl Into<String>) {
        let key = key.into();
        let value = value.into();
        if let Some(slot) = self.manifest.iter_mut().find(|(k, _)| *k == key) {
            slot.1 = value;
        } else {
            self.manifest.push((key, value));
        }
    }

    pub fn manifest(&self) -> &[(String, String)] {
        &self.manifest
    }

    pub fn manifest_get(&self, key: &str) -> Option<&str> {
        self.manifest
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// Manifest value parsed to a type, as a data error when missing or
    /// malformed.
    pub fn manifest_parse<F: std::str::FromStr>(&self, key: &str) -> Result<F> {
        let raw = self
            .manifest_get(key)
            .ok_or_else(|| Error::data(format!("manifest is missing key '{key}'")))?;
        raw.parse().map_err(|_| {
            Error::data(format!("manifest key '{key}' has unparsable value '{raw}'"))
        })
    }

    // ---- Serialization ----------------------------------------------------

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&u32::try_from(self.entries.len()).map_err(|_| {
            Error::config("too many tensors for the container format".to_string())
        })?
        .to_le_bytes());
        for (name, tensor) in &self.entries {
            let name_bytes = name.as_bytes();
            out.extend_from_slice(
                &u32::try_from(name_bytes.len())
                    .map_err(|_| Error::config(format!("tensor name '{name}' too long")))?
                    .to_le_bytes(),
            );
            out.extend_from_slice(name_bytes);
            out.push(tensor.dtype().code());
            let shape = tensor.shape();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &e in shape {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            match tensor {
                AnyTensor::F32(t) => {
                    for v in t.values() {
                        v.write_le(&mut out);
                    }
                }
                AnyTensor::F64(t) => {
                    for v in t.values() {
                        v.write_le(&mut out);
                    }
                }
            }
        }
        let manifest_text: String = self
            .manifest
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        let mb = manifest_text.as_bytes();
        out.extend_from_slice(
            &u32::try_from(mb.len())
                .map_err(|_| Error::config("manifest too large".to_string()))?
                .to_le_bytes(),
        );
        out.extend_from_slice(mb);
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::format(format!(
                "bad magic {magic:02x?}, expected {MAGIC:02x?}"
            )));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::format(format!(
                "unsupported container version {version}, expected {VERSION}"
            )));
        }
        let count = r.u32("entry count")? as usize;
        let mut container = Container::new();
        for i in 0..count {
            let name_len = r.u32("name length")? as usize;
            let name_bytes = r.take(name_len, "tensor name")?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|_| Error::format(format!("entry {i}: tensor name is not UTF-8")))?
                .to_string();
            let dtype_code = r.u8("dtype")?;
            let dtype = Dtype::from_code(dtype_code).ok_or_else(|| {
                Error::format(format!("entry '{name}': unknown dtype code {dtype_code}"))
            })?;
            let rank = r.u32("rank")? as usize;
            if rank > MAX_RANK {
                return Err(Error::format(format!(
                    "entry '{name}': rank {rank} exceeds the format limit {MAX_RANK}"
                )));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut len = 1usize;
            for d in 0..rank {
                let e = r.u64(&format!("extent {d} of '{name}'"))?;
                let e = usize::try_from(e).map_err(|_| {
                    Error::format(format!("entry '{name}': extent {e} does not fit in memory"))
                })?;
                if e == 0 {
                    return Err(Error::format(format!(
                        "entry '{name}': zero extent at axis {d}"
                    )));
                }
                len = len.checked_mul(e).ok_or_else(|| {
                    Error::format(format!("entry '{name}': element count overflows"))
                })?;
                shape.push(e);
            }
            let byte_len = len.checked_mul(dtype.size()).ok_or_else(|| {
                Error::format(format!("entry '{name}': payload size overflows"))
            })?;
            let raw = r.take(byte_len, &format!("values of '{name}'"))?;
            let tensor = match dtype {
                Dtype::F32 => {
                    let mut vals = Vec::with_capacity(len);
                    for c in raw.chunks_exact(4) {
                        vals.push(f32::read_le(c));
                    }
                    AnyTensor::F32(Tensor::from_vec(vals, &shape)?)
                }
                Dtype::F64 => {
                    let mut vals = Vec::with_capacity(len);
                    for c in raw.chunks_exact(8) {
                        vals.push(f64::read_le(c));
                    }
                    AnyTensor::F64(Tensor::from_vec(vals, &shape)?)
                }
            };
            container.add(name, tensor)?;
        }
        let manifest_len = r.u32("manifest length")? as usize;
        let manifest_raw = r.take(manifest_len, "manifest")?;
        let text = std::str::from_utf8(manifest_raw)
            .map_err(|_| Error::format("manifest is not UTF-8".to_string()))?;
        for (ln, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::format(format!(
                    "manifest line {} has no '=': {line:?}",
                    ln + 1
                )));
            };
            container.manifest.push((k.to_string(), v.to_string()));
        }
        if r.pos != buf.len() {
            return Err(Error::format(format!(
                "{} trailing bytes after the manifest",
                buf.len() - r.pos
            )));
        }
        Ok(container)
    }

    /// Write atomically: serialize, write a sibling temp file, rename over
    /// the target.
    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        std::fs::create_dir_all(dir)?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        std::fs::write(&tmp, &bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .ok_or_else(|| Error::format(format!("length overflow while reading {what}")))?;
        if end > self.buf.len() {
            return Err(Error::truncated(what));
        }
        let slice = &self.buf[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes([
            b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
        ]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Container {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut c = Container::new();
        c.add("latent", Tensor::<f32>::randn(&mut rng, &[4, 16, 63], 0.0, 1.0))
            .unwrap();
        c.add("stats", Tensor::<f64>::randn(&mut rng, &[7], 0.0, 3.0))
            .unwrap();
        c.set_manifest("preset", "eeg");
        c.set_manifest("width", "32");
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(bytes, back.to_bytes().unwrap());
        let AnyTensor::F32(orig) = c.get("latent").unwrap() else {
            panic!()
        };
        let AnyTensor::F32(read) = back.get("latent").unwrap() else {
            panic!()
        };
        assert_eq!(orig.shape(), read.shape());
        for (a, b) in orig.values().iter().zip(read.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(back.manifest_get("preset"), Some("eeg"));
        assert_eq!(back.manifest_get("width"), Some("32"));
    }

    #[test]
    fn round_trips_ranks_one_through_five_both_dtypes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let shapes: &[&[usize]] = &[&[3], &[2, 3], &[2, 3, 4], &[2, 2, 2, 3], &[2, 1, 2, 1, 3]];
        for shape in shapes {
            let mut c = Container::new();
            c.add("a32", Tensor::<f32>::randn(&mut rng, shape, 0.0, 1.0))
                .unwrap();
            c.add("a64", Tensor::<f64>::randn(&mut rng, shape, 0.0, 1.0))
                .unwrap();
            let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
            assert_eq!(c.to_bytes().unwrap(), back.to_bytes().unwrap());
            assert_eq!(back.get("a32").unwrap().shape(), *shape);
            assert_eq!(back.get("a64").unwrap().dtype(), Dtype::F64);
        }
    }

    #[test]
    fn corrupted_magic_is_a_format_error() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[0] = b'W';
        assert!(matches!(
            Container::from_bytes(&bytes),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn unknown_version_is_a_format_error() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4] = 9;
        assert!(matches!(
            Container::from_bytes(&bytes),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn unknown_dtype_is_a_format_error() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        // dtype byte of the first entry: magic(4) + version(4) + count(4) +
        // name_len(4) + "latent"(6)
        let pos = 4 + 4 + 4 + 4 + 6;
        let mut corrupted = bytes.clone();
        corrupted[pos] = 7;
        assert!(matches!(
            Container::from_bytes(&corrupted),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn truncation_is_an_io_error() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            match Container::from_bytes(&bytes[..cut]) {
                Err(Error::Io(e)) => {
                    assert_eq!(e.kind(), std::io::ErrorKind::UnexpectedEof)
                }
                other => panic!("cut at {cut}: expected EOF error, got {other:?}"),
            }
        }
    }

    #[test]
    fn trailing_garbage_is_a_format_error() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes.push(0);
        assert!(matches!(
            Container::from_bytes(&bytes),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn duplicate_names_are_rejected_at_add() {
        let mut c = Container::new();
        c.add("x", Tensor::<f32>::zeros(&[1])).unwrap();
        assert!(c.add("x", Tensor::<f32>::zeros(&[1])).is_err());
    }

    #[test]
    fn empty_container_round_trips() {
        let c = Container::new();
        let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back.entries().len(), 0);
        assert!(back.manifest().is_empty());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub").join("t.vibe");
        let c = sample();
        c.write(&path).unwrap();
        let back = Container::read(&path).unwrap();
        assert_eq!(c.to_bytes().unwrap(), back.to_bytes().unwrap());
    }

    #[test]
    fn manifest_value_with_equals_sign_survives() {
        let mut c = Container::new();
        c.set_manifest("cmd", "a=b=c");
        let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back.manifest_get("cmd"), Some("a=b=c"));
    }

    #[test]
    fn manifest_parse_reports_missing_and_malformed() {
        let mut c = Container::new();
        c.set_manifest("width", "32");
        assert_eq!(c.manifest_parse::<usize>("width").unwrap(), 32);
        assert!(matches!(
            c.manifest_parse::<usize>("absent"),
            Err(Error::Data(_))
        ));
        c.set_manifest("bad", "x9");
        assert!(matches!(
            c.manifest_parse::<f64>("bad"),
            Err(Error::Data(_))
        ));
    }
}
