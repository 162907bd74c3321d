//! Binary containers for matrices, region features and checkpoints, each
//! paired with a JSON sidecar at `<path>.json`. Reals are stored as
//! little-endian `f32`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::corpus::ConceptEntry;
use crate::error::{CvseError, Result};
use crate::numeric::Matrix;

pub const MATRIX_MAGIC: &[u8; 8] = b"CVSEMAT1";
pub const FEATURE_MAGIC: &[u8; 8] = b"CVSEFEAT";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CVSECKPT";

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CvseError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CvseError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CvseError::Format { path: path.display().to_string(), msg: e.to_string() })
}

struct Writer {
    path: PathBuf,
    out: BufWriter<fs::File>,
}

impl Writer {
    fn create(path: &Path) -> Result<Self> {
        let file = fs::File::create(path).map_err(|e| CvseError::io(path, e))?;
        Ok(Writer { path: path.to_owned(), out: BufWriter::new(file) })
    }

    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.out.write_all(b).map_err(|e| CvseError::io(&self.path, e))
    }

    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v)
            .map_err(|_| CvseError::Format { path: self.path.display().to_string(), msg: format!("{v} exceeds u32") })?;
        self.bytes(&v.to_le_bytes())
    }

    fn reals(&mut self, m: &Matrix) -> Result<()> {
        let mut buf = Vec::with_capacity(m.len() * 4);
        for &v in m.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        self.bytes(&buf)
    }

    fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| CvseError::io(&self.path, e))
    }
}

struct Reader {
    path: PathBuf,
    inp: BufReader<fs::File>,
}

impl Reader {
    fn open(path: &Path, magic: &[u8; 8]) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| CvseError::io(path, e))?;
        let mut r = Reader { path: path.to_owned(), inp: BufReader::new(file) };
        let mut head = [0u8; 8];
        r.exact(&mut head)?;
        if &head != magic {
            return Err(r.format(format!("bad magic, expected {}", String::from_utf8_lossy(magic))));
        }
        Ok(r)
    }

    fn format(&self, msg: String) -> CvseError {
        CvseError::Format { path: self.path.display().to_string(), msg }
    }

    fn exact(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inp.read_exact(buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => self.format("truncated file".into()),
            _ => CvseError::io(&self.path, e),
        })
    }

    /// Reads a u32, or `None` at a clean end of file.
    fn try_u32(&mut self) -> Result<Option<usize>> {
        let mut b = [0u8; 4];
        let mut filled = 0;
        while filled < 4 {
            let n = self.inp.read(&mut b[filled..]).map_err(|e| CvseError::io(&self.path, e))?;
            if n == 0 {
                return if filled == 0 { Ok(None) } else { Err(self.format("truncated file".into())) };
            }
            filled += n;
        }
        Ok(Some(u32::from_le_bytes(b) as usize))
    }

    fn u32(&mut self) -> Result<usize> {
        self.try_u32()?.ok_or_else(|| self.format("truncated file".into()))
    }

    fn reals(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let mut buf = vec![0u8; rows * cols * 4];
        self.exact(&mut buf)?;
        let data: Vec<f64> = buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(self.format("non-finite value".into()));
        }
        Matrix::from_vec(rows, cols, data)
    }

    fn expect_end(&mut self) -> Result<()> {
        let mut b = [0u8; 1];
        match self.inp.read(&mut b).map_err(|e| CvseError::io(&self.path, e))? {
            0 => Ok(()),
            _ => Err(self.format("trailing bytes".into())),
        }
    }
}

/// Writes a single matrix plus its sidecar describing the build stage.
pub fn write_matrix<T: Serialize>(path: &Path, m: &Matrix, sidecar: &T) -> Result<()> {
    let mut w = Writer::create(path)?;
    w.bytes(MATRIX_MAGIC)?;
    w.u32(m.rows())?;
    w.u32(m.cols())?;
    w.reals(m)?;
    w.finish()?;
    write_json(&sidecar_path(path), sidecar)
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    let mut r = Reader::open(path, MATRIX_MAGIC)?;
    let (rows, cols) = (r.u32()?, r.u32()?);
    let m = r.reals(rows, cols)?;
    r.expect_end()?;
    Ok(m)
}

/// Per-image region features, all of size `M×F`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub ids: Vec<String>,
    pub regions: Vec<Matrix>,
}

impl FeatureSet {
    pub fn new(ids: Vec<String>, regions: Vec<Matrix>) -> Result<Self> {
        if ids.len() != regions.len() {
            return Err(CvseError::shape("feature set", (ids.len(), 1), (regions.len(), 1)));
        }
        if let Some(first) = regions.first() {
            if let Some(bad) = regions.iter().find(|r| r.shape() != first.shape()) {
                return Err(CvseError::shape("feature set", first.shape(), bad.shape()));
            }
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(CvseError::DataIntegrity(vec![format!("duplicate feature id `{dup}`")]));
        }
        Ok(FeatureSet { ids, regions })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// `(M, F)`, or zeros for an empty set.
    pub fn region_shape(&self) -> (usize, usize) {
        self.regions.first().map_or((0, 0), Matrix::shape)
    }

    pub fn index(&self) -> BTreeMap<String, usize> {
        self.ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect()
    }
}

pub fn write_features(path: &Path, features: &FeatureSet) -> Result<()> {
    let (m, f) = features.region_shape();
    let mut w = Writer::create(path)?;
    w.bytes(FEATURE_MAGIC)?;
    w.u32(features.len())?;
    w.u32(m)?;
    w.u32(f)?;
    for r in &features.regions {
        w.reals(r)?;
    }
    w.finish()?;
    write_json(&sidecar_path(path), &features.index())
}

pub fn read_features(path: &Path) -> Result<FeatureSet> {
    let mut r = Reader::open(path, FEATURE_MAGIC)?;
    let (count, m, f) = (r.u32()?, r.u32()?, r.u32()?);
    let regions = (0..count).map(|_| r.reals(m, f)).collect::<Result<Vec<_>>>()?;
    r.expect_end()?;
    let index: BTreeMap<String, usize> = read_json(&sidecar_path(path))?;
    let mut ids = vec![None; count];
    for (id, i) in index {
        let slot = ids.get_mut(i).ok_or_else(|| r.format(format!("sidecar index {i} out of range for `{id}`")))?;
        if slot.replace(id).is_some() {
            return Err(r.format(format!("sidecar maps two ids to record {i}")));
        }
    }
    let ids = ids
        .into_iter()
        .enumerate()
        .map(|(i, id)| id.ok_or_else(|| r.format(format!("record {i} has no id in sidecar"))))
        .collect::<Result<Vec<_>>>()?;
    FeatureSet::new(ids, regions)
}

/// Checkpoint sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub epoch: usize,
    pub step: u64,
    pub text_vocab: Vec<String>,
    pub concepts: Vec<ConceptEntry>,
    pub config: serde_json::Value,
}

pub fn write_checkpoint(path: &Path, sections: &[(String, &Matrix)], meta: &CheckpointMeta) -> Result<()> {
    let mut w = Writer::create(path)?;
    w.bytes(CHECKPOINT_MAGIC)?;
    for (name, m) in sections {
        w.u32(name.len())?;
        w.bytes(name.as_bytes())?;
        w.u32(m.rows())?;
        w.u32(m.cols())?;
        w.reals(m)?;
    }
    w.finish()?;
    write_json(&sidecar_path(path), meta)
}

pub fn read_checkpoint(path: &Path) -> Result<(Vec<(String, Matrix)>, CheckpointMeta)> {
    let mut r = Reader::open(path, CHECKPOINT_MAGIC)?;
    let mut sections = Vec::new();
    while let Some(len) = r.try_u32()? {
        let mut name = vec![0u8; len];
        r.exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| r.format("section name is not UTF-8".into()))?;
        let (rows, cols) = (r.u32()?, r.u32()?);
        sections.push((name, r.reals(rows, cols)?));
    }
    let meta = read_json(&sidecar_path(path))?;
    Ok((sections, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f32_exact(rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|i| i as f64 * 0.25 - 1.5).collect()).unwrap()
    }

    #[test]
    fn matrix_round_trip_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.mat");
        let m = f32_exact(3, 4);
        write_matrix(&path, &m, &serde_json::json!({"stage": "E"})).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], b"CVSEMAT1");
        assert_eq!(&bytes[8..16], &[3, 0, 0, 0, 4, 0, 0, 0]);
        assert_eq!(bytes.len(), 16 + 12 * 4);
        assert_eq!(read_matrix(&path).unwrap(), m);
        let side: serde_json::Value = read_json(&sidecar_path(&path)).unwrap();
        assert_eq!(side["stage"], "E");
    }

    #[test]
    fn bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.mat");
        fs::write(&path, b"NOTAMAGIC").unwrap();
        assert_eq!(read_matrix(&path).unwrap_err().code(), "E_FORMAT");
        let mut good = Vec::from(&b"CVSEMAT1"[..]);
        good.extend_from_slice(&[2, 0, 0, 0, 2, 0, 0, 0, 0, 0]);
        fs::write(&path, good).unwrap();
        assert_eq!(read_matrix(&path).unwrap_err().code(), "E_FORMAT");
    }

    #[test]
    fn features_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        let set = FeatureSet::new(vec!["b".into(), "a".into()], vec![f32_exact(2, 3), f32_exact(2, 3).scale(2.0)]).unwrap();
        write_features(&path, &set).unwrap();
        assert_eq!(read_features(&path).unwrap(), set);
        assert!(FeatureSet::new(vec!["a".into(), "a".into()], vec![f32_exact(1, 1), f32_exact(1, 1)]).is_err());
        assert!(FeatureSet::new(vec!["a".into(), "b".into()], vec![f32_exact(1, 1), f32_exact(1, 2)]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let (a, b) = (f32_exact(2, 2), f32_exact(1, 3));
        let meta = CheckpointMeta {
            config_hash: "abc".into(),
            epoch: 3,
            step: 12,
            text_vocab: vec!["<unk>".into()],
            concepts: vec![ConceptEntry { token: "dog".into(), kind: crate::corpus::ConceptType::Object, frequency: 2 }],
            config: serde_json::json!({}),
        };
        write_checkpoint(&path, &[("w".into(), &a), ("b.x".into(), &b)], &meta).unwrap();
        let (sections, back) = read_checkpoint(&path).unwrap();
        assert_eq!(back, meta);
        assert_eq!(sections, vec![("w".to_string(), a), ("b.x".to_string(), b)]);
    }
}
