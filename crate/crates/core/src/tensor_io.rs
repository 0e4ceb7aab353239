//! Binary dense-tensor files and label manifests.
//!
//! Tensor file layout (little-endian):
//! - magic: `b"DTN1"`
//! - rank: u32
//! - dims: rank * u64
//! - payload: product(dims) * f64, row-major
//!
//! A manifest is a text file with one `label<TAB>path` record per line.
//! Relative paths resolve against the manifest's directory. Blank lines and
//! lines starting with `#` are skipped, except for an optional
//! `# class_count=N` line which bounds the accepted labels.

use std::fs::File;
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"DTN1";

#[derive(Debug, Error)]
pub enum TensorIoError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated payload: expected {expected} values, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("manifest line {line}: label {label} out of range (class_count {class_count:?})")]
    LabelOutOfRange {
        line: usize,
        label: i64,
        class_count: Option<usize>,
    },
    #[error("inconsistent channel dims: expected {expected}, found {found} in {path}")]
    InconsistentChannels {
        expected: usize,
        found: usize,
        path: PathBuf,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> TensorIoError + '_ {
    move |source| TensorIoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Row-major dense tensor of f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorIoError> {
        if shape.is_empty() {
            return Err(TensorIoError::InvalidShape("rank 0 tensors are not supported".into()));
        }
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| TensorIoError::InvalidShape(format!("{shape:?} overflows")))?;
        if len != data.len() {
            return Err(TensorIoError::InvalidShape(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self, TensorIoError> {
        let len = shape.iter().product();
        Self::new(shape, vec![0.0; len])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Trailing (channel) dimension.
    pub fn channels(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    /// Interprets the tensor as an `H x W x C` feature map. Rank-2 tensors are
    /// read as `1 x W x C`.
    pub fn as_feature_map(&self) -> Result<(usize, usize, usize), TensorIoError> {
        match *self.shape.as_slice() {
            [h, w, c] => Ok((h, w, c)),
            [w, c] => Ok((1, w, c)),
            _ => Err(TensorIoError::InvalidShape(format!(
                "expected H x W x C feature map, got {:?}",
                self.shape
            ))),
        }
    }

    fn check_finite(&self) -> Result<(), TensorIoError> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(TensorIoError::NonFinite {
                index,
                value: self.data[index],
            }),
            None => Ok(()),
        }
    }
}

pub fn encode_tensor<W: Write>(t: &DenseTensor, mut w: W) -> io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
    for &d in &t.shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in &t.data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()
}

pub fn decode_tensor(bytes: &[u8]) -> Result<DenseTensor, TensorIoError> {
    let mut cursor = bytes;
    let mut take = |n: usize, what: &str| -> Result<&[u8], TensorIoError> {
        if cursor.len() < n {
            return Err(TensorIoError::MalformedHeader(format!("file ends inside {what}")));
        }
        let (head, rest) = cursor.split_at(n);
        cursor = rest;
        Ok(head)
    };
    if take(4, "magic")? != MAGIC {
        return Err(TensorIoError::MalformedHeader("bad magic bytes".into()));
    }
    let rank = u32::from_le_bytes(take(4, "rank")?.try_into().unwrap()) as usize;
    if rank == 0 {
        return Err(TensorIoError::MalformedHeader("rank 0".into()));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = u64::from_le_bytes(take(8, "dims")?.try_into().unwrap());
        let d = usize::try_from(d)
            .map_err(|_| TensorIoError::MalformedHeader(format!("dimension {d} too large")))?;
        shape.push(d);
    }
    let expected = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| TensorIoError::MalformedHeader(format!("shape {shape:?} overflows")))?;
    let payload = cursor;
    let needed = expected
        .checked_mul(8)
        .ok_or_else(|| TensorIoError::MalformedHeader(format!("shape {shape:?} overflows")))?;
    if payload.len() < needed {
        return Err(TensorIoError::TruncatedPayload {
            expected,
            found: payload.len() / 8,
        });
    }
    if payload.len() > needed {
        return Err(TensorIoError::MalformedHeader(format!(
            "{} trailing bytes after payload",
            payload.len() - needed
        )));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let t = DenseTensor { shape, data };
    t.check_finite()?;
    Ok(t)
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<DenseTensor, TensorIoError> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    decode_tensor(&bytes)
}

pub fn save_tensor(t: &DenseTensor, path: impl AsRef<Path>) -> Result<(), TensorIoError> {
    let path = path.as_ref();
    if t.shape.is_empty() {
        return Err(TensorIoError::InvalidShape("rank 0 tensors are not supported".into()));
    }
    let file = File::create(path).map_err(io_err(path))?;
    encode_tensor(t, BufWriter::new(file)).map_err(io_err(path))
}

/// Labelled tensors, typically one feature map per image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledSetCollection {
    pub sets: Vec<(usize, DenseTensor)>,
    pub class_count: usize,
}

impl LabeledSetCollection {
    /// Builds a collection, checking label range and channel consistency.
    pub fn new(sets: Vec<(usize, DenseTensor)>, class_count: usize) -> Result<Self, TensorIoError> {
        let mut channels = None;
        for (idx, (label, t)) in sets.iter().enumerate() {
            if *label >= class_count {
                return Err(TensorIoError::LabelOutOfRange {
                    line: idx + 1,
                    label: *label as i64,
                    class_count: Some(class_count),
                });
            }
            match channels {
                None => channels = Some(t.channels()),
                Some(c) if c != t.channels() => {
                    return Err(TensorIoError::InconsistentChannels {
                        expected: c,
                        found: t.channels(),
                        path: PathBuf::from(format!("<entry {idx}>")),
                    })
                }
                _ => {}
            }
        }
        Ok(Self { sets, class_count })
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn channels(&self) -> Option<usize> {
        self.sets.first().map(|(_, t)| t.channels())
    }

    /// Indices of the sets carrying each label.
    pub fn by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.class_count];
        for (i, (label, _)) in self.sets.iter().enumerate() {
            out[*label].push(i);
        }
        out
    }
}

pub fn load_collection(manifest: impl AsRef<Path>) -> Result<LabeledSetCollection, TensorIoError> {
    let manifest = manifest.as_ref();
    let mut text = String::new();
    File::open(manifest)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(io_err(manifest))?;
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));

    let mut declared: Option<usize> = None;
    let mut entries = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(comment) = trimmed.strip_prefix('#') {
            if let Some(n) = comment.trim().strip_prefix("class_count=") {
                declared = Some(n.trim().parse().map_err(|_| TensorIoError::Manifest {
                    line,
                    message: format!("bad class_count {n:?}"),
                })?);
            }
            continue;
        }
        let (label, rel) = raw.split_once('\t').ok_or_else(|| TensorIoError::Manifest {
            line,
            message: "expected `label<TAB>path`".into(),
        })?;
        let label: i64 = label.trim().parse().map_err(|_| TensorIoError::Manifest {
            line,
            message: format!("bad label {label:?}"),
        })?;
        if label < 0 || declared.is_some_and(|n| label as usize >= n) {
            return Err(TensorIoError::LabelOutOfRange {
                line,
                label,
                class_count: declared,
            });
        }
        entries.push((line, label as usize, base.join(rel.trim())));
    }

    let mut sets = Vec::with_capacity(entries.len());
    let mut channels = None;
    for (_, label, path) in entries {
        let t = load_tensor(&path)?;
        match channels {
            None => channels = Some(t.channels()),
            Some(c) if c != t.channels() => {
                return Err(TensorIoError::InconsistentChannels {
                    expected: c,
                    found: t.channels(),
                    path,
                })
            }
            _ => {}
        }
        sets.push((label, t));
    }
    let observed = sets.iter().map(|(l, _)| l + 1).max().unwrap_or(0);
    let class_count = declared.unwrap_or(0).max(observed);
    Ok(LabeledSetCollection { sets, class_count })
}

/// Writes every tensor as `set_<index>.dtn` next to a `manifest.tsv`, returning
/// the manifest path.
pub fn save_collection(
    col: &LabeledSetCollection,
    dir: impl AsRef<Path>,
) -> Result<PathBuf, TensorIoError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let manifest = dir.join("manifest.tsv");
    let mut out = format!("# class_count={}\n", col.class_count);
    for (i, (label, t)) in col.sets.iter().enumerate() {
        let name = format!("set_{i:05}.dtn");
        save_tensor(t, dir.join(&name))?;
        out.push_str(&format!("{label}\t{name}\n"));
    }
    std::fs::write(&manifest, out).map_err(io_err(&manifest))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bytes_of(t: &DenseTensor) -> Vec<u8> {
        let mut buf = Vec::new();
        encode_tensor(t, &mut buf).unwrap();
        buf
    }

    #[test]
    fn single_zero_roundtrip() {
        let t = DenseTensor::new(vec![1], vec![0.0]).unwrap();
        let back = decode_tensor(&bytes_of(&t)).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn layout_is_row_major_little_endian() {
        let t = DenseTensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = bytes_of(&t);
        assert_eq!(&b[..4], b"DTN1");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(b[8..16].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(b[16..24].try_into().unwrap()), 2);
        let payload: Vec<f64> = b[24..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        assert_eq!(payload, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn product_rule_payload_length() {
        let t = DenseTensor::zeros(vec![5, 5, 64]).unwrap();
        assert_eq!(t.len(), 1600);
        assert_eq!(bytes_of(&t).len(), 4 + 4 + 3 * 8 + 1600 * 8);
    }

    #[test]
    fn empty_shape_rejected() {
        assert!(matches!(
            DenseTensor::new(vec![], vec![]),
            Err(TensorIoError::InvalidShape(_))
        ));
    }

    #[test]
    fn truncated_payload_detected() {
        let t = DenseTensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut b = bytes_of(&t);
        b.truncate(b.len() - 8);
        assert!(matches!(
            decode_tensor(&b),
            Err(TensorIoError::TruncatedPayload { expected: 4, found: 3 })
        ));
    }

    #[test]
    fn malformed_header_variants() {
        assert!(matches!(decode_tensor(b"DT"), Err(TensorIoError::MalformedHeader(_))));
        assert!(matches!(
            decode_tensor(b"XXXX\x01\0\0\0"),
            Err(TensorIoError::MalformedHeader(_))
        ));
        let t = DenseTensor::new(vec![1], vec![1.0]).unwrap();
        let mut b = bytes_of(&t);
        b.extend_from_slice(&2.0f64.to_le_bytes());
        assert!(matches!(decode_tensor(&b), Err(TensorIoError::MalformedHeader(_))));
    }

    #[test]
    fn non_finite_names_index() {
        let mut t = DenseTensor::new(vec![3], vec![0.0, 1.0, 2.0]).unwrap();
        t.data_mut()[2] = f64::NAN;
        match decode_tensor(&bytes_of(&t)) {
            Err(TensorIoError::NonFinite { index, .. }) => assert_eq!(index, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn manifest_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let a = DenseTensor::zeros(vec![2, 2, 64]).unwrap();
        let b = DenseTensor::zeros(vec![2, 2, 32]).unwrap();
        save_tensor(&a, dir.path().join("a.dtn")).unwrap();
        save_tensor(&b, dir.path().join("b.dtn")).unwrap();

        let m = dir.path().join("ok.tsv");
        std::fs::write(&m, "0\ta.dtn\n1\ta.dtn\n").unwrap();
        let col = load_collection(&m).unwrap();
        assert_eq!(col.len(), 2);
        assert!(col.class_count >= 2);

        std::fs::write(&m, "0\ta.dtn\n1\tb.dtn\n").unwrap();
        assert!(matches!(
            load_collection(&m),
            Err(TensorIoError::InconsistentChannels { expected: 64, found: 32, .. })
        ));

        std::fs::write(&m, "# class_count=2\n0\ta.dtn\n2\ta.dtn\n").unwrap();
        assert!(matches!(load_collection(&m), Err(TensorIoError::LabelOutOfRange { label: 2, .. })));
        std::fs::write(&m, "-1\ta.dtn\n").unwrap();
        assert!(matches!(load_collection(&m), Err(TensorIoError::LabelOutOfRange { label: -1, .. })));

        std::fs::write(&m, "").unwrap();
        let empty = load_collection(&m).unwrap();
        assert!(empty.is_empty());
        assert_eq!(empty.class_count, 0);
    }

    #[test]
    fn save_collection_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let t = DenseTensor::new(vec![1, 2, 2], vec![1.0, -2.0, 3.5, 4.0]).unwrap();
        let col = LabeledSetCollection::new(vec![(0, t.clone()), (2, t)], 3).unwrap();
        let path = save_collection(&col, dir.path()).unwrap();
        assert_eq!(load_collection(path).unwrap(), col);
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(
            shape in prop::collection::vec(1usize..4, 1..4),
            seed in any::<u64>(),
        ) {
            let len: usize = shape.iter().product();
            let data: Vec<f64> = (0..len)
                .map(|i| f64::from_bits(seed.wrapping_mul(i as u64 + 1) >> 2) - 0.5)
                .map(|v| if v.is_finite() { v } else { 0.0 })
                .collect();
            let t = DenseTensor::new(shape, data).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("t.dtn");
            save_tensor(&t, &p).unwrap();
            let back = load_tensor(&p).unwrap();
            prop_assert_eq!(
                back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
            prop_assert_eq!(back.shape(), t.shape());
        }
    }
}
