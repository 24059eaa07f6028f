//! Checkpoint container: named tensors in a single flat file.
//!
//!   ┌──────────────┬──────────────────────┬───────────────────────┐
//!   │ 8 bytes      │ N bytes              │ raw tensor payloads   │
//!   │ header size  │ JSON header (UTF-8)  │ (contiguous, LE)      │
//!   │ (u64 LE)     │                      │                       │
//!   └──────────────┴──────────────────────┴───────────────────────┘
//!
//! Header entries: name → {"dtype": "F64"|"F32"|"F16"|"BF16",
//! "shape": [ints], "data_offsets": [begin, end]}, plus an optional
//! "__metadata__" string map. Offsets are relative to the end of the
//! header. On write, header keys are sorted lexicographically and
//! payloads are laid out in that order, so identical maps serialize to
//! identical bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::{self, Deserializer, MapAccess, Visitor};
use serde::Deserialize;
use thiserror::Error;

use crate::dtype::DType;

const MAX_HEADER_LEN: u64 = 100_000_000;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated payload for tensor '{name}': need {needed} bytes, file has {available}")]
    TruncatedPayload {
        name: String,
        needed: u64,
        available: u64,
    },
    #[error("unknown dtype code '{0}'")]
    UnknownDtype(String),
    #[error("duplicate tensor name '{0}'")]
    DuplicateTensorName(String),
    #[error("invalid shape for tensor '{name}': {reason}")]
    InvalidShape { name: String, reason: String },
    #[error("tensor '{0}' not found")]
    MissingTensor(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

// ── tensor data ─────────────────────────────────────────────────────────────

/// One stored tensor: shape, storage dtype, and the exact little-endian
/// byte payload. The f64 working view is materialized on demand and never
/// written back, so stored bytes stay bit-identical through a merge.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    dtype: DType,
    shape: Vec<usize>,
    raw: Vec<u8>,
}

impl TensorEntry {
    pub fn from_raw(dtype: DType, shape: Vec<usize>, raw: Vec<u8>) -> Result<Self> {
        let count = validate_shape("<raw>", &shape)?;
        let needed = count * dtype.byte_width();
        if raw.len() != needed {
            return Err(CheckpointError::InvalidShape {
                name: "<raw>".into(),
                reason: format!(
                    "payload is {} bytes but shape {:?} as {} needs {}",
                    raw.len(),
                    shape,
                    dtype.as_str(),
                    needed
                ),
            });
        }
        Ok(TensorEntry { dtype, shape, raw })
    }

    /// Encode f64 values into storage (round-to-nearest-even when the
    /// dtype is narrower than f64).
    pub fn from_f64(dtype: DType, shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        let count = validate_shape("<values>", &shape)?;
        if values.len() != count {
            return Err(CheckpointError::InvalidShape {
                name: "<values>".into(),
                reason: format!("{} values for shape {:?}", values.len(), shape),
            });
        }
        Ok(TensorEntry {
            dtype,
            shape,
            raw: dtype.encode(values),
        })
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn raw(&self) -> &[u8] {
        &self.raw
    }

    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }

    /// Promote the stored payload to f64 (exact for every supported dtype).
    pub fn working(&self) -> Vec<f64> {
        self.dtype.decode(&self.raw)
    }

    pub fn value_at(&self, idx: usize) -> f64 {
        self.dtype.decode_at(&self.raw, idx)
    }

    /// Raw bytes of element `idx`.
    pub fn element_bytes(&self, idx: usize) -> &[u8] {
        let w = self.dtype.byte_width();
        &self.raw[idx * w..(idx + 1) * w]
    }
}

fn validate_shape(name: &str, shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(CheckpointError::InvalidShape {
            name: name.into(),
            reason: "rank 0".into(),
        });
    }
    let mut count = 1usize;
    for &d in shape {
        if d == 0 {
            return Err(CheckpointError::InvalidShape {
                name: name.into(),
                reason: "zero-sized dim".into(),
            });
        }
        count = count
            .checked_mul(d)
            .ok_or_invalid(name, "element count overflows")?;
    }
    Ok(count)
}

trait OkOrInvalid<T> {
    fn ok_or_invalid(self, name: &str, reason: &str) -> Result<T>;
}

impl<T> OkOrInvalid<T> for Option<T> {
    fn ok_or_invalid(self, name: &str, reason: &str) -> Result<T> {
        self.ok_or_else(|| CheckpointError::InvalidShape {
            name: name.into(),
            reason: reason.into(),
        })
    }
}

/// An ordered (lexicographic by name) collection of tensors plus optional
/// string metadata. Immutable after construction; share freely across
/// threads.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorMap {
    entries: BTreeMap<String, TensorEntry>,
    metadata: Option<BTreeMap<String, String>>,
}

impl TensorMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, entry: TensorEntry) -> Result<()> {
        let name = name.into();
        if name.is_empty() {
            return Err(CheckpointError::InvalidShape {
                name,
                reason: "empty tensor name".into(),
            });
        }
        if self.entries.contains_key(&name) {
            return Err(CheckpointError::DuplicateTensorName(name));
        }
        self.entries.insert(name, entry);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&TensorEntry> {
        self.entries.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &TensorEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn metadata(&self) -> Option<&BTreeMap<String, String>> {
        self.metadata.as_ref()
    }

    pub fn set_metadata(&mut self, metadata: Option<BTreeMap<String, String>>) {
        self.metadata = metadata;
    }
}

// ── alignment ───────────────────────────────────────────────────────────────

/// How two checkpoints' name sets relate. The four lists partition the
/// union of both key sets.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AlignmentReport {
    /// Present in both with identical shape (dtype may differ).
    pub matched: Vec<String>,
    pub base_only: Vec<String>,
    pub secondary_only: Vec<String>,
    pub shape_mismatch: Vec<(String, Vec<usize>, Vec<usize>)>,
}

pub fn align(base: &TensorMap, secondary: &TensorMap) -> AlignmentReport {
    let mut report = AlignmentReport::default();
    let names: BTreeSet<&str> = base.names().chain(secondary.names()).collect();
    for name in names {
        match (base.get(name), secondary.get(name)) {
            (Some(b), Some(s)) => {
                if b.shape() == s.shape() {
                    report.matched.push(name.into());
                } else {
                    report
                        .shape_mismatch
                        .push((name.into(), b.shape().to_vec(), s.shape().to_vec()));
                }
            }
            (Some(_), None) => report.base_only.push(name.into()),
            (None, Some(_)) => report.secondary_only.push(name.into()),
            (None, None) => unreachable!(),
        }
    }
    report
}

// ── header parsing ──────────────────────────────────────────────────────────

#[derive(Debug, Deserialize)]
struct RawEntry {
    dtype: String,
    shape: Vec<u64>,
    data_offsets: [u64; 2],
}

#[derive(Debug, Default)]
struct RawHeader {
    metadata: Option<BTreeMap<String, String>>,
    entries: Vec<(String, RawEntry)>,
}

// serde_json's map type silently drops duplicate keys, so the header is
// parsed with an explicit visitor that rejects them.
impl<'de> Deserialize<'de> for RawHeader {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct HeaderVisitor;

        impl<'de> Visitor<'de> for HeaderVisitor {
            type Value = RawHeader;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("checkpoint header object")
            }

            fn visit_map<A: MapAccess<'de>>(
                self,
                mut map: A,
            ) -> std::result::Result<RawHeader, A::Error> {
                let mut header = RawHeader::default();
                let mut seen = BTreeSet::new();
                while let Some(key) = map.next_key::<String>()? {
                    if !seen.insert(key.clone()) {
                        return Err(de::Error::custom(format!("duplicate key {key}")));
                    }
                    if key == "__metadata__" {
                        header.metadata = Some(map.next_value()?);
                    } else {
                        header.entries.push((key, map.next_value()?));
                    }
                }
                Ok(header)
            }
        }

        d.deserialize_map(HeaderVisitor)
    }
}

struct TocEntry {
    dtype: DType,
    shape: Vec<usize>,
    begin: u64,
    end: u64,
}

type Metadata = BTreeMap<String, String>;

fn parse_header(bytes: &[u8]) -> Result<(BTreeMap<String, TocEntry>, Option<Metadata>)> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| CheckpointError::MalformedHeader(format!("header is not UTF-8: {e}")))?;
    let raw: RawHeader = serde_json::from_str(text).map_err(|e| {
        let msg = e.to_string();
        if msg.contains("duplicate key ") {
            let name = msg
                .split("duplicate key ")
                .nth(1)
                .unwrap_or("")
                .split(' ')
                .next()
                .unwrap_or("");
            CheckpointError::DuplicateTensorName(name.to_string())
        } else {
            CheckpointError::MalformedHeader(msg)
        }
    })?;

    let mut toc = BTreeMap::new();
    for (name, entry) in raw.entries {
        if name.is_empty() {
            return Err(CheckpointError::MalformedHeader("empty tensor name".into()));
        }
        let dtype = DType::from_tag(&entry.dtype)
            .ok_or_else(|| CheckpointError::UnknownDtype(entry.dtype.clone()))?;
        let shape: Vec<usize> = entry.shape.iter().map(|&d| d as usize).collect();
        let count = validate_shape(&name, &shape)?;
        let [begin, end] = entry.data_offsets;
        let span = end.checked_sub(begin).ok_or_else(|| {
            CheckpointError::MalformedHeader(format!("offsets reversed for '{name}'"))
        })?;
        if span != (count * dtype.byte_width()) as u64 {
            return Err(CheckpointError::MalformedHeader(format!(
                "offsets span {span} bytes but '{name}' needs {}",
                count * dtype.byte_width()
            )));
        }
        toc.insert(
            name,
            TocEntry {
                dtype,
                shape,
                begin,
                end,
            },
        );
    }

    // payloads must tile [0, payload_len) without gaps or overlap
    let mut spans: Vec<(u64, u64, &str)> = toc
        .iter()
        .map(|(n, e)| (e.begin, e.end, n.as_str()))
        .collect();
    spans.sort_unstable();
    let mut cursor = 0u64;
    for (begin, end, name) in spans {
        if begin != cursor {
            return Err(CheckpointError::MalformedHeader(format!(
                "payload of '{name}' starts at {begin}, expected {cursor}"
            )));
        }
        cursor = end;
    }

    Ok((toc, raw.metadata))
}

fn build_header_json(
    entries: &[(String, DType, Vec<usize>)],
    metadata: Option<&BTreeMap<String, String>>,
) -> (Vec<u8>, Vec<(u64, u64)>) {
    use serde_json::{json, Map, Value};

    let mut offsets = Vec::with_capacity(entries.len());
    let mut obj = Map::new();
    if let Some(md) = metadata {
        obj.insert("__metadata__".into(), json!(md));
    }
    let mut cursor = 0u64;
    for (name, dtype, shape) in entries {
        let count: usize = shape.iter().product();
        let len = (count * dtype.byte_width()) as u64;
        let begin = cursor;
        cursor += len;
        offsets.push((begin, cursor));
        obj.insert(
            name.clone(),
            json!({
                "dtype": dtype.as_str(),
                "shape": shape,
                "data_offsets": [begin, cursor],
            }),
        );
    }
    // serde_json maps are BTree-backed: keys come out sorted
    let header = serde_json::to_string(&Value::Object(obj)).expect("header serialization");
    (header.into_bytes(), offsets)
}

// ── whole-map load / save ───────────────────────────────────────────────────

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TensorMap> {
    let reader = CheckpointReader::open(path)?;
    let mut map = TensorMap::new();
    map.set_metadata(reader.metadata().cloned());
    for name in reader.tensor_names() {
        let entry = reader.read_entry(&name)?;
        map.insert(name, entry)?;
    }
    Ok(map)
}

pub fn save_checkpoint(map: &TensorMap, path: impl AsRef<Path>) -> Result<()> {
    let metas: Vec<(String, DType, Vec<usize>)> = map
        .iter()
        .map(|(n, e)| (n.to_string(), e.dtype(), e.shape().to_vec()))
        .collect();
    let mut writer = CheckpointWriter::create(path, &metas, map.metadata().cloned())?;
    for (name, entry) in map.iter() {
        writer.write_entry(name, entry)?;
    }
    writer.finish()
}

// ── streaming reader ────────────────────────────────────────────────────────

/// Random-access view over a checkpoint file. Reads use positioned I/O,
/// so a shared reference can serve multiple threads.
pub struct CheckpointReader {
    file: File,
    payload_start: u64,
    payload_len: u64,
    toc: BTreeMap<String, TocEntry>,
    metadata: Option<BTreeMap<String, String>>,
}

impl CheckpointReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let mut file = File::open(path.as_ref()).map_err(|e| {
            std::io::Error::new(e.kind(), format!("{}: {e}", path.as_ref().display()))
        })?;
        let mut len_buf = [0u8; 8];
        file.read_exact(&mut len_buf).map_err(|_| {
            CheckpointError::MalformedHeader("file too short for header length".into())
        })?;
        let header_len = u64::from_le_bytes(len_buf);
        if header_len > MAX_HEADER_LEN {
            return Err(CheckpointError::MalformedHeader(format!(
                "header length {header_len} is unreasonable"
            )));
        }
        let mut header = vec![0u8; header_len as usize];
        file.read_exact(&mut header)
            .map_err(|_| CheckpointError::MalformedHeader("truncated header".into()))?;
        let (toc, metadata) = parse_header(&header)?;

        let file_len = file.metadata()?.len();
        let payload_start = 8 + header_len;
        let payload_len = file_len.saturating_sub(payload_start);
        for (name, entry) in &toc {
            if entry.end > payload_len {
                return Err(CheckpointError::TruncatedPayload {
                    name: name.clone(),
                    needed: entry.end,
                    available: payload_len,
                });
            }
        }

        Ok(CheckpointReader {
            file,
            payload_start,
            payload_len,
            toc,
            metadata,
        })
    }

    pub fn tensor_names(&self) -> Vec<String> {
        self.toc.keys().cloned().collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.toc.contains_key(name)
    }

    pub fn shape(&self, name: &str) -> Option<&[usize]> {
        self.toc.get(name).map(|e| e.shape.as_slice())
    }

    pub fn dtype(&self, name: &str) -> Option<DType> {
        self.toc.get(name).map(|e| e.dtype)
    }

    pub fn metadata(&self) -> Option<&BTreeMap<String, String>> {
        self.metadata.as_ref()
    }

    pub fn payload_len(&self) -> u64 {
        self.payload_len
    }

    pub fn read_entry(&self, name: &str) -> Result<TensorEntry> {
        let toc = self
            .toc
            .get(name)
            .ok_or_else(|| CheckpointError::MissingTensor(name.into()))?;
        let mut buf = vec![0u8; (toc.end - toc.begin) as usize];
        read_exact_at(&self.file, &mut buf, self.payload_start + toc.begin)?;
        TensorEntry::from_raw(toc.dtype, toc.shape.clone(), buf)
    }
}

#[cfg(unix)]
fn read_exact_at(file: &File, buf: &mut [u8], offset: u64) -> std::io::Result<()> {
    use std::os::unix::fs::FileExt;
    file.read_exact_at(buf, offset)
}

#[cfg(not(unix))]
fn read_exact_at(file: &File, buf: &mut [u8], offset: u64) -> std::io::Result<()> {
    use std::io::{Seek, SeekFrom};
    let mut f = file.try_clone()?;
    f.seek(SeekFrom::Start(offset))?;
    f.read_exact(buf)
}

// ── streaming writer ────────────────────────────────────────────────────────

/// Writes a checkpoint one tensor at a time. The header (with final
/// offsets) goes out first, so callers must declare every tensor up
/// front and then supply payloads in lexicographic name order. Output
/// lands in a temp file renamed into place on `finish`, so a failed run
/// leaves nothing behind.
pub struct CheckpointWriter {
    out: Option<BufWriter<File>>,
    tmp_path: PathBuf,
    final_path: PathBuf,
    expected: Vec<(String, DType, Vec<usize>)>,
    next: usize,
}

impl CheckpointWriter {
    pub fn create(
        path: impl AsRef<Path>,
        entries: &[(String, DType, Vec<usize>)],
        metadata: Option<BTreeMap<String, String>>,
    ) -> Result<Self> {
        let final_path = path.as_ref().to_path_buf();
        let mut sorted = entries.to_vec();
        sorted.sort_by(|a, b| a.0.cmp(&b.0));
        for pair in sorted.windows(2) {
            if pair[0].0 == pair[1].0 {
                return Err(CheckpointError::DuplicateTensorName(pair[0].0.clone()));
            }
        }
        for (name, _, shape) in &sorted {
            validate_shape(name, shape)?;
        }

        let (header, _) = build_header_json(&sorted, metadata.as_ref());
        let file_name = final_path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "checkpoint".into());
        let tmp_path = final_path.with_file_name(format!(".{file_name}.partial"));

        let file = File::create(&tmp_path)?;
        let mut out = BufWriter::new(file);
        out.write_all(&(header.len() as u64).to_le_bytes())?;
        out.write_all(&header)?;

        Ok(CheckpointWriter {
            out: Some(out),
            tmp_path,
            final_path,
            expected: sorted,
            next: 0,
        })
    }

    /// Payloads must arrive in the declared (sorted) order.
    pub fn write_entry(&mut self, name: &str, entry: &TensorEntry) -> Result<()> {
        let (exp_name, exp_dtype, exp_shape) =
            self.expected.get(self.next).cloned().ok_or_else(|| {
                CheckpointError::MissingTensor(format!("unexpected extra tensor '{name}'"))
            })?;
        if name != exp_name || entry.dtype() != exp_dtype || entry.shape() != exp_shape {
            return Err(CheckpointError::InvalidShape {
                name: name.into(),
                reason: format!("expected '{exp_name}' {exp_dtype:?} {exp_shape:?} next"),
            });
        }
        self.out
            .as_mut()
            .expect("writer already finished")
            .write_all(entry.raw())?;
        self.next += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        if self.next != self.expected.len() {
            return Err(CheckpointError::MissingTensor(
                self.expected[self.next].0.clone(),
            ));
        }
        let out = self.out.take().expect("writer already finished");
        let file = out
            .into_inner()
            .map_err(|e| CheckpointError::Io(e.into_error()))?;
        file.sync_all()?;
        drop(file);
        fs::rename(&self.tmp_path, &self.final_path)?;
        Ok(())
    }
}

impl Drop for CheckpointWriter {
    fn drop(&mut self) {
        if self.out.is_some() {
            // unfinished: drop the handle, then remove the partial file
            self.out = None;
            let _ = fs::remove_file(&self.tmp_path);
        }
    }
}
