//! Per-layer embedding container.
//!
//! Each layer is stored as two sibling files:
//!
//! - `<stem>.emb`: a 48-byte little-endian header followed by `count * dim`
//!   row-major `f32` values.
//! - `<stem>.idx`: UTF-8 text, one `row\tsentence_id\tposition\tsurface`
//!   record per line, rows ascending.
//!
//! Header layout:
//!
//! | bytes  | field                                   |
//! |--------|-----------------------------------------|
//! | 0..4   | magic `LCAE`                            |
//! | 4..8   | version `u32` (= 1)                     |
//! | 8..12  | layer `u32`                             |
//! | 12..16 | dim `u32`                               |
//! | 16..24 | count `u64`                             |
//! | 24     | level `u8` (0 frame, 1 subword, 2 word) |
//! | 25     | dtype `u8` (0 = f32)                    |
//! | 26..34 | stride seconds `f64` (0.0 when unused)  |
//! | 34..48 | reserved, zero                          |

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"LCAE";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 48;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: I/O error: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic {found:?}, expected \"LCAE\"")]
    BadMagic { path: PathBuf, found: [u8; 4] },
    #[error("{path}: unsupported format version {found}")]
    UnsupportedVersion { path: PathBuf, found: u32 },
    #[error("{path}: truncated payload: header declares {declared} bytes, file holds {actual}")]
    TruncatedPayload {
        path: PathBuf,
        declared: u128,
        actual: u64,
    },
    #[error("{path}: {actual} bytes of payload, header declares {declared}")]
    TrailingBytes {
        path: PathBuf,
        declared: u128,
        actual: u64,
    },
    #[error("{path}: malformed header: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },
    #[error("{path}:{line}: index row {row} out of range for {count} matrix rows")]
    IndexRowOutOfRange {
        path: PathBuf,
        line: usize,
        row: u64,
        count: u64,
    },
    #[error("{path}:{line}: malformed index record: {reason}")]
    MalformedIndex {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("invariant violation: {0}")]
    Invariant(String),
}

/// Granularity of the rows in a layer file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Frame,
    Subword,
    Word,
}

impl Level {
    fn code(self) -> u8 {
        match self {
            Level::Frame => 0,
            Level::Subword => 1,
            Level::Word => 2,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Level::Frame),
            1 => Some(Level::Subword),
            2 => Some(Level::Word),
            _ => None,
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Level::Frame => "frame",
            Level::Subword => "subword",
            Level::Word => "word",
        })
    }
}

/// One layer's `count x dim` representation matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    /// 0 is the embedding layer output, 1..L the encoder blocks.
    pub layer: u32,
    pub dim: u32,
    pub count: u64,
    /// Row-major, `count * dim` entries.
    pub values: Vec<f32>,
    pub level: Level,
    /// Frame hop in seconds; present exactly when `level` is `Frame`.
    pub stride_seconds: Option<f64>,
}

impl EmbeddingMatrix {
    pub fn new(layer: u32, dim: u32, values: Vec<f32>, level: Level) -> Result<Self, StoreError> {
        if dim == 0 {
            return Err(StoreError::Invariant("dim must be positive".into()));
        }
        if !values.len().is_multiple_of(dim as usize) {
            return Err(StoreError::Invariant(format!(
                "{} values do not form rows of dim {dim}",
                values.len()
            )));
        }
        let m = Self {
            layer,
            dim,
            count: (values.len() / dim as usize) as u64,
            values,
            level,
            stride_seconds: None,
        };
        Ok(m)
    }

    pub fn with_stride(mut self, stride_seconds: f64) -> Self {
        self.stride_seconds = Some(stride_seconds);
        self
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.dim as usize;
        &self.values[i * d..(i + 1) * d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.values.chunks_exact(self.dim as usize)
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<(), StoreError> {
        if self.dim == 0 {
            return Err(StoreError::Invariant("dim must be positive".into()));
        }
        let expected = (self.count as u128) * (self.dim as u128);
        if self.values.len() as u128 != expected {
            return Err(StoreError::Invariant(format!(
                "{} values, expected count*dim = {expected}",
                self.values.len()
            )));
        }
        if let Some(pos) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(StoreError::Invariant(format!(
                "non-finite value {} at row {}, column {}",
                self.values[pos],
                pos / self.dim as usize,
                pos % self.dim as usize
            )));
        }
        match (self.level, self.stride_seconds) {
            (Level::Frame, None) => {
                return Err(StoreError::Invariant(
                    "frame-level matrix requires stride_seconds".into(),
                ))
            }
            (Level::Frame, Some(s)) if !(s.is_finite() && s > 0.0) => {
                return Err(StoreError::Invariant(format!(
                    "stride_seconds must be positive, got {s}"
                )))
            }
            (Level::Subword | Level::Word, Some(_)) => {
                return Err(StoreError::Invariant(format!(
                    "stride_seconds only allowed at frame level, matrix is {}",
                    self.level
                )))
            }
            _ => {}
        }
        Ok(())
    }
}

/// Identity of a word occurrence across taxonomies and layers.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct OccurrenceKey {
    pub sentence_id: String,
    pub position: u32,
}

impl fmt::Display for OccurrenceKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.sentence_id, self.position)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenOccurrence {
    pub sentence_id: String,
    pub position: u32,
    pub surface: String,
    /// Row of this occurrence in the layer matrices.
    pub row: u64,
}

impl TokenOccurrence {
    pub fn new(sentence_id: impl Into<String>, position: u32, surface: impl Into<String>, row: u64) -> Self {
        Self {
            sentence_id: sentence_id.into(),
            position,
            surface: surface.into(),
            row,
        }
    }

    pub fn key(&self) -> OccurrenceKey {
        OccurrenceKey {
            sentence_id: self.sentence_id.clone(),
            position: self.position,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenIndex {
    pub entries: Vec<TokenOccurrence>,
}

impl TokenIndex {
    pub fn new(entries: Vec<TokenOccurrence>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, TokenOccurrence> {
        self.entries.iter()
    }

    /// Checks row uniqueness and range, key uniqueness, and that text fields
    /// can be written as tab-separated records.
    pub fn validate(&self, count: u64) -> Result<(), StoreError> {
        let mut rows = HashSet::with_capacity(self.entries.len());
        let mut keys = HashSet::with_capacity(self.entries.len());
        for occ in &self.entries {
            if occ.row >= count {
                return Err(StoreError::Invariant(format!(
                    "index row {} out of range for {count} rows",
                    occ.row
                )));
            }
            if !rows.insert(occ.row) {
                return Err(StoreError::Invariant(format!("duplicate index row {}", occ.row)));
            }
            if !keys.insert((occ.sentence_id.as_str(), occ.position)) {
                return Err(StoreError::Invariant(format!(
                    "duplicate occurrence {}:{}",
                    occ.sentence_id, occ.position
                )));
            }
            for (name, field) in [("sentence_id", &occ.sentence_id), ("surface", &occ.surface)] {
                if field.contains(['\t', '\n', '\r']) {
                    return Err(StoreError::Invariant(format!(
                        "{name} {field:?} contains a tab or line break"
                    )));
                }
            }
            if occ.sentence_id.is_empty() {
                return Err(StoreError::Invariant(format!("empty sentence_id at row {}", occ.row)));
            }
        }
        Ok(())
    }

    pub fn by_key(&self) -> BTreeMap<OccurrenceKey, &TokenOccurrence> {
        self.entries.iter().map(|o| (o.key(), o)).collect()
    }
}

fn with_ext(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

pub fn emb_path(stem: &Path) -> PathBuf {
    with_ext(stem, "emb")
}

pub fn idx_path(stem: &Path) -> PathBuf {
    with_ext(stem, "idx")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn encode_header(m: &EmbeddingMatrix) -> [u8; HEADER_LEN] {
    let mut h = [0u8; HEADER_LEN];
    h[0..4].copy_from_slice(&MAGIC);
    h[4..8].copy_from_slice(&VERSION.to_le_bytes());
    h[8..12].copy_from_slice(&m.layer.to_le_bytes());
    h[12..16].copy_from_slice(&m.dim.to_le_bytes());
    h[16..24].copy_from_slice(&m.count.to_le_bytes());
    h[24] = m.level.code();
    h[25] = DTYPE_F32;
    h[26..34].copy_from_slice(&m.stride_seconds.unwrap_or(0.0).to_le_bytes());
    h
}

/// Writes `<stem>.emb` and `<stem>.idx`.
///
/// Both files are staged next to their targets and renamed into place only
/// after everything has been written, so a rejected or failed write leaves
/// no partial file behind.
pub fn write_layer(matrix: &EmbeddingMatrix, index: &TokenIndex, stem: &Path) -> Result<(), StoreError> {
    matrix.validate()?;
    index.validate(matrix.count)?;
    if matrix.level != Level::Frame && index.len() as u64 != matrix.count {
        return Err(StoreError::Invariant(format!(
            "{}-level matrix has {} rows but index has {} entries",
            matrix.level,
            matrix.count,
            index.len()
        )));
    }

    let emb = emb_path(stem);
    let idx = idx_path(stem);
    let emb_tmp = with_ext(&emb, "tmp");
    let idx_tmp = with_ext(&idx, "tmp");
    if let Some(dir) = emb.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }

    let result = (|| {
        {
            let file = File::create(&emb_tmp).map_err(io_err(&emb_tmp))?;
            let mut w = BufWriter::new(file);
            w.write_all(&encode_header(matrix)).map_err(io_err(&emb_tmp))?;
            for v in &matrix.values {
                w.write_all(&v.to_le_bytes()).map_err(io_err(&emb_tmp))?;
            }
            w.flush().map_err(io_err(&emb_tmp))?;
        }
        {
            let mut sorted: Vec<&TokenOccurrence> = index.entries.iter().collect();
            sorted.sort_by_key(|o| o.row);
            let file = File::create(&idx_tmp).map_err(io_err(&idx_tmp))?;
            let mut w = BufWriter::new(file);
            for o in sorted {
                writeln!(w, "{}\t{}\t{}\t{}", o.row, o.sentence_id, o.position, o.surface)
                    .map_err(io_err(&idx_tmp))?;
            }
            w.flush().map_err(io_err(&idx_tmp))?;
        }
        fs::rename(&emb_tmp, &emb).map_err(io_err(&emb))?;
        fs::rename(&idx_tmp, &idx).map_err(io_err(&idx))?;
        Ok(())
    })();
    if result.is_err() {
        let _ = fs::remove_file(&emb_tmp);
        let _ = fs::remove_file(&idx_tmp);
    }
    result
}

/// Header fields of a `.emb` file, checked against the file length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerHeader {
    pub layer: u32,
    pub dim: u32,
    pub count: u64,
    pub level: Level,
    pub stride_seconds: Option<f64>,
}

fn decode_header(path: &Path, h: &[u8; HEADER_LEN], file_len: u64) -> Result<LayerHeader, StoreError> {
    let found: [u8; 4] = h[0..4].try_into().unwrap();
    if found != MAGIC {
        return Err(StoreError::BadMagic {
            path: path.to_path_buf(),
            found,
        });
    }
    let version = u32::from_le_bytes(h[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(StoreError::UnsupportedVersion {
            path: path.to_path_buf(),
            found: version,
        });
    }
    let malformed = |reason: String| StoreError::MalformedHeader {
        path: path.to_path_buf(),
        reason,
    };
    let layer = u32::from_le_bytes(h[8..12].try_into().unwrap());
    let dim = u32::from_le_bytes(h[12..16].try_into().unwrap());
    let count = u64::from_le_bytes(h[16..24].try_into().unwrap());
    let level = Level::from_code(h[24]).ok_or_else(|| malformed(format!("unknown level code {}", h[24])))?;
    if h[25] != DTYPE_F32 {
        return Err(malformed(format!("unsupported dtype code {}", h[25])));
    }
    let stride = f64::from_le_bytes(h[26..34].try_into().unwrap());
    if h[34..48].iter().any(|&b| b != 0) {
        return Err(malformed("reserved bytes are not zero".into()));
    }
    if dim == 0 {
        return Err(malformed("dim is zero".into()));
    }
    let stride_seconds = match level {
        Level::Frame => {
            if !(stride.is_finite() && stride > 0.0) {
                return Err(malformed(format!("frame level with stride {stride}")));
            }
            Some(stride)
        }
        _ => {
            if stride != 0.0 {
                return Err(malformed(format!("{level} level with non-zero stride {stride}")));
            }
            None
        }
    };

    // u128 cannot overflow for u64 * u32 * 4.
    let declared = count as u128 * dim as u128 * 4;
    let actual = file_len.saturating_sub(HEADER_LEN as u64);
    if declared > actual as u128 {
        return Err(StoreError::TruncatedPayload {
            path: path.to_path_buf(),
            declared,
            actual,
        });
    }
    if declared < actual as u128 {
        return Err(StoreError::TrailingBytes {
            path: path.to_path_buf(),
            declared,
            actual,
        });
    }
    Ok(LayerHeader {
        layer,
        dim,
        count,
        level,
        stride_seconds,
    })
}

fn open_emb(path: &Path) -> Result<(File, LayerHeader), StoreError> {
    let mut file = File::open(path).map_err(io_err(path))?;
    let file_len = file.metadata().map_err(io_err(path))?.len();
    let mut h = [0u8; HEADER_LEN];
    if file_len < HEADER_LEN as u64 {
        let mut found = [0u8; 4];
        let n = file.read(&mut found).map_err(io_err(path))?;
        if n < 4 || found != MAGIC {
            return Err(StoreError::BadMagic {
                path: path.to_path_buf(),
                found,
            });
        }
        return Err(StoreError::MalformedHeader {
            path: path.to_path_buf(),
            reason: format!("file is {file_len} bytes, header needs {HEADER_LEN}"),
        });
    }
    file.read_exact(&mut h).map_err(io_err(path))?;
    let header = decode_header(path, &h, file_len)?;
    Ok((file, header))
}

/// Reads and validates only the header of `<stem>.emb`.
pub fn read_header(stem: &Path) -> Result<LayerHeader, StoreError> {
    open_emb(&emb_path(stem)).map(|(_, h)| h)
}

pub fn read_index(path: &Path, count: u64) -> Result<TokenIndex, StoreError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut entries = Vec::new();
    let mut prev_row: Option<u64> = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        let malformed = |reason: String| StoreError::MalformedIndex {
            path: path.to_path_buf(),
            line: lineno,
            reason,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(malformed(format!("expected 4 tab-separated fields, found {}", fields.len())));
        }
        let row: u64 = fields[0]
            .parse()
            .map_err(|_| malformed(format!("bad row {:?}", fields[0])))?;
        let position: u32 = fields[2]
            .parse()
            .map_err(|_| malformed(format!("bad position {:?}", fields[2])))?;
        if row >= count {
            return Err(StoreError::IndexRowOutOfRange {
                path: path.to_path_buf(),
                line: lineno,
                row,
                count,
            });
        }
        if prev_row.is_some_and(|p| p >= row) {
            return Err(malformed(format!("rows not strictly ascending at row {row}")));
        }
        prev_row = Some(row);
        entries.push(TokenOccurrence::new(fields[1], position, fields[3], row));
    }
    let index = TokenIndex::new(entries);
    index
        .validate(count)
        .map_err(|e| StoreError::MalformedIndex {
            path: path.to_path_buf(),
            line: 0,
            reason: e.to_string(),
        })?;
    Ok(index)
}

/// Reads `<stem>.emb` and `<stem>.idx`.
///
/// The header is checked against the file length before the payload buffer
/// is allocated.
pub fn read_layer(stem: &Path) -> Result<(EmbeddingMatrix, TokenIndex), StoreError> {
    let path = emb_path(stem);
    let (file, header) = open_emb(&path)?;
    let n = (header.count as usize)
        .checked_mul(header.dim as usize)
        .ok_or_else(|| StoreError::MalformedHeader {
            path: path.clone(),
            reason: "count * dim overflows".into(),
        })?;
    let mut bytes = Vec::with_capacity(n * 4);
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(io_err(&path))?;
    if bytes.len() != n * 4 {
        return Err(StoreError::TruncatedPayload {
            path,
            declared: (n * 4) as u128,
            actual: bytes.len() as u64,
        });
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let matrix = EmbeddingMatrix {
        layer: header.layer,
        dim: header.dim,
        count: header.count,
        values,
        level: header.level,
        stride_seconds: header.stride_seconds,
    };
    matrix.validate().map_err(|e| StoreError::MalformedHeader {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    let index = read_index(&idx_path(stem), matrix.count)?;
    Ok((matrix, index))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerReport {
    pub stem: PathBuf,
    pub layer: Option<u32>,
    pub dim: Option<u32>,
    pub count: Option<u64>,
    pub level: Option<Level>,
    pub index_len: Option<usize>,
    pub violations: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StoreReport {
    pub layers: Vec<LayerReport>,
    /// Problems spanning several files.
    pub inconsistencies: Vec<String>,
}

impl StoreReport {
    pub fn is_clean(&self) -> bool {
        self.inconsistencies.is_empty() && self.layers.iter().all(|l| l.violations.is_empty())
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = self.inconsistencies.clone();
        for l in &self.layers {
            for v in &l.violations {
                out.push(format!("{}: {v}", l.stem.display()));
            }
        }
        out
    }
}

/// Lists the layer stems (paths without extension) of the `.emb` files in `dir`,
/// sorted by file name.
pub fn layer_stems(dir: &Path) -> Result<Vec<PathBuf>, StoreError> {
    let mut stems = Vec::new();
    let rd = match fs::read_dir(dir) {
        Ok(rd) => rd,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(stems),
        Err(e) => return Err(io_err(dir)(e)),
    };
    for entry in rd {
        let path = entry.map_err(io_err(dir))?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == "emb") {
            stems.push(path.with_extension(""));
        }
    }
    stems.sort();
    Ok(stems)
}

/// Checks every layer file in `dir`. Problems are report content, not errors.
pub fn validate_store(dir: &Path) -> StoreReport {
    let mut report = StoreReport::default();
    let stems = match layer_stems(dir) {
        Ok(s) => s,
        Err(e) => {
            report.inconsistencies.push(e.to_string());
            return report;
        }
    };
    let mut word_indices: Vec<(PathBuf, TokenIndex)> = Vec::new();
    let mut seen_layers: BTreeMap<u32, PathBuf> = BTreeMap::new();
    for stem in stems {
        let mut lr = LayerReport {
            stem: stem.clone(),
            layer: None,
            dim: None,
            count: None,
            level: None,
            index_len: None,
            violations: Vec::new(),
        };
        match read_layer(&stem) {
            Ok((m, idx)) => {
                lr.layer = Some(m.layer);
                lr.dim = Some(m.dim);
                lr.count = Some(m.count);
                lr.level = Some(m.level);
                lr.index_len = Some(idx.len());
                if m.level != Level::Frame && idx.len() as u64 != m.count {
                    lr.violations.push(format!(
                        "{} rows but {} index entries",
                        m.count,
                        idx.len()
                    ));
                }
                if let Some(prev) = seen_layers.insert(m.layer, stem.clone()) {
                    report.inconsistencies.push(format!(
                        "layer {} stored twice: {} and {}",
                        m.layer,
                        prev.display(),
                        stem.display()
                    ));
                }
                if m.level == Level::Word {
                    word_indices.push((stem.clone(), idx));
                }
            }
            Err(e) => {
                if let Ok(h) = read_header(&stem) {
                    lr.layer = Some(h.layer);
                    lr.dim = Some(h.dim);
                    lr.count = Some(h.count);
                    lr.level = Some(h.level);
                }
                lr.violations.push(e.to_string());
            }
        }
        report.layers.push(lr);
    }
    if let Some((first_stem, first)) = word_indices.first() {
        for (stem, idx) in &word_indices[1..] {
            if idx.len() != first.len() {
                report.inconsistencies.push(format!(
                    "word-level count mismatch: {} has {} occurrences, {} has {}",
                    first_stem.display(),
                    first.len(),
                    stem.display(),
                    idx.len()
                ));
            } else if idx != first {
                report.inconsistencies.push(format!(
                    "word-level token index of {} differs from {}",
                    stem.display(),
                    first_stem.display()
                ));
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (EmbeddingMatrix, TokenIndex) {
        let m = EmbeddingMatrix::new(3, 2, vec![1.0, 2.0, 3.0, 4.0], Level::Word).unwrap();
        let idx = TokenIndex::new(vec![
            TokenOccurrence::new("s1", 0, "the", 0),
            TokenOccurrence::new("s1", 1, "cat", 1),
        ]);
        (m, idx)
    }

    #[test]
    fn smallest_matrix_is_56_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("l0");
        let m = EmbeddingMatrix::new(0, 2, vec![1.0, 2.0], Level::Word).unwrap();
        let idx = TokenIndex::new(vec![TokenOccurrence::new("s", 0, "a", 0)]);
        write_layer(&m, &idx, &stem).unwrap();
        let bytes = fs::read(emb_path(&stem)).unwrap();
        assert_eq!(bytes.len(), 56);
        assert_eq!(&bytes[0..4], b"LCAE");
        assert_eq!(&bytes[48..52], &1.0f32.to_le_bytes());
        let (m2, idx2) = read_layer(&stem).unwrap();
        assert_eq!(m2, m);
        assert_eq!(idx2, idx);
    }

    #[test]
    fn frame_matrix_with_empty_index() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("f");
        let m = EmbeddingMatrix::new(1, 2, vec![1.0, 2.0], Level::Frame)
            .unwrap()
            .with_stride(0.02);
        write_layer(&m, &TokenIndex::default(), &stem).unwrap();
        assert_eq!(fs::read(emb_path(&stem)).unwrap().len(), 56);
        let (m2, idx) = read_layer(&stem).unwrap();
        assert_eq!(m2.stride_seconds, Some(0.02));
        assert!(idx.is_empty());
    }

    #[test]
    fn nan_rejected_and_nothing_written() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("bad");
        let m = EmbeddingMatrix::new(0, 2, vec![1.0, f32::NAN], Level::Subword).unwrap();
        let idx = TokenIndex::new(vec![TokenOccurrence::new("s", 0, "a", 0)]);
        assert!(matches!(write_layer(&m, &idx, &stem), Err(StoreError::Invariant(_))));
        assert!(fs::read_dir(dir.path()).unwrap().next().is_none());
    }

    #[test]
    fn stride_only_at_frame_level() {
        let m = EmbeddingMatrix::new(0, 1, vec![1.0], Level::Word).unwrap().with_stride(0.02);
        assert!(m.validate().is_err());
        let m = EmbeddingMatrix::new(0, 1, vec![1.0], Level::Frame).unwrap();
        assert!(m.validate().is_err());
    }

    #[test]
    fn bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("x");
        let (m, idx) = small();
        write_layer(&m, &idx, &stem).unwrap();
        let mut bytes = fs::read(emb_path(&stem)).unwrap();
        bytes[0..4].copy_from_slice(b"XXXX");
        fs::write(emb_path(&stem), bytes).unwrap();
        assert!(matches!(read_layer(&stem), Err(StoreError::BadMagic { .. })));
    }

    #[test]
    fn unsupported_version() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("x");
        let (m, idx) = small();
        write_layer(&m, &idx, &stem).unwrap();
        let mut bytes = fs::read(emb_path(&stem)).unwrap();
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        fs::write(emb_path(&stem), bytes).unwrap();
        assert!(matches!(
            read_layer(&stem),
            Err(StoreError::UnsupportedVersion { found: 2, .. })
        ));
    }

    #[test]
    fn truncated_payload() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("x");
        let (m, idx) = small();
        write_layer(&m, &idx, &stem).unwrap();
        let bytes = fs::read(emb_path(&stem)).unwrap();
        fs::write(emb_path(&stem), &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(read_layer(&stem), Err(StoreError::TruncatedPayload { .. })));
    }

    #[test]
    fn index_row_out_of_range() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("x");
        let (m, idx) = small();
        write_layer(&m, &idx, &stem).unwrap();
        fs::write(idx_path(&stem), "0\ts1\t0\tthe\n7\ts1\t1\tcat\n").unwrap();
        assert!(matches!(
            read_layer(&stem),
            Err(StoreError::IndexRowOutOfRange { row: 7, count: 2, .. })
        ));
    }

    #[test]
    fn index_must_cover_word_rows() {
        let dir = tempfile::tempdir().unwrap();
        let (m, mut idx) = small();
        idx.entries.pop();
        assert!(write_layer(&m, &idx, &dir.path().join("x")).is_err());
    }

    #[test]
    fn empty_directory_validates_clean() {
        let dir = tempfile::tempdir().unwrap();
        let report = validate_store(dir.path());
        assert!(report.layers.is_empty());
        assert!(report.is_clean());
    }

    #[test]
    fn mismatched_word_counts_flagged() {
        let dir = tempfile::tempdir().unwrap();
        let (m, idx) = small();
        write_layer(&m, &idx, &dir.path().join("layer_00")).unwrap();
        let mut m2 = EmbeddingMatrix::new(4, 2, vec![1.0, 2.0], Level::Word).unwrap();
        m2.layer = 4;
        let idx2 = TokenIndex::new(vec![TokenOccurrence::new("s1", 0, "the", 0)]);
        write_layer(&m2, &idx2, &dir.path().join("layer_01")).unwrap();
        let report = validate_store(dir.path());
        assert_eq!(report.layers.len(), 2);
        assert!(!report.is_clean());
        assert!(report.inconsistencies[0].contains("count mismatch"));
    }
}
