//! Latent dataset storage and sequence pooling.
//!
//! LTNT layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "LTNT"
//! 4       4     version (u32, currently 1)
//! 8       4     count   (u32)
//! 12      4     dim     (u32)
//! 16      4*n   count*dim IEEE-754 f32 values, row-major
//! ```
//!
//! The provenance tag is not part of the binary layout. When non-empty it is
//! written to a `<path>.tag` sidecar and picked up again on read.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const LTNT_MAGIC: [u8; 4] = *b"LTNT";
pub const LTNT_VERSION: u32 = 1;
pub const LTNT_HEADER_LEN: usize = 16;

/// A dense `count x dim` matrix of embedding vectors.
///
/// Values are held at disk precision (f32) so that a read/write cycle is
/// bit-exact; numerical code widens rows to f64 on access.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentDataset {
    dim: usize,
    data: Vec<f32>,
    pub tag: String,
}

impl LatentDataset {
    /// Builds a dataset from row-major values, rejecting non-finite entries.
    pub fn new(dim: usize, data: Vec<f32>, tag: impl Into<String>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Argument("latent dimension must be positive".into()));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::Shape {
                expected: dim * (data.len() / dim + 1),
                actual: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation {
                row: pos / dim,
                message: format!("non-finite value {} at column {}", data[pos], pos % dim),
            });
        }
        Ok(Self {
            dim,
            data,
            tag: tag.into(),
        })
    }

    pub fn empty(dim: usize) -> Result<Self> {
        Self::new(dim, Vec::new(), "")
    }

    /// Builds a dataset from f64 rows, rounding to f32.
    pub fn from_rows<R: AsRef<[f64]>>(dim: usize, rows: &[R]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::Validation {
                    row: i,
                    message: format!("expected {dim} columns, found {}", r.len()),
                });
            }
            data.extend(r.iter().map(|&v| v as f32));
        }
        Self::new(dim, data, "")
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.tag = tag.into();
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| f64::from(v)).collect()
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn rows_f64(&self) -> Vec<Vec<f64>> {
        (0..self.count()).map(|i| self.row_f64(i)).collect()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// Selects rows by index, e.g. for train/test splitting.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            dim: self.dim,
            data,
            tag: self.tag.clone(),
        }
    }
}

/// Header fields of an LTNT file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LatentHeader {
    pub version: u32,
    pub count: u32,
    pub dim: u32,
}

fn parse_header(bytes: &[u8]) -> Result<LatentHeader> {
    if bytes.len() < LTNT_HEADER_LEN {
        return Err(Error::Format(format!(
            "file too short for LTNT header ({} bytes)",
            bytes.len()
        )));
    }
    if bytes[0..4] != LTNT_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"LTNT\"",
            String::from_utf8_lossy(&bytes[0..4])
        )));
    }
    let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let header = LatentHeader {
        version: word(4),
        count: word(8),
        dim: word(12),
    };
    if header.version != LTNT_VERSION {
        return Err(Error::Format(format!(
            "unsupported LTNT version {}",
            header.version
        )));
    }
    if header.dim == 0 {
        return Err(Error::Format("LTNT dim must be positive".into()));
    }
    Ok(header)
}

fn tag_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".tag");
    PathBuf::from(s)
}

/// Reads only the 16-byte header.
pub fn read_header(path: impl AsRef<Path>) -> Result<LatentHeader> {
    let path = path.as_ref();
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::with_capacity(LTNT_HEADER_LEN);
    f.by_ref()
        .take(LTNT_HEADER_LEN as u64)
        .read_to_end(&mut buf)
        .map_err(|e| Error::io(path, e))?;
    parse_header(&buf)
}

pub fn decode_latents(bytes: &[u8]) -> Result<LatentDataset> {
    let header = parse_header(bytes)?;
    let n = (header.count as usize)
        .checked_mul(header.dim as usize)
        .ok_or_else(|| Error::Format("count*dim overflows".into()))?;
    let expected = LTNT_HEADER_LEN + 4 * n;
    if bytes.len() != expected {
        return Err(Error::Corrupt(format!(
            "payload is {} bytes, header implies {}",
            bytes.len() - LTNT_HEADER_LEN,
            expected - LTNT_HEADER_LEN
        )));
    }
    let data: Vec<f32> = bytes[LTNT_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    LatentDataset::new(header.dim as usize, data, "")
}

pub fn encode_latents(dataset: &LatentDataset) -> Result<Vec<u8>> {
    let count = u32::try_from(dataset.count())
        .map_err(|_| Error::Argument("row count exceeds u32".into()))?;
    let dim =
        u32::try_from(dataset.dim()).map_err(|_| Error::Argument("dim exceeds u32".into()))?;
    let mut out = Vec::with_capacity(LTNT_HEADER_LEN + 4 * dataset.data.len());
    out.extend_from_slice(&LTNT_MAGIC);
    out.extend_from_slice(&LTNT_VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    for v in &dataset.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn read_latents(path: impl AsRef<Path>) -> Result<LatentDataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut ds = decode_latents(&bytes)?;
    let tp = tag_path(path);
    ds.tag = match fs::read_to_string(&tp) {
        Ok(t) => t.trim_end().to_string(),
        Err(_) => path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
    };
    Ok(ds)
}

pub fn write_latents(dataset: &LatentDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_latents(dataset)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    if !dataset.tag.is_empty() {
        let tp = tag_path(path);
        fs::write(&tp, format!("{}\n", dataset.tag)).map_err(|e| Error::io(tp, e))?;
    }
    Ok(())
}

/// Parses the CSV fixture format: one row per line, comma-separated.
/// Blank lines and lines starting with `#` are skipped.
pub fn parse_csv_latents(text: &str) -> Result<LatentDataset> {
    let mut dim = None;
    let mut data = Vec::new();
    let mut row = 0;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut n = 0;
        for field in line.split(',') {
            let v: f32 = field.trim().parse().map_err(|_| Error::Validation {
                row,
                message: format!("cannot parse {:?} as a number", field.trim()),
            })?;
            data.push(v);
            n += 1;
        }
        match dim {
            None => dim = Some(n),
            Some(d) if d != n => {
                return Err(Error::Validation {
                    row,
                    message: format!("expected {d} columns, found {n}"),
                })
            }
            _ => {}
        }
        row += 1;
    }
    let dim = dim.ok_or_else(|| Error::Format("CSV file has no rows".into()))?;
    LatentDataset::new(dim, data, "")
}

pub fn read_csv_latents(path: impl AsRef<Path>) -> Result<LatentDataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ds = parse_csv_latents(&text)?;
    let tag = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(ds.with_tag(tag))
}

/// Reads `.csv` files with the CSV fallback and everything else as LTNT.
pub fn load_latents(path: impl AsRef<Path>) -> Result<LatentDataset> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("csv") => read_csv_latents(path),
        _ => read_latents(path),
    }
}

/// Per-token hidden states of one tokenized input plus its attention mask.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    hidden: LatentDataset,
    mask: Vec<bool>,
}

impl TokenSequence {
    pub fn new(hidden: LatentDataset, mask: Vec<bool>) -> Result<Self> {
        if hidden.count() == 0 {
            return Err(Error::DegenerateInput("sequence has no tokens".into()));
        }
        if hidden.count() != mask.len() {
            return Err(Error::Shape {
                expected: hidden.count(),
                actual: mask.len(),
            });
        }
        Ok(Self { hidden, mask })
    }

    /// A sequence with every token unmasked.
    pub fn unmasked(hidden: LatentDataset) -> Result<Self> {
        let n = hidden.count();
        Self::new(hidden, vec![true; n])
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.hidden.dim()
    }

    pub fn hidden(&self) -> &LatentDataset {
        &self.hidden
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }
}

/// Parses a mask sidecar: `0`/`1` tokens separated by whitespace or commas.
pub fn parse_mask(text: &str) -> Result<Vec<bool>> {
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .enumerate()
        .map(|(i, t)| match t {
            "1" => Ok(true),
            "0" => Ok(false),
            other => Err(Error::Validation {
                row: i,
                message: format!("mask entry {other:?} is not 0 or 1"),
            }),
        })
        .collect()
}

/// Running masked mean over a growing prefix.
///
/// Keeps the sum and the unmasked count rather than a running mean, so the
/// pooled vector at any `k` is computed in the same order as a batch pass.
#[derive(Clone, Debug)]
pub struct PrefixPooler {
    sum: Vec<f64>,
    count: usize,
    seen: usize,
}

impl PrefixPooler {
    pub fn new(dim: usize) -> Self {
        Self {
            sum: vec![0.0; dim],
            count: 0,
            seen: 0,
        }
    }

    /// Adds one token; returns the pooled prefix, or `None` while every
    /// token seen so far is masked.
    pub fn push(&mut self, hidden: &[f32], mask: bool) -> Option<Vec<f64>> {
        debug_assert_eq!(hidden.len(), self.sum.len());
        self.seen += 1;
        if mask {
            for (s, &h) in self.sum.iter_mut().zip(hidden) {
                *s += f64::from(h);
            }
            self.count += 1;
        }
        self.current()
    }

    pub fn current(&self) -> Option<Vec<f64>> {
        if self.count == 0 {
            return None;
        }
        let n = self.count as f64;
        Some(self.sum.iter().map(|s| s / n).collect())
    }

    pub fn tokens_seen(&self) -> usize {
        self.seen
    }
}

/// Mean of the unmasked hidden states among the first `k` tokens.
pub fn prefix_smp_pool(seq: &TokenSequence, k: usize) -> Result<Vec<f64>> {
    if k == 0 || k > seq.len() {
        return Err(Error::Argument(format!(
            "prefix length {k} outside 1..={}",
            seq.len()
        )));
    }
    let mut pooler = PrefixPooler::new(seq.dim());
    for i in 0..k {
        pooler.push(seq.hidden.row(i), seq.mask[i]);
    }
    pooler.current().ok_or_else(|| {
        Error::DegenerateInput(format!("all of the first {k} tokens are masked"))
    })
}

/// Sequence mean pooling over all unmasked tokens.
pub fn smp_pool(seq: &TokenSequence) -> Result<Vec<f64>> {
    prefix_smp_pool(seq, seq.len())
        .map_err(|_| Error::DegenerateInput("every token in the sequence is masked".into()))
}
