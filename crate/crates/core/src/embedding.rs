//! Embedding sets, their on-disk formats, and the cosine kernel every other
//! module builds on.
//!
//! Row order is the canonical instance index: nothing in this crate reorders
//! rows, so index sets computed in one module stay valid in another.
//!
//! Two formats are supported:
//!
//! - **EMBF** (binary): magic `EMBF`, `u32` version = 1, `u64` N, `u64` d,
//!   then N·d little-endian `f32` row-major, N bytes of modality
//!   (0 = visible, 1 = infrared), N little-endian `i64` identities
//!   (-1 = unknown).
//! - **CSV**: header `modality,identity,f0,...,f{d-1}`; modality is written
//!   as `0`/`1` and read as `0`/`1`/`visible`/`infrared`.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot_f32, row_slice};

const MAGIC: &[u8; 4] = b"EMBF";
const VERSION: u32 = 1;
const NORM_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visible,
    Infrared,
}

impl Modality {
    pub fn code(self) -> u8 {
        match self {
            Modality::Visible => 0,
            Modality::Infrared => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Modality::Visible),
            1 => Some(Modality::Infrared),
            _ => None,
        }
    }

    pub fn other(self) -> Self {
        match self {
            Modality::Visible => Modality::Infrared,
            Modality::Infrared => Modality::Visible,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Visible => "visible",
            Modality::Infrared => "infrared",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Binary,
    Csv,
}

impl Format {
    /// `.csv` selects CSV; anything else is EMBF.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => Format::Csv,
            _ => Format::Binary,
        }
    }
}

/// An N×d matrix of instance features with per-row modality tags and optional
/// ground-truth identities. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    features: Array2<f32>,
    modality: Vec<Modality>,
    identity: Vec<Option<i64>>,
    normalized: bool,
}

impl EmbeddingSet {
    /// Validates shape and finiteness. The `normalized` flag is set only if
    /// every row is already within 1e-5 of unit norm.
    pub fn new(
        features: Array2<f32>,
        modality: Vec<Modality>,
        identity: Vec<Option<i64>>,
    ) -> Result<Self> {
        let (n, d) = features.dim();
        if n == 0 {
            return Err(Error::Empty("embedding set has no rows"));
        }
        if d == 0 {
            return Err(Error::Empty("embedding set has zero dimensions"));
        }
        if modality.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: modality.len(),
            });
        }
        if identity.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: identity.len(),
            });
        }
        let features = features.as_standard_layout().into_owned();
        for (row, r) in features.outer_iter().enumerate() {
            if let Some(col) = r.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { row, col });
            }
        }
        let normalized = features
            .outer_iter()
            .all(|r| (r.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt() - 1.0).abs() <= NORM_TOLERANCE);
        Ok(Self {
            features,
            modality,
            identity,
            normalized,
        })
    }

    /// Single-modality set without identities.
    pub fn from_features(features: Array2<f32>, modality: Modality) -> Result<Self> {
        let n = features.nrows();
        Self::new(features, vec![modality; n], vec![None; n])
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &Array2<f32> {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f32] {
        row_slice(&self.features, i)
    }

    pub fn modality(&self) -> &[Modality] {
        &self.modality
    }

    pub fn identity(&self) -> &[Option<i64>] {
        &self.identity
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn count(&self, modality: Modality) -> usize {
        self.modality.iter().filter(|&&m| m == modality).count()
    }

    /// Identities with `None` replaced by -1.
    pub fn identity_codes(&self) -> Vec<i64> {
        self.identity.iter().map(|id| id.unwrap_or(-1)).collect()
    }

    /// Rows at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> EmbeddingSet {
        let features = self.features.select(Axis(0), indices);
        EmbeddingSet {
            features,
            modality: indices.iter().map(|&i| self.modality[i]).collect(),
            identity: indices.iter().map(|&i| self.identity[i]).collect(),
            normalized: self.normalized,
        }
    }

    /// Rows of one modality, preserving relative order, with their original indices.
    pub fn split_modality(&self, modality: Modality) -> Option<(EmbeddingSet, Vec<usize>)> {
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| self.modality[i] == modality)
            .collect();
        if idx.is_empty() {
            return None;
        }
        Some((self.select(&idx), idx))
    }

    /// Stacks `self` on top of `other`.
    pub fn concat(&self, other: &EmbeddingSet) -> Result<EmbeddingSet> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: other.dim(),
            });
        }
        let features = ndarray::concatenate(Axis(0), &[self.features.view(), other.features.view()])
            .expect("column counts checked above");
        Ok(EmbeddingSet {
            features,
            modality: self.modality.iter().chain(&other.modality).copied().collect(),
            identity: self.identity.iter().chain(&other.identity).copied().collect(),
            normalized: self.normalized && other.normalized,
        })
    }

    /// Same tags, new features. The normalized flag is recomputed.
    pub fn with_features(&self, features: Array2<f32>) -> Result<EmbeddingSet> {
        if features.dim() != self.features.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.len() * self.dim(),
                found: features.len(),
            });
        }
        EmbeddingSet::new(features, self.modality.clone(), self.identity.clone())
    }

    pub(crate) fn assume_normalized(mut self) -> Self {
        self.normalized = true;
        self
    }
}

/// Cosine similarities between the rows of two normalized sets.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub values: Array2<f64>,
    pub row_source: Vec<Modality>,
    pub col_source: Vec<Modality>,
}

/// Divides every row by its Euclidean norm.
///
/// Norms are taken in f64; an already-normalized set comes back unchanged to
/// within f32 rounding.
pub fn l2_normalize(set: &EmbeddingSet) -> Result<EmbeddingSet> {
    let mut features = set.features.clone();
    for (row, mut r) in features.outer_iter_mut().enumerate() {
        let norm = r
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroNorm { row });
        }
        r.iter_mut().for_each(|v| *v = (f64::from(*v) / norm) as f32);
    }
    Ok(EmbeddingSet {
        features,
        modality: set.modality.clone(),
        identity: set.identity.clone(),
        normalized: true,
    })
}

/// `values[i][j] = <a_i, b_j>`. Rows are computed in parallel but each dot
/// product is a sequential f64 reduction, so the output does not depend on
/// the thread count.
pub fn pairwise_similarity(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<SimilarityMatrix> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    if !a.is_normalized() || !b.is_normalized() {
        return Err(Error::NotNormalized("pairwise_similarity"));
    }
    let (na, nb) = (a.len(), b.len());
    let data: Vec<f64> = (0..na)
        .into_par_iter()
        .flat_map_iter(|i| {
            let ra = a.row(i);
            (0..nb).map(move |j| dot_f32(ra, b.row(j)))
        })
        .collect();
    Ok(SimilarityMatrix {
        values: Array2::from_shape_vec((na, nb), data).expect("shape matches"),
        row_source: a.modality.clone(),
        col_source: b.modality.clone(),
    })
}

/// Squared Euclidean distance between unit vectors, from their cosine.
#[inline]
pub fn squared_distance_from_cosine(cos: f64) -> f64 {
    (2.0 - 2.0 * cos).max(0.0)
}

pub fn load_embeddings(path: impl AsRef<Path>, format: Format) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    match format {
        Format::Binary => read_binary(reader).map_err(|e| with_path(e, path)),
        Format::Csv => read_csv(reader),
    }
}

pub fn save_embeddings(set: &EmbeddingSet, path: impl AsRef<Path>, format: Format) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    match format {
        Format::Binary => write_binary(set, &mut writer).map_err(|e| Error::io(path, e))?,
        Format::Csv => write_csv(set, &mut writer)?,
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

fn with_path(err: Error, path: &Path) -> Error {
    match err {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    }
}

pub fn write_binary<W: Write>(set: &EmbeddingSet, w: &mut W) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(set.len() as u64).to_le_bytes())?;
    w.write_all(&(set.dim() as u64).to_le_bytes())?;
    for v in set.features.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    let modality: Vec<u8> = set.modality.iter().map(|m| m.code()).collect();
    w.write_all(&modality)?;
    for id in &set.identity {
        w.write_all(&id.unwrap_or(-1).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_binary<R: Read>(mut r: R) -> Result<EmbeddingSet> {
    let mut magic = [0u8; 4];
    read_header_bytes(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::MalformedHeader(format!("bad magic {magic:?}")));
    }
    let mut b4 = [0u8; 4];
    read_header_bytes(&mut r, &mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != VERSION {
        return Err(Error::MalformedHeader(format!("unsupported version {version}")));
    }
    let mut b8 = [0u8; 8];
    read_header_bytes(&mut r, &mut b8)?;
    let n = u64::from_le_bytes(b8) as usize;
    read_header_bytes(&mut r, &mut b8)?;
    let d = u64::from_le_bytes(b8) as usize;
    if n == 0 || d == 0 {
        return Err(Error::MalformedHeader(format!("declared shape {n}x{d}")));
    }

    let expected = n
        .checked_mul(d)
        .and_then(|nd| nd.checked_mul(4))
        .and_then(|b| b.checked_add(n * 9))
        .ok_or_else(|| Error::MalformedHeader(format!("declared shape {n}x{d} overflows")))?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)
        .map_err(|e| Error::io("<reader>", e))?;
    if payload.len() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            found: payload.len(),
        });
    }

    let (feat_bytes, rest) = payload.split_at(n * d * 4);
    let (mod_bytes, id_bytes) = rest.split_at(n);
    let values: Vec<f32> = feat_bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
        .collect();
    let modality = mod_bytes
        .iter()
        .map(|&b| {
            Modality::from_code(b)
                .ok_or_else(|| Error::MalformedHeader(format!("unknown modality code {b}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let identity = id_bytes
        .chunks_exact(8)
        .map(|c| {
            let v = i64::from_le_bytes(c.try_into().expect("chunk of 8"));
            (v >= 0).then_some(v)
        })
        .collect();
    let features = Array2::from_shape_vec((n, d), values).expect("length checked");
    let mut set = EmbeddingSet::new(features, modality, identity)?;
    // Loaded sets always start unnormalized, even if the rows happen to be unit.
    set.normalized = false;
    Ok(set)
}

fn read_header_bytes<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::MalformedHeader("truncated header".into())
        } else {
            Error::io("<reader>", e)
        }
    })
}

pub fn write_csv<W: Write>(set: &EmbeddingSet, w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["modality".to_string(), "identity".to_string()];
    header.extend((0..set.dim()).map(|j| format!("f{j}")));
    wtr.write_record(&header)?;
    for i in 0..set.len() {
        let mut rec = vec![
            set.modality[i].code().to_string(),
            set.identity[i].unwrap_or(-1).to_string(),
        ];
        // `{}` on f32 prints the shortest string that round-trips.
        rec.extend(set.row(i).iter().map(|v| v.to_string()));
        wtr.write_record(&rec)?;
    }
    wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

pub fn read_csv<R: Read>(r: R) -> Result<EmbeddingSet> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(r);
    let header = rdr.headers()?.clone();
    if header.len() < 3 || &header[0] != "modality" || &header[1] != "identity" {
        return Err(Error::MalformedHeader(
            "expected `modality,identity,f0,...`".into(),
        ));
    }
    for (j, name) in header.iter().skip(2).enumerate() {
        if name != format!("f{j}") {
            return Err(Error::MalformedHeader(format!(
                "column {} should be f{j}, found {name}",
                j + 2
            )));
        }
    }
    let d = header.len() - 2;
    let mut values = Vec::new();
    let mut modality = Vec::new();
    let mut identity = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != d + 2 {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: rec.len().saturating_sub(2),
            });
        }
        modality.push(parse_modality(&rec[0])?);
        let id: i64 = rec[1]
            .trim()
            .parse()
            .map_err(|_| Error::MalformedHeader(format!("row {row}: bad identity {:?}", &rec[1])))?;
        identity.push((id >= 0).then_some(id));
        for (col, field) in rec.iter().skip(2).enumerate() {
            let v: f32 = field.trim().parse().map_err(|_| Error::NonFinite { row, col })?;
            values.push(v);
        }
    }
    let n = modality.len();
    if n == 0 {
        return Err(Error::Empty("csv has no data rows"));
    }
    let features = Array2::from_shape_vec((n, d), values).expect("row lengths checked");
    let mut set = EmbeddingSet::new(features, modality, identity)?;
    set.normalized = false;
    Ok(set)
}

fn parse_modality(s: &str) -> Result<Modality> {
    match s.trim() {
        "0" | "visible" | "v" => Ok(Modality::Visible),
        "1" | "infrared" | "r" => Ok(Modality::Infrared),
        other => Err(Error::MalformedHeader(format!("unknown modality {other:?}"))),
    }
}
