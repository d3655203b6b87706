//! Records, datasets and their file formats.
//!
//! Canonical storage is NDJSON, one record per line. Embedding sets may also
//! be stored packed: a JSON header line followed by little-endian `f32`
//! values, with ids and labels in a parallel NDJSON manifest.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{check_dim, Error, Result};
use crate::rng;

/// Machine condition. Serialized as `0` (normal) / `1` (abnormal).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Normal,
    Abnormal,
}

impl Label {
    pub fn is_abnormal(self) -> bool {
        self == Label::Abnormal
    }

    pub fn as_u8(self) -> u8 {
        match self {
            Label::Normal => 0,
            Label::Abnormal => 1,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Label::Normal),
            1 => Some(Label::Abnormal),
            _ => None,
        }
    }
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u8(self.as_u8())
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = u8::deserialize(d)?;
        Label::from_u8(v).ok_or_else(|| serde::de::Error::custom(format!("label must be 0 or 1, got {v}")))
    }
}

/// One operational cycle: `values[channel][step]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalRecord {
    pub id: String,
    pub machine: String,
    pub label: Option<Label>,
    pub values: Vec<Vec<f64>>,
}

impl SignalRecord {
    pub fn channels(&self) -> usize {
        self.values.len()
    }

    pub fn steps(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    /// Channel-major concatenation of all samples.
    pub fn flatten(&self) -> Vec<f64> {
        self.values.iter().flatten().copied().collect()
    }

    fn validate(&self) -> std::result::Result<(), String> {
        let c = self.channels();
        if c == 0 {
            return Err("record has no channels".into());
        }
        let n_t = self.steps();
        if n_t < 2 {
            return Err(format!("record {} has {n_t} time steps, need at least 2", self.id));
        }
        if self.values.iter().any(|ch| ch.len() != n_t) {
            return Err(format!("record {} has ragged channels", self.id));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingSource {
    /// Produced by an external foundation-model exporter.
    External,
    /// Produced by the built-in spectral featurizer.
    Spectral,
    /// Flattened raw signal samples.
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: String,
    pub machine: String,
    pub label: Option<Label>,
    pub e: Vec<f64>,
    pub source: EmbeddingSource,
}

pub trait Record {
    fn id(&self) -> &str;
    fn machine(&self) -> &str;
    fn label(&self) -> Option<Label>;
}

impl Record for SignalRecord {
    fn id(&self) -> &str {
        &self.id
    }
    fn machine(&self) -> &str {
        &self.machine
    }
    fn label(&self) -> Option<Label> {
        self.label
    }
}

impl Record for EmbeddingRecord {
    fn id(&self) -> &str {
        &self.id
    }
    fn machine(&self) -> &str {
        &self.machine
    }
    fn label(&self) -> Option<Label> {
        self.label
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Validation,
    Test,
}

/// An ordered, immutable collection of records with unique ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<R> {
    records: Vec<R>,
    role: Role,
    domain_set: Vec<String>,
}

pub type SignalDataset = Dataset<SignalRecord>;
pub type EmbeddingDataset = Dataset<EmbeddingRecord>;

impl<R: Record> Dataset<R> {
    /// Builds a dataset, rejecting duplicate ids. The domain set lists the
    /// distinct machines in order of first appearance.
    pub fn new(records: Vec<R>, role: Role) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        let mut domain_set: Vec<String> = Vec::new();
        for r in &records {
            if !seen.insert(r.id().to_string()) {
                return Err(Error::data(format!("duplicate record id {:?}", r.id())));
            }
            if !domain_set.iter().any(|m| m == r.machine()) {
                domain_set.push(r.machine().to_string());
            }
        }
        Ok(Dataset {
            records,
            role,
            domain_set,
        })
    }

    pub fn records(&self) -> &[R] {
        &self.records
    }

    pub fn into_records(self) -> Vec<R> {
        self.records
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn domain_set(&self) -> &[String] {
        &self.domain_set
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, R> {
        self.records.iter()
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    pub fn ids(&self) -> Vec<&str> {
        self.records.iter().map(Record::id).collect()
    }

    pub fn labels(&self) -> Vec<Option<Label>> {
        self.records.iter().map(Record::label).collect()
    }

    /// Keeps the records matching `keep`, preserving order and role.
    pub fn filter(&self, mut keep: impl FnMut(&R) -> bool) -> Self
    where
        R: Clone,
    {
        let records: Vec<R> = self.records.iter().filter(|r| keep(r)).cloned().collect();
        Dataset::new(records, self.role).expect("subset of a valid dataset is valid")
    }

    /// Concatenates two datasets (ids must stay unique).
    pub fn concat(&self, other: &Self) -> Result<Self>
    where
        R: Clone,
    {
        let mut records = self.records.clone();
        records.extend(other.records.iter().cloned());
        Dataset::new(records, self.role)
    }
}

impl SignalDataset {
    /// `(channels, steps)` shared by all records.
    pub fn shape(&self) -> Option<(usize, usize)> {
        self.records.first().map(|r| (r.channels(), r.steps()))
    }

    /// Validates per-record shape, cross-record shape agreement and finiteness.
    pub fn validated(records: Vec<SignalRecord>, role: Role) -> Result<Self> {
        let mut shape = None;
        for (i, r) in records.iter().enumerate() {
            check_signal(r, &mut shape, Some(i + 1))?;
        }
        Dataset::new(records, role)
    }
}

impl EmbeddingDataset {
    pub fn dim(&self) -> Option<usize> {
        self.records.first().map(|r| r.e.len())
    }

    pub fn validated(records: Vec<EmbeddingRecord>, role: Role) -> Result<Self> {
        let mut dim = None;
        for (i, r) in records.iter().enumerate() {
            check_embedding(r, &mut dim, Some(i + 1))?;
        }
        Dataset::new(records, role)
    }

    /// Row-major copy of the feature vectors.
    pub fn matrix(&self) -> Vec<Vec<f64>> {
        self.records.iter().map(|r| r.e.clone()).collect()
    }

    pub fn map_vectors(&self, mut f: impl FnMut(&EmbeddingRecord) -> Result<Vec<f64>>) -> Result<Self> {
        let records = self
            .records
            .iter()
            .map(|r| {
                Ok(EmbeddingRecord {
                    e: f(r)?,
                    ..r.clone()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(records, self.role)
    }
}

fn check_signal(r: &SignalRecord, shape: &mut Option<(usize, usize)>, line: Option<usize>) -> Result<()> {
    r.validate().map_err(|msg| Error::Shape { line, msg })?;
    let s = (r.channels(), r.steps());
    match shape {
        None => *shape = Some(s),
        Some(expected) if *expected != s => {
            return Err(Error::Shape {
                line,
                msg: format!(
                    "record {} has shape {}x{}, dataset has {}x{}",
                    r.id, s.0, s.1, expected.0, expected.1
                ),
            })
        }
        _ => {}
    }
    if r.values.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::data(format!("record {} contains a non-finite value", r.id)));
    }
    Ok(())
}

fn check_embedding(r: &EmbeddingRecord, dim: &mut Option<usize>, line: Option<usize>) -> Result<()> {
    if r.e.is_empty() {
        return Err(Error::Shape {
            line,
            msg: format!("embedding {} is empty", r.id),
        });
    }
    match dim {
        None => *dim = Some(r.e.len()),
        Some(d) if *d != r.e.len() => {
            return Err(Error::Shape {
                line,
                msg: format!("embedding {} has length {}, dataset has {d}", r.id, r.e.len()),
            })
        }
        _ => {}
    }
    if r.e.iter().any(|v| !v.is_finite()) {
        return Err(Error::data(format!("embedding {} contains a non-finite value", r.id)));
    }
    Ok(())
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn read_ndjson<T: DeserializeOwned>(
    path: &Path,
    mut check: impl FnMut(&T, usize) -> Result<()>,
) -> Result<Vec<T>> {
    let reader = open(path)?;
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: T = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        check(&rec, line_no)?;
        out.push(rec);
    }
    Ok(out)
}

fn write_ndjson<'a, T: Serialize + 'a>(path: &Path, items: impl IntoIterator<Item = &'a T>) -> Result<()> {
    let mut w = create(path)?;
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a signal NDJSON file. Row order equals file order.
pub fn load_signals(path: impl AsRef<Path>) -> Result<SignalDataset> {
    let path = path.as_ref();
    let mut shape = None;
    let records = read_ndjson::<SignalRecord>(path, |r, line| check_signal(r, &mut shape, Some(line)))?;
    Dataset::new(records, Role::Train)
}

pub fn write_signals(ds: &SignalDataset, path: impl AsRef<Path>) -> Result<()> {
    write_ndjson(path.as_ref(), ds.records())
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingDataset> {
    let path = path.as_ref();
    let mut dim = None;
    let records = read_ndjson::<EmbeddingRecord>(path, |r, line| check_embedding(r, &mut dim, Some(line)))?;
    Dataset::new(records, Role::Train)
}

pub fn write_embeddings(ds: &EmbeddingDataset, path: impl AsRef<Path>) -> Result<()> {
    write_ndjson(path.as_ref(), ds.records())
}

#[derive(Debug, Serialize, Deserialize)]
struct BinaryHeader {
    d: usize,
    n: usize,
    dtype: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestLine {
    id: String,
    machine: String,
    label: Option<Label>,
    source: EmbeddingSource,
}

const F32LE: &str = "f32le";

/// Writes the packed binary embedding format (32-bit floats) plus its
/// NDJSON manifest of ids, machines, labels and sources.
pub fn write_embeddings_binary(
    ds: &EmbeddingDataset,
    bin_path: impl AsRef<Path>,
    manifest_path: impl AsRef<Path>,
) -> Result<()> {
    let bin_path = bin_path.as_ref();
    let d = ds.dim().unwrap_or(0);
    let mut w = create(bin_path)?;
    let header = BinaryHeader {
        d,
        n: ds.len(),
        dtype: F32LE.into(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n").map_err(|e| Error::io(bin_path, e))?;
    for r in ds.iter() {
        check_dim(d, r.e.len())?;
        for v in &r.e {
            w.write_all(&(*v as f32).to_le_bytes()).map_err(|e| Error::io(bin_path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(bin_path, e))?;

    let manifest: Vec<ManifestLine> = ds
        .iter()
        .map(|r| ManifestLine {
            id: r.id.clone(),
            machine: r.machine.clone(),
            label: r.label,
            source: r.source,
        })
        .collect();
    write_ndjson(manifest_path.as_ref(), &manifest)
}

pub fn load_embeddings_binary(
    bin_path: impl AsRef<Path>,
    manifest_path: impl AsRef<Path>,
) -> Result<EmbeddingDataset> {
    let bin_path = bin_path.as_ref();
    let mut reader = open(bin_path)?;
    let mut header_line = String::new();
    reader
        .read_line(&mut header_line)
        .map_err(|e| Error::io(bin_path, e))?;
    let header: BinaryHeader = serde_json::from_str(header_line.trim()).map_err(|e| Error::Parse {
        line: 1,
        msg: e.to_string(),
    })?;
    if header.dtype != F32LE {
        return Err(Error::data(format!("unsupported dtype {:?}", header.dtype)));
    }
    let mut payload = Vec::new();
    reader
        .read_to_end(&mut payload)
        .map_err(|e| Error::io(bin_path, e))?;
    let expected = header.n * header.d * 4;
    if payload.len() != expected {
        return Err(Error::data(format!(
            "binary payload has {} bytes, header implies {expected}",
            payload.len()
        )));
    }
    let manifest = read_ndjson::<ManifestLine>(manifest_path.as_ref(), |_, _| Ok(()))?;
    if manifest.len() != header.n {
        return Err(Error::data(format!(
            "manifest has {} records, binary header has {}",
            manifest.len(),
            header.n
        )));
    }
    let mut records = Vec::with_capacity(header.n);
    for (i, m) in manifest.into_iter().enumerate() {
        let row = &payload[i * header.d * 4..(i + 1) * header.d * 4];
        let e: Vec<f64> = row
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect();
        records.push(EmbeddingRecord {
            id: m.id,
            machine: m.machine,
            label: m.label,
            e,
            source: m.source,
        });
    }
    EmbeddingDataset::validated(records, Role::Train)
}

/// Strictly increasing index subset of `[0, d)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FeatureMask {
    d: usize,
    indices: Vec<usize>,
}

impl<'de> Deserialize<'de> for FeatureMask {
    fn deserialize<D: Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            d: usize,
            indices: Vec<usize>,
        }
        let raw = Raw::deserialize(de)?;
        FeatureMask::new(raw.d, raw.indices).map_err(serde::de::Error::custom)
    }
}

impl FeatureMask {
    pub fn new(d: usize, indices: Vec<usize>) -> Result<Self> {
        if indices.is_empty() || indices.len() > d {
            return Err(Error::arg(format!(
                "mask must keep between 1 and {d} indices, got {}",
                indices.len()
            )));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::arg("mask indices must be strictly increasing"));
        }
        if let Some(&last) = indices.last() {
            if last >= d {
                return Err(Error::arg(format!("mask index {last} out of range for d={d}")));
            }
        }
        Ok(FeatureMask { d, indices })
    }

    /// Sorts and deduplicates before validating.
    pub fn from_unsorted(d: usize, mut indices: Vec<usize>) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        FeatureMask::new(d, indices)
    }

    pub fn identity(d: usize) -> Result<Self> {
        FeatureMask::new(d, (0..d).collect())
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.binary_search(&i).is_ok()
    }

    /// Indices present in both masks, ascending.
    pub fn intersection(&self, other: &FeatureMask) -> Vec<usize> {
        self.indices.iter().copied().filter(|i| other.contains(*i)).collect()
    }

    pub fn apply(&self, e: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.d, e.len())?;
        Ok(self.indices.iter().map(|&i| e[i]).collect())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut s = String::new();
        open(path)?.read_to_string(&mut s).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = create(path)?;
        serde_json::to_writer(&mut w, self)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Keeps only the masked dimensions of an embedding.
pub fn apply_mask(e: &EmbeddingRecord, m: &FeatureMask) -> Result<EmbeddingRecord> {
    Ok(EmbeddingRecord {
        e: m.apply(&e.e)?,
        ..e.clone()
    })
}

pub fn apply_mask_dataset(ds: &EmbeddingDataset, m: &FeatureMask) -> Result<EmbeddingDataset> {
    ds.map_vectors(|r| m.apply(&r.e))
}

/// Seeded partition into `(first, second)` with `round(fraction * n)`
/// records in the first part (per label class when stratified). Both parts
/// keep the original relative order.
pub fn split<R: Record + Clone>(
    ds: &Dataset<R>,
    fraction: f64,
    stratify_by_label: bool,
    seed: u64,
) -> Result<(Dataset<R>, Dataset<R>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::arg(format!("split fraction must lie in (0, 1), got {fraction}")));
    }
    if ds.is_empty() {
        return Err(Error::arg("cannot split an empty dataset"));
    }
    let mut groups: BTreeMap<Option<Label>, Vec<usize>> = BTreeMap::new();
    if stratify_by_label {
        for (i, r) in ds.iter().enumerate() {
            groups.entry(r.label()).or_default().push(i);
        }
    } else {
        groups.insert(None, (0..ds.len()).collect());
    }

    let mut in_first = vec![false; ds.len()];
    for (key, mut idx) in groups {
        let stream = match key {
            None => 0,
            Some(l) => 1 + u64::from(l.as_u8()),
        };
        let mut rng = rng::stream(seed, stream);
        idx.shuffle(&mut rng);
        let k = (fraction * idx.len() as f64).round() as usize;
        for &i in &idx[..k] {
            in_first[i] = true;
        }
    }

    let mut first = Vec::new();
    let mut second = Vec::new();
    for (r, take) in ds.iter().zip(in_first) {
        if take {
            first.push(r.clone());
        } else {
            second.push(r.clone());
        }
    }
    Ok((Dataset::new(first, ds.role())?, Dataset::new(second, ds.role())?))
}
