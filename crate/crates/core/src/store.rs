//! Embedding storage, label sets and workload definitions.
//!
//! On disk an embedding store is a JSON manifest next to a raw payload of
//! little-endian `f32` values laid out row-major, one row per document:
//!
//! ```json
//! {"version":1,"count":3,"dim":4,"payload":"docs.f32","dtype":"f32le","doc_ids":["a","b","c"]}
//! ```
//!
//! The payload path is resolved relative to the manifest's directory.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const MANIFEST_VERSION: u32 = 1;
pub const DTYPE_F32LE: &str = "f32le";

/// A finite embedding vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("embedding entry {i}")));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

impl TryFrom<Vec<f32>> for EmbeddingVector {
    type Error = Error;

    fn try_from(values: Vec<f32>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<EmbeddingVector> for Vec<f32> {
    fn from(v: EmbeddingVector) -> Self {
        v.0
    }
}

/// Document ids mapped to fixed-dimension embeddings, in ingestion order.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    ids: Vec<String>,
    data: Vec<f32>,
    index: HashMap<String, usize>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("embedding dimension must be positive".into()));
        }
        Ok(Self {
            dim,
            ids: Vec::new(),
            data: Vec::new(),
            index: HashMap::new(),
        })
    }

    pub fn from_parts(dim: usize, ids: Vec<String>, data: Vec<f32>) -> Result<Self> {
        if data.len() != ids.len() * dim {
            return Err(Error::PayloadSize {
                count: ids.len(),
                dim,
                found: data.len(),
            });
        }
        let mut store = Self::new(dim)?;
        store.ids.reserve(ids.len());
        store.data.reserve(data.len());
        for (id, row) in ids.into_iter().zip(data.chunks_exact(dim)) {
            store.push(id, row)?;
        }
        Ok(store)
    }

    pub fn push(&mut self, doc_id: impl Into<String>, embedding: &[f32]) -> Result<()> {
        let doc_id = doc_id.into();
        if embedding.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: embedding.len(),
            });
        }
        if embedding.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("embedding of {doc_id:?}")));
        }
        if self.index.contains_key(&doc_id) {
            return Err(Error::DuplicateId(doc_id));
        }
        self.index.insert(doc_id.clone(), self.ids.len());
        self.ids.push(doc_id);
        self.data.extend_from_slice(embedding);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn index_of(&self, doc_id: &str) -> Option<usize> {
        self.index.get(doc_id).copied()
    }

    pub fn get(&self, doc_id: &str) -> Option<&[f32]> {
        self.index_of(doc_id).map(|i| self.row(i))
    }

    pub fn contains(&self, doc_id: &str) -> bool {
        self.index.contains_key(doc_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> + '_ {
        self.ids
            .iter()
            .zip(self.data.chunks_exact(self.dim))
            .map(|(id, row)| (id.as_str(), row))
    }

    /// Raw row-major payload.
    pub fn as_flat(&self) -> &[f32] {
        &self.data
    }

    /// A new store holding `doc_ids` in the given order.
    pub fn subset<S: AsRef<str>>(&self, doc_ids: &[S]) -> Result<Self> {
        let mut out = Self::new(self.dim)?;
        for id in doc_ids {
            let id = id.as_ref();
            let row = self.get(id).ok_or_else(|| Error::UnknownId(id.to_string()))?;
            out.push(id, row)?;
        }
        Ok(out)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    count: usize,
    dim: usize,
    payload: String,
    dtype: String,
    doc_ids: Vec<String>,
}

pub(crate) fn payload_path_for(manifest_path: &Path, ext: &str) -> (PathBuf, String) {
    let stem = manifest_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "payload".to_string());
    let name = format!("{stem}.{ext}");
    let path = manifest_path.with_file_name(&name);
    (path, name)
}

pub(crate) fn resolve_payload(manifest_path: &Path, payload: &str) -> PathBuf {
    match manifest_path.parent() {
        Some(dir) => dir.join(payload),
        None => PathBuf::from(payload),
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub fn load_embeddings(manifest_path: impl AsRef<Path>) -> Result<EmbeddingStore> {
    let manifest_path = manifest_path.as_ref();
    let manifest: Manifest = read_json(manifest_path)?;
    let bad = |reason: String| Error::Manifest {
        path: manifest_path.to_path_buf(),
        reason,
    };
    if manifest.version != MANIFEST_VERSION {
        return Err(bad(format!("unsupported version {}", manifest.version)));
    }
    if manifest.dtype != DTYPE_F32LE {
        return Err(bad(format!("unsupported dtype {:?}", manifest.dtype)));
    }
    if manifest.doc_ids.len() != manifest.count {
        return Err(bad(format!(
            "count is {} but {} doc_ids are listed",
            manifest.count,
            manifest.doc_ids.len()
        )));
    }
    let payload_path = resolve_payload(manifest_path, &manifest.payload);
    let bytes = fs::read(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(bad(format!("payload length {} is not a multiple of 4", bytes.len())));
    }
    let found = bytes.len() / 4;
    if found != manifest.count * manifest.dim {
        return Err(Error::PayloadSize {
            count: manifest.count,
            dim: manifest.dim,
            found,
        });
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    EmbeddingStore::from_parts(manifest.dim, manifest.doc_ids, data)
}

/// Writes `<stem>.json`-style manifest at `manifest_path` and `<stem>.f32` beside it.
pub fn save_embeddings(store: &EmbeddingStore, manifest_path: impl AsRef<Path>) -> Result<()> {
    let manifest_path = manifest_path.as_ref();
    let (payload_path, payload_name) = payload_path_for(manifest_path, "f32");
    let file = fs::File::create(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
    let mut writer = BufWriter::new(file);
    for v in store.as_flat() {
        writer
            .write_all(&v.to_le_bytes())
            .map_err(|e| Error::io(&payload_path, e))?;
    }
    writer.flush().map_err(|e| Error::io(&payload_path, e))?;

    let manifest = Manifest {
        version: MANIFEST_VERSION,
        count: store.len(),
        dim: store.dim(),
        payload: payload_name,
        dtype: DTYPE_F32LE.to_string(),
        doc_ids: store.ids().to_vec(),
    };
    write_json(manifest_path, &manifest)
}

/// Ground-truth or oracle labels keyed by doc_id (`true` = satisfies the predicate).
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    entries: BTreeMap<String, bool>,
}

#[derive(Serialize, Deserialize)]
struct LabelLine<'a> {
    doc_id: std::borrow::Cow<'a, str>,
    label: bool,
}

impl LabelSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, doc_id: impl Into<String>, label: bool) -> Option<bool> {
        self.entries.insert(doc_id.into(), label)
    }

    pub fn get(&self, doc_id: &str) -> Option<bool> {
        self.entries.get(doc_id).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.entries.values().filter(|&&l| l).count()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, bool)> + '_ {
        self.entries.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn restrict<S: AsRef<str>>(&self, doc_ids: &[S]) -> Result<LabelSet> {
        let mut out = LabelSet::new();
        for id in doc_ids {
            let id = id.as_ref();
            let label = self.get(id).ok_or_else(|| Error::UnknownId(id.to_string()))?;
            out.insert(id, label);
        }
        Ok(out)
    }

    /// Fails on the first id not present in `store`.
    pub fn check_subset_of(&self, store: &EmbeddingStore) -> Result<()> {
        match self.entries.keys().find(|id| !store.contains(id)) {
            Some(id) => Err(Error::UnknownId(id.clone())),
            None => Ok(()),
        }
    }

    /// Reads JSON Lines of `{"doc_id": "...", "label": true|false}`; blank lines are skipped.
    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut out = LabelSet::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: LabelLine = serde_json::from_str(&line).map_err(|e| Error::json(path, e))?;
            if out.insert(parsed.doc_id.as_ref(), parsed.label).is_some() {
                return Err(Error::DuplicateId(parsed.doc_id.into_owned()));
            }
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for (doc_id, &label) in &self.entries {
            let line = LabelLine {
                doc_id: doc_id.as_str().into(),
                label,
            };
            serde_json::to_writer(&mut w, &line).map_err(|e| Error::json(path, e))?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

impl FromIterator<(String, bool)> for LabelSet {
    fn from_iter<I: IntoIterator<Item = (String, bool)>>(iter: I) -> Self {
        Self {
            entries: iter.into_iter().collect(),
        }
    }
}

/// The query side of a workload as stored on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub text: String,
    pub embedding: EmbeddingVector,
}

impl QueryRecord {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path.as_ref())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path.as_ref(), self)
    }
}

/// One predicate evaluation request: a query against a collection with an accuracy target.
#[derive(Clone, Debug)]
pub struct Workload {
    pub query_text: String,
    pub query_embedding: EmbeddingVector,
    pub collection: Arc<EmbeddingStore>,
    pub accuracy_target: f64,
}

impl Workload {
    pub fn new(
        query_text: impl Into<String>,
        query_embedding: EmbeddingVector,
        collection: Arc<EmbeddingStore>,
        accuracy_target: f64,
    ) -> Result<Self> {
        if query_embedding.dim() != collection.dim() {
            return Err(Error::DimensionMismatch {
                expected: collection.dim(),
                found: query_embedding.dim(),
            });
        }
        if !(accuracy_target > 0.0 && accuracy_target <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "accuracy target {accuracy_target} outside (0, 1]"
            )));
        }
        Ok(Self {
            query_text: query_text.into(),
            query_embedding,
            collection,
            accuracy_target,
        })
    }
}

/// Uniformly random disjoint split; both halves keep store order.
pub fn split_sample(
    store: &EmbeddingStore,
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<String>, Vec<String>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction {train_fraction} outside (0, 1)"
        )));
    }
    if store.is_empty() {
        return Err(Error::Empty("cannot split an empty store".into()));
    }
    let n = store.len();
    let n_train = ((train_fraction * n as f64).round() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::seeded(seed));
    let mut in_train = vec![false; n];
    for &i in &order[..n_train] {
        in_train[i] = true;
    }
    let (train, rest): (Vec<_>, Vec<_>) = store.ids().iter().cloned().zip(in_train).partition(|(_, t)| *t);
    Ok((
        train.into_iter().map(|(id, _)| id).collect(),
        rest.into_iter().map(|(id, _)| id).collect(),
    ))
}
