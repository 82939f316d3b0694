//! Image embeddings and their on-disk cache.
//!
//! The toy backend average-pools the grayscale image to a 16×16 grid and
//! L2-normalizes the result. The external backend asks a model process over the
//! wire protocol; pooling of spatial features is the adapter's job.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde_json::{json, Value};

use crate::backend::{BackendKind, WireClient};
use crate::error::{Error, Result};
use crate::formats::write_bytes;
use crate::io::save_image;
use crate::scalar::Scalar;
use crate::tensor::Image;

pub const TOY_GRID: usize = 16;
pub const TOY_DIM: usize = TOY_GRID * TOY_GRID;
pub const TOY_TAG: &str = "toy";
pub const CACHE_MAGIC: &[u8; 4] = b"MPAE";
pub const CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub sample_id: String,
    pub vector: Vec<f32>,
}

impl AsRef<[f32]> for Embedding {
    fn as_ref(&self) -> &[f32] {
        &self.vector
    }
}

fn check_vector(id: &str, v: &[f32]) -> Result<()> {
    if v.is_empty() {
        return Err(Error::InvalidInput(format!("embedding of {id} is empty")));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("embedding of {id}")));
    }
    if v.iter().all(|&x| x == 0.0) {
        return Err(Error::InvalidInput(format!("embedding of {id} has zero norm")));
    }
    Ok(())
}

/// 16×16 average pool of the channel-mean image, flattened row-major and
/// L2-normalized. Bin `i` of an axis of length `n` covers
/// `[⌊i·n/16⌋, ⌊(i+1)·n/16⌋)`; images smaller than 16 pixels along an axis
/// reuse the nearest pixel. An all-black image maps to the uniform vector.
pub fn embed_toy<T: Scalar>(image: &Image<T>) -> Vec<f32> {
    let gray = image.grayscale();
    let (h, w) = gray.dims();
    let bins = |n: usize, i: usize| {
        let lo = i * n / TOY_GRID;
        let hi = ((i + 1) * n / TOY_GRID).max(lo + 1).min(n);
        (lo.min(n - 1), hi)
    };
    let mut v = Vec::with_capacity(TOY_DIM);
    for by in 0..TOY_GRID {
        let (y0, y1) = bins(h, by);
        for bx in 0..TOY_GRID {
            let (x0, x1) = bins(w, bx);
            let mut acc = 0.0f64;
            for y in y0..y1 {
                for x in x0..x1 {
                    acc += gray.get(x, y, 0).as_f64();
                }
            }
            v.push(acc / ((y1 - y0) * (x1 - x0)) as f64);
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return vec![1.0 / TOY_GRID as f32; TOY_DIM];
    }
    v.into_iter().map(|x| (x / norm) as f32).collect()
}

/// Source of embedding vectors.
pub trait Embedder: Send + Sync {
    /// Cache namespace; vectors from different tags never mix.
    fn tag(&self) -> String;
    fn embed(&self, sample_id: &str, image: &Image<f32>) -> Result<Vec<f32>>;
}

pub struct ToyEmbedder;

impl Embedder for ToyEmbedder {
    fn tag(&self) -> String {
        TOY_TAG.into()
    }

    fn embed(&self, _: &str, image: &Image<f32>) -> Result<Vec<f32>> {
        Ok(embed_toy(image))
    }
}

/// Embedder that forwards images to a model process. Images are written as
/// PNG into `work_dir` and passed by path.
pub struct ExternalEmbedder {
    client: WireClient,
    tag: String,
    work_dir: PathBuf,
    calls: AtomicUsize,
}

impl ExternalEmbedder {
    pub fn new(client: WireClient, tag: impl Into<String>, work_dir: impl Into<PathBuf>) -> Result<Self> {
        client.require_kind(BackendKind::Embedder)?;
        Ok(Self {
            client,
            tag: tag.into(),
            work_dir: work_dir.into(),
            calls: AtomicUsize::new(0),
        })
    }

    /// Backend requests issued so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl Embedder for ExternalEmbedder {
    fn tag(&self) -> String {
        self.tag.clone()
    }

    fn embed(&self, sample_id: &str, image: &Image<f32>) -> Result<Vec<f32>> {
        let path = self.work_dir.join(format!("{sample_id}.png"));
        save_image(image, &path)?;
        self.calls.fetch_add(1, Ordering::Relaxed);
        let reply = self
            .client
            .request(sample_id, json!({"op": "embed", "image": path}))?;
        let raw = reply
            .get("vector")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Backend(format!("embed reply for {sample_id} lacks a vector")))?;
        let v: Vec<f32> = raw
            .iter()
            .map(|x| x.as_f64().map_or(f32::NAN, |f| f as f32))
            .collect();
        if let Some(dim) = self.client.dim() {
            if dim != v.len() {
                return Err(Error::DimensionMismatch {
                    expected: dim.to_string(),
                    actual: v.len().to_string(),
                });
            }
        }
        check_vector(sample_id, &v)?;
        Ok(v)
    }
}

/// Vectors of one backend, keyed by sample id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCache {
    backend_tag: String,
    dimension: Option<usize>,
    entries: BTreeMap<String, Vec<f32>>,
}

impl EmbeddingCache {
    pub fn new(backend_tag: impl Into<String>) -> Self {
        Self {
            backend_tag: backend_tag.into(),
            dimension: None,
            entries: BTreeMap::new(),
        }
    }

    pub fn backend_tag(&self) -> &str {
        &self.backend_tag
    }

    pub fn dimension(&self) -> Option<usize> {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.entries.get(id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn insert(&mut self, id: impl Into<String>, vector: Vec<f32>) -> Result<()> {
        let id = id.into();
        check_vector(&id, &vector)?;
        if id.len() > u16::MAX as usize {
            return Err(Error::InvalidInput("sample id longer than 65535 bytes".into()));
        }
        match self.dimension {
            Some(d) if d != vector.len() => {
                return Err(Error::DimensionMismatch {
                    expected: d.to_string(),
                    actual: vector.len().to_string(),
                })
            }
            _ => self.dimension = Some(vector.len()),
        }
        self.entries.insert(id, vector);
        Ok(())
    }

    /// Conventional cache location for a backend tag inside `dir`.
    pub fn path_in(dir: &Path, backend_tag: &str) -> PathBuf {
        dir.join(format!("embeddings.{backend_tag}.mpae"))
    }

    pub fn encode(&self) -> Vec<u8> {
        let dim = self.dimension.unwrap_or(0);
        let mut out = Vec::new();
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        out.extend_from_slice(&(dim as u32).to_le_bytes());
        for (id, v) in &self.entries {
            out.extend_from_slice(&(id.len() as u16).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], backend_tag: impl Into<String>) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != CACHE_MAGIC {
            return Err(Error::Format("embedding cache has wrong magic".into()));
        }
        let version = cur.u32()?;
        if version != CACHE_VERSION {
            return Err(Error::Format(format!("unsupported embedding cache version {version}")));
        }
        let count = cur.u32()? as usize;
        let dim = cur.u32()? as usize;
        let mut cache = Self::new(backend_tag);
        for _ in 0..count {
            let len = u16::from_le_bytes(cur.take(2)?.try_into().expect("2 bytes")) as usize;
            let id = std::str::from_utf8(cur.take(len)?)
                .map_err(|_| Error::Format("embedding cache id is not UTF-8".into()))?
                .to_string();
            let v = cur
                .take(dim * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if cache.entries.contains_key(&id) {
                return Err(Error::Format(format!("duplicate id {id} in embedding cache")));
            }
            cache.insert(id, v)?;
        }
        if cur.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after embedding cache".into()));
        }
        if count == 0 && dim != 0 {
            cache.dimension = Some(dim);
        }
        Ok(cache)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.encode())
    }

    pub fn read(path: &Path, backend_tag: impl Into<String>) -> Result<Self> {
        Self::decode(&fs::read(path).map_err(|e| Error::io(path, e))?, backend_tag)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("embedding cache is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Embed every sample, reusing cached vectors. Missing ones are computed in
/// parallel and only inserted once all of them succeeded, so a failing
/// backend leaves the cache untouched.
pub fn embed_all(
    embedder: &dyn Embedder,
    cache: &mut EmbeddingCache,
    samples: &[(String, Image<f32>)],
) -> Result<Vec<Embedding>> {
    if cache.backend_tag() != embedder.tag() {
        return Err(Error::InvalidInput(format!(
            "cache holds {:?} embeddings, backend is {:?}",
            cache.backend_tag(),
            embedder.tag()
        )));
    }
    let fresh: Vec<(String, Vec<f32>)> = samples
        .par_iter()
        .filter(|(id, _)| cache.get(id).is_none())
        .map(|(id, img)| embedder.embed(id, img).map(|v| (id.clone(), v)))
        .collect::<Result<_>>()?;
    let mut staged = cache.clone();
    for (id, v) in fresh {
        staged.insert(id, v)?;
    }
    *cache = staged;
    Ok(samples
        .iter()
        .map(|(id, _)| Embedding {
            sample_id: id.clone(),
            vector: cache.get(id).expect("just inserted").to_vec(),
        })
        .collect())
}
