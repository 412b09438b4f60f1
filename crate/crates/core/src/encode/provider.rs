//! Embedding providers for captions and product images.

use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::time::Duration;

use base64::Engine;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::captions::split_pieces;
use crate::error::{Error, Result};
use crate::util::{hash_str, mix64, sha256_hex};

/// Text and image encoder behind a fixed-dimension contract. Items carry
/// the product id so that lookup-based providers can resolve them.
pub trait EmbeddingProvider: Send + Sync {
    fn name(&self) -> &str;
    fn text_dim(&self) -> usize;
    fn image_dim(&self) -> usize;
    /// Identifies the exact encoder; rows from different fingerprints are
    /// not comparable.
    fn fingerprint(&self) -> String;

    fn embed_text(&self, id: &str, caption: &str) -> Result<Vec<f64>>;
    fn embed_image(&self, id: &str, image_ref: &str) -> Result<Vec<f64>>;

    fn embed_texts(&self, items: &[(&str, &str)]) -> Result<Vec<Vec<f64>>> {
        items.par_iter().map(|(id, t)| self.embed_text(id, t)).collect()
    }

    fn embed_images(&self, items: &[(&str, &str)]) -> Result<Vec<Vec<f64>>> {
        items.par_iter().map(|(id, r)| self.embed_image(id, r)).collect()
    }
}

pub const BUILTIN_DIM: usize = 512;

fn l2_normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Signed feature hashing into `dim` buckets.
fn hash_into(v: &mut [f64], key: u64) {
    let h = mix64(key);
    let idx = (h % v.len() as u64) as usize;
    v[idx] += if h >> 63 == 0 { 1.0 } else { -1.0 };
}

/// Deterministic, dependency-free provider: hashed word uni/bigrams for
/// text, hashed byte 4-grams of the image file for images. Outputs are
/// L2-normalized; empty input gives the zero vector.
#[derive(Debug, Clone)]
pub struct BuiltinProvider {
    image_root: PathBuf,
}

impl BuiltinProvider {
    /// Relative image refs resolve against `image_root`.
    pub fn new(image_root: impl Into<PathBuf>) -> Self {
        BuiltinProvider {
            image_root: image_root.into(),
        }
    }

    pub fn resolve(&self, image_ref: &str) -> PathBuf {
        resolve_image(&self.image_root, image_ref)
    }

    pub fn text_vector(caption: &str) -> Vec<f64> {
        let mut v = vec![0.0; BUILTIN_DIM];
        for piece in split_pieces(caption) {
            let lowered = piece.to_lowercase();
            let tokens: Vec<&str> = lowered
                .split(|c: char| !(c.is_alphanumeric() || c == '-'))
                .filter(|t| !t.is_empty())
                .collect();
            for t in &tokens {
                hash_into(&mut v, hash_str(&format!("u:{t}")));
            }
            for w in tokens.windows(2) {
                hash_into(&mut v, hash_str(&format!("b:{} {}", w[0], w[1])));
            }
        }
        l2_normalize(&mut v);
        v
    }

    pub fn image_vector(bytes: &[u8]) -> Vec<f64> {
        let mut v = vec![0.0; BUILTIN_DIM];
        for w in bytes.windows(4) {
            let key = u32::from_le_bytes([w[0], w[1], w[2], w[3]]) as u64;
            hash_into(&mut v, key ^ 0x1f3d_5b79_a2c4_e6f8);
        }
        l2_normalize(&mut v);
        v
    }
}

pub(crate) fn resolve_image(root: &Path, image_ref: &str) -> PathBuf {
    let p = Path::new(image_ref);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

pub(crate) fn read_image(root: &Path, image_ref: &str) -> Result<Vec<u8>> {
    let path = resolve_image(root, image_ref);
    std::fs::read(&path).map_err(|e| Error::Image {
        image_ref: image_ref.to_string(),
        message: format!("{}: {e}", path.display()),
    })
}

impl EmbeddingProvider for BuiltinProvider {
    fn name(&self) -> &str {
        "builtin"
    }

    fn text_dim(&self) -> usize {
        BUILTIN_DIM
    }

    fn image_dim(&self) -> usize {
        BUILTIN_DIM
    }

    fn fingerprint(&self) -> String {
        format!("builtin-v1:text{BUILTIN_DIM}:image{BUILTIN_DIM}")
    }

    fn embed_text(&self, _id: &str, caption: &str) -> Result<Vec<f64>> {
        Ok(Self::text_vector(caption))
    }

    /// An empty reference means "no image" and embeds to zeros.
    fn embed_image(&self, _id: &str, image_ref: &str) -> Result<Vec<f64>> {
        if image_ref.is_empty() {
            return Ok(vec![0.0; BUILTIN_DIM]);
        }
        Ok(Self::image_vector(&read_image(&self.image_root, image_ref)?))
    }
}

/// One line of a precomputed-embedding file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: String,
    pub text: Vec<f32>,
    pub image: Vec<f32>,
}

/// Embeddings looked up by product id from a JSONL file.
#[derive(Debug, Clone)]
pub struct FileProvider {
    records: HashMap<String, (Vec<f64>, Vec<f64>)>,
    text_dim: usize,
    image_dim: usize,
    digest: String,
}

impl FileProvider {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let digest = sha256_hex(&bytes);
        let name = path.display().to_string();
        let mut records = HashMap::new();
        let mut dims: Option<(usize, usize)> = None;
        for (i, line) in BufReader::new(bytes.as_slice()).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: EmbeddingRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: name.clone(),
                record: i + 1,
                message: e.to_string(),
            })?;
            let d = (rec.text.len(), rec.image.len());
            match dims {
                None => dims = Some(d),
                Some(expect) if expect != d => {
                    return Err(Error::Dimension(format!(
                        "{name}: record {} has dims {d:?}, expected {expect:?}",
                        i + 1
                    )))
                }
                _ => {}
            }
            let widen = |v: Vec<f32>| v.into_iter().map(f64::from).collect::<Vec<f64>>();
            if records
                .insert(rec.id.clone(), (widen(rec.text), widen(rec.image)))
                .is_some()
            {
                return Err(Error::invalid(format!("{name}: duplicate embedding id {:?}", rec.id)));
            }
        }
        let (text_dim, image_dim) = dims.ok_or_else(|| Error::empty(format!("{name} has no embeddings")))?;
        Ok(FileProvider {
            records,
            text_dim,
            image_dim,
            digest,
        })
    }

    fn lookup(&self, id: &str) -> Result<&(Vec<f64>, Vec<f64>)> {
        self.records
            .get(id)
            .ok_or_else(|| Error::invalid(format!("no precomputed embedding for id {id:?}")))
    }
}

impl EmbeddingProvider for FileProvider {
    fn name(&self) -> &str {
        "file"
    }

    fn text_dim(&self) -> usize {
        self.text_dim
    }

    fn image_dim(&self) -> usize {
        self.image_dim
    }

    fn fingerprint(&self) -> String {
        format!("file:{}", self.digest)
    }

    fn embed_text(&self, id: &str, _caption: &str) -> Result<Vec<f64>> {
        Ok(self.lookup(id)?.0.clone())
    }

    fn embed_image(&self, id: &str, _image_ref: &str) -> Result<Vec<f64>> {
        Ok(self.lookup(id)?.1.clone())
    }
}

/// Largest batch the embedding service accepts.
pub const MAX_BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedKind {
    Text,
    Image,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedItem {
    pub id: String,
    /// UTF-8 text, or base64 image bytes.
    pub payload: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub kind: EmbedKind,
    pub items: Vec<EmbedItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedVector {
    pub id: String,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub model_name: String,
    pub dim: usize,
    pub vectors: Vec<EmbedVector>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub model_name: String,
    pub text_dim: usize,
    pub image_dim: usize,
    pub version: String,
}

/// Client for the HTTP embedding service (`GET /health`, `POST /embed`).
pub struct RemoteProvider {
    base_url: String,
    agent: ureq::Agent,
    health: HealthResponse,
    image_root: PathBuf,
    retries: u32,
}

impl RemoteProvider {
    /// Probes `/health` and adopts the dims the service declares.
    pub fn connect(base_url: &str, image_root: impl Into<PathBuf>, timeout: Duration, retries: u32) -> Result<Self> {
        let base_url = base_url.trim_end_matches('/').to_string();
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        let url = format!("{base_url}/health");
        let health: HealthResponse = with_retries(&url, retries, || {
            let mut resp = agent.get(&url).call().map_err(|e| e.to_string())?;
            resp.body_mut()
                .read_json::<HealthResponse>()
                .map_err(|e| e.to_string())
        })?;
        if health.status != "ok" {
            return Err(Error::Remote {
                url,
                attempts: 1,
                message: format!("service not ready: status {:?}", health.status),
            });
        }
        Ok(RemoteProvider {
            base_url,
            agent,
            health,
            image_root: image_root.into(),
            retries,
        })
    }

    pub fn health(&self) -> &HealthResponse {
        &self.health
    }

    fn embed_batch(&self, kind: EmbedKind, items: Vec<EmbedItem>) -> Result<Vec<Vec<f64>>> {
        let expect_dim = match kind {
            EmbedKind::Text => self.health.text_dim,
            EmbedKind::Image => self.health.image_dim,
        };
        let url = format!("{}/embed", self.base_url);
        let mut out = Vec::with_capacity(items.len());
        for chunk in items.chunks(MAX_BATCH) {
            let request = EmbedRequest {
                kind,
                items: chunk.to_vec(),
            };
            let response: EmbedResponse = with_retries(&url, self.retries, || {
                let mut resp = self
                    .agent
                    .post(&url)
                    .send_json(&request)
                    .map_err(|e| e.to_string())?;
                resp.body_mut()
                    .read_json::<EmbedResponse>()
                    .map_err(|e| e.to_string())
            })?;
            let mut by_id: HashMap<String, Vec<f64>> = HashMap::new();
            for v in response.vectors {
                if v.vector.len() != expect_dim {
                    return Err(Error::Dimension(format!(
                        "{url}: vector for {:?} has dim {}, service declared {expect_dim}",
                        v.id,
                        v.vector.len()
                    )));
                }
                if by_id.insert(v.id.clone(), v.vector).is_some() {
                    return Err(Error::invalid(format!("{url}: id {:?} answered twice", v.id)));
                }
            }
            if by_id.len() != chunk.len() {
                return Err(Error::invalid(format!(
                    "{url}: {} vectors for {} items",
                    by_id.len(),
                    chunk.len()
                )));
            }
            for item in chunk {
                out.push(by_id.remove(&item.id).ok_or_else(|| {
                    Error::invalid(format!("{url}: no vector for id {:?}", item.id))
                })?);
            }
        }
        Ok(out)
    }
}

fn with_retries<T>(url: &str, retries: u32, mut call: impl FnMut() -> std::result::Result<T, String>) -> Result<T> {
    let mut attempts = 0;
    loop {
        attempts += 1;
        match call() {
            Ok(v) => return Ok(v),
            Err(message) if attempts > retries => {
                return Err(Error::Remote {
                    url: url.to_string(),
                    attempts,
                    message,
                })
            }
            Err(message) => {
                log::warn!("{url}: attempt {attempts} failed: {message}");
                std::thread::sleep(Duration::from_millis(100 * attempts as u64));
            }
        }
    }
}

/// Ids in one request must be unique; positions are appended to keep the
/// wire ids distinct even when callers repeat a product id.
fn unique_items(items: &[(&str, &str)], payload: impl Fn(&str) -> Result<String>) -> Result<Vec<EmbedItem>> {
    items
        .iter()
        .enumerate()
        .map(|(i, (id, p))| {
            Ok(EmbedItem {
                id: format!("{i}:{id}"),
                payload: payload(p)?,
            })
        })
        .collect()
}

impl EmbeddingProvider for RemoteProvider {
    fn name(&self) -> &str {
        "remote"
    }

    fn text_dim(&self) -> usize {
        self.health.text_dim
    }

    fn image_dim(&self) -> usize {
        self.health.image_dim
    }

    fn fingerprint(&self) -> String {
        format!("remote:{}:{}", self.health.model_name, self.health.version)
    }

    fn embed_text(&self, id: &str, caption: &str) -> Result<Vec<f64>> {
        Ok(self.embed_texts(&[(id, caption)])?.remove(0))
    }

    fn embed_image(&self, id: &str, image_ref: &str) -> Result<Vec<f64>> {
        Ok(self.embed_images(&[(id, image_ref)])?.remove(0))
    }

    fn embed_texts(&self, items: &[(&str, &str)]) -> Result<Vec<Vec<f64>>> {
        self.embed_batch(EmbedKind::Text, unique_items(items, |t| Ok(t.to_string()))?)
    }

    /// Products without an image get a zero vector, as with the builtin
    /// provider; only real images go over the wire.
    fn embed_images(&self, items: &[(&str, &str)]) -> Result<Vec<Vec<f64>>> {
        let engine = base64::engine::general_purpose::STANDARD;
        let present: Vec<(&str, &str)> = items.iter().copied().filter(|(_, r)| !r.is_empty()).collect();
        let mut vectors = if present.is_empty() {
            Vec::new()
        } else {
            self.embed_batch(
                EmbedKind::Image,
                unique_items(&present, |r| Ok(engine.encode(read_image(&self.image_root, r)?)))?,
            )?
        }
        .into_iter();
        Ok(items
            .iter()
            .map(|(_, r)| {
                if r.is_empty() {
                    vec![0.0; self.health.image_dim]
                } else {
                    vectors.next().expect("one vector per present image")
                }
            })
            .collect())
    }
}
